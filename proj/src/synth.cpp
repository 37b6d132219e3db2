#include "mirrormamba/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mirrormamba/mmtf.hpp"
#include "mirrormamba/parallel.hpp"

namespace mm {

using nlohmann::json;

std::string to_string(const CueSet& c) {
  if (c.depth && c.correspondence && c.flow) return "all";
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += '+';
    s += name;
  };
  add(c.depth, "depth");
  add(c.correspondence, "corr");
  add(c.flow, "flow");
  return s.empty() ? "none" : s;
}

CueSet parse_cues(const std::string& s) {
  if (s == "all") return {true, true, true};
  CueSet c;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, '+')) {
    if (part == "depth") c.depth = true;
    else if (part == "corr" || part == "correspondence") c.correspondence = true;
    else if (part == "flow") c.flow = true;
    else throw ArgumentError("unknown cue '" + part + "' in '" + s + "'");
  }
  if (c.empty()) throw ArgumentError("cue set must not be empty");
  return c;
}

void SceneSpec::validate() const {
  if (height == 0 || width == 0 || height % 32 || width % 32)
    throw ArgumentError("scene canvas must be a positive multiple of 32, got " + std::to_string(height) + "x" +
                        std::to_string(width));
  if (mirror_h == 0 || mirror_w == 0) throw ArgumentError("mirror rect must be non-empty");
  if (mirror_y < 1 || mirror_x < 1 || mirror_y + mirror_h + 1 > height || mirror_x + mirror_w + 1 > width)
    throw ArgumentError("mirror rect must lie strictly inside the canvas");
  if (cues.empty()) throw ArgumentError("cue set must not be empty");
  if (!(flow_norm > 0)) throw ArgumentError("flow_norm must be positive");
  if (noise_sigma < 0) throw ArgumentError("noise_sigma must be non-negative");
  if (cues.correspondence) {
    const bool horiz = axis == FlipAxis::kHorizontal;
    const std::size_t pos = horiz ? mirror_x : mirror_y, len = horiz ? mirror_w : mirror_h,
                      extent = horiz ? width : height;
    if (pos < len && pos + 2 * len > extent)
      throw ArgumentError("no room beside the mirror for its correspondence source patch");
  }
}

json to_json(const SceneSpec& s) {
  return json{{"height", s.height},
              {"width", s.width},
              {"mirror", {s.mirror_y, s.mirror_x, s.mirror_h, s.mirror_w}},
              {"axis", s.axis == FlipAxis::kHorizontal ? "horizontal" : "vertical"},
              {"cues", to_string(s.cues)},
              {"texture_seed", s.texture_seed},
              {"velocity", {s.velocity_x, s.velocity_y}},
              {"noise_sigma", s.noise_sigma},
              {"wall_depth", s.wall_depth},
              {"flow_norm", s.flow_norm}};
}

SceneSpec scene_spec_from_json(const json& j) {
  SceneSpec s;
  try {
    s.height = j.at("height");
    s.width = j.at("width");
    const auto& m = j.at("mirror");
    s.mirror_y = m.at(0);
    s.mirror_x = m.at(1);
    s.mirror_h = m.at(2);
    s.mirror_w = m.at(3);
    s.axis = j.at("axis").get<std::string>() == "vertical" ? FlipAxis::kVertical : FlipAxis::kHorizontal;
    s.cues = parse_cues(j.at("cues").get<std::string>());
    s.texture_seed = j.at("texture_seed");
    s.velocity_x = j.at("velocity").at(0);
    s.velocity_y = j.at("velocity").at(1);
    s.noise_sigma = j.at("noise_sigma");
    s.wall_depth = j.at("wall_depth");
    s.flow_norm = j.at("flow_norm");
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("scene spec: ") + e.what());
  }
  return s;
}

SceneSpec random_scene_spec(std::size_t height, std::size_t width, CueSet cues, double noise_sigma, Rng& rng) {
  std::uniform_real_distribution<double> frac(0.25, 0.40), unit(0.0, 1.0);
  SceneSpec s;
  s.height = height;
  s.width = width;
  s.cues = cues;
  s.noise_sigma = noise_sigma;
  s.mirror_h = std::size_t(std::lround(frac(rng) * double(height)));
  s.mirror_w = std::size_t(std::lround(frac(rng) * double(width)));
  s.axis = unit(rng) < 0.5 ? FlipAxis::kHorizontal : FlipAxis::kVertical;
  auto uniform_pos = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  // Along the flip axis the mirror leaves a full patch free on one side.
  auto place = [&](std::size_t extent, std::size_t len, bool along_axis) {
    if (!along_axis) return uniform_pos(1, extent - len - 1);
    const bool source_before = unit(rng) < 0.5;
    return source_before ? uniform_pos(len, extent - len - 1) : uniform_pos(1, extent - 2 * len);
  };
  s.mirror_y = place(height, s.mirror_h, s.axis == FlipAxis::kVertical);
  s.mirror_x = place(width, s.mirror_w, s.axis == FlipAxis::kHorizontal);
  s.texture_seed = rng();
  const double angle = unit(rng) * 2.0 * M_PI, speed = 1.5 + 1.5 * unit(rng);
  s.velocity_x = speed * std::cos(angle);
  s.velocity_y = speed * std::sin(angle);
  s.wall_depth = 0.2 + 0.4 * unit(rng);
  return s;
}

std::pair<std::size_t, std::size_t> correspondence_source(const SceneSpec& s) {
  if (s.axis == FlipAxis::kHorizontal) {
    const bool left = s.mirror_x >= s.mirror_w &&
                      (s.mirror_x >= s.width - s.mirror_x - s.mirror_w || s.mirror_x + 2 * s.mirror_w > s.width);
    return {s.mirror_y, left ? s.mirror_x - s.mirror_w : s.mirror_x + s.mirror_w};
  }
  const bool above = s.mirror_y >= s.mirror_h &&
                     (s.mirror_y >= s.height - s.mirror_y - s.mirror_h || s.mirror_y + 2 * s.mirror_h > s.height);
  return {above ? s.mirror_y - s.mirror_h : s.mirror_y + s.mirror_h, s.mirror_x};
}

namespace {

double hash_unit(std::uint64_t seed, std::int64_t ix, std::int64_t iy, std::uint64_t salt) {
  const std::uint64_t h = mix_seed(mix_seed(seed, std::uint64_t(ix) * 0x632BE59BD9B4E019ULL + salt),
                                   std::uint64_t(iy));
  return double(h >> 11) * 0x1.0p-53;
}

/// Smooth lattice noise in [0,1]; continuous in (x, y).
double value_noise(std::uint64_t seed, double x, double y, double cell, std::uint64_t salt) {
  const double fx = x / cell, fy = y / cell;
  const double x0 = std::floor(fx), y0 = std::floor(fy);
  const auto ix = std::int64_t(x0), iy = std::int64_t(y0);
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
  const double tx = smooth(fx - x0), ty = smooth(fy - y0);
  const double a = hash_unit(seed, ix, iy, salt), b = hash_unit(seed, ix + 1, iy, salt);
  const double c = hash_unit(seed, ix, iy + 1, salt), d = hash_unit(seed, ix + 1, iy + 1, salt);
  return (a + (b - a) * tx) + ((c + (d - c) * tx) - (a + (b - a) * tx)) * ty;
}

double fractal_noise(std::uint64_t seed, double x, double y, std::uint64_t salt) {
  static constexpr double kCells[] = {24.0, 12.0, 6.0, 3.0};
  static constexpr double kWeights[] = {0.45, 0.25, 0.18, 0.12};
  double v = 0.0;
  for (std::size_t o = 0; o < 4; ++o) v += kWeights[o] * value_noise(seed, x, y, kCells[o], salt * 16 + o);
  return v;
}

struct Primitive {
  bool disc;
  double cx, cy, rx, ry;
  double color[3];
};

/// Stationary background over world coordinates: value-noise texture with
/// rectangles and discs scattered uniformly over a region much larger than
/// the canvas, so translated frames see a consistent world.
class World {
 public:
  World(std::uint64_t seed, double height, double width) : seed_(seed) {
    Rng rng(mix_seed(seed, 7));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int c = 0; c < 3; ++c) {
      lo_[c] = 0.1 + 0.4 * u(rng);
      hi_[c] = 0.5 + 0.4 * u(rng);
    }
    const double area = 9.0 * height * width;
    const auto count = std::size_t(area / (24.0 * 24.0));
    for (std::size_t i = 0; i < count; ++i) {
      Primitive p;
      p.disc = u(rng) < 0.5;
      p.cx = -width + 3.0 * width * u(rng);
      p.cy = -height + 3.0 * height * u(rng);
      p.rx = 2.0 + 7.0 * u(rng);
      p.ry = 2.0 + 7.0 * u(rng);
      for (double& c : p.color) c = u(rng);
      prims_.push_back(p);
    }
  }

  void rgb(double x, double y, float out[3]) const {
    const double base = fractal_noise(seed_, x, y, 1);
    double col[3];
    for (int c = 0; c < 3; ++c)
      col[c] = lo_[c] + (hi_[c] - lo_[c]) * base + 0.25 * (fractal_noise(seed_, x, y, 2 + c) - 0.5);
    for (auto it = prims_.rbegin(); it != prims_.rend(); ++it) {
      const double dx = (x - it->cx) / it->rx, dy = (y - it->cy) / it->ry;
      const bool inside = it->disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
      if (inside) {
        for (int c = 0; c < 3; ++c) col[c] = it->color[c];
        break;
      }
    }
    for (int c = 0; c < 3; ++c) out[c] = float(std::clamp(col[c], 0.0, 1.0));
  }

  double wall_texture(double x, double y) const { return 0.1 * (fractal_noise(seed_, x, y, 9) - 0.5); }

 private:
  std::uint64_t seed_;
  double lo_[3], hi_[3];
  std::vector<Primitive> prims_;
};

Sample render_frame(const SceneSpec& s, std::uint64_t seed, std::size_t frame) {
  const std::size_t h = s.height, w = s.width, hw = h * w;
  const World world(mix_seed(s.texture_seed, seed), double(h), double(w));
  const double ox = double(frame) * s.velocity_x, oy = double(frame) * s.velocity_y;
  const auto [src_y, src_x] = correspondence_source(s);

  Sample out;
  out.spec = s;
  out.rgb = Tensor<float>({3, h, w});
  out.depth = Tensor<float>({3, h, w});
  out.flow = Tensor<float>({3, h, w});
  out.mask = Tensor<float>({1, h, w});

  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const bool inside = y >= s.mirror_y && y < s.mirror_y + s.mirror_h && x >= s.mirror_x &&
                          x < s.mirror_x + s.mirror_w;
      // Pixel whose content this pixel shows.
      std::size_t py = y, px = x;
      if (inside && s.cues.correspondence) {
        const std::size_t ly = y - s.mirror_y, lx = x - s.mirror_x;
        if (s.axis == FlipAxis::kHorizontal) {
          py = src_y + ly;
          px = src_x + (s.mirror_w - 1 - lx);
        } else {
          py = src_y + (s.mirror_h - 1 - ly);
          px = src_x + lx;
        }
      }
      float col[3];
      world.rgb(double(px) + ox, double(py) + oy, col);
      const std::size_t i = y * w + x;
      for (int c = 0; c < 3; ++c) out.rgb[c * hw + i] = col[c];

      float d = float(s.wall_depth + world.wall_texture(double(x) + ox, double(y) + oy));
      if (inside && s.cues.depth) d = kFarPlane;
      for (int c = 0; c < 3; ++c) out.depth[c * hw + i] = d;

      const double factor = inside && s.cues.flow ? kFlowReflectionFactor : 1.0;
      const double u = -factor * s.velocity_x, v = -factor * s.velocity_y;
      out.flow[i] = float(u / s.flow_norm);
      out.flow[hw + i] = float(v / s.flow_norm);
      out.flow[2 * hw + i] = float(std::hypot(u, v) / s.flow_norm);
      out.mask[i] = inside ? 1.0f : 0.0f;
    }
  }

  if (s.noise_sigma > 0) {
    Rng rng(mix_seed(mix_seed(seed, 0xA5), frame));
    std::normal_distribution<double> n(0.0, s.noise_sigma);
    for (auto& v : out.rgb.vec()) v = float(std::clamp(double(v) + n(rng), 0.0, 1.0));
    for (std::size_t i = 0; i < hw; ++i) {
      const float d = float(std::clamp(double(out.depth[i]) + n(rng), 0.0, 1.0));
      for (int c = 0; c < 3; ++c) out.depth[c * hw + i] = d;
    }
    for (auto& v : out.flow.vec()) v = float(double(v) + n(rng));
  }
  return out;
}

}  // namespace

Sample generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  return render_frame(spec, seed, 0);
}

std::vector<Sample> generate_sequence(const SceneSpec& spec, std::uint64_t seed, std::size_t frames) {
  spec.validate();
  if (frames < 2) throw ArgumentError("generate_sequence: need at least 2 frames");
  std::vector<Sample> seq;
  for (std::size_t t = 0; t < frames; ++t) seq.push_back(render_frame(spec, seed, t));
  // Constant velocity makes every t -> t+1 field the same; the last frame
  // takes its predecessor's field explicitly.
  seq.back().flow = seq[frames - 2].flow.clone();
  return seq;
}

CueMix parse_cue_mix(const std::string& s) {
  if (s == "mixed") return {{"depth", 1.0}, {"corr", 1.0}, {"flow", 1.0}};
  CueMix mix;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto colon = part.find(':');
    const std::string name = part.substr(0, colon);
    double weight = 1.0;
    if (colon != std::string::npos) {
      try {
        weight = std::stod(part.substr(colon + 1));
      } catch (const std::exception&) {
        throw ArgumentError("bad cue weight in '" + part + "'");
      }
    }
    if (!(weight > 0)) throw ArgumentError("cue weight must be positive in '" + part + "'");
    mix[to_string(parse_cues(name))] += weight;
  }
  if (mix.empty()) throw ArgumentError("empty cue mix");
  return mix;
}

CueSet cue_for_index(const CueMix& mix, std::size_t i, std::size_t n) {
  if (mix.empty()) throw ArgumentError("empty cue mix");
  const double total = std::accumulate(mix.begin(), mix.end(), 0.0, [](double a, const auto& kv) { return a + kv.second; });
  const double u = (double(i) + 0.5) / double(n) * total;
  double acc = 0.0;
  for (const auto& [name, weight] : mix) {
    acc += weight;
    if (u < acc) return parse_cues(name);
  }
  return parse_cues(mix.rbegin()->first);
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, int split, std::size_t index) {
  return mix_seed(mix_seed(dataset_seed, std::uint64_t(split) + 1), index);
}

void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != height * width) throw DimensionError("write_pgm: pixel count does not match size");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P5\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()), std::streamsize(pixels.size()));
}

std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  std::size_t maxval = 0;
  is >> magic >> width >> height >> maxval;
  if (magic != "P5" || maxval != 255 || !is) throw FormatError("not an 8-bit P5 greymap: " + path.string(), 0);
  is.get();
  const auto offset = std::uint64_t(is.tellg());
  std::vector<std::uint8_t> px(height * width);
  if (!is.read(reinterpret_cast<char*>(px.data()), std::streamsize(px.size())))
    throw FormatError("greymap truncated: " + path.string(), offset);
  return px;
}

json make_dataset(std::size_t n_train, std::size_t n_test, const CueMix& cue_mix, std::uint64_t seed,
                  const std::filesystem::path& out_dir, const DatasetOptions& opts) {
  if (n_train < 1 || n_test < 1) throw ArgumentError("make_dataset: both splits need at least one sample");
  std::filesystem::create_directories(out_dir);
  const std::size_t counts[2] = {n_train, n_test};
  const char* names[2] = {"train", "test"};
  // Every sample depends only on (seed, split, index), so generation runs in
  // parallel and the manifest is assembled in index order afterwards.
  std::vector<json> entries(n_train + n_test);
  parallel_for(entries.size(), [&](std::size_t k) {
    const int split = k < n_train ? 0 : 1;
    const std::size_t i = split ? k - n_train : k;
    const std::uint64_t s = sample_seed(seed, split, i);
    Rng rng(s);
    const auto spec =
        random_scene_spec(opts.height, opts.width, cue_for_index(cue_mix, i, counts[split]), opts.noise_sigma, rng);
    const auto sample = generate_scene(spec, s);
    char id[32];
    std::snprintf(id, sizeof id, "%s_%05zu", names[split], i);
    save_mmtf(out_dir / (std::string(id) + "_rgb.mmtf"), sample.rgb);
    save_mmtf(out_dir / (std::string(id) + "_depth.mmtf"), sample.depth);
    save_mmtf(out_dir / (std::string(id) + "_flow.mmtf"), sample.flow);
    std::vector<std::uint8_t> px(sample.mask.numel());
    for (std::size_t p = 0; p < px.size(); ++p) px[p] = sample.mask[p] > 0.5f ? 255 : 0;
    write_pgm(out_dir / (std::string(id) + "_mask.pgm"), opts.height, opts.width, px);
    entries[k] = json{{"id", id}, {"split", names[split]}, {"seed", s}, {"spec", to_json(spec)}};
  });
  json samples(entries);
  json mix = json::object();
  for (const auto& [k, v] : cue_mix) mix[k] = v;
  json manifest{{"format", "mirrormamba-synth"},
                {"version", 1},
                {"seed", seed},
                {"height", opts.height},
                {"width", opts.width},
                {"noise_sigma", opts.noise_sigma},
                {"cue_mix", mix},
                {"n_train", n_train},
                {"n_test", n_test},
                {"samples", samples}};
  std::ofstream os(out_dir / "manifest.json");
  os << manifest.dump(1) << "\n";
  return manifest;
}

Dataset Dataset::open(const std::filesystem::path& dir) {
  Dataset d;
  d.dir = dir;
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("no manifest.json in " + dir.string());
  try {
    is >> d.manifest;
    for (const auto& s : d.manifest.at("samples"))
      d.entries.push_back({s.at("id"), s.at("split"), scene_spec_from_json(s.at("spec"))});
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest.json malformed: ") + e.what(), 0);
  }
  return d;
}

std::vector<std::size_t> Dataset::split_indices(const std::string& split) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == split) idx.push_back(i);
  return idx;
}

Sample Dataset::load(std::size_t index) const {
  const auto& e = entries.at(index);
  Sample s;
  s.spec = e.spec;
  s.rgb = load_mmtf<float>(dir / (e.id + "_rgb.mmtf"));
  s.depth = load_mmtf<float>(dir / (e.id + "_depth.mmtf"));
  s.flow = load_mmtf<float>(dir / (e.id + "_flow.mmtf"));
  std::size_t h = 0, w = 0;
  const auto px = read_pgm(dir / (e.id + "_mask.pgm"), h, w);
  s.mask = Tensor<float>({1, h, w});
  for (std::size_t i = 0; i < px.size(); ++i) s.mask[i] = px[i] >= 128 ? 1.0f : 0.0f;
  return s;
}

}  // namespace mm
