#include "mirrormamba/model.hpp"

#include <fstream>
#include <sstream>

#include "mirrormamba/mmtf.hpp"
#include "mirrormamba/ops.hpp"

namespace mm {

using nlohmann::json;

std::string to_string(Mode mode) { return mode == Mode::kImage ? "image" : "video"; }

Mode parse_mode(const std::string& s) {
  if (s == "image") return Mode::kImage;
  if (s == "video") return Mode::kVideo;
  throw ArgumentError("unknown mode '" + s + "' (expected image or video)");
}

namespace {

const char* gate_name(GateTarget g) { return g == GateTarget::kT ? "T" : "F2"; }

const char* directions_name(ScanDirections d) {
  switch (d) {
    case ScanDirections::kHorizontalOnly: return "horizontal";
    case ScanDirections::kVerticalOnly: return "vertical";
    default: return "both";
  }
}

ScanDirections parse_directions(const std::string& s) {
  if (s == "both") return ScanDirections::kHorizontalVertical;
  if (s == "horizontal") return ScanDirections::kHorizontalOnly;
  if (s == "vertical") return ScanDirections::kVerticalOnly;
  throw ArgumentError("unknown scan directions '" + s + "'");
}

}  // namespace

json to_json(const ModelConfig& cfg) {
  return json{{"mode", to_string(cfg.mode)},
              {"base_channels", cfg.backbone.base_channels},
              {"stage_depths", cfg.backbone.stage_depths},
              {"d_state", cfg.d_state},
              {"gate", gate_name(cfg.gate)},
              {"use_mmce", cfg.use_mmce},
              {"use_bed", cfg.use_bed},
              {"directions", directions_name(cfg.directions)},
              {"use_depth", cfg.use_depth},
              {"use_flow", cfg.use_flow},
              {"seed", cfg.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.mode = parse_mode(j.value("mode", std::string("video")));
    c.backbone.base_channels = j.value("base_channels", c.backbone.base_channels);
    if (j.contains("stage_depths")) c.backbone.stage_depths = j.at("stage_depths").get<std::array<std::size_t, 4>>();
    c.d_state = j.value("d_state", c.d_state);
    const auto gate = j.value("gate", std::string("T"));
    if (gate != "T" && gate != "F2") throw ArgumentError("unknown gate target '" + gate + "'");
    c.gate = gate == "T" ? GateTarget::kT : GateTarget::kF2;
    c.use_mmce = j.value("use_mmce", true);
    c.use_bed = j.value("use_bed", true);
    c.directions = parse_directions(j.value("directions", std::string("both")));
    c.use_depth = j.value("use_depth", true);
    c.use_flow = j.value("use_flow", true);
    c.seed = j.value("seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("model config: ") + e.what());
  }
  if (c.d_state == 0) throw ArgumentError("model config: d_state must be positive");
  return c;
}

template <typename T>
MirrorMamba<T>::MirrorMamba(const ModelConfig& cfg) : cfg_(cfg) {
  Rng rng(cfg.seed);
  backbone = Backbone<T>(cfg.backbone, cfg.d_state, rng);
  for (std::size_t i = 0; i < 4; ++i)
    mmce[i] = MmceLevel<T>::init(cfg.backbone.channels(i), cfg.modalities(), cfg.d_state, rng, cfg.use_mmce,
                                 cfg.gate, cfg.directions);
  for (std::size_t i = 0; i < 4; ++i)
    bed[i] = BedLevel<T>::init(cfg.backbone.channels(i), i ? cfg.backbone.channels(i - 1) : 0, cfg.d_state, rng,
                               cfg.use_bed);
}

template <typename T>
ModelOutput<T> MirrorMamba<T>::forward(const std::vector<Tensor<T>>& inputs) const {
  const std::size_t k = cfg_.modalities();
  if (inputs.size() != k)
    throw ArgumentError(to_string(cfg_.mode) + " mode expects " + std::to_string(k) + " inputs, got " +
                        std::to_string(inputs.size()));
  for (const auto& x : inputs)
    if (x.rank() != 4 || x.dim(1) != 3 || x.shape() != inputs[0].shape())
      throw DimensionError("forward: every input must be [B,3,H,W] with one shared shape, got " +
                           shape_str(x.shape()) + " and " + shape_str(inputs[0].shape()));
  const std::size_t b = inputs[0].dim(0), h = inputs[0].dim(2), w = inputs[0].dim(3);

  std::vector<Tensor<T>> feed(inputs);
  if (!cfg_.use_depth) feed[1] = Tensor<T>::zeros(feed[1].shape());
  if (k == 3 && !cfg_.use_flow) feed[2] = Tensor<T>::zeros(feed[2].shape());

  // One backbone pass over all modalities stacked along the batch axis.
  auto pyr = backbone.extract_pyramid(concat(feed, 0));
  std::array<Tensor<T>, 4> f_out;
  for (std::size_t i = 0; i < 4; ++i)
    f_out[i] = mmce[i].forward(split(pyr.levels[i], std::vector<std::size_t>(k, b), 0));

  ModelOutput<T> out;
  Tensor<T> running = f_out[3];
  for (std::size_t i = 4; i-- > 0;) {
    Tensor<T> refined = (i == 3 && !cfg_.use_bed) ? f_out[3] : bed[i].refine(f_out[i], running);
    out.level_logits[i] = bed[i].prediction_head(refined);
    if (i > 0) running = bed[i].expand_and_merge(refined, f_out[i]);
  }
  out.probability = sigmoid(bilinear_resize(out.level_logits[0], h, w));
  return out;
}

template <typename T>
ParamList<T> MirrorMamba<T>::parameters() const {
  ParamList<T> p;
  backbone.collect("backbone.", p);
  for (std::size_t i = 0; i < 4; ++i) mmce[i].collect("mmce" + std::to_string(i + 1) + ".", p);
  for (std::size_t i = 0; i < 4; ++i) bed[i].collect("bed" + std::to_string(i + 1) + ".", p);
  return p;
}

template <typename T>
std::vector<CensusRow> MirrorMamba<T>::parameter_census() const {
  std::vector<CensusRow> rows;
  for (const auto& p : parameters()) rows.push_back({p.name, p.value.shape(), p.value.numel()});
  return rows;
}

template <typename T>
std::size_t MirrorMamba<T>::parameter_total() const {
  return param_count(parameters());
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    index.push_back({{"name", name}, {"offset", offset}, {"shape", t.shape()}});
    offset += mmtf_size(t.shape());
  }
  const json header{{"config", ckpt.config}, {"step", ckpt.step}, {"state", ckpt.state}, {"tensors", index}};
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write("MMCK", 4);
  io::put_u32(os, kCheckpointVersion);
  io::put_u64(os, text.size());
  os.write(text.data(), std::streamsize(text.size()));
  for (const auto& [name, t] : ckpt.tensors) write_mmtf(os, t);
  if (!os) throw std::runtime_error("write failed for checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << f.rdbuf();
  const std::string bytes = buf.str();
  std::istringstream is(bytes);

  std::uint64_t off = 0;
  char magic[4] = {};
  if (!is.read(magic, 4)) throw FormatError("checkpoint truncated in magic", off);
  if (std::string(magic, 4) != "MMCK") throw FormatError("bad checkpoint magic", off);
  off = 4;
  const auto version = io::get_u32(is, off);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), off - 4);
  const auto header_len = io::get_u64(is, off);
  if (header_len > bytes.size() - off) throw FormatError("checkpoint header runs past end of file", off);
  json header;
  try {
    header = json::parse(bytes.substr(off, header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what(), off);
  }
  const std::uint64_t payload = off + header_len;
  is.seekg(std::streamoff(payload));

  Checkpoint ck;
  try {
    ck.config = header.at("config");
    ck.step = header.at("step").get<std::uint64_t>();
    ck.state = header.value("state", json::object());
    std::uint64_t expect = 0;
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto rel = entry.at("offset").get<std::uint64_t>();
      const auto shape = entry.at("shape").get<Shape>();
      if (rel != expect) throw FormatError("index offset mismatch for '" + name + "'", payload + rel);
      auto t = read_mmtf<float>(is, payload + rel);
      if (t.shape() != shape)
        throw FormatError("tensor '" + name + "' shape disagrees with index", payload + rel);
      expect += mmtf_size(shape);
      ck.tensors.emplace(name, std::move(t));
    }
    if (payload + expect != bytes.size()) throw FormatError("trailing bytes after last tensor", payload + expect);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header malformed: ") + e.what(), 16);
  }
  return ck;
}

template <typename T>
Checkpoint make_checkpoint(const MirrorMamba<T>& model, std::uint64_t step) {
  Checkpoint ck;
  ck.config = to_json(model.config());
  ck.step = step;
  for (const auto& p : model.parameters()) {
    Tensor<float> t(p.value.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = float(p.value[i]);
    ck.tensors.emplace(p.name, std::move(t));
  }
  return ck;
}

template <typename T>
void load_parameters(MirrorMamba<T>& model, const Checkpoint& ckpt) {
  auto params = model.parameters();
  std::string problems;
  for (const auto& p : params) {
    auto it = ckpt.tensors.find(p.name);
    if (it == ckpt.tensors.end())
      problems += "\n  missing '" + p.name + "'";
    else if (it->second.shape() != p.value.shape())
      problems += "\n  '" + p.name + "': checkpoint " + shape_str(it->second.shape()) + " vs model " +
                  shape_str(p.value.shape());
  }
  std::size_t model_names = 0;
  for (const auto& [name, t] : ckpt.tensors)
    if (name.rfind("adam.", 0) != 0) ++model_names;
  if (model_names != params.size())
    problems += "\n  checkpoint holds " + std::to_string(model_names) + " parameters, model has " +
                std::to_string(params.size());
  if (!problems.empty()) throw DimensionError("checkpoint does not fit this model:" + problems);
  for (auto& p : params) {
    const auto& src = ckpt.tensors.at(p.name);
    for (std::size_t i = 0; i < src.numel(); ++i) p.value[i] = T(src[i]);
  }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const MirrorMamba<T>& model, std::uint64_t step) {
  write_checkpoint(path, make_checkpoint(model, step));
}

MirrorMamba<float> load_checkpoint(const std::filesystem::path& path) {
  auto ck = read_checkpoint(path);
  MirrorMamba<float> model(model_config_from_json(ck.config));
  load_parameters(model, ck);
  return model;
}

template class MirrorMamba<float>;
template class MirrorMamba<double>;
template Checkpoint make_checkpoint(const MirrorMamba<float>&, std::uint64_t);
template Checkpoint make_checkpoint(const MirrorMamba<double>&, std::uint64_t);
template void load_parameters(MirrorMamba<float>&, const Checkpoint&);
template void load_parameters(MirrorMamba<double>&, const Checkpoint&);
template void save_checkpoint(const std::filesystem::path&, const MirrorMamba<float>&, std::uint64_t);
template void save_checkpoint(const std::filesystem::path&, const MirrorMamba<double>&, std::uint64_t);

}  // namespace mm
