#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "mirrormamba/mmtf.hpp"
#include "mirrormamba/model.hpp"
#include "mirrormamba/ops.hpp"
#include "test_util.hpp"

using namespace mm;
using mmtest::randn;
using mmtest::TempDir;

namespace {

ModelConfig small_config(Mode mode = Mode::kVideo) {
  ModelConfig c;
  c.mode = mode;
  c.backbone.base_channels = 4;
  c.backbone.stage_depths = {1, 1, 1, 1};
  c.d_state = 2;
  c.seed = 9;
  return c;
}

template <typename T>
std::vector<Tensor<T>> random_inputs(const ModelConfig& c, std::size_t b, std::size_t side, Rng& rng) {
  std::vector<Tensor<T>> in;
  for (std::size_t i = 0; i < c.modalities(); ++i) in.push_back(mmtest::randu<T>({b, 3, side, side}, rng));
  return in;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST(Model, OutputShapesAt96) {
  ModelConfig c = small_config();
  MirrorMamba<float> m(c);
  Rng rng(71);
  auto out = m.forward(random_inputs<float>(c, 1, 96, rng));
  const std::size_t sides[4] = {24, 12, 6, 3};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(out.level_logits[i].shape(), (Shape{1, 1, sides[i], sides[i]}));
  EXPECT_EQ(out.probability.shape(), (Shape{1, 1, 96, 96}));
  for (float v : out.probability.vec()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Model, DeterministicInitAndForward) {
  ModelConfig c = small_config(Mode::kImage);
  MirrorMamba<float> a(c), b(c);
  Rng rng(72);
  auto in = random_inputs<float>(c, 2, 32, rng);
  EXPECT_EQ(a.forward(in).probability.vec(), b.forward(in).probability.vec());
  EXPECT_EQ(a.forward(in).probability.vec(), a.forward(in).probability.vec());
}

TEST(Model, BatchPermutationEquivariance) {
  ModelConfig c = small_config();
  MirrorMamba<double> m(c);
  ParamList<double> ps = m.parameters();
  Rng rng(73);
  mmtest::randomize(ps, rng, 0.1);
  auto in = random_inputs<double>(c, 3, 32, rng);
  const std::vector<std::size_t> perm{2, 0, 1};
  std::vector<Tensor<double>> pin;
  for (const auto& x : in) {
    auto parts = split(x, {1, 1, 1}, 0);
    pin.push_back(concat<double>({parts[perm[0]], parts[perm[1]], parts[perm[2]]}, 0));
  }
  auto y = m.forward(in).probability, py = m.forward(pin).probability;
  const std::size_t n = 32 * 32;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < n; ++i) ASSERT_NEAR(py[k * n + i], y[perm[k] * n + i], 1e-12);
}

TEST(Model, InputContract) {
  MirrorMamba<float> m(small_config(Mode::kImage));
  Rng rng(74);
  auto video = random_inputs<float>(small_config(Mode::kVideo), 1, 32, rng);
  EXPECT_THROW(m.forward(video), ArgumentError);
  std::vector<Tensor<float>> odd{Tensor<float>(Shape{1, 3, 32, 32}), Tensor<float>(Shape{1, 3, 64, 32})};
  EXPECT_THROW(m.forward(odd), DimensionError);
  std::vector<Tensor<float>> bad{Tensor<float>(Shape{1, 3, 40, 40}), Tensor<float>(Shape{1, 3, 40, 40})};
  EXPECT_THROW(m.forward(bad), ArgumentError);
}

TEST(Model, EveryParameterReceivesGradient) {
  ModelConfig c = small_config();
  MirrorMamba<double> m(c);
  auto ps = m.parameters();
  Rng rng(75);
  // Zero-initialized residual read-outs make upstream gradients vanish
  // structurally, so start from a generic point.
  mmtest::randomize(ps, rng, 0.1);
  for (auto& p : ps)
    if (p.name.find("norm.g") != std::string::npos)
      for (auto& v : p.value.vec()) v += 1.0;
  // 64x64 keeps the coarsest map at 2x2: a length-1 scan never reaches A.
  auto in = random_inputs<double>(c, 1, 64, rng);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto out = m.forward(in);
  Tensor<double> loss = mean(out.probability);
  for (const auto& l : out.level_logits) loss = add(loss, mean(l));
  tape.backward(loss);
  for (const auto& p : ps) {
    bool any = false;
    for (double g : p.value.grad()) any |= g != 0.0;
    EXPECT_TRUE(any) << p.name;
  }
}

TEST(Census, TotalsAndImageVideoDiff) {
  MirrorMamba<float> img(small_config(Mode::kImage)), vid(small_config(Mode::kVideo));
  auto ci = img.parameter_census(), cv = vid.parameter_census();
  std::size_t total = 0;
  for (const auto& r : ci) total += r.count;
  EXPECT_EQ(total, img.parameter_total());
  ASSERT_EQ(ci.size(), cv.size());
  std::vector<std::string> differing;
  for (std::size_t i = 0; i < ci.size(); ++i) {
    ASSERT_EQ(ci[i].name, cv[i].name);
    if (ci[i].shape != cv[i].shape) {
      differing.push_back(ci[i].name);
      EXPECT_EQ(ci[i].shape[1] * 3, cv[i].shape[1] * 2) << ci[i].name;
    }
  }
  // Only the two compress convolutions of each extractor level.
  std::vector<std::string> expect;
  for (int l = 1; l <= 4; ++l) {
    expect.push_back("mmce" + std::to_string(l) + ".t.w");
    expect.push_back("mmce" + std::to_string(l) + ".f1.w");
  }
  std::sort(differing.begin(), differing.end());
  std::sort(expect.begin(), expect.end());
  EXPECT_EQ(differing, expect);
}

TEST(Census, DoublingBaseWidth) {
  ModelConfig a = small_config(), b = small_config();
  a.backbone.base_channels = 8;
  b.backbone.base_channels = 16;
  auto ca = MirrorMamba<float>(a).parameter_census(), cb = MirrorMamba<float>(b).parameter_census();
  ASSERT_EQ(ca.size(), cb.size());
  std::size_t conv_a = 0, conv_b = 0;
  for (std::size_t i = 0; i < ca.size(); ++i) {
    if (ca[i].shape.size() != 4) continue;
    const auto& s = ca[i].shape;
    // A kernel grows 4x when both widths scale with C1; fixed widths are the
    // 3 input channels, the single logit, and depthwise kernels.
    const bool fixed = s[1] == 3 || s[0] == 1 || s[1] == 1;
    EXPECT_EQ(cb[i].count, ca[i].count * (fixed ? 2 : 4)) << ca[i].name;
    conv_a += ca[i].count;
    conv_b += cb[i].count;
  }
  const double ratio = double(conv_b) / double(conv_a);
  EXPECT_GT(ratio, 3.5);
  EXPECT_LE(ratio, 4.0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ckpt");
  ModelConfig c = small_config();
  MirrorMamba<float> m(c);
  auto ps = m.parameters();
  Rng rng(76);
  mmtest::randomize(ps, rng, 0.1);
  save_checkpoint(dir / "a.mmck", m, 17);
  auto loaded = load_checkpoint(dir / "a.mmck");
  save_checkpoint(dir / "b.mmck", loaded, 17);
  EXPECT_EQ(slurp(dir / "a.mmck"), slurp(dir / "b.mmck"));
  auto in = random_inputs<float>(c, 1, 32, rng);
  EXPECT_EQ(m.forward(in).probability.vec(), loaded.forward(in).probability.vec());
  EXPECT_EQ(read_checkpoint(dir / "a.mmck").step, 17u);
}

TEST(Checkpoint, PayloadMatchesCensus) {
  TempDir dir("ckpt");
  MirrorMamba<float> m(small_config());
  save_checkpoint(dir / "m.mmck", m);
  const std::string bytes = slurp(dir / "m.mmck");
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= std::uint64_t(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  std::uint64_t expect = 0;
  for (const auto& r : m.parameter_census()) expect += mmtf_size(r.shape);
  EXPECT_EQ(bytes.size() - 16 - header_len, expect);
}

TEST(Checkpoint, TruncatedAndCorruptFilesAreRejected) {
  TempDir dir("ckpt");
  MirrorMamba<float> m(small_config());
  save_checkpoint(dir / "m.mmck", m);
  const std::string bytes = slurp(dir / "m.mmck");
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  };
  for (std::size_t cut : {3ul, 10ul, 40ul, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(load_checkpoint(write("cut.mmck", bytes.substr(0, cut))), FormatError) << cut;
  std::string magic = bytes;
  magic[1] = 'X';
  EXPECT_THROW(load_checkpoint(write("magic.mmck", magic)), FormatError);
  std::string version = bytes;
  version[4] = 7;
  try {
    load_checkpoint(write("version.mmck", version));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  EXPECT_THROW(load_checkpoint(write("tail.mmck", bytes + "x")), FormatError);
}

TEST(Checkpoint, MismatchedConfigIsDescriptive) {
  TempDir dir("ckpt");
  MirrorMamba<float> img(small_config(Mode::kImage));
  save_checkpoint(dir / "img.mmck", img);
  MirrorMamba<float> vid(small_config(Mode::kVideo));
  const auto before = vid.parameters()[0].value.vec();
  try {
    load_parameters(vid, read_checkpoint(dir / "img.mmck"));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("mmce1.t.w"), std::string::npos) << what;
    EXPECT_NE(what.find("[4,8,3,3] vs model [4,12,3,3]"), std::string::npos) << what;
  }
  EXPECT_EQ(vid.parameters()[0].value.vec(), before);  // nothing written

  ModelConfig wide = small_config(Mode::kImage);
  wide.backbone.base_channels = 8;
  MirrorMamba<float> w(wide);
  EXPECT_THROW(load_parameters(w, read_checkpoint(dir / "img.mmck")), DimensionError);
  ModelConfig no_mmce = small_config(Mode::kImage);
  no_mmce.use_mmce = false;
  MirrorMamba<float> nm(no_mmce);
  EXPECT_THROW(load_parameters(nm, read_checkpoint(dir / "img.mmck")), DimensionError);
}

TEST(Model, ConfigJsonRoundTrip) {
  ModelConfig c = small_config(Mode::kImage);
  c.gate = GateTarget::kF2;
  c.directions = ScanDirections::kVerticalOnly;
  c.use_flow = false;
  auto j = to_json(c);
  auto back = model_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"mode", "movie"}}), ArgumentError);
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"gate", "Q"}}), ArgumentError);
}
