#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mirrormamba/backbone.hpp"
#include "mirrormamba/bed.hpp"
#include "mirrormamba/mmce.hpp"

namespace mm {

enum class Mode { kImage, kVideo };

struct ModelConfig {
  Mode mode = Mode::kVideo;
  BackboneConfig backbone;
  std::size_t d_state = 4;
  GateTarget gate = GateTarget::kT;
  bool use_mmce = true;
  bool use_bed = true;
  ScanDirections directions = ScanDirections::kHorizontalVertical;
  // Cue ablation: a disabled modality is fed as an all-zero map so the
  // architecture (and its parameter set) stays that of the chosen mode.
  bool use_depth = true;
  bool use_flow = true;
  std::uint64_t seed = 0;

  std::size_t modalities() const { return mode == Mode::kVideo ? 3 : 2; }
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
std::string to_string(Mode mode);
Mode parse_mode(const std::string& s);

template <typename T>
struct ModelOutput {
  std::array<Tensor<T>, 4> level_logits;  // strides 4, 8, 16, 32
  Tensor<T> probability;                  // [B,1,H,W], sigmoid of the upsampled finest logits
};

struct CensusRow {
  std::string name;
  Shape shape;
  std::size_t count = 0;
};

template <typename T>
class MirrorMamba {
 public:
  explicit MirrorMamba(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  /// inputs = {rgb, depth} in image mode, {rgb, depth, flow} in video mode;
  /// each [B,3,H,W] with H and W divisible by 32.
  ModelOutput<T> forward(const std::vector<Tensor<T>>& inputs) const;

  ParamList<T> parameters() const;
  std::vector<CensusRow> parameter_census() const;
  std::size_t parameter_total() const;

  Backbone<T> backbone;
  std::array<MmceLevel<T>, 4> mmce;
  std::array<BedLevel<T>, 4> bed;

 private:
  ModelConfig cfg_;
};

// MMCK container: "MMCK", u32 version, u64 header length, JSON header, then
// the MMTF records back to back. The header holds the config echo, the step
// counter, free-form state and an index of {name, offset, shape} where offset
// counts from the first byte after the header.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json config;
  std::uint64_t step = 0;
  nlohmann::json state = nlohmann::json::object();
  std::map<std::string, Tensor<float>> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Parameters plus config echo; optimizer entries are added by the trainer.
template <typename T>
Checkpoint make_checkpoint(const MirrorMamba<T>& model, std::uint64_t step = 0);

/// Copies parameter values from a checkpoint into an existing model. Every
/// name and shape is checked before any value is written.
template <typename T>
void load_parameters(MirrorMamba<T>& model, const Checkpoint& ckpt);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const MirrorMamba<T>& model, std::uint64_t step = 0);

/// Rebuilds the model from the echoed config and fills its parameters.
MirrorMamba<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace mm
