#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mirrormamba/module.hpp"
#include "mirrormamba/tensor.hpp"

namespace mm {

enum class FlipAxis { kHorizontal, kVertical };

struct CueSet {
  bool depth = false;
  bool correspondence = false;
  bool flow = false;

  bool empty() const { return !depth && !correspondence && !flow; }
  bool operator==(const CueSet&) const = default;
};

/// "depth", "corr", "flow" joined with '+', or "all".
std::string to_string(const CueSet& cues);
CueSet parse_cues(const std::string& s);

struct SceneSpec {
  std::size_t height = 64, width = 64;
  std::size_t mirror_y = 0, mirror_x = 0, mirror_h = 0, mirror_w = 0;
  FlipAxis axis = FlipAxis::kHorizontal;
  CueSet cues;
  std::uint64_t texture_seed = 0;
  double velocity_x = 0.0, velocity_y = 0.0;  // camera translation, pixels per frame
  double noise_sigma = 0.0;
  double wall_depth = 0.4;
  double flow_norm = 8.0;  // flow channels are divided by this

  /// Throws ArgumentError on a rect that touches the border, an empty cue
  /// set, a canvas not divisible by 32, or no room for the source patch.
  void validate() const;
  bool operator==(const SceneSpec&) const = default;
};

nlohmann::json to_json(const SceneSpec& spec);
SceneSpec scene_spec_from_json(const nlohmann::json& j);

struct Sample {
  Tensor<float> rgb;    // [3,H,W] in [0,1]
  Tensor<float> depth;  // [3,H,W], one relative depth replicated, 1 = far
  Tensor<float> flow;   // [3,H,W]: u, v, magnitude, each / flow_norm
  Tensor<float> mask;   // [1,H,W] in {0,1}
  SceneSpec spec;
};

inline constexpr double kFlowReflectionFactor = 2.0;
inline constexpr float kFarPlane = 1.0f;

/// Random mirror placement (25-40% of each side), axis, velocity and wall
/// depth for a canvas; the source side of a correspondence patch always fits.
SceneSpec random_scene_spec(std::size_t height, std::size_t width, CueSet cues, double noise_sigma, Rng& rng);

/// The correspondence source patch as (y, x); it has the mirror's size.
std::pair<std::size_t, std::size_t> correspondence_source(const SceneSpec& spec);

Sample generate_scene(const SceneSpec& spec, std::uint64_t seed);

/// Frames 0..frames-1 of a camera translating by the spec velocity. Flow of
/// frame t holds the displacement t -> t+1; the last frame repeats it.
std::vector<Sample> generate_sequence(const SceneSpec& spec, std::uint64_t seed, std::size_t frames);

/// Cue-set name to weight, e.g. {"flow": 1.0} or {"depth": 1, "corr": 1, "flow": 1}.
using CueMix = std::map<std::string, double>;
/// "all", "mixed" (one third each of depth, corr, flow), a single cue-set
/// name, or a comma list of name:weight.
CueMix parse_cue_mix(const std::string& s);

struct DatasetOptions {
  std::size_t height = 96, width = 96;
  double noise_sigma = 0.02;
};

/// Writes <id>_{rgb,depth,flow}.mmtf, <id>_mask.pgm and manifest.json.
/// Returns the manifest.
nlohmann::json make_dataset(std::size_t n_train, std::size_t n_test, const CueMix& cue_mix, std::uint64_t seed,
                            const std::filesystem::path& out_dir, const DatasetOptions& opts = {});

/// Cue set of sample i out of n: stratified over the cumulative weights, so
/// proportions are honored exactly up to rounding.
CueSet cue_for_index(const CueMix& mix, std::size_t i, std::size_t n);

/// Seed of sample `index` in split 0 (train) or 1 (test).
std::uint64_t sample_seed(std::uint64_t dataset_seed, int split, std::size_t index);

struct DatasetEntry {
  std::string id;
  std::string split;
  SceneSpec spec;
};

struct Dataset {
  std::filesystem::path dir;
  nlohmann::json manifest;
  std::vector<DatasetEntry> entries;

  static Dataset open(const std::filesystem::path& dir);
  std::vector<std::size_t> split_indices(const std::string& split) const;
  Sample load(std::size_t index) const;
};

// P5 binary greymap, maxval 255.
void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& pixels);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& height, std::size_t& width);

}  // namespace mm
