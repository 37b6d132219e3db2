#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mirrormamba/metrics.hpp"
#include "mirrormamba/model.hpp"
#include "mirrormamba/synth.hpp"

namespace mm {

struct TrainConfig {
  double lr0 = 6e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
  double poly_power = 0.9;
  std::size_t batch = 8;
  std::size_t epochs = 40;
  std::uint64_t seed = 0;
  std::size_t crop = 0;  // centre crop side; 0 keeps the full canvas

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// lr0 * (1 - step/total_steps)^power.
double poly_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

/// One AdamW update of a flat parameter buffer. t is the 1-based step
/// count used for bias correction. Weight decay is decoupled:
///   theta -= lr*wd*theta, then theta -= lr * m_hat / (sqrt(v_hat) + eps).
template <typename T>
void adamw_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t t,
                  double lr, const TrainConfig& cfg);

struct AdamState {
  std::vector<std::vector<float>> m, v;  // one buffer per parameter, in ParamList order
  std::uint64_t t = 0;

  void reset(const ParamList<float>& params);
};

/// Applies adamw_update to every parameter using its accumulated gradient.
void adamw_step(ParamList<float>& params, AdamState& state, double lr, const TrainConfig& cfg);

struct StepLog {
  std::size_t step = 0, epoch = 0;
  double lr = 0, loss = 0, grad_norm = 0;
  std::array<double, 4> level_losses{};
};

nlohmann::json to_json(const StepLog& s);

/// Raised when a loss or gradient goes non-finite.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, StepLog where) : std::runtime_error(what), where_(where) {}
  const StepLog& where() const { return where_; }

 private:
  StepLog where_;
};

/// The model inputs for a batch of samples (rgb, depth[, flow]) plus the
/// [B,1,H,W] mask.
struct Batch {
  std::vector<Tensor<float>> inputs;
  Tensor<float> mask;
};

Batch make_batch(const std::vector<const Sample*>& samples, Mode mode, std::size_t crop = 0);

/// Sum of the per-level BCE losses; the mask is bilinearly resized to each
/// level. level_losses receives the individual terms.
template <typename T>
Tensor<T> deep_supervision_loss(const ModelOutput<T>& out, const Tensor<T>& mask, std::array<double, 4>* level_losses);

struct TrainOptions {
  std::filesystem::path out_dir;     // checkpoint.mmck each epoch; empty disables
  std::ostream* log = nullptr;       // JSON lines
  std::optional<std::size_t> stop_after_epochs;  // end early (for resume tests)
  std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
  std::size_t steps = 0;
  std::size_t epochs_done = 0;
  std::vector<StepLog> log;
};

/// Trainer state that survives a checkpoint round trip.
struct Trainer {
  MirrorMamba<float> model;
  TrainConfig cfg;
  AdamState adam;
  std::size_t step = 0;

  Trainer(const ModelConfig& mcfg, const TrainConfig& tcfg);

  /// Runs the remaining epochs over the given samples.
  TrainResult train(const std::vector<Sample>& data, const TrainOptions& opts = {});

  Checkpoint checkpoint() const;
  void save(const std::filesystem::path& path) const;
  static Trainer resume(const std::filesystem::path& path);
};

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch);

/// Batched no-grad probability maps, one [H*W] vector per sample.
std::vector<std::vector<float>> predict(const MirrorMamba<float>& model, const std::vector<Sample>& data,
                                        std::size_t batch = 8);

EvalResult evaluate(const MirrorMamba<float>& model, const std::vector<Sample>& data, const Binarize& bin = {},
                    std::size_t batch = 8);

std::vector<Sample> load_split(const Dataset& ds, const std::string& split);

/// Ablation variants: cue subsets a (rgb), b (rgb+depth), c (rgb+flow),
/// d (rgb+depth+flow); modules full, no-mmce, no-bed, neither; scanning
/// horizontal, vertical.
ModelConfig variant_config(const std::string& name, const ModelConfig& base);
const std::vector<std::string>& known_variants();

struct AblationRow {
  std::string variant;
  EvalResult overall;
  std::map<std::string, EvalResult> by_cue;  // keyed by the test scene's cue set
  std::size_t parameters = 0;
};

std::vector<AblationRow> ablate(const std::vector<Sample>& train, const std::vector<Sample>& test,
                                const std::vector<std::string>& variants, const ModelConfig& base,
                                const TrainConfig& tcfg, std::ostream* progress = nullptr);

std::string format_ablation(const std::vector<AblationRow>& rows);
nlohmann::json to_json(const std::vector<AblationRow>& rows);

}  // namespace mm
