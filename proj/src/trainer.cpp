#include "mirrormamba/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mirrormamba/mmtf.hpp"
#include "mirrormamba/ops.hpp"
#include "mirrormamba/parallel.hpp"

namespace mm {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr0 > 0) || !(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1) || !(eps > 0) || !(poly_power > 0) ||
      weight_decay < 0)
    throw ArgumentError("train config: rates, betas, eps and poly power must be positive (betas below 1)");
  if (batch < 1) throw ArgumentError("train config: batch must be at least 1");
  if (epochs < 1) throw ArgumentError("train config: epochs must be at least 1");
}

json to_json(const TrainConfig& c) {
  return json{{"lr0", c.lr0},         {"beta1", c.beta1}, {"beta2", c.beta2},   {"weight_decay", c.weight_decay},
              {"eps", c.eps},         {"poly_power", c.poly_power},             {"batch", c.batch},
              {"epochs", c.epochs},   {"seed", c.seed},   {"crop", c.crop}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  if (!j.is_object()) throw ArgumentError("train config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "lr0") c.lr0 = value;
      else if (key == "beta1") c.beta1 = value;
      else if (key == "beta2") c.beta2 = value;
      else if (key == "weight_decay") c.weight_decay = value;
      else if (key == "eps") c.eps = value;
      else if (key == "poly_power") c.poly_power = value;
      else if (key == "batch") c.batch = value;
      else if (key == "epochs") c.epochs = value;
      else if (key == "seed") c.seed = value;
      else if (key == "crop") c.crop = value;
      else throw ArgumentError("train config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

double poly_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (total_steps == 0 || step > total_steps)
    throw ArgumentError("poly_lr: need 0 <= step <= total_steps and total_steps > 0");
  return cfg.lr0 * std::pow(1.0 - double(step) / double(total_steps), cfg.poly_power);
}

template <typename T>
void adamw_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t t,
                  double lr, const TrainConfig& cfg) {
  if (grad.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size())
    throw DimensionError("adamw: parameter, gradient and moment sizes differ");
  if (t == 0) throw ArgumentError("adamw: step count is 1-based");
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  const T c1 = T(1) - T(std::pow(cfg.beta1, double(t)));
  const T c2 = T(1) - T(std::pow(cfg.beta2, double(t)));
  const T decay = T(1) - T(lr * cfg.weight_decay);
  const T step = T(lr), eps = T(cfg.eps);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const T g = grad[i];
    theta[i] *= decay;
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    const T m_hat = m[i] / c1, v_hat = v[i] / c2;
    theta[i] -= step * m_hat / (std::sqrt(v_hat) + eps);
  }
}

template void adamw_update(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                           std::uint64_t, double, const TrainConfig&);
template void adamw_update(std::span<double>, std::span<const double>, std::span<double>, std::span<double>,
                           std::uint64_t, double, const TrainConfig&);

void AdamState::reset(const ParamList<float>& params) {
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(p.value.numel(), 0.0f);
    v.emplace_back(p.value.numel(), 0.0f);
  }
  t = 0;
}

void adamw_step(ParamList<float>& params, AdamState& state, double lr, const TrainConfig& cfg) {
  if (state.m.size() != params.size()) state.reset(params);
  ++state.t;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].value;
    auto g = p.grad();
    std::vector<float> zero_grad;
    if (g.size() != p.numel()) {
      zero_grad.assign(p.numel(), 0.0f);
      g = zero_grad;
    }
    adamw_update<float>(p.data(), g, state.m[k], state.v[k], state.t, lr, cfg);
  }
}

json to_json(const StepLog& s) {
  return json{{"step", s.step}, {"epoch", s.epoch}, {"lr", s.lr}, {"loss", s.loss},
              {"grad_norm", s.grad_norm}, {"level_losses", s.level_losses}};
}

Batch make_batch(const std::vector<const Sample*>& samples, Mode mode, std::size_t crop) {
  if (samples.empty()) throw ArgumentError("make_batch: empty batch");
  const std::size_t h = samples[0]->rgb.dim(1), w = samples[0]->rgb.dim(2);
  const std::size_t ch = crop ? std::min(crop, h) : h, cw = crop ? std::min(crop, w) : w;
  const std::size_t y0 = (h - ch) / 2, x0 = (w - cw) / 2, b = samples.size();
  auto gather = [&](auto field, std::size_t channels) {
    Tensor<float> t({b, channels, ch, cw});
    for (std::size_t n = 0; n < b; ++n) {
      const Tensor<float>& src = samples[n]->*field;
      if (src.dim(1) != h || src.dim(2) != w) throw DimensionError("make_batch: samples differ in size");
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < ch; ++y)
          std::copy_n(&src.vec()[(c * h + y0 + y) * w + x0], cw, &t.vec()[((n * channels + c) * ch + y) * cw]);
    }
    return t;
  };
  Batch out;
  out.inputs.push_back(gather(&Sample::rgb, 3));
  out.inputs.push_back(gather(&Sample::depth, 3));
  if (mode == Mode::kVideo) out.inputs.push_back(gather(&Sample::flow, 3));
  out.mask = gather(&Sample::mask, 1);
  return out;
}

template <typename T>
Tensor<T> deep_supervision_loss(const ModelOutput<T>& out, const Tensor<T>& mask, std::array<double, 4>* level_losses) {
  Tensor<T> total;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& logits = out.level_logits[i];
    Tensor<T> target;
    {
      NoGradScope<T> off;
      target = bilinear_resize(mask, logits.dim(2), logits.dim(3));
    }
    auto li = bce_with_logits(logits, target);
    if (level_losses) (*level_losses)[i] = double(li.item());
    total = total.defined() ? add(total, li) : li;
  }
  return total;
}

template Tensor<float> deep_supervision_loss(const ModelOutput<float>&, const Tensor<float>&, std::array<double, 4>*);
template Tensor<double> deep_supervision_loss(const ModelOutput<double>&, const Tensor<double>&, std::array<double, 4>*);

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch) { return (samples + batch - 1) / batch; }

Trainer::Trainer(const ModelConfig& mcfg, const TrainConfig& tcfg) : model(mcfg), cfg(tcfg) {
  cfg.validate();
  adam.reset(model.parameters());
}

TrainResult Trainer::train(const std::vector<Sample>& data, const TrainOptions& opts) {
  if (data.empty()) throw ArgumentError("train: dataset is empty");
  const std::size_t per_epoch = steps_per_epoch(data.size(), cfg.batch);
  const std::size_t total = per_epoch * cfg.epochs;
  if (step % per_epoch != 0) throw ArgumentError("train: can only resume at an epoch boundary");
  auto params = model.parameters();
  if (adam.m.size() != params.size()) adam.reset(params);

  TrainResult res;
  std::size_t epoch = step / per_epoch;
  const std::size_t last_epoch =
      opts.stop_after_epochs ? std::min(cfg.epochs, epoch + *opts.stop_after_epochs) : cfg.epochs;
  for (; epoch < last_epoch; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::size_t s = 0; s < per_epoch; ++s) {
      std::vector<const Sample*> members;
      for (std::size_t k = s * cfg.batch; k < std::min(data.size(), (s + 1) * cfg.batch); ++k)
        members.push_back(&data[order[k]]);
      const Batch batch = make_batch(members, model.config().mode, cfg.crop);

      StepLog log;
      log.step = step;
      log.epoch = epoch;
      log.lr = poly_lr(step, total, cfg);
      for (auto& p : params) p.value.zero_grad();
      {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        try {
          auto out = model.forward(batch.inputs);
          auto loss = deep_supervision_loss(out, batch.mask, &log.level_losses);
          log.loss = double(loss.item());
          tape.backward(loss);
        } catch (const NumericError& e) {
          // The backward pass never ran, so there is no gradient norm to report.
          char buf[96];
          std::snprintf(buf, sizeof buf, "training diverged at step %zu: lr %g, grad-norm n/a: ", step, log.lr);
          log.grad_norm = std::nan("");
          throw TrainingDiverged(buf + std::string(e.what()), log);
        }
      }
      double sq = 0.0;
      for (const auto& p : params)
        for (float g : p.value.grad()) sq += double(g) * double(g);
      log.grad_norm = std::sqrt(sq);
      if (!std::isfinite(log.loss) || !std::isfinite(log.grad_norm)) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "training diverged at step %zu: loss %g, lr %g, grad-norm %g", step, log.loss,
                      log.lr, log.grad_norm);
        throw TrainingDiverged(buf, log);
      }
      adamw_step(params, adam, log.lr, cfg);
      ++step;
      if (opts.log) *opts.log << to_json(log).dump() << "\n";
      if (opts.on_step) opts.on_step(log);
      res.log.push_back(log);
      ++res.steps;
    }
    ++res.epochs_done;
    if (!opts.out_dir.empty()) {
      std::filesystem::create_directories(opts.out_dir);
      save(opts.out_dir / "checkpoint.mmck");
    }
  }
  if (opts.log) opts.log->flush();
  return res;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck = make_checkpoint(model, step);
  const auto params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& shape = params[k].value.shape();
    ck.tensors.emplace("adam.m." + params[k].name, Tensor<float>(shape, adam.m[k]));
    ck.tensors.emplace("adam.v." + params[k].name, Tensor<float>(shape, adam.v[k]));
  }
  ck.state = json{{"train_config", to_json(cfg)}, {"adam_t", adam.t}};
  return ck;
}

void Trainer::save(const std::filesystem::path& path) const { write_checkpoint(path, checkpoint()); }

Trainer Trainer::resume(const std::filesystem::path& path) {
  const auto ck = read_checkpoint(path);
  if (!ck.state.contains("train_config"))
    throw FormatError("checkpoint carries no trainer state: " + path.string(), 16);
  Trainer tr(model_config_from_json(ck.config), train_config_from_json(ck.state.at("train_config")));
  load_parameters(tr.model, ck);
  const auto params = tr.model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto m = ck.tensors.find("adam.m." + params[k].name);
    auto v = ck.tensors.find("adam.v." + params[k].name);
    if (m == ck.tensors.end() || v == ck.tensors.end())
      throw FormatError("checkpoint lacks optimizer moments for '" + params[k].name + "'", 16);
    tr.adam.m[k] = m->second.vec();
    tr.adam.v[k] = v->second.vec();
  }
  tr.adam.t = ck.state.value("adam_t", std::uint64_t{0});
  tr.step = ck.step;
  return tr;
}

std::vector<std::vector<float>> predict(const MirrorMamba<float>& model, const std::vector<Sample>& data,
                                        std::size_t batch) {
  if (batch == 0) throw ArgumentError("predict: batch must be positive");
  std::vector<std::vector<float>> out(data.size());
  const std::size_t chunks = (data.size() + batch - 1) / batch;
  // Inference only reads the parameters, so batches run on independent workers.
  parallel_for(chunks, [&](std::size_t c) {
    NoGradScope<float> off;
    std::vector<const Sample*> members;
    for (std::size_t k = c * batch; k < std::min(data.size(), (c + 1) * batch); ++k) members.push_back(&data[k]);
    const auto b = make_batch(members, model.config().mode);
    const auto prob = model.forward(b.inputs).probability;
    const std::size_t hw = prob.dim(2) * prob.dim(3);
    for (std::size_t n = 0; n < members.size(); ++n)
      out[c * batch + n].assign(prob.vec().begin() + std::ptrdiff_t(n * hw),
                                prob.vec().begin() + std::ptrdiff_t((n + 1) * hw));
  });
  return out;
}

EvalResult evaluate(const MirrorMamba<float>& model, const std::vector<Sample>& data, const Binarize& bin,
                    std::size_t batch) {
  const auto preds = predict(model, data, batch);
  std::vector<SampleMetrics> per;
  for (std::size_t i = 0; i < data.size(); ++i) per.push_back(evaluate_sample(preds[i], data[i].mask.vec(), bin));
  return aggregate(std::move(per));
}

std::vector<Sample> load_split(const Dataset& ds, const std::string& split) {
  std::vector<Sample> out;
  for (auto i : ds.split_indices(split)) out.push_back(ds.load(i));
  if (out.empty()) throw ArgumentError("dataset has no '" + split + "' samples");
  return out;
}

const std::vector<std::string>& known_variants() {
  static const std::vector<std::string> v = {"a",       "b",      "c",       "d",          "full",
                                             "no-mmce", "no-bed", "neither", "horizontal", "vertical"};
  return v;
}

ModelConfig variant_config(const std::string& name, const ModelConfig& base) {
  ModelConfig c = base;
  c.mode = Mode::kVideo;
  if (name == "a") {
    c.use_depth = false;
    c.use_flow = false;
  } else if (name == "b") {
    c.use_flow = false;
  } else if (name == "c") {
    c.use_depth = false;
  } else if (name == "d" || name == "full") {
  } else if (name == "no-mmce") {
    c.use_mmce = false;
  } else if (name == "no-bed") {
    c.use_bed = false;
  } else if (name == "neither") {
    c.use_mmce = false;
    c.use_bed = false;
  } else if (name == "horizontal") {
    c.directions = ScanDirections::kHorizontalOnly;
  } else if (name == "vertical") {
    c.directions = ScanDirections::kVerticalOnly;
  } else {
    throw ArgumentError("unknown ablation variant '" + name + "'");
  }
  return c;
}

std::vector<AblationRow> ablate(const std::vector<Sample>& train, const std::vector<Sample>& test,
                                const std::vector<std::string>& variants, const ModelConfig& base,
                                const TrainConfig& tcfg, std::ostream* progress) {
  std::vector<AblationRow> rows;
  for (const auto& name : variants) {
    Trainer tr(variant_config(name, base), tcfg);
    if (progress) *progress << "variant " << name << ": training " << tr.model.parameter_total() << " parameters\n";
    tr.train(train);
    AblationRow row;
    row.variant = name;
    row.parameters = tr.model.parameter_total();
    const auto preds = predict(tr.model, test);
    std::vector<SampleMetrics> all;
    std::map<std::string, std::vector<SampleMetrics>> groups;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto m = evaluate_sample(preds[i], test[i].mask.vec());
      all.push_back(m);
      groups[to_string(test[i].spec.cues)].push_back(m);
    }
    row.overall = aggregate(std::move(all));
    for (auto& [cue, ms] : groups) row.by_cue[cue] = aggregate(std::move(ms));
    if (progress) *progress << "variant " << name << ": IoU " << row.overall.iou << "\n";
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::vector<std::pair<std::string, EvalResult>> table;
  for (const auto& r : rows) table.emplace_back(r.variant, r.overall);
  std::string out = format_table(table);
  std::map<std::string, std::vector<std::pair<std::string, EvalResult>>> per_cue;
  for (const auto& r : rows)
    for (const auto& [cue, res] : r.by_cue) per_cue[cue].emplace_back(r.variant, res);
  if (per_cue.size() > 1)
    for (const auto& [cue, t] : per_cue) out += "\n[" + cue + " scenes]\n" + format_table(t);
  return out;
}

json to_json(const std::vector<AblationRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows) {
    json by = json::object();
    for (const auto& [cue, res] : r.by_cue) by[cue] = to_json(res);
    arr.push_back({{"variant", r.variant}, {"parameters", r.parameters}, {"overall", to_json(r.overall)},
                   {"by_cue", by}});
  }
  return arr;
}

}  // namespace mm
