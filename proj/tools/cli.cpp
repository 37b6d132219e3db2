#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mirrormamba/bench.hpp"
#include "mirrormamba/registry.hpp"
#include "mirrormamba/trainer.hpp"

namespace mm {

namespace {

using nlohmann::json;

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(part, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != part.size()) throw ArgumentError("not a list of integers: '" + s + "'");
    out.push_back(std::size_t(v));
  }
  if (out.empty()) throw ArgumentError("empty list");
  return out;
}

std::vector<std::string> parse_names(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) out.push_back(part);
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

/// Flags shared by train and ablate.
struct TrainFlags {
  std::string data;
  std::string config;
  std::string mode = "video";
  std::size_t base_channels = 16;
  std::size_t d_state = 4;
  std::string gate = "T";
  std::string directions = "both";
  std::uint64_t model_seed = 0;
  std::optional<std::size_t> epochs, batch, crop;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--data", data, "Dataset directory written by gen")->required();
    app->add_option("--config", config, "train.json with TrainConfig fields (lr0, beta1, beta2, weight_decay, eps, "
                                        "poly_power, batch, epochs, seed, crop)");
    app->add_option("--mode", mode, "Model mode: image (rgb+depth) or video (rgb+depth+flow)")
        ->check(CLI::IsMember({"image", "video"}));
    app->add_option("--base-channels", base_channels, "Backbone width C1 (levels use C1, 2C1, 4C1, 8C1)");
    app->add_option("--d-state", d_state, "State size N of every selective scan");
    app->add_option("--gate", gate, "Map gated by the vertical attention: T or F2")
        ->check(CLI::IsMember({"T", "F2"}));
    app->add_option("--directions", directions, "Extractor scan directions: both, horizontal or vertical")
        ->check(CLI::IsMember({"both", "horizontal", "vertical"}));
    app->add_option("--model-seed", model_seed, "Seed for parameter initialization");
    app->add_option("--epochs", epochs, "Override epochs (default 40)");
    app->add_option("--batch", batch, "Override batch size (default 8)");
    app->add_option("--lr", lr, "Override initial learning rate (default 6e-5)");
    app->add_option("--crop", crop, "Centre crop side in pixels (0 keeps the canvas)");
    app->add_option("--seed", seed, "Override the shuffle seed");
  }

  TrainConfig train_config() const {
    TrainConfig c;
    if (!config.empty()) {
      std::ifstream is(config);
      if (!is) throw std::runtime_error("cannot open train config " + config);
      json j;
      try {
        is >> j;
      } catch (const json::exception& e) {
        throw ArgumentError("train config " + config + " is not valid JSON: " + e.what());
      }
      c = train_config_from_json(j);
    }
    if (epochs) c.epochs = *epochs;
    if (batch) c.batch = *batch;
    if (lr) c.lr0 = *lr;
    if (crop) c.crop = *crop;
    if (seed) c.seed = *seed;
    c.validate();
    return c;
  }

  ModelConfig model_config() const {
    return model_config_from_json(json{{"mode", mode},
                                       {"base_channels", base_channels},
                                       {"d_state", d_state},
                                       {"gate", gate},
                                       {"directions", directions},
                                       {"seed", model_seed}});
  }
};

int cmd_gen(std::size_t n_train, std::size_t n_test, const std::string& cues, std::uint64_t seed,
            const std::string& out_dir, std::size_t size, double noise, std::ostream& out) {
  DatasetOptions opts;
  opts.height = opts.width = size;
  opts.noise_sigma = noise;
  const auto manifest = make_dataset(n_train, n_test, parse_cue_mix(cues), seed, out_dir, opts);
  out << "wrote " << manifest.at("samples").size() << " samples (" << n_train << " train, " << n_test
      << " test) to " << out_dir << "\n";
  return 0;
}

int cmd_train(const TrainFlags& f, const std::string& out_dir, const std::string& resume, const std::string& variant,
              std::ostream& out) {
  const auto ds = Dataset::open(f.data);
  const auto train = load_split(ds, "train");
  std::optional<Trainer> tr;
  if (!resume.empty()) {
    tr.emplace(Trainer::resume(resume));
  } else {
    ModelConfig mc = f.model_config();
    if (!variant.empty()) mc = variant_config(variant, mc);
    tr.emplace(mc, f.train_config());
  }
  const std::filesystem::path dir(out_dir);
  std::filesystem::create_directories(dir);
  write_text(dir / "train.json", to_json(tr->cfg).dump(2) + "\n");
  std::ofstream log(dir / "train_log.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  TrainOptions opts;
  opts.out_dir = dir;
  opts.log = &log;
  const auto res = tr->train(train, opts);
  tr->save(dir / "model.mmck");
  out << "trained " << res.steps << " steps over " << res.epochs_done << " epochs; final loss "
      << (res.log.empty() ? 0.0 : res.log.back().loss) << "; checkpoint " << (dir / "model.mmck").string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& split, bool adaptive,
             const std::string& json_path, bool per_sample, std::ostream& out) {
  const auto model = load_checkpoint(ckpt);
  const auto samples = load_split(Dataset::open(data), split);
  Binarize bin;
  bin.adaptive = adaptive;
  const auto res = evaluate(model, samples, bin);
  auto j = to_json(res, per_sample);
  j["split"] = split;
  j["threshold"] = adaptive ? "adaptive" : "0.5";
  out << format_table({{std::filesystem::path(ckpt).filename().string(), res}});
  if (json_path.empty())
    out << j.dump() << "\n";
  else
    write_text(json_path, j.dump(2) + "\n");
  return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& data, const std::string& split,
                const std::string& out_dir, std::ostream& out) {
  const auto model = load_checkpoint(ckpt);
  const auto ds = Dataset::open(data);
  const auto idx = ds.split_indices(split);
  const auto samples = load_split(ds, split);
  const auto preds = predict(model, samples);
  std::filesystem::create_directories(out_dir);
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const std::size_t h = samples[k].mask.dim(1), w = samples[k].mask.dim(2);
    std::vector<std::uint8_t> prob(h * w), bin(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      prob[i] = std::uint8_t(std::lround(std::clamp(preds[k][i], 0.0f, 1.0f) * 255.0f));
      bin[i] = preds[k][i] >= kDefaultThreshold ? 255 : 0;
    }
    const auto& id = ds.entries[idx[k]].id;
    write_pgm(std::filesystem::path(out_dir) / (id + "_prob.pgm"), h, w, prob);
    write_pgm(std::filesystem::path(out_dir) / (id + "_bin.pgm"), h, w, bin);
  }
  out << "wrote " << 2 * samples.size() << " masks to " << out_dir << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& filter, std::size_t seeds, std::uint64_t first_seed, double tol,
                  std::ostream& out) {
  const auto runs = run_gradchecks(filter, first_seed, seeds, tol);
  if (runs.empty()) throw ArgumentError("no gradcheck case matches '" + filter + "'");
  struct Agg {
    double rel = 0, abs = 0;
    std::size_t coords = 0, failed = 0, seeds = 0;
  };
  std::vector<std::pair<std::string, Agg>> rows;
  for (const auto& r : runs) {
    if (rows.empty() || rows.back().first != r.name) rows.push_back({r.name, {}});
    auto& a = rows.back().second;
    a.rel = std::max(a.rel, r.report.max_rel_err);
    a.abs = std::max(a.abs, r.report.max_abs_err);
    a.coords += r.report.coords_checked;
    a.failed += r.report.pass ? 0 : 1;
    ++a.seeds;
  }
  std::size_t failed = 0;
  char buf[200];
  std::snprintf(buf, sizeof buf, "%-24s %6s %8s %12s %12s  %s\n", "case", "seeds", "coords", "max_rel", "max_abs",
                "result");
  out << buf;
  for (const auto& [name, a] : rows) {
    std::snprintf(buf, sizeof buf, "%-24s %6zu %8zu %12.3e %12.3e  %s\n", name.c_str(), a.seeds, a.coords, a.rel,
                  a.abs, a.failed ? "FAIL" : "pass");
    out << buf;
    failed += a.failed ? 1 : 0;
  }
  out << (failed ? std::to_string(failed) + " case(s) failed" : "all cases passed") << " at tol " << tol << "\n";
  return failed ? 1 : 0;
}

int cmd_bench(const std::string& lengths, std::size_t repeats, std::size_t channels, std::size_t d_state,
              const std::string& csv_path, std::ostream& out) {
  ScanBenchOptions opts;
  opts.repeats = repeats;
  opts.channels = channels;
  opts.d_state = d_state;
  const auto csv = bench_csv(bench_scan(parse_sizes(lengths), opts));
  if (csv_path.empty())
    out << csv;
  else
    write_text(csv_path, csv);
  return 0;
}

int cmd_ablate(const TrainFlags& f, const std::string& variants, const std::string& json_path, std::ostream& out) {
  const auto ds = Dataset::open(f.data);
  const auto rows = ablate(load_split(ds, "train"), load_split(ds, "test"), parse_names(variants), f.model_config(),
                           f.train_config(), &out);
  out << format_ablation(rows);
  if (!json_path.empty()) write_text(json_path, to_json(rows).dump(2) + "\n");
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mirror detection with selective-scan state-space models: synthetic data, training, evaluation."};
  app.name("mirrormamba");
  app.require_subcommand(1);
  app.failure_message([](const CLI::App*, const CLI::Error& e) { return "error: " + std::string(e.what()) + "\n"; });
  app.set_help_all_flag("--help-all", "Print help for every subcommand");

  auto* gen = app.add_subcommand("gen", "Generate a synthetic mirror-scene dataset");
  std::size_t n_train = 200, n_test = 50, size = 96;
  std::string cues = "all", out_dir;
  std::uint64_t seed = 0;
  double noise = 0.02;
  gen->add_option("--n-train", n_train, "Training scenes")->check(CLI::PositiveNumber);
  gen->add_option("--n-test", n_test, "Test scenes")->check(CLI::PositiveNumber);
  gen->add_option("--cues", cues,
                  "Cue mix: all, mixed (one third each of depth, corr, flow), a cue set such as depth+flow, "
                  "or a weighted list like depth:1,flow:2");
  gen->add_option("--seed", seed, "Dataset seed");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--size", size, "Canvas side in pixels, a multiple of 32");
  gen->add_option("--noise", noise, "Gaussian noise sigma added to every map");

  auto* train = app.add_subcommand("train", "Train a model; writes checkpoint.mmck each epoch, model.mmck, "
                                            "train.json and train_log.jsonl");
  TrainFlags train_flags;
  train_flags.add(train);
  std::string train_out, resume, variant;
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--resume", resume, "Continue from a checkpoint written by train");
  train->add_option("--variant", variant, "Ablation variant applied to the model flags");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint: IoU, F-beta, MAE and Accuracy");
  std::string ckpt, data, split = "test", json_path;
  bool adaptive = false, per_sample = false;
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  eval->add_option("--data", data, "Dataset directory")->required();
  eval->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  eval->add_flag("--adaptive", adaptive, "Binarize at twice the mean prediction instead of 0.5");
  eval->add_option("--json", json_path, "Write the JSON report here instead of stdout");
  eval->add_flag("--per-sample", per_sample, "Include per-sample metrics in the JSON report");

  auto* pred = app.add_subcommand("predict", "Write probability and binary PGM masks for a split");
  std::string pred_out;
  pred->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  pred->add_option("--data", data, "Dataset directory")->required();
  pred->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  pred->add_option("--out", pred_out, "Output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check of every differentiable op");
  std::string filter;
  std::size_t seeds = 20;
  std::uint64_t first_seed = 1;
  double tol = 1e-4;
  gc->add_option("--filter", filter, "Only cases whose name contains this text");
  gc->add_option("--seeds", seeds, "Random seeds per case")->check(CLI::PositiveNumber);
  gc->add_option("--first-seed", first_seed, "First seed");
  gc->add_option("--tol", tol, "Maximum relative error");

  auto* bench = app.add_subcommand("bench", "Time the selective scan at several sequence lengths (CSV)");
  std::string lengths = "4096,8192,16384", csv_path;
  std::size_t repeats = 5, channels = 16, d_state = 16;
  bench->add_option("--lengths", lengths, "Comma-separated sequence lengths");
  bench->add_option("--repeats", repeats, "Timed runs per length (median reported)")->check(CLI::PositiveNumber);
  bench->add_option("--channels", channels, "Channels D");
  bench->add_option("--d-state", d_state, "State size N");
  bench->add_option("--csv", csv_path, "Write the CSV here instead of stdout");

  auto* abl = app.add_subcommand("ablate", "Train and evaluate ablation variants under one seed and budget");
  TrainFlags abl_flags;
  abl_flags.add(abl);
  std::string variants = "a,b,c,d", abl_json;
  abl->add_option("--variants", variants,
                  "Comma list from a, b, c, d (cue subsets), full, no-mmce, no-bed, neither, horizontal, vertical");
  abl->add_option("--json", abl_json, "Write the JSON report here");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*gen) return cmd_gen(n_train, n_test, cues, seed, out_dir, size, noise, out);
    if (*train) return cmd_train(train_flags, train_out, resume, variant, out);
    if (*eval) return cmd_eval(ckpt, data, split, adaptive, json_path, per_sample, out);
    if (*pred) return cmd_predict(ckpt, data, split, pred_out, out);
    if (*gc) return cmd_gradcheck(filter, seeds, first_seed, tol, out);
    if (*bench) return cmd_bench(lengths, repeats, channels, d_state, csv_path, out);
    if (*abl) return cmd_ablate(abl_flags, variants, abl_json, out);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << "\n";
    return 1;
  }
  return 1;
}

}  // namespace mm
