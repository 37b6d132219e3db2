#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mirrormamba/metrics.hpp"
#include "mirrormamba/mmtf.hpp"
#include "mirrormamba/ops.hpp"
#include "mirrormamba/scan.hpp"
#include "mirrormamba/trainer.hpp"

namespace py = pybind11;
using namespace mm;

namespace {

template <typename T>
using CArray = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const CArray<T>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_numpy(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.vec().begin(), t.vec().end(), out.mutable_data());
  return out;
}

std::span<const float> flat(const CArray<float>& a) { return {a.data(), std::size_t(a.size())}; }

void same_size(const CArray<float>& pred, const CArray<float>& gt) {
  if (pred.size() != gt.size()) throw DimensionError("pred and gt differ in size");
}

py::dict sample_dict(const Sample& s) {
  py::dict d;
  d["rgb"] = to_numpy(s.rgb);
  d["depth"] = to_numpy(s.depth);
  d["flow"] = to_numpy(s.flow);
  d["mask"] = to_numpy(s.mask);
  d["spec"] = to_json(s.spec).dump();
  return d;
}

const char* kScanFields[] = {"dt_down", "dt_up", "dt_bias", "b_proj", "c_proj", "a_log", "d_skip"};

std::array<Tensor<double>*, 7> scan_fields(ScanParams<double>& p) {
  return {&p.dt_down, &p.dt_up, &p.dt_bias, &p.b_proj, &p.c_proj, &p.a_log, &p.d_skip};
}

py::dict scan_params_dict(ScanParams<double> p) {
  py::dict d;
  auto fields = scan_fields(p);
  for (std::size_t i = 0; i < fields.size(); ++i) d[kScanFields[i]] = to_numpy(*fields[i]);
  return d;
}

ScanParams<double> scan_params_from(const py::dict& d) {
  ScanParams<double> p;
  auto fields = scan_fields(p);
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (!d.contains(kScanFields[i])) throw ArgumentError(std::string("scan params missing '") + kScanFields[i] + "'");
    *fields[i] = to_tensor<double>(d[kScanFields[i]].cast<CArray<double>>());
  }
  if (p.a_log.rank() != 2 || p.dt_down.rank() != 2) throw DimensionError("a_log and dt_down must be 2-D");
  p.d_model = p.a_log.dim(0);
  p.d_state = p.a_log.dim(1);
  p.dt_rank = p.dt_down.dim(0);
  return p;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Selective-scan mirror detection: synthetic scenes, metrics, scans and trained-model inference.";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  m.def(
      "generate_scene",
      [](std::size_t height, std::size_t width, const std::string& cues, std::uint64_t seed, double noise) {
        Rng rng(seed);
        const auto spec = random_scene_spec(height, width, parse_cues(cues), noise, rng);
        return sample_dict(generate_scene(spec, seed));
      },
      py::arg("height") = 64, py::arg("width") = 64, py::arg("cues") = "all", py::arg("seed") = 0,
      py::arg("noise") = 0.0,
      "Random scene with the given cues. Returns a dict of [C,H,W] float32 arrays (rgb, depth, flow, mask) and the "
      "scene spec as JSON text.");

  m.def(
      "render_scene", [](const std::string& spec_json, std::uint64_t seed) {
        return sample_dict(generate_scene(scene_spec_from_json(nlohmann::json::parse(spec_json)), seed));
      },
      py::arg("spec_json"), py::arg("seed") = 0, "Render a scene from an explicit JSON spec.");

  m.def(
      "make_dataset",
      [](const std::filesystem::path& out_dir, std::size_t n_train, std::size_t n_test, const std::string& cues,
         std::uint64_t seed, std::size_t size, double noise) {
        DatasetOptions opts;
        opts.height = opts.width = size;
        opts.noise_sigma = noise;
        py::gil_scoped_release release;
        return make_dataset(n_train, n_test, parse_cue_mix(cues), seed, out_dir, opts).dump();
      },
      py::arg("out_dir"), py::arg("n_train"), py::arg("n_test"), py::arg("cues") = "all", py::arg("seed") = 0,
      py::arg("size") = 96, py::arg("noise") = 0.02, "Write a dataset; returns the manifest as JSON text.");

  m.def("iou", [](const CArray<float>& p, const CArray<float>& g, double threshold) {
    same_size(p, g);
    return iou(flat(p), flat(g), Binarize{threshold, false});
  }, py::arg("pred"), py::arg("gt"), py::arg("threshold") = kDefaultThreshold);
  m.def("f_beta", [](const CArray<float>& p, const CArray<float>& g, double beta_sq, double threshold) {
    same_size(p, g);
    return f_beta(flat(p), flat(g), beta_sq, Binarize{threshold, false});
  }, py::arg("pred"), py::arg("gt"), py::arg("beta_sq") = kFBetaSquared, py::arg("threshold") = kDefaultThreshold);
  m.def("mae", [](const CArray<float>& p, const CArray<float>& g) {
    same_size(p, g);
    return mae(flat(p), flat(g));
  }, py::arg("pred"), py::arg("gt"));
  m.def("accuracy", [](const CArray<float>& p, const CArray<float>& g, double threshold) {
    same_size(p, g);
    return accuracy(flat(p), flat(g), Binarize{threshold, false});
  }, py::arg("pred"), py::arg("gt"), py::arg("threshold") = kDefaultThreshold);

  m.def(
      "poly_lr",
      [](std::size_t step, std::size_t total, double lr0, double power) {
        TrainConfig cfg;
        cfg.lr0 = lr0;
        cfg.poly_power = power;
        return poly_lr(step, total, cfg);
      },
      py::arg("step"), py::arg("total_steps"), py::arg("lr0") = 6e-5, py::arg("power") = 0.9);

  m.def(
      "init_scan_params",
      [](std::size_t d_model, std::size_t d_state, std::uint64_t seed) {
        Rng rng(seed);
        return scan_params_dict(ScanParams<double>::init(d_model, d_state, rng));
      },
      py::arg("d_model"), py::arg("d_state"), py::arg("seed") = 0,
      "Freshly initialized scan parameters as a dict of float64 arrays.");
  m.def(
      "selective_scan",
      [](const CArray<double>& x, const py::dict& params) {
        return to_numpy(selective_scan_1d(to_tensor<double>(x), scan_params_from(params)));
      },
      py::arg("x"), py::arg("params"), "Selective scan over x of shape [L,D] or [B,L,D].");
  m.def(
      "cross_selective_scan",
      [](const CArray<double>& x_low, const CArray<double>& x_high, const py::dict& params) {
        return to_numpy(cross_selective_scan(to_tensor<double>(x_low), to_tensor<double>(x_high),
                                             scan_params_from(params)));
      },
      py::arg("x_low"), py::arg("x_high"), py::arg("params"));

  py::class_<MirrorMamba<float>>(m, "Model")
      .def(py::init([](const std::string& config_json) {
             return MirrorMamba<float>(model_config_from_json(nlohmann::json::parse(config_json)));
           }),
           py::arg("config_json") = "{}", "Freshly initialized model; unspecified config fields keep defaults.")
      .def_static(
          "load", [](const std::filesystem::path& path) { return load_checkpoint(path); }, py::arg("path"))
      .def_property_readonly("config", [](const MirrorMamba<float>& model) { return to_json(model.config()).dump(); })
      .def_property_readonly("parameter_total", &MirrorMamba<float>::parameter_total)
      .def(
          "predict",
          [](const MirrorMamba<float>& model, const std::vector<CArray<float>>& inputs) {
            std::vector<Tensor<float>> in;
            for (const auto& a : inputs) {
              auto t = to_tensor<float>(a);
              if (t.rank() == 3) t = reshape(t, Shape{1, t.dim(0), t.dim(1), t.dim(2)});
              in.push_back(t);
            }
            Tensor<float> prob;
            {
              py::gil_scoped_release release;
              NoGradScope<float> off;
              prob = model.forward(in).probability;
            }
            return to_numpy(prob);
          },
          py::arg("inputs"),
          "Probability map [B,1,H,W] for {rgb, depth[, flow]}, each [3,H,W] or [B,3,H,W].")
      .def("save", [](const MirrorMamba<float>& model, const std::filesystem::path& path) {
        save_checkpoint(path, model);
      });
}
