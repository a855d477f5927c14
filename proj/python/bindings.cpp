#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "hat/checkpoint.h"
#include "hat/complexity.h"
#include "hat/data.h"
#include "hat/lam.h"
#include "hat/metrics.h"
#include "hat/model.h"
#include "hat/trainer.h"

namespace py = pybind11;
using namespace hat;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<double>(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor<double>& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// Images cross the boundary as [H, W, C] (or [H, W]) float arrays in [0, 1].
ImageF to_image(const Array& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw ShapeError("expected an [H, W] or [H, W, C] array");
  ImageF img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1);
  std::copy(a.data(), a.data() + a.size(), img.data.begin());
  return img;
}

Array from_image(const ImageF& img) {
  Array out({img.height, img.width, img.channels});
  std::copy(img.data.begin(), img.data.end(), out.mutable_data());
  return out;
}

ModelConfig make_config(const std::string& preset, const py::dict& overrides) {
  ModelConfig cfg = ModelConfig::preset(preset);
  for (const auto& [k, v] : overrides) cfg.set(py::str(k).cast<std::string>(), py::str(v).cast<std::string>());
  cfg.validate();
  return cfg;
}

py::dict config_dict(const ModelConfig& c) {
  py::dict d;
  d["name"] = c.name;
  d["channels"] = c.channels;
  d["rhag_count"] = c.rhag_count;
  d["hab_per_rhag"] = c.hab_per_rhag;
  d["heads"] = c.heads;
  d["window"] = c.window;
  d["alpha"] = c.alpha;
  d["beta"] = c.beta;
  d["gamma"] = c.gamma;
  d["scale"] = c.scale;
  d["use_cab"] = c.use_cab;
  d["use_ocab"] = c.use_ocab;
  return d;
}

class Model {
 public:
  Model(const std::string& preset, std::uint64_t seed, const py::dict& overrides)
      : model_(make_config(preset, overrides), seed) {
    model_.set_requires_grad(false);
  }
  explicit Model(HatModel<double> m) : model_(std::move(m)) { model_.set_requires_grad(false); }

  // [N, C, H, W] or [H, W, C] (one image).
  Array forward(const Array& x) const {
    const bool single = x.ndim() == 3;
    const Tensor<double> t = single ? image_to_tensor<double>(to_image(x)) : to_tensor(x);
    Tensor<double> out;
    {
      py::gil_scoped_release nogil;
      out = model_.forward(t);
    }
    return single ? from_image(tensor_to_image(out)) : to_array(out);
  }

  py::dict lam(const Array& image, int x, int y, int l, double sigma, int steps, const std::string& detector) const {
    LamConfig cfg;
    cfg.x = x;
    cfg.y = y;
    cfg.l = l;
    cfg.sigma = sigma;
    cfg.steps = steps;
    cfg.parallel = true;
    if (detector == "gradient") cfg.detector = DetectorKind::GradientMagnitude;
    else if (detector == "patchsum") cfg.detector = DetectorKind::PatchSum;
    else throw ConfigError("detector must be gradient or patchsum");
    const auto img = image_to_tensor<double>(to_image(image));
    const ModelFn<double> fn = [this](const Tensor<double>& t) { return model_.forward(t); };
    LamResult r;
    {
      py::gil_scoped_release nogil;
      r = hat::lam(fn, img, cfg);
    }
    Array map({r.height, r.width});
    std::copy(r.attribution.begin(), r.attribution.end(), map.mutable_data());
    py::dict d;
    d["attribution"] = map;
    d["gini"] = r.gini;
    d["di"] = r.di;
    d["completeness_residual"] = r.completeness_residual;
    d["detector_input"] = r.detector_input;
    d["detector_baseline"] = r.detector_baseline;
    d["zero_map"] = r.zero_map;
    return d;
  }

  py::dict parameters() const {
    py::dict d;
    for (const auto& [name, t] : model_.parameters()) d[py::str(name)] = to_array(t);
    return d;
  }

  void save(const std::filesystem::path& p) const { save_model(p, model_); }
  std::int64_t parameter_count() const { return model_.parameter_count(); }
  py::dict config() const { return config_dict(model_.config()); }

 private:
  HatModel<double> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Hybrid attention transformer for image super-resolution";

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&, std::uint64_t, const py::dict&>(), py::arg("preset") = "tiny",
           py::arg("seed") = 0, py::arg("overrides") = py::dict())
      .def_static("load", [](const std::filesystem::path& p) { return Model(load_model<double>(p)); })
      .def("forward", &Model::forward, py::arg("x"))
      .def("__call__", &Model::forward, py::arg("x"))
      .def("lam", &Model::lam, py::arg("image"), py::arg("x"), py::arg("y"), py::arg("l") = 16,
           py::arg("sigma") = 1.5, py::arg("steps") = 100, py::arg("detector") = "gradient")
      .def("parameters", &Model::parameters)
      .def("save", &Model::save)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def_property_readonly("config", &Model::config);

  m.def(
      "complexity",
      [](const std::string& preset, int h, int w, const py::dict& overrides) {
        const auto r = complexity(make_config(preset, overrides), h, w);
        py::dict d;
        d["params"] = r.param_count;
        d["multi_adds"] = r.multi_adds;
        d["report"] = format_report(r);
        return d;
      },
      py::arg("preset") = "hat", py::arg("h") = 64, py::arg("w") = 64, py::arg("overrides") = py::dict());

  m.def("psnr_y", [](const Array& a, const Array& b, int crop) { return psnr_y(to_image(a), to_image(b), crop); },
        py::arg("a"), py::arg("b"), py::arg("crop") = 0);
  m.def("ssim_y", [](const Array& a, const Array& b, int crop) { return ssim_y(to_image(a), to_image(b), crop); },
        py::arg("a"), py::arg("b"), py::arg("crop") = 0);
  m.def("gini", [](std::vector<double> v) { return gini(std::move(v)).gini; });
  m.def("diffusion_index", &diffusion_index);
  m.def("bicubic_downsample", [](const Array& img, int s) { return from_image(bicubic_downsample(to_image(img), s)); },
        py::arg("image"), py::arg("scale"));
  m.def("augment", [](const Array& img, int code) { return from_image(augment(to_image(img), code)); },
        py::arg("image"), py::arg("code"));
  m.def("presets", [] {
    return std::vector<std::string>{"hat-s", "hat", "hat-l", "tiny", "baseline-w8", "baseline-w16"};
  });
}
