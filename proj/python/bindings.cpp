#include "gavatar/config.hpp"
#include "gavatar/io.hpp"
#include "gavatar/pipeline.hpp"

#include <nlohmann/json.hpp>
#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace gavatar;
using pipeline::Avatar;
using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

namespace {

// Images cross the boundary as H x W x C float64 arrays.
Array to_array(const Image& img) {
  Array out({img.height, img.width, img.channels});
  auto v = out.mutable_unchecked<3>();
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) v(y, x, c) = img.at(c, y, x);
  return out;
}

Image from_array(const Array& a) {
  if (a.ndim() == 2) {
    auto v = a.unchecked<2>();
    Image img(1, static_cast<int>(v.shape(0)), static_cast<int>(v.shape(1)));
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) img.at(0, y, x) = v(y, x);
    return img;
  }
  if (a.ndim() != 3) throw DimensionError("image arrays must be H x W or H x W x C");
  auto v = a.unchecked<3>();
  Image img(static_cast<int>(v.shape(2)), static_cast<int>(v.shape(0)), static_cast<int>(v.shape(1)));
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) img.at(c, y, x) = v(y, x, c);
  return img;
}

config::RunConfig parse(const std::string& text) { return config::from_json(nlohmann::json::parse(text)); }

py::list images(const std::vector<Image>& v) {
  py::list out;
  for (const Image& img : v) out.append(to_array(img));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Gaussian head avatars: synthetic data, prior training, personalization and rendering.";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<PhaseError>(m, "PhaseError", PyExc_RuntimeError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  m.def("default_config", [] { return config::to_json(config::RunConfig{}).dump(); },
        "Default run configuration as a JSON string.");
  m.def("resolve_config", [](const std::string& text) { return config::to_json(parse(text)).dump(); },
        py::arg("config"), "Parse, validate and echo a (partial) configuration.");

  py::class_<raster::Camera>(m, "Camera")
      .def(py::init<>())
      .def_readwrite("K", &raster::Camera::K)
      .def_readwrite("E", &raster::Camera::E)
      .def_readwrite("width", &raster::Camera::width)
      .def_readwrite("height", &raster::Camera::height)
      .def_property_readonly("center", &raster::Camera::center)
      .def_static("look_at", &raster::Camera::look_at, py::arg("eye"), py::arg("target"), py::arg("up"),
                  py::arg("focal"), py::arg("width"), py::arg("height"))
      .def_static("orbit", &synthdata::orbit_camera, py::arg("azimuth_deg"), py::arg("elevation_deg"),
                  py::arg("resolution"));

  py::class_<headmodel::HeadParams>(m, "HeadParams")
      .def(py::init<>())
      .def_readwrite("beta", &headmodel::HeadParams::beta)
      .def_readwrite("theta", &headmodel::HeadParams::theta)
      .def_readwrite("phi", &headmodel::HeadParams::phi)
      .def_readwrite("delta", &headmodel::HeadParams::delta)
      .def("neutral", &headmodel::HeadParams::neutral);

  py::class_<losses::SupervisionBundle>(m, "Frame")
      .def_property_readonly("image", [](const losses::SupervisionBundle& b) { return to_array(b.image); })
      .def_property_readonly("mask", [](const losses::SupervisionBundle& b) { return to_array(b.mask); })
      .def_property_readonly("mouth", [](const losses::SupervisionBundle& b) { return to_array(b.mouth); })
      .def_readonly("camera", &losses::SupervisionBundle::camera)
      .def_readonly("params", &losses::SupervisionBundle::params);

  py::class_<synthdata::Dataset>(m, "Dataset")
      .def_static("generate", [](const std::string& cfg) { return synthdata::generate_dataset(parse(cfg).data); },
                  py::arg("config") = "{}", py::call_guard<py::gil_scoped_release>())
      .def_static("load", &synthdata::load_dataset, py::arg("path"))
      .def("write", &synthdata::write_dataset, py::arg("path"))
      .def_property_readonly("identities", [](const synthdata::Dataset& d) { return d.options.identities; })
      .def_property_readonly("views", [](const synthdata::Dataset& d) { return d.options.views; })
      .def_property_readonly("expressions", [](const synthdata::Dataset& d) { return d.options.expressions; })
      .def_property_readonly("resolution", [](const synthdata::Dataset& d) { return d.options.resolution; })
      .def_readonly("cameras", &synthdata::Dataset::cameras)
      .def("frame", [](const synthdata::Dataset& d, int i, int e, int v) { return d.frame(i, e, v).bundle; },
           py::arg("identity"), py::arg("expression"), py::arg("view"))
      .def("__len__", [](const synthdata::Dataset& d) { return d.frames.size(); });

  py::class_<Avatar>(m, "Avatar")
      .def_static("load", &pipeline::load, py::arg("path"))
      .def("save", [](const Avatar& a, const std::filesystem::path& p) { pipeline::save(a, p); }, py::arg("path"))
      .def_property_readonly("phase", [](const Avatar& a) { return std::string(pipeline::phase_name(a.phase)); })
      .def_readonly("prior_id", &Avatar::prior_id)
      .def_property_readonly("identities", [](const Avatar& a) { return a.model->identities(); })
      .def_property_readonly("num_points", [](const Avatar& a) { return a.model->num_points(); })
      .def_property_readonly("num_parameters", [](const Avatar& a) { return a.model->params().num_scalars(); })
      .def_property_readonly("info", [](const Avatar& a) { return a.info.dump(); })
      .def("codes", [](const Avatar& a, int identity) { return pipeline::effective_codes(a, identity); },
           py::arg("identity") = -1)
      .def("render",
           [](const Avatar& a, const headmodel::HeadParams& p, const raster::Camera& cam, int identity) {
             Image img;
             {
               py::gil_scoped_release nogil;
               img = pipeline::reenact(a, std::span(&p, 1), std::span(&cam, 1), identity)[0];
             }
             return to_array(img);
           },
           py::arg("params"), py::arg("camera"), py::arg("identity") = -1);

  m.def("train_prior",
        [](const synthdata::Dataset& d, const std::string& cfg, const std::vector<int>& ids,
           const std::vector<int>& views) { return pipeline::train_prior(d, parse(cfg).prior, ids, views); },
        py::arg("dataset"), py::arg("config") = "{}", py::arg("identities") = std::vector<int>{},
        py::arg("views") = std::vector<int>{}, py::call_guard<py::gil_scoped_release>());

  m.def("invert",
        [](const Avatar& prior, const std::vector<losses::SupervisionBundle>& shots, const std::string& cfg) {
          pipeline::InversionResult r;
          {
            py::gil_scoped_release nogil;
            r = pipeline::invert(prior, shots, parse(cfg).personalize);
          }
          py::dict out;
          out["w"] = r.w;
          out["renders"] = images(r.renders);
          out["initial_loss"] = r.initial_loss;
          out["final_loss"] = r.final_loss;
          out["avatar"] = py::cast(std::move(r.avatar));
          return out;
        },
        py::arg("prior"), py::arg("shots"), py::arg("config") = "{}");

  m.def("finetune",
        [](const Avatar& inverted, const std::vector<losses::SupervisionBundle>& shots, const std::string& cfg) {
          const pipeline::PersonalizationConfig c = parse(cfg).personalize;
          if (inverted.phase != pipeline::Phase::Inverted)
            throw PhaseError("finetune: expected an inverted avatar");
          if (shots.empty()) throw Error("finetune: at least one shot is required");
          std::vector<Image> cache;
          if (c.view_regularization) cache = pipeline::reference_cache(inverted, shots[0].image.width, c);
          return pipeline::finetune(inverted, shots, cache, c);
        },
        py::arg("inverted"), py::arg("shots"), py::arg("config") = "{}", py::call_guard<py::gil_scoped_release>());

  m.def("train_base",
        [](const std::vector<losses::SupervisionBundle>& shots, const std::string& cfg) {
          const config::RunConfig c = parse(cfg);
          return pipeline::train_base(c.data.tmpl, shots, c.prior);
        },
        py::arg("shots"), py::arg("config") = "{}", py::call_guard<py::gil_scoped_release>());

  m.def("reenact",
        [](const Avatar& a, const std::vector<headmodel::HeadParams>& driving,
           const std::vector<raster::Camera>& cams, int identity) {
          std::vector<Image> out;
          {
            py::gil_scoped_release nogil;
            out = pipeline::reenact(a, driving, cams, identity);
          }
          return images(out);
        },
        py::arg("avatar"), py::arg("driving"), py::arg("cameras"), py::arg("identity") = -1);

  m.def("metrics",
        [](const Array& pred, const Array& gt) {
          const pipeline::Metrics r = pipeline::metrics(from_array(pred), from_array(gt));
          py::dict out;
          out["psnr"] = r.psnr;
          out["ssim"] = r.ssim;
          out["l1"] = r.l1;
          return out;
        },
        py::arg("pred"), py::arg("gt"));

  m.def("rasterize",
        [](const MatX3& mu, const MatX4& rot, const MatX3& scale, const VecX& opacity, const MatX& h,
           const raster::Camera& cam, bool naive) {
          splat::GlobalGaussians g{mu, rot, scale, opacity, h};
          g.check();
          raster::RenderOutput o;
          {
            py::gil_scoped_release nogil;
            o = naive ? raster::rasterize_naive(g, cam) : raster::rasterize(g, cam);
          }
          return py::make_tuple(to_array(o.rgb), to_array(o.feat), to_array(o.alpha));
        },
        py::arg("mu"), py::arg("rot"), py::arg("scale"), py::arg("opacity"), py::arg("h"), py::arg("camera"),
        py::arg("naive") = false, "Splat global Gaussians; returns (rgb, features, alpha) images.");

  m.def("read_png", [](const std::filesystem::path& p) { return to_array(io::read_png(p)); }, py::arg("path"));
  m.def("write_png", [](const std::filesystem::path& p, const Array& a) { io::write_png(p, from_array(a)); },
        py::arg("path"), py::arg("image"));
}
