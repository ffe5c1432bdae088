#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "mdunet/arch.hpp"
#include "mdunet/checkpoint.hpp"
#include "mdunet/cli.hpp"
#include "mdunet/config.hpp"
#include "mdunet/dataset.hpp"
#include "mdunet/executor.hpp"
#include "mdunet/inq.hpp"
#include "mdunet/train.hpp"

namespace py = pybind11;
using namespace mdunet;

namespace {

DenseSetting dense_from(const py::object& v) {
  if (v.is_none()) return DenseSetting::none();
  if (py::isinstance<py::str>(v)) {
    const auto s = v.cast<std::string>();
    if (s == "multi" || s == "min" || s == "mout") return DenseSetting::multi_scale();
    throw ConfigError("dense setting must be an integer or 'multi', got '" + s + "'");
  }
  return DenseSetting::of(v.cast<int>());
}

ArchConfig make_arch(int depth, std::int64_t base_channels, std::int64_t num_classes, std::int64_t input_channels,
                     const py::object& enc_dense, const py::object& dec_dense, const std::string& cross_mode,
                     const std::string& upsample_mode) {
  ArchConfig c;
  c.depth = depth;
  c.base_channels = base_channels;
  c.num_classes = num_classes;
  c.input_channels = input_channels;
  c.enc_dense = dense_from(enc_dense);
  c.dec_dense = dense_from(dec_dense);
  const auto cm = parse_cross_mode(cross_mode);
  if (!cm) throw ConfigError("unknown cross_mode '" + cross_mode + "'");
  c.cross_mode = *cm;
  const auto um = parse_upsample_mode(upsample_mode);
  if (!um) throw ConfigError("unknown upsample_mode '" + upsample_mode + "'");
  c.upsample_mode = *um;
  c.validate();
  return c;
}

Tensor tensor_from(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 4) throw ShapeError("expected a 4-d (N, C, H, W) array");
  const Shape s{a.shape(0), a.shape(1), a.shape(2), a.shape(3)};
  return Tensor(s, std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> array_from(const Tensor& t) {
  const Shape& s = t.shape();
  py::array_t<float> out({s.n, s.c, s.h, s.w});
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Dataset synthetic(std::int64_t count, std::int64_t size, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.count = count;
  spec.size = size;
  spec.seed = seed;
  spec.validate();
  return synth_dataset(spec);
}

py::dict breakdown(const ModelGraph& g) {
  const ParamBreakdown p = param_count(g);
  py::dict d;
  d["total"] = p.total;
  d["baseline"] = p.baseline;
  d["dense_encoder"] = p.dense_encoder;
  d["dense_decoder"] = p.dense_decoder;
  d["cross"] = p.cross;
  return d;
}

}  // namespace

PYBIND11_MODULE(_mdunet, m) {
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_ValueError);

  py::class_<ArchConfig>(m, "ArchConfig")
      .def(py::init(&make_arch), py::arg("depth") = 5, py::arg("base_channels") = 32, py::arg("num_classes") = 2,
           py::arg("input_channels") = 1, py::arg("enc_dense") = py::none(), py::arg("dec_dense") = py::none(),
           py::arg("cross_mode") = "skip", py::arg("upsample_mode") = "transposed_conv2")
      .def_readonly("depth", &ArchConfig::depth)
      .def_readonly("base_channels", &ArchConfig::base_channels)
      .def_property_readonly("variant_name", &ArchConfig::variant_name);

  py::class_<ModelGraph>(m, "Model")
      .def_property_readonly("config", &ModelGraph::config)
      .def_property_readonly("node_count", [](const ModelGraph& g) { return g.nodes().size(); })
      .def("param_count", &breakdown)
      .def(
          "forward",
          [](ModelGraph& g, const py::array_t<float, py::array::c_style | py::array::forcecast>& x, bool train) {
            return array_from(forward(g, tensor_from(x), train ? Mode::Train : Mode::Infer));
          },
          py::arg("x"), py::arg("train") = false)
      .def(
          "predict",
          [](ModelGraph& g, const py::array_t<float, py::array::c_style | py::array::forcecast>& x) {
            const Tensor logits = forward(g, tensor_from(x), Mode::Infer);
            const Shape& s = logits.shape();
            py::array_t<std::uint8_t> out({s.n, s.h, s.w});
            const auto mask = predict_mask(logits);
            std::copy(mask.begin(), mask.end(), out.mutable_data());
            return out;
          },
          py::arg("x"))
      .def("to_dot", [](const ModelGraph& g) { return export_dot(g); })
      .def("save", [](const ModelGraph& g, const std::string& path) { save_checkpoint(path, g); })
      .def("load", [](ModelGraph& g, const std::string& path) { load_checkpoint(path, g); })
      .def(
          "train_synthetic",
          [](ModelGraph& g, std::int64_t iterations, std::int64_t count, std::int64_t size, double lr,
             std::int64_t batch_size, std::uint64_t seed) {
            TrainConfig t;
            t.base_lr = lr;
            t.batch_size = batch_size;
            t.max_iterations = iterations;
            t.seed = seed;
            std::vector<double> losses;
            py::gil_scoped_release release;
            for (const auto& r : train_loop(g, synthetic(count, size, seed), t).history) losses.push_back(r.loss);
            return losses;
          },
          py::arg("iterations"), py::arg("count") = 100, py::arg("size") = 64, py::arg("lr") = 0.005,
          py::arg("batch_size") = 4, py::arg("seed") = 0)
      .def(
          "evaluate_synthetic",
          [](ModelGraph& g, std::int64_t count, std::int64_t size, std::uint64_t seed) {
            const Metrics r = evaluate(g, synthetic(count, size, seed));
            return py::make_tuple(r.mean_iou, r.dice);
          },
          py::arg("count") = 20, py::arg("size") = 64, py::arg("seed") = 1)
      .def(
          "quantize_step",
          [](ModelGraph& g, double fraction, int bits, bool skip_batch_norm) {
            QuantConfig q;
            q.bits = bits;
            q.skip_batch_norm = skip_batch_norm;
            q.validate();
            auto params = quantizable_parameters(g, q);
            QuantState st{bits, {}};
            st = apply_quant_step(params, st, fraction);
            const std::vector<const Parameter*> view(params.begin(), params.end());
            return frozen_checksum(view);
          },
          py::arg("fraction"), py::arg("bits") = 5, py::arg("skip_batch_norm") = false);

  m.def("build_unet", &build_unet, py::arg("config"), py::arg("seed") = 0);
  m.def("build_mdunet", &build_mdunet, py::arg("config"), py::arg("seed") = 0);

  m.def(
      "quant_bounds",
      [](const std::vector<float>& w, int bits) {
        const QuantBounds b = compute_bounds(w, bits);
        return py::make_tuple(b.n1, b.n2);
      },
      py::arg("weights"), py::arg("bits"));
  m.def(
      "quantize_value",
      [](float w, int n1, int n2) { return quantize_value(w, QuantBounds{n1, n2}); }, py::arg("w"), py::arg("n1"),
      py::arg("n2"));
  m.def(
      "codebook", [](int n1, int n2) { return QuantBounds{n1, n2}.codebook(); }, py::arg("n1"), py::arg("n2"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out;
        std::ostringstream err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = run_command(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
