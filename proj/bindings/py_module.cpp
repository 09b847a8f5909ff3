#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "uovn/gradcheck.hpp"
#include "uovn/train.hpp"

#include <json.hpp>

namespace py = pybind11;

namespace {

uovn::Tensor tensor_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& arr) {
    std::vector<int> shape;
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape.push_back(static_cast<int>(arr.shape(i)));
    std::vector<float> data(arr.data(), arr.data() + arr.size());
    return uovn::Tensor(std::move(shape), std::move(data));
}

py::array_t<float> array_from_tensor(const uovn::Tensor& t) {
    std::vector<py::ssize_t> shape;
    for (int e : t.shape()) shape.push_back(e);
    py::array_t<float> arr(shape);
    std::copy(t.vec().begin(), t.vec().end(), arr.mutable_data());
    return arr;
}

// Runs a single-op graph forward.
template <typename Fn>
py::array_t<float> unary_forward(const py::array_t<float, py::array::c_style | py::array::forcecast>& x, Fn&& fn) {
    uovn::Graph g;
    uovn::Value v = g.constant(tensor_from_array(x));
    return array_from_tensor(fn(g, v).val());
}

uovn::BoxD box_from_seq(const std::vector<double>& b) {
    if (b.size() != 4) throw uovn::InputError("box must be (cx, cy, w, h)");
    return {b[0], b[1], b[2], b[3]};
}

}  // namespace

PYBIND11_MODULE(_uovn, m) {
    m.doc() = "Unified open-vocabulary dense prediction: core operations";

    py::register_exception<uovn::ConfigError>(m, "UovnConfigError");
    py::register_exception<uovn::InputError>(m, "UovnInputError");
    py::register_exception<uovn::IoError>(m, "UovnIoError");
    py::register_exception<uovn::NumericError>(m, "UovnNumericError");

    m.def("softmax", [](const py::array_t<float, py::array::c_style | py::array::forcecast>& x, int axis) {
        return unary_forward(x, [axis](uovn::Graph&, uovn::Value v) { return uovn::softmax(v, axis); });
    }, py::arg("x"), py::arg("axis") = -1);
    m.def("sigmoid", [](const py::array_t<float, py::array::c_style | py::array::forcecast>& x) {
        return unary_forward(x, [](uovn::Graph&, uovn::Value v) { return uovn::sigmoid(v); });
    });
    m.def("layer_norm", [](const py::array_t<float, py::array::c_style | py::array::forcecast>& x) {
        return unary_forward(x, [](uovn::Graph& g, uovn::Value v) {
            const int d = v.val().shape().back();
            return uovn::layer_norm(v, g.constant(uovn::Tensor::full({d}, 1.0f)), g.constant(uovn::Tensor({d})));
        });
    });
    m.def("bilinear_sample",
          [](const py::array_t<float, py::array::c_style | py::array::forcecast>& map,
             const py::array_t<float, py::array::c_style | py::array::forcecast>& points) {
              uovn::Graph g;
              uovn::Value mv = g.constant(tensor_from_array(map));
              uovn::Value pv = g.constant(tensor_from_array(points));
              return array_from_tensor(uovn::bilinear_sample(mv, pv).val());
          });

    m.def("giou", [](const std::vector<double>& a, const std::vector<double>& b) {
        return uovn::giou(box_from_seq(a), box_from_seq(b));
    });
    m.def("box_iou", [](const std::vector<double>& a, const std::vector<double>& b) {
        return uovn::box_iou(box_from_seq(a), box_from_seq(b));
    });
    m.def("hungarian_match", [](const py::array_t<float, py::array::c_style | py::array::forcecast>& cost) {
        return uovn::hungarian_match(tensor_from_array(cost));
    });
    m.def("miou", &uovn::miou, py::arg("pred"), py::arg("gt"), py::arg("num_classes"));

    m.def("apply_prompt", &uovn::apply_prompt);
    m.def("tokenize", &uovn::tokenize);

    m.def("write_tensor", [](const std::string& path, const py::array_t<float, py::array::c_style | py::array::forcecast>& x) {
        uovn::write_tensor(path, tensor_from_array(x));
    });
    m.def("read_tensor", [](const std::string& path) { return array_from_tensor(uovn::read_tensor(path)); });

    m.def("generate_dataset",
          [](const std::string& dir, const std::vector<std::string>& domains, int per_domain, std::uint64_t seed,
             int image_size) {
              std::vector<uovn::DomainSpec> specs;
              for (const auto& id : domains) specs.push_back(uovn::stock_domain(id));
              const uovn::Dataset ds = uovn::build_dataset(specs, per_domain, seed, image_size);
              uovn::write_dataset(dir, ds);
              return ds.samples.size();
          },
          py::arg("dir"), py::arg("domains"), py::arg("per_domain") = 8, py::arg("seed") = 5,
          py::arg("image_size") = 64);

    m.def("train", [](const std::string& config_json, const std::string& out_dir) {
        const uovn::RunConfig cfg = uovn::parse_run_config(config_json);
        const uovn::TrainResult res = uovn::cmd_train(cfg, out_dir);
        py::dict d;
        d["steps_run"] = res.steps_run;
        d["first_total"] = res.first_total;
        d["final_total"] = res.final_total;
        return d;
    });
    m.def("evaluate", [](const std::string& ckpt, const std::string& data, const std::vector<std::string>& tasks) {
        const uovn::EvalReport rep = uovn::cmd_eval(ckpt, data, tasks);
        py::module_ json = py::module_::import("json");
        return json.attr("loads")(uovn::eval_report_json(rep));
    });
    m.def("infer", &uovn::cmd_infer, py::arg("ckpt"), py::arg("image"), py::arg("queries"), py::arg("out"));
    m.def("gradcheck", [](std::uint64_t seed) {
        const uovn::GradCheckSuite suite = uovn::gradcheck_suite(seed);
        py::dict d;
        for (const auto& c : suite.components) d[c.name.c_str()] = c.max_rel_err;
        return d;
    }, py::arg("seed") = 1);
}
