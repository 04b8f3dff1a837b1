// Python module fedprompt._core.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fedprompt/errors.hpp"
#include "fedprompt/experiment.hpp"

namespace py = pybind11;
using namespace fedprompt;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    if (a.ndim() < 1 || a.ndim() > 2) throw DimensionError("expected a 1-D or 2-D array");
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor::from_vector(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

py::dict summary_dict(const MethodSummary& s) {
    py::dict d;
    d["method"] = s.method;
    d["domain_accuracy"] = s.domain_accuracy;
    d["mean_accuracy"] = s.mean_accuracy;
    d["std_across_domains"] = s.std_across_domains;
    d["mean_true_domain_weight"] = s.mean_true_domain_weight;
    return d;
}

py::dict result_dict(const ExperimentResult& r) {
    py::list summaries;
    for (const auto& s : r.summaries) summaries.append(summary_dict(s));
    py::list runs;
    for (const auto& run : r.runs) {
        py::dict d;
        d["method"] = run.method;
        d["seed"] = run.seed;
        d["trainable_parameters"] = run.trainable_parameters;
        d["encoder_unchanged"] = run.encoder_hash_before == run.encoder_hash_after;
        py::list accuracy;
        for (const auto& m : run.history) {
            double s = 0.0;
            for (const auto& dm : m.domains) s += dm.accuracy;
            accuracy.append(m.domains.empty() ? 0.0 : s / m.domains.size());
        }
        d["accuracy_per_round"] = accuracy;
        runs.append(d);
    }
    py::dict out;
    out["summaries"] = summaries;
    out["runs"] = runs;
    out["output_dir"] = r.output_dir;
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Federated dual prompt tuning simulator";

    auto base = py::register_exception<Error>(m, "FedPromptError");
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());

    py::class_<ExperimentConfig>(m, "Config")
        .def_property(
            "variant", [](const ExperimentConfig& c) { return std::string(to_string(c.variant)); },
            [](ExperimentConfig& c, const std::string& v) { c.variant = parse_variant(v); })
        .def_readwrite("seeds", &ExperimentConfig::seeds)
        .def_readwrite("prompt_length", &ExperimentConfig::prompt_length)
        .def_readwrite("tau_d", &ExperimentConfig::tau_d)
        .def_readwrite("output_dir", &ExperimentConfig::output_dir)
        .def_property(
            "rounds", [](const ExperimentConfig& c) { return c.federation.schedule.rounds; },
            [](ExperimentConfig& c, std::size_t r) { c.federation.schedule.rounds = r; })
        .def_property(
            "clients_per_domain", [](const ExperimentConfig& c) { return c.federation.clients_per_domain; },
            [](ExperimentConfig& c, std::size_t k) { c.federation.clients_per_domain = k; })
        .def_property_readonly("n_domains", [](const ExperimentConfig& c) { return c.dataset.n_domains; })
        .def_property_readonly("n_classes", [](const ExperimentConfig& c) { return c.dataset.n_classes; })
        .def("validate", &ExperimentConfig::validate)
        .def("to_yaml", &serialize_config)
        .def("__eq__", &ExperimentConfig::operator==);

    m.def("parse_config", [](const std::string& text) { return parse_config(text); }, py::arg("text"));
    m.def("load_config", &load_config, py::arg("path"));

    m.def(
        "run", [](const ExperimentConfig& c) { return result_dict(run_experiment(c)); }, py::arg("config"));
    m.def(
        "compare",
        [](const ExperimentConfig& c, const std::vector<std::string>& variants) {
            return result_dict(compare_variants(c, variants));
        },
        py::arg("config"), py::arg("variants"));
    m.def(
        "sweep",
        [](const ExperimentConfig& c, const std::string& axis, const std::vector<std::string>& values) {
            return result_dict(sweep(c, axis, values));
        },
        py::arg("config"), py::arg("axis"), py::arg("values"));

    m.def(
        "domain_weights",
        [](const Array& query, const Array& keys, double tau) {
            return to_array(domain_weights(AttentionRecord{to_tensor(query), to_tensor(keys)}, tau).values);
        },
        py::arg("query"), py::arg("keys"), py::arg("tau"));
    m.def(
        "fuse", [](const Array& weights, const Array& feats) {
            const Tensor w = to_tensor(weights);
            return to_array(fuse_text_features(DomainWeights{w, w}, to_tensor(feats)));
        },
        py::arg("weights"), py::arg("features"));
    m.def(
        "decode_nearest_words",
        [](const Array& prompt, const Array& vocab) {
            return decode_prompt_nearest_words(to_tensor(prompt), to_tensor(vocab));
        },
        py::arg("prompt"), py::arg("vocab"));
    m.def(
        "trainable_parameter_count",
        [](const std::string& variant, std::size_t n, std::size_t m_len, std::size_t de, std::size_t dv) {
            return trainable_parameter_count(parse_variant(variant), n, m_len, de, dv);
        },
        py::arg("variant"), py::arg("n_domains"), py::arg("prompt_length"), py::arg("text_width"),
        py::arg("vision_width"));
    m.def(
        "linear_leak",
        [](const Array& x, std::size_t classes, std::size_t label, std::uint64_t seed) {
            const Tensor input = to_tensor(x);
            LinearSoftmaxModel model(input.numel(), classes, seed);
            const Tensor flat = reshape(input, {input.numel()});
            const auto r = linear_leak_oracle(capture_gradient(model, flat, label));
            return to_array(Tensor::from_vector({r.size()}, r));
        },
        py::arg("x"), py::arg("classes"), py::arg("label"), py::arg("seed") = 0);
    m.def(
        "generate_domains",
        [](std::size_t n_domains, std::size_t n_classes, std::size_t samples, double strength, double sigma,
           std::uint64_t seed, std::size_t patch_count, std::size_t patch_width) {
            DatasetSpec spec{n_domains, n_classes, samples, strength, sigma, seed, patch_count, patch_width};
            const auto split = generate_domains(spec);
            auto pack = [&](const DomainDataset& d) {
                Array x({py::ssize_t(d.size()), py::ssize_t(patch_count), py::ssize_t(patch_width)});
                std::vector<std::int64_t> y, dom;
                double* px = x.mutable_data();
                for (std::size_t i = 0; i < d.size(); ++i) {
                    const auto& s = d.samples[i];
                    std::copy(s.patches.data().begin(), s.patches.data().end(), px + i * patch_count * patch_width);
                    y.push_back(static_cast<std::int64_t>(s.class_id));
                    dom.push_back(static_cast<std::int64_t>(s.domain_id));
                }
                return py::make_tuple(x, py::array_t<std::int64_t>(y.size(), y.data()),
                                      py::array_t<std::int64_t>(dom.size(), dom.data()));
            };
            return py::make_tuple(pack(split.train), pack(split.test));
        },
        py::arg("n_domains") = 3, py::arg("n_classes") = 5, py::arg("samples_per_class_per_domain") = 40,
        py::arg("domain_strength") = 1.5, py::arg("noise_sigma") = 0.1, py::arg("seed") = 0,
        py::arg("patch_count") = 16, py::arg("patch_width") = 24);
}
