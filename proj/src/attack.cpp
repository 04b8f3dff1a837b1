#include "fedprompt/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "fedprompt/errors.hpp"
#include "fedprompt/random.hpp"

namespace fedprompt {

namespace {

std::vector<double> flatten_grads(std::span<const Tensor> params) {
    std::vector<double> out;
    for (const Tensor& p : params) {
        if (p.has_grad()) {
            out.insert(out.end(), p.grad().begin(), p.grad().end());
        } else {
            out.insert(out.end(), p.numel(), 0.0);
        }
    }
    return out;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

}  // namespace

double flat_cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("flat_cosine: length mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa <= kNormEpsilon * kNormEpsilon || bb <= kNormEpsilon * kNormEpsilon) {
        throw DegenerateInputError("flat_cosine: zero vector");
    }
    return ab / std::sqrt(aa * bb);
}

LinearSoftmaxModel::LinearSoftmaxModel(std::size_t input_dim, std::size_t classes, std::uint64_t seed) {
    if (input_dim < 1 || classes < 1) throw ConfigError("linear model needs positive extents");
    Rng rng(derive_seed(seed, "linear_model"));
    weight_ = Tensor::from_vector({classes, input_dim},
                                  normal_vector(rng, classes * input_dim, 1.0 / std::sqrt(double(input_dim))));
    bias_ = Tensor::from_vector({classes}, normal_vector(rng, classes, 0.1));
    weight_.set_requires_grad(true);
    bias_.set_requires_grad(true);
}

std::vector<double> LinearSoftmaxModel::gradient(const Tensor& input, std::size_t label) {
    if (input.numel() != weight_.cols()) throw DimensionError("linear model: input width mismatch");
    weight_.zero_grad();
    bias_.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    const Tensor x = reshape(input, {input.numel()});
    const Tensor loss = cross_entropy_loss(add(matmul(weight_, x), bias_), label);
    tape.backward(loss);
    const Tensor params[] = {weight_, bias_};
    return flatten_grads(params);
}

PromptGradientModel::PromptGradientModel(const PromptModel& model) : model_(model.clone()) {
    model_.set_trainable(false, false);
    params_ = model_.trainable_parameters();
}

std::string PromptGradientModel::variant() const { return std::string(to_string(model_.variant().mode)); }

std::size_t PromptGradientModel::parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& p : params_) n += p.numel();
    return n;
}

std::vector<double> PromptGradientModel::gradient(const Tensor& input, std::size_t label) {
    for (Tensor& p : params_) p.zero_grad();
    SampleRecord sample{input, label, model_.owner()};
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = model_.loss(sample);
    tape.backward(loss);
    return flatten_grads(params_);
}

GradientCapture capture_gradient(GradientModel& model, const Tensor& input, std::size_t label) {
    if (label >= model.label_count()) throw IndexError("capture_gradient: label out of range");
    GradientCapture c;
    c.gradient = model.gradient(input, label);
    c.variant = model.variant();
    c.parameter_count = model.parameter_count();
    c.input_rows = model.input_rows();
    c.input_cols = model.input_cols();
    c.label = label;
    return c;
}

std::vector<double> linear_leak_oracle(const GradientCapture& capture) {
    const std::size_t d = capture.input_rows * capture.input_cols;
    if (d == 0 || capture.gradient.size() % (d + 1) != 0) {
        throw DimensionError("linear_leak_oracle: capture is not a linear-layer gradient");
    }
    const std::size_t classes = capture.gradient.size() / (d + 1);
    const double* dw = capture.gradient.data();
    const double* db = dw + classes * d;
    std::size_t best = 0;
    double best_norm = -1.0;
    for (std::size_t j = 0; j < classes; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += dw[j * d + i] * dw[j * d + i];
        if (s > best_norm) {
            best_norm = s;
            best = j;
        }
    }
    best_norm = std::sqrt(best_norm);
    if (best_norm <= 1e-9) throw DegenerateInputError("linear_leak_oracle: gradient carries no signal");
    const double sign = db[best] < 0.0 ? -1.0 : 1.0;
    std::vector<double> x(d);
    for (std::size_t i = 0; i < d; ++i) x[i] = sign * dw[best * d + i] / best_norm;
    return x;
}

DlgResult dlg_reconstruct(const GradientCapture& capture, GradientModel& model, const DlgOptions& options,
                          const Tensor* truth) {
    if (options.iters == 0) throw ParameterError("dlg_reconstruct: iteration budget must be positive");
    if (options.restarts == 0) throw ParameterError("dlg_reconstruct: need at least one restart");
    if (!(options.initial_step > 0.0) || !(options.min_step > 0.0)) {
        throw ParameterError("dlg_reconstruct: step sizes must be positive");
    }
    if (capture.variant != model.variant() || capture.gradient.size() != model.parameter_count()) {
        throw ConfigError("dlg_reconstruct: capture does not match the model (" + capture.variant + " vs " +
                          model.variant() + ")");
    }
    const std::size_t rows = model.input_rows(), cols = model.input_cols(), dim = rows * cols;
    const Shape shape = rows == 1 ? Shape{cols} : Shape{rows, cols};
    const std::span<const double> observed = capture.gradient;

    DlgResult best;
    best.final_objective = std::numeric_limits<double>::infinity();
    const bool silent = std::all_of(observed.begin(), observed.end(), [](double g) { return g == 0.0; });

    for (std::size_t r = 0; r < options.restarts; ++r) {
        Rng rng(derive_seed(options.seed, r));
        std::vector<double> x = normal_vector(rng, dim, 1.0);
        std::size_t evals = 0;
        auto objective = [&](const std::vector<double>& v, std::size_t label) {
            ++evals;
            return squared_distance(model.gradient(Tensor::from_vector(shape, v), label), observed);
        };
        auto pick_label = [&](double& value) {
            std::size_t label = 0;
            value = std::numeric_limits<double>::infinity();
            for (std::size_t y = 0; y < model.label_count(); ++y) {
                const double f = objective(x, y);
                if (f < value) {
                    value = f;
                    label = y;
                }
            }
            return label;
        };

        double f = 0.0;
        std::size_t label = pick_label(f);
        std::vector<double> trace{f};
        if (!silent) {
            std::vector<std::size_t> coords(dim);
            std::iota(coords.begin(), coords.end(), 0);
            double step = options.initial_step;
            while (evals < options.iters && step >= options.min_step) {
                std::shuffle(coords.begin(), coords.end(), rng);
                bool improved = false;
                for (std::size_t i : coords) {
                    if (evals >= options.iters) break;
                    for (double dir : {1.0, -1.0}) {
                        const double old = x[i];
                        x[i] = old + dir * step;
                        const double trial = objective(x, label);
                        if (trial < f) {
                            f = trial;
                            trace.push_back(f);
                            improved = true;
                            break;
                        }
                        x[i] = old;
                        if (evals >= options.iters) break;
                    }
                }
                if (!improved) step *= 0.5;
                if (evals + model.label_count() <= options.iters) {
                    double g = 0.0;
                    const std::size_t y = pick_label(g);
                    if (g < f) {
                        f = g;
                        label = y;
                        trace.push_back(f);
                    }
                }
            }
        }
        if (f < best.final_objective) {
            best.reconstruction = Tensor::from_vector(shape, x);
            best.label = label;
            best.final_objective = f;
            best.trace = std::move(trace);
        }
        best.evaluations += evals;
        if (silent) break;
    }
    best.success = !silent;
    if (truth) {
        if (truth->numel() != dim) throw DimensionError("dlg_reconstruct: truth has the wrong size");
        best.cosine_to_truth = flat_cosine(best.reconstruction.data(), truth->data());
    }
    return best;
}

void save_capture(const std::filesystem::path& path, const GradientCapture& c, const Tensor* truth) {
    nlohmann::json j;
    j["variant"] = c.variant;
    j["parameter_count"] = c.parameter_count;
    j["input_rows"] = c.input_rows;
    j["input_cols"] = c.input_cols;
    j["label"] = c.label;
    j["owner"] = c.owner;
    j["gradient"] = c.gradient;
    if (truth) j["truth"] = std::vector<double>(truth->data().begin(), truth->data().end());
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << j.dump() << '\n';
}

GradientCapture load_capture(const std::filesystem::path& path, Tensor* truth) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read '" + path.string() + "'");
    GradientCapture c;
    try {
        const nlohmann::json j = nlohmann::json::parse(in);
        c.variant = j.at("variant").get<std::string>();
        c.parameter_count = j.at("parameter_count").get<std::size_t>();
        c.input_rows = j.at("input_rows").get<std::size_t>();
        c.input_cols = j.at("input_cols").get<std::size_t>();
        c.label = j.at("label").get<std::size_t>();
        c.owner = j.value("owner", std::size_t{0});
        c.gradient = j.at("gradient").get<std::vector<double>>();
        if (truth && j.contains("truth")) {
            auto v = j["truth"].get<std::vector<double>>();
            const Shape shape = c.input_rows == 1 ? Shape{c.input_cols} : Shape{c.input_rows, c.input_cols};
            *truth = Tensor::from_vector(shape, std::move(v));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + path.string() + "': " + e.what());
    }
    if (c.gradient.size() != c.parameter_count) throw DataError("'" + path.string() + "': gradient length mismatch");
    return c;
}

}  // namespace fedprompt
