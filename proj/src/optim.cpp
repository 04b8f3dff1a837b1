#include "fedprompt/optim.hpp"

#include <cmath>
#include <string>

#include "fedprompt/errors.hpp"

namespace fedprompt {

OptimizerKind parse_optimizer_kind(std::string_view name) {
    if (name == "adamw") return OptimizerKind::adamw;
    if (name == "sgd" || name == "sgd_momentum") return OptimizerKind::sgd_momentum;
    throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected adamw or sgd)");
}

std::string_view to_string(OptimizerKind kind) {
    return kind == OptimizerKind::adamw ? "adamw" : "sgd";
}

OptimizerConfig OptimizerConfig::sgd_defaults() {
    OptimizerConfig c;
    c.kind = OptimizerKind::sgd_momentum;
    c.lr = 0.01;
    c.momentum = 0.9;
    c.weight_decay = 0.005;
    return c;
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<Tensor> params)
    : config_(config), params_(std::move(params)) {
    if (!(config_.lr > 0.0)) throw ParameterError("optimizer learning rate must be positive");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        if (!p.defined()) throw StateError("optimizer: undefined parameter");
        m_.emplace_back(p.numel(), 0.0);
        if (config_.kind == OptimizerKind::adamw) v_.emplace_back(p.numel(), 0.0);
    }
}

void Optimizer::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

void Optimizer::step() {
    for (const Tensor& p : params_) {
        if (!p.requires_grad() || !p.has_grad()) throw StateError("optimizer step: parameter without gradient");
    }
    ++steps_;
    const double lr = config_.lr;
    const double wd = config_.weight_decay;

    if (config_.kind == OptimizerKind::adamw) {
        const double b1 = config_.beta1, b2 = config_.beta2;
        const double t = static_cast<double>(steps_);
        const double bc1 = 1.0 - std::pow(b1, t);
        const double bc2 = 1.0 - std::pow(b2, t);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto theta = params_[k].mutable_data();
            auto g = params_[k].mutable_grad();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < theta.size(); ++i) {
                theta[i] *= 1.0 - lr * wd;
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                theta[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
            }
        }
    } else {
        const double mu = config_.momentum;
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto theta = params_[k].mutable_data();
            auto g = params_[k].mutable_grad();
            auto& buf = m_[k];
            for (std::size_t i = 0; i < theta.size(); ++i) {
                const double gi = g[i] + wd * theta[i];
                buf[i] = steps_ == 1 ? gi : mu * buf[i] + gi;
                theta[i] -= lr * buf[i];
            }
        }
    }
    zero_grad();
}

}  // namespace fedprompt
