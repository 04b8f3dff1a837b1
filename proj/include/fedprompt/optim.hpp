#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "fedprompt/tensor.hpp"

namespace fedprompt {

enum class OptimizerKind { sgd_momentum, adamw };

OptimizerKind parse_optimizer_kind(std::string_view name);
std::string_view to_string(OptimizerKind kind);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adamw;
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double momentum = 0.9;
    double weight_decay = 0.01;

    /// SGD settings used for the ResNet-style baselines: lr 0.01, momentum 0.9, decay 0.005.
    static OptimizerConfig sgd_defaults();
    static OptimizerConfig adamw_defaults() { return {}; }

    bool operator==(const OptimizerConfig&) const = default;
};

/**
 * First-order optimizer over a fixed parameter list.
 *
 * AdamW follows the decoupled form: theta <- theta * (1 - lr * wd) before the
 * Adam update. SGD applies L2 weight decay to the gradient, then heavy-ball
 * momentum. step() zeroes the gradients it consumed.
 */
class Optimizer {
public:
    Optimizer(OptimizerConfig config, std::vector<Tensor> params);

    void step();
    void zero_grad();

    std::uint64_t step_count() const noexcept { return steps_; }
    const OptimizerConfig& config() const noexcept { return config_; }
    const std::vector<Tensor>& params() const noexcept { return params_; }
    const std::vector<std::vector<double>>& first_moments() const noexcept { return m_; }
    const std::vector<std::vector<double>>& second_moments() const noexcept { return v_; }

private:
    OptimizerConfig config_;
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::uint64_t steps_ = 0;
};

}  // namespace fedprompt
