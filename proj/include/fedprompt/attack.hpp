#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fedprompt/prompt_model.hpp"
#include "fedprompt/tensor.hpp"

namespace fedprompt {

/// Flattened gradient of every trainable parameter for one (input, label) step.
struct GradientCapture {
    std::vector<double> gradient;
    std::string variant;
    std::size_t parameter_count = 0;
    std::size_t input_rows = 0;
    std::size_t input_cols = 0;
    std::size_t label = 0;  // kept for evaluation only; the attack does not read it
    std::size_t owner = 0;  // domain of the client that produced it
};

/// Something whose per-sample parameter gradient an attacker can query.
class GradientModel {
public:
    virtual ~GradientModel() = default;
    virtual std::string variant() const = 0;
    virtual std::size_t parameter_count() const = 0;
    virtual std::size_t input_rows() const = 0;
    virtual std::size_t input_cols() const = 0;
    virtual std::size_t label_count() const = 0;
    virtual std::vector<double> gradient(const Tensor& input, std::size_t label) = 0;
};

/// logits = W x + b with W of shape classes x d, trained with cross-entropy.
/// The flattened gradient lists dW row-major, then db.
class LinearSoftmaxModel final : public GradientModel {
public:
    LinearSoftmaxModel(std::size_t input_dim, std::size_t classes, std::uint64_t seed);

    std::string variant() const override { return "linear"; }
    std::size_t parameter_count() const override { return weight_.numel() + bias_.numel(); }
    std::size_t input_rows() const override { return 1; }
    std::size_t input_cols() const override { return weight_.cols(); }
    std::size_t label_count() const override { return weight_.rows(); }
    std::vector<double> gradient(const Tensor& input, std::size_t label) override;

    const Tensor& weight() const noexcept { return weight_; }
    const Tensor& bias() const noexcept { return bias_; }

private:
    Tensor weight_;
    Tensor bias_;
};

/// Gradient of a client's prompt-model loss with respect to its trainable prompts.
/// The label is the class; the domain is the client's own, known to the server.
class PromptGradientModel final : public GradientModel {
public:
    explicit PromptGradientModel(const PromptModel& model);

    std::string variant() const override;
    std::size_t parameter_count() const override;
    std::size_t input_rows() const override { return model_.encoders().config.patch_count; }
    std::size_t input_cols() const override { return model_.encoders().config.vision_width; }
    std::size_t label_count() const override { return model_.options().n_classes; }
    std::vector<double> gradient(const Tensor& input, std::size_t label) override;

private:
    PromptModel model_;
    std::vector<Tensor> params_;
};

GradientCapture capture_gradient(GradientModel& model, const Tensor& input, std::size_t label);

/// Exact input direction from a linear-layer capture: row j of dW is g_j x, so
/// x = sign(g_j) * row_j / |row_j| for the row of largest norm. Unit norm.
std::vector<double> linear_leak_oracle(const GradientCapture& capture);

struct DlgOptions {
    std::size_t iters = 2000;  ///< budget of objective evaluations per restart
    std::size_t restarts = 2;
    double initial_step = 0.5;
    double min_step = 1e-4;
    std::uint64_t seed = 0;
};

struct DlgResult {
    Tensor reconstruction;
    std::size_t label = 0;
    double final_objective = 0.0;
    std::optional<double> cosine_to_truth;
    std::size_t evaluations = 0;
    bool success = true;  ///< false when the observed gradient carries no signal
    /// Objective after every accepted move of the best restart (non-increasing).
    std::vector<double> trace;
};

/**
 * Deep-Leakage-from-Gradient reconstruction by derivative-free coordinate
 * descent on |grad(dummy, label) - observed|^2. Each restart draws a Gaussian
 * dummy, picks the best label by enumeration, then cycles over coordinates
 * trying +/- step and halving the step after a pass without progress. The
 * label is re-chosen after every pass. Restarts run in order; the best
 * objective wins.
 */
DlgResult dlg_reconstruct(const GradientCapture& capture, GradientModel& model, const DlgOptions& options,
                          const Tensor* truth = nullptr);

double flat_cosine(std::span<const double> a, std::span<const double> b);

void save_capture(const std::filesystem::path& path, const GradientCapture& capture, const Tensor* truth);
GradientCapture load_capture(const std::filesystem::path& path, Tensor* truth);

}  // namespace fedprompt
