#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

namespace fedprompt {

using Shape = std::vector<std::size_t>;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty when no gradient buffer exists
    bool requires_grad = false;
    bool is_leaf = true;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

/**
 * Dense row-major array of doubles taking part in reverse-mode differentiation.
 *
 * A Tensor is a handle: copies share storage, which is what lets an optimizer
 * and a model refer to the same parameter. Use detach() for an independent copy.
 * Shapes have at most two extents; a scalar has the empty shape.
 */
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from_vector(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);

    bool defined() const noexcept { return impl_ != nullptr; }

    const Shape& shape() const;
    std::size_t dim() const { return shape().size(); }
    std::size_t numel() const;
    /// Row count; a 1-D tensor counts as a single row.
    std::size_t rows() const;
    /// Column count; a 1-D tensor of length n has n columns.
    std::size_t cols() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    double operator[](std::size_t i) const { return data()[i]; }
    double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }
    double item() const;

    bool requires_grad() const;
    /// Enabling allocates a zeroed gradient buffer; disabling drops it.
    Tensor& set_requires_grad(bool flag);
    bool is_leaf() const;

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    /// Deep copy with requires_grad = false.
    Tensor detach() const;
    /// Overwrite values in place; size must match.
    void assign(std::span<const double> values);
    void assign(const Tensor& other) { assign(other.data()); }

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

    const std::shared_ptr<detail::TensorImpl>& impl() const noexcept { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    friend Tensor make_tensor(Shape shape, std::vector<double> values);

    std::shared_ptr<detail::TensorImpl> impl_;
};

Tensor make_tensor(Shape shape, std::vector<double> values);

/**
 * Ordered record of differentiable operations.
 *
 * Operations record themselves onto the tape that is active on the calling
 * thread (see TapeScope) whenever one of their inputs requires a gradient.
 * Recording order is a topological order, so backward() replays the node
 * list in reverse.
 */
class Tape {
public:
    using BackwardFn = std::function<void()>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    void record(const Tensor& output, BackwardFn fn);

    /// Seeds d(loss)/d(loss) = 1 and accumulates into every leaf that requires grad.
    /// Intermediate gradients are reset first, so replaying gives identical results.
    void backward(const Tensor& loss);

    /// Drops all nodes after zeroing intermediate gradient buffers. Leaf values and
    /// leaf gradients are left alone.
    void clear();

    std::size_t size() const noexcept { return nodes_.size(); }
    bool contains(const Tensor& t) const;

private:
    struct Node {
        std::shared_ptr<detail::TensorImpl> output;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

/// RAII guard making a tape the active one on the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

/// RAII guard that suspends recording on the current thread.
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape() noexcept;

/// Which entries of a score matrix take part in a row softmax.
struct AttentionMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> allowed;

    static AttentionMask causal(std::size_t n);
    bool operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
};

// ---------------------------------------------------------------------------
// Differentiable primitives
// ---------------------------------------------------------------------------

/// Matrix product. A 1-D left operand is a row vector, a 1-D right operand a
/// column vector; the matching extent is dropped from the result.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// a[r x c] + bias[c] broadcast over rows.
Tensor add_bias(const Tensor& a, const Tensor& bias);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor dot(const Tensor& u, const Tensor& v);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_rows(std::initializer_list<Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
/// Row i of a 2-D tensor as a 1-D tensor.
Tensor row(const Tensor& a, std::size_t i);
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// tanh approximation of GELU.
Tensor gelu(const Tensor& x);
/// Row softmax restricted to entries the mask allows (all entries when mask is null).
Tensor masked_softmax_rows(const Tensor& x, const AttentionMask* mask);

Tensor softmax_with_temperature(const Tensor& x, double tau);
/// Unit-norm rescale of a vector, or of every row of a matrix.
Tensor l2_normalize(const Tensor& x);
/// -<u, v> / (|u| |v|).
Tensor cosine_loss(const Tensor& u, const Tensor& v);
/// -log softmax(logits)[target].
Tensor cross_entropy_loss(const Tensor& logits, std::size_t target);

inline constexpr double kNormEpsilon = 1e-12;

}  // namespace fedprompt
