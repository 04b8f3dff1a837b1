#include "fedprompt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "fedprompt/errors.hpp"

namespace fedprompt {

namespace {

thread_local Tape* g_active_tape = nullptr;

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

std::size_t product(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw StateError(std::string(op) + ": undefined tensor");
}

Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return nullptr;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return g_active_tape;
    }
    return nullptr;
}

Tape* recording_tape(std::span<const Tensor> inputs) {
    if (g_active_tape == nullptr) return nullptr;
    for (const Tensor& t : inputs) {
        if (t.requires_grad()) return g_active_tape;
    }
    return nullptr;
}

// Gradient sink for an input, or null when the input does not take gradients.
std::vector<double>* sink(const ImplPtr& p) {
    if (!p->requires_grad) return nullptr;
    p->ensure_grad();
    return &p->grad;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

void require_2d(const Tensor& a, const char* op) {
    if (a.dim() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor make_tensor(Shape shape, std::vector<double> values) {
    for (std::size_t e : shape) {
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape.size() > 2) throw DimensionError("tensors have at most two extents, got " + shape_str(shape));
    if (product(shape) != values.size()) {
        throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                             " values");
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    const std::size_t n = product(shape);
    return make_tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values) {
    return make_tensor(std::move(shape), std::move(values));
}

Tensor Tensor::scalar(double value) { return make_tensor({}, {value}); }

const Shape& Tensor::shape() const {
    require_defined(*this, "shape");
    return impl_->shape;
}

std::size_t Tensor::numel() const { return data().size(); }

std::size_t Tensor::rows() const {
    const auto& s = shape();
    return s.size() == 2 ? s[0] : 1;
}

std::size_t Tensor::cols() const {
    const auto& s = shape();
    if (s.empty()) return 1;
    return s.back();
}

std::span<const double> Tensor::data() const {
    require_defined(*this, "data");
    return impl_->data;
}

std::span<double> Tensor::mutable_data() {
    require_defined(*this, "mutable_data");
    return impl_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ != nullptr && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    require_defined(*this, "set_requires_grad");
    impl_->requires_grad = flag;
    if (flag) {
        impl_->ensure_grad();
    } else {
        impl_->grad.clear();
    }
    return *this;
}

bool Tensor::is_leaf() const { return impl_ == nullptr || impl_->is_leaf; }

bool Tensor::has_grad() const { return impl_ != nullptr && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw StateError("tensor has no gradient buffer");
    return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
    if (!has_grad()) throw StateError("tensor has no gradient buffer");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    require_defined(*this, "detach");
    return make_tensor(impl_->shape, impl_->data);
}

void Tensor::assign(std::span<const double> values) {
    require_defined(*this, "assign");
    if (values.size() != impl_->data.size()) {
        throw DimensionError("assign: expected " + std::to_string(impl_->data.size()) + " values, got " +
                             std::to_string(values.size()));
    }
    std::copy(values.begin(), values.end(), impl_->data.begin());
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

void Tape::record(const Tensor& output, BackwardFn fn) {
    auto& impl = output.impl();
    impl->requires_grad = true;
    impl->is_leaf = false;
    nodes_.push_back(Node{impl, std::move(fn)});
}

bool Tape::contains(const Tensor& t) const {
    return std::any_of(nodes_.begin(), nodes_.end(), [&](const Node& n) { return n.output == t.impl(); });
}

void Tape::backward(const Tensor& loss) {
    require_defined(loss, "backward");
    if (loss.numel() != 1) throw DimensionError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    auto it = std::find_if(nodes_.rbegin(), nodes_.rend(), [&](const Node& n) { return n.output == loss.impl(); });
    if (it == nodes_.rend()) throw StateError("backward: loss was not recorded on this tape");
    const auto last = static_cast<std::size_t>(std::distance(it, nodes_.rend())) - 1;

    for (std::size_t i = 0; i <= last; ++i) {
        auto& g = nodes_[i].output->grad;
        std::fill(g.begin(), g.end(), 0.0);
    }
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] = 1.0;
    for (std::size_t i = last + 1; i-- > 0;) {
        if (!nodes_[i].output->grad.empty()) nodes_[i].backward();
    }
}

void Tape::clear() {
    for (auto& n : nodes_) {
        std::fill(n.output->grad.begin(), n.output->grad.end(), 0.0);
    }
    nodes_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }

NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() noexcept { return g_active_tape; }

AttentionMask AttentionMask::causal(std::size_t n) {
    AttentionMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c <= r; ++c) m.allowed[r * n + c] = 1;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace {

// out[r x c] += a[r x k] * b[k x c]
void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict out, std::size_t r, std::size_t k, std::size_t c) {
    for (std::size_t i = 0; i < r; ++i) {
        double* o = out + i * c;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* bp = b + p * c;
            for (std::size_t j = 0; j < c; ++j) o[j] += aip * bp[j];
        }
    }
}

// out[r x k] += g[r x c] * b[k x c]^T, accumulated in axpy form over a transposed copy of b.
void gemm_nt(const double* __restrict g, const double* __restrict b, double* __restrict out, std::size_t r,
             std::size_t k, std::size_t c) {
    std::vector<double> bt(k * c);
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < c; ++j) bt[j * k + p] = b[p * c + j];
    for (std::size_t i = 0; i < r; ++i) {
        double* __restrict o = out + i * k;
        for (std::size_t j = 0; j < c; ++j) {
            const double gij = g[i * c + j];
            const double* __restrict bj = bt.data() + j * k;
            for (std::size_t p = 0; p < k; ++p) o[p] += gij * bj[p];
        }
    }
}

// out[k x c] += a[r x k]^T * g[r x c]
void gemm_tn(const double* __restrict a, const double* __restrict g, double* __restrict out, std::size_t r, std::size_t k, std::size_t c) {
    for (std::size_t i = 0; i < r; ++i) {
        const double* gi = g + i * c;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            double* o = out + p * c;
            for (std::size_t j = 0; j < c; ++j) o[j] += aip * gi[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    if (a.dim() == 0 || b.dim() == 0) throw DimensionError("matmul: scalar operand");
    const std::size_t r = a.dim() == 2 ? a.shape()[0] : 1;
    const std::size_t k = a.shape().back();
    const std::size_t kb = b.shape()[0];
    const std::size_t c = b.dim() == 2 ? b.shape()[1] : 1;
    if (k != kb) {
        throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Shape out_shape;
    if (a.dim() == 2) out_shape.push_back(r);
    if (b.dim() == 2) out_shape.push_back(c);
    Tensor out = make_tensor(out_shape, std::vector<double>(r * c, 0.0));
    gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), r, k, c);

    if (Tape* tape = recording_tape({&a, &b})) {
        tape->record(out, [ai = a.impl(), bi = b.impl(), o = out.impl().get(), r, k, c] {
            if (auto* ga = sink(ai)) gemm_nt(o->grad.data(), bi->data.data(), ga->data(), r, k, c);
            if (auto* gb = sink(bi)) gemm_tn(ai->data.data(), o->grad.data(), gb->data(), r, k, c);
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> v(r * c);
    const auto d = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) v[j * r + i] = d[i * c + j];
    Tensor out = make_tensor({c, r}, std::move(v));
    if (Tape* tape = recording_tape({&a})) {
        tape->record(out, [ai = a.impl(), o = out.impl().get(), r, c] {
            auto* ga = sink(ai);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += o->grad[j * r + i];
        });
    }
    return out;
}

namespace {

template <typename Fwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* op, Fwd f) {
    require_defined(a, op);
    require_defined(b, op);
    check_same_shape(a, b, op);
    const auto da = a.data(), db = b.data();
    std::vector<double> v(da.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(da[i], db[i]);
    return make_tensor(a.shape(), std::move(v));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = elementwise_binary(a, b, "add", [](double x, double y) { return x + y; });
    if (Tape* tape = recording_tape({&a, &b})) {
        tape->record(out, [ai = a.impl(), bi = b.impl(), o = out.impl().get()] {
            if (auto* g = sink(ai))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o->grad[i];
            if (auto* g = sink(bi))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o->grad[i];
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    Tensor out = elementwise_binary(a, b, "sub", [](double x, double y) { return x - y; });
    if (Tape* tape = recording_tape({&a, &b})) {
        tape->record(out, [ai = a.impl(), bi = b.impl(), o = out.impl().get()] {
            if (auto* g = sink(ai))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o->grad[i];
            if (auto* g = sink(bi))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= o->grad[i];
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Tensor out = elementwise_binary(a, b, "mul", [](double x, double y) { return x * y; });
    if (Tape* tape = recording_tape({&a, &b})) {
        tape->record(out, [ai = a.impl(), bi = b.impl(), o = out.impl().get()] {
            if (auto* g = sink(ai))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o->grad[i] * bi->data[i];
            if (auto* g = sink(bi))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o->grad[i] * ai->data[i];
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double factor) {
    require_defined(a, "scale");
    std::vector<double> v(a.data().begin(), a.data().end());
    for (double& x : v) x *= factor;
    Tensor out = make_tensor(a.shape(), std::move(v));
    if (Tape* tape = recording_tape({&a})) {
        tape->record(out, [ai = a.impl(), o = out.impl().get(), factor] {
            auto* g = sink(ai);
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += factor * o->grad[i];
        });
    }
    return out;
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
    require_defined(a, "add_bias");
    require_defined(bias, "add_bias");
    const std::size_t r = a.rows(), c = a.cols();
    if (a.dim() == 0 || bias.dim() != 1 || bias.numel() != c) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not fit " + shape_str(a.shape()));
    }
    std::vector<double> v(a.data().begin(), a.data().end());
    const auto bd = bias.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) v[i * c + j] += bd[j];
    Tensor out = make_tensor(a.shape(), std::move(v));
    if (Tape* tape = recording_tape({&a, &bias})) {
        tape->record(out, [ai = a.impl(), bi = bias.impl(), o = out.impl().get(), r, c] {
            if (auto* g = sink(ai))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o->grad[i];
            if (auto* g = sink(bi))
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) (*g)[j] += o->grad[i * c + j];
        });
    }
    return out;
}

Tensor sum(const Tensor& a) {
    require_defined(a, "sum");
    double s = 0.0;
    for (double x : a.data()) s += x;
    Tensor out = Tensor::scalar(s);
    if (Tape* tape = recording_tape({&a})) {
        tape->record(out, [ai = a.impl(), o = out.impl().get()] {
            auto* g = sink(ai);
            for (double& x : *g) x += o->grad[0];
        });
    }
    return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor dot(const Tensor& u, const Tensor& v) {
    require_defined(u, "dot");
    require_defined(v, "dot");
    if (u.dim() != 1) throw DimensionError("dot: expected vectors, got " + shape_str(u.shape()));
    check_same_shape(u, v, "dot");
    const auto du = u.data(), dv = v.data();
    double s = 0.0;
    for (std::size_t i = 0; i < du.size(); ++i) s += du[i] * dv[i];
    Tensor out = Tensor::scalar(s);
    if (Tape* tape = recording_tape({&u, &v})) {
        tape->record(out, [ui = u.impl(), vi = v.impl(), o = out.impl().get()] {
            const double g0 = o->grad[0];
            if (auto* g = sink(ui))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += g0 * vi->data[i];
            if (auto* g = sink(vi))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += g0 * ui->data[i];
        });
    }
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    require_defined(a, "reshape");
    if (product(shape) != a.numel()) {
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    Tensor out = make_tensor(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
    if (Tape* tape = recording_tape({&a})) {
        tape->record(out, [ai = a.impl(), o = out.impl().get()] {
            auto* g = sink(ai);
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o->grad[i];
        });
    }
    return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no parts");
    const std::size_t c = parts.front().cols();
    std::size_t r = 0;
    for (const Tensor& p : parts) {
        require_defined(p, "concat_rows");
        if (p.dim() == 0 || p.cols() != c) {
            throw DimensionError("concat_rows: column mismatch at " + shape_str(p.shape()));
        }
        r += p.rows();
    }
    std::vector<double> v;
    v.reserve(r * c);
    for (const Tensor& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
    Tensor out = make_tensor({r, c}, std::move(v));
    if (Tape* tape = recording_tape(parts)) {
        std::vector<ImplPtr> impls;
        impls.reserve(parts.size());
        for (const Tensor& p : parts) impls.push_back(p.impl());
        tape->record(out, [impls = std::move(impls), o = out.impl().get()] {
            std::size_t offset = 0;
            for (const auto& p : impls) {
                const std::size_t n = p->data.size();
                if (auto* g = sink(p))
                    for (std::size_t i = 0; i < n; ++i) (*g)[i] += o->grad[offset + i];
                offset += n;
            }
        });
    }
    return out;
}

Tensor concat_rows(std::initializer_list<Tensor> parts) {
    return concat_rows(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no parts");
    const std::size_t r = parts.front().rows();
    std::size_t c = 0;
    for (const Tensor& p : parts) {
        require_defined(p, "concat_cols");
        require_2d(p, "concat_cols");
        if (p.rows() != r) throw DimensionError("concat_cols: row mismatch at " + shape_str(p.shape()));
        c += p.cols();
    }
    std::vector<double> v(r * c);
    std::size_t col0 = 0;
    for (const Tensor& p : parts) {
        const std::size_t pc = p.cols();
        const auto d = p.data();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j) v[i * c + col0 + j] = d[i * pc + j];
        col0 += pc;
    }
    Tensor out = make_tensor({r, c}, std::move(v));
    if (Tape* tape = recording_tape(parts)) {
        std::vector<ImplPtr> impls;
        for (const Tensor& p : parts) impls.push_back(p.impl());
        tape->record(out, [impls = std::move(impls), o = out.impl().get(), r, c] {
            std::size_t col = 0;
            for (const auto& p : impls) {
                const std::size_t pc = p->shape[1];
                if (auto* g = sink(p))
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < pc; ++j) (*g)[i * pc + j] += o->grad[i * c + col + j];
                col += pc;
            }
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
    require_2d(a, "slice_rows");
    const std::size_t c = a.cols();
    if (count == 0 || begin + count > a.rows()) {
        throw IndexError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") outside " +
                         shape_str(a.shape()));
    }
    const auto d = a.data();
    Tensor out = make_tensor({count, c}, std::vector<double>(d.begin() + begin * c, d.begin() + (begin + count) * c));
    if (Tape* tape = recording_tape({&a})) {
        tape->record(out, [ai = a.impl(), o = out.impl().get(), off = begin * c] {
            auto* g = sink(ai);
            for (std::size_t i = 0; i < o->grad.size(); ++i) (*g)[off + i] += o->grad[i];
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
    require_2d(a, "slice_cols");
    const std::size_t r = a.rows(), c = a.cols();
    if (count == 0 || begin + count > c) {
        throw IndexError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") outside " +
                         shape_str(a.shape()));
    }
    const auto d = a.data();
    std::vector<double> v(r * count);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) v[i * count + j] = d[i * c + begin + j];
    Tensor out = make_tensor({r, count}, std::move(v));
    if (Tape* tape = recording_tape({&a})) {
        tape->record(out, [ai = a.impl(), o = out.impl().get(), r, c, begin, count] {
            auto* g = sink(ai);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < count; ++j) (*g)[i * c + begin + j] += o->grad[i * count + j];
        });
    }
    return out;
}

Tensor row(const Tensor& a, std::size_t i) {
    require_2d(a, "row");
    if (i >= a.rows()) throw IndexError("row: index " + std::to_string(i) + " outside " + shape_str(a.shape()));
    return reshape(slice_rows(a, i, 1), {a.cols()});
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
    require_2d(table, "gather_rows");
    if (indices.empty()) throw DimensionError("gather_rows: no indices");
    const std::size_t c = table.cols();
    const auto d = table.data();
    std::vector<double> v;
    v.reserve(indices.size() * c);
    for (std::size_t idx : indices) {
        if (idx >= table.rows()) {
            throw IndexError("gather_rows: index " + std::to_string(idx) + " outside " + shape_str(table.shape()));
        }
        v.insert(v.end(), d.begin() + idx * c, d.begin() + (idx + 1) * c);
    }
    Tensor out = make_tensor({indices.size(), c}, std::move(v));
    if (Tape* tape = recording_tape({&table})) {
        std::vector<std::size_t> idx(indices.begin(), indices.end());
        tape->record(out, [ti = table.impl(), o = out.impl().get(), idx = std::move(idx), c] {
            auto* g = sink(ti);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < c; ++j) (*g)[idx[r] * c + j] += o->grad[r * c + j];
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_defined(x, "layer_norm");
    const std::size_t r = x.rows(), c = x.cols();
    if (x.dim() == 0 || gamma.numel() != c || beta.numel() != c) {
        throw DimensionError("layer_norm: affine parameters do not fit " + shape_str(x.shape()));
    }
    const auto xd = x.data(), gd = gamma.data(), bd = beta.data();
    std::vector<double> v(r * c), xhat(r * c), inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double* xi = xd.data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xi[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (xi[j] - mu) * inv_std[i];
            v[i * c + j] = xhat[i * c + j] * gd[j] + bd[j];
        }
    }
    Tensor out = make_tensor(x.shape(), std::move(v));
    if (Tape* tape = recording_tape({&x, &gamma, &beta})) {
        tape->record(out, [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), o = out.impl().get(),
                           xhat = std::move(xhat), inv_std = std::move(inv_std), r, c] {
            auto* gx = sink(xi);
            auto* gg = sink(gi);
            auto* gb = sink(bi);
            std::vector<double> dxhat(c);
            for (std::size_t i = 0; i < r; ++i) {
                const double* dy = o->grad.data() + i * c;
                const double* xh = xhat.data() + i * c;
                if (gg)
                    for (std::size_t j = 0; j < c; ++j) (*gg)[j] += dy[j] * xh[j];
                if (gb)
                    for (std::size_t j = 0; j < c; ++j) (*gb)[j] += dy[j];
                if (!gx) continue;
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    dxhat[j] = dy[j] * gi->data[j];
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xh[j];
                }
                m1 /= static_cast<double>(c);
                m2 /= static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += inv_std[i] * (dxhat[j] - m1 - xh[j] * m2);
            }
        });
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    require_defined(x, "gelu");
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double a = 0.044715;
    const auto xd = x.data();
    std::vector<double> v(xd.size()), deriv(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) {
        const double z = xd[i];
        const double t = std::tanh(k * (z + a * z * z * z));
        v[i] = 0.5 * z * (1.0 + t);
        deriv[i] = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * k * (1.0 + 3.0 * a * z * z);
    }
    Tensor out = make_tensor(x.shape(), std::move(v));
    if (Tape* tape = recording_tape({&x})) {
        tape->record(out, [xi = x.impl(), o = out.impl().get(), deriv = std::move(deriv)] {
            auto* g = sink(xi);
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o->grad[i] * deriv[i];
        });
    }
    return out;
}

namespace {

// y = softmax over the allowed entries of each row; backward dx = y (dy - <y, dy>) * factor.
void record_row_softmax(Tape* tape, const Tensor& x, Tensor& out, std::size_t r, std::size_t c, double factor) {
    tape->record(out, [xi = x.impl(), o = out.impl().get(), r, c, factor] {
        auto* g = sink(xi);
        for (std::size_t i = 0; i < r; ++i) {
            const double* y = o->data.data() + i * c;
            const double* dy = o->grad.data() + i * c;
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += y[j] * dy[j];
            for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += factor * y[j] * (dy[j] - s);
        }
    });
}

}  // namespace

Tensor masked_softmax_rows(const Tensor& x, const AttentionMask* mask) {
    require_2d(x, "masked_softmax_rows");
    const std::size_t r = x.rows(), c = x.cols();
    if (mask && (mask->rows != r || mask->cols != c)) {
        throw DimensionError("masked_softmax_rows: mask " + std::to_string(mask->rows) + "x" +
                             std::to_string(mask->cols) + " does not fit " + shape_str(x.shape()));
    }
    const auto xd = x.data();
    std::vector<double> v(r * c, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j)
            if (!mask || (*mask)(i, j)) mx = std::max(mx, xd[i * c + j]);
        if (!std::isfinite(mx)) throw DimensionError("masked_softmax_rows: row with no allowed entry");
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            if (mask && !(*mask)(i, j)) continue;
            v[i * c + j] = std::exp(xd[i * c + j] - mx);
            z += v[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) v[i * c + j] /= z;
    }
    Tensor out = make_tensor(x.shape(), std::move(v));
    if (Tape* tape = recording_tape({&x})) record_row_softmax(tape, x, out, r, c, 1.0);
    return out;
}

Tensor softmax_with_temperature(const Tensor& x, double tau) {
    require_defined(x, "softmax_with_temperature");
    if (!(tau > 0.0)) throw ParameterError("softmax_with_temperature: tau must be positive");
    if (x.dim() != 1) throw DimensionError("softmax_with_temperature: expected a vector, got " + shape_str(x.shape()));
    const auto xd = x.data();
    const double mx = *std::max_element(xd.begin(), xd.end());
    std::vector<double> v(xd.size());
    double z = 0.0;
    for (std::size_t i = 0; i < xd.size(); ++i) {
        v[i] = std::exp((xd[i] - mx) / tau);
        z += v[i];
    }
    for (double& e : v) e /= z;
    Tensor out = make_tensor(x.shape(), std::move(v));
    if (Tape* tape = recording_tape({&x})) record_row_softmax(tape, x, out, 1, xd.size(), 1.0 / tau);
    return out;
}

Tensor l2_normalize(const Tensor& x) {
    require_defined(x, "l2_normalize");
    if (x.dim() == 0) throw DimensionError("l2_normalize: scalar input");
    const std::size_t r = x.rows(), c = x.cols();
    const auto xd = x.data();
    std::vector<double> v(r * c), norms(r);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += xd[i * c + j] * xd[i * c + j];
        norms[i] = std::sqrt(s);
        if (!(norms[i] > kNormEpsilon)) throw DegenerateInputError("l2_normalize: norm below epsilon");
        for (std::size_t j = 0; j < c; ++j) v[i * c + j] = xd[i * c + j] / norms[i];
    }
    Tensor out = make_tensor(x.shape(), std::move(v));
    if (Tape* tape = recording_tape({&x})) {
        tape->record(out, [xi = x.impl(), o = out.impl().get(), norms = std::move(norms), r, c] {
            auto* g = sink(xi);
            for (std::size_t i = 0; i < r; ++i) {
                const double* y = o->data.data() + i * c;
                const double* dy = o->grad.data() + i * c;
                double s = 0.0;
                for (std::size_t j = 0; j < c; ++j) s += y[j] * dy[j];
                for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += (dy[j] - y[j] * s) / norms[i];
            }
        });
    }
    return out;
}

Tensor cosine_loss(const Tensor& u, const Tensor& v) {
    require_defined(u, "cosine_loss");
    require_defined(v, "cosine_loss");
    if (u.dim() != 1) throw DimensionError("cosine_loss: expected vectors, got " + shape_str(u.shape()));
    check_same_shape(u, v, "cosine_loss");
    const auto ud = u.data(), vd = v.data();
    double uv = 0.0, uu = 0.0, vv = 0.0;
    for (std::size_t i = 0; i < ud.size(); ++i) {
        uv += ud[i] * vd[i];
        uu += ud[i] * ud[i];
        vv += vd[i] * vd[i];
    }
    const double nu = std::sqrt(uu), nv = std::sqrt(vv);
    if (!(nu > kNormEpsilon) || !(nv > kNormEpsilon)) throw DegenerateInputError("cosine_loss: norm below epsilon");
    const double cosv = uv / (nu * nv);
    Tensor out = Tensor::scalar(-cosv);
    if (Tape* tape = recording_tape({&u, &v})) {
        tape->record(out, [ui = u.impl(), vi = v.impl(), o = out.impl().get(), nu, nv, cosv] {
            const double g0 = o->grad[0];
            const std::size_t n = ui->data.size();
            if (auto* g = sink(ui))
                for (std::size_t i = 0; i < n; ++i)
                    (*g)[i] -= g0 * (vi->data[i] / (nu * nv) - cosv * ui->data[i] / (nu * nu));
            if (auto* g = sink(vi))
                for (std::size_t i = 0; i < n; ++i)
                    (*g)[i] -= g0 * (ui->data[i] / (nu * nv) - cosv * vi->data[i] / (nv * nv));
        });
    }
    return out;
}

Tensor cross_entropy_loss(const Tensor& logits, std::size_t target) {
    require_defined(logits, "cross_entropy_loss");
    if (logits.dim() != 1) throw DimensionError("cross_entropy_loss: expected a vector of logits");
    const auto ld = logits.data();
    if (target >= ld.size()) {
        throw IndexError("cross_entropy_loss: target " + std::to_string(target) + " outside " +
                         std::to_string(ld.size()) + " classes");
    }
    const double mx = *std::max_element(ld.begin(), ld.end());
    double z = 0.0;
    for (double l : ld) z += std::exp(l - mx);
    const double lse = mx + std::log(z);
    Tensor out = Tensor::scalar(lse - ld[target]);
    if (Tape* tape = recording_tape({&logits})) {
        tape->record(out, [li = logits.impl(), o = out.impl().get(), lse, target] {
            auto* g = sink(li);
            const double g0 = o->grad[0];
            for (std::size_t i = 0; i < g->size(); ++i) {
                const double p = std::exp(li->data[i] - lse);
                (*g)[i] += g0 * (p - (i == target ? 1.0 : 0.0));
            }
        });
    }
    return out;
}

}  // namespace fedprompt
