#include "kmmvae/autodiff.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <mutex>
#include <sstream>

namespace kmmvae::autodiff {

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;
    // Tape bookkeeping for intermediates. Leaves are tracked per tape in
    // a side map so that concurrent tapes never write shared nodes.
    std::uint64_t tape_id = 0;
    std::size_t slot = ~std::size_t(0);
};

} // namespace detail

using detail::Node;

namespace {

constexpr std::size_t kNoSlot = ~std::size_t(0);

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_tape_counter{1};

std::mutex g_registry_mutex;
std::unordered_map<std::uint64_t, Tape*>& registry() {
    static std::unordered_map<std::uint64_t, Tape*> reg;
    return reg;
}

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape.numel() != values.size())
        throw dimension_error("value count " + std::to_string(values.size()) +
                              " does not match shape " + shape.str());
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return n;
}

} // namespace

namespace detail {

struct Access {
    static Tensor tensor(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }
    static std::size_t new_slot(Tape& t) { return t.new_slot(); }
    static std::size_t slot_for_input(Tape& t, Node* n, bool& fresh) {
        return t.slot_for_input(n, fresh);
    }
    static std::vector<double>& adjoint_slot(Tape& t, std::size_t idx, std::size_t size) {
        return t.adjoint_slot(idx, size);
    }
    static const std::vector<double>* peek(const Tape& t, std::size_t idx) {
        return t.peek_adjoint(idx);
    }
    static void add_record(Tape& t, std::size_t out_slot, std::function<void(Tape&)> fn) {
        t.records_.push_back({out_slot, std::move(fn)});
    }
    static std::vector<Tensor>& watched(Tape& t) { return t.watched_; }
};

} // namespace detail

using detail::Access;

// ---- Shape ----

Shape::Shape(std::initializer_list<std::size_t> dims) : rank_(dims.size()) {
    if (dims.size() > 4) throw dimension_error("tensor rank > 4 not supported");
    dims_.fill(1);
    std::size_t i = 0;
    for (std::size_t d : dims) {
        if (d == 0) throw dimension_error("zero extent in shape");
        dims_[i++] = d;
    }
}

std::size_t Shape::numel() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
}

bool Shape::operator==(const Shape& other) const {
    if (rank_ != other.rank_) return false;
    for (std::size_t i = 0; i < rank_; ++i)
        if (dims_[i] != other.dims_[i]) return false;
    return true;
}

std::string Shape::str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < rank_; ++i) os << (i ? "x" : "") << dims_[i];
    os << ']';
    return os.str();
}

void Shape::split(std::size_t axis, std::size_t& outer, std::size_t& mid, std::size_t& inner) const {
    if (axis >= rank_)
        throw dimension_error("axis " + std::to_string(axis) + " out of range for " + str());
    outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= dims_[i];
    mid = dims_[axis];
    inner = 1;
    for (std::size_t i = axis + 1; i < rank_; ++i) inner *= dims_[i];
}

// ---- Tensor ----

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
    return Tensor(make_node(shape, std::move(values), false));
}

Tensor Tensor::constant(std::vector<double> values) {
    Shape s{values.size()};
    return Tensor(make_node(s, std::move(values), false));
}

Tensor Tensor::scalar(double v) { return Tensor(make_node(Shape{}, {v}, false)); }

Tensor Tensor::zeros(Shape shape) {
    return Tensor(make_node(shape, std::vector<double>(shape.numel(), 0.0), false));
}

Tensor Tensor::ones(Shape shape) {
    return Tensor(make_node(shape, std::vector<double>(shape.numel(), 1.0), false));
}

Tensor Tensor::variable(Shape shape, std::vector<double> values) {
    return Tensor(make_node(shape, std::move(values), true));
}

const Shape& Tensor::shape() const {
    if (!node_) throw contract_error("use of empty tensor");
    return node_->shape;
}

std::span<const double> Tensor::values() const {
    if (!node_) throw contract_error("use of empty tensor");
    return node_->values;
}

double Tensor::item() const {
    if (size() != 1) throw contract_error("item() on tensor of size " + std::to_string(size()));
    return node_->values[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::span<const double> Tensor::grad() const {
    if (!node_) throw contract_error("use of empty tensor");
    return node_->grad;
}

void Tensor::zero_grad() const {
    if (!node_) throw contract_error("use of empty tensor");
    node_->grad.assign(node_->values.size(), 0.0);
}

void Tensor::set_values(std::span<const double> v) const {
    if (!node_) throw contract_error("use of empty tensor");
    if (v.size() != node_->values.size()) throw dimension_error("set_values size mismatch");
    std::memcpy(node_->values.data(), v.data(), v.size() * sizeof(double));
}

// ---- Tape ----

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {
    std::lock_guard lock(g_registry_mutex);
    registry().emplace(id_, this);
}

Tape::~Tape() {
    std::lock_guard lock(g_registry_mutex);
    registry().erase(id_);
}

std::size_t Tape::new_slot() {
    std::size_t idx = slot_set_.size();
    slot_set_.push_back(false);
    if (idx >= slots_.size()) slots_.emplace_back();
    return idx;
}

std::size_t Tape::slot_for_input(Node* n, bool& fresh_leaf) {
    fresh_leaf = false;
    if (n->tape_id == id_) return n->slot;
    auto it = leaf_slots_.find(n);
    if (it != leaf_slots_.end()) return it->second;
    std::size_t slot = new_slot();
    leaf_slots_.emplace(n, slot);
    fresh_leaf = true;
    return slot;
}

std::vector<double>& Tape::adjoint_slot(std::size_t idx, std::size_t size) {
    auto& buf = slots_[idx];
    if (!slot_set_[idx]) {
        buf.assign(size, 0.0);
        slot_set_[idx] = true;
    }
    return buf;
}

const std::vector<double>* Tape::peek_adjoint(std::size_t idx) const {
    if (idx == kNoSlot || idx >= slot_set_.size() || !slot_set_[idx]) return nullptr;
    return &slots_[idx];
}

void Tape::run_backward(const Tensor& loss) {
    if (consumed_) throw contract_error("backward already run on this tape");
    if (!loss.defined() || loss.size() != 1)
        throw contract_error("backward requires a single-element loss");
    const Node* n = loss.node();
    std::size_t loss_slot = kNoSlot;
    if (n->tape_id == id_) {
        loss_slot = n->slot;
    } else {
        auto it = leaf_slots_.find(n);
        if (it != leaf_slots_.end()) loss_slot = it->second;
    }
    if (loss_slot == kNoSlot) throw contract_error("loss is not connected to this tape");

    adjoint_slot(loss_slot, 1)[0] = 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        if (it->out_slot != kNoSlot && slot_set_[it->out_slot]) it->backward(*this);
    }
    consumed_ = true;
}

std::span<const double> Tape::adjoint(const Tensor& t) const {
    const Node* n = t.node();
    if (n == nullptr) return {};
    std::size_t slot = kNoSlot;
    if (n->tape_id == id_) {
        slot = n->slot;
    } else {
        auto it = leaf_slots_.find(n);
        if (it != leaf_slots_.end()) slot = it->second;
    }
    const std::vector<double>* buf = peek_adjoint(slot);
    if (buf == nullptr) return {};
    return *buf;
}

void Tape::reset() {
    records_.clear();
    slot_set_.clear();
    leaf_slots_.clear();
    watched_.clear();
    consumed_ = false;
    // Fresh generation: intermediates of the previous graph must not be
    // mistaken for live recordings if they leak into the next one.
    std::uint64_t new_id = g_tape_counter.fetch_add(1);
    {
        std::lock_guard lock(g_registry_mutex);
        registry().erase(id_);
        registry().emplace(new_id, this);
    }
    id_ = new_id;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
    if (!loss.defined()) throw contract_error("use of empty tensor");
    std::uint64_t tid = loss.node()->tape_id;
    Tape* tape = nullptr;
    {
        std::lock_guard lock(g_registry_mutex);
        auto it = registry().find(tid);
        if (it != registry().end()) tape = it->second;
    }
    if (tape == nullptr) throw contract_error("loss is not connected to a live tape");
    tape->run_backward(loss);
    for (const Tensor& leaf : tape->watched()) {
        std::span<const double> adj = tape->adjoint(leaf);
        if (adj.empty()) continue;
        Node* n = leaf.node();
        if (n->grad.size() != n->values.size()) n->grad.assign(n->values.size(), 0.0);
        for (std::size_t i = 0; i < adj.size(); ++i) n->grad[i] += adj[i];
    }
}

// ---- op recording helper ----

namespace {

/// Per-op view of the active tape: input slots, output slot, record hook.
class Recorder {
public:
    explicit Recorder(std::initializer_list<const Tensor*> inputs) {
        Tape* t = g_active_tape;
        std::size_t count = 0;
        for (const Tensor* in : inputs) {
            if (!in->defined()) throw contract_error("use of empty tensor");
            slots_[count++] = kNoSlot;
        }
        n_inputs_ = count;
        if (t == nullptr) return;
        bool any = false;
        for (const Tensor* in : inputs) {
            Node* n = in->node();
            if (n->tape_id == t->id() || n->requires_grad) any = true;
        }
        if (!any) return;
        tape_ = t;
        std::size_t i = 0;
        for (const Tensor* in : inputs) {
            Node* n = in->node();
            if (n->tape_id == t->id()) {
                slots_[i] = n->slot;
            } else if (n->requires_grad) {
                bool fresh = false;
                slots_[i] = Access::slot_for_input(*t, n, fresh);
                if (fresh) Access::watched(*t).push_back(*in);
            }
            ++i;
        }
    }

    bool recording() const { return tape_ != nullptr; }
    std::size_t slot(std::size_t i) const { return slots_[i]; }

    Tensor output(Shape shape, std::vector<double> values) {
        auto n = make_node(std::move(shape), std::move(values), false);
        if (tape_ != nullptr) {
            out_slot_ = Access::new_slot(*tape_);
            n->tape_id = tape_->id();
            n->slot = out_slot_;
        }
        return Access::tensor(std::move(n));
    }

    void record(std::function<void(Tape&)> fn) {
        if (tape_ != nullptr) Access::add_record(*tape_, out_slot_, std::move(fn));
    }

private:
    Tape* tape_ = nullptr;
    std::array<std::size_t, 4> slots_{kNoSlot, kNoSlot, kNoSlot, kNoSlot};
    std::size_t n_inputs_ = 0;
    std::size_t out_slot_ = kNoSlot;
};

std::vector<double>* grad_buf(Tape& t, std::size_t slot, std::size_t n) {
    return slot == kNoSlot ? nullptr : &Access::adjoint_slot(t, slot, n);
}

const std::vector<double>& out_adj(Tape& t, std::size_t slot) {
    return *Access::peek(t, slot);
}

} // namespace

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.rank() != 2 || (sb.rank() != 2 && sb.rank() != 1))
        throw dimension_error("matmul expects [m x n] by [n x p] or [n], got " + sa.str() + " by " + sb.str());
    const std::size_t m = sa[0], n = sa[1];
    const bool vec = sb.rank() == 1;
    const std::size_t p = vec ? 1 : sb[1];
    if (sb[0] != n)
        throw dimension_error("matmul inner extents differ: " + sa.str() + " by " + sb.str());

    Recorder rec({&a, &b});
    std::vector<double> out(m * p, 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
            const double aik = av[i * n + k];
            const double* brow = bv + k * p;
            double* orow = out.data() + i * p;
            for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
        }
    }
    Tensor y = rec.output(vec ? Shape{m} : Shape{m, p}, std::move(out));
    if (rec.recording()) {
        std::size_t sa_slot = rec.slot(0), sb_slot = rec.slot(1);
        std::size_t out_slot = y.node()->slot;
        Tensor ah = a, bh = b; // keep nodes alive
        rec.record([=](Tape& t) {
            const std::vector<double>& g = out_adj(t, out_slot);
            const double* av2 = ah.values().data();
            const double* bv2 = bh.values().data();
            if (auto* ga = grad_buf(t, sa_slot, m * n)) {
                // gA = g . B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t k = 0; k < n; ++k) {
                        double acc = 0.0;
                        const double* grow = g.data() + i * p;
                        const double* brow = bv2 + k * p;
                        for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
                        (*ga)[i * n + k] += acc;
                    }
            }
            if (auto* gb = grad_buf(t, sb_slot, n * p)) {
                // gB = A^T . g
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g.data() + i * p;
                    for (std::size_t k = 0; k < n; ++k) {
                        const double aik = av2[i * n + k];
                        double* gbrow = gb->data() + k * p;
                        for (std::size_t j = 0; j < p; ++j) gbrow[j] += aik * grow[j];
                    }
                }
            }
        });
    }
    return y;
}

// ---- conv1d ----

Tensor conv1d(const Tensor& x, const Tensor& kernels, const Tensor& bias) {
    const Shape& sx = x.shape();
    const Shape& sk = kernels.shape();
    const Shape& sb = bias.shape();
    if (sx.rank() != 2 || sk.rank() != 3 || sb.rank() != 1)
        throw dimension_error("conv1d expects x[c_in x R], kernels[c_out x c_in x w], bias[c_out]");
    const std::size_t c_in = sx[0], len = sx[1];
    const std::size_t c_out = sk[0], w = sk[2];
    if (sk[1] != c_in) throw dimension_error("conv1d channel mismatch: x " + sx.str() + ", kernels " + sk.str());
    if (sb[0] != c_out) throw dimension_error("conv1d bias extent mismatch");
    if (w % 2 == 0) throw config_error("conv1d kernel width must be odd, got " + std::to_string(w));
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(w / 2);
    const std::ptrdiff_t R = static_cast<std::ptrdiff_t>(len);

    Recorder rec({&x, &kernels, &bias});
    std::vector<double> out(c_out * len);
    const double* xv = x.values().data();
    const double* kv = kernels.values().data();
    const double* bv = bias.values().data();
    for (std::size_t o = 0; o < c_out; ++o) {
        double* orow = out.data() + o * len;
        for (std::ptrdiff_t r = 0; r < R; ++r) orow[r] = bv[o];
        for (std::size_t ci = 0; ci < c_in; ++ci) {
            const double* xrow = xv + ci * len;
            const double* krow = kv + (o * c_in + ci) * w;
            for (std::size_t t = 0; t < w; ++t) {
                const double kw = krow[t];
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(t) - pad;
                const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -off);
                const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(R, R - off);
                for (std::ptrdiff_t r = lo; r < hi; ++r) orow[r] += kw * xrow[r + off];
            }
        }
    }
    Tensor y = rec.output(Shape{c_out, len}, std::move(out));
    if (rec.recording()) {
        std::size_t sx_slot = rec.slot(0), sk_slot = rec.slot(1), sb_slot = rec.slot(2);
        std::size_t out_slot = y.node()->slot;
        Tensor xh = x, kh = kernels;
        rec.record([=](Tape& t) {
            const std::vector<double>& g = out_adj(t, out_slot);
            const double* xv2 = xh.values().data();
            const double* kv2 = kh.values().data();
            if (auto* gb = grad_buf(t, sb_slot, c_out)) {
                for (std::size_t o = 0; o < c_out; ++o) {
                    double acc = 0.0;
                    const double* grow = g.data() + o * len;
                    for (std::size_t r = 0; r < len; ++r) acc += grow[r];
                    (*gb)[o] += acc;
                }
            }
            if (auto* gk = grad_buf(t, sk_slot, c_out * c_in * w)) {
                for (std::size_t o = 0; o < c_out; ++o) {
                    const double* grow = g.data() + o * len;
                    for (std::size_t ci = 0; ci < c_in; ++ci) {
                        const double* xrow = xv2 + ci * len;
                        double* gkrow = gk->data() + (o * c_in + ci) * w;
                        for (std::size_t tt = 0; tt < w; ++tt) {
                            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(tt) - pad;
                            const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -off);
                            const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(R, R - off);
                            double acc = 0.0;
                            for (std::ptrdiff_t r = lo; r < hi; ++r) acc += grow[r] * xrow[r + off];
                            gkrow[tt] += acc;
                        }
                    }
                }
            }
            if (auto* gx = grad_buf(t, sx_slot, c_in * len)) {
                for (std::size_t o = 0; o < c_out; ++o) {
                    const double* grow = g.data() + o * len;
                    for (std::size_t ci = 0; ci < c_in; ++ci) {
                        double* gxrow = gx->data() + ci * len;
                        const double* krow = kv2 + (o * c_in + ci) * w;
                        for (std::size_t tt = 0; tt < w; ++tt) {
                            const double kw = krow[tt];
                            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(tt) - pad;
                            const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -off);
                            const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(R, R - off);
                            for (std::ptrdiff_t r = lo; r < hi; ++r) gxrow[r + off] += kw * grow[r];
                        }
                    }
                }
            }
        });
    }
    return y;
}

// ---- binary elementwise ----

namespace {

enum class Bin { add, sub, mul, div };

Tensor binary_op(Bin op, const Tensor& a, const Tensor& b) {
    const bool a_scalar = a.size() == 1;
    const bool b_scalar = b.size() == 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape())
        throw dimension_error("elementwise shapes differ: " + a.shape().str() + " vs " + b.shape().str());
    const Shape out_shape = a_scalar ? b.shape() : a.shape();
    const std::size_t n = out_shape.numel();

    Recorder rec({&a, &b});
    const double* av = a.values().data();
    const double* bv = b.values().data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[a_scalar ? 0 : i];
        const double y = bv[b_scalar ? 0 : i];
        switch (op) {
            case Bin::add: out[i] = x + y; break;
            case Bin::sub: out[i] = x - y; break;
            case Bin::mul: out[i] = x * y; break;
            case Bin::div: out[i] = x / y; break;
        }
    }
    Tensor y = rec.output(out_shape, std::move(out));
    if (rec.recording()) {
        std::size_t sa = rec.slot(0), sb = rec.slot(1);
        std::size_t out_slot = y.node()->slot;
        std::size_t na = a.size(), nb = b.size();
        Tensor ah = a, bh = b;
        rec.record([=](Tape& t) {
            const std::vector<double>& g = out_adj(t, out_slot);
            const double* av2 = ah.values().data();
            const double* bv2 = bh.values().data();
            auto* ga = grad_buf(t, sa, na);
            auto* gb = grad_buf(t, sb, nb);
            for (std::size_t i = 0; i < n; ++i) {
                const double gi = g[i];
                const double x = av2[a_scalar ? 0 : i];
                const double yv = bv2[b_scalar ? 0 : i];
                double da = 0.0, db = 0.0;
                switch (op) {
                    case Bin::add: da = gi; db = gi; break;
                    case Bin::sub: da = gi; db = -gi; break;
                    case Bin::mul: da = gi * yv; db = gi * x; break;
                    case Bin::div: da = gi / yv; db = -gi * x / (yv * yv); break;
                }
                if (ga) (*ga)[a_scalar ? 0 : i] += da;
                if (gb) (*gb)[b_scalar ? 0 : i] += db;
            }
        });
    }
    return y;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(Bin::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(Bin::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(Bin::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(Bin::div, a, b); }

// ---- unary elementwise ----

namespace {

enum class Un { exp, log, tanh, relu, negate, square };

Tensor unary_op(Un op, const Tensor& x) {
    const std::size_t n = x.size();
    if (op == Un::log) {
        for (double v : x.values())
            if (!(v > 0.0)) throw numeric_error("log of non-positive value " + std::to_string(v));
    }
    Recorder rec({&x});
    const double* xv = x.values().data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = xv[i];
        switch (op) {
            case Un::exp: out[i] = std::exp(v); break;
            case Un::log: out[i] = std::log(v); break;
            case Un::tanh: out[i] = std::tanh(v); break;
            case Un::relu: out[i] = v > 0.0 ? v : 0.0; break;
            case Un::negate: out[i] = -v; break;
            case Un::square: out[i] = v * v; break;
        }
    }
    Tensor y = rec.output(x.shape(), std::move(out));
    if (rec.recording()) {
        std::size_t sx = rec.slot(0);
        std::size_t out_slot = y.node()->slot;
        Tensor xh = x, yh = y;
        rec.record([=](Tape& t) {
            const std::vector<double>& g = out_adj(t, out_slot);
            auto* gx = grad_buf(t, sx, n);
            if (!gx) return;
            const double* xv2 = xh.values().data();
            const double* yv2 = yh.values().data();
            for (std::size_t i = 0; i < n; ++i) {
                double d = 0.0;
                switch (op) {
                    case Un::exp: d = yv2[i]; break;
                    case Un::log: d = 1.0 / xv2[i]; break;
                    case Un::tanh: d = 1.0 - yv2[i] * yv2[i]; break;
                    case Un::relu: d = xv2[i] > 0.0 ? 1.0 : 0.0; break;
                    case Un::negate: d = -1.0; break;
                    case Un::square: d = 2.0 * xv2[i]; break;
                }
                (*gx)[i] += g[i] * d;
            }
        });
    }
    return y;
}

} // namespace

Tensor exp(const Tensor& x) { return unary_op(Un::exp, x); }
Tensor log(const Tensor& x) { return unary_op(Un::log, x); }
Tensor tanh(const Tensor& x) { return unary_op(Un::tanh, x); }
Tensor relu(const Tensor& x) { return unary_op(Un::relu, x); }
Tensor negate(const Tensor& x) { return unary_op(Un::negate, x); }
Tensor square(const Tensor& x) { return unary_op(Un::square, x); }

// ---- reductions ----

namespace {

Tensor reduce_all(const Tensor& x, bool take_mean) {
    const std::size_t n = x.size();
    Recorder rec({&x});
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    if (take_mean) acc /= static_cast<double>(n);
    Tensor y = rec.output(Shape{}, {acc});
    if (rec.recording()) {
        std::size_t sx = rec.slot(0);
        std::size_t out_slot = y.node()->slot;
        const double scale = take_mean ? 1.0 / static_cast<double>(n) : 1.0;
        rec.record([=](Tape& t) {
            const double g = out_adj(t, out_slot)[0] * scale;
            if (auto* gx = grad_buf(t, sx, n))
                for (std::size_t i = 0; i < n; ++i) (*gx)[i] += g;
        });
    }
    return y;
}

Tensor reduce_axis(const Tensor& x, std::size_t axis, bool take_mean) {
    const Shape& s = x.shape();
    std::size_t outer, mid, inner;
    s.split(axis, outer, mid, inner);
    // output shape = input with the axis removed
    std::vector<std::size_t> dims;
    for (std::size_t i = 0; i < s.rank(); ++i)
        if (i != axis) dims.push_back(s[i]);
    Shape out_shape;
    switch (dims.size()) {
        case 0: out_shape = Shape{}; break;
        case 1: out_shape = Shape{dims[0]}; break;
        case 2: out_shape = Shape{dims[0], dims[1]}; break;
        default: out_shape = Shape{dims[0], dims[1], dims[2]}; break;
    }

    Recorder rec({&x});
    const double* xv = x.values().data();
    std::vector<double> out(outer * inner, 0.0);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m) {
            const double* src = xv + (o * mid + m) * inner;
            double* dst = out.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    if (take_mean)
        for (double& v : out) v /= static_cast<double>(mid);
    Tensor y = rec.output(out_shape, std::move(out));
    if (rec.recording()) {
        std::size_t sx = rec.slot(0);
        std::size_t out_slot = y.node()->slot;
        const double scale = take_mean ? 1.0 / static_cast<double>(mid) : 1.0;
        const std::size_t total = x.size();
        rec.record([=](Tape& t) {
            const std::vector<double>& g = out_adj(t, out_slot);
            if (auto* gx = grad_buf(t, sx, total)) {
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t m = 0; m < mid; ++m) {
                        double* dst = gx->data() + (o * mid + m) * inner;
                        const double* src = g.data() + o * inner;
                        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * scale;
                    }
            }
        });
    }
    return y;
}

} // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, false); }
Tensor sum(const Tensor& x, std::size_t axis) { return reduce_axis(x, axis, false); }
Tensor mean(const Tensor& x) { return reduce_all(x, true); }
Tensor mean(const Tensor& x, std::size_t axis) { return reduce_axis(x, axis, true); }

// ---- concat / slice / reshape ----

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw dimension_error("concat of zero tensors");
    const Shape& first = parts[0].shape();
    std::size_t axis_total = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        if (s.rank() != first.rank()) throw dimension_error("concat rank mismatch");
        if (axis >= s.rank()) throw dimension_error("concat axis out of range");
        for (std::size_t i = 0; i < s.rank(); ++i)
            if (i != axis && s[i] != first[i])
                throw dimension_error("concat non-axis extents differ: " + first.str() + " vs " + s.str());
        axis_total += s[axis];
    }
    std::vector<std::size_t> dims;
    for (std::size_t i = 0; i < first.rank(); ++i) dims.push_back(i == axis ? axis_total : first[i]);
    Shape out_shape;
    switch (dims.size()) {
        case 1: out_shape = Shape{dims[0]}; break;
        case 2: out_shape = Shape{dims[0], dims[1]}; break;
        case 3: out_shape = Shape{dims[0], dims[1], dims[2]}; break;
        default: out_shape = Shape{dims[0], dims[1], dims[2], dims[3]}; break;
    }

    // Recorder takes a fixed small list; handle arbitrary arity manually.
    Tape* t = g_active_tape;
    bool rec_any = false;
    std::vector<std::size_t> in_slots(parts.size(), kNoSlot);
    if (t != nullptr) {
        for (const Tensor& p : parts) {
            Node* n = p.node();
            if (n->tape_id == t->id() || n->requires_grad) {
                rec_any = true;
                break;
            }
        }
        if (rec_any) {
            for (std::size_t i = 0; i < parts.size(); ++i) {
                Node* n = parts[i].node();
                if (n->tape_id == t->id()) {
                    in_slots[i] = n->slot;
                } else if (n->requires_grad) {
                    bool fresh = false;
                    in_slots[i] = Access::slot_for_input(*t, n, fresh);
                    if (fresh) Access::watched(*t).push_back(parts[i]);
                }
            }
        }
    }

    std::size_t outer, mid, inner;
    out_shape.split(axis, outer, mid, inner);
    (void)mid;
    std::vector<double> out(out_shape.numel());
    std::size_t axis_off = 0;
    for (const Tensor& p : parts) {
        const std::size_t pm = p.shape()[axis];
        const double* pv = p.values().data();
        for (std::size_t o = 0; o < outer; ++o) {
            double* dst = out.data() + (o * axis_total + axis_off) * inner;
            const double* src = pv + o * pm * inner;
            std::memcpy(dst, src, pm * inner * sizeof(double));
        }
        axis_off += pm;
    }

    auto n = make_node(out_shape, std::move(out), false);
    std::size_t out_slot = kNoSlot;
    if (rec_any) {
        out_slot = Access::new_slot(*t);
        n->tape_id = t->id();
        n->slot = out_slot;
        std::vector<std::size_t> sizes, extents;
        for (const Tensor& p : parts) {
            sizes.push_back(p.size());
            extents.push_back(p.shape()[axis]);
        }
        Access::add_record(*t, out_slot, [=](Tape& tp) {
            const std::vector<double>& g = out_adj(tp, out_slot);
            std::size_t off = 0;
            for (std::size_t pi = 0; pi < in_slots.size(); ++pi) {
                const std::size_t pm = extents[pi];
                if (auto* gp = grad_buf(tp, in_slots[pi], sizes[pi])) {
                    for (std::size_t o = 0; o < outer; ++o) {
                        const double* src = g.data() + (o * axis_total + off) * inner;
                        double* dst = gp->data() + o * pm * inner;
                        for (std::size_t i2 = 0; i2 < pm * inner; ++i2) dst[i2] += src[i2];
                    }
                }
                off += pm;
            }
        });
    }
    return Access::tensor(std::move(n));
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
    std::vector<Tensor> v(parts);
    return concat(std::span<const Tensor>(v), axis);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = x.shape();
    if (axis >= s.rank()) throw dimension_error("slice axis out of range for " + s.str());
    if (begin >= end || end > s[axis])
        throw dimension_error("slice range [" + std::to_string(begin) + ", " + std::to_string(end) +
                              ") invalid for extent " + std::to_string(s[axis]));
    std::size_t outer, mid, inner;
    s.split(axis, outer, mid, inner);
    const std::size_t sm = end - begin;
    std::vector<std::size_t> dims;
    for (std::size_t i = 0; i < s.rank(); ++i) dims.push_back(i == axis ? sm : s[i]);
    Shape out_shape;
    switch (dims.size()) {
        case 1: out_shape = Shape{dims[0]}; break;
        case 2: out_shape = Shape{dims[0], dims[1]}; break;
        case 3: out_shape = Shape{dims[0], dims[1], dims[2]}; break;
        default: out_shape = Shape{dims[0], dims[1], dims[2], dims[3]}; break;
    }

    Recorder rec({&x});
    const double* xv = x.values().data();
    std::vector<double> out(out_shape.numel());
    for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * sm * inner, xv + (o * mid + begin) * inner,
                    sm * inner * sizeof(double));
    Tensor y = rec.output(out_shape, std::move(out));
    if (rec.recording()) {
        std::size_t sx = rec.slot(0);
        std::size_t out_slot = y.node()->slot;
        const std::size_t total = x.size();
        rec.record([=](Tape& t) {
            const std::vector<double>& g = out_adj(t, out_slot);
            if (auto* gx = grad_buf(t, sx, total)) {
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* src = g.data() + o * sm * inner;
                    double* dst = gx->data() + (o * mid + begin) * inner;
                    for (std::size_t i = 0; i < sm * inner; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape.numel() != x.size())
        throw dimension_error("reshape element count mismatch: " + x.shape().str() + " -> " + shape.str());
    Recorder rec({&x});
    std::vector<double> out(x.values().begin(), x.values().end());
    Tensor y = rec.output(shape, std::move(out));
    if (rec.recording()) {
        std::size_t sx = rec.slot(0);
        std::size_t out_slot = y.node()->slot;
        const std::size_t n = x.size();
        rec.record([=](Tape& t) {
            const std::vector<double>& g = out_adj(t, out_slot);
            if (auto* gx = grad_buf(t, sx, n))
                for (std::size_t i = 0; i < n; ++i) (*gx)[i] += g[i];
        });
    }
    return y;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (!(lo < hi)) throw config_error("clamp requires lo < hi");
    // max(x, lo) = relu(x - lo) + lo;  min(v, hi) = hi - relu(hi - v)
    Tensor floored = add_scalar(relu(add_scalar(x, -lo)), lo);
    return sub(Tensor::scalar(hi), relu(sub(Tensor::scalar(hi), floored)));
}

} // namespace kmmvae::autodiff
