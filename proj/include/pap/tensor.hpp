#pragma once

// Minimal reverse-mode differentiable tensor engine.
//
// A Tensor is a shared handle: copies alias the same storage, like most
// array libraries. Differentiable ops record themselves on the thread's
// active Tape (see TapeScope) when at least one input needs a gradient.
// Without an active tape every op is a plain forward computation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace pap {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
class Tape;

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  std::vector<T> adj;  // backward scratch, empty outside a sweep
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t tape_id = 0;  // id of the tape that produced this node
};

template <class T>
std::span<T> adjoint(Node<T>* n) {
  if (n->adj.empty()) n->adj.assign(n->data.size(), T(0));
  return n->adj;
}

inline std::uint64_t next_tape_id() {
  static thread_local std::uint64_t counter = 0;
  return ++counter;
}

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() : Tensor(Shape{}, T(0)) {}

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<detail::Node<T>>()) {
    node_->data.assign(numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::Node<T>>()) {
    if (values.size() != numel(shape))
      throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " +
                       to_string(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, v); }

  template <class Rng>
  static Tensor uniform(Shape shape, T lo, T hi, Rng& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& v : t.node_->data) v = static_cast<T>(dist(rng));
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    if (!node_->leaf) throw TapeError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  Tensor grad_tensor() const {
    if (!has_grad()) return Tensor(shape());
    return Tensor(shape(), node_->grad);
  }
  void zero_grad() { node_->grad.clear(); }

  bool is_leaf() const { return node_->leaf; }

  // Values copied into a fresh leaf with no gradient history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  bool all_finite() const {
    return std::all_of(node_->data.begin(), node_->data.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out));
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Ordered record of executed differentiable operations. Confined to one
// thread; install with TapeScope.
template <class T>
class Tape {
 public:
  using NodePtr = typename Tensor<T>::NodePtr;

  Tape() : id_(detail::next_tape_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return records_.size(); }

  static Tape*& active() {
    static thread_local Tape* current = nullptr;
    return current;
  }

  bool tracks(const Tensor<T>& t) const { return t.node()->tape_id == id_; }
  bool needs_grad(const Tensor<T>& t) const { return t.requires_grad() || tracks(t); }

  void record(std::vector<NodePtr> inputs, const NodePtr& output, std::function<void()> backward) {
    output->leaf = false;
    output->tape_id = id_;
    records_.push_back(Record{std::move(inputs), output, std::move(backward)});
  }

  // Populates grad on every requires_grad leaf reachable from loss, then
  // discards the recorded operations.
  void backward(const Tensor<T>& loss) {
    check_root(loss);
    sweep(loss);
    for (auto& r : records_) {
      for (auto& in : r.inputs) {
        if (in->leaf && in->requires_grad && !in->adj.empty()) {
          if (in->grad.empty()) in->grad.assign(in->data.size(), T(0));
          for (std::size_t i = 0; i < in->adj.size(); ++i) in->grad[i] += in->adj[i];
          in->adj.clear();
        }
      }
    }
    clear();
  }

  // d(output)/d(wrt) without consuming the tape. output must be scalar.
  std::vector<T> gradient(const Tensor<T>& output, const Tensor<T>& wrt) {
    check_root(output);
    sweep(output);
    std::vector<T> g = wrt.node()->adj;
    if (g.empty()) g.assign(wrt.size(), T(0));
    clear_adjoints();
    return g;
  }

  void clear() {
    clear_adjoints();
    records_.clear();
    id_ = detail::next_tape_id();
  }

 private:
  struct Record {
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void()> backward;
  };

  void check_root(const Tensor<T>& loss) const {
    if (loss.size() != 1) throw TapeError("backward requires a scalar, got shape " + to_string(loss.shape()));
    if (!tracks(loss)) throw TapeError("backward on a tensor not produced under this tape");
    if (!std::isfinite(loss.item())) throw NumericError("non-finite loss in backward");
  }

  void sweep(const Tensor<T>& root) {
    clear_adjoints();
    root.node()->adj.assign(1, T(1));
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (!it->output->adj.empty()) it->backward();
    }
  }

  void clear_adjoints() {
    for (auto& r : records_) {
      r.output->adj.clear();
      for (auto& in : r.inputs) in->adj.clear();
    }
  }

  std::vector<Record> records_;
  std::uint64_t id_;
};

// Installs a fresh tape as the thread's active tape for the scope lifetime.
template <class T>
class TapeScope {
 public:
  TapeScope() : prev_(Tape<T>::active()) { Tape<T>::active() = &tape_; }
  ~TapeScope() { Tape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape<T>& tape() { return tape_; }

 private:
  Tape<T> tape_;
  Tape<T>* prev_;
};

template <class T>
void backward(const Tensor<T>& loss) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr) throw TapeError("backward called with no active tape");
  tape->backward(loss);
}

namespace detail {

// Records op on the active tape when any input needs a gradient. Returns
// the tape (or nullptr) so ops can skip saving state for backward.
template <class T>
Tape<T>* recording(std::initializer_list<const Tensor<T>*> inputs) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr) return nullptr;
  for (const auto* in : inputs)
    if (tape->needs_grad(*in)) return tape;
  return nullptr;
}

template <class T>
bool wants(const Tape<T>* tape, const Tensor<T>& t) {
  return tape != nullptr && tape->needs_grad(t);
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

template <class T>
void require_rank4(const Tensor<T>& x, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected NCHW tensor, got " + to_string(x.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryOp { add, sub, mul };

template <class T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "elementwise");
  Tensor<T> out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto z = out.data();
  const std::size_t n = z.size();
  switch (op) {
    case BinaryOp::add: for (std::size_t i = 0; i < n; ++i) z[i] = x[i] + y[i]; break;
    case BinaryOp::sub: for (std::size_t i = 0; i < n; ++i) z[i] = x[i] - y[i]; break;
    case BinaryOp::mul: for (std::size_t i = 0; i < n; ++i) z[i] = x[i] * y[i]; break;
  }
  if (auto* tape = detail::recording<T>({&a, &b})) {
    auto* an = a.node().get();
    auto* bn = b.node().get();
    auto* on = out.node().get();
    const bool ga = tape->needs_grad(a);
    const bool gb = tape->needs_grad(b);
    tape->record({a.node(), b.node()}, out.node(), [=] {
      const auto& g = on->adj;
      if (ga) {
        auto da = detail::adjoint(an);
        for (std::size_t i = 0; i < g.size(); ++i)
          da[i] += op == BinaryOp::mul ? g[i] * bn->data[i] : g[i];
      }
      if (gb) {
        auto db = detail::adjoint(bn);
        for (std::size_t i = 0; i < g.size(); ++i)
          db[i] += op == BinaryOp::mul ? g[i] * an->data[i] : (op == BinaryOp::sub ? -g[i] : g[i]);
      }
    });
  }
  return out;
}

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::add, a, b); }
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::sub, a, b); }
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::mul, a, b); }

// y = s * x + c, the only tensor-scalar broadcast.
template <class T>
Tensor<T> affine(const Tensor<T>& x, T s, T c = T(0)) {
  Tensor<T> out(x.shape());
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = s * xs[i] + c;
  if (auto* tape = detail::recording<T>({&x})) {
    auto* xn = x.node().get();
    auto* on = out.node().get();
    tape->record({x.node()}, out.node(), [=] {
      auto dx = detail::adjoint(xn);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s * on->adj[i];
    });
  }
  return out;
}

template <class T> Tensor<T> scale(const Tensor<T>& x, T s) { return affine(x, s, T(0)); }

// ---------------------------------------------------------------------------
// Activations

enum class Activation { relu, sigmoid };

template <class T>
Tensor<T> activation(Activation op, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xs = x.data();
  auto ys = out.data();
  if (op == Activation::relu) {
    for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = xs[i] > T(0) ? xs[i] : T(0);
  } else {
    for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = T(1) / (T(1) + std::exp(-xs[i]));
  }
  if (auto* tape = detail::recording<T>({&x})) {
    auto* xn = x.node().get();
    auto* on = out.node().get();
    tape->record({x.node()}, out.node(), [=] {
      auto dx = detail::adjoint(xn);
      const auto& g = on->adj;
      if (op == Activation::relu) {
        // subgradient at exactly 0 is 0
        for (std::size_t i = 0; i < dx.size(); ++i)
          if (xn->data[i] > T(0)) dx[i] += g[i];
      } else {
        for (std::size_t i = 0; i < dx.size(); ++i) {
          const T s = on->data[i];
          dx[i] += g[i] * s * (T(1) - s);
        }
      }
    });
  }
  return out;
}

template <class T> Tensor<T> relu(const Tensor<T>& x) { return activation(Activation::relu, x); }
template <class T> Tensor<T> sigmoid(const Tensor<T>& x) { return activation(Activation::sigmoid, x); }

// Clip to [lo, hi]. The gradient passes on the closed interval so values
// resting exactly on a bound keep receiving updates.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  Tensor<T> out(x.shape());
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = std::clamp(xs[i], lo, hi);
  if (auto* tape = detail::recording<T>({&x})) {
    auto* xn = x.node().get();
    auto* on = out.node().get();
    tape->record({x.node()}, out.node(), [=] {
      auto dx = detail::adjoint(xn);
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (xn->data[i] >= lo && xn->data[i] <= hi) dx[i] += on->adj[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (auto* tape = detail::recording<T>({&x})) {
    auto* xn = x.node().get();
    auto* on = out.node().get();
    tape->record({x.node()}, out.node(), [=] {
      auto dx = detail::adjoint(xn);
      const T g = on->adj[0];
      for (auto& d : dx) d += g;
    });
  }
  return out;
}

// Sum over entries where mask is nonzero. The mask either matches x exactly
// or matches its trailing two (spatial) dims and is repeated over the rest.
template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::span<const std::uint8_t> mask, std::size_t mask_h,
                     std::size_t mask_w) {
  const auto& s = x.shape();
  const bool full = mask.size() == x.size() && mask_h * mask_w == mask.size();
  const bool spatial = s.size() >= 2 && s[s.size() - 2] == mask_h && s[s.size() - 1] == mask_w &&
                       mask.size() == mask_h * mask_w;
  if (!full && !spatial)
    throw ShapeError("reduce_sum: mask " + std::to_string(mask_h) + "x" + std::to_string(mask_w) +
                     " does not fit tensor " + to_string(s));
  const std::size_t plane = mask.size();
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  T acc = T(0);
  auto xs = x.data();
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (m[i % plane]) acc += xs[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (auto* tape = detail::recording<T>({&x})) {
    auto* xn = x.node().get();
    auto* on = out.node().get();
    tape->record({x.node()}, out.node(), [=, m = std::move(m)] {
      auto dx = detail::adjoint(xn);
      const T g = on->adj[0];
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (m[i % plane]) dx[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution: stride 1, zero "same" padding, optional dilation.

namespace detail {

template <class T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t dil, T* cols) {
  const long ph = static_cast<long>(dil * (kh / 2));
  const long pw = static_cast<long>(dil * (kw / 2));
  const std::size_t hw = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((c * kh + ki) * kw + kj) * hw;
        const long di = static_cast<long>(ki * dil) - ph;
        const long dj = static_cast<long>(kj * dil) - pw;
        const long j0 = std::max(0L, -dj);
        const long j1 = std::min(static_cast<long>(W), static_cast<long>(W) - dj);
        for (std::size_t i = 0; i < H; ++i) {
          T* dst = row + i * W;
          const long si = static_cast<long>(i) + di;
          if (si < 0 || si >= static_cast<long>(H) || j1 <= j0) {
            std::fill(dst, dst + W, T(0));
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(si)) * W;
          std::fill(dst, dst + j0, T(0));
          for (long j = j0; j < j1; ++j) dst[j] = src[j + dj];
          std::fill(dst + j1, dst + W, T(0));
        }
      }
}

template <class T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
                std::size_t dil, T* dx) {
  const long ph = static_cast<long>(dil * (kh / 2));
  const long pw = static_cast<long>(dil * (kw / 2));
  const std::size_t hw = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((c * kh + ki) * kw + kj) * hw;
        const long di = static_cast<long>(ki * dil) - ph;
        const long dj = static_cast<long>(kj * dil) - pw;
        const long j0 = std::max(0L, -dj);
        const long j1 = std::min(static_cast<long>(W), static_cast<long>(W) - dj);
        for (std::size_t i = 0; i < H; ++i) {
          const long si = static_cast<long>(i) + di;
          if (si < 0 || si >= static_cast<long>(H)) continue;
          T* dst = dx + (c * H + static_cast<std::size_t>(si)) * W;
          const T* src = row + i * W;
          for (long j = j0; j < j1; ++j) dst[j + dj] += src[j];
        }
      }
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

}  // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t dilation = 1) {
  detail::require_rank4(input, "conv2d");
  if (kernel.rank() != 4) throw ShapeError("conv2d: kernel must be [K,C,kh,kw], got " + to_string(kernel.shape()));
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t K = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != C)
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " channels, input has " +
                     std::to_string(C));
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel spatial dims must be odd");
  if (dilation < 1) throw ShapeError("conv2d: dilation must be >= 1");
  if (bias.shape() != Shape{K}) throw ShapeError("conv2d: bias must be [" + std::to_string(K) + "]");

  const std::size_t hw = H * W;
  const std::size_t ckk = C * kh * kw;
  auto* tape = detail::recording<T>({&input, &kernel, &bias});
  // Column buffers are kept for backward only when the kernel needs a gradient.
  const bool keep_cols = detail::wants(tape, kernel);
  auto cols = std::make_shared<std::vector<T>>((keep_cols ? N : 1) * ckk * hw);

  Tensor<T> out(Shape{N, K, H, W});
  detail::ConstMapMat<T> wm(kernel.data().data(), K, ckk);
  for (std::size_t n = 0; n < N; ++n) {
    T* cn = cols->data() + (keep_cols ? n * ckk * hw : 0);
    detail::im2col(input.data().data() + n * C * hw, C, H, W, kh, kw, dilation, cn);
    detail::MapMat<T> om(out.data().data() + n * K * hw, K, hw);
    om.noalias() = wm * detail::ConstMapMat<T>(cn, ckk, hw);
    for (std::size_t k = 0; k < K; ++k) om.row(k).array() += bias[k];
  }

  if (tape != nullptr) {
    auto* xn = input.node().get();
    auto* wn = kernel.node().get();
    auto* bn = bias.node().get();
    auto* on = out.node().get();
    const bool gx = tape->needs_grad(input);
    const bool gw = tape->needs_grad(kernel);
    const bool gb = tape->needs_grad(bias);
    tape->record({input.node(), kernel.node(), bias.node()}, out.node(), [=] {
      detail::ConstMapMat<T> w(wn->data.data(), K, ckk);
      std::vector<T> gcols(gx ? ckk * hw : 0);
      for (std::size_t n = 0; n < N; ++n) {
        detail::ConstMapMat<T> g(on->adj.data() + n * K * hw, K, hw);
        if (gw) {
          detail::MapMat<T> dw(detail::adjoint(wn).data(), K, ckk);
          dw.noalias() += g * detail::ConstMapMat<T>(cols->data() + n * ckk * hw, ckk, hw).transpose();
        }
        if (gb) {
          auto db = detail::adjoint(bn);
          for (std::size_t k = 0; k < K; ++k) db[k] += g.row(k).sum();
        }
        if (gx) {
          detail::MapMat<T> gc(gcols.data(), ckk, hw);
          gc.noalias() = w.transpose() * g;
          detail::col2im_add(gcols.data(), C, H, W, kh, kw, dilation, detail::adjoint(xn).data() + n * C * hw);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spatial resampling

template <class T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  detail::require_rank4(x, "maxpool2");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) throw ShapeError("maxpool2: spatial dims must be even, got " + to_string(x.shape()));
  const std::size_t oh = H / 2, ow = W / 2;
  Tensor<T> out(Shape{N, C, oh, ow});
  std::vector<std::uint32_t> arg(out.size());
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t base = p * H * W;
        const std::size_t cand[4] = {base + 2 * i * W + 2 * j, base + 2 * i * W + 2 * j + 1,
                                     base + (2 * i + 1) * W + 2 * j, base + (2 * i + 1) * W + 2 * j + 1};
        std::size_t best = cand[0];
        for (int c = 1; c < 4; ++c)
          if (xs[cand[c]] > xs[best]) best = cand[c];  // first maximal index wins
        const std::size_t o = (p * oh + i) * ow + j;
        ys[o] = xs[best];
        arg[o] = static_cast<std::uint32_t>(best);
      }
  if (auto* tape = detail::recording<T>({&x})) {
    auto* xn = x.node().get();
    auto* on = out.node().get();
    tape->record({x.node()}, out.node(), [=, arg = std::move(arg)] {
      auto dx = detail::adjoint(xn);
      for (std::size_t o = 0; o < arg.size(); ++o) dx[arg[o]] += on->adj[o];
    });
  }
  return out;
}

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

// Half-pixel (align_corners = false) source coordinates.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[d] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank4(x, "upsample_bilinear");
  if (out_h < 1 || out_w < 1) throw ShapeError("upsample_bilinear: output dims must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto ty = detail::lerp_taps(H, out_h);
  const auto tx = detail::lerp_taps(W, out_w);
  Tensor<T> out(Shape{N, C, out_h, out_w});
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t p = 0; p < N * C; ++p) {
    const T* src = xs.data() + p * H * W;
    T* dst = ys.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T wy = static_cast<T>(ty[i].w1);
      for (std::size_t j = 0; j < out_w; ++j) {
        const T wx = static_cast<T>(tx[j].w1);
        const T top = (T(1) - wx) * src[ty[i].i0 * W + tx[j].i0] + wx * src[ty[i].i0 * W + tx[j].i1];
        const T bot = (T(1) - wx) * src[ty[i].i1 * W + tx[j].i0] + wx * src[ty[i].i1 * W + tx[j].i1];
        dst[i * out_w + j] = (T(1) - wy) * top + wy * bot;
      }
    }
  }
  if (auto* tape = detail::recording<T>({&x})) {
    auto* xn = x.node().get();
    auto* on = out.node().get();
    tape->record({x.node()}, out.node(), [=] {
      auto dx = detail::adjoint(xn);
      for (std::size_t p = 0; p < N * C; ++p) {
        T* d = dx.data() + p * H * W;
        const T* g = on->adj.data() + p * out_h * out_w;
        for (std::size_t i = 0; i < out_h; ++i) {
          const T wy = static_cast<T>(ty[i].w1);
          for (std::size_t j = 0; j < out_w; ++j) {
            const T wx = static_cast<T>(tx[j].w1);
            const T gv = g[i * out_w + j];
            d[ty[i].i0 * W + tx[j].i0] += gv * (T(1) - wy) * (T(1) - wx);
            d[ty[i].i0 * W + tx[j].i1] += gv * (T(1) - wy) * wx;
            d[ty[i].i1 * W + tx[j].i0] += gv * wy * (T(1) - wx);
            d[ty[i].i1 * W + tx[j].i1] += gv * wy * wx;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops

template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& p : parts) detail::require_rank4(p, "concat_channels");
  const std::size_t N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  std::size_t C = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != N || p.dim(2) != H || p.dim(3) != W)
      throw ShapeError("concat_channels: mismatched " + to_string(p.shape()) + " vs " + to_string(parts[0].shape()));
    C += p.dim(1);
  }
  const std::size_t hw = H * W;
  Tensor<T> out(Shape{N, C, H, W});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    for (std::size_t n = 0; n < N; ++n)
      std::copy_n(p.data().data() + n * p.dim(1) * hw, p.dim(1) * hw, out.data().data() + (n * C + off) * hw);
    off += p.dim(1);
  }
  auto* tape = Tape<T>::active();
  bool any = false;
  if (tape != nullptr)
    for (const auto& p : parts) any = any || tape->needs_grad(p);
  if (any) {
    std::vector<typename Tensor<T>::NodePtr> inputs;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> targets;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      inputs.push_back(parts[k].node());
      if (tape->needs_grad(parts[k])) targets.emplace_back(parts[k].node().get(), offsets[k]);
    }
    auto* on = out.node().get();
    tape->record(std::move(inputs), out.node(), [=] {
      for (auto [pn, o] : targets) {
        const std::size_t pc = pn->shape[1];
        auto d = detail::adjoint(pn);
        for (std::size_t n = 0; n < N; ++n) {
          const T* g = on->adj.data() + (n * C + o) * hw;
          T* dst = d.data() + n * pc * hw;
          for (std::size_t i = 0; i < pc * hw; ++i) dst[i] += g[i];
        }
      }
    });
  }
  return out;
}

// Rotates a [C,P,P] texture by quarter_turns * 90 degrees (clockwise) and
// writes it into a zero [1,C,H,W] canvas with its top-left at (row, col).
template <class T>
Tensor<T> place_patch(const Tensor<T>& patch, std::size_t H, std::size_t W, std::size_t row, std::size_t col,
                      int quarter_turns = 0) {
  if (patch.rank() != 3 || patch.dim(1) != patch.dim(2))
    throw ShapeError("place_patch: expected [C,P,P], got " + to_string(patch.shape()));
  const std::size_t C = patch.dim(0), P = patch.dim(1);
  if (row + P > H || col + P > W) throw ShapeError("place_patch: patch exceeds canvas");
  const int q = ((quarter_turns % 4) + 4) % 4;
  std::vector<std::uint32_t> index(C * P * P);  // canvas index for each patch entry
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < P; ++i)
      for (std::size_t j = 0; j < P; ++j) {
        std::size_t r = i, s = j;
        switch (q) {
          case 1: r = j; s = P - 1 - i; break;
          case 2: r = P - 1 - i; s = P - 1 - j; break;
          case 3: r = P - 1 - j; s = i; break;
          default: break;
        }
        index[(c * P + i) * P + j] = static_cast<std::uint32_t>((c * H + row + r) * W + col + s);
      }
  Tensor<T> out(Shape{1, C, H, W});
  auto ps = patch.data();
  auto os = out.data();
  for (std::size_t k = 0; k < index.size(); ++k) os[index[k]] = ps[k];
  if (auto* tape = detail::recording<T>({&patch})) {
    auto* pn = patch.node().get();
    auto* on = out.node().get();
    tape->record({patch.node()}, out.node(), [=, index = std::move(index)] {
      auto d = detail::adjoint(pn);
      for (std::size_t k = 0; k < index.size(); ++k) d[k] += on->adj[index[k]];
    });
  }
  return out;
}

}  // namespace pap
