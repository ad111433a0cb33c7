#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "steadv/array.hpp"
#include "steadv/errors.hpp"

namespace steadv {

template <typename T>
class Tape;

// Lightweight handle into a tape node.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  bool defined() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }

  const Array<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  // Gradient after backward(); zeros if no gradient reached this node.
  const Array<T>& grad() const;

 private:
  friend class Tape<T>;
  Tensor(Tape<T>* t, int id) : tape_(t), id_(id) {}

  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Nodes are appended in execution order, so the list is
// already topologically sorted; backward() walks it once in reverse. A tape
// is single-use: rebuild the forward pass for every backward.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape<T>&, int)>;

  Tensor<T> leaf(Array<T> value, bool requires_grad = false) {
    return record(std::move(value), {}, nullptr, requires_grad);
  }

  Tensor<T> record(Array<T> value, std::vector<int> inputs, BackwardFn backward,
                   std::optional<bool> force_requires = std::nullopt) {
    Node node;
    node.value = std::move(value);
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
    if (force_requires.has_value()) {
      node.requires_grad = *force_requires;
    } else {
      for (int in : node.inputs)
        if (nodes_[static_cast<std::size_t>(in)].requires_grad) node.requires_grad = true;
    }
    nodes_.push_back(std::move(node));
    return Tensor<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  void backward(const Tensor<T>& loss) {
    if (loss.tape() != this) throw AutogradError("backward: loss tensor is not on this tape");
    if (backward_ran_)
      throw AutogradError("backward: tape already consumed; rebuild the forward pass on a fresh tape");
    const Array<T>& lv = value(loss.id());
    if (lv.size() != 1)
      throw AutogradError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
    backward_ran_ = true;
    grad_buffer(loss.id())[0] = T(1);
    for (int id = loss.id(); id >= 0; --id) {
      Node& node = nodes_[static_cast<std::size_t>(id)];
      if (node.grad.empty() || !node.backward) continue;
      node.backward(*this, id);
    }
  }

  std::size_t num_nodes() const { return nodes_.size(); }
  bool backward_ran() const { return backward_ran_; }

  const Array<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  // Zero-initialized on first touch; backward rules accumulate into it.
  Array<T>& grad_buffer(int id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.grad.empty()) node.grad = Array<T>(node.value.shape());
    return node.grad;
  }

  const Array<T>& ensure_grad(int id) { return grad_buffer(id); }

 private:
  struct Node {
    Array<T> value;
    Array<T> grad;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool backward_ran_ = false;
};

template <typename T>
const Array<T>& Tensor<T>::value() const {
  if (!tape_) throw AutogradError("tensor: undefined handle");
  return tape_->value(id_);
}

template <typename T>
const Array<T>& Tensor<T>::grad() const {
  if (!tape_) throw AutogradError("tensor: undefined handle");
  return tape_->ensure_grad(id_);
}

// ---------------------------------------------------------------------------
// Kernels: plain array math shared by tape ops and the tape-free model path.
// Keeping both paths on the same functions is what makes forward values of
// the recorded and unrecorded pipelines bit-identical.
// ---------------------------------------------------------------------------

namespace kernels {

template <typename T>
Array<T> ewise(const Array<T>& a, const Array<T>& b, T (*f)(T, T)) {
  Array<T> out(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <typename T>
Array<T> relu(const Array<T>& x) {
  Array<T> out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

template <typename T>
Array<T> clamp(const Array<T>& x, T lo, T hi) {
  Array<T> out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] < lo ? lo : (x[i] > hi ? hi : x[i]);
  return out;
}

// a {M,K} * b {K,N} -> {M,N}
template <typename T>
Array<T> matmul(const Array<T>& a, const Array<T>& b) {
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Array<T> out(Shape{m, n});
  for (int i = 0; i < m; ++i) {
    const T* arow = a.data() + static_cast<std::int64_t>(i) * k;
    T* orow = out.data() + static_cast<std::int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = arow[p];
      const T* brow = b.data() + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a {M,K} * b^T with b {N,K} -> {M,N}
template <typename T>
Array<T> matmul_bt(const Array<T>& a, const Array<T>& b) {
  int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Array<T> out(Shape{m, n});
  for (int i = 0; i < m; ++i) {
    const T* arow = a.data() + static_cast<std::int64_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const T* brow = b.data() + static_cast<std::int64_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out.at(i, j) = acc;
    }
  }
  return out;
}

// a^T with a {M,K} * b {M,N} -> {K,N}
template <typename T>
Array<T> matmul_at(const Array<T>& a, const Array<T>& b) {
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Array<T> out(Shape{k, n});
  for (int i = 0; i < m; ++i) {
    const T* arow = a.data() + static_cast<std::int64_t>(i) * k;
    const T* brow = b.data() + static_cast<std::int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = arow[p];
      T* orow = out.data() + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

template <typename T>
Array<T> bias_add(const Array<T>& a, const Array<T>& bias) {
  int m = a.dim(0), k = a.dim(1);
  Array<T> out(a.shape());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) out.at(i, j) = a.at(i, j) + bias[j];
  return out;
}

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// Rows are output positions, columns the unrolled C*kh*kw receptive field.
template <typename T>
void im2col(const Array<T>& x, int n, int kh, int kw, int stride, int pad, int oh, int ow,
            Array<T>& cols) {
  int C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::int64_t row = 0;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox, ++row) {
      T* dst = cols.data() + row * cols.dim(1);
      std::int64_t ki = 0;
      for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride + ky - pad;
          for (int kx = 0; kx < kw; ++kx, ++ki) {
            int ix = ox * stride + kx - pad;
            dst[ki] = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x.at(n, c, iy, ix) : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const Array<T>& cols, int n, int kh, int kw, int stride, int pad, int oh, int ow,
                Array<T>& gx) {
  int C = gx.dim(1), H = gx.dim(2), W = gx.dim(3);
  std::int64_t row = 0;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox, ++row) {
      const T* src = cols.data() + row * cols.dim(1);
      std::int64_t ki = 0;
      for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride + ky - pad;
          for (int kx = 0; kx < kw; ++kx, ++ki) {
            int ix = ox * stride + kx - pad;
            if (iy >= 0 && iy < H && ix >= 0 && ix < W) gx.at(n, c, iy, ix) += src[ki];
          }
        }
      }
    }
  }
}

// x {N,C,H,W}, w {F,C,kh,kw}, bias {F} or empty.
template <typename T>
Array<T> conv2d(const Array<T>& x, const Array<T>& w, const Array<T>* bias, int stride, int pad) {
  int N = x.dim(0), F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int ckk = w.dim(1) * kh * kw;
  int oh = conv_out_dim(x.dim(2), kh, stride, pad);
  int ow = conv_out_dim(x.dim(3), kw, stride, pad);
  Array<T> out(Shape{N, F, oh, ow});
  Array<T> cols(Shape{oh * ow, ckk});
  for (int n = 0; n < N; ++n) {
    im2col(x, n, kh, kw, stride, pad, oh, ow, cols);
    for (int f = 0; f < F; ++f) {
      const T* wrow = w.data() + static_cast<std::int64_t>(f) * ckk;
      T b = bias ? (*bias)[f] : T(0);
      T* orow = out.data() + ((static_cast<std::int64_t>(n) * F + f) * oh * ow);
      for (std::int64_t r = 0; r < static_cast<std::int64_t>(oh) * ow; ++r) {
        const T* crow = cols.data() + r * ckk;
        T acc = b;
        for (int k = 0; k < ckk; ++k) acc += wrow[k] * crow[k];
        orow[r] = acc;
      }
    }
  }
  return out;
}

template <typename T>
void conv2d_backward(const Array<T>& gout, const Array<T>& x, const Array<T>& w, int stride,
                     int pad, Array<T>* gx, Array<T>* gw, Array<T>* gbias) {
  int N = x.dim(0), F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int ckk = w.dim(1) * kh * kw;
  int oh = gout.dim(2), ow = gout.dim(3);
  std::int64_t positions = static_cast<std::int64_t>(oh) * ow;
  Array<T> cols(Shape{oh * ow, ckk});
  Array<T> gcols(Shape{oh * ow, ckk});
  for (int n = 0; n < N; ++n) {
    if (gw) im2col(x, n, kh, kw, stride, pad, oh, ow, cols);
    if (gx) gcols.fill(T(0));
    for (int f = 0; f < F; ++f) {
      const T* grow = gout.data() + ((static_cast<std::int64_t>(n) * F + f) * positions);
      const T* wrow = w.data() + static_cast<std::int64_t>(f) * ckk;
      T* gwrow = gw ? gw->data() + static_cast<std::int64_t>(f) * ckk : nullptr;
      for (std::int64_t r = 0; r < positions; ++r) {
        T g = grow[r];
        if (g == T(0)) continue;
        if (gx) {
          T* gcrow = gcols.data() + r * ckk;
          for (int k = 0; k < ckk; ++k) gcrow[k] += g * wrow[k];
        }
        if (gwrow) {
          const T* crow = cols.data() + r * ckk;
          for (int k = 0; k < ckk; ++k) gwrow[k] += g * crow[k];
        }
        if (gbias) (*gbias)[f] += g;
      }
    }
    if (gx) col2im_add(gcols, n, kh, kw, stride, pad, oh, ow, *gx);
  }
}

// 2x2 max pooling, stride 2. argmax holds the flat input index per output.
template <typename T>
Array<T> max_pool2(const Array<T>& x, std::vector<std::int64_t>* argmax) {
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Array<T> out(Shape{N, C, H / 2, W / 2});
  if (argmax) argmax->assign(static_cast<std::size_t>(out.size()), 0);
  std::int64_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H / 2; ++y)
        for (int x2 = 0; x2 < W / 2; ++x2, ++o) {
          T best = x.at(n, c, 2 * y, 2 * x2);
          std::int64_t bi = ((static_cast<std::int64_t>(n) * C + c) * H + 2 * y) * W + 2 * x2;
          // ties keep the first element in scan order
          const int dy[3] = {0, 1, 1};
          const int dx[3] = {1, 0, 1};
          for (int t = 0; t < 3; ++t) {
            T v = x.at(n, c, 2 * y + dy[t], 2 * x2 + dx[t]);
            if (v > best) {
              best = v;
              bi = ((static_cast<std::int64_t>(n) * C + c) * H + 2 * y + dy[t]) * W + 2 * x2 + dx[t];
            }
          }
          out[o] = best;
          if (argmax) (*argmax)[static_cast<std::size_t>(o)] = bi;
        }
  return out;
}

// Mean cross-entropy over rows; probs output is optional.
template <typename T>
T softmax_cross_entropy(const Array<T>& logits, const std::vector<int>& labels, Array<T>* probs) {
  int n = logits.dim(0), k = logits.dim(1);
  T total = T(0);
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data() + static_cast<std::int64_t>(i) * k;
    T m = row[0];
    for (int j = 1; j < k; ++j)
      if (row[j] > m) m = row[j];
    T z = T(0);
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - m);
    if (probs)
      for (int j = 0; j < k; ++j) probs->at(i, j) = std::exp(row[j] - m) / z;
    total += std::log(z) - (row[labels[static_cast<std::size_t>(i)]] - m);
  }
  return total / static_cast<T>(n);
}

template <typename T>
Array<T> nhwc_to_nchw(const Array<T>& x) {
  int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  Array<T> out(Shape{N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w)
        for (int c = 0; c < C; ++c) out.at(n, c, h, w) = x.at(n, h, w, c);
  return out;
}

template <typename T>
Array<T> nchw_to_nhwc(const Array<T>& x) {
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Array<T> out(Shape{N, H, W, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) out.at(n, h, w, c) = x.at(n, c, h, w);
  return out;
}

template <typename T>
int argmax_row(const Array<T>& a, int row) {
  int k = a.dim(1);
  int best = 0;
  for (int j = 1; j < k; ++j)
    if (a.at(row, j) > a.at(row, best)) best = j;
  return best;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Recorded operations
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_same_tape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.tape() != b.tape())
    throw AutogradError(std::string(op) + ": operands live on different tapes");
}

template <typename T>
void check_same_shape(const char* op, const Array<T>& a, const Array<T>& b) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename T>
void accumulate(Array<T>& dst, const Array<T>& src) {
  for (std::int64_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_tape("add", a, b);
  detail::check_same_shape("add", a.value(), b.value());
  Array<T> out(a.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  int ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(out), {ai, bi}, [ai, bi](Tape<T>& tp, int self) {
    const Array<T>& g = tp.grad_buffer(self);
    if (tp.requires_grad(ai)) detail::accumulate(tp.grad_buffer(ai), g);
    if (tp.requires_grad(bi)) detail::accumulate(tp.grad_buffer(bi), g);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_tape("sub", a, b);
  detail::check_same_shape("sub", a.value(), b.value());
  Array<T> out(a.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  int ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(out), {ai, bi}, [ai, bi](Tape<T>& tp, int self) {
    const Array<T>& g = tp.grad_buffer(self);
    if (tp.requires_grad(ai)) detail::accumulate(tp.grad_buffer(ai), g);
    if (tp.requires_grad(bi)) {
      Array<T>& gb = tp.grad_buffer(bi);
      for (std::int64_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_tape("mul", a, b);
  detail::check_same_shape("mul", a.value(), b.value());
  Array<T> out(a.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  int ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(out), {ai, bi}, [ai, bi](Tape<T>& tp, int self) {
    const Array<T>& g = tp.grad_buffer(self);
    if (tp.requires_grad(ai)) {
      Array<T>& ga = tp.grad_buffer(ai);
      const Array<T>& bv = tp.value(bi);
      for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(bi)) {
      Array<T>& gb = tp.grad_buffer(bi);
      const Array<T>& av = tp.value(ai);
      for (std::int64_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Array<T> out(a.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
  int ai = a.id();
  return a.tape()->record(std::move(out), {ai}, [ai](Tape<T>& tp, int self) {
    if (tp.requires_grad(ai)) detail::accumulate(tp.grad_buffer(ai), tp.grad_buffer(self));
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  Array<T> out(a.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
  int ai = a.id();
  return a.tape()->record(std::move(out), {ai}, [ai, c](Tape<T>& tp, int self) {
    if (tp.requires_grad(ai)) {
      const Array<T>& g = tp.grad_buffer(self);
      Array<T>& ga = tp.grad_buffer(ai);
      for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * c;
    }
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_tape("matmul", a, b);
  const Array<T>& av = a.value();
  const Array<T>& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  int ai = a.id(), bi = b.id();
  return a.tape()->record(kernels::matmul(av, bv), {ai, bi}, [ai, bi](Tape<T>& tp, int self) {
    const Array<T>& g = tp.grad_buffer(self);
    if (tp.requires_grad(ai))
      detail::accumulate(tp.grad_buffer(ai), kernels::matmul_bt(g, tp.value(bi)));
    if (tp.requires_grad(bi))
      detail::accumulate(tp.grad_buffer(bi), kernels::matmul_at(tp.value(ai), g));
  });
}

template <typename T>
Tensor<T> bias_add(const Tensor<T>& a, const Tensor<T>& bias) {
  detail::check_same_tape("bias_add", a, bias);
  const Array<T>& av = a.value();
  const Array<T>& bv = bias.value();
  if (av.rank() != 2 || bv.rank() != 1 || av.dim(1) != bv.dim(0))
    throw ShapeError("bias_add: incompatible shapes " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  int ai = a.id(), bi = bias.id();
  return a.tape()->record(kernels::bias_add(av, bv), {ai, bi}, [ai, bi](Tape<T>& tp, int self) {
    const Array<T>& g = tp.grad_buffer(self);
    if (tp.requires_grad(ai)) detail::accumulate(tp.grad_buffer(ai), g);
    if (tp.requires_grad(bi)) {
      Array<T>& gb = tp.grad_buffer(bi);
      int m = g.dim(0), k = g.dim(1);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) gb[j] += g.at(i, j);
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  int ai = a.id();
  return a.tape()->record(kernels::relu(a.value()), {ai}, [ai](Tape<T>& tp, int self) {
    if (!tp.requires_grad(ai)) return;
    const Array<T>& g = tp.grad_buffer(self);
    const Array<T>& x = tp.value(ai);
    Array<T>& ga = tp.grad_buffer(ai);
    for (std::int64_t i = 0; i < ga.size(); ++i)
      if (x[i] > T(0)) ga[i] += g[i];
  });
}

// Subgradient at the boundary counts as inside.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  int ai = a.id();
  return a.tape()->record(kernels::clamp(a.value(), lo, hi), {ai},
                          [ai, lo, hi](Tape<T>& tp, int self) {
                            if (!tp.requires_grad(ai)) return;
                            const Array<T>& g = tp.grad_buffer(self);
                            const Array<T>& x = tp.value(ai);
                            Array<T>& ga = tp.grad_buffer(ai);
                            for (std::int64_t i = 0; i < ga.size(); ++i)
                              if (x[i] >= lo && x[i] <= hi) ga[i] += g[i];
                          });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, int stride,
                 int pad) {
  detail::check_same_tape("conv2d", x, w);
  const Array<T>& xv = x.value();
  const Array<T>& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1))
    throw ShapeError("conv2d: incompatible shapes " + shape_str(xv.shape()) + " vs " +
                     shape_str(wv.shape()));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const Array<T>* bv = bias ? &bias->value() : nullptr;
  if (bv && (bv->rank() != 1 || bv->dim(0) != wv.dim(0)))
    throw ShapeError("conv2d: bias shape " + shape_str(bv->shape()) + " does not match filters " +
                     shape_str(wv.shape()));
  int xi = x.id(), wi = w.id(), bi = bias ? bias->id() : -1;
  std::vector<int> inputs = {xi, wi};
  if (bias) inputs.push_back(bi);
  return x.tape()->record(
      kernels::conv2d(xv, wv, bv, stride, pad), std::move(inputs),
      [xi, wi, bi, stride, pad](Tape<T>& tp, int self) {
        const Array<T>& g = tp.grad_buffer(self);
        bool need_x = tp.requires_grad(xi);
        bool need_w = tp.requires_grad(wi);
        bool need_b = bi >= 0 && tp.requires_grad(bi);
        if (!need_x && !need_w && !need_b) return;
        Array<T>* gx = need_x ? &tp.grad_buffer(xi) : nullptr;
        Array<T>* gw = need_w ? &tp.grad_buffer(wi) : nullptr;
        Array<T>* gb = need_b ? &tp.grad_buffer(bi) : nullptr;
        kernels::conv2d_backward(g, tp.value(xi), tp.value(wi), stride, pad, gx, gw, gb);
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  return conv2d<T>(x, w, nullptr, stride, pad);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad) {
  return conv2d<T>(x, w, &bias, stride, pad);
}

template <typename T>
Tensor<T> max_pool2(const Tensor<T>& a) {
  const Array<T>& xv = a.value();
  if (xv.rank() != 4 || xv.dim(2) % 2 != 0 || xv.dim(3) % 2 != 0)
    throw ShapeError("max_pool2: expected NCHW with even H,W, got " + shape_str(xv.shape()));
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  Array<T> out = kernels::max_pool2(xv, argmax.get());
  int ai = a.id();
  return a.tape()->record(std::move(out), {ai}, [ai, argmax](Tape<T>& tp, int self) {
    if (!tp.requires_grad(ai)) return;
    const Array<T>& g = tp.grad_buffer(self);
    Array<T>& ga = tp.grad_buffer(ai);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[(*argmax)[static_cast<std::size_t>(i)]] += g[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (std::int64_t i = 0; i < a.value().size(); ++i) total += a.value()[i];
  Array<T> out(Shape{});
  out[0] = total;
  int ai = a.id();
  return a.tape()->record(std::move(out), {ai}, [ai](Tape<T>& tp, int self) {
    if (!tp.requires_grad(ai)) return;
    T g = tp.grad_buffer(self)[0];
    Array<T>& ga = tp.grad_buffer(ai);
    for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T total = T(0);
  for (std::int64_t i = 0; i < a.value().size(); ++i) total += a.value()[i];
  T scale = T(1) / static_cast<T>(a.value().size());
  Array<T> out(Shape{});
  out[0] = total * scale;
  int ai = a.id();
  return a.tape()->record(std::move(out), {ai}, [ai, scale](Tape<T>& tp, int self) {
    if (!tp.requires_grad(ai)) return;
    T g = tp.grad_buffer(self)[0] * scale;
    Array<T>& ga = tp.grad_buffer(ai);
    for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

// Mean cross-entropy over the batch. label_smoothing spreads the target
// mass: q_true = 1 - s + s/K, q_other = s/K.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                                double label_smoothing = 0.0) {
  const Array<T>& lv = logits.value();
  if (lv.rank() != 2 || static_cast<std::size_t>(lv.dim(0)) != labels.size())
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(lv.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  for (int l : labels)
    if (l < 0 || l >= lv.dim(1))
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(l) + " out of range");
  int n = lv.dim(0), k = lv.dim(1);
  T q_other = static_cast<T>(label_smoothing / k);
  T q_true = static_cast<T>(1.0 - label_smoothing) + q_other;
  auto probs = std::make_shared<Array<T>>(lv.shape());
  kernels::softmax_cross_entropy(lv, labels, probs.get());
  // recompute the loss against the smoothed target from the probabilities
  T total = T(0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      T q = (j == labels[static_cast<std::size_t>(i)]) ? q_true : q_other;
      if (q > T(0)) total -= q * std::log(probs->at(i, j));
    }
  Array<T> out(Shape{});
  out[0] = total / static_cast<T>(n);
  int li = logits.id();
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  return logits.tape()->record(
      std::move(out), {li}, [li, probs, labels_copy, q_true, q_other](Tape<T>& tp, int self) {
        if (!tp.requires_grad(li)) return;
        T g = tp.grad_buffer(self)[0];
        Array<T>& gl = tp.grad_buffer(li);
        int n2 = gl.dim(0), k2 = gl.dim(1);
        T invn = T(1) / static_cast<T>(n2);
        for (int i = 0; i < n2; ++i)
          for (int j = 0; j < k2; ++j) {
            T q = (j == (*labels_copy)[static_cast<std::size_t>(i)]) ? q_true : q_other;
            gl.at(i, j) += g * (probs->at(i, j) - q) * invn;
          }
      });
}

// Forward identity (bit-exact copy), zero gradient to the input.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  return a.tape()->record(a.value(), {a.id()}, nullptr, false);
}

// g(t) = t + sg[exact - t]: the forward takes the exact values verbatim and
// the backward is the identity into t. Fusing the algebra keeps the forward
// bit-exact, which a literal float add/sub round trip would not guarantee.
template <typename T>
Tensor<T> straight_through(const Tensor<T>& t, const Array<T>& exact) {
  detail::check_same_shape("straight_through", t.value(), exact);
  int ti = t.id();
  return t.tape()->record(exact, {ti}, [ti](Tape<T>& tp, int self) {
    if (tp.requires_grad(ti)) detail::accumulate(tp.grad_buffer(ti), tp.grad_buffer(self));
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_size(shape) != a.value().size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Array<T> out(shape);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i];
  int ai = a.id();
  return a.tape()->record(std::move(out), {ai}, [ai](Tape<T>& tp, int self) {
    if (!tp.requires_grad(ai)) return;
    const Array<T>& g = tp.grad_buffer(self);
    Array<T>& ga = tp.grad_buffer(ai);
    for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Tensor<T> nhwc_to_nchw(const Tensor<T>& a) {
  const Array<T>& xv = a.value();
  if (xv.rank() != 4) throw ShapeError("nhwc_to_nchw: expected rank 4, got " + shape_str(xv.shape()));
  int ai = a.id();
  return a.tape()->record(kernels::nhwc_to_nchw(xv), {ai}, [ai](Tape<T>& tp, int self) {
    if (!tp.requires_grad(ai)) return;
    Array<T> gperm = kernels::nchw_to_nhwc(tp.grad_buffer(self));
    detail::accumulate(tp.grad_buffer(ai), gperm);
  });
}

}  // namespace steadv
