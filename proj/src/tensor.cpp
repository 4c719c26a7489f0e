#include "condigsum/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "condigsum/error.hpp"
#include "condigsum/kernels.hpp"

namespace condigsum {

std::string Shape::str() const {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str());
}

void require_same(const char* op, const Shape& a, const Shape& b) {
  if (!(a == b)) shape_error(op, a, b);
}

template <typename T>
const kernels::Table<T>& kern() {
  return kernels::active<T>();
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(std::size_t rows, std::size_t cols, T fill)
    : shape_{rows, cols}, data_(rows * cols, fill) {}

template <typename T>
Tensor<T>::Tensor(std::size_t rows, std::size_t cols, std::vector<T> data)
    : shape_{rows, cols}, data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_.str());
  }
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T x) { return std::isfinite(x); });
}

template <typename T>
void Parameter<T>::zero_grad() {
  if (!(grad.shape() == value.shape())) {
    grad = Tensor<T>(value.rows(), value.cols());
  } else {
    grad.fill(T(0));
  }
}

template <typename T>
Tape<T>::Tape(bool train, Rng* rng, bool track_grad)
    : train_(train), track_grad_(track_grad), rng_(rng) {
  if (train_ && rng_ == nullptr) throw ValidationError("a training tape needs a random generator");
}

template <typename T>
const Tensor<T>& Tape<T>::val(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.ref != nullptr ? *n.ref : n.owned;
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  if (v.id >= nodes_.size()) throw ValidationError("variable does not belong to this tape");
  return val(v.id);
}

template <typename T>
T Tape<T>::scalar(Var v) const {
  const auto& t = value(v);
  if (t.size() != 1) throw ShapeError("scalar(): expected [1x1], got " + t.shape().str());
  return t[0];
}

template <typename T>
const Tensor<T>* Tape<T>::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (!n.has_grad) return nullptr;
  return n.grad_ref != nullptr ? n.grad_ref : &n.grad_owned;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  const Shape& s = val(id).shape();
  if (n.grad_ref != nullptr) {
    if (!(n.grad_ref->shape() == s)) *n.grad_ref = Tensor<T>(s.rows, s.cols);
    n.has_grad = true;
    return *n.grad_ref;
  }
  if (!n.has_grad) {
    n.grad_owned = Tensor<T>(s.rows, s.cols);
    n.has_grad = true;
  }
  return n.grad_owned;
}

template <typename T>
const Tensor<T>& Tape<T>::grad_of(const Node& n) const {
  return n.grad_ref != nullptr ? *n.grad_ref : n.grad_owned;
}

template <typename T>
Var Tape<T>::push(Tensor<T> value, bool requires_grad,
                  std::function<void(Tape&, const Node&)> backward) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad && track_grad_;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::parameter(Parameter<T>& p) {
  Node n;
  n.ref = &p.value;
  n.grad_ref = &p.grad;
  n.requires_grad = track_grad_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  return push(std::move(value), false, nullptr);
}

template <typename T>
void Tape<T>::backward(Var root, T seed) {
  if (root.id >= nodes_.size()) throw ValidationError("backward root does not belong to this tape");
  if (!nodes_[root.id].requires_grad) return;
  grad_buffer(root.id).fill(seed);
  for (std::uint32_t i = root.id + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.requires_grad && n.has_grad && n.backward) n.backward(*this, n);
  }
}

template <typename T>
Var Tape<T>::matmul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.cols() != B.rows()) shape_error("matmul", A.shape(), B.shape());
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor<T> C(m, n);
  kern<T>().gemm_nn(A.raw(), B.raw(), C.raw(), m, k, n);
  return push(std::move(C), needs(a) || needs(b), [a, b, m, k, n](Tape& t, const Node& self) {
    const auto& dC = t.grad_of(self);
    if (t.needs(a)) kern<T>().gemm_nt(dC.raw(), t.val(b.id).raw(), t.grad_buffer(a.id).raw(), m, n, k);
    if (t.needs(b)) kern<T>().gemm_tn(t.val(a.id).raw(), dC.raw(), t.grad_buffer(b.id).raw(), k, m, n);
  });
}

template <typename T>
Var Tape<T>::matmul_nt(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.cols() != B.cols()) shape_error("matmul_nt", A.shape(), B.shape());
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  Tensor<T> C(m, n);
  kern<T>().gemm_nt(A.raw(), B.raw(), C.raw(), m, k, n);
  return push(std::move(C), needs(a) || needs(b), [a, b, m, k, n](Tape& t, const Node& self) {
    const auto& dC = t.grad_of(self);
    if (t.needs(a)) kern<T>().gemm_nn(dC.raw(), t.val(b.id).raw(), t.grad_buffer(a.id).raw(), m, n, k);
    if (t.needs(b)) kern<T>().gemm_tn(dC.raw(), t.val(a.id).raw(), t.grad_buffer(b.id).raw(), n, m, k);
  });
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_same("add", A.shape(), B.shape());
  Tensor<T> C = A;
  kern<T>().axpy(C.size(), T(1), B.raw(), C.raw());
  return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, const Node& self) {
    const auto& dC = t.grad_of(self);
    if (t.needs(a)) kern<T>().axpy(dC.size(), T(1), dC.raw(), t.grad_buffer(a.id).raw());
    if (t.needs(b)) kern<T>().axpy(dC.size(), T(1), dC.raw(), t.grad_buffer(b.id).raw());
  });
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_same("sub", A.shape(), B.shape());
  Tensor<T> C = A;
  kern<T>().axpy(C.size(), T(-1), B.raw(), C.raw());
  return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, const Node& self) {
    const auto& dC = t.grad_of(self);
    if (t.needs(a)) kern<T>().axpy(dC.size(), T(1), dC.raw(), t.grad_buffer(a.id).raw());
    if (t.needs(b)) kern<T>().axpy(dC.size(), T(-1), dC.raw(), t.grad_buffer(b.id).raw());
  });
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_same("mul", A.shape(), B.shape());
  Tensor<T> C(A.rows(), A.cols());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * B[i];
  return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, const Node& self) {
    const auto& dC = t.grad_of(self);
    if (t.needs(a)) {
      auto& dA = t.grad_buffer(a.id);
      const auto& Bv = t.val(b.id);
      for (std::size_t i = 0; i < dC.size(); ++i) dA[i] += dC[i] * Bv[i];
    }
    if (t.needs(b)) {
      auto& dB = t.grad_buffer(b.id);
      const auto& Av = t.val(a.id);
      for (std::size_t i = 0; i < dC.size(); ++i) dB[i] += dC[i] * Av[i];
    }
  });
}

template <typename T>
Var Tape<T>::scale(Var a, T factor) {
  Tensor<T> C = value(a);
  for (auto& x : C.data()) x *= factor;
  return push(std::move(C), needs(a), [a, factor](Tape& t, const Node& self) {
    const auto& dC = t.grad_of(self);
    kern<T>().axpy(dC.size(), factor, dC.raw(), t.grad_buffer(a.id).raw());
  });
}

template <typename T>
Var Tape<T>::add_scalar(Var a, T offset) {
  Tensor<T> C = value(a);
  for (auto& x : C.data()) x += offset;
  return push(std::move(C), needs(a), [a](Tape& t, const Node& self) {
    const auto& dC = t.grad_of(self);
    kern<T>().axpy(dC.size(), T(1), dC.raw(), t.grad_buffer(a.id).raw());
  });
}

template <typename T>
Var Tape<T>::add_row(Var a, Var bias) {
  const auto& A = value(a);
  const auto& B = value(bias);
  if (B.rows() != 1 || B.cols() != A.cols()) shape_error("add_row", A.shape(), B.shape());
  Tensor<T> C = A;
  for (std::size_t r = 0; r < C.rows(); ++r) {
    kern<T>().axpy(C.cols(), T(1), B.raw(), C.raw() + r * C.cols());
  }
  return push(std::move(C), needs(a) || needs(bias), [a, bias](Tape& t, const Node& self) {
    const auto& dC = t.grad_of(self);
    if (t.needs(a)) kern<T>().axpy(dC.size(), T(1), dC.raw(), t.grad_buffer(a.id).raw());
    if (t.needs(bias)) {
      auto& dB = t.grad_buffer(bias.id);
      for (std::size_t r = 0; r < dC.rows(); ++r) {
        kern<T>().axpy(dC.cols(), T(1), dC.raw() + r * dC.cols(), dB.raw());
      }
    }
  });
}

template <typename T>
Var Tape<T>::gelu(Var a) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  const auto& A = value(a);
  Tensor<T> C(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) {
    C[i] = T(0.5) * A[i] * (T(1) + std::erf(A[i] * kInvSqrt2));
  }
  return push(std::move(C), needs(a), [a](Tape& t, const Node& self) {
    constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
    const auto& dC = t.grad_of(self);
    const auto& X = t.val(a.id);
    auto& dA = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < X.size(); ++i) {
      const T x = X[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
      const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
      dA[i] += dC[i] * (cdf + x * pdf);
    }
  });
}

template <typename T>
Var Tape<T>::relu(Var a) {
  const auto& A = value(a);
  Tensor<T> C(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] > T(0) ? A[i] : T(0);
  return push(std::move(C), needs(a), [a](Tape& t, const Node& self) {
    const auto& dC = t.grad_of(self);
    const auto& X = t.val(a.id);
    auto& dA = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < X.size(); ++i) {
      if (X[i] > T(0)) dA[i] += dC[i];
    }
  });
}

template <typename T>
Var Tape<T>::softmax(Var a) {
  const auto& A = value(a);
  if (A.cols() == 0) throw ShapeError("softmax: empty axis in " + A.shape().str());
  Tensor<T> Y(A.rows(), A.cols());
  for (std::size_t r = 0; r < A.rows(); ++r) {
    const auto x = A.row(r);
    auto y = Y.row(r);
    const T mx = *std::max_element(x.begin(), x.end());
    T total = 0;
    for (std::size_t c = 0; c < x.size(); ++c) total += (y[c] = std::exp(x[c] - mx));
    for (auto& v : y) v /= total;
  }
  return push(std::move(Y), needs(a), [a](Tape& t, const Node& self) {
    const auto& dY = t.grad_of(self);
    const auto& Yv = self.owned;
    auto& dA = t.grad_buffer(a.id);
    const std::size_t n = Yv.cols();
    for (std::size_t r = 0; r < Yv.rows(); ++r) {
      const T* y = Yv.raw() + r * n;
      const T* dy = dY.raw() + r * n;
      const T inner = kern<T>().dot(n, y, dy);
      T* dx = dA.raw() + r * n;
      for (std::size_t c = 0; c < n; ++c) dx[c] += y[c] * (dy[c] - inner);
    }
  });
}

template <typename T>
Var Tape<T>::log_softmax(Var a) {
  const auto& A = value(a);
  if (A.cols() == 0) throw ShapeError("log_softmax: empty axis in " + A.shape().str());
  Tensor<T> Y(A.rows(), A.cols());
  for (std::size_t r = 0; r < A.rows(); ++r) {
    const auto x = A.row(r);
    auto y = Y.row(r);
    const T mx = *std::max_element(x.begin(), x.end());
    T total = 0;
    for (T v : x) total += std::exp(v - mx);
    const T lse = mx + std::log(total);
    for (std::size_t c = 0; c < x.size(); ++c) y[c] = x[c] - lse;
  }
  return push(std::move(Y), needs(a), [a](Tape& t, const Node& self) {
    const auto& dY = t.grad_of(self);
    const auto& Yv = self.owned;
    auto& dA = t.grad_buffer(a.id);
    const std::size_t n = Yv.cols();
    for (std::size_t r = 0; r < Yv.rows(); ++r) {
      const T* y = Yv.raw() + r * n;
      const T* dy = dY.raw() + r * n;
      T total = 0;
      for (std::size_t c = 0; c < n; ++c) total += dy[c];
      T* dx = dA.raw() + r * n;
      for (std::size_t c = 0; c < n; ++c) dx[c] += dy[c] - std::exp(y[c]) * total;
    }
  });
}

template <typename T>
Var Tape<T>::layer_norm(Var x, Var gain, Var bias, T epsilon) {
  const auto& X = value(x);
  const auto& G = value(gain);
  const auto& B = value(bias);
  if (G.rows() != 1 || G.cols() != X.cols()) shape_error("layer_norm gain", X.shape(), G.shape());
  if (B.rows() != 1 || B.cols() != X.cols()) shape_error("layer_norm bias", X.shape(), B.shape());
  const std::size_t m = X.rows(), n = X.cols();
  Tensor<T> Y(m, n);
  std::vector<T> xhat(m * n);
  std::vector<T> rstd(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* xr = X.raw() + r * n;
    T mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += xr[c];
    mean /= T(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= T(n);
    rstd[r] = T(1) / std::sqrt(var + epsilon);
    for (std::size_t c = 0; c < n; ++c) {
      const T h = (xr[c] - mean) * rstd[r];
      xhat[r * n + c] = h;
      Y(r, c) = h * G[c] + B[c];
    }
  }
  return push(std::move(Y), needs(x) || needs(gain) || needs(bias),
              [x, gain, bias, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](
                  Tape& t, const Node& self) {
                const auto& dY = t.grad_of(self);
                const auto& G = t.val(gain.id);
                if (t.needs(gain)) {
                  auto& dG = t.grad_buffer(gain.id);
                  for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) dG[c] += dY(r, c) * xhat[r * n + c];
                }
                if (t.needs(bias)) {
                  auto& dB = t.grad_buffer(bias.id);
                  for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) dB[c] += dY(r, c);
                }
                if (t.needs(x)) {
                  auto& dX = t.grad_buffer(x.id);
                  std::vector<T> dh(n);
                  for (std::size_t r = 0; r < m; ++r) {
                    T mean_dh = 0, mean_dh_h = 0;
                    for (std::size_t c = 0; c < n; ++c) {
                      dh[c] = dY(r, c) * G[c];
                      mean_dh += dh[c];
                      mean_dh_h += dh[c] * xhat[r * n + c];
                    }
                    mean_dh /= T(n);
                    mean_dh_h /= T(n);
                    for (std::size_t c = 0; c < n; ++c) {
                      dX(r, c) += rstd[r] * (dh[c] - mean_dh - xhat[r * n + c] * mean_dh_h);
                    }
                  }
                }
              });
}

template <typename T>
Var Tape<T>::embedding(Var table, std::span<const std::uint32_t> ids) {
  const auto& E = value(table);
  const std::size_t d = E.cols();
  Tensor<T> Y(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= E.rows()) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table " +
                       E.shape().str());
    }
    std::copy_n(E.raw() + ids[i] * d, d, Y.raw() + i * d);
  }
  return push(std::move(Y), needs(table),
              [table, d, ids = std::vector<std::uint32_t>(ids.begin(), ids.end())](
                  Tape& t, const Node& self) {
                const auto& dY = t.grad_of(self);
                auto& dE = t.grad_buffer(table.id);
                for (std::size_t i = 0; i < ids.size(); ++i) {
                  kern<T>().axpy(d, T(1), dY.raw() + i * d, dE.raw() + ids[i] * d);
                }
              });
}

template <typename T>
Var Tape<T>::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = value(parts[0]).rows();
  std::size_t total = 0;
  bool any = false;
  for (Var p : parts) {
    if (value(p).rows() != m) shape_error("concat_cols", value(parts[0]).shape(), value(p).shape());
    total += value(p).cols();
    any = any || needs(p);
  }
  Tensor<T> Y(m, total);
  std::size_t offset = 0;
  for (Var p : parts) {
    const auto& P = value(p);
    for (std::size_t r = 0; r < m; ++r) {
      std::copy_n(P.raw() + r * P.cols(), P.cols(), Y.raw() + r * total + offset);
    }
    offset += P.cols();
  }
  return push(std::move(Y), any,
              [parts = std::vector<Var>(parts.begin(), parts.end()), m, total](Tape& t,
                                                                                const Node& self) {
                const auto& dY = t.grad_of(self);
                std::size_t offset = 0;
                for (Var p : parts) {
                  const std::size_t w = t.val(p.id).cols();
                  if (t.needs(p)) {
                    auto& dP = t.grad_buffer(p.id);
                    for (std::size_t r = 0; r < m; ++r) {
                      kern<T>().axpy(w, T(1), dY.raw() + r * total + offset, dP.raw() + r * w);
                    }
                  }
                  offset += w;
                }
              });
}

template <typename T>
Var Tape<T>::slice_cols(Var a, std::size_t start, std::size_t count) {
  const auto& A = value(a);
  if (start + count > A.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) +
                     ") outside " + A.shape().str());
  }
  const std::size_t m = A.rows(), n = A.cols();
  Tensor<T> Y(m, count);
  for (std::size_t r = 0; r < m; ++r) std::copy_n(A.raw() + r * n + start, count, Y.raw() + r * count);
  return push(std::move(Y), needs(a), [a, start, count, m, n](Tape& t, const Node& self) {
    const auto& dY = t.grad_of(self);
    auto& dA = t.grad_buffer(a.id);
    for (std::size_t r = 0; r < m; ++r) {
      kern<T>().axpy(count, T(1), dY.raw() + r * count, dA.raw() + r * n + start);
    }
  });
}

template <typename T>
Var Tape<T>::slice_rows(Var a, std::size_t start, std::size_t count) {
  const auto& A = value(a);
  if (start + count > A.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) +
                     ") outside " + A.shape().str());
  }
  const std::size_t n = A.cols();
  Tensor<T> Y(count, n);
  std::copy_n(A.raw() + start * n, count * n, Y.raw());
  return push(std::move(Y), needs(a), [a, start, n](Tape& t, const Node& self) {
    const auto& dY = t.grad_of(self);
    kern<T>().axpy(dY.size(), T(1), dY.raw(), t.grad_buffer(a.id).raw() + start * n);
  });
}

template <typename T>
Var Tape<T>::dropout(Var a, double rate) {
  if (rate < 0.0 || rate >= 1.0) throw ValidationError("dropout rate must lie in [0, 1)");
  if (!train_ || rate == 0.0) return a;
  const auto& A = value(a);
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(A.size());
  for (auto& m : mask) m = uniform_real(*rng_) < rate ? T(0) : keep_scale;
  Tensor<T> Y(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) Y[i] = A[i] * mask[i];
  return push(std::move(Y), needs(a), [a, mask = std::move(mask)](Tape& t, const Node& self) {
    const auto& dY = t.grad_of(self);
    auto& dA = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < dY.size(); ++i) dA[i] += dY[i] * mask[i];
  });
}

template <typename T>
Var Tape<T>::masked_fill(Var a, std::span<const std::uint8_t> mask, T fill) {
  const auto& A = value(a);
  if (mask.size() != A.size()) {
    throw ShapeError("masked_fill: mask of " + std::to_string(mask.size()) +
                     " entries for tensor " + A.shape().str());
  }
  Tensor<T> Y = A;
  for (std::size_t i = 0; i < Y.size(); ++i) {
    if (mask[i] != 0) Y[i] = fill;
  }
  return push(std::move(Y), needs(a),
              [a, mask = std::vector<std::uint8_t>(mask.begin(), mask.end())](Tape& t,
                                                                               const Node& self) {
                const auto& dY = t.grad_of(self);
                auto& dA = t.grad_buffer(a.id);
                for (std::size_t i = 0; i < dY.size(); ++i) {
                  if (mask[i] == 0) dA[i] += dY[i];
                }
              });
}

template <typename T>
Var Tape<T>::mean_rows(Var a) {
  const auto& A = value(a);
  if (A.rows() == 0) throw ShapeError("mean_rows: no rows in " + A.shape().str());
  const std::size_t m = A.rows(), n = A.cols();
  Tensor<T> Y(1, n);
  for (std::size_t r = 0; r < m; ++r) kern<T>().axpy(n, T(1), A.raw() + r * n, Y.raw());
  const T inv = T(1) / T(m);
  for (auto& y : Y.data()) y *= inv;
  return push(std::move(Y), needs(a), [a, m, n, inv](Tape& t, const Node& self) {
    const auto& dY = t.grad_of(self);
    auto& dA = t.grad_buffer(a.id);
    for (std::size_t r = 0; r < m; ++r) kern<T>().axpy(n, inv, dY.raw(), dA.raw() + r * n);
  });
}

template <typename T>
Var Tape<T>::sum(Var a) {
  const auto& A = value(a);
  T total = 0;
  for (T x : A.data()) total += x;
  return push(Tensor<T>::scalar(total), needs(a), [a](Tape& t, const Node& self) {
    const T g = t.grad_of(self)[0];
    for (auto& d : t.grad_buffer(a.id).data()) d += g;
  });
}

template <typename T>
Var Tape<T>::mean(Var a) {
  const auto& A = value(a);
  if (A.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / T(A.size()));
}

template <typename T>
Var Tape<T>::nll(Var logprobs, std::span<const std::uint32_t> targets) {
  const auto& L = value(logprobs);
  if (targets.size() != L.rows()) {
    throw ShapeError("nll: " + std::to_string(targets.size()) + " targets for log-probabilities " +
                     L.shape().str());
  }
  T total = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= L.cols()) {
      throw ShapeError("nll: target id " + std::to_string(targets[i]) + " outside " +
                       L.shape().str());
    }
    total -= L(i, targets[i]);
  }
  return push(Tensor<T>::scalar(total), needs(logprobs),
              [logprobs, targets = std::vector<std::uint32_t>(targets.begin(), targets.end())](
                  Tape& t, const Node& self) {
                const T g = t.grad_of(self)[0];
                auto& dL = t.grad_buffer(logprobs.id);
                for (std::size_t i = 0; i < targets.size(); ++i) dL(i, targets[i]) -= g;
              });
}

std::vector<std::uint8_t> causal_mask(std::size_t n) {
  std::vector<std::uint8_t> mask(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) mask[i * n + j] = 1;
  return mask;
}

GradCheckResult grad_check(const std::function<Var(Tape<double>&)>& loss, Parameter<double>& x,
                           double eps) {
  std::vector<std::size_t> all(x.value.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return grad_check(loss, x, all, eps);
}

GradCheckResult grad_check(const std::function<Var(Tape<double>&)>& loss, Parameter<double>& x,
                           std::span<const std::size_t> coordinates, double eps) {
  x.zero_grad();
  {
    Tape<double> tape;
    const Var out = loss(tape);
    if (!std::isfinite(tape.scalar(out))) throw NumericError("grad_check: loss is not finite");
    tape.backward(out);
  }
  const Tensor<double> analytic = x.grad;
  if (!analytic.all_finite()) throw NumericError("grad_check: analytic gradient is not finite");

  auto evaluate = [&] {
    Tape<double> tape(false, nullptr, false);
    const double v = tape.scalar(loss(tape));
    if (!std::isfinite(v)) throw NumericError("grad_check: perturbed loss is not finite");
    return v;
  };

  GradCheckResult result;
  result.coordinates = coordinates.size();
  for (std::size_t i : coordinates) {
    if (i >= x.value.size()) throw ValidationError("grad_check: coordinate out of range");
    const double saved = x.value[i];
    auto at = [&](double offset) {
      x.value[i] = saved + offset;
      return evaluate();
    };
    const double numeric =
        (at(-2 * eps) - 8.0 * at(-eps) + 8.0 * at(eps) - at(2 * eps)) / (12.0 * eps);
    x.value[i] = saved;
    const double a = analytic[i];
    const double scale = std::max(std::abs(a), std::abs(numeric));
    if (scale < kGradZeroTolerance) {
      ++result.zero_coordinates;
      continue;
    }
    const double err = std::abs(a - numeric) / scale;
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_coordinate = i;
    }
  }
  x.zero_grad();
  return result;
}

template class Tensor<float>;
template class Tensor<double>;
template struct Parameter<float>;
template struct Parameter<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace condigsum
