#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "condigsum/rng.hpp"

namespace condigsum {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  std::string str() const;
  bool operator==(const Shape&) const = default;
};

/// Row-major dense matrix. Scalars are 1x1 and vectors are 1xn.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, T fill = T(0));
  Tensor(std::size_t rows, std::size_t cols, std::vector<T> data);

  static Tensor scalar(T value) { return Tensor(1, 1, value); }

  std::size_t rows() const { return shape_.rows; }
  std::size_t cols() const { return shape_.cols; }
  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.cols + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.cols + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * shape_.cols, shape_.cols}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * shape_.cols, shape_.cols};
  }

  void fill(T value);
  bool all_finite() const;

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad();
};

/// Handle to a node recorded on a Tape.
struct Var {
  std::uint32_t id = 0;
};

/// Records differentiable operations in execution order; backward() replays
/// them in exact reverse order, accumulating into parameter gradients.
/// A tape is confined to one thread.
template <typename T>
class Tape {
 public:
  static constexpr T kMaskValue = T(-1e9);
  static constexpr T kLayerNormEpsilon = T(1e-5);

  /// `train` enables dropout (drawing from `rng`); `track_grad` = false records
  /// values only.
  explicit Tape(bool train = false, Rng* rng = nullptr, bool track_grad = true);

  bool training() const { return train_; }
  std::size_t size() const { return nodes_.size(); }

  Var parameter(Parameter<T>& p);
  Var constant(Tensor<T> value);

  const Tensor<T>& value(Var v) const;
  T scalar(Var v) const;
  /// nullptr when no gradient reached the node.
  const Tensor<T>* grad(Var v) const;

  /// Seeds every element of `root`'s gradient with `seed` and propagates.
  void backward(Var root, T seed = T(1));

  Var matmul(Var a, Var b);     // [m,k] x [k,n]
  Var matmul_nt(Var a, Var b);  // [m,k] x [n,k]^T
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T factor);
  Var add_scalar(Var a, T offset);
  Var add_row(Var a, Var bias);  // bias [1,n] broadcast over rows
  Var gelu(Var a);
  Var relu(Var a);
  Var softmax(Var a);      // over each row
  Var log_softmax(Var a);  // over each row
  Var layer_norm(Var x, Var gain, Var bias, T epsilon = kLayerNormEpsilon);
  Var embedding(Var table, std::span<const std::uint32_t> ids);
  Var concat_cols(std::span<const Var> parts);
  Var slice_cols(Var a, std::size_t start, std::size_t count);
  Var slice_rows(Var a, std::size_t start, std::size_t count);
  Var dropout(Var a, double rate);
  /// Entries with a nonzero mask byte are replaced by `fill`.
  Var masked_fill(Var a, std::span<const std::uint8_t> mask, T fill = kMaskValue);
  Var mean_rows(Var a);  // [m,n] -> [1,n]
  Var sum(Var a);        // -> [1,1]
  Var mean(Var a);       // -> [1,1]
  /// Sum over rows of -logprobs[i, targets[i]].
  Var nll(Var logprobs, std::span<const std::uint32_t> targets);

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad_owned;
    Tensor<T>* grad_ref = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
    std::function<void(Tape&, const Node&)> backward;
  };

  const Tensor<T>& val(std::uint32_t id) const;
  bool needs(Var v) const { return nodes_[v.id].requires_grad; }
  /// Zero-initialized gradient buffer for node `id`.
  Tensor<T>& grad_buffer(std::uint32_t id);
  const Tensor<T>& grad_of(const Node& n) const;
  Var push(Tensor<T> value, bool requires_grad, std::function<void(Tape&, const Node&)> backward);

  std::deque<Node> nodes_;
  bool train_;
  bool track_grad_;
  Rng* rng_;
};

/// Lower-triangular attention mask: entry (i, j) is masked when j > i.
std::vector<std::uint8_t> causal_mask(std::size_t n);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
  std::size_t coordinates = 0;
  /// Coordinates whose analytic and numeric gradients are both ~0.
  std::size_t zero_coordinates = 0;
};

/// Compares the tape gradient of a scalar loss with respect to `x` against a
/// five-point central difference with step `eps`, coordinate by coordinate.
/// Relative error is |a-n| / max(|a|, |n|); coordinates where both are below
/// kGradZeroTolerance are structurally zero and count as agreeing. The loss
/// must be deterministic and must reach `x` through tape.parameter(x).
inline constexpr double kGradZeroTolerance = 1e-10;

GradCheckResult grad_check(const std::function<Var(Tape<double>&)>& loss, Parameter<double>& x,
                           double eps = 1e-3);
/// Same, restricted to the listed coordinates of `x`.
GradCheckResult grad_check(const std::function<Var(Tape<double>&)>& loss, Parameter<double>& x,
                           std::span<const std::size_t> coordinates, double eps = 1e-3);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template struct Parameter<float>;
extern template struct Parameter<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace condigsum
