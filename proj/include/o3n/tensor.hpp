#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace o3n {

// Error hierarchy. Callers that only care about "something went wrong" catch
// o3n::Error; the CLI maps the subclasses to exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct PreconditionError : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor of doubles with explicit shape metadata.
///
/// Used for every image, voxel volume, cost volume and parameter in the
/// library. Copies are deep; moves are cheap.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor buffer of " + std::to_string(data_.size()) +
                       " elements does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& buffer() { return data_; }
  const std::vector<double>& buffer() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  template <class... I>
  std::size_t offset(I... idx) const {
    const std::size_t ids[] = {static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t a = 0; a < sizeof...(I); ++a) off = off * shape_[a] + ids[a];
    return off;
  }
  template <class... I>
  double& at(I... idx) {
    return data_[offset(idx...)];
  }
  template <class... I>
  double at(I... idx) const {
    return data_[offset(idx...)];
  }

  Tensor reshaped(Shape s) const& {
    if (shape_size(s) != size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }
  Tensor reshaped(Shape s) && {
    if (shape_size(s) != size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), std::move(data_));
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

using FeatureField = Tensor;

/// General axis permutation; out.shape[i] = in.shape[axes[i]].
inline Tensor permute(const Tensor& in, std::span<const std::size_t> axes) {
  const std::size_t r = in.rank();
  if (axes.size() != r) throw ShapeError("permute: axis count mismatch");
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in.dim(axes[i]);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in.dim(i);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) strides[i] = in_strides[axes[i]];

  Tensor out(out_shape);
  std::vector<std::size_t> idx(r, 0);
  const double* src = in.data();
  double* dst = out.data();
  const std::size_t n = out.size();
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    dst[flat] = src[off];
    for (std::size_t a = r; a-- > 0;) {
      ++idx[a];
      off += strides[a];
      if (idx[a] < out_shape[a]) break;
      off -= strides[a] * out_shape[a];
      idx[a] = 0;
    }
  }
  return out;
}

inline Tensor permute(const Tensor& in, std::initializer_list<std::size_t> axes) {
  return permute(in, std::span<const std::size_t>(axes.begin(), axes.size()));
}

inline std::vector<std::size_t> inverse_axes(std::span<const std::size_t> axes) {
  std::vector<std::size_t> inv(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = i;
  return inv;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Round every entry through binary32. Parameters and stored datasets live on
// the float grid so that 32-bit files reproduce them exactly.
inline void round_to_float(Tensor& t) {
  for (double& v : t.buffer()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace o3n
