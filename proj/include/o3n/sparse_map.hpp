#pragma once

#include <cstddef>
#include <vector>

#include "o3n/tensor.hpp"

namespace o3n {

/// Fixed sparse linear map between two flattened index spaces, applied
/// independently to every channel. Rows are outputs.
///
/// Every resampling step in the library (line-of-sight lifting, cubic <->
/// cylindrical resampling, scan reordering) is one of these, so a single
/// adjoint (scatter-add of the transpose) serves all of them.
struct SparseMap {
  std::size_t in_size = 0;
  std::size_t out_size = 0;
  std::vector<std::size_t> row_ptr{0};
  std::vector<std::size_t> cols;
  std::vector<double> weights;

  SparseMap() = default;
  SparseMap(std::size_t in, std::size_t out) : in_size(in), out_size(out) { row_ptr.reserve(out + 1); }

  void push(std::size_t col, double w) {
    cols.push_back(col);
    weights.push_back(w);
  }
  void end_row() { row_ptr.push_back(cols.size()); }

  bool complete() const { return row_ptr.size() == out_size + 1; }

  /// x: [C, in_size] (any leading shape whose trailing extent product is in_size).
  Tensor apply(const Tensor& x) const {
    const std::size_t channels = channel_count(x);
    Tensor y({channels, out_size});
    for (std::size_t c = 0; c < channels; ++c) {
      const double* src = x.data() + c * in_size;
      double* dst = y.data() + c * out_size;
      for (std::size_t r = 0; r < out_size; ++r) {
        double acc = 0.0;
        for (std::size_t e = row_ptr[r]; e < row_ptr[r + 1]; ++e) acc += weights[e] * src[cols[e]];
        dst[r] = acc;
      }
    }
    return y;
  }

  /// Adds Mᵀ·dy into dx (scatter-add), both channel-major.
  void accumulate_transpose(const double* dy, double* dx, std::size_t channels) const {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* g = dy + c * out_size;
      double* d = dx + c * in_size;
      for (std::size_t r = 0; r < out_size; ++r) {
        const double gr = g[r];
        if (gr == 0.0) continue;
        for (std::size_t e = row_ptr[r]; e < row_ptr[r + 1]; ++e) d[cols[e]] += weights[e] * gr;
      }
    }
  }

  std::size_t channel_count(const Tensor& x) const {
    if (!complete()) throw ShapeError("sparse map is not fully built");
    if (in_size == 0 || x.size() % in_size != 0)
      throw ShapeError("sparse map input " + shape_str(x.shape()) + " not divisible by " +
                       std::to_string(in_size));
    return x.size() / in_size;
  }

  static SparseMap permutation(std::span<const std::size_t> source_of_row, std::size_t in) {
    SparseMap m(in, source_of_row.size());
    for (std::size_t s : source_of_row) {
      m.push(s, 1.0);
      m.end_row();
    }
    return m;
  }
};

}  // namespace o3n
