#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "integrity/error.hpp"

namespace integrity {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A batch of n feature vectors of a fixed dimension, one per row.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;

  explicit FeatureMatrix(std::size_t dim) : data_(0, static_cast<Eigen::Index>(dim)) {
    if (dim == 0) throw Error(ErrorCode::InvalidArgument, "feature dimension must be positive");
  }

  explicit FeatureMatrix(RowMatrix data) : data_(std::move(data)) {
    if (data_.cols() == 0) throw Error(ErrorCode::InvalidArgument, "feature dimension must be positive");
    if (!data_.allFinite()) throw Error(ErrorCode::NonFiniteInput, "feature matrix holds NaN or Inf");
  }

  static FeatureMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw Error(ErrorCode::InvalidArgument, "cannot infer dimension from zero rows");
    RowMatrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows.front().size())
        throw Error(ErrorCode::DimensionMismatch, "row " + std::to_string(i) + " has a different length");
      for (std::size_t j = 0; j < rows[i].size(); ++j)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
    return FeatureMatrix(std::move(m));
  }

  std::size_t rows() const { return static_cast<std::size_t>(data_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(data_.cols()); }
  bool empty() const { return data_.rows() == 0; }

  const RowMatrix& data() const { return data_; }

  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * dim(), dim()};
  }

  void append(const FeatureMatrix& other) {
    if (data_.cols() == 0 && data_.rows() == 0) {
      data_ = other.data_;
      return;
    }
    if (other.dim() != dim())
      throw Error(ErrorCode::DimensionMismatch,
                  "appending dim " + std::to_string(other.dim()) + " to dim " + std::to_string(dim()));
    const auto old = data_.rows();
    data_.conservativeResize(old + other.data_.rows(), Eigen::NoChange);
    data_.bottomRows(other.data_.rows()) = other.data_;
  }

  /// Rows at the given (ascending or arbitrary) indices, in that order.
  FeatureMatrix select_rows(std::span<const std::size_t> indices) const {
    RowMatrix out(static_cast<Eigen::Index>(indices.size()), data_.cols());
    for (std::size_t i = 0; i < indices.size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = data_.row(static_cast<Eigen::Index>(indices[i]));
    FeatureMatrix m;
    m.data_ = std::move(out);
    return m;
  }

  FeatureMatrix slice_rows(std::size_t begin, std::size_t count) const {
    FeatureMatrix m;
    m.data_ = data_.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
    return m;
  }

  bool operator==(const FeatureMatrix& other) const {
    return data_.rows() == other.data_.rows() && data_.cols() == other.data_.cols() &&
           (data_.array() == other.data_.array()).all();
  }

 private:
  RowMatrix data_;
};

}  // namespace integrity
