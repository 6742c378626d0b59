#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Sparse>

#include "hmmrec/common.hpp"

namespace hmmrec {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Binary row x item matrix stored as sorted, duplicate-free item lists.
struct IncidenceMatrix {
  std::size_t cols = 0;
  std::vector<ItemList> rows;

  IncidenceMatrix() = default;
  explicit IncidenceMatrix(std::size_t num_items) : cols(num_items) {}

  /// Appends a row with set semantics: repeated items count once.
  std::size_t add_row(std::span<const ItemId> items) {
    ItemList row(items.begin(), items.end());
    std::sort(row.begin(), row.end());
    row.erase(std::unique(row.begin(), row.end()), row.end());
    for (auto i : row) require(i < cols, "incidence row: item index out of range");
    rows.push_back(std::move(row));
    return rows.size() - 1;
  }

  std::size_t num_rows() const noexcept { return rows.size(); }

  std::size_t nnz() const noexcept {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.size();
    return n;
  }

  bool contains(std::size_t row, ItemId item) const {
    const auto& r = rows[row];
    return std::binary_search(r.begin(), r.end(), item);
  }

  /// Number of rows containing each item.
  std::vector<double> column_counts() const {
    std::vector<double> c(cols, 0.0);
    for (const auto& r : rows)
      for (auto i : r) c[i] += 1.0;
    return c;
  }

  SparseMatrix to_sparse() const {
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(nnz());
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (auto i : rows[r])
        trip.emplace_back(static_cast<int>(r), static_cast<int>(i), 1.0);
    SparseMatrix s(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
    s.setFromTriplets(trip.begin(), trip.end());
    s.makeCompressed();
    return s;
  }

  Matrix to_dense() const {
    Matrix d = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (auto i : rows[r]) d(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = 1.0;
    return d;
  }
};

}  // namespace hmmrec
