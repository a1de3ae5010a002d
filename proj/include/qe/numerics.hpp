#pragma once

#include <cstdint>
#include <vector>

#include "qe/tensor.hpp"

namespace qe {

struct SvdResult {
  Tensor2D U;              // m x r, orthonormal columns
  std::vector<double> S;   // r values, descending, >= 0
  Tensor2D Vt;             // r x n, orthonormal rows

  Tensor2D reconstruct() const;
};

/// Thin SVD of `a` truncated to the leading `rank` triplets.
///
/// Computed with one-sided Jacobi rotations on the narrower side. Each
/// singular pair is sign-normalized so that the largest-magnitude entry of the
/// left vector is positive, which makes the result a deterministic function of
/// the input. Left vectors for exactly-zero singular values are completed by
/// Gram-Schmidt over the canonical basis.
SvdResult svd_truncated(const Tensor2D& a, std::size_t rank);

/// Lower-triangular L with L·Lᵀ = g + damping·I.
/// Throws SingularMatrix naming the pivot when a non-positive pivot is met.
Tensor2D cholesky(const Tensor2D& g, double damping);

/// 1e-8 times the mean diagonal of g (falls back to 1e-8 for a zero diagonal).
double default_damping(const Tensor2D& g);

/// Inverse of a lower-triangular matrix by forward substitution.
Tensor2D lower_triangular_inverse(const Tensor2D& l);

struct EighResult {
  std::vector<double> values;  // ascending
  Tensor2D vectors;            // column i pairs with values[i]
};

/// Symmetric eigendecomposition via cyclic Jacobi.
EighResult eigh(const Tensor2D& a);

struct KMeansResult {
  std::vector<std::size_t> labels;
  /// Objective (sum of squared distances) after every assignment step.
  std::vector<double> objective_history;
  std::size_t iterations = 0;
};

/// k-means++ seeding followed by Lloyd iterations (at most 300).
/// Every cluster in the result is non-empty.
KMeansResult kmeans(const Tensor2D& points, std::size_t n_clusters, std::uint64_t seed);

}  // namespace qe
