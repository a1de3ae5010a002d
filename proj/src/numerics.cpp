#include "qe/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "qe/error.hpp"

namespace qe {
namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();
constexpr int kMaxSweeps = 100;

bool is_symmetric(const Tensor2D& a, double rel_tol) {
  if (a.rows() != a.cols()) return false;
  const double scale = std::max(frobenius_norm(a), std::numeric_limits<double>::min());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j)
      if (std::abs(a(i, j) - a(j, i)) > rel_tol * scale) return false;
  return true;
}

// Index of the largest |v|, lowest index on ties.
std::size_t argmax_abs(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  return best;
}

struct ThinSvd {
  Tensor2D U;  // m x n, column j is the j-th left vector
  std::vector<double> S;
  Tensor2D V;  // n x n, column j is the j-th right vector
};

// One-sided Jacobi for m >= n.
ThinSvd jacobi_svd_tall(const Tensor2D& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  // Column-major working copies make the rotations contiguous.
  std::vector<std::vector<double>> w(n, std::vector<double>(m));
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) w[j][i] = a(i, j);
    v[j][j] = 1.0;
  }

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += w[p][i] * w[p][i];
          beta += w[q][i] * w[q][i];
          gamma += w[p][i] * w[q][i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= kEps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = w[p][i], wq = w[q][i];
          w[p][i] = c * wp - s * wq;
          w[q][i] = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v[p][i], vq = v[q][i];
          v[p][i] = c * vp - s * vq;
          v[q][i] = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = l2_norm(w[j]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  ThinSvd out{Tensor2D(m, n), std::vector<double>(n), Tensor2D(n, n)};
  std::vector<std::vector<double>> ucols;
  ucols.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    std::vector<double> u(m, 0.0);
    const bool zero = sigma[j] <= std::numeric_limits<double>::min();
    if (!zero) {
      for (std::size_t i = 0; i < m; ++i) u[i] = w[j][i] / sigma[j];
    } else {
      // Complete the basis: first canonical vector with a usable orthogonal remainder.
      for (std::size_t e = 0; e < m; ++e) {
        std::vector<double> cand(m, 0.0);
        cand[e] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
          for (const auto& prev : ucols) {
            double dot = 0.0;
            for (std::size_t i = 0; i < m; ++i) dot += prev[i] * cand[i];
            for (std::size_t i = 0; i < m; ++i) cand[i] -= dot * prev[i];
          }
        }
        const double nrm = l2_norm(cand);
        if (nrm > 1e-6) {
          for (double& x : cand) x /= nrm;
          u = std::move(cand);
          break;
        }
      }
    }
    std::vector<double> vv = v[j];
    if (u[argmax_abs(u)] < 0.0) {
      for (double& x : u) x = -x;
      for (double& x : vv) x = -x;
    }
    out.S[k] = zero ? 0.0 : sigma[j];
    for (std::size_t i = 0; i < m; ++i) out.U(i, k) = u[i];
    for (std::size_t i = 0; i < n; ++i) out.V(i, k) = vv[i];
    ucols.push_back(std::move(u));
  }
  return out;
}

}  // namespace

Tensor2D SvdResult::reconstruct() const {
  Tensor2D us = scale_columns(U, S);
  return matmul(us, Vt);
}

SvdResult svd_truncated(const Tensor2D& a, std::size_t rank) {
  const std::size_t kmax = std::min(a.rows(), a.cols());
  if (rank < 1 || rank > kmax) {
    throw InvalidInput("svd_truncated: rank " + std::to_string(rank) + " outside [1, " +
                       std::to_string(kmax) + "]");
  }
  if (!a.all_finite()) throw InvalidInput("svd_truncated: non-finite input");

  const bool wide = a.rows() < a.cols();
  ThinSvd thin = wide ? jacobi_svd_tall(transpose(a)) : jacobi_svd_tall(a);
  // For the wide case Aᵀ = U' S V'ᵀ, so A = V' S U'ᵀ.
  const Tensor2D& left = wide ? thin.V : thin.U;
  const Tensor2D& right = wide ? thin.U : thin.V;

  SvdResult out{Tensor2D(a.rows(), rank), std::vector<double>(thin.S.begin(), thin.S.begin() + rank),
                Tensor2D(rank, a.cols())};
  for (std::size_t k = 0; k < rank; ++k) {
    double sign = 1.0;
    if (wide) {
      std::vector<double> u = left.col(k);
      if (u[argmax_abs(u)] < 0.0) sign = -1.0;
    }
    for (std::size_t i = 0; i < a.rows(); ++i) out.U(i, k) = sign * left(i, k);
    for (std::size_t j = 0; j < a.cols(); ++j) out.Vt(k, j) = sign * right(j, k);
  }
  return out;
}

double default_damping(const Tensor2D& g) {
  if (g.rows() == 0) return 1e-8;
  double tr = 0.0;
  for (std::size_t i = 0; i < g.rows(); ++i) tr += g(i, i);
  const double mean = tr / static_cast<double>(g.rows());
  return mean > 0.0 ? 1e-8 * mean : 1e-8;
}

Tensor2D cholesky(const Tensor2D& g, double damping) {
  if (g.rows() != g.cols()) throw InvalidInput("cholesky: matrix is not square");
  if (!g.all_finite()) throw InvalidInput("cholesky: non-finite input");
  if (!is_symmetric(g, 1e-8)) throw InvalidInput("cholesky: matrix is not symmetric");
  const std::size_t n = g.rows();
  Tensor2D l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = g(j, j) + damping;
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0) || !std::isfinite(diag)) {
      throw SingularMatrix("cholesky: non-positive pivot at index " + std::to_string(j), j);
    }
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double acc = 0.5 * (g(i, j) + g(j, i));
      for (std::size_t k = 0; k < j; ++k) acc -= l(i, k) * l(j, k);
      l(i, j) = acc / ljj;
    }
  }
  return l;
}

Tensor2D lower_triangular_inverse(const Tensor2D& l) {
  if (l.rows() != l.cols()) throw InvalidInput("lower_triangular_inverse: not square");
  const std::size_t n = l.rows();
  Tensor2D inv(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    if (l(c, c) == 0.0) throw SingularMatrix("lower_triangular_inverse: zero diagonal", c);
    inv(c, c) = 1.0 / l(c, c);
    for (std::size_t i = c + 1; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t k = c; k < i; ++k) acc += l(i, k) * inv(k, c);
      inv(i, c) = -acc / l(i, i);
    }
  }
  return inv;
}

EighResult eigh(const Tensor2D& input) {
  if (input.rows() != input.cols()) throw InvalidInput("eigh: matrix is not square");
  if (!input.all_finite()) throw InvalidInput("eigh: non-finite input");
  if (!is_symmetric(input, 1e-10)) throw InvalidInput("eigh: matrix is not symmetric");
  const std::size_t n = input.rows();
  Tensor2D a = input;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (a(i, j) + a(j, i));
  Tensor2D v = Tensor2D::identity(n);
  const double scale = frobenius_norm(a);

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (std::sqrt(off) <= 1e-15 * scale || off == 0.0) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t =
            std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });
  EighResult out{std::vector<double>(n), Tensor2D(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.values[k] = a(j, j);
    std::vector<double> vec = v.col(j);
    const double sign = vec[argmax_abs(vec)] < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = sign * vec[i];
  }
  return out;
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

}  // namespace

KMeansResult kmeans(const Tensor2D& points, std::size_t n_clusters, std::uint64_t seed) {
  const std::size_t n = points.rows();
  const std::size_t dim = points.cols();
  if (n_clusters < 1) throw InvalidInput("kmeans: n_clusters must be >= 1");
  if (n < n_clusters) {
    throw InvalidInput("kmeans: " + std::to_string(n) + " points cannot form " +
                       std::to_string(n_clusters) + " clusters");
  }
  std::mt19937_64 rng(seed);

  // k-means++ seeding.
  Tensor2D centers(n_clusters, dim);
  std::vector<bool> chosen(n, false);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  auto take = [&](std::size_t c, std::size_t idx) {
    chosen[idx] = true;
    std::copy(points.row(idx).begin(), points.row(idx).end(), centers.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(points.row(i), centers.row(c)));
  };
  take(0, first);
  for (std::size_t c = 1; c < n_clusters; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : d2[i];
    std::size_t pick = n;
    if (total > 0.0) {
      double target = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (std::size_t i = 0; i < n; ++i) {
        if (chosen[i]) continue;
        target -= d2[i];
        if (target <= 0.0 && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
      if (pick == n) {
        for (std::size_t i = n; i-- > 0;) {
          if (!chosen[i] && d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        if (!chosen[i]) {
          pick = i;
          break;
        }
      }
    }
    take(c, pick);
  }

  KMeansResult res;
  res.labels.assign(n, 0);
  std::vector<std::size_t> prev(n, n_clusters);
  constexpr std::size_t kMaxIter = 300;
  for (std::size_t iter = 0; iter < kMaxIter; ++iter) {
    double objective = 0.0;
    std::vector<double> own(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = sq_dist(points.row(i), centers.row(0));
      for (std::size_t c = 1; c < n_clusters; ++c) {
        const double d = sq_dist(points.row(i), centers.row(c));
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      res.labels[i] = best;
      own[i] = best_d;
      objective += best_d;
    }

    // Empty clusters take the point farthest from its centroid among clusters with spare members.
    std::vector<std::size_t> counts(n_clusters, 0);
    for (std::size_t l : res.labels) ++counts[l];
    for (std::size_t c = 0; c < n_clusters; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[res.labels[i]] < 2) continue;
        if (far == n || own[i] > own[far]) far = i;
      }
      --counts[res.labels[far]];
      ++counts[c];
      res.labels[far] = c;
      objective -= own[far];
      own[far] = 0.0;
      std::copy(points.row(far).begin(), points.row(far).end(), centers.row(c).begin());
    }
    res.objective_history.push_back(objective);
    res.iterations = iter + 1;
    if (res.labels == prev) break;
    prev = res.labels;

    Tensor2D sums(n_clusters, dim);
    for (std::size_t i = 0; i < n; ++i) {
      auto s = sums.row(res.labels[i]);
      auto p = points.row(i);
      for (std::size_t d = 0; d < dim; ++d) s[d] += p[d];
    }
    for (std::size_t c = 0; c < n_clusters; ++c) {
      auto cr = centers.row(c);
      auto s = sums.row(c);
      for (std::size_t d = 0; d < dim; ++d) cr[d] = s[d] / static_cast<double>(counts[c]);
    }
  }
  return res;
}

}  // namespace qe
