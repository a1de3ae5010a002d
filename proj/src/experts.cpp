#include "qe/experts.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "qe/error.hpp"
#include "qe/numerics.hpp"

namespace qe {

std::vector<double> LowRankAdapter::apply(std::span<const double> x) const {
  if (a.cols() == 0) return std::vector<double>(a.rows(), 0.0);
  const std::vector<double> h = matvec(b, x);
  return matvec(a, h);
}

std::vector<double> smoothing_scales(const Tensor2D& x, const ChannelSet& channels) {
  std::vector<double> omega(x.cols(), 1.0);
  if (channels.empty()) return omega;
  const std::vector<double> mean_abs = column_abs_mean(x);
  double lo = std::numeric_limits<double>::infinity();
  for (std::size_t c : channels) lo = std::min(lo, mean_abs[c]);
  if (!(lo > 0.0)) return omega;
  for (std::size_t c : channels) omega[c] = mean_abs[c] / lo;
  return omega;
}

SharedBuild build_shared_expert(const Tensor2D& w_f, const Tensor2D& x, const ChannelSet& c_s,
                                std::size_t rank_shared, const QuantScheme& scheme) {
  const std::size_t d_in = w_f.cols();
  if (x.cols() != d_in) throw InvalidInput("build_shared_expert: activation width != d_in");
  if (c_s.empty()) throw InvalidInput("build_shared_expert: C_s is empty");
  if (c_s.size() > d_in) throw InvalidInput("build_shared_expert: |C_s| exceeds d_in");
  for (std::size_t c : c_s)
    if (c >= d_in) throw InvalidInput("build_shared_expert: C_s channel out of range");
  if (rank_shared < 1) throw InvalidInput("build_shared_expert: r_s must be >= 1");

  SharedBuild out;
  out.shared.smooth_scale = smoothing_scales(x, c_s);
  const auto& omega = out.shared.smooth_scale;
  out.smoothed_weight = scale_columns(w_f, omega);
  out.quantized = quantize_weight(out.smoothed_weight, scheme, c_s);
  out.quant_error = quant_error(out.smoothed_weight, out.quantized);

  // Whitening over the smoothed activations: G = (X/ω)ᵀ(X/ω) / T.
  std::vector<double> inv_omega(d_in);
  for (std::size_t c = 0; c < d_in; ++c) inv_omega[c] = 1.0 / omega[c];
  const Tensor2D xs = scale_columns(x, inv_omega);
  Tensor2D gram = matmul_tn(xs, xs);
  if (x.rows() > 0) gram = (1.0 / static_cast<double>(x.rows())) * gram;
  try {
    out.whitening = cholesky(gram, default_damping(gram));
  } catch (const SingularMatrix& e) {
    throw SingularMatrix(std::string("singular calibration activations: ") + e.what(), e.pivot());
  }
  const Tensor2D whitening_inv = lower_triangular_inverse(out.whitening);

  const std::size_t rank = std::min({rank_shared, w_f.rows(), d_in});
  const SvdResult svd = svd_truncated(matmul(out.quant_error, out.whitening), rank);
  out.shared.adapter.a = scale_columns(svd.U, svd.S);
  out.shared.adapter.b = matmul(svd.Vt, whitening_inv);
  out.residual = out.quant_error - out.shared.adapter.product();
  return out;
}

std::vector<std::size_t> spectral_cluster(const Tensor2D& similarity, std::size_t n_routed,
                                          std::uint64_t seed) {
  const std::size_t n = similarity.rows();
  if (similarity.cols() != n) throw InvalidInput("spectral_cluster: similarity is not square");
  if (n_routed < 1) throw InvalidInput("spectral_cluster: N_r must be >= 1");
  if (n < n_routed) {
    throw InvalidInput("spectral_cluster: |C_r|=" + std::to_string(n) + " < N_r=" +
                       std::to_string(n_routed));
  }
  std::vector<std::size_t> labels(n);
  if (n == n_routed) {
    for (std::size_t i = 0; i < n; ++i) labels[i] = i;
    return labels;
  }

  Tensor2D affinity(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      affinity(i, j) = i == j ? 1.0 : std::clamp(0.5 * (similarity(i, j) + similarity(j, i)), 0.0, 1.0);
  std::vector<double> inv_sqrt_deg(n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (double v : affinity.row(i)) deg += v;
    inv_sqrt_deg[i] = 1.0 / std::sqrt(deg > 0.0 ? deg : 1.0);
  }
  Tensor2D laplacian(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      laplacian(i, j) = (i == j ? 1.0 : 0.0) - inv_sqrt_deg[i] * affinity(i, j) * inv_sqrt_deg[j];

  const EighResult eig = eigh(laplacian);
  // Rows of the leading N_r eigenvectors, projected onto the unit sphere.
  Tensor2D embedding(n, n_routed);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t e = 0; e < n_routed; ++e) norm += eig.vectors(i, e) * eig.vectors(i, e);
    norm = std::sqrt(norm);
    for (std::size_t e = 0; e < n_routed; ++e) embedding(i, e) = norm > 0.0 ? eig.vectors(i, e) / norm : 0.0;
  }
  return kmeans(embedding, n_routed, seed).labels;
}

RoutedBuild build_routed_experts(const Tensor2D& residual, const Tensor2D& x, const ChannelSet& c_r,
                                 const std::vector<std::size_t>& labels, std::size_t rank_routed) {
  const std::size_t d_in = residual.cols();
  const std::size_t d_out = residual.rows();
  if (x.cols() != d_in) throw InvalidInput("build_routed_experts: activation width != d_in");
  if (labels.size() != c_r.size()) throw InvalidInput("build_routed_experts: labels do not cover C_r");
  if (c_r.empty()) throw InvalidInput("build_routed_experts: C_r is empty");
  if (rank_routed < 1) throw InvalidInput("build_routed_experts: r_r must be >= 1");

  const std::size_t n_experts = *std::max_element(labels.begin(), labels.end()) + 1;
  RoutedBuild out;
  out.experts.clusters.assign(n_experts, {});
  for (std::size_t i = 0; i < c_r.size(); ++i) {
    if (c_r[i] >= d_in) throw InvalidInput("build_routed_experts: C_r channel out of range");
    out.experts.clusters[labels[i]].push_back(c_r[i]);
  }
  for (std::size_t e = 0; e < n_experts; ++e) {
    if (out.experts.clusters[e].empty()) {
      throw InvalidInput("build_routed_experts: cluster " + std::to_string(e) + " is empty");
    }
  }

  const std::vector<double> mean_abs = column_abs_mean(x);
  const std::size_t rank = std::min({rank_routed, d_out, d_in});
  out.router.weights = Tensor2D(d_in, n_experts);
  for (std::size_t e = 0; e < n_experts; ++e) {
    const ChannelSet& gamma = out.experts.clusters[e];
    std::vector<double> omega(d_in, 1.0);
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t c : gamma) lo = std::min(lo, mean_abs[c]);
    if (lo > 0.0) {
      for (std::size_t c : gamma) omega[c] = mean_abs[c] / lo;
      const auto [mn, mx] = std::minmax_element(omega.begin(), omega.end());
      const double norm = std::sqrt(*mn * *mx);
      for (double& w : omega) w /= norm;
    } else {
      out.warnings.push_back("routed expert " + std::to_string(e) +
                             ": cluster has zero mean activation, using uniform weights");
    }

    const SvdResult svd = svd_truncated(scale_columns(residual, omega), rank);
    std::vector<double> inv_omega(d_in);
    for (std::size_t c = 0; c < d_in; ++c) inv_omega[c] = 1.0 / omega[c];
    LowRankAdapter adapter{scale_columns(svd.U, svd.S), scale_columns(svd.Vt, inv_omega)};

    const Tensor2D remaining = residual - adapter.product();
    const std::vector<double> col = column_abs_mean(remaining);
    for (std::size_t c = 0; c < d_in; ++c) out.router.weights(c, e) = col[c];

    out.experts.adapters.push_back(std::move(adapter));
    out.omegas.push_back(std::move(omega));
  }
  return out;
}

namespace {

void expect_shape(const Tensor2D& t, std::size_t rows, std::size_t cols, const std::string& name) {
  if (t.rows() != rows || t.cols() != cols) {
    throw InvalidInput("pack member " + name + " has shape " + std::to_string(t.rows()) + "x" +
                       std::to_string(t.cols()) + ", expected " + std::to_string(rows) + "x" +
                       std::to_string(cols));
  }
}

}  // namespace

void validate_pack(const ExpertPack& pack) {
  const auto& q = pack.quantized;
  const std::size_t d_out = q.rows;
  const std::size_t d_in = q.cols;
  if (q.codes.size() != d_out * d_in) throw InvalidInput("pack member quantized.codes has wrong length");
  const std::size_t groups = q.groups_per_row();
  if (q.scales.size() != d_out * groups) throw InvalidInput("pack member quantized.scales has wrong length");
  if (q.scheme.weight_mode == WeightMode::group_asymmetric && q.zero_points.size() != d_out * groups) {
    throw InvalidInput("pack member quantized.zero_points has wrong length");
  }
  const std::size_t rs = pack.shared.adapter.a.cols();
  expect_shape(pack.shared.adapter.a, d_out, rs, "shared.L_SA");
  expect_shape(pack.shared.adapter.b, rs, d_in, "shared.L_SB");
  if (pack.shared.smooth_scale.size() != d_in) {
    throw InvalidInput("pack member shared.smooth_scale has length " +
                       std::to_string(pack.shared.smooth_scale.size()) + ", expected " +
                       std::to_string(d_in));
  }
  for (double s : pack.shared.smooth_scale)
    if (!(s > 0.0)) throw InvalidInput("pack member shared.smooth_scale has a non-positive entry");

  const std::size_t nr = pack.routed.adapters.size();
  for (std::size_t i = 0; i < nr; ++i) {
    const auto& ad = pack.routed.adapters[i];
    const std::size_t r = ad.a.cols();
    expect_shape(ad.a, d_out, r, "routed.L_RA[" + std::to_string(i) + "]");
    expect_shape(ad.b, r, d_in, "routed.L_RB[" + std::to_string(i) + "]");
  }
  if (!pack.routed.clusters.empty() && pack.routed.clusters.size() != nr) {
    throw InvalidInput("pack member routed.clusters has " + std::to_string(pack.routed.clusters.size()) +
                       " entries for " + std::to_string(nr) + " experts");
  }
  if (nr > 0 || !pack.router.weights.empty()) expect_shape(pack.router.weights, d_in, nr, "router");
}

ExpertPack assemble_pack(QuantizedWeight quantized, SharedExpert shared, RoutedExperts routed,
                         Router router, ChannelPartition partition, PackConfig config) {
  ExpertPack pack{std::move(quantized), std::move(shared), std::move(routed),
                  std::move(router),    std::move(partition), std::move(config)};
  validate_pack(pack);
  return pack;
}

}  // namespace qe
