#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qe/calib.hpp"
#include "qe/quantizer.hpp"
#include "qe/tensor.hpp"

namespace qe {

/// Factored correction a·b with a: d_out x r, b: r x d_in.
struct LowRankAdapter {
  Tensor2D a;
  Tensor2D b;

  std::size_t rank() const noexcept { return a.cols(); }
  Tensor2D product() const { return matmul(a, b); }
  /// a·(b·x), the factored side path.
  std::vector<double> apply(std::span<const double> x) const;
  friend bool operator==(const LowRankAdapter&, const LowRankAdapter&) = default;
};

struct SharedExpert {
  LowRankAdapter adapter;
  /// Activation divisor per input channel (ω); ≥ 1 on C_s and exactly 1 elsewhere.
  std::vector<double> smooth_scale;
  friend bool operator==(const SharedExpert&, const SharedExpert&) = default;
};

struct RoutedExperts {
  std::vector<LowRankAdapter> adapters;
  std::vector<ChannelSet> clusters;
  friend bool operator==(const RoutedExperts&, const RoutedExperts&) = default;
};

struct Router {
  Tensor2D weights;  // d_in x N_r, nonnegative when freshly built
  std::size_t n_experts() const noexcept { return weights.cols(); }
  friend bool operator==(const Router&, const Router&) = default;
};

struct PackConfig {
  std::size_t k = 32;
  std::size_t n_routed = 8;
  std::size_t rank_shared = 32;
  std::size_t rank_routed = 32;
  std::uint64_t seed = 0;
  QuantScheme scheme;
  friend bool operator==(const PackConfig&, const PackConfig&) = default;
};

/// Everything the compensated forward pass needs for one linear layer.
struct ExpertPack {
  QuantizedWeight quantized;
  SharedExpert shared;
  RoutedExperts routed;
  Router router;
  ChannelPartition partition;
  PackConfig config;

  std::size_t d_in() const noexcept { return quantized.cols; }
  std::size_t d_out() const noexcept { return quantized.rows; }
  bool has_routed() const noexcept { return !routed.adapters.empty(); }
  friend bool operator==(const ExpertPack&, const ExpertPack&) = default;
};

struct SharedBuild {
  QuantizedWeight quantized;
  SharedExpert shared;
  Tensor2D smoothed_weight;  // W_f with C_s columns multiplied by ω
  Tensor2D quant_error;      // E_q against the smoothed weight
  Tensor2D whitening;        // lower Cholesky factor S_w
  Tensor2D residual;         // E_S = E_q − L_SA·L_SB
};

/// Smoothing scales: 1 everywhere, x̄_c / min_{C_s} x̄ on C_s (x̄ = mean |X| per channel).
std::vector<double> smoothing_scales(const Tensor2D& x, const ChannelSet& channels);

/// Shared expert: smooth C_s, quantize the rest, and reconstruct the quantization
/// error with an activation-whitened truncated SVD of rank r_s.
SharedBuild build_shared_expert(const Tensor2D& w_f, const Tensor2D& x, const ChannelSet& c_s,
                                std::size_t rank_shared, const QuantScheme& scheme);

/// Spectral clustering of C_r from its NPMI similarity. Negative similarities are
/// dropped from the affinity; embeddings are eigenvectors 2..N_r+1 of the
/// normalized Laplacian.
std::vector<std::size_t> spectral_cluster(const Tensor2D& similarity, std::size_t n_routed,
                                          std::uint64_t seed);

struct RoutedBuild {
  RoutedExperts experts;
  Router router;
  std::vector<std::vector<double>> omegas;  // per expert, after normalization
  std::vector<std::string> warnings;
};

/// Per-cluster weighted SVD of the shared residual plus router columns.
RoutedBuild build_routed_experts(const Tensor2D& residual, const Tensor2D& x, const ChannelSet& c_r,
                                 const std::vector<std::size_t>& labels, std::size_t rank_routed);

/// Dimension-checked pack. Throws InvalidInput naming the offending member.
ExpertPack assemble_pack(QuantizedWeight quantized, SharedExpert shared, RoutedExperts routed,
                         Router router, ChannelPartition partition, PackConfig config);

void validate_pack(const ExpertPack& pack);

}  // namespace qe
