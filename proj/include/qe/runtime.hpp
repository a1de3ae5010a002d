#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qe/experts.hpp"
#include "qe/tensor.hpp"

namespace qe {

struct RouteResult {
  std::vector<double> scores;  // (Rᵀ|x|)_i
  std::size_t expert = 0;      // argmin, lowest index on ties
};

RouteResult route(const Router& router, std::span<const double> x);

struct ForwardTrace {
  std::vector<std::size_t> chosen_expert;
  Tensor2D scores;  // tokens x N_r
  Tensor2D output;  // tokens x d_out
};

/// Smoothing division followed by per-token activation fake quantization.
std::vector<double> prepare_activation(const ExpertPack& pack, std::span<const double> x);
Tensor2D prepare_activations(const ExpertPack& pack, const Tensor2D& x);

/// y = W_q·x̂ + L_SA(L_SB·x̂) + L_RA^{i*}(L_RB^{i*}·x̂), i* routed on x̂.
ForwardTrace forward_compensated(const ExpertPack& pack, const Tensor2D& x);

enum class Variant { fp, rtn, shared_only, qe_random_route, qe_oracle_route, qe };

std::string to_string(Variant v);
/// Accepts the canonical names plus the short forms "shared", "random", "oracle".
Variant variant_from_string(const std::string& s);
bool variant_needs_routed(Variant v);

struct VariantOutput {
  Tensor2D output;                     // tokens x d_out
  std::vector<std::size_t> chosen;     // routed variants only
};

/// Reference and ablation forward paths. `w_f` is the original (unsmoothed)
/// full-precision weight. The oracle route picks, per token, the expert whose
/// compensated output is closest to W_f·x in L2.
VariantOutput forward_variant(const ExpertPack& pack, const Tensor2D& w_f, const Tensor2D& x,
                              Variant variant, std::uint64_t seed = 0);

struct LayerMetrics {
  double mean_l2 = 0.0;
  double max_l2 = 0.0;
  double rel_fro = 0.0;
};

LayerMetrics layer_metrics(const Tensor2D& y_ref, const Tensor2D& y_test);

}  // namespace qe
