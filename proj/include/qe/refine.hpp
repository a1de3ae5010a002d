#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qe/experts.hpp"
#include "qe/tensor.hpp"

namespace qe {

struct RefineConfig {
  double tau = 0.5;
  double alpha = 1.0;
  double beta = 0.05;
  double lr = 1e-4;
  std::size_t epochs = 16;
  std::size_t iters_per_epoch = 100;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  /// Divide the centered router logits by their standard deviation as well.
  bool symmetric_standardize = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

/// Tokens prepared for refinement: x̂ (smoothed, quantized), the frozen part of
/// the output (W_q·x̂ + shared path) and the full-precision target.
struct RefineBatch {
  Tensor2D xhat;
  Tensor2D frozen;
  Tensor2D target;
};

/// `x` holds raw activations; targets are W_f·x.
RefineBatch make_refine_batch(const ExpertPack& pack, const Tensor2D& w_f, const Tensor2D& x);
/// From already prepared activations and targets.
RefineBatch make_refine_batch_prepared(const ExpertPack& pack, Tensor2D xhat, Tensor2D target);
RefineBatch select_tokens(const RefineBatch& all, const std::vector<std::size_t>& tokens);

struct RefineLosses {
  double total = 0.0;
  double reg = 0.0;       // batch mean of min_i d_i
  double cls = 0.0;       // batch mean of τ²·KL(P‖Q)
  Tensor2D distances;     // tokens x N_r, L1 distances d_i
  Tensor2D logits;        // tokens x N_r, l = Rᵀ|x̂|
};

RefineLosses refine_losses(const ExpertPack& pack, const RefineBatch& batch, const RefineConfig& cfg);

/// Trainable parameters in a fixed order: for each expert L_RA then L_RB, then the router.
std::vector<double> gather_trainable(const ExpertPack& pack);
void scatter_trainable(ExpertPack& pack, std::span<const double> params);

struct RefineGradient {
  RefineLosses losses;
  std::vector<double> grad;  // same layout as gather_trainable
};

RefineGradient refine_gradient(const ExpertPack& pack, const RefineBatch& batch, const RefineConfig& cfg);

struct HistoryRow {
  std::size_t iter = 0;
  double lr = 0.0;
  double total = 0.0;
  double reg = 0.0;
  double cls = 0.0;
};

struct RefineResult {
  ExpertPack pack;
  std::vector<HistoryRow> history;
  double initial_total = 0.0;  // over the whole calibration set
  double final_total = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps);

/// Layer-wise refinement of routed adapters and router with bias-corrected
/// Adam (no weight decay) under a cosine schedule. Router entries are kept
/// nonnegative after every step. On a non-finite loss the last finite pack is
/// returned with `aborted` set.
RefineResult refine_layer(const ExpertPack& pack, const Tensor2D& x_calib, const Tensor2D& w_f,
                          const RefineConfig& cfg);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t resampled = 0;
};

/// Fourth-order central differences (steps ±ε, ±2ε) on selected coordinates.
/// `kink_free(p, q)` receives the ±2ε endpoints and reports whether the
/// segment between them crosses no nondifferentiable point; coordinates
/// failing it are skipped.
GradCheckResult finite_difference_check(
    const std::function<double(std::span<const double>)>& loss,
    std::span<const double> params, std::span<const double> analytic,
    const std::vector<std::size_t>& coords, double epsilon,
    const std::function<bool(std::span<const double>, std::span<const double>)>& kink_free = {});

/// Finite-difference check of refine_gradient on `n_coords` random trainable
/// coordinates. Coordinates whose ±2ε perturbation flips an expert argmin or
/// the sign of any L1 residual are resampled.
GradCheckResult grad_check(const ExpertPack& pack, const RefineBatch& batch, const RefineConfig& cfg,
                           double epsilon, std::size_t n_coords, std::uint64_t seed);

}  // namespace qe
