#include "qe/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "qe/error.hpp"

namespace qe {

RouteResult route(const Router& router, std::span<const double> x) {
  const Tensor2D& r = router.weights;
  if (r.rows() != x.size()) throw InvalidInput("route: router rows != activation width");
  RouteResult out{std::vector<double>(r.cols(), 0.0), 0};
  for (std::size_t c = 0; c < r.rows(); ++c) {
    const double ax = std::abs(x[c]);
    if (ax == 0.0) continue;
    auto rrow = r.row(c);
    for (std::size_t i = 0; i < r.cols(); ++i) out.scores[i] += rrow[i] * ax;
  }
  for (std::size_t i = 1; i < out.scores.size(); ++i)
    if (out.scores[i] < out.scores[out.expert]) out.expert = i;
  return out;
}

std::vector<double> prepare_activation(const ExpertPack& pack, std::span<const double> x) {
  if (x.size() != pack.d_in()) {
    throw InvalidInput("forward: activation width " + std::to_string(x.size()) +
                       " does not match pack d_in " + std::to_string(pack.d_in()));
  }
  std::vector<double> xs(x.size());
  for (std::size_t c = 0; c < x.size(); ++c) xs[c] = x[c] / pack.shared.smooth_scale[c];
  return quantize_activation_row(xs, pack.config.scheme.act_bits);
}

Tensor2D prepare_activations(const ExpertPack& pack, const Tensor2D& x) {
  Tensor2D out(x.rows(), pack.d_in());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto xh = prepare_activation(pack, x.row(t));
    std::copy(xh.begin(), xh.end(), out.row(t).begin());
  }
  return out;
}

namespace {

void add_into(std::span<double> acc, const std::vector<double>& v) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
}

// W_q·x̂ + shared path for every token.
Tensor2D base_output(const ExpertPack& pack, const Tensor2D& w_q, const Tensor2D& xhat) {
  Tensor2D y = matmul_nt(xhat, w_q);
  for (std::size_t t = 0; t < xhat.rows(); ++t) add_into(y.row(t), pack.shared.adapter.apply(xhat.row(t)));
  return y;
}

}  // namespace

ForwardTrace forward_compensated(const ExpertPack& pack, const Tensor2D& x) {
  if (x.cols() != pack.d_in()) {
    throw InvalidInput("forward_compensated: activation width " + std::to_string(x.cols()) +
                       " does not match pack d_in " + std::to_string(pack.d_in()));
  }
  const Tensor2D xhat = prepare_activations(pack, x);
  const Tensor2D w_q = dequantize_weight(pack.quantized);
  ForwardTrace trace;
  trace.output = base_output(pack, w_q, xhat);
  const std::size_t nr = pack.routed.adapters.size();
  trace.scores = Tensor2D(x.rows(), nr);
  trace.chosen_expert.assign(x.rows(), 0);
  if (nr == 0) return trace;
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const RouteResult rr = route(pack.router, xhat.row(t));
    std::copy(rr.scores.begin(), rr.scores.end(), trace.scores.row(t).begin());
    trace.chosen_expert[t] = rr.expert;
    add_into(trace.output.row(t), pack.routed.adapters[rr.expert].apply(xhat.row(t)));
  }
  return trace;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::fp: return "fp";
    case Variant::rtn: return "rtn";
    case Variant::shared_only: return "shared_only";
    case Variant::qe_random_route: return "qe_random_route";
    case Variant::qe_oracle_route: return "qe_oracle_route";
    case Variant::qe: return "qe";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "fp") return Variant::fp;
  if (s == "rtn") return Variant::rtn;
  if (s == "shared_only" || s == "shared") return Variant::shared_only;
  if (s == "qe_random_route" || s == "random") return Variant::qe_random_route;
  if (s == "qe_oracle_route" || s == "oracle") return Variant::qe_oracle_route;
  if (s == "qe") return Variant::qe;
  throw InvalidInput("unknown variant '" + s + "'");
}

bool variant_needs_routed(Variant v) {
  return v == Variant::qe || v == Variant::qe_random_route || v == Variant::qe_oracle_route;
}

VariantOutput forward_variant(const ExpertPack& pack, const Tensor2D& w_f, const Tensor2D& x,
                              Variant variant, std::uint64_t seed) {
  if (w_f.rows() != pack.d_out() || w_f.cols() != pack.d_in()) {
    throw InvalidInput("forward_variant: reference weight shape does not match pack");
  }
  if (x.cols() != pack.d_in()) throw InvalidInput("forward_variant: activation width != d_in");
  if (variant_needs_routed(variant) && !pack.has_routed()) {
    throw MissingMember("variant " + to_string(variant) + " needs routed experts, pack has none");
  }

  VariantOutput out;
  switch (variant) {
    case Variant::fp:
      out.output = matmul_nt(x, w_f);
      return out;
    case Variant::rtn: {
      const QuantizedWeight q = quantize_weight(w_f, pack.config.scheme);
      const Tensor2D xhat = quantize_activations(x, pack.config.scheme.act_bits);
      out.output = matmul_nt(xhat, dequantize_weight(q));
      return out;
    }
    case Variant::qe: {
      ForwardTrace tr = forward_compensated(pack, x);
      out.output = std::move(tr.output);
      out.chosen = std::move(tr.chosen_expert);
      return out;
    }
    default:
      break;
  }

  const Tensor2D xhat = prepare_activations(pack, x);
  const Tensor2D w_q = dequantize_weight(pack.quantized);
  out.output = base_output(pack, w_q, xhat);
  if (variant == Variant::shared_only) return out;

  const std::size_t nr = pack.routed.adapters.size();
  out.chosen.assign(x.rows(), 0);
  if (variant == Variant::qe_random_route) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, nr - 1);
    for (std::size_t t = 0; t < x.rows(); ++t) {
      out.chosen[t] = pick(rng);
      add_into(out.output.row(t), pack.routed.adapters[out.chosen[t]].apply(xhat.row(t)));
    }
    return out;
  }

  // Oracle: measured per-token residual against the full-precision output.
  const Tensor2D y_fp = matmul_nt(x, w_f);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto base = out.output.row(t);
    auto ref = y_fp.row(t);
    std::size_t best = 0;
    double best_err = std::numeric_limits<double>::infinity();
    std::vector<double> best_delta;
    for (std::size_t i = 0; i < nr; ++i) {
      std::vector<double> delta = pack.routed.adapters[i].apply(xhat.row(t));
      double err = 0.0;
      for (std::size_t o = 0; o < base.size(); ++o) {
        const double r = ref[o] - (base[o] + delta[o]);
        err += r * r;
      }
      if (err < best_err) {
        best_err = err;
        best = i;
        best_delta = std::move(delta);
      }
    }
    out.chosen[t] = best;
    add_into(base, best_delta);
  }
  return out;
}

LayerMetrics layer_metrics(const Tensor2D& y_ref, const Tensor2D& y_test) {
  require_same_shape(y_ref, y_test, "layer_metrics");
  LayerMetrics m;
  double diff_sq = 0.0;
  double sum = 0.0;
  for (std::size_t t = 0; t < y_ref.rows(); ++t) {
    auto a = y_ref.row(t);
    auto b = y_test.row(t);
    double acc = 0.0;
    for (std::size_t o = 0; o < a.size(); ++o) {
      const double d = a[o] - b[o];
      acc += d * d;
    }
    diff_sq += acc;
    const double l2 = std::sqrt(acc);
    sum += l2;
    m.max_l2 = std::max(m.max_l2, l2);
  }
  if (y_ref.rows() > 0) m.mean_l2 = sum / static_cast<double>(y_ref.rows());
  const double ref = frobenius_norm(y_ref);
  m.rel_fro = ref > 0.0 ? std::sqrt(diff_sq) / ref : std::sqrt(diff_sq);
  return m;
}

}  // namespace qe
