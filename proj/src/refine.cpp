#include "qe/refine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include "qe/error.hpp"
#include "qe/quantizer.hpp"
#include "qe/runtime.hpp"

namespace qe {

void RefineConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("refine: tau must be > 0");
  if (!(lr >= 0.0)) throw ConfigError("refine: lr must be >= 0");
  if (batch_size < 1) throw ConfigError("refine: batch_size must be >= 1");
}

RefineBatch make_refine_batch_prepared(const ExpertPack& pack, Tensor2D xhat, Tensor2D target) {
  if (xhat.cols() != pack.d_in()) throw InvalidInput("refine batch: activation width != d_in");
  if (target.rows() != xhat.rows() || target.cols() != pack.d_out()) {
    throw InvalidInput("refine batch: target shape mismatch");
  }
  RefineBatch b;
  b.frozen = matmul_nt(xhat, dequantize_weight(pack.quantized));
  for (std::size_t t = 0; t < xhat.rows(); ++t) {
    const auto s = pack.shared.adapter.apply(xhat.row(t));
    auto row = b.frozen.row(t);
    for (std::size_t o = 0; o < row.size(); ++o) row[o] += s[o];
  }
  b.xhat = std::move(xhat);
  b.target = std::move(target);
  return b;
}

RefineBatch make_refine_batch(const ExpertPack& pack, const Tensor2D& w_f, const Tensor2D& x) {
  return make_refine_batch_prepared(pack, prepare_activations(pack, x), matmul_nt(x, w_f));
}

RefineBatch select_tokens(const RefineBatch& all, const std::vector<std::size_t>& tokens) {
  RefineBatch b{Tensor2D(tokens.size(), all.xhat.cols()), Tensor2D(tokens.size(), all.frozen.cols()),
                Tensor2D(tokens.size(), all.target.cols())};
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::size_t t = tokens[i];
    std::copy(all.xhat.row(t).begin(), all.xhat.row(t).end(), b.xhat.row(i).begin());
    std::copy(all.frozen.row(t).begin(), all.frozen.row(t).end(), b.frozen.row(i).begin());
    std::copy(all.target.row(t).begin(), all.target.row(t).end(), b.target.row(i).begin());
  }
  return b;
}

std::vector<double> gather_trainable(const ExpertPack& pack) {
  std::vector<double> p;
  for (const auto& ad : pack.routed.adapters) {
    p.insert(p.end(), ad.a.values().begin(), ad.a.values().end());
    p.insert(p.end(), ad.b.values().begin(), ad.b.values().end());
  }
  p.insert(p.end(), pack.router.weights.values().begin(), pack.router.weights.values().end());
  return p;
}

void scatter_trainable(ExpertPack& pack, std::span<const double> params) {
  std::size_t off = 0;
  auto fill = [&](Tensor2D& t) {
    if (off + t.size() > params.size()) throw InvalidInput("scatter_trainable: parameter vector too short");
    std::copy(params.begin() + static_cast<std::ptrdiff_t>(off),
              params.begin() + static_cast<std::ptrdiff_t>(off + t.size()), t.data().begin());
    off += t.size();
  };
  for (auto& ad : pack.routed.adapters) {
    fill(ad.a);
    fill(ad.b);
  }
  fill(pack.router.weights);
  if (off != params.size()) throw InvalidInput("scatter_trainable: parameter vector too long");
}

namespace {

struct Standardized {
  std::vector<double> z;
  double sigma = 1.0;
  bool scaled = false;  // false when σ was replaced by 1 (or not used)
};

Standardized standardize(std::span<const double> v, bool divide) {
  const double n = static_cast<double>(v.size());
  const double mu = std::accumulate(v.begin(), v.end(), 0.0) / n;
  Standardized s;
  s.z.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) s.z[i] = v[i] - mu;
  if (!divide) return s;
  double var = 0.0;
  for (double x : s.z) var += x * x;
  var /= n;
  const double sigma = std::sqrt(var);
  if (sigma < 1e-12) return s;
  s.sigma = sigma;
  s.scaled = true;
  for (double& x : s.z) x /= sigma;
  return s;
}

// Gradient through z = (v − μ)/σ (population σ) or z = v − μ.
std::vector<double> standardize_backward(const Standardized& s, std::span<const double> gz) {
  const double n = static_cast<double>(gz.size());
  const double mean_g = std::accumulate(gz.begin(), gz.end(), 0.0) / n;
  std::vector<double> gv(gz.size());
  if (!s.scaled) {
    for (std::size_t i = 0; i < gz.size(); ++i) gv[i] = gz[i] - mean_g;
    return gv;
  }
  double mean_gz = 0.0;
  for (std::size_t i = 0; i < gz.size(); ++i) mean_gz += gz[i] * s.z[i];
  mean_gz /= n;
  for (std::size_t i = 0; i < gz.size(); ++i) gv[i] = (gz[i] - mean_g - s.z[i] * mean_gz) / s.sigma;
  return gv;
}

std::vector<double> log_softmax(std::span<const double> a) {
  const double mx = *std::max_element(a.begin(), a.end());
  double sum = 0.0;
  for (double v : a) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - lse;
  return out;
}

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

struct Offsets {
  std::vector<std::size_t> a;
  std::vector<std::size_t> b;
  std::size_t router = 0;
  std::size_t total = 0;
};

Offsets layout(const ExpertPack& pack) {
  Offsets o;
  std::size_t off = 0;
  for (const auto& ad : pack.routed.adapters) {
    o.a.push_back(off);
    off += ad.a.size();
    o.b.push_back(off);
    off += ad.b.size();
  }
  o.router = off;
  o.total = off + pack.router.weights.size();
  return o;
}

RefineLosses evaluate(const ExpertPack& pack, const RefineBatch& batch, const RefineConfig& cfg,
                      std::vector<double>* grad) {
  const std::size_t nr = pack.routed.adapters.size();
  if (nr < 2) throw ConfigError("refine: routing loss needs at least 2 routed experts, have " + std::to_string(nr));
  const std::size_t tokens = batch.xhat.rows();
  if (tokens == 0) throw InvalidInput("refine: empty batch");
  if (pack.router.weights.rows() != pack.d_in() || pack.router.weights.cols() != nr) {
    throw InvalidInput("refine: router shape does not match experts");
  }
  const std::size_t d_out = pack.d_out();
  const std::size_t d_in = pack.d_in();
  const double inv_tokens = 1.0 / static_cast<double>(tokens);
  const double tau = cfg.tau;

  Offsets off;
  if (grad) {
    off = layout(pack);
    grad->assign(off.total, 0.0);
  }

  RefineLosses out;
  out.distances = Tensor2D(tokens, nr);
  out.logits = Tensor2D(tokens, nr);
  std::vector<std::vector<double>> hidden(nr);
  std::vector<std::vector<double>> signs(nr, std::vector<double>(d_out));
  std::vector<double> absx(d_in);

  for (std::size_t t = 0; t < tokens; ++t) {
    auto x = batch.xhat.row(t);
    auto frozen = batch.frozen.row(t);
    auto target = batch.target.row(t);
    for (std::size_t c = 0; c < d_in; ++c) absx[c] = std::abs(x[c]);

    std::vector<double> d(nr, 0.0);
    for (std::size_t i = 0; i < nr; ++i) {
      const auto& ad = pack.routed.adapters[i];
      hidden[i] = matvec(ad.b, x);
      const std::vector<double> delta = matvec(ad.a, hidden[i]);
      double acc = 0.0;
      for (std::size_t o = 0; o < d_out; ++o) {
        const double r = frozen[o] + delta[o] - target[o];
        signs[i][o] = sign_of(r);
        acc += std::abs(r);
      }
      d[i] = acc;
      out.distances(t, i) = acc;
    }
    std::vector<double> l(nr, 0.0);
    for (std::size_t c = 0; c < d_in; ++c) {
      if (absx[c] == 0.0) continue;
      auto rrow = pack.router.weights.row(c);
      for (std::size_t i = 0; i < nr; ++i) l[i] += rrow[i] * absx[c];
    }
    std::copy(l.begin(), l.end(), out.logits.row(t).begin());

    const std::size_t best = static_cast<std::size_t>(std::min_element(d.begin(), d.end()) - d.begin());
    out.reg += d[best] * inv_tokens;

    const Standardized zd = standardize(d, true);
    const Standardized zl = standardize(l, cfg.symmetric_standardize);
    std::vector<double> a(nr), b(nr);
    for (std::size_t i = 0; i < nr; ++i) {
      a[i] = -zd.z[i] / tau;
      b[i] = -zl.z[i] / tau;
    }
    const std::vector<double> log_p = log_softmax(a);
    const std::vector<double> log_q = log_softmax(b);
    double kl = 0.0;
    std::vector<double> p(nr), q(nr), g(nr);
    for (std::size_t i = 0; i < nr; ++i) {
      p[i] = std::exp(log_p[i]);
      q[i] = std::exp(log_q[i]);
      g[i] = log_p[i] - log_q[i];
      kl += p[i] * g[i];
    }
    kl = std::max(kl, 0.0);
    out.cls += tau * tau * kl * inv_tokens;

    if (!grad) continue;

    const double cls_w = cfg.beta * tau * tau * inv_tokens;
    std::vector<double> gz_d(nr), gz_l(nr);
    for (std::size_t i = 0; i < nr; ++i) {
      const double dkl_da = p[i] * (g[i] - kl);
      const double dkl_db = q[i] - p[i];
      gz_d[i] = -cls_w * dkl_da / tau;
      gz_l[i] = -cls_w * dkl_db / tau;
    }
    std::vector<double> gd = standardize_backward(zd, gz_d);
    const std::vector<double> gl = standardize_backward(zl, gz_l);
    gd[best] += cfg.alpha * inv_tokens;

    for (std::size_t i = 0; i < nr; ++i) {
      if (gd[i] != 0.0) {
        const auto& ad = pack.routed.adapters[i];
        const std::size_t r = ad.a.cols();
        double* ga = grad->data() + off.a[i];
        double* gb = grad->data() + off.b[i];
        std::vector<double> gh(r, 0.0);
        for (std::size_t o = 0; o < d_out; ++o) {
          const double u = gd[i] * signs[i][o];
          if (u == 0.0) continue;
          auto arow = ad.a.row(o);
          for (std::size_t k = 0; k < r; ++k) {
            ga[o * r + k] += u * hidden[i][k];
            gh[k] += u * arow[k];
          }
        }
        for (std::size_t k = 0; k < r; ++k) {
          if (gh[k] == 0.0) continue;
          for (std::size_t c = 0; c < d_in; ++c) gb[k * d_in + c] += gh[k] * x[c];
        }
      }
      if (gl[i] != 0.0) {
        double* gr = grad->data() + off.router;
        for (std::size_t c = 0; c < d_in; ++c) gr[c * nr + i] += gl[i] * absx[c];
      }
    }
  }
  out.total = cfg.alpha * out.reg + cfg.beta * out.cls;
  return out;
}

// Per-token expert argmin and residual sign patterns; equal signatures mean no kink in between.
std::vector<std::int8_t> kink_signature(const ExpertPack& pack, const RefineBatch& batch) {
  std::vector<std::int8_t> sig;
  const std::size_t nr = pack.routed.adapters.size();
  for (std::size_t t = 0; t < batch.xhat.rows(); ++t) {
    std::vector<double> d(nr, 0.0);
    std::vector<double> l(nr, 0.0);
    for (std::size_t i = 0; i < nr; ++i) {
      const auto delta = pack.routed.adapters[i].apply(batch.xhat.row(t));
      for (std::size_t o = 0; o < delta.size(); ++o) {
        const double r = batch.frozen(t, o) + delta[o] - batch.target(t, o);
        sig.push_back(static_cast<std::int8_t>(sign_of(r)));
        d[i] += std::abs(r);
      }
    }
    sig.push_back(static_cast<std::int8_t>(std::min_element(d.begin(), d.end()) - d.begin()));
    const Standardized zd = standardize(d, true);
    sig.push_back(zd.scaled ? 1 : 0);
  }
  return sig;
}

}  // namespace

RefineLosses refine_losses(const ExpertPack& pack, const RefineBatch& batch, const RefineConfig& cfg) {
  cfg.validate();
  return evaluate(pack, batch, cfg, nullptr);
}

RefineGradient refine_gradient(const ExpertPack& pack, const RefineBatch& batch, const RefineConfig& cfg) {
  cfg.validate();
  RefineGradient g;
  g.losses = evaluate(pack, batch, cfg, &g.grad);
  return g;
}

double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base_lr;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
}

RefineResult refine_layer(const ExpertPack& pack, const Tensor2D& x_calib, const Tensor2D& w_f,
                          const RefineConfig& cfg) {
  cfg.validate();
  if (pack.routed.adapters.size() < 2) {
    throw ConfigError("refine: routing loss needs at least 2 routed experts");
  }
  const RefineBatch all = make_refine_batch(pack, w_f, x_calib);
  const std::size_t tokens = all.xhat.rows();
  if (tokens == 0) throw InvalidInput("refine: empty calibration set");

  RefineResult res{pack, {}, 0.0, 0.0, false, {}};
  res.initial_total = evaluate(pack, all, cfg, nullptr).total;

  std::vector<double> params = gather_trainable(pack);
  std::vector<double> m(params.size(), 0.0), v(params.size(), 0.0);
  const std::size_t router_off = params.size() - pack.router.weights.size();

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(tokens);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  const std::size_t bs = std::min(cfg.batch_size, tokens);

  const std::size_t total_steps = cfg.epochs * cfg.iters_per_epoch;
  ExpertPack current = pack;
  double b1_pow = 1.0, b2_pow = 1.0;
  for (std::size_t step = 0; step < total_steps; ++step) {
    std::vector<std::size_t> idx;
    idx.reserve(bs);
    while (idx.size() < bs) {
      if (cursor == tokens) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    // Sorted so the batch mean does not depend on shuffle order.
    std::sort(idx.begin(), idx.end());
    const RefineBatch batch = select_tokens(all, idx);

    std::vector<double> grad;
    const RefineLosses losses = evaluate(current, batch, cfg, &grad);
    const double lr = cosine_lr(cfg.lr, step, total_steps);
    res.history.push_back({step, lr, losses.total, losses.reg, losses.cls});
    bool finite = std::isfinite(losses.total);
    for (double gv : grad) finite = finite && std::isfinite(gv);
    if (!finite) {
      res.aborted = true;
      res.abort_reason = "non-finite loss at iteration " + std::to_string(step);
      break;
    }
    res.pack = current;

    b1_pow *= cfg.adam_beta1;
    b2_pow *= cfg.adam_beta2;
    std::vector<double> next = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * grad[i];
      v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
      const double mhat = m[i] / (1.0 - b1_pow);
      const double vhat = v[i] / (1.0 - b2_pow);
      next[i] = params[i] - lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
    for (std::size_t i = router_off; i < next.size(); ++i) next[i] = std::max(next[i], 0.0);
    params = std::move(next);
    scatter_trainable(current, params);
  }
  if (!res.aborted) res.pack = current;
  res.final_total = evaluate(res.pack, all, cfg, nullptr).total;
  if (!std::isfinite(res.final_total)) {
    res.aborted = true;
    res.abort_reason = "non-finite final loss";
  }
  return res;
}

GradCheckResult finite_difference_check(
    const std::function<double(std::span<const double>)>& loss, std::span<const double> params,
    std::span<const double> analytic, const std::vector<std::size_t>& coords, double epsilon,
    const std::function<bool(std::span<const double>, std::span<const double>)>& kink_free) {
  if (epsilon < 1e-7 || epsilon > 1e-4) throw InvalidInput("grad_check: epsilon must lie in [1e-7, 1e-4]");
  GradCheckResult res;
  std::vector<double> probe(params.begin(), params.end());
  std::vector<double> outer_minus(params.begin(), params.end());
  auto at = [&](std::size_t c, double offset) {
    probe[c] = params[c] + offset;
    const double v = loss(probe);
    probe[c] = params[c];
    return v;
  };
  for (std::size_t c : coords) {
    probe[c] = params[c] + 2.0 * epsilon;
    outer_minus[c] = params[c] - 2.0 * epsilon;
    const bool smooth = !kink_free || kink_free(probe, outer_minus);
    probe[c] = params[c];
    outer_minus[c] = params[c];
    if (!smooth) {
      ++res.resampled;
      continue;
    }
    // Fourth-order central stencil.
    const double numeric = (8.0 * (at(c, epsilon) - at(c, -epsilon)) - (at(c, 2.0 * epsilon) - at(c, -2.0 * epsilon))) /
                           (12.0 * epsilon);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[c]), 1e-6});
    res.max_rel_error = std::max(res.max_rel_error, std::abs(numeric - analytic[c]) / denom);
    ++res.checked;
  }
  return res;
}

GradCheckResult grad_check(const ExpertPack& pack, const RefineBatch& batch, const RefineConfig& cfg,
                           double epsilon, std::size_t n_coords, std::uint64_t seed) {
  const RefineGradient g = refine_gradient(pack, batch, cfg);
  const std::vector<double> params = gather_trainable(pack);
  ExpertPack scratch = pack;
  auto loss = [&](std::span<const double> p) {
    scatter_trainable(scratch, p);
    return evaluate(scratch, batch, cfg, nullptr).total;
  };
  const auto base_sig = kink_signature(pack, batch);
  auto kink_free = [&](std::span<const double> p, std::span<const double> q) {
    scatter_trainable(scratch, p);
    if (kink_signature(scratch, batch) != base_sig) return false;
    scatter_trainable(scratch, q);
    return kink_signature(scratch, batch) == base_sig;
  };

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
  GradCheckResult total;
  // Keep drawing until n_coords kink-free coordinates were checked (bounded).
  for (std::size_t attempt = 0; attempt < 50 * n_coords && total.checked < n_coords; ++attempt) {
    const GradCheckResult one = finite_difference_check(loss, params, g.grad, {pick(rng)}, epsilon, kink_free);
    total.max_rel_error = std::max(total.max_rel_error, one.max_rel_error);
    total.checked += one.checked;
    total.resampled += one.resampled;
  }
  return total;
}

}  // namespace qe
