// Acceptance suite: one line per criterion, nonzero exit if any fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "qe/calib.hpp"
#include "qe/costmodel.hpp"
#include "qe/experts.hpp"
#include "qe/numerics.hpp"
#include "qe/package.hpp"
#include "qe/pipeline.hpp"
#include "qe/quantizer.hpp"
#include "qe/refine.hpp"
#include "qe/runtime.hpp"
#include "qe/synth.hpp"

using namespace qe;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

Tensor2D randn(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor2D m(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

// 1. Quantizer element bound.
Outcome quantizer_bound() {
  std::mt19937_64 rng(1);
  double worst = 0.0;
  std::size_t checked = 0;
  bool skipped_ok = true;

  QuantScheme sym = QuantScheme::w4a(8);
  const Tensor2D ws = randn(100, 100, rng, 0.7);
  const ChannelSet skip{3, 50, 97};
  const auto qs = quantize_weight(ws, sym, skip);
  const Tensor2D ds = dequantize_weight(qs);
  for (std::size_t r = 0; r < 100; ++r)
    for (std::size_t c = 0; c < 100; ++c) {
      if (std::find(skip.begin(), skip.end(), c) != skip.end()) {
        skipped_ok &= ds(r, c) == 0.0;
        continue;
      }
      worst = std::max(worst, std::abs(ws(r, c) - ds(r, c)) - qs.scales[r] / 2);
      ++checked;
    }

  QuantScheme asym = QuantScheme::w3a16();
  asym.group_size = 16;
  const Tensor2D wa = randn(100, 100, rng, 0.7);
  const auto qa = quantize_weight(wa, asym, skip);
  const Tensor2D da = dequantize_weight(qa);
  const std::size_t g = qa.groups_per_row();
  for (std::size_t r = 0; r < 100; ++r)
    for (std::size_t c = 0; c < 100; ++c) {
      if (std::find(skip.begin(), skip.end(), c) != skip.end()) continue;
      worst = std::max(worst, std::abs(wa(r, c) - da(r, c)) - qa.scales[r * g + c / 16] / 2);
      ++checked;
    }
  return {worst <= 1e-12 && skipped_ok,
          std::to_string(checked) + " elements, max(|w-dq|-scale/2) = " + fmt(worst)};
}

// 2. Statistics oracles against brute-force recomputation.
Outcome statistics_oracles() {
  std::mt19937_64 rng(2);
  double worst = 0.0;
  std::size_t failures = 0;
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t d_in = 2 + rng() % 31;
    const std::size_t tokens = 1 + rng() % 64;
    const std::size_t k = 1 + rng() % d_in;
    Tensor2D x = randn(tokens, d_in, rng);
    for (std::size_t t = 0; t < tokens; ++t)  // inject exact ties
      if (rng() % 4 == 0) x(t, rng() % d_in) = x(t, 0);
    const Tensor2D w = randn(5, d_in, rng);

    std::vector<double> imp(d_in, 0.0);
    for (std::size_t c = 0; c < d_in; ++c) {
      for (std::size_t o = 0; o < 5; ++o) imp[c] += std::abs(w(o, c));
      imp[c] /= 5.0;
    }
    const auto lib_imp = importance_vector(w);
    for (std::size_t c = 0; c < d_in; ++c) worst = std::max(worst, std::abs(imp[c] - lib_imp[c]));

    std::vector<ChannelSet> sets;
    for (std::size_t t = 0; t < tokens; ++t) {
      std::vector<std::pair<double, std::size_t>> sc;
      for (std::size_t c = 0; c < d_in; ++c) sc.push_back({-std::abs(x(t, c)) * imp[c], c});
      std::sort(sc.begin(), sc.end());
      ChannelSet s;
      for (std::size_t i = 0; i < k; ++i) s.push_back(sc[i].second);
      std::sort(s.begin(), s.end());
      ChannelSet got = token_topk(x.row(t), lib_imp, k);
      std::sort(got.begin(), got.end());
      failures += got != s;
      sets.push_back(s);
    }

    const auto freq = channel_frequency(sets, k, d_in);
    double sum = 0.0;
    std::vector<double> count(d_in, 0.0);
    for (const auto& s : sets)
      for (auto c : s) count[c] += 1.0;
    for (std::size_t c = 0; c < d_in; ++c) {
      const double f = static_cast<double>(k) * count[c] / (static_cast<double>(tokens) * static_cast<double>(k));
      const auto it = freq.find(c);
      const double got = it == freq.end() ? 0.0 : it->second;
      worst = std::max(worst, std::abs(got - f));
      if (count[c] == 0.0 && it != freq.end()) ++failures;
      sum += got;
    }
    worst = std::max(worst, std::abs(sum - static_cast<double>(k)));

    ChannelSet routed;
    for (std::size_t c = 0; c < d_in; ++c)
      if (rng() % 2) routed.push_back(c);
    if (routed.empty()) routed.push_back(0);
    const auto occ = co_occurrence(sets, routed);
    std::vector<std::vector<double>> ind(routed.size(), std::vector<double>(tokens, 0.0));
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t j = 0; j < routed.size(); ++j) {
        ind[j][t] = std::count(sets[t].begin(), sets[t].end(), routed[j]) ? 1.0 : 0.0;
        worst = std::max(worst, std::abs(occ.matrix(t, j) - ind[j][t]));
      }

    const Tensor2D s = npmi_similarity(occ);
    const double T = static_cast<double>(tokens);
    for (std::size_t i = 0; i < routed.size(); ++i)
      for (std::size_t j = 0; j < routed.size(); ++j) {
        double ni = 0, nj = 0, nij = 0;
        for (std::size_t t = 0; t < tokens; ++t) {
          ni += ind[i][t];
          nj += ind[j][t];
          nij += ind[i][t] * ind[j][t];
        }
        double expect;
        if (i == j) {
          expect = 1.0;
        } else if (nij == 0) {
          expect = -1.0;
        } else if (nij == T) {
          expect = 1.0;
        } else {
          const double pij = nij / T;
          expect = std::log(pij / ((ni / T) * (nj / T))) / -std::log(pij);
          expect = std::clamp(expect, -1.0, 1.0);
        }
        worst = std::max(worst, std::abs(s(i, j) - expect));
        if (s(i, j) != s(j, i) || s(i, j) < -1.0 || s(i, j) > 1.0) ++failures;
      }

    const std::size_t nr = 1 + rng() % 6;
    Tensor2D rw = randn(d_in, nr, rng);
    for (double& v : rw.data()) v = std::abs(v);
    const Router router{rw};
    for (std::size_t t = 0; t < tokens; ++t) {
      const auto rr = route(router, x.row(t));
      std::size_t best = 0;
      std::vector<double> sc(nr, 0.0);
      for (std::size_t i = 0; i < nr; ++i) {
        for (std::size_t c = 0; c < d_in; ++c) sc[i] += rw(c, i) * std::abs(x(t, c));
        worst = std::max(worst, std::abs(sc[i] - rr.scores[i]));
        if (sc[i] < sc[best]) best = i;
      }
      failures += rr.expert != best;
    }
  }
  return {failures == 0 && worst <= 1e-12,
          "200 instances, max abs deviation " + fmt(worst) + ", mismatches " + std::to_string(failures)};
}

// 3. Shared-expert exactness with exact quantization outside C_s.
Outcome shared_exactness() {
  std::mt19937_64 rng(3);
  double worst = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t ncs = 1 + rng() % 6;
    ChannelSet cs;
    while (cs.size() < ncs) {
      const std::size_t c = rng() % 16;
      if (std::find(cs.begin(), cs.end(), c) == cs.end()) cs.push_back(c);
    }
    Tensor2D w(16, 16);
    std::normal_distribution<double> nd(0.0, 4.0);
    for (std::size_t r = 0; r < 16; ++r) {
      std::size_t anchor = 0;
      while (std::find(cs.begin(), cs.end(), anchor) != cs.end()) ++anchor;
      for (std::size_t c = 0; c < 16; ++c) {
        if (std::find(cs.begin(), cs.end(), c) != cs.end()) {
          w(r, c) = nd(rng);
        } else {
          w(r, c) = static_cast<double>(static_cast<int>(rng() % 15) - 7);
        }
      }
      w(r, anchor) = 7.0;
    }
    const Tensor2D x = randn(256, 16, rng, 1.5);
    const std::size_t rs = ncs + rng() % (17 - ncs);
    const auto b = build_shared_expert(w, x, cs, rs, QuantScheme::w4a(8));
    worst = std::max(worst, frobenius_norm(b.residual) / frobenius_norm(w));
  }
  return {worst <= 1e-6, "50 layers, max |E_S|/|W_f| = " + fmt(worst)};
}

// 4. SVD truncation energy and whitening optimality.
Outcome svd_whitening() {
  std::mt19937_64 rng(4);
  double worst_trunc = 0.0;
  for (int inst = 0; inst < 60; ++inst) {
    const std::size_t m = 1 + rng() % 12, n = 1 + rng() % 12;
    const Tensor2D a = randn(m, n, rng);
    const auto full = svd_truncated(a, std::min(m, n));
    const double total = std::pow(frobenius_norm(a), 2);
    for (std::size_t r = 1; r <= std::min(m, n); ++r) {
      double discarded = 0.0;
      for (std::size_t i = r; i < full.S.size(); ++i) discarded += full.S[i] * full.S[i];
      const double resid = std::pow(frobenius_norm(a - svd_truncated(a, r).reconstruct()), 2);
      worst_trunc = std::max(worst_trunc, std::abs(resid - discarded) / total);
    }
  }
  double worst_white = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    const Tensor2D w = randn(16, 16, rng);
    const Tensor2D x = randn(512, 16, rng);
    const auto b = build_shared_expert(w, x, {static_cast<std::size_t>(rng() % 16)}, 16, QuantScheme::w4a(8));
    std::vector<double> inv(16);
    for (std::size_t c = 0; c < 16; ++c) inv[c] = 1.0 / b.shared.smooth_scale[c];
    const Tensor2D xs = scale_columns(x, inv);
    const Tensor2D plain = svd_truncated(b.quant_error, 16).reconstruct();
    const double scale = frobenius_norm(matmul_nt(xs, b.quant_error));
    const double diff = frobenius_norm(matmul_nt(xs, b.shared.adapter.product() - plain));
    worst_white = std::max(worst_white, diff / scale);
  }
  return {worst_trunc <= 1e-9 && worst_white <= 1e-9,
          "truncation rel err " + fmt(worst_trunc) + ", whitened vs plain " + fmt(worst_white)};
}

// 5. Desk-scale ablation ordering.
Outcome ablation_ordering() {
  const std::uint64_t seed = 1234;
  const SynthProfile profile;
  const Tensor2D w = synth_weight(64, 64, seed);
  const Tensor2D cal = synth_calibration(64, 2048, 2, seed, profile).x;
  const Tensor2D hold = synth_calibration(64, 512, 2, seed, profile, 1).x;
  RunConfig cfg;
  cfg.scheme = QuantScheme::w4a(8);
  cfg.k = 8;
  cfg.n_routed = 4;
  cfg.rank = 16;
  cfg.seed = seed;
  const ExpertPack pack = quantize_layer("desk", w, cal, cfg).pack;
  const Tensor2D ref = matmul_nt(hold, w);
  auto err = [&](Variant v) { return layer_metrics(ref, forward_variant(pack, w, hold, v, seed).output).mean_l2; };
  const double rtn = err(Variant::rtn), shared = err(Variant::shared_only), qe_ = err(Variant::qe),
               rnd = err(Variant::qe_random_route), orc = err(Variant::qe_oracle_route);
  const bool ok = orc <= qe_ && qe_ <= rnd && qe_ < shared && shared < rtn && qe_ <= 0.9 * rtn;
  return {ok, "oracle " + fmt(orc) + " <= qe " + fmt(qe_) + " <= random " + fmt(rnd) + "; shared " + fmt(shared) +
                  ", rtn " + fmt(rtn) + ", gain " + fmt(100.0 * (1.0 - qe_ / rtn)) + "%"};
}

// 6. Routed-expert identity and router columns.
Outcome routed_identity() {
  std::mt19937_64 rng(6);
  double worst_id = 0.0, worst_r = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t d_out = 4 + rng() % 12, d_in = 6 + rng() % 12;
    const Tensor2D es = randn(d_out, d_in, rng);
    const Tensor2D x = randn(64, d_in, rng, 2.0);
    ChannelSet cr;
    for (std::size_t c = 0; c < d_in; ++c)
      if (rng() % 2) cr.push_back(c);
    for (std::size_t c = 0; cr.size() < 3; ++c)
      if (std::find(cr.begin(), cr.end(), c) == cr.end()) cr.push_back(c);
    std::sort(cr.begin(), cr.end());
    const std::size_t nr = 2 + rng() % (cr.size() - 1);
    std::vector<std::size_t> labels(cr.size());
    for (std::size_t i = 0; i < cr.size(); ++i) labels[i] = i < nr ? i : rng() % nr;
    const std::size_t rank = 1 + rng() % std::min(d_out, d_in);
    const auto built = build_routed_experts(es, x, cr, labels, rank);

    std::vector<double> xbar(d_in, 0.0);
    for (std::size_t t = 0; t < 64; ++t)
      for (std::size_t c = 0; c < d_in; ++c) xbar[c] += std::abs(x(t, c)) / 64.0;
    for (std::size_t e = 0; e < nr; ++e) {
      std::vector<double> omega(d_in, 1.0);
      double lo = 1e300;
      for (std::size_t i = 0; i < cr.size(); ++i)
        if (labels[i] == e) lo = std::min(lo, xbar[cr[i]]);
      for (std::size_t i = 0; i < cr.size(); ++i)
        if (labels[i] == e) omega[cr[i]] = xbar[cr[i]] / lo;
      const double norm = std::sqrt(*std::min_element(omega.begin(), omega.end()) *
                                    *std::max_element(omega.begin(), omega.end()));
      for (double& v : omega) v /= norm;
      std::vector<double> inv(d_in);
      for (std::size_t c = 0; c < d_in; ++c) inv[c] = 1.0 / omega[c];
      const Tensor2D oracle = scale_columns(svd_truncated(scale_columns(es, omega), rank).reconstruct(), inv);
      const Tensor2D got = built.experts.adapters[e].product();
      worst_id = std::max(worst_id, frobenius_norm(oracle - got) / frobenius_norm(oracle));
      for (std::size_t c = 0; c < d_in; ++c) {
        double m = 0.0;
        for (std::size_t o = 0; o < d_out; ++o) m += std::abs(es(o, c) - got(o, c));
        worst_r = std::max(worst_r, std::abs(m / static_cast<double>(d_out) - built.router.weights(c, e)));
      }
    }
  }
  return {worst_id <= 1e-10 && worst_r <= 1e-12,
          "50 builds, identity rel err " + fmt(worst_id) + ", router abs err " + fmt(worst_r)};
}

// 7. Gradient check and refinement descent.
Outcome refinement() {
  const std::uint64_t seed = 7;
  const Tensor2D w = synth_weight(32, 32, seed);
  SynthProfile profile;
  profile.always_hot = 4;
  profile.modality_hot = 2;
  profile.pattern_size = 2;
  const Tensor2D x = synth_calibration(32, 1024, 2, seed + 1, profile).x;
  RunConfig cfg;
  cfg.scheme = QuantScheme::w4a(8);
  cfg.k = 4;
  cfg.n_routed = 4;
  cfg.rank = 8;
  cfg.seed = seed;
  const ExpertPack pack = quantize_layer("refine", w, x, cfg).pack;

  // Gradient check on tokens whose expert distances spread by at least 1% of their mean.
  const RefineBatch all = make_refine_batch(pack, w, x);
  const RefineLosses base = refine_losses(pack, all, RefineConfig{});
  std::vector<std::size_t> tokens;
  for (std::size_t t = 0; t < all.xhat.rows() && tokens.size() < 64; ++t) {
    double mean = 0.0, var = 0.0;
    for (double v : base.distances.row(t)) mean += v / 4.0;
    for (double v : base.distances.row(t)) var += (v - mean) * (v - mean) / 4.0;
    if (std::sqrt(var) >= 1e-2 * mean) tokens.push_back(t);
  }
  const GradCheckResult gc = grad_check(pack, select_tokens(all, tokens), RefineConfig{}, 1e-5, 300, seed);

  RefineConfig rc;
  rc.seed = seed;
  const RefineResult res = refine_layer(pack, x, w, rc);
  const bool frozen = res.pack.quantized == pack.quantized && res.pack.shared == pack.shared;
  const bool ok = gc.max_rel_error <= 1e-5 && gc.checked >= 200 && !res.aborted &&
                  res.final_total <= 0.99 * res.initial_total && frozen && res.history.size() == 1600;
  return {ok, "grad rel err " + fmt(gc.max_rel_error) + " over " + std::to_string(gc.checked) + " coords; loss " +
                  fmt(res.initial_total) + " -> " + fmt(res.final_total) + " (" +
                  fmt(100.0 * (1.0 - res.final_total / res.initial_total)) + "% drop), frozen " +
                  (frozen ? "identical" : "CHANGED")};
}

// 8. Cost model.
Outcome cost_model() {
  const LayerShape s{128, 3584, 3584, 64, 8};
  const std::uint64_t origin = flops(s, CostVariant::origin), qe_f = flops(s, CostVariant::qe),
                      params = params_formula(s, CostVariant::qe);
  const bool ok = origin == 1644167168ull && qe_f == 1644167168ull + 62390272ull && params == 14909440ull;
  return {ok, "flops " + std::to_string(origin) + " + " + std::to_string(qe_f - origin) + ", params " +
                  std::to_string(params)};
}

// 9. Determinism and round-trip.
int run(const std::string& args) {
  const int rc = std::system((std::string(QE_BINARY) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    out[fs::relative(e.path(), dir).string()] = os.str();
  }
  return out;
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "qe_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string d = (root / "data").string();
  if (run("synth --out " + d + " --seed 5 --layers 2 --tokens 1024 --holdout 256") != 0) return {false, "synth failed"};
  const std::string q = "quantize --model " + d + "/model.json --calib " + d +
                        "/calib.json --k 8 --experts 4 --rank 16 --abits 8 --seed 11 --refine --refine-epochs 2 "
                        "--refine-iters 20 --out ";
  if (run(q + (root / "a").string()) != 0 || run(q + (root / "b").string() + " --jobs 2") != 0)
    return {false, "quantize failed"};
  const auto ta = tree(root / "a"), tb = tree(root / "b");
  const bool identical = ta == tb && !ta.empty();

  RunConfig cfg;
  cfg.k = 8;
  cfg.n_routed = 4;
  cfg.rank = 16;
  cfg.seed = 11;
  const auto model = read_layer_manifest(d + "/model.json", "weight");
  const auto calib = read_layer_manifest(d + "/calib.json", "activations");
  const auto hold = read_layer_manifest(d + "/holdout.json", "activations");
  const Package mem = quantize_model(model, calib, cfg).package;
  write_package((root / "c").string(), mem);
  const Package back = read_package((root / "c").string());
  const std::vector<Variant> vs{Variant::fp, Variant::rtn, Variant::shared_only, Variant::qe,
                                Variant::qe_random_route, Variant::qe_oracle_route};
  const bool same_report = evaluate_package(mem, hold, vs, 3).dump() == evaluate_package(back, hold, vs, 3).dump();
  return {identical && same_report, std::to_string(ta.size()) + " package files " +
                                        (identical ? "byte-identical" : "DIFFER") + ", read-back report " +
                                        (same_report ? "identical" : "DIFFERS")};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> fn;
  };
  const std::vector<Criterion> criteria{
      {1, "quantizer element bound", 1.0, quantizer_bound},
      {2, "statistics oracles", 5.0, statistics_oracles},
      {3, "shared-expert exactness", 10.0, shared_exactness},
      {4, "SVD and whitening optimality", 5.0, svd_whitening},
      {5, "desk-scale ablation ordering", 60.0, ablation_ordering},
      {6, "routed-expert identity", 60.0, routed_identity},
      {7, "gradient check and refinement", 120.0, refinement},
      {8, "cost model", 1.0, cost_model},
      {9, "determinism and round-trip", 60.0, determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("[%s] %d: %s: %s (%.2fs of %.0fs)\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs,
                c.budget_s);
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
