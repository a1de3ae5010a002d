#include "qe/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "qe/calib.hpp"
#include "qe/error.hpp"
#include "qe/tensor_file.hpp"

namespace qe {
namespace fs = std::filesystem;
using nlohmann::json;

json RunConfig::to_json() const {
  return {{"scheme", scheme_to_json(scheme)},
          {"k", k},
          {"N_r", n_routed},
          {"r", rank},
          {"seed", seed},
          {"refine", refine},
          {"refine_config",
           {{"tau", refine_cfg.tau},
            {"alpha", refine_cfg.alpha},
            {"beta", refine_cfg.beta},
            {"lr", refine_cfg.lr},
            {"epochs", refine_cfg.epochs},
            {"iters_per_epoch", refine_cfg.iters_per_epoch},
            {"batch_size", refine_cfg.batch_size},
            {"seed", refine_cfg.seed},
            {"symmetric_standardize", refine_cfg.symmetric_standardize}}}};
}

namespace {

template <typename F>
auto stage(const std::string& layer, const char* name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(layer, name, e.what());
  }
}

}  // namespace

LayerBuild quantize_layer(const std::string& name, const Tensor2D& w_f, const Tensor2D& x,
                          const RunConfig& cfg) {
  if (x.cols() != w_f.cols()) {
    throw InvalidInput("layer '" + name + "': calibration width " + std::to_string(x.cols()) +
                       " does not match weight d_in " + std::to_string(w_f.cols()));
  }
  if (x.rows() == 0) throw InvalidInput("layer '" + name + "': no calibration tokens");
  if (cfg.k < 1) throw InvalidInput("k must be >= 1");
  if (cfg.rank < 1 || (cfg.n_routed > 0 && cfg.rank < 2)) {
    throw InvalidInput("rank must be >= 2 when routed experts are requested");
  }
  cfg.scheme.validate();

  LayerBuild out;
  LayerSummary& sum = out.summary;
  sum.name = name;
  const std::size_t d_in = w_f.cols();
  if ((cfg.n_routed + 1) * cfg.k > d_in) {
    sum.warnings.push_back("(N_r+1)*k = " + std::to_string((cfg.n_routed + 1) * cfg.k) + " exceeds d_in = " +
                           std::to_string(d_in) + "; C_r will be truncated");
  }

  const ChannelStats stats = stage(name, "channel_stats", [&] {
    return compute_channel_stats(w_f, x, cfg.k, cfg.n_routed);
  });
  const ChannelSet& c_s = stats.partition.token_independent;
  const ChannelSet& c_r = stats.partition.token_dependent;
  sum.n_shared = c_s.size();
  sum.n_routed_channels = c_r.size();

  std::size_t n_routed = std::min(cfg.n_routed, c_r.size());
  if (n_routed < cfg.n_routed) {
    sum.warnings.push_back("only " + std::to_string(c_r.size()) + " token-dependent channels observed; using " +
                           std::to_string(n_routed) + " routed experts instead of " +
                           std::to_string(cfg.n_routed));
  }
  const std::size_t rank_shared = n_routed > 0 ? cfg.rank / 2 : cfg.rank;
  const std::size_t rank_routed = cfg.rank - rank_shared;

  SharedBuild shared = stage(name, "shared_expert", [&] {
    return build_shared_expert(w_f, x, c_s, rank_shared, cfg.scheme);
  });
  sum.quant_error_fro = frobenius_norm(shared.quant_error);
  sum.shared_residual_fro = frobenius_norm(shared.residual);

  RoutedExperts routed;
  Router router;
  if (n_routed > 0) {
    const std::vector<std::size_t> labels = stage(name, "spectral_clustering", [&] {
      const CoOccurrence occ = co_occurrence(stats.topk, c_r);
      return spectral_cluster(npmi_similarity(occ), n_routed, cfg.seed);
    });
    RoutedBuild rb = stage(name, "routed_experts", [&] {
      std::vector<double> inv(d_in);
      for (std::size_t c = 0; c < d_in; ++c) inv[c] = 1.0 / shared.shared.smooth_scale[c];
      return build_routed_experts(shared.residual, scale_columns(x, inv), c_r, labels, rank_routed);
    });
    for (auto& w : rb.warnings) sum.warnings.push_back(std::move(w));
    routed = std::move(rb.experts);
    router = std::move(rb.router);
    for (const auto& cl : routed.clusters) sum.cluster_sizes.push_back(cl.size());
  }

  PackConfig pc{cfg.k, n_routed, rank_shared, rank_routed, cfg.seed, cfg.scheme};
  out.pack = stage(name, "assemble", [&] {
    return assemble_pack(std::move(shared.quantized), std::move(shared.shared), std::move(routed),
                         std::move(router), stats.partition, pc);
  });

  if (cfg.refine) {
    if (n_routed < 2) {
      sum.warnings.push_back("refinement skipped: needs at least 2 routed experts");
    } else {
      RefineResult rr = stage(name, "refine", [&] { return refine_layer(out.pack, x, w_f, cfg.refine_cfg); });
      if (rr.aborted) sum.warnings.push_back("refinement aborted: " + rr.abort_reason);
      out.pack = std::move(rr.pack);
      sum.refined = true;
      sum.refine_initial = rr.initial_total;
      sum.refine_final = rr.final_total;
      sum.refine_history = std::move(rr.history);
    }
  }
  return out;
}

std::vector<NamedTensor> read_layer_manifest(const std::string& path, const std::string& field) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open manifest");
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ParseError(path, e.byte, e.what());
  }
  const fs::path base = fs::path(path).parent_path();
  std::vector<NamedTensor> out;
  try {
    for (const json& entry : j.at("layers")) {
      const std::string name = entry.at("name").get<std::string>();
      const fs::path file = base / entry.at(field).get<std::string>();
      out.push_back({name, read_tensor(file.string())});
    }
  } catch (const json::exception& e) {
    throw ParseError(path, 0, std::string("malformed layer manifest: ") + e.what());
  }
  return out;
}

void write_layer_manifest(const std::string& path, const std::string& field,
                          const std::vector<NamedTensor>& layers) {
  const fs::path base = fs::path(path).parent_path();
  if (!base.empty()) fs::create_directories(base);
  const std::string stem = fs::path(path).stem().string();
  json entries = json::array();
  for (const auto& l : layers) {
    const std::string file = stem + "_" + l.name + ".qetf";
    write_tensor((base / file).string(), l.tensor);
    entries.push_back({{"name", l.name}, {field, file}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << json{{"layers", entries}}.dump(2) << '\n';
}

namespace {

const Tensor2D& find_layer(const std::vector<NamedTensor>& list, const std::string& name, const char* what) {
  for (const auto& l : list)
    if (l.name == name) return l.tensor;
  throw InvalidInput(std::string(what) + " has no entry for layer '" + name + "'");
}

}  // namespace

QuantizeResult quantize_model(const std::vector<NamedTensor>& model, const std::vector<NamedTensor>& calib,
                              const RunConfig& cfg) {
  // Validate every layer before starting any computation.
  for (const auto& layer : model) {
    const Tensor2D& x = find_layer(calib, layer.name, "calibration manifest");
    if (x.cols() != layer.tensor.cols()) {
      throw InvalidInput("layer '" + layer.name + "': calibration width " + std::to_string(x.cols()) +
                         " does not match weight d_in " + std::to_string(layer.tensor.cols()));
    }
  }

  std::vector<LayerBuild> builds(model.size());
  std::vector<std::exception_ptr> errors(model.size());
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next == model.size()) return;
        i = next++;
      }
      try {
        builds[i] = quantize_layer(model[i].name, model[i].tensor, find_layer(calib, model[i].name, "calibration"),
                                   cfg);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, model.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  QuantizeResult res;
  res.package.config = cfg.to_json();
  for (std::size_t i = 0; i < model.size(); ++i) {
    res.package.layers.push_back({model[i].name, std::move(builds[i].pack), model[i].tensor});
    res.summaries.push_back(std::move(builds[i].summary));
  }
  return res;
}

json evaluate_package(const Package& package, const std::vector<NamedTensor>& activations,
                      const std::vector<Variant>& variants, std::uint64_t seed) {
  for (const auto& layer : package.layers) {
    const Tensor2D& x = find_layer(activations, layer.name, "evaluation activations");
    if (x.cols() != layer.pack.d_in()) {
      throw InvalidInput("layer '" + layer.name + "': evaluation width does not match d_in");
    }
    for (Variant v : variants) {
      if (variant_needs_routed(v) && !layer.pack.has_routed()) {
        throw MissingMember("layer '" + layer.name + "': variant " + to_string(v) +
                            " needs routed experts, package has none");
      }
    }
  }

  struct Agg {
    double sum_l2 = 0.0, max_l2 = 0.0, diff_sq = 0.0, ref_sq = 0.0;
    std::size_t tokens = 0;
  };
  std::vector<std::pair<std::string, Agg>> agg;
  auto agg_for = [&](const std::string& name) -> Agg& {
    for (auto& [n, a] : agg)
      if (n == name) return a;
    agg.emplace_back(name, Agg{});
    return agg.back().second;
  };

  json layers = json::array();
  for (const auto& layer : package.layers) {
    const Tensor2D& x = find_layer(activations, layer.name, "evaluation activations");
    const Tensor2D y_ref = matmul_nt(x, layer.reference_weight);
    const double ref_norm = frobenius_norm(y_ref);
    json per_variant = json::object();
    for (Variant v : variants) {
      const VariantOutput vo = forward_variant(layer.pack, layer.reference_weight, x, v, seed);
      const LayerMetrics m = layer_metrics(y_ref, vo.output);
      json entry = {{"mean_l2", m.mean_l2}, {"max_l2", m.max_l2}, {"rel_fro", m.rel_fro}};
      if (!vo.chosen.empty()) {
        std::vector<std::size_t> hist(layer.pack.routed.adapters.size(), 0);
        for (std::size_t c : vo.chosen) ++hist[c];
        entry["routing_histogram"] = hist;
      }
      per_variant[to_string(v)] = entry;

      Agg& a = agg_for(to_string(v));
      a.sum_l2 += m.mean_l2 * static_cast<double>(x.rows());
      a.max_l2 = std::max(a.max_l2, m.max_l2);
      const double diff = ref_norm > 0.0 ? m.rel_fro * ref_norm : m.rel_fro;
      a.diff_sq += diff * diff;
      a.ref_sq += ref_norm * ref_norm;
      a.tokens += x.rows();
    }
    layers.push_back({{"name", layer.name}, {"tokens", x.rows()}, {"variants", per_variant}});
  }

  json aggregate = json::object();
  for (const auto& [name, a] : agg) {
    aggregate[name] = {{"mean_l2", a.tokens ? a.sum_l2 / static_cast<double>(a.tokens) : 0.0},
                       {"max_l2", a.max_l2},
                       {"rel_fro", a.ref_sq > 0.0 ? std::sqrt(a.diff_sq / a.ref_sq) : std::sqrt(a.diff_sq)}};
  }
  std::vector<std::string> names;
  for (Variant v : variants) names.push_back(to_string(v));
  json config = package.config;
  config["eval"] = {{"variants", names}, {"seed", seed}};
  return {{"config", config}, {"layers", layers}, {"aggregate", aggregate}};
}

OverlapStats topk_overlap(const std::vector<ChannelSet>& topk_sets) {
  OverlapStats st;
  const std::size_t n = topk_sets.size();
  if (n < 2) return st;
  std::vector<ChannelSet> sorted = topk_sets;
  for (auto& s : sorted) std::sort(s.begin(), s.end());
  st.min_jaccard = 1.0;
  double sum = 0.0;
  std::size_t identical = 0, disjoint = 0;
  ChannelSet scratch;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      scratch.clear();
      std::set_intersection(sorted[i].begin(), sorted[i].end(), sorted[j].begin(), sorted[j].end(),
                            std::back_inserter(scratch));
      const double inter = static_cast<double>(scratch.size());
      const double uni = static_cast<double>(sorted[i].size() + sorted[j].size()) - inter;
      const double jac = uni > 0.0 ? inter / uni : 1.0;
      sum += jac;
      st.min_jaccard = std::min(st.min_jaccard, jac);
      st.max_jaccard = std::max(st.max_jaccard, jac);
      if (jac == 1.0) ++identical;
      if (inter == 0.0) ++disjoint;
      ++st.pairs;
    }
  }
  const double pairs = static_cast<double>(st.pairs);
  st.mean_jaccard = sum / pairs;
  st.identical_fraction = static_cast<double>(identical) / pairs;
  st.disjoint_fraction = static_cast<double>(disjoint) / pairs;
  return st;
}

AnalyzeResult analyze_channels(const Tensor2D& w_f, const Tensor2D& x, std::size_t k) {
  const std::size_t kk = std::min(k, x.cols());
  const ChannelStats stats = compute_channel_stats(w_f, x, kk, 1);
  AnalyzeResult res;
  for (std::size_t i = 0; i < stats.ordered_channels.size(); ++i) {
    const std::size_t c = stats.ordered_channels[i];
    res.frequency_curve.push_back({i, c, stats.freq.at(c)});
  }
  const std::vector<double> mean_abs = column_abs_mean(x);
  for (std::size_t c = 0; c < x.cols(); ++c) {
    const auto it = stats.freq.find(c);
    res.channels.push_back({c, mean_abs[c], stats.importance[c], it == stats.freq.end() ? 0.0 : it->second});
  }
  res.overlap = topk_overlap(stats.topk);
  return res;
}

std::vector<CostRow> cost_table(const std::vector<LayerShape>& shapes) {
  std::vector<CostRow> rows;
  for (const auto& s : shapes) {
    CostRow r;
    r.shape = s;
    r.origin_flops = flops(s, CostVariant::origin);
    r.qe_flops = flops(s, CostVariant::qe);
    r.overhead_pct = 100.0 * static_cast<double>(r.qe_flops - r.origin_flops) / static_cast<double>(r.origin_flops);
    r.origin_params = params_detailed(s, CostVariant::origin);
    if (s.d_in == s.d_out) r.qe_params_formula = static_cast<std::int64_t>(params_formula(s, CostVariant::qe));
    r.qe_params_detailed = params_detailed(s, CostVariant::qe);
    rows.push_back(r);
  }
  return rows;
}

std::vector<LayerShape> read_shapes_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open shapes file");
  std::vector<LayerShape> shapes;
  std::string line;
  std::size_t offset = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    const std::size_t line_off = offset;
    offset += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen && line.rfind("s,", 0) == 0) {
      header_seen = true;
      continue;
    }
    header_seen = true;
    std::stringstream ls(line);
    std::string cell;
    std::vector<std::uint64_t> vals;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t used = 0;
        vals.push_back(std::stoull(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw ParseError(path, line_off, "bad integer '" + cell + "'");
      }
    }
    if (vals.size() != 5) throw ParseError(path, line_off, "expected 5 columns: s,d_in,d_out,r,n_routed");
    LayerShape s{vals[0], vals[1], vals[2], vals[3], vals[4]};
    try {
      s.validate();
    } catch (const InvalidInput& e) {
      throw ParseError(path, line_off, e.what());
    }
    shapes.push_back(s);
  }
  return shapes;
}

std::string cost_table_csv(const std::vector<CostRow>& rows) {
  std::ostringstream os;
  os << "s,d_in,d_out,r,n_routed,origin_flops,qe_flops,overhead_pct,origin_params,qe_params_formula,"
        "qe_params_detailed\n";
  for (const auto& r : rows) {
    char pct[32];
    std::snprintf(pct, sizeof(pct), "%.4f", r.overhead_pct);
    os << r.shape.s << ',' << r.shape.d_in << ',' << r.shape.d_out << ',' << r.shape.r << ',' << r.shape.n_routed
       << ',' << r.origin_flops << ',' << r.qe_flops << ',' << pct << ',' << r.origin_params << ',';
    if (r.qe_params_formula >= 0) os << r.qe_params_formula;
    os << ',' << r.qe_params_detailed << '\n';
  }
  return os.str();
}

}  // namespace qe
