// qe: calibrate, quantize and evaluate linear layers with token-aware
// low-rank error compensation.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "qe/error.hpp"
#include "qe/pipeline.hpp"
#include "qe/synth.hpp"
#include "qe/tensor_file.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kInputError = 2, kNumericError = 3, kMissingMember = 4 };

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw qe::Error("cannot write " + path);
  out << text;
}

std::size_t resolve_jobs(std::size_t flag) {
  if (const char* env = std::getenv("QE_JOBS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    std::cerr << "warning: ignoring invalid QE_JOBS='" << env << "'\n";
  }
  return std::max<std::size_t>(1, flag);
}

void print_summary(const qe::LayerSummary& s) {
  std::cout << "layer " << s.name << ": |C_s|=" << s.n_shared << " |C_r|=" << s.n_routed_channels << " clusters=[";
  for (std::size_t i = 0; i < s.cluster_sizes.size(); ++i) std::cout << (i ? "," : "") << s.cluster_sizes[i];
  std::cout << "] |E_q|_F=" << s.quant_error_fro << " |E_S|_F=" << s.shared_residual_fro;
  if (s.refined) std::cout << " refine_loss=" << s.refine_initial << "->" << s.refine_final;
  std::cout << '\n';
  for (const auto& w : s.warnings) std::cerr << "warning: layer " << s.name << ": " << w << '\n';
}

std::string history_csv(const std::vector<qe::HistoryRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "iter,lr,L,L_reg,L_cls\n";
  for (const auto& r : rows) os << r.iter << ',' << r.lr << ',' << r.total << ',' << r.reg << ',' << r.cls << '\n';
  return os.str();
}

struct QuantizeOpts {
  std::string model, calib, out;
  int wbits = 4;
  int abits = 6;
  std::string wmode = "sym";
  std::size_t group_size = 128;
  std::size_t k = 32;
  std::size_t experts = 8;
  std::size_t rank = 64;
  bool refine = false;
  std::size_t refine_epochs = 16;
  std::size_t refine_iters = 100;
  double lr = 1e-4;
  bool symmetric_standardize = false;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

int run_quantize(const QuantizeOpts& o) {
  qe::RunConfig cfg;
  cfg.scheme.weight_bits = o.wbits;
  cfg.scheme.act_bits = o.abits;
  cfg.scheme.act_mode = o.abits == 0 ? qe::ActMode::none : qe::ActMode::per_token_symmetric;
  if (o.wmode == "sym") {
    cfg.scheme.weight_mode = qe::WeightMode::per_output_channel_symmetric;
  } else if (o.wmode == "asym") {
    cfg.scheme.weight_mode = qe::WeightMode::group_asymmetric;
  } else {
    throw qe::InvalidInput("--wmode must be 'sym' or 'asym'");
  }
  cfg.scheme.group_size = o.group_size;
  cfg.k = o.k;
  cfg.n_routed = o.experts;
  cfg.rank = o.rank;
  cfg.seed = o.seed;
  cfg.refine = o.refine;
  cfg.refine_cfg.epochs = o.refine_epochs;
  cfg.refine_cfg.iters_per_epoch = o.refine_iters;
  cfg.refine_cfg.lr = o.lr;
  cfg.refine_cfg.seed = o.seed;
  cfg.refine_cfg.symmetric_standardize = o.symmetric_standardize;
  cfg.jobs = resolve_jobs(o.jobs);

  const auto model = qe::read_layer_manifest(o.model, "weight");
  const auto calib = qe::read_layer_manifest(o.calib, "activations");
  qe::QuantizeResult res = qe::quantize_model(model, calib, cfg);
  for (const auto& s : res.summaries) print_summary(s);
  qe::write_package(o.out, res.package);
  for (const auto& s : res.summaries) {
    if (s.refined) write_text((fs::path(o.out) / ("refine_history_" + s.name + ".csv")).string(),
                              history_csv(s.refine_history));
  }
  std::cout << "wrote package " << o.out << " (" << res.package.layers.size() << " layers)\n";
  return kOk;
}

int run_eval(const std::string& package_dir, const std::string& calib, const std::string& variants,
             std::uint64_t seed, const std::string& out) {
  std::vector<qe::Variant> vs;
  for (const auto& v : split_list(variants)) vs.push_back(qe::variant_from_string(v));
  if (vs.empty()) throw qe::InvalidInput("--variants is empty");
  const qe::Package pkg = qe::read_package(package_dir);
  const auto acts = qe::read_layer_manifest(calib, "activations");
  const json report = qe::evaluate_package(pkg, acts, vs, seed);
  write_text(out, report.dump(2) + "\n");
  return kOk;
}

int run_analyze(const std::string& calib, const std::string& weight, std::size_t k, const std::string& prefix) {
  const qe::Tensor2D x = qe::read_tensor(calib);
  const qe::Tensor2D w = qe::read_tensor(weight);
  if (x.cols() != w.cols()) throw qe::InvalidInput("activation width does not match weight d_in");
  const qe::AnalyzeResult res = qe::analyze_channels(w, x, k);

  std::ostringstream freq, chan, overlap;
  freq.precision(17);
  chan.precision(17);
  overlap.precision(17);
  freq << "rank,channel,frequency\n";
  for (const auto& r : res.frequency_curve) freq << r.rank << ',' << r.channel << ',' << r.frequency << '\n';
  chan << "channel,mean_abs_activation,importance,frequency\n";
  for (const auto& r : res.channels)
    chan << r.channel << ',' << r.mean_abs_activation << ',' << r.importance << ',' << r.frequency << '\n';
  overlap << "statistic,value\n"
          << "pairs," << res.overlap.pairs << '\n'
          << "mean_jaccard," << res.overlap.mean_jaccard << '\n'
          << "min_jaccard," << res.overlap.min_jaccard << '\n'
          << "max_jaccard," << res.overlap.max_jaccard << '\n'
          << "identical_fraction," << res.overlap.identical_fraction << '\n'
          << "disjoint_fraction," << res.overlap.disjoint_fraction << '\n';
  if (prefix.empty() || prefix == "-") {
    std::cout << freq.str();
    return kOk;
  }
  write_text(prefix + "_freq.csv", freq.str());
  write_text(prefix + "_channels.csv", chan.str());
  write_text(prefix + "_overlap.csv", overlap.str());
  return kOk;
}

int run_cost(const std::string& shapes_file, const std::string& format, const std::string& out) {
  const auto shapes = shapes_file.empty() ? qe::default_shapes() : qe::read_shapes_csv(shapes_file);
  const auto rows = qe::cost_table(shapes);
  if (format == "json") {
    json arr = json::array();
    for (const auto& r : rows) {
      arr.push_back({{"s", r.shape.s},
                     {"d_in", r.shape.d_in},
                     {"d_out", r.shape.d_out},
                     {"r", r.shape.r},
                     {"n_routed", r.shape.n_routed},
                     {"origin_flops", r.origin_flops},
                     {"qe_flops", r.qe_flops},
                     {"overhead_pct", r.overhead_pct},
                     {"origin_params", r.origin_params},
                     {"qe_params_formula", r.qe_params_formula >= 0 ? json(r.qe_params_formula) : json(nullptr)},
                     {"qe_params_detailed", r.qe_params_detailed}});
    }
    write_text(out, arr.dump(2) + "\n");
  } else if (format == "csv") {
    write_text(out, qe::cost_table_csv(rows));
  } else {
    throw qe::InvalidInput("--format must be csv or json");
  }
  return kOk;
}

struct SynthOpts {
  std::size_t layers = 2, d_in = 64, d_out = 64, tokens = 2048, holdout = 512, modalities = 2;
  std::string profile, out;
  std::uint64_t seed = 0;
};

int run_synth(const SynthOpts& o) {
  const qe::SynthProfile profile =
      o.profile.empty() ? qe::SynthProfile{} : qe::SynthProfile::from_json_file(o.profile);
  std::vector<qe::NamedTensor> weights, calib, holdout;
  for (std::size_t l = 0; l < o.layers; ++l) {
    const std::string name = "layer" + std::to_string(l);
    const std::uint64_t s = o.seed * 1000003ull + l * 7919ull;
    weights.push_back({name, qe::synth_weight(o.d_out, o.d_in, s + 1)});
    calib.push_back({name, qe::synth_calibration(o.d_in, o.tokens, o.modalities, s + 2, profile, 0).x});
    holdout.push_back({name, qe::synth_calibration(o.d_in, o.holdout, o.modalities, s + 2, profile, 1).x});
  }
  fs::create_directories(o.out);
  qe::write_layer_manifest((fs::path(o.out) / "model.json").string(), "weight", weights);
  qe::write_layer_manifest((fs::path(o.out) / "calib.json").string(), "activations", calib);
  qe::write_layer_manifest((fs::path(o.out) / "holdout.json").string(), "activations", holdout);
  std::cout << "wrote synthetic model and activations to " << o.out << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qe: token-aware quantization error compensation for linear layers"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  QuantizeOpts q;
  auto* quant = app.add_subcommand("quantize", "quantize a model and build shared/routed experts");
  quant->add_option("--model", q.model, "model manifest (JSON)")->required();
  quant->add_option("--calib", q.calib, "calibration activation manifest (JSON)")->required();
  quant->add_option("--out", q.out, "output package directory")->required();
  quant->add_option("--wbits", q.wbits, "weight bits");
  quant->add_option("--abits", q.abits, "activation bits (0 = full precision)");
  quant->add_option("--wmode", q.wmode, "weight mode: sym (per-output-channel) or asym (group-wise)");
  quant->add_option("--group-size", q.group_size, "group size for asym mode");
  quant->add_option("--k", q.k, "important channels per token");
  quant->add_option("--experts", q.experts, "routed experts N_r");
  quant->add_option("--rank", q.rank, "total adapter rank (split evenly)");
  quant->add_flag("--refine", q.refine, "refine routed experts and router");
  quant->add_option("--refine-epochs", q.refine_epochs);
  quant->add_option("--refine-iters", q.refine_iters);
  quant->add_option("--lr", q.lr, "refinement learning rate");
  quant->add_flag("--symmetric-standardize", q.symmetric_standardize);
  quant->add_option("--seed", q.seed);
  quant->add_option("--jobs", q.jobs, "parallel layers (QE_JOBS overrides)");

  std::string e_pkg, e_calib, e_variants = "rtn,shared,qe", e_out;
  std::uint64_t e_seed = 0;
  auto* eval = app.add_subcommand("eval", "evaluate a package on held-out activations");
  eval->add_option("--package", e_pkg)->required();
  eval->add_option("--calib", e_calib, "activation manifest (JSON)")->required();
  eval->add_option("--variants", e_variants, "comma list of fp,rtn,shared,qe,random,oracle");
  eval->add_option("--seed", e_seed, "seed for random routing");
  eval->add_option("--out", e_out, "report path (stdout if omitted)");

  std::string a_calib, a_weight, a_out;
  std::size_t a_k = 32;
  auto* analyze = app.add_subcommand("analyze", "important-channel frequency and overlap statistics");
  analyze->add_option("--calib", a_calib, "activation tensor file")->required();
  analyze->add_option("--weight", a_weight, "weight tensor file")->required();
  analyze->add_option("--k", a_k);
  analyze->add_option("--out", a_out, "output prefix for CSV files (stdout frequency curve if omitted)");

  std::string c_shapes, c_format = "csv", c_out;
  auto* cost = app.add_subcommand("cost", "FLOPs and parameter counts");
  cost->add_option("--shapes", c_shapes, "CSV of s,d_in,d_out,r,n_routed (default: built-in list)");
  cost->add_option("--format", c_format, "csv or json");
  cost->add_option("--out", c_out);

  SynthOpts so;
  auto* synth = app.add_subcommand("synth", "generate a synthetic model with two-modality activations");
  synth->add_option("--layers", so.layers);
  synth->add_option("--d-in", so.d_in);
  synth->add_option("--d-out", so.d_out);
  synth->add_option("--tokens", so.tokens);
  synth->add_option("--holdout", so.holdout);
  synth->add_option("--modalities", so.modalities);
  synth->add_option("--profile", so.profile, "synthetic outlier profile (JSON)");
  synth->add_option("--seed", so.seed);
  synth->add_option("--out", so.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInputError;
  }

  try {
    if (*quant) return run_quantize(q);
    if (*eval) return run_eval(e_pkg, e_calib, e_variants, e_seed, e_out);
    if (*analyze) return run_analyze(a_calib, a_weight, a_k, a_out);
    if (*cost) return run_cost(c_shapes, c_format, c_out);
    if (*synth) return run_synth(so);
  } catch (const qe::MissingMember& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kMissingMember;
  } catch (const qe::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInputError;
  } catch (const qe::InvalidInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInputError;
  } catch (const qe::StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumericError;
  } catch (const qe::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumericError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumericError;
  }
  return kOk;
}
