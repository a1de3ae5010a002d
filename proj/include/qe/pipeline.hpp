#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "qe/costmodel.hpp"
#include "qe/error.hpp"
#include "qe/experts.hpp"
#include "qe/package.hpp"
#include "qe/refine.hpp"
#include "qe/runtime.hpp"

namespace qe {

struct RunConfig {
  QuantScheme scheme = QuantScheme::w4a(6);
  std::size_t k = 32;
  std::size_t n_routed = 8;
  std::size_t rank = 64;  // split evenly between shared and routed adapters
  std::uint64_t seed = 0;
  bool refine = false;
  RefineConfig refine_cfg;
  std::size_t jobs = 1;

  nlohmann::json to_json() const;
};

/// Failure inside the per-layer pipeline, tagged with where it happened.
class StageError : public Error {
 public:
  StageError(std::string layer, std::string stage, const std::string& what)
      : Error("layer '" + layer + "', stage " + stage + ": " + what),
        layer_(std::move(layer)),
        stage_(std::move(stage)) {}
  const std::string& layer() const noexcept { return layer_; }
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string layer_;
  std::string stage_;
};

struct LayerSummary {
  std::string name;
  std::size_t n_shared = 0;
  std::size_t n_routed_channels = 0;
  std::vector<std::size_t> cluster_sizes;
  double quant_error_fro = 0.0;     // ‖E_q‖_F
  double shared_residual_fro = 0.0; // ‖E_S‖_F
  std::vector<std::string> warnings;
  bool refined = false;
  double refine_initial = 0.0;
  double refine_final = 0.0;
  std::vector<HistoryRow> refine_history;
};

struct LayerBuild {
  ExpertPack pack;
  LayerSummary summary;
};

/// Full per-layer pipeline: channel statistics, partition, shared expert,
/// spectral clustering, routed experts, optional refinement.
LayerBuild quantize_layer(const std::string& name, const Tensor2D& w_f, const Tensor2D& x,
                          const RunConfig& cfg);

/// Named layer inputs listed by a JSON manifest of the form
/// {"layers": [{"name": ..., "<field>": "relative/path.qetf"}]}.
struct NamedTensor {
  std::string name;
  Tensor2D tensor;
};

std::vector<NamedTensor> read_layer_manifest(const std::string& path, const std::string& field);
void write_layer_manifest(const std::string& path, const std::string& field,
                          const std::vector<NamedTensor>& layers);

struct QuantizeResult {
  Package package;
  std::vector<LayerSummary> summaries;
};

/// Layers run on up to cfg.jobs threads; results are ordered as in `model`.
QuantizeResult quantize_model(const std::vector<NamedTensor>& model, const std::vector<NamedTensor>& calib,
                              const RunConfig& cfg);

nlohmann::json evaluate_package(const Package& package, const std::vector<NamedTensor>& activations,
                                 const std::vector<Variant>& variants, std::uint64_t seed);

struct FrequencyRow {
  std::size_t rank = 0;
  std::size_t channel = 0;
  double frequency = 0.0;
};

struct ChannelRow {
  std::size_t channel = 0;
  double mean_abs_activation = 0.0;
  double importance = 0.0;
  double frequency = 0.0;  // 0 when never important
};

struct OverlapStats {
  double mean_jaccard = 0.0;
  double min_jaccard = 0.0;
  double max_jaccard = 0.0;
  double identical_fraction = 0.0;
  double disjoint_fraction = 0.0;
  std::size_t pairs = 0;
};

struct AnalyzeResult {
  std::vector<FrequencyRow> frequency_curve;  // observed channels only
  std::vector<ChannelRow> channels;           // all d_in channels
  OverlapStats overlap;
};

AnalyzeResult analyze_channels(const Tensor2D& w_f, const Tensor2D& x, std::size_t k);
/// Pairwise Jaccard overlap of per-token top-k sets over all token pairs.
OverlapStats topk_overlap(const std::vector<ChannelSet>& topk_sets);

struct CostRow {
  LayerShape shape;
  std::uint64_t origin_flops = 0;
  std::uint64_t qe_flops = 0;
  double overhead_pct = 0.0;
  std::uint64_t origin_params = 0;
  std::int64_t qe_params_formula = -1;  // -1 for non-square layers
  std::uint64_t qe_params_detailed = 0;
};

std::vector<CostRow> cost_table(const std::vector<LayerShape>& shapes);
/// CSV with header s,d_in,d_out,r,n_routed. Blank lines and '#' comments are skipped.
std::vector<LayerShape> read_shapes_csv(const std::string& path);
std::string cost_table_csv(const std::vector<CostRow>& rows);

}  // namespace qe
