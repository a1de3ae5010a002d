#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "qe/experts.hpp"

namespace qe {

struct PackageLayer {
  std::string name;
  ExpertPack pack;
  /// Full-precision weight kept for evaluation against the reference layer.
  Tensor2D reference_weight;
};

/// A quantized model on disk: `manifest.json` plus one directory of tensor
/// files per layer.
struct Package {
  nlohmann::json config;
  std::vector<PackageLayer> layers;
};

nlohmann::json scheme_to_json(const QuantScheme& s);
QuantScheme scheme_from_json(const nlohmann::json& j);

/// Writes every tensor and then the manifest. Output bytes depend only on the package contents.
void write_package(const std::string& dir, const Package& package);

/// Reads and validates a package; every referenced tensor must exist and
/// match its declared shape.
Package read_package(const std::string& dir);

}  // namespace qe
