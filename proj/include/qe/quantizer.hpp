#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qe/tensor.hpp"

namespace qe {

enum class WeightMode { per_output_channel_symmetric, group_asymmetric };
enum class ActMode { per_token_symmetric, none };

struct QuantScheme {
  int weight_bits = 4;
  int act_bits = 8;  // 0 keeps activations in full precision
  WeightMode weight_mode = WeightMode::per_output_channel_symmetric;
  ActMode act_mode = ActMode::per_token_symmetric;
  std::size_t group_size = 128;

  /// W4A6 / W4A8: per-output-channel symmetric weights, per-token symmetric activations.
  static QuantScheme w4a(int act_bits);
  /// W3A16: group-wise asymmetric weights (group 128), full-precision activations.
  static QuantScheme w3a16();

  void validate() const;
  friend bool operator==(const QuantScheme&, const QuantScheme&) = default;
};

std::string to_string(WeightMode m);
std::string to_string(ActMode m);
WeightMode weight_mode_from_string(const std::string& s);
ActMode act_mode_from_string(const std::string& s);

struct QuantizedWeight {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> codes;       // rows x cols, row-major
  std::vector<double> scales;            // rows (symmetric) or rows x groups (asymmetric)
  std::vector<std::int32_t> zero_points; // rows x groups, asymmetric only
  QuantScheme scheme;

  std::size_t groups_per_row() const noexcept;
  friend bool operator==(const QuantizedWeight&, const QuantizedWeight&) = default;
};

/// Round half away from zero.
double round_half_away(double v) noexcept;

/// Round-to-nearest weight quantization. Columns listed in `skip_cols` are
/// zeroed before scales are computed, so they receive code 0 (or the zero
/// point) and do not influence their row's range.
QuantizedWeight quantize_weight(const Tensor2D& w, const QuantScheme& scheme,
                                const std::vector<std::size_t>& skip_cols = {});

Tensor2D dequantize_weight(const QuantizedWeight& q);

/// Per-token symmetric fake quantization; act_bits == 0 is the identity.
Tensor2D quantize_activations(const Tensor2D& x, int act_bits);
std::vector<double> quantize_activation_row(std::span<const double> x, int act_bits);

/// W_f − dequantize(Q).
Tensor2D quant_error(const Tensor2D& w_f, const QuantizedWeight& q);

}  // namespace qe
