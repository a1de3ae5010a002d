#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qe/calib.hpp"
#include "qe/tensor.hpp"

namespace qe {

/// Outlier structure of the synthetic calibration generator.
///
/// Channel roles are drawn disjointly from one seeded permutation, in this
/// order: always-hot channels, per-modality hot sets, co-occurrence patterns.
/// Counts that do not fit in d_in are truncated. Magnitudes are multiples of
/// `base_std`.
struct SynthProfile {
  double base_std = 1.0;
  std::size_t always_hot = 8;          // hot on every token
  double always_hot_magnitude = 10.0;
  std::size_t modality_hot = 4;        // per modality
  double modality_magnitude = 6.0;
  double modality_prob = 0.7;          // chance each modality channel fires on a token
  std::size_t n_patterns = 8;          // patterns are dealt round-robin to modalities
  std::size_t pattern_size = 4;
  double pattern_magnitude = 6.0;      // each token fires exactly one pattern of its modality
  std::size_t token_hot = 2;           // random extra hot channels per token
  double token_magnitude = 4.0;
  double jitter = 0.25;                // relative spread of hot magnitudes

  static SynthProfile none();
  static SynthProfile from_json_file(const std::string& path);
  static SynthProfile from_json_text(const std::string& text);
  std::string to_json_text() const;
};

struct SynthCalibration {
  Tensor2D x;                          // T x d_in
  std::vector<std::size_t> modality;   // per token, contiguous blocks of T / n_modalities
  ChannelSet always_hot;
  std::vector<ChannelSet> modality_hot;
  std::vector<ChannelSet> patterns;
};

/// Channel roles and polarities come from `seed`; token values come from a
/// separate stream, so calibration and held-out sets drawn with different
/// `token_stream` values share the same outlier structure.
SynthCalibration synth_calibration(std::size_t d_in, std::size_t tokens, std::size_t n_modalities,
                                   std::uint64_t seed, const SynthProfile& profile,
                                   std::uint64_t token_stream = 0);

/// Gaussian weight with std 1/sqrt(d_in).
Tensor2D synth_weight(std::size_t d_out, std::size_t d_in, std::uint64_t seed);

}  // namespace qe
