#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "qe/tensor.hpp"

namespace qe {

using ChannelSet = std::vector<std::size_t>;
using FrequencyMap = std::map<std::size_t, double>;

struct ChannelPartition {
  ChannelSet token_independent;  // C_s, the k most frequent channels
  ChannelSet token_dependent;    // C_r, the next N_r·k channels in frequency order
  friend bool operator==(const ChannelPartition&, const ChannelPartition&) = default;
};

struct ChannelStats {
  std::vector<double> importance;   // row-mean of |W_f|
  FrequencyMap freq;
  ChannelSet ordered_channels;      // all observed channels, frequency descending
  ChannelPartition partition;
  std::vector<ChannelSet> topk;     // per-token important channel sets
};

/// w_c = mean over output rows of |W_f[:, c]|.
std::vector<double> importance_vector(const Tensor2D& w_f);

/// Indices of the k largest |x_c|·w_c, ordered by score then lowest index.
ChannelSet token_topk(std::span<const double> x, std::span<const double> importance, std::size_t k);

/// f_c = k·m_c / Σ m over observed channels.
FrequencyMap channel_frequency(const std::vector<ChannelSet>& topk_sets, std::size_t k,
                               std::size_t d_in);

/// Observed channels sorted by frequency descending, lowest index first on ties.
ChannelSet order_by_frequency(const FrequencyMap& freq);

ChannelPartition partition_channels(const FrequencyMap& freq, std::size_t k, std::size_t n_routed);

struct CoOccurrence {
  Tensor2D matrix;        // T x |C_r|, entries 0/1
  ChannelSet channels;    // column order
};

CoOccurrence co_occurrence(const std::vector<ChannelSet>& topk_sets, const ChannelSet& routed);

/// Normalized PMI between co-occurrence columns. Diagonal is 1; never
/// co-occurring pairs get −1, always co-occurring pairs get 1.
Tensor2D npmi_similarity(const CoOccurrence& occ);

/// Runs importance, per-token top-k, frequency and partition over a calibration batch.
/// Token statistics are accumulated in shards of `jobs` workers; the result does not depend on `jobs`.
ChannelStats compute_channel_stats(const Tensor2D& w_f, const Tensor2D& x, std::size_t k,
                                   std::size_t n_routed, std::size_t jobs = 1);

}  // namespace qe
