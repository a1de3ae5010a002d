#include "qe/calib.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <thread>

#include "qe/error.hpp"

namespace qe {

std::vector<double> importance_vector(const Tensor2D& w_f) {
  if (!w_f.all_finite()) throw InvalidInput("importance_vector: non-finite weight");
  return column_abs_mean(w_f);
}

ChannelSet token_topk(std::span<const double> x, std::span<const double> importance, std::size_t k) {
  if (x.size() != importance.size()) throw InvalidInput("token_topk: length mismatch");
  if (k < 1 || k > x.size()) {
    throw InvalidInput("token_topk: k=" + std::to_string(k) + " outside [1, " +
                       std::to_string(x.size()) + "]");
  }
  std::vector<double> score(x.size());
  for (std::size_t c = 0; c < x.size(); ++c) score[c] = std::abs(x[c]) * importance[c];
  ChannelSet idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return score[a] > score[b] || (score[a] == score[b] && a < b);
                    });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

FrequencyMap channel_frequency(const std::vector<ChannelSet>& topk_sets, std::size_t k,
                               std::size_t d_in) {
  if (topk_sets.empty()) throw InvalidInput("channel_frequency: empty token list");
  std::vector<std::size_t> counts(d_in, 0);
  std::size_t total = 0;
  for (const auto& s : topk_sets) {
    for (std::size_t c : s) {
      if (c >= d_in) throw InvalidInput("channel_frequency: channel index out of range");
      ++counts[c];
      ++total;
    }
  }
  FrequencyMap freq;
  for (std::size_t c = 0; c < d_in; ++c) {
    if (counts[c] == 0) continue;
    freq[c] = static_cast<double>(k) * static_cast<double>(counts[c]) / static_cast<double>(total);
  }
  return freq;
}

ChannelSet order_by_frequency(const FrequencyMap& freq) {
  ChannelSet order;
  order.reserve(freq.size());
  for (const auto& [c, f] : freq) order.push_back(c);
  // Map iteration is ascending by channel, so a stable sort keeps the lowest index first on ties.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return freq.at(a) > freq.at(b); });
  return order;
}

ChannelPartition partition_channels(const FrequencyMap& freq, std::size_t k, std::size_t n_routed) {
  if (k < 1) throw InvalidInput("partition_channels: k must be >= 1");
  const ChannelSet order = order_by_frequency(freq);
  if (order.empty()) throw InvalidInput("partition_channels: no observed channels, C_s would be empty");
  ChannelPartition p;
  const std::size_t ns = std::min(k, order.size());
  const std::size_t nr = std::min(n_routed * k, order.size() - ns);
  p.token_independent.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(ns));
  p.token_dependent.assign(order.begin() + static_cast<std::ptrdiff_t>(ns),
                           order.begin() + static_cast<std::ptrdiff_t>(ns + nr));
  return p;
}

CoOccurrence co_occurrence(const std::vector<ChannelSet>& topk_sets, const ChannelSet& routed) {
  if (routed.empty()) throw InvalidInput("co_occurrence: C_r is empty");
  const std::size_t maxc = *std::max_element(routed.begin(), routed.end());
  std::vector<std::ptrdiff_t> column(maxc + 1, -1);
  for (std::size_t i = 0; i < routed.size(); ++i) column[routed[i]] = static_cast<std::ptrdiff_t>(i);
  CoOccurrence occ{Tensor2D(topk_sets.size(), routed.size()), routed};
  for (std::size_t t = 0; t < topk_sets.size(); ++t) {
    for (std::size_t c : topk_sets[t]) {
      if (c <= maxc && column[c] >= 0) occ.matrix(t, static_cast<std::size_t>(column[c])) = 1.0;
    }
  }
  return occ;
}

Tensor2D npmi_similarity(const CoOccurrence& occ) {
  const std::size_t tokens = occ.matrix.rows();
  const std::size_t n = occ.matrix.cols();
  if (tokens == 0) throw InvalidInput("npmi_similarity: no tokens");
  const double inv_t = 1.0 / static_cast<double>(tokens);
  // Integer counts keep p(i) and p(i,j) exact rationals until the final division.
  std::vector<std::size_t> single(n, 0);
  std::vector<std::size_t> joint(n * n, 0);
  for (std::size_t t = 0; t < tokens; ++t) {
    auto row = occ.matrix.row(t);
    for (std::size_t i = 0; i < n; ++i) {
      if (row[i] == 0.0) continue;
      ++single[i];
      for (std::size_t j = i; j < n; ++j)
        if (row[j] != 0.0) ++joint[i * n + j];
    }
  }
  Tensor2D s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    s(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const std::size_t nij = joint[i * n + j];
      double v;
      if (nij == 0) {
        v = -1.0;
      } else if (nij == tokens) {
        v = 1.0;
      } else {
        const double pij = static_cast<double>(nij) * inv_t;
        const double pi = static_cast<double>(single[i]) * inv_t;
        const double pj = static_cast<double>(single[j]) * inv_t;
        v = std::log(pij / (pi * pj)) / -std::log(pij);
        v = std::clamp(v, -1.0, 1.0);
      }
      s(i, j) = s(j, i) = v;
    }
  }
  return s;
}

ChannelStats compute_channel_stats(const Tensor2D& w_f, const Tensor2D& x, std::size_t k,
                                   std::size_t n_routed, std::size_t jobs) {
  if (w_f.cols() != x.cols()) {
    throw InvalidInput("compute_channel_stats: activation width " + std::to_string(x.cols()) +
                       " does not match weight d_in " + std::to_string(w_f.cols()));
  }
  if (x.rows() == 0) throw InvalidInput("compute_channel_stats: no calibration tokens");
  ChannelStats st;
  st.importance = importance_vector(w_f);
  const std::size_t kk = std::min(k, x.cols());
  st.topk.resize(x.rows());
  jobs = std::max<std::size_t>(1, std::min(jobs, x.rows()));
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t) st.topk[t] = token_topk(x.row(t), st.importance, kk);
  };
  if (jobs == 1) {
    work(0, x.rows());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (x.rows() + jobs - 1) / jobs;
    for (std::size_t j = 0; j < jobs; ++j) {
      const std::size_t b = j * chunk;
      const std::size_t e = std::min(x.rows(), b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }
  st.freq = channel_frequency(st.topk, kk, x.cols());
  st.ordered_channels = order_by_frequency(st.freq);
  st.partition = partition_channels(st.freq, kk, n_routed);
  return st;
}

}  // namespace qe
