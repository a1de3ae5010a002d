#pragma once

#include <cstdint>
#include <vector>

namespace qe {

struct LayerShape {
  std::uint64_t s = 1;      // sequence length
  std::uint64_t d_in = 1;
  std::uint64_t d_out = 1;
  std::uint64_t r = 64;     // total adapter rank, split evenly between shared and routed
  std::uint64_t n_routed = 8;

  void validate() const;
};

enum class CostVariant { origin, qe };

/// origin: s·d_in·d_out. qe adds s·(d_in + d_out)·r + s·d_in·N_r, which is
/// s·d² + s·d·(2r + N_r) for square layers.
std::uint64_t flops(const LayerShape& shape, CostVariant variant);

/// Published parameter formula d² + r·d·(1 + N_r); square layers only.
std::uint64_t params_formula(const LayerShape& shape, CostVariant variant);

/// Exact member count: W plus shared adapter (rank r/2), N_r routed adapters
/// (rank r/2) and the d_in x N_r router.
std::uint64_t params_detailed(const LayerShape& shape, CostVariant variant);

/// d_in/d_out pairs of Qwen2VL-7B linear layers (hidden 3584, MLP 18944).
std::vector<LayerShape> default_shapes();

}  // namespace qe
