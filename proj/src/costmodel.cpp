#include "qe/costmodel.hpp"

#include "qe/error.hpp"

namespace qe {

void LayerShape::validate() const {
  if (s == 0 || d_in == 0 || d_out == 0) throw InvalidInput("LayerShape: s, d_in, d_out must be positive");
}

std::uint64_t flops(const LayerShape& sh, CostVariant variant) {
  sh.validate();
  const std::uint64_t origin = sh.s * sh.d_in * sh.d_out;
  if (variant == CostVariant::origin) return origin;
  return origin + sh.s * (sh.d_in + sh.d_out) * sh.r + sh.s * sh.d_in * sh.n_routed;
}

std::uint64_t params_formula(const LayerShape& sh, CostVariant variant) {
  sh.validate();
  if (sh.d_in != sh.d_out) {
    throw InvalidInput("params_formula: the published formula needs d_in == d_out");
  }
  const std::uint64_t d = sh.d_in;
  if (variant == CostVariant::origin) return d * d;
  return d * d + sh.r * d * (1 + sh.n_routed);
}

std::uint64_t params_detailed(const LayerShape& sh, CostVariant variant) {
  sh.validate();
  const std::uint64_t origin = sh.d_in * sh.d_out;
  if (variant == CostVariant::origin) return origin;
  const std::uint64_t rs = sh.r / 2;
  const std::uint64_t rr = sh.r - rs;
  const std::uint64_t shared = sh.d_out * rs + rs * sh.d_in;
  const std::uint64_t routed = sh.n_routed * (sh.d_out * rr + rr * sh.d_in);
  const std::uint64_t router = sh.n_routed > 0 ? sh.d_in * sh.n_routed : 0;
  return origin + shared + routed + router;
}

std::vector<LayerShape> default_shapes() {
  return {
      {128, 3584, 3584, 64, 8},
      {128, 3584, 18944, 64, 8},
      {128, 18944, 3584, 64, 8},
  };
}

}  // namespace qe
