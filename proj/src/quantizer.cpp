#include "qe/quantizer.hpp"

#include <algorithm>
#include <cmath>

#include "qe/error.hpp"

namespace qe {

QuantScheme QuantScheme::w4a(int act_bits) {
  QuantScheme s;
  s.weight_bits = 4;
  s.act_bits = act_bits;
  s.weight_mode = WeightMode::per_output_channel_symmetric;
  s.act_mode = ActMode::per_token_symmetric;
  return s;
}

QuantScheme QuantScheme::w3a16() {
  QuantScheme s;
  s.weight_bits = 3;
  s.act_bits = 0;
  s.weight_mode = WeightMode::group_asymmetric;
  s.act_mode = ActMode::none;
  s.group_size = 128;
  return s;
}

void QuantScheme::validate() const {
  if (weight_bits < 2 || weight_bits > 8) {
    throw InvalidInput("QuantScheme: weight_bits must be in [2, 8], got " +
                       std::to_string(weight_bits));
  }
  if (act_bits != 0 && (act_bits < 4 || act_bits > 16)) {
    throw InvalidInput("QuantScheme: act_bits must be 0 or in [4, 16], got " +
                       std::to_string(act_bits));
  }
  if (weight_mode == WeightMode::group_asymmetric && group_size < 1) {
    throw InvalidInput("QuantScheme: group_size must be >= 1");
  }
}

std::string to_string(WeightMode m) {
  return m == WeightMode::per_output_channel_symmetric ? "per_output_channel_symmetric"
                                                       : "group_asymmetric";
}

std::string to_string(ActMode m) {
  return m == ActMode::per_token_symmetric ? "per_token_symmetric" : "none";
}

WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "per_output_channel_symmetric") return WeightMode::per_output_channel_symmetric;
  if (s == "group_asymmetric") return WeightMode::group_asymmetric;
  throw InvalidInput("unknown weight mode '" + s + "'");
}

ActMode act_mode_from_string(const std::string& s) {
  if (s == "per_token_symmetric") return ActMode::per_token_symmetric;
  if (s == "none") return ActMode::none;
  throw InvalidInput("unknown activation mode '" + s + "'");
}

std::size_t QuantizedWeight::groups_per_row() const noexcept {
  if (scheme.weight_mode == WeightMode::per_output_channel_symmetric) return 1;
  return (cols + scheme.group_size - 1) / scheme.group_size;
}

double round_half_away(double v) noexcept { return std::round(v); }

QuantizedWeight quantize_weight(const Tensor2D& w, const QuantScheme& scheme,
                                const std::vector<std::size_t>& skip_cols) {
  scheme.validate();
  if (!w.all_finite()) throw InvalidInput("quantize_weight: non-finite weight");
  std::vector<bool> skip(w.cols(), false);
  for (std::size_t c : skip_cols) {
    if (c >= w.cols()) {
      throw InvalidInput("quantize_weight: skip column " + std::to_string(c) + " out of range");
    }
    skip[c] = true;
  }

  QuantizedWeight q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.scheme = scheme;
  q.codes.assign(w.size(), 0);

  if (scheme.weight_mode == WeightMode::per_output_channel_symmetric) {
    const double qmax = std::ldexp(1.0, scheme.weight_bits - 1) - 1.0;
    q.scales.assign(w.rows(), 1.0);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double maxabs = 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c)
        if (!skip[c]) maxabs = std::max(maxabs, std::abs(w(r, c)));
      if (maxabs == 0.0) continue;
      q.scales[r] = maxabs / qmax;
      const double inv = qmax / maxabs;
      for (std::size_t c = 0; c < w.cols(); ++c) {
        if (skip[c]) continue;
        const double code = std::clamp(round_half_away(w(r, c) * inv), -qmax, qmax);
        q.codes[r * w.cols() + c] = static_cast<std::int32_t>(code);
      }
    }
    return q;
  }

  const double levels = std::ldexp(1.0, scheme.weight_bits) - 1.0;
  const std::size_t g = scheme.group_size;
  const std::size_t ngroups = q.groups_per_row();
  q.scales.assign(w.rows() * ngroups, 1.0);
  q.zero_points.assign(w.rows() * ngroups, 0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t gi = 0; gi < ngroups; ++gi) {
      const std::size_t c0 = gi * g;
      const std::size_t c1 = std::min(w.cols(), c0 + g);
      double lo = 0.0, hi = 0.0;
      bool any = false;
      for (std::size_t c = c0; c < c1; ++c) {
        const double v = skip[c] ? 0.0 : w(r, c);
        if (!any) {
          lo = hi = v;
          any = true;
        } else {
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      }
      if (hi == lo) {
        // Constant group: exact only when the constant is zero.
        if (hi == 0.0) continue;
        lo = std::min(lo, 0.0);
        hi = std::max(hi, 0.0);
      }
      const double scale = (hi - lo) / levels;
      const double inv = levels / (hi - lo);
      const double zp = std::clamp(round_half_away(-lo * inv), 0.0, levels);
      q.scales[r * ngroups + gi] = scale;
      q.zero_points[r * ngroups + gi] = static_cast<std::int32_t>(zp);
      for (std::size_t c = c0; c < c1; ++c) {
        const double v = skip[c] ? 0.0 : w(r, c);
        const double code = std::clamp(round_half_away(v * inv) + zp, 0.0, levels);
        q.codes[r * w.cols() + c] = static_cast<std::int32_t>(code);
      }
    }
  }
  return q;
}

Tensor2D dequantize_weight(const QuantizedWeight& q) {
  Tensor2D out(q.rows, q.cols);
  if (q.scheme.weight_mode == WeightMode::per_output_channel_symmetric) {
    for (std::size_t r = 0; r < q.rows; ++r)
      for (std::size_t c = 0; c < q.cols; ++c)
        out(r, c) = static_cast<double>(q.codes[r * q.cols + c]) * q.scales[r];
    return out;
  }
  const std::size_t g = q.scheme.group_size;
  const std::size_t ngroups = q.groups_per_row();
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t c = 0; c < q.cols; ++c) {
      const std::size_t gi = r * ngroups + c / g;
      out(r, c) = static_cast<double>(q.codes[r * q.cols + c] - q.zero_points[gi]) * q.scales[gi];
    }
  }
  return out;
}

std::vector<double> quantize_activation_row(std::span<const double> x, int act_bits) {
  std::vector<double> out(x.begin(), x.end());
  if (act_bits == 0) return out;
  if (act_bits < 4 || act_bits > 16) {
    throw InvalidInput("quantize_activations: act_bits must be 0 or in [4, 16]");
  }
  const double qmax = std::ldexp(1.0, act_bits - 1) - 1.0;
  double maxabs = 0.0;
  for (double v : x) maxabs = std::max(maxabs, std::abs(v));
  if (maxabs == 0.0) return out;
  const double inv = qmax / maxabs;
  for (double& v : out) {
    const double code = std::clamp(round_half_away(v * inv), -qmax, qmax);
    // (code * maxabs) / qmax keeps the endpoints exact.
    v = code * maxabs / qmax;
  }
  return out;
}

Tensor2D quantize_activations(const Tensor2D& x, int act_bits) {
  if (act_bits == 0) return x;
  Tensor2D out(x.rows(), x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto q = quantize_activation_row(x.row(t), act_bits);
    std::copy(q.begin(), q.end(), out.row(t).begin());
  }
  return out;
}

Tensor2D quant_error(const Tensor2D& w_f, const QuantizedWeight& q) {
  if (w_f.rows() != q.rows || w_f.cols() != q.cols) {
    throw InvalidInput("quant_error: weight shape does not match quantized weight");
  }
  return w_f - dequantize_weight(q);
}

}  // namespace qe
