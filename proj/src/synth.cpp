#include "qe/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "qe/error.hpp"

namespace qe {

SynthProfile SynthProfile::none() {
  SynthProfile p;
  p.always_hot = 0;
  p.modality_hot = 0;
  p.n_patterns = 0;
  p.token_hot = 0;
  return p;
}

SynthProfile SynthProfile::from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("<synth profile>", e.byte, e.what());
  }
  SynthProfile p;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("base_std", p.base_std);
  get("always_hot", p.always_hot);
  get("always_hot_magnitude", p.always_hot_magnitude);
  get("modality_hot", p.modality_hot);
  get("modality_magnitude", p.modality_magnitude);
  get("modality_prob", p.modality_prob);
  get("n_patterns", p.n_patterns);
  get("pattern_size", p.pattern_size);
  get("pattern_magnitude", p.pattern_magnitude);
  get("token_hot", p.token_hot);
  get("token_magnitude", p.token_magnitude);
  get("jitter", p.jitter);
  return p;
}

SynthProfile SynthProfile::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open synth profile");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return from_json_text(ss.str());
  } catch (const ParseError& e) {
    throw ParseError(path, e.offset(), e.what());
  }
}

std::string SynthProfile::to_json_text() const {
  nlohmann::json j = {{"base_std", base_std},
                      {"always_hot", always_hot},
                      {"always_hot_magnitude", always_hot_magnitude},
                      {"modality_hot", modality_hot},
                      {"modality_magnitude", modality_magnitude},
                      {"modality_prob", modality_prob},
                      {"n_patterns", n_patterns},
                      {"pattern_size", pattern_size},
                      {"pattern_magnitude", pattern_magnitude},
                      {"token_hot", token_hot},
                      {"token_magnitude", token_magnitude},
                      {"jitter", jitter}};
  return j.dump(2);
}

SynthCalibration synth_calibration(std::size_t d_in, std::size_t tokens, std::size_t n_modalities,
                                   std::uint64_t seed, const SynthProfile& profile, std::uint64_t token_stream) {
  if (n_modalities < 1 || tokens % n_modalities != 0) {
    throw InvalidInput("synth_calibration: T=" + std::to_string(tokens) +
                       " is not divisible by n_modalities=" + std::to_string(n_modalities));
  }
  if (d_in == 0) throw InvalidInput("synth_calibration: d_in must be positive");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> perm(d_in);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);

  SynthCalibration out;
  std::size_t cursor = 0;
  auto draw = [&](std::size_t n) {
    ChannelSet s;
    for (std::size_t i = 0; i < n && cursor < d_in; ++i) s.push_back(perm[cursor++]);
    std::sort(s.begin(), s.end());
    return s;
  };
  out.always_hot = draw(profile.always_hot);
  for (std::size_t m = 0; m < n_modalities; ++m) out.modality_hot.push_back(draw(profile.modality_hot));
  for (std::size_t p = 0; p < profile.n_patterns; ++p) {
    ChannelSet s = draw(profile.pattern_size);
    if (s.empty()) break;
    out.patterns.push_back(std::move(s));
  }

  // Fixed sign per channel: outlier channels keep their polarity across tokens.
  std::vector<double> sign(d_in);
  std::bernoulli_distribution coin(0.5);
  for (double& s : sign) s = coin(rng) ? 1.0 : -1.0;

  std::vector<std::vector<std::size_t>> modality_patterns(n_modalities);
  for (std::size_t p = 0; p < out.patterns.size(); ++p) modality_patterns[p % n_modalities].push_back(p);

  std::seed_seq token_seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(token_stream), static_cast<std::uint32_t>(token_stream >> 32)};
  rng.seed(token_seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> prob(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> any_channel(0, d_in - 1);
  const double base = profile.base_std;
  auto hot = [&](std::size_t c, double magnitude) {
    return sign[c] * magnitude * base * (1.0 + profile.jitter * unit(rng));
  };

  out.x = Tensor2D(tokens, d_in);
  out.modality.resize(tokens);
  const std::size_t per_mod = tokens / n_modalities;
  for (std::size_t t = 0; t < tokens; ++t) {
    const std::size_t m = t / per_mod;
    out.modality[t] = m;
    auto row = out.x.row(t);
    for (double& v : row) v = base * normal(rng);
    for (std::size_t i = 0; i < profile.token_hot; ++i) {
      const std::size_t c = any_channel(rng);
      row[c] = hot(c, profile.token_magnitude);
    }
    if (!modality_patterns[m].empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, modality_patterns[m].size() - 1);
      for (std::size_t c : out.patterns[modality_patterns[m][pick(rng)]]) {
        row[c] = hot(c, profile.pattern_magnitude);
      }
    }
    for (std::size_t c : out.modality_hot[m]) {
      if (prob(rng) < profile.modality_prob) row[c] = hot(c, profile.modality_magnitude);
    }
    for (std::size_t c : out.always_hot) row[c] = hot(c, profile.always_hot_magnitude);
  }
  return out;
}

Tensor2D synth_weight(std::size_t d_out, std::size_t d_in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d_in)));
  Tensor2D w(d_out, d_in);
  for (double& v : w.data()) v = normal(rng);
  return w;
}

}  // namespace qe
