#pragma once

// Fixtures shared by the unit tests and the acceptance suite.

#include <cstdint>
#include <vector>

#include "qbh/qbh.hpp"

namespace qbh::testing {

/// Two-state gambler: a fair die (a) and a die loaded towards 4 (b).  The
/// gambler starts honest and switches dice with probability 0.1.
/// Observations are die faces 1..6 stored as 0..5.
inline GenericHmm dishonest_gambler() {
  GenericHmm h;
  h.transition = {{0.9, 0.1}, {0.1, 0.9}};
  h.emission = {std::vector<double>(6, 1.0 / 6.0), {0.1, 0.1, 0.1, 0.5, 0.1, 0.1}};
  h.initial = {1.0, 0.0};
  return h;
}

inline GenericHmm honest_gambler() {
  GenericHmm h;
  h.transition = {{1.0}};
  h.emission = {std::vector<double>(6, 1.0 / 6.0)};
  h.initial = {1.0};
  return h;
}

inline std::vector<int> rolls_154() { return {0, 4, 3}; }

/// Random table over [lo, hi] with a few non-zero bins around 0.
inline Distribution sparse_table(Rng& rng, int lo, int hi, int radius) {
  Distribution d(lo, hi);
  for (int x = -radius; x <= radius; ++x)
    if (d.contains(x) && (x == 0 || rng.uniform() < 0.7)) d.ref(x) = 0.05 + rng.uniform();
  d.normalize();
  return d;
}

inline Distribution dense_table(Rng& rng, int lo, int hi) {
  Distribution d(lo, hi);
  for (double& v : d.p) v = 0.01 + rng.uniform();
  d.normalize();
  return d;
}

/// Random parameters.  Sparse tables keep exhaustive path enumeration small.
inline ErrorModelParams random_params(Rng& rng, bool sparse, int L = 2, int M = 2, QuantizationConfig quant = {}) {
  ErrorModelParams p = default_params(L, M, quant);
  p.edit = {dense_table(rng, 0, p.num_edit_classes() - 1)};
  if (sparse) {
    p.modulation = {sparse_table(rng, kKeyLo, kKeyHi, 1)};
    p.tempo_change = {sparse_table(rng, kTempoLo, kTempoHi, 1)};
    p.pitch_error = {sparse_table(rng, kKeyLo, kKeyHi, 1)};
    p.rhythm_error = {sparse_table(rng, -p.rhythm_span(), p.rhythm_span(), 2)};
  } else {
    p.modulation = {dense_table(rng, kKeyLo, kKeyHi)};
    p.tempo_change = {dense_table(rng, kTempoLo, kTempoHi)};
    p.pitch_error = {dense_table(rng, kKeyLo, kKeyHi)};
    p.rhythm_error = {dense_table(rng, -p.rhythm_span(), p.rhythm_span())};
  }
  p.init_tempo_sigma = 0.5 + 2.0 * rng.uniform();
  return p;
}

/// Random quantized sequence; durations are bin centers with a little
/// jitter so that join and elaboration sums exercise re-quantization.
inline std::vector<QuantizedEvent> random_events(Rng& rng, std::size_t n, const QuantizationConfig& quant = {},
                                                 int center = 14, int spread = 3) {
  std::vector<QuantizedEvent> out;
  for (std::size_t i = 0; i < n; ++i) {
    int bin = std::clamp(center + rng.uniform_int(-spread, spread), 0, quant.q - 1);
    double ms = dequantize_ioi(bin, quant) * std::exp(rng.uniform(-0.03, 0.03));
    out.push_back({rng.uniform_int(0, 11), quantize_ioi(ms, quant), ms});
  }
  return out;
}

/// A query near the target: pitch classes shifted by a constant and
/// occasionally perturbed, rhythm bins near the target's.
inline std::vector<QuantizedEvent> noisy_copy(Rng& rng, const std::vector<QuantizedEvent>& target, std::size_t start,
                                              std::size_t n, const QuantizationConfig& quant = {}) {
  std::vector<QuantizedEvent> out;
  int shift = rng.uniform_int(0, 11);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = target[std::min(start + i, target.size() - 1)];
    int pc = pitch_class(t.pitch_class + shift + (rng.uniform() < 0.2 ? rng.uniform_int(-1, 1) : 0));
    int bin = std::clamp(t.rhythm_bin + (rng.uniform() < 0.3 ? rng.uniform_int(-1, 1) : 0), 0, quant.q - 1);
    out.push_back({pc, bin, dequantize_ioi(bin, quant)});
  }
  return out;
}

}  // namespace qbh::testing
