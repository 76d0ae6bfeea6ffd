#pragma once

// Note-event front end: raw <note number, IOI> pairs are reduced to the
// quantized <pitch class, rhythm bin> alphabet the error model works with.

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "qbh/error.hpp"

namespace qbh {

struct RawNote {
  double note_number = 60.0;  // fractional MIDI note, 69 = A440
  double ioi_ms = 500.0;      // inter-onset interval, > 0

  bool operator==(const RawNote&) const = default;
};

struct QuantizedEvent {
  int pitch_class = 0;  // [0, 11]
  int rhythm_bin = 0;   // [0, q - 1]
  double raw_ioi_ms = 0.0;

  bool operator==(const QuantizedEvent&) const = default;
};

/// Logarithmic IOI binning.  `ioi_min_ms` and `ioi_max_ms` are the centers of
/// the first and last bins; with the defaults a tempo doubling is +4 bins.
struct QuantizationConfig {
  int q = 29;
  double ioi_min_ms = 30.0;
  double ioi_max_ms = 3840.0;

  void validate() const {
    if (q < 2) throw Error("quantization: q must be at least 2");
    if (!(ioi_min_ms > 0.0) || !(ioi_min_ms < ioi_max_ms))
      throw Error("quantization: require 0 < ioi_min_ms < ioi_max_ms");
  }

  bool operator==(const QuantizationConfig&) const = default;
};

inline double note_from_frequency(double hz) {
  if (!(hz > 0.0)) throw Error("note_from_frequency: frequency must be positive");
  return 69.0 + 12.0 * std::log2(hz / 440.0);
}

/// Mathematical modulus: the result is in [0, 11] for any input.
inline int pitch_class(int note_number) { return ((note_number % 12) + 12) % 12; }

struct OffsetSelection {
  double offset = 0.0;
  std::vector<int> rounded;
};

inline constexpr std::array<double, 10> kPitchOffsets = {0.0, 0.1, 0.2, 0.3, 0.4,
                                                         0.5, 0.6, 0.7, 0.8, 0.9};

inline double offset_rounding_error(std::span<const double> notes, double offset) {
  double e = 0.0;
  for (double m : notes) {
    double r = m + offset - std::round(m + offset);
    e += r * r;
  }
  return e / static_cast<double>(notes.size());
}

/// Picks the offset from {0.0, 0.1, ..., 0.9} minimizing the mean squared
/// rounding error, then rounds every note with it.  Ties go to the smallest
/// offset.
inline OffsetSelection select_offset(std::span<const double> notes) {
  if (notes.empty()) throw Error("select_offset: empty sequence");
  constexpr double kTieTolerance = 1e-12;
  OffsetSelection best;
  double best_err = 0.0;
  bool first = true;
  for (double o : kPitchOffsets) {
    double e = offset_rounding_error(notes, o);
    if (first || e < best_err - kTieTolerance) {
      best.offset = o;
      best_err = e;
      first = false;
    }
  }
  best.rounded.reserve(notes.size());
  for (double m : notes) best.rounded.push_back(static_cast<int>(std::round(m + best.offset)));
  return best;
}

/// IOI bin index; durations outside the bin-center range clamp to the end bins.
inline int quantize_ioi(double ioi_ms, const QuantizationConfig& cfg = {}) {
  if (!(ioi_ms > 0.0)) throw Error("quantize_ioi: non-positive IOI");
  double x = (std::log(ioi_ms) - std::log(cfg.ioi_min_ms)) /
             (std::log(cfg.ioi_max_ms) - std::log(cfg.ioi_min_ms)) * (cfg.q - 1);
  double r = std::round(x);
  if (r < 0.0) return 0;
  if (r > cfg.q - 1) return cfg.q - 1;
  return static_cast<int>(r);
}

/// Bin-center duration of `rhythm_bin`.
inline double dequantize_ioi(int rhythm_bin, const QuantizationConfig& cfg = {}) {
  if (rhythm_bin < 0 || rhythm_bin > cfg.q - 1) throw Error("dequantize_ioi: bin out of range");
  double frac = static_cast<double>(rhythm_bin) / (cfg.q - 1);
  return cfg.ioi_min_ms * std::exp(frac * (std::log(cfg.ioi_max_ms) - std::log(cfg.ioi_min_ms)));
}

inline void check_notes(std::span<const RawNote> notes) {
  for (const auto& n : notes) {
    if (!(n.ioi_ms > 0.0)) throw Error("non-positive IOI");
    if (!std::isfinite(n.note_number)) throw Error("non-finite note number");
  }
}

/// Query front end: offset-minimizing rounding, then pitch class and IOI bin.
inline std::vector<QuantizedEvent> quantize_sequence(std::span<const RawNote> notes,
                                                     const QuantizationConfig& cfg = {}) {
  check_notes(notes);
  if (notes.empty()) return {};
  std::vector<double> pitches;
  pitches.reserve(notes.size());
  for (const auto& n : notes) pitches.push_back(n.note_number);
  OffsetSelection sel = select_offset(pitches);
  std::vector<QuantizedEvent> out;
  out.reserve(notes.size());
  for (std::size_t i = 0; i < notes.size(); ++i) {
    out.push_back({pitch_class(sel.rounded[i]), quantize_ioi(notes[i].ioi_ms, cfg), notes[i].ioi_ms});
  }
  return out;
}

/// Targets are symbolic: notes are rounded individually, no offset search.
inline std::vector<QuantizedEvent> quantize_target(std::span<const RawNote> notes,
                                                   const QuantizationConfig& cfg = {}) {
  check_notes(notes);
  std::vector<QuantizedEvent> out;
  out.reserve(notes.size());
  for (const auto& n : notes) {
    out.push_back({pitch_class(static_cast<int>(std::round(n.note_number))),
                   quantize_ioi(n.ioi_ms, cfg), n.ioi_ms});
  }
  return out;
}

}  // namespace qbh
