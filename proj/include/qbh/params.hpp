#pragma once

// Tied parameters of the query error model.
//
// Every probability table is indexed by an error value (a "delta"), never by
// state.  Each component keeps one table per context; the ContextMap decides
// which context a state (or, for edits, a target position) belongs to.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qbh/distribution.hpp"
#include "qbh/events.hpp"

namespace qbh {

// Transposition and tempo cluster ranges.
inline constexpr int kKeyLo = -5;
inline constexpr int kKeyHi = 6;
inline constexpr int kNumKeys = 12;
inline constexpr int kTempoLo = -4;
inline constexpr int kTempoHi = 4;
inline constexpr int kNumTempi = 9;
inline constexpr int kNumClusters = kNumKeys * kNumTempi;

/// Signed pitch-class difference folded into [-5, 6].
inline int wrap_key(int d) { return ((d - kKeyLo) % 12 + 12) % 12 + kKeyLo; }

enum class EditKind { Same, Join, Elab };

/// One edit symbol.  Positions are 0-based target indices.  Same is the
/// canonical form of a length-1 join or elaboration.
struct EditState {
  EditKind kind = EditKind::Same;
  std::size_t pos = 0;
  int order = 1;  // l for Join, m for Elab, 1 for Same
  int step = 1;   // j in [1, m] for Elab, 1 otherwise

  bool operator==(const EditState&) const = default;
};

/// Context assignment hooks.  An empty function means "context 0".
///
/// The edit context is a function of the target position being entered, so
/// every state that proceeds to that position shares one edit table.  The
/// other four components are assigned per edit state.
struct ContextMap {
  using PositionFn = std::function<std::size_t(std::span<const QuantizedEvent> target, std::size_t pos)>;
  using StateFn = std::function<std::size_t(std::span<const QuantizedEvent> target, const EditState&)>;

  PositionFn edit;
  StateFn modulation;
  StateFn tempo_change;
  StateFn pitch_error;
  StateFn rhythm_error;
};

struct ErrorModelParams {
  int max_join = 2;  // L
  int max_elab = 2;  // M
  QuantizationConfig quant;
  double init_tempo_sigma = 1.5;

  // One table per context.
  std::vector<Distribution> edit;          // classes [Same, Join^2..L, Elab^2..M]
  std::vector<Distribution> modulation;    // delta K in [-5, 6]
  std::vector<Distribution> tempo_change;  // delta S in [-4, 4]
  std::vector<Distribution> pitch_error;   // delta P in [-5, 6]
  std::vector<Distribution> rhythm_error;  // delta R in [-(q-1), q-1]

  ContextMap contexts;

  int num_edit_classes() const { return max_join + max_elab - 1; }
  int rhythm_span() const { return quant.q - 1; }
};

/// Edit class index of a state: 0 = Same, then joins by order, then
/// elaborations by order.
inline int edit_class(const EditState& e, int max_join) {
  switch (e.kind) {
    case EditKind::Same: return 0;
    case EditKind::Join: return e.order - 1;
    case EditKind::Elab: return max_join - 1 + e.order - 1;
  }
  return 0;
}

inline std::string edit_class_name(int cls, int max_join) {
  if (cls == 0) return "Same";
  if (cls < max_join) return "Join" + std::to_string(cls + 1);
  return "Elab" + std::to_string(cls - max_join + 2);
}

inline Distribution default_edit_distribution(int max_join, int max_elab) {
  // 0.95 / 0.03 / 0.02 for L = M = 2; longer edits split the join and
  // elaboration mass evenly.
  Distribution d(0, max_join + max_elab - 2);
  d.ref(0) = 0.95;
  if (max_join > 1)
    for (int c = 1; c < max_join; ++c) d.ref(c) = 0.03 / (max_join - 1);
  if (max_elab > 1)
    for (int c = max_join; c < max_join + max_elab - 1; ++c) d.ref(c) = 0.02 / (max_elab - 1);
  d.normalize();
  return d;
}

/// Starting parameters: unit-sigma discrete normals centered on "no error"
/// for every error and cluster-change table.
inline ErrorModelParams default_params(int max_join = 2, int max_elab = 2,
                                       QuantizationConfig quant = {}) {
  if (max_join < 1 || max_elab < 1) throw Error("L and M must be at least 1");
  quant.validate();
  ErrorModelParams p;
  p.max_join = max_join;
  p.max_elab = max_elab;
  p.quant = quant;
  p.edit = {default_edit_distribution(max_join, max_elab)};
  p.modulation = {discrete_normal(kKeyLo, kKeyHi, 0.0, 1.0)};
  p.tempo_change = {discrete_normal(kTempoLo, kTempoHi, 0.0, 1.0)};
  p.pitch_error = {discrete_normal(kKeyLo, kKeyHi, 0.0, 1.0)};
  p.rhythm_error = {discrete_normal(-(quant.q - 1), quant.q - 1, 0.0, 1.0)};
  return p;
}

inline void validate_params(const ErrorModelParams& p, double tol = 1e-9) {
  if (p.max_join < 1 || p.max_elab < 1) throw Error("params: L and M must be at least 1");
  p.quant.validate();
  if (!(p.init_tempo_sigma > 0.0)) throw Error("params: init_tempo_sigma must be positive");
  auto check = [&](const std::vector<Distribution>& tables, int lo, int hi, const char* name) {
    if (tables.empty()) throw Error(std::string("params: no ") + name + " table");
    for (const auto& d : tables) {
      if (d.lo != lo || d.hi() != hi) throw Error(std::string("params: ") + name + " has the wrong support");
      validate_distribution(d, tol, std::string("params: ") + name);
    }
  };
  check(p.edit, 0, p.num_edit_classes() - 1, "edit");
  check(p.modulation, kKeyLo, kKeyHi, "modulation");
  check(p.tempo_change, kTempoLo, kTempoHi, "tempo_change");
  check(p.pitch_error, kKeyLo, kKeyHi, "pitch_error");
  check(p.rhythm_error, -p.rhythm_span(), p.rhythm_span(), "rhythm_error");
}

enum class Variant { Full, Restricted, Local, Cumulative };

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::Full;
  if (s == "restricted") return Variant::Restricted;
  if (s == "local") return Variant::Local;
  if (s == "cumulative") return Variant::Cumulative;
  throw Error("unknown variant '" + s + "' (expected full, restricted, local or cumulative)");
}

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::Restricted: return "restricted";
    case Variant::Local: return "local";
    case Variant::Cumulative: return "cumulative";
  }
  return "full";
}

// Tempo bins for a +-40% change: 4 bins per doubling, log2(1.4) * 4 ~ 1.94.
inline constexpr int kRestrictedTempoBins = 2;
inline constexpr int kRestrictedKeySteps = 1;

namespace detail {
inline void restrict_support(Distribution& d, int lo, int hi) {
  for (int x = d.lo; x <= d.hi(); ++x)
    if (x < lo || x > hi) d.ref(x) = 0.0;
  if (d.sum() <= 0.0) d.ref(0) = 1.0;
  d.normalize();
}
}  // namespace detail

/// Model variants as parameter transforms.  Zeroed bins stay zero under
/// re-estimation, so the variant holds throughout training.
inline ErrorModelParams apply_variant(ErrorModelParams p, Variant v) {
  switch (v) {
    case Variant::Full: break;
    case Variant::Restricted:
      for (auto& d : p.modulation) detail::restrict_support(d, -kRestrictedKeySteps, kRestrictedKeySteps);
      for (auto& d : p.tempo_change) detail::restrict_support(d, -kRestrictedTempoBins, kRestrictedTempoBins);
      break;
    case Variant::Local:
      for (auto& d : p.modulation) d = impulse(kKeyLo, kKeyHi);
      for (auto& d : p.tempo_change) d = impulse(kTempoLo, kTempoHi);
      break;
    case Variant::Cumulative:
      for (auto& d : p.pitch_error) d = impulse(kKeyLo, kKeyHi);
      for (auto& d : p.rhythm_error) d = impulse(-p.rhythm_span(), p.rhythm_span());
      break;
  }
  return p;
}

}  // namespace qbh
