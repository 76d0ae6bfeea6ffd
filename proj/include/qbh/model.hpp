#pragma once

// Hidden-state space for one target: edit symbol x transposition x tempo.
//
// The edit topology is left-right.  Same_i proceeds to the states entering
// position i + 1, Join_i^l to those entering i + l, and Elab_{i,j}^m walks a
// deterministic chain to Elab_{i,m}^m, which then proceeds like Same_i.  The
// states "entering" position p are Same_p, Join_p^l and Elab_{p,1}^m.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "qbh/distribution.hpp"
#include "qbh/error.hpp"
#include "qbh/events.hpp"
#include "qbh/params.hpp"

namespace qbh {

inline constexpr std::size_t kNoPosition = std::numeric_limits<std::size_t>::max();

struct HiddenState {
  std::size_t edit = 0;  // index into TargetModel::edits
  int key = 0;           // transposition in [-5, 6]
  int tempo = 0;         // tempo offset in [-4, 4]

  bool operator==(const HiddenState&) const = default;
};

inline std::size_t cluster_index(int key, int tempo) {
  return static_cast<std::size_t>((key - kKeyLo) * kNumTempi + (tempo - kTempoLo));
}

struct ExpectedEvent {
  int pitch_class = 0;
  int rhythm_bin = 0;
};

struct TargetModel {
  std::vector<QuantizedEvent> target;
  int max_join = 2;
  int max_elab = 2;
  QuantizationConfig quant;
  std::size_t start = 0;  // default alignment start (0-based)

  std::vector<EditState> edits;
  std::vector<ExpectedEvent> expected;
  std::vector<std::vector<std::size_t>> successors;  // per edit state
  std::vector<std::size_t> exit_pos;                 // position entered next, or kNoPosition for chain links
  std::vector<std::vector<std::size_t>> entries;     // per position: entering edit states

  std::size_t num_edit_states() const { return edits.size(); }
  std::size_t num_states() const { return edits.size() * kNumClusters; }
  std::size_t length() const { return target.size(); }

  std::size_t state_index(const HiddenState& s) const {
    return s.edit * kNumClusters + cluster_index(s.key, s.tempo);
  }
  HiddenState hidden_state(std::size_t idx) const {
    std::size_t c = idx % kNumClusters;
    return {idx / kNumClusters, static_cast<int>(c / kNumTempi) + kKeyLo,
            static_cast<int>(c % kNumTempi) + kTempoLo};
  }

  bool is_chain_link(std::size_t e) const { return exit_pos[e] == kNoPosition; }
  // Elab states before the end of their chain carry no rhythm evidence.
  bool emits_rhythm(std::size_t e) const {
    const auto& s = edits[e];
    return s.kind != EditKind::Elab || s.step == s.order;
  }
};

namespace detail {
inline double target_ioi(const QuantizedEvent& e, const QuantizationConfig& cfg) {
  return e.raw_ioi_ms > 0.0 ? e.raw_ioi_ms : dequantize_ioi(e.rhythm_bin, cfg);
}
}  // namespace detail

/// Builds the edit-state enumeration, successor lists and expected events.
/// `start` is 0-based.
inline TargetModel build_target_model(std::span<const QuantizedEvent> target, int max_join,
                                      int max_elab, std::size_t start = 0,
                                      const QuantizationConfig& quant = {}) {
  if (target.empty()) throw Error("build_target_model: empty target");
  if (max_join < 1 || max_elab < 1) throw Error("build_target_model: L and M must be at least 1");
  if (start >= target.size()) throw Error("build_target_model: start index out of range");
  quant.validate();

  TargetModel m;
  m.target.assign(target.begin(), target.end());
  m.max_join = max_join;
  m.max_elab = max_elab;
  m.quant = quant;
  m.start = start;
  const std::size_t n = target.size();
  m.entries.resize(n);

  for (std::size_t i = 0; i < n; ++i) {
    const auto& ev = target[i];
    m.entries[i].push_back(m.edits.size());
    m.edits.push_back({EditKind::Same, i, 1, 1});
    m.expected.push_back({ev.pitch_class, ev.rhythm_bin});
    m.exit_pos.push_back(i + 1);

    for (int l = 2; l <= max_join; ++l) {
      if (i + static_cast<std::size_t>(l) > n) break;
      double total = 0.0;
      for (std::size_t k = i; k < i + static_cast<std::size_t>(l); ++k) total += detail::target_ioi(target[k], quant);
      m.entries[i].push_back(m.edits.size());
      m.edits.push_back({EditKind::Join, i, l, 1});
      m.expected.push_back({ev.pitch_class, quantize_ioi(total, quant)});
      m.exit_pos.push_back(i + static_cast<std::size_t>(l));
    }

    for (int order = 2; order <= max_elab; ++order) {
      for (int j = 1; j <= order; ++j) {
        if (j == 1) m.entries[i].push_back(m.edits.size());
        m.edits.push_back({EditKind::Elab, i, order, j});
        m.expected.push_back({ev.pitch_class, ev.rhythm_bin});
        m.exit_pos.push_back(j < order ? kNoPosition : i + 1);
      }
    }
  }

  m.successors.resize(m.edits.size());
  for (std::size_t e = 0; e < m.edits.size(); ++e) {
    if (m.exit_pos[e] == kNoPosition) {
      m.successors[e] = {e + 1};  // next link of the chain, stored contiguously
    } else if (m.exit_pos[e] < n) {
      m.successors[e] = m.entries[m.exit_pos[e]];
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Context resolution

struct ResolvedContexts {
  std::vector<std::size_t> edit_by_pos;  // per target position entered
  std::vector<std::size_t> modulation;   // per edit state (as source)
  std::vector<std::size_t> tempo;        // per edit state (as source)
  std::vector<std::size_t> pitch;        // per edit state (as emitter)
  std::vector<std::size_t> rhythm;       // per edit state (as emitter)
};

inline ResolvedContexts resolve_contexts(const TargetModel& m, const ErrorModelParams& p) {
  ResolvedContexts rc;
  const auto& cm = p.contexts;
  std::span<const QuantizedEvent> tgt(m.target);
  auto checked = [](std::size_t id, std::size_t count, const char* what) {
    if (id >= count) throw Error(std::string("context id out of range for ") + what);
    return id;
  };
  for (std::size_t i = 0; i < m.length(); ++i)
    rc.edit_by_pos.push_back(checked(cm.edit ? cm.edit(tgt, i) : 0, p.edit.size(), "edit"));
  for (const auto& e : m.edits) {
    rc.modulation.push_back(checked(cm.modulation ? cm.modulation(tgt, e) : 0, p.modulation.size(), "modulation"));
    rc.tempo.push_back(checked(cm.tempo_change ? cm.tempo_change(tgt, e) : 0, p.tempo_change.size(), "tempo_change"));
    rc.pitch.push_back(checked(cm.pitch_error ? cm.pitch_error(tgt, e) : 0, p.pitch_error.size(), "pitch_error"));
    rc.rhythm.push_back(checked(cm.rhythm_error ? cm.rhythm_error(tgt, e) : 0, p.rhythm_error.size(), "rhythm_error"));
  }
  return rc;
}

inline void check_compatible(const TargetModel& m, const ErrorModelParams& p) {
  if (m.max_join != p.max_join || m.max_elab != p.max_elab)
    throw Error("target model and parameters disagree on L/M");
  if (!(m.quant == p.quant)) throw Error("target model and parameters disagree on quantization");
}

// ---------------------------------------------------------------------------
// Transition pieces

/// Mass of the edit classes that actually exist at `pos` (joins may run off
/// the end of the target).  Used to renormalize edit rows at the boundary.
inline double edit_mass_at(const TargetModel& m, const Distribution& pe, std::size_t pos) {
  double z = 0.0;
  for (std::size_t e : m.entries[pos]) z += pe.at(edit_class(m.edits[e], m.max_join));
  return z;
}

/// Probability of entering edit state `to` from any state that proceeds to
/// its position.  Ties the initial edit distribution too.
inline double edit_entry_prob(const ErrorModelParams& p, const TargetModel& m, std::size_t to) {
  const auto& s = m.edits[to];
  const auto& pe = p.edit[p.contexts.edit ? p.contexts.edit(m.target, s.pos) : 0];
  double z = edit_mass_at(m, pe, s.pos);
  return z > 0.0 ? pe.at(edit_class(s, m.max_join)) / z : 0.0;
}

inline double edit_transition_prob(const ErrorModelParams& p, const TargetModel& m,
                                   std::size_t from, std::size_t to) {
  const auto& succ = m.successors[from];
  if (std::find(succ.begin(), succ.end(), to) == succ.end()) return 0.0;
  if (m.is_chain_link(from)) return 1.0;
  return edit_entry_prob(p, m, to);
}

/// Tempo change from `from` to `to` with the row renormalized over the
/// destinations that stay inside [-4, 4].
inline double tempo_transition_prob(const Distribution& ps, int from, int to) {
  if (to < kTempoLo || to > kTempoHi) return 0.0;
  double z = 0.0;
  for (int s = kTempoLo; s <= kTempoHi; ++s) z += ps.at(s - from);
  return z > 0.0 ? ps.at(to - from) / z : 0.0;
}

inline double modulation_prob(const Distribution& pk, int from, int to) {
  return pk.at(wrap_key(to - from));
}

inline double transition_prob(const ErrorModelParams& p, const TargetModel& m, const HiddenState& x,
                              const HiddenState& y) {
  double ae = edit_transition_prob(p, m, x.edit, y.edit);
  if (ae == 0.0) return 0.0;
  std::span<const QuantizedEvent> tgt(m.target);
  const auto& ex = m.edits[x.edit];
  const auto& pk = p.modulation[p.contexts.modulation ? p.contexts.modulation(tgt, ex) : 0];
  const auto& ps = p.tempo_change[p.contexts.tempo_change ? p.contexts.tempo_change(tgt, ex) : 0];
  return ae * modulation_prob(pk, x.key, y.key) * tempo_transition_prob(ps, x.tempo, y.tempo);
}

// ---------------------------------------------------------------------------
// Emissions

/// A quantized query plus the re-quantized durations of every run of m
/// consecutive notes, used by the last state of an order-m elaboration.
struct Query {
  std::vector<QuantizedEvent> events;
  std::vector<std::vector<int>> run_rhythm;  // [m][t], -1 where t + 1 < m

  std::size_t length() const { return events.size(); }
};

inline Query make_query(std::span<const QuantizedEvent> events, int max_elab,
                        const QuantizationConfig& quant = {}) {
  Query q;
  q.events.assign(events.begin(), events.end());
  q.run_rhythm.assign(static_cast<std::size_t>(std::max(max_elab, 1)) + 1,
                      std::vector<int>(events.size(), -1));
  for (int order = 1; order <= max_elab; ++order) {
    for (std::size_t t = 0; t < events.size(); ++t) {
      if (t + 1 < static_cast<std::size_t>(order)) continue;
      double total = 0.0;
      for (std::size_t k = t + 1 - static_cast<std::size_t>(order); k <= t; ++k)
        total += detail::target_ioi(events[k], quant);
      q.run_rhythm[static_cast<std::size_t>(order)][t] = quantize_ioi(total, quant);
    }
  }
  return q;
}

inline int pitch_error_of(int expected_pc, int key, int observed_pc) {
  return wrap_key(observed_pc - (expected_pc + key));
}

inline int rhythm_error_of(int expected_bin, int tempo, int observed_bin, int span) {
  return std::clamp(observed_bin - (expected_bin + tempo), -span, span);
}

/// b = P^P(dP) * P^R(dR) for an expected/observed pair under cluster (key, tempo).
inline double emission_prob(const Distribution& pp, const Distribution& pr, ExpectedEvent expected,
                            ExpectedEvent observed, int key, int tempo, int rhythm_span) {
  return pp.at(pitch_error_of(expected.pitch_class, key, observed.pitch_class)) *
         pr.at(rhythm_error_of(expected.rhythm_bin, tempo, observed.rhythm_bin, rhythm_span));
}

/// Emission of query event t in hidden state s.  Elaborations compare every
/// note's pitch against the target note, and the summed duration of the
/// whole run against its duration at the last step of the chain.
inline double emission_prob(const ErrorModelParams& p, const TargetModel& m, const HiddenState& s,
                            const Query& q, std::size_t t) {
  std::span<const QuantizedEvent> tgt(m.target);
  const auto& es = m.edits[s.edit];
  const auto& pp = p.pitch_error[p.contexts.pitch_error ? p.contexts.pitch_error(tgt, es) : 0];
  const auto& pr = p.rhythm_error[p.contexts.rhythm_error ? p.contexts.rhythm_error(tgt, es) : 0];
  const auto& exp = m.expected[s.edit];
  const auto& obs = q.events[t];
  double b = pp.at(pitch_error_of(exp.pitch_class, s.key, obs.pitch_class));
  if (!m.emits_rhythm(s.edit)) return b;
  int observed_bin = obs.rhythm_bin;
  if (es.kind == EditKind::Elab) {
    observed_bin = q.run_rhythm[static_cast<std::size_t>(es.order)][t];
    if (observed_bin < 0) return 0.0;  // chain cannot end before m notes were seen
  }
  return b * pr.at(rhythm_error_of(exp.rhythm_bin, s.tempo, observed_bin, p.rhythm_span()));
}

/// The emission of an edit state split into its key-dependent pitch factor
/// and tempo-dependent rhythm factor: b = pitch[K + 5] * rhythm[S + 4].
struct EmissionFactors {
  std::array<double, kNumKeys> pitch{};
  std::array<double, kNumTempi> rhythm{};
};

inline EmissionFactors emission_factors(const ErrorModelParams& p, const TargetModel& m, std::size_t edit,
                                        const Query& q, std::size_t t) {
  std::span<const QuantizedEvent> tgt(m.target);
  const auto& es = m.edits[edit];
  const auto& pp = p.pitch_error[p.contexts.pitch_error ? p.contexts.pitch_error(tgt, es) : 0];
  const auto& pr = p.rhythm_error[p.contexts.rhythm_error ? p.contexts.rhythm_error(tgt, es) : 0];
  const auto& exp = m.expected[edit];
  EmissionFactors f;
  for (int k = kKeyLo; k <= kKeyHi; ++k)
    f.pitch[static_cast<std::size_t>(k - kKeyLo)] = pp.at(pitch_error_of(exp.pitch_class, k, q.events[t].pitch_class));
  int observed = es.kind == EditKind::Elab ? q.run_rhythm[static_cast<std::size_t>(es.order)][t] : q.events[t].rhythm_bin;
  for (int s = kTempoLo; s <= kTempoHi; ++s) {
    double r = 1.0;
    if (m.emits_rhythm(edit)) r = observed < 0 ? 0.0 : pr.at(rhythm_error_of(exp.rhythm_bin, s, observed, p.rhythm_span()));
    f.rhythm[static_cast<std::size_t>(s - kTempoLo)] = r;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Initial distribution

inline Distribution initial_tempo_distribution(const ErrorModelParams& p) {
  return discrete_normal(kTempoLo, kTempoHi, 0.0, p.init_tempo_sigma);
}

inline double initial_key_prob(int /*key*/) { return 1.0 / kNumKeys; }

/// pi_x for alignment `start`: only states entering the start position
/// receive mass; the edit part is tied to the edit transition function.
inline double initial_prob(const ErrorModelParams& p, const TargetModel& m, const HiddenState& s,
                           std::size_t start) {
  const auto& es = m.edits[s.edit];
  if (es.pos != start || es.step != 1) return 0.0;
  return edit_entry_prob(p, m, s.edit) * initial_key_prob(s.key) *
         initial_tempo_distribution(p).at(s.tempo);
}

inline double initial_prob(const ErrorModelParams& p, const TargetModel& m, const HiddenState& s) {
  return initial_prob(p, m, s, m.start);
}

// ---------------------------------------------------------------------------

/// Upper bound f on the per-observation factor of any path: the largest
/// transition probability times the largest emission probability.
inline double max_step_factor(const ErrorModelParams& p, const TargetModel& m) {
  check_compatible(m, p);
  ResolvedContexts rc = resolve_contexts(m, p);
  double max_a = 0.0;
  for (std::size_t e = 0; e < m.num_edit_states(); ++e) {
    if (m.successors[e].empty()) continue;
    double ae = 0.0;
    for (std::size_t y : m.successors[e]) ae = std::max(ae, edit_transition_prob(p, m, e, y));
    const auto& ps = p.tempo_change[rc.tempo[e]];
    double as = 0.0;
    for (int a = kTempoLo; a <= kTempoHi; ++a)
      for (int b = kTempoLo; b <= kTempoHi; ++b) as = std::max(as, tempo_transition_prob(ps, a, b));
    max_a = std::max(max_a, ae * p.modulation[rc.modulation[e]].max() * as);
  }
  double max_b = 0.0;
  for (std::size_t e = 0; e < m.num_edit_states(); ++e) {
    double b = p.pitch_error[rc.pitch[e]].max();
    if (m.emits_rhythm(e)) b *= p.rhythm_error[rc.rhythm[e]].max();
    max_b = std::max(max_b, b);
  }
  if (max_a == 0.0) max_a = 1.0;  // single-position target: no transitions at all
  return std::min(1.0, max_a * max_b);
}

}  // namespace qbh
