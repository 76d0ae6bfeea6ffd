#pragma once

// Dynamic-programming inference over a (target model, query) pair.
//
// The production kernels exploit the structure of the transition function.
// Every edit state that proceeds to the same target position (and shares
// modulation/tempo contexts) has the same outgoing distribution, so their
// forward mass is pooled first ("exit groups").  The cluster transition
// P^K(dK) * P^S(dS) is separable and is applied as a 12x12 pass over keys
// followed by a 9x9 pass over tempi.  Finally the pooled mass is distributed
// to the entering states with their edit probability and emission.
//
// Two slower routes exist for verification: a direct per-transition
// induction (reference_forward) and exhaustive path enumeration
// (brute_force_likelihood).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "qbh/error.hpp"
#include "qbh/model.hpp"
#include "qbh/params.hpp"

namespace qbh {

inline constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double safe_log(double p) { return p > 0.0 ? std::log(p) : kLogZero; }

/// Multiplication counter for complexity tests.
struct OpCounter {
  std::uint64_t mults = 0;
};

// ===========================================================================
// Generic small HMM (worked examples and oracle fixtures)

struct GenericHmm {
  std::vector<std::vector<double>> transition;  // A[x][y]
  std::vector<std::vector<double>> emission;    // B[x][o]
  std::vector<double> initial;                  // pi[x]

  std::size_t num_states() const { return initial.size(); }

  void validate(double tol = 1e-9) const {
    std::size_t n = initial.size();
    if (n == 0 || transition.size() != n || emission.size() != n) throw Error("GenericHmm: inconsistent sizes");
    auto row_ok = [&](const std::vector<double>& r) {
      double s = 0.0;
      for (double v : r) {
        if (v < 0.0) return false;
        s += v;
      }
      return std::abs(s - 1.0) <= tol;
    };
    if (!row_ok(initial)) throw Error("GenericHmm: initial distribution invalid");
    for (const auto& r : transition)
      if (r.size() != n || !row_ok(r)) throw Error("GenericHmm: transition row invalid");
    for (const auto& r : emission)
      if (!row_ok(r)) throw Error("GenericHmm: emission row invalid");
  }
};

struct GenericTables {
  std::vector<std::vector<double>> alpha;  // unscaled
  std::vector<std::vector<double>> beta;   // unscaled
  double probability = 0.0;
};

inline std::vector<std::vector<double>> forward_generic_table(const GenericHmm& h, std::span<const int> obs) {
  if (obs.empty()) throw Error("forward_generic: empty observation sequence");
  std::size_t n = h.num_states();
  std::vector<std::vector<double>> alpha(obs.size(), std::vector<double>(n, 0.0));
  for (std::size_t x = 0; x < n; ++x) alpha[0][x] = h.initial[x] * h.emission[x].at(static_cast<std::size_t>(obs[0]));
  for (std::size_t t = 1; t < obs.size(); ++t)
    for (std::size_t y = 0; y < n; ++y) {
      double s = 0.0;
      for (std::size_t x = 0; x < n; ++x) s += alpha[t - 1][x] * h.transition[x][y];
      alpha[t][y] = s * h.emission[y].at(static_cast<std::size_t>(obs[t]));
    }
  return alpha;
}

inline double forward_generic(const GenericHmm& h, std::span<const int> obs) {
  auto alpha = forward_generic_table(h, obs);
  double s = 0.0;
  for (double v : alpha.back()) s += v;
  return s;
}

inline std::vector<std::vector<double>> backward_generic_table(const GenericHmm& h, std::span<const int> obs) {
  if (obs.empty()) throw Error("backward_generic: empty observation sequence");
  std::size_t n = h.num_states();
  std::vector<std::vector<double>> beta(obs.size(), std::vector<double>(n, 1.0));
  for (std::size_t t = obs.size() - 1; t-- > 0;)
    for (std::size_t x = 0; x < n; ++x) {
      double s = 0.0;
      for (std::size_t y = 0; y < n; ++y)
        s += h.transition[x][y] * h.emission[y].at(static_cast<std::size_t>(obs[t + 1])) * beta[t + 1][y];
      beta[t][x] = s;
    }
  return beta;
}

inline double path_probability_generic(const GenericHmm& h, std::span<const int> obs,
                                       std::span<const std::size_t> path) {
  if (path.size() != obs.size() || obs.empty()) throw Error("path_probability_generic: length mismatch");
  double p = h.initial[path[0]] * h.emission[path[0]].at(static_cast<std::size_t>(obs[0]));
  for (std::size_t t = 1; t < obs.size(); ++t)
    p *= h.transition[path[t - 1]][path[t]] * h.emission[path[t]].at(static_cast<std::size_t>(obs[t]));
  return p;
}

struct GenericViterbi {
  double probability = 0.0;
  std::vector<std::size_t> path;
};

inline GenericViterbi viterbi_generic(const GenericHmm& h, std::span<const int> obs) {
  if (obs.empty()) throw Error("viterbi_generic: empty observation sequence");
  std::size_t n = h.num_states();
  std::vector<std::vector<double>> d(obs.size(), std::vector<double>(n, kLogZero));
  std::vector<std::vector<std::size_t>> back(obs.size(), std::vector<std::size_t>(n, 0));
  for (std::size_t x = 0; x < n; ++x)
    d[0][x] = safe_log(h.initial[x]) + safe_log(h.emission[x].at(static_cast<std::size_t>(obs[0])));
  for (std::size_t t = 1; t < obs.size(); ++t)
    for (std::size_t y = 0; y < n; ++y) {
      double best = kLogZero;
      for (std::size_t x = 0; x < n; ++x) {
        double v = d[t - 1][x] + safe_log(h.transition[x][y]);
        if (v > best) {
          best = v;
          back[t][y] = x;
        }
      }
      d[t][y] = best + safe_log(h.emission[y].at(static_cast<std::size_t>(obs[t])));
    }
  GenericViterbi r;
  auto it = std::max_element(d.back().begin(), d.back().end());
  if (*it == kLogZero) return r;
  r.probability = std::exp(*it);
  r.path.assign(obs.size(), 0);
  r.path.back() = static_cast<std::size_t>(it - d.back().begin());
  for (std::size_t t = obs.size() - 1; t > 0; --t) r.path[t - 1] = back[t][r.path[t]];
  return r;
}

/// xi_t(x, y) from unscaled tables.
inline double posterior_xi_generic(const GenericHmm& h, std::span<const int> obs, std::size_t t,
                                   std::size_t x, std::size_t y) {
  if (t + 1 >= obs.size()) throw Error("posterior_xi_generic: t out of range");
  auto alpha = forward_generic_table(h, obs);
  auto beta = backward_generic_table(h, obs);
  double total = 0.0;
  for (double v : alpha.back()) total += v;
  if (!(total > 0.0)) throw Error("query has zero probability under model");
  return alpha[t][x] * h.transition[x][y] * h.emission[y].at(static_cast<std::size_t>(obs[t + 1])) *
         beta[t + 1][y] / total;
}

// ===========================================================================
// Compiled model

/// Sources that share one outgoing distribution, and the states they enter.
struct ExitGroup {
  std::vector<std::size_t> sources;
  std::vector<std::size_t> dests;
  std::vector<double> dest_prob;  // edit factor a^E per destination
  std::size_t key_ctx = 0;
  std::size_t tempo_ctx = 0;
  std::size_t edit_ctx = kNoPosition;  // kNoPosition for elaboration chain links
  std::size_t pos = kNoPosition;       // position entered, kNoPosition for chain links
  double edit_mass = 1.0;              // available edit mass at `pos` before renormalization
};

using ClusterRow = std::array<double, kNumClusters>;
inline constexpr std::size_t kEmisStride = kNumKeys + kNumTempi;

/// Parameter-dependent tables for one target model.  Holds a pointer to the
/// model, which must outlive it.
struct CompiledModel {
  const TargetModel* model = nullptr;
  ResolvedContexts ctx;
  std::vector<ExitGroup> groups;
  std::vector<std::size_t> group_of;  // per edit state, kNoPosition if no successors
  std::vector<double> entry_prob;     // a^E of entering each edit state (0 for chain interiors)

  std::vector<std::array<double, kNumKeys * kNumKeys>> key_trans, log_key_trans;       // [k][k']
  std::vector<std::array<double, kNumTempi * kNumTempi>> tempo_trans, log_tempo_trans;  // [s][s']
  std::array<double, kNumTempi> init_tempo{};

  std::vector<std::array<double, kNumKeys>> pitch_tables;  // indexed by dP + 5
  std::vector<std::vector<double>> rhythm_tables;          // indexed by dR + span
  int rhythm_span = 28;

  std::size_t num_edits() const { return model->num_edit_states(); }
  std::size_t num_states() const { return model->num_states(); }
};

inline CompiledModel compile(const TargetModel& m, const ErrorModelParams& p) {
  check_compatible(m, p);
  validate_params(p, 1e-6);
  CompiledModel cm;
  cm.model = &m;
  cm.ctx = resolve_contexts(m, p);
  cm.rhythm_span = p.rhythm_span();

  const std::size_t ne = m.num_edit_states();
  cm.entry_prob.assign(ne, 0.0);
  for (std::size_t pos = 0; pos < m.length(); ++pos) {
    const auto& pe = p.edit[cm.ctx.edit_by_pos[pos]];
    double z = edit_mass_at(m, pe, pos);
    for (std::size_t e : m.entries[pos])
      cm.entry_prob[e] = z > 0.0 ? pe.at(edit_class(m.edits[e], m.max_join)) / z : 0.0;
  }

  cm.group_of.assign(ne, kNoPosition);
  for (std::size_t e = 0; e < ne; ++e) {
    if (m.successors[e].empty()) continue;
    if (m.is_chain_link(e)) {
      ExitGroup g;
      g.sources = {e};
      g.dests = {e + 1};
      g.dest_prob = {1.0};
      g.key_ctx = cm.ctx.modulation[e];
      g.tempo_ctx = cm.ctx.tempo[e];
      cm.group_of[e] = cm.groups.size();
      cm.groups.push_back(std::move(g));
      continue;
    }
    std::size_t pos = m.exit_pos[e];
    std::size_t found = kNoPosition;
    for (std::size_t gi = 0; gi < cm.groups.size(); ++gi) {
      const auto& g = cm.groups[gi];
      if (g.pos == pos && g.key_ctx == cm.ctx.modulation[e] && g.tempo_ctx == cm.ctx.tempo[e]) {
        found = gi;
        break;
      }
    }
    if (found == kNoPosition) {
      ExitGroup g;
      g.pos = pos;
      g.key_ctx = cm.ctx.modulation[e];
      g.tempo_ctx = cm.ctx.tempo[e];
      g.edit_ctx = cm.ctx.edit_by_pos[pos];
      g.edit_mass = edit_mass_at(m, p.edit[g.edit_ctx], pos);
      g.dests = m.entries[pos];
      for (std::size_t d : g.dests) g.dest_prob.push_back(cm.entry_prob[d]);
      found = cm.groups.size();
      cm.groups.push_back(std::move(g));
    }
    cm.groups[found].sources.push_back(e);
    cm.group_of[e] = found;
  }

  for (const auto& pk : p.modulation) {
    std::array<double, kNumKeys * kNumKeys> a{}, la{};
    for (int k = 0; k < kNumKeys; ++k)
      for (int k2 = 0; k2 < kNumKeys; ++k2) {
        double v = pk.at(wrap_key(k2 - k));
        a[static_cast<std::size_t>(k * kNumKeys + k2)] = v;
        la[static_cast<std::size_t>(k * kNumKeys + k2)] = safe_log(v);
      }
    cm.key_trans.push_back(a);
    cm.log_key_trans.push_back(la);
  }
  for (const auto& ps : p.tempo_change) {
    std::array<double, kNumTempi * kNumTempi> a{}, la{};
    for (int s = 0; s < kNumTempi; ++s)
      for (int s2 = 0; s2 < kNumTempi; ++s2) {
        double v = tempo_transition_prob(ps, s + kTempoLo, s2 + kTempoLo);
        a[static_cast<std::size_t>(s * kNumTempi + s2)] = v;
        la[static_cast<std::size_t>(s * kNumTempi + s2)] = safe_log(v);
      }
    cm.tempo_trans.push_back(a);
    cm.log_tempo_trans.push_back(la);
  }
  Distribution it = initial_tempo_distribution(p);
  for (int s = 0; s < kNumTempi; ++s) cm.init_tempo[static_cast<std::size_t>(s)] = it.at(s + kTempoLo);

  for (const auto& pp : p.pitch_error) {
    std::array<double, kNumKeys> a{};
    for (int d = kKeyLo; d <= kKeyHi; ++d) a[static_cast<std::size_t>(d - kKeyLo)] = pp.at(d);
    cm.pitch_tables.push_back(a);
  }
  for (const auto& pr : p.rhythm_error) {
    std::vector<double> a(static_cast<std::size_t>(2 * cm.rhythm_span + 1));
    for (int d = -cm.rhythm_span; d <= cm.rhythm_span; ++d) a[static_cast<std::size_t>(d + cm.rhythm_span)] = pr.at(d);
    cm.rhythm_tables.push_back(std::move(a));
  }
  return cm;
}

namespace detail {

/// Emission factors of query event t for every edit state: 12 pitch factors
/// (by key) followed by 9 rhythm factors (by tempo).
inline void compute_emissions(const CompiledModel& cm, const Query& q, std::size_t t, std::vector<double>& out) {
  const TargetModel& m = *cm.model;
  out.resize(m.num_edit_states() * kEmisStride);
  const auto& obs = q.events[t];
  for (std::size_t e = 0; e < m.num_edit_states(); ++e) {
    double* row = out.data() + e * kEmisStride;
    const auto& exp = m.expected[e];
    const auto& pt = cm.pitch_tables[cm.ctx.pitch[e]];
    for (int k = 0; k < kNumKeys; ++k)
      row[k] = pt[static_cast<std::size_t>(pitch_error_of(exp.pitch_class, k + kKeyLo, obs.pitch_class) - kKeyLo)];
    double* rr = row + kNumKeys;
    if (!m.emits_rhythm(e)) {
      for (int s = 0; s < kNumTempi; ++s) rr[s] = 1.0;
      continue;
    }
    int observed = obs.rhythm_bin;
    const auto& es = m.edits[e];
    if (es.kind == EditKind::Elab) observed = q.run_rhythm[static_cast<std::size_t>(es.order)][t];
    if (observed < 0) {
      for (int s = 0; s < kNumTempi; ++s) rr[s] = 0.0;
      continue;
    }
    const auto& rt = cm.rhythm_tables[cm.ctx.rhythm[e]];
    for (int s = 0; s < kNumTempi; ++s)
      rr[s] = rt[static_cast<std::size_t>(rhythm_error_of(exp.rhythm_bin, s + kTempoLo, observed, cm.rhythm_span) + cm.rhythm_span)];
  }
}

inline void check_query(const TargetModel& m, const Query& q, std::size_t start) {
  if (q.length() == 0) throw Error("query length 0");
  if (start >= m.length()) throw Error("start index out of range");
  if (q.run_rhythm.size() < static_cast<std::size_t>(m.max_elab) + 1) throw Error("query prepared for a smaller M");
}

/// alpha_1 (unscaled) into `row`.
inline void initial_row(const CompiledModel& cm, std::size_t start, const double* emis, double* row) {
  const TargetModel& m = *cm.model;
  std::fill(row, row + m.num_states(), 0.0);
  for (std::size_t e : m.entries[start]) {
    double pe = cm.entry_prob[e] / kNumKeys;
    const double* b = emis + e * kEmisStride;
    for (int k = 0; k < kNumKeys; ++k)
      for (int s = 0; s < kNumTempi; ++s)
        row[e * kNumClusters + static_cast<std::size_t>(k * kNumTempi + s)] =
            pe * cm.init_tempo[static_cast<std::size_t>(s)] * b[k] * b[kNumKeys + s];
  }
}

inline void mark_active(const TargetModel& m, const double* row, std::vector<char>& active) {
  active.assign(m.num_edit_states(), 0);
  for (std::size_t e = 0; e < m.num_edit_states(); ++e) {
    const double* r = row + e * kNumClusters;
    for (std::size_t c = 0; c < kNumClusters; ++c)
      if (r[c] != 0.0) {
        active[e] = 1;
        break;
      }
  }
}

/// Pooled forward mass of a group after the cluster transition.
/// Returns false if every source is inactive.
inline bool pooled_transition(const CompiledModel& cm, const ExitGroup& g, const double* prev,
                              const std::vector<char>& active, ClusterRow& pooled, ClusterRow& keyed,
                              ClusterRow& out, OpCounter* ops) {
  bool any = false;
  pooled.fill(0.0);
  for (std::size_t x : g.sources) {
    if (!active[x]) continue;
    any = true;
    const double* r = prev + x * kNumClusters;
    for (std::size_t c = 0; c < kNumClusters; ++c) pooled[c] += r[c];
  }
  if (!any) return false;
  const auto& kt = cm.key_trans[g.key_ctx];
  const auto& st = cm.tempo_trans[g.tempo_ctx];
  keyed.fill(0.0);
  std::uint64_t mults = 0;
  for (int k = 0; k < kNumKeys; ++k)
    for (int k2 = 0; k2 < kNumKeys; ++k2) {
      double w = kt[static_cast<std::size_t>(k * kNumKeys + k2)];
      if (w == 0.0) continue;
      for (int s = 0; s < kNumTempi; ++s)
        keyed[static_cast<std::size_t>(k2 * kNumTempi + s)] += pooled[static_cast<std::size_t>(k * kNumTempi + s)] * w;
      mults += kNumTempi;
    }
  out.fill(0.0);
  for (int k2 = 0; k2 < kNumKeys; ++k2)
    for (int s = 0; s < kNumTempi; ++s) {
      double v = keyed[static_cast<std::size_t>(k2 * kNumTempi + s)];
      if (v == 0.0) continue;
      for (int s2 = 0; s2 < kNumTempi; ++s2)
        out[static_cast<std::size_t>(k2 * kNumTempi + s2)] += v * st[static_cast<std::size_t>(s * kNumTempi + s2)];
      mults += kNumTempi;
    }
  if (ops) ops->mults += mults;
  return true;
}

/// One unscaled forward induction step: next = sum_x prev(x) a_xy b_y(o).
inline void forward_step(const CompiledModel& cm, const double* prev, const std::vector<char>& active,
                         const double* emis, double* next, OpCounter* ops) {
  const TargetModel& m = *cm.model;
  std::fill(next, next + m.num_states(), 0.0);
  ClusterRow pooled, keyed, moved;
  for (const auto& g : cm.groups) {
    if (!pooled_transition(cm, g, prev, active, pooled, keyed, moved, ops)) continue;
    for (std::size_t i = 0; i < g.dests.size(); ++i) {
      std::size_t d = g.dests[i];
      const double* b = emis + d * kEmisStride;
      double* out = next + d * kNumClusters;
      for (int k = 0; k < kNumKeys; ++k) {
        double f = g.dest_prob[i] * b[k];
        if (f == 0.0) continue;
        for (int s = 0; s < kNumTempi; ++s)
          out[k * kNumTempi + s] += f * moved[static_cast<std::size_t>(k * kNumTempi + s)] * b[kNumKeys + s];
        if (ops) ops->mults += 2 * kNumTempi + 1;
      }
    }
  }
}

}  // namespace detail

// ===========================================================================
// Forward / backward

/// Scaled forward variables: alpha(t, x) is normalized to sum 1 per step and
/// scale[t] holds the normalizer, so log Pr(O) = sum_t log scale[t].
struct ForwardTable {
  std::size_t steps = 0;
  std::size_t states = 0;
  std::size_t start = 0;
  std::vector<double> alpha;
  std::vector<double> scale;
  double log_likelihood = kLogZero;

  double at(std::size_t t, std::size_t x) const { return alpha[t * states + x]; }
  const double* row(std::size_t t) const { return alpha.data() + t * states; }
  bool scorable() const { return log_likelihood != kLogZero; }
};

/// Scaled backward variables with the forward pass's normalizers:
/// sum_x alpha(t, x) * beta(t, x) = 1 for every t.
struct BackwardTable {
  std::size_t steps = 0;
  std::size_t states = 0;
  std::vector<double> beta;

  double at(std::size_t t, std::size_t x) const { return beta[t * states + x]; }
  const double* row(std::size_t t) const { return beta.data() + t * states; }
};

inline ForwardTable forward(const CompiledModel& cm, const Query& q, std::size_t start, OpCounter* ops = nullptr) {
  const TargetModel& m = *cm.model;
  detail::check_query(m, q, start);
  ForwardTable f;
  f.steps = q.length();
  f.states = m.num_states();
  f.start = start;
  f.alpha.assign(f.steps * f.states, 0.0);
  f.scale.assign(f.steps, 0.0);

  std::vector<double> emis;
  std::vector<char> active;
  double log_l = 0.0;
  for (std::size_t t = 0; t < f.steps; ++t) {
    detail::compute_emissions(cm, q, t, emis);
    double* row = f.alpha.data() + t * f.states;
    if (t == 0)
      detail::initial_row(cm, start, emis.data(), row);
    else
      detail::forward_step(cm, f.row(t - 1), active, emis.data(), row, ops);
    double c = 0.0;
    for (std::size_t x = 0; x < f.states; ++x) c += row[x];
    f.scale[t] = c;
    if (!(c > 0.0)) {
      f.log_likelihood = kLogZero;
      return f;
    }
    for (std::size_t x = 0; x < f.states; ++x) row[x] /= c;
    log_l += std::log(c);
    detail::mark_active(m, row, active);
  }
  f.log_likelihood = log_l;
  return f;
}

inline ForwardTable forward(const TargetModel& m, const ErrorModelParams& p, const Query& q, std::size_t start) {
  CompiledModel cm = compile(m, p);
  return forward(cm, q, start);
}

/// Emission factors of every query step; independent of the start alignment.
struct EmissionCache {
  std::vector<std::vector<double>> steps;
};

inline EmissionCache emission_cache(const CompiledModel& cm, const Query& q) {
  EmissionCache c;
  c.steps.resize(q.length());
  for (std::size_t t = 0; t < q.length(); ++t) detail::compute_emissions(cm, q, t, c.steps[t]);
  return c;
}

/// log Pr(O) for one start, keeping two lattice rows and touching only edit
/// states that carry mass.  Same arithmetic as `forward`.
inline double forward_score(const CompiledModel& cm, const Query& q, std::size_t start, const EmissionCache& ec) {
  const TargetModel& m = *cm.model;
  detail::check_query(m, q, start);
  const std::size_t n = m.num_states(), ne = m.num_edit_states();
  std::vector<double> prev(n, 0.0), next(n, 0.0);
  std::vector<char> active(ne, 0), written(ne, 0);
  std::vector<std::size_t> live, touched;  // rows that may be nonzero in prev / next

  detail::initial_row(cm, start, ec.steps[0].data(), prev.data());
  live.assign(m.entries[start].begin(), m.entries[start].end());
  double log_l = 0.0;
  ClusterRow pooled, keyed, moved;
  for (std::size_t t = 0;; ++t) {
    double c = 0.0;
    for (std::size_t e : live)
      for (std::size_t i = 0; i < kNumClusters; ++i) c += prev[e * kNumClusters + i];
    if (!(c > 0.0)) return kLogZero;
    log_l += std::log(c);
    if (t + 1 == q.length()) return log_l;
    for (std::size_t e : live) {
      double* r = prev.data() + e * kNumClusters;
      bool any = false;
      for (std::size_t i = 0; i < kNumClusters; ++i) {
        r[i] /= c;
        any |= r[i] != 0.0;
      }
      active[e] = any;
    }

    const double* emis = ec.steps[t + 1].data();
    touched.clear();
    for (const auto& g : cm.groups) {
      if (!detail::pooled_transition(cm, g, prev.data(), active, pooled, keyed, moved, nullptr)) continue;
      for (std::size_t i = 0; i < g.dests.size(); ++i) {
        std::size_t d = g.dests[i];
        if (!written[d]) {
          written[d] = 1;
          touched.push_back(d);
        }
        const double* b = emis + d * kEmisStride;
        double* out = next.data() + d * kNumClusters;
        for (int k = 0; k < kNumKeys; ++k) {
          double f = g.dest_prob[i] * b[k];
          if (f == 0.0) continue;
          for (int s = 0; s < kNumTempi; ++s)
            out[k * kNumTempi + s] += f * moved[static_cast<std::size_t>(k * kNumTempi + s)] * b[kNumKeys + s];
        }
      }
    }
    // Restore the all-zero invariant on the row about to be reused.
    for (std::size_t e : live) {
      std::fill(prev.begin() + static_cast<std::ptrdiff_t>(e * kNumClusters),
                prev.begin() + static_cast<std::ptrdiff_t>((e + 1) * kNumClusters), 0.0);
      active[e] = 0;
    }
    for (std::size_t e : touched) written[e] = 0;
    std::swap(prev, next);
    std::swap(live, touched);
  }
}

inline ForwardTable forward(const TargetModel& m, const ErrorModelParams& p, const Query& q) {
  return forward(m, p, q, m.start);
}

namespace detail {

/// Per-group backward message: G(k', s') = sum_d a^E_d b_d(o) beta(d, k', s').
inline void backward_message(const CompiledModel& cm, const ExitGroup& g, const double* beta_next,
                             const double* emis, ClusterRow& msg) {
  msg.fill(0.0);
  for (std::size_t i = 0; i < g.dests.size(); ++i) {
    std::size_t d = g.dests[i];
    const double* b = emis + d * kEmisStride;
    const double* bt = beta_next + d * kNumClusters;
    for (int k = 0; k < kNumKeys; ++k) {
      double f = g.dest_prob[i] * b[k];
      if (f == 0.0) continue;
      for (int s = 0; s < kNumTempi; ++s)
        msg[static_cast<std::size_t>(k * kNumTempi + s)] += f * b[kNumKeys + s] * bt[k * kNumTempi + s];
    }
  }
  (void)cm;
}

/// H(k', s) = sum_s' PS(s, s') G(k', s');  J(k, s) = sum_k' PK(k, k') H(k', s).
inline void pull_back(const CompiledModel& cm, const ExitGroup& g, const ClusterRow& msg, ClusterRow& tempo_pulled,
                      ClusterRow& out) {
  const auto& kt = cm.key_trans[g.key_ctx];
  const auto& st = cm.tempo_trans[g.tempo_ctx];
  for (int k2 = 0; k2 < kNumKeys; ++k2)
    for (int s = 0; s < kNumTempi; ++s) {
      double v = 0.0;
      for (int s2 = 0; s2 < kNumTempi; ++s2)
        v += st[static_cast<std::size_t>(s * kNumTempi + s2)] * msg[static_cast<std::size_t>(k2 * kNumTempi + s2)];
      tempo_pulled[static_cast<std::size_t>(k2 * kNumTempi + s)] = v;
    }
  for (int k = 0; k < kNumKeys; ++k)
    for (int s = 0; s < kNumTempi; ++s) {
      double v = 0.0;
      for (int k2 = 0; k2 < kNumKeys; ++k2)
        v += kt[static_cast<std::size_t>(k * kNumKeys + k2)] * tempo_pulled[static_cast<std::size_t>(k2 * kNumTempi + s)];
      out[static_cast<std::size_t>(k * kNumTempi + s)] = v;
    }
}

}  // namespace detail

inline BackwardTable backward(const CompiledModel& cm, const Query& q, const ForwardTable& fwd) {
  const TargetModel& m = *cm.model;
  if (fwd.steps != q.length() || fwd.states != m.num_states()) throw Error("backward: forward table does not match");
  if (!fwd.scorable()) throw Error("query has zero probability under model");
  BackwardTable b;
  b.steps = fwd.steps;
  b.states = fwd.states;
  b.beta.assign(b.steps * b.states, 0.0);
  std::fill(b.beta.begin() + static_cast<std::ptrdiff_t>((b.steps - 1) * b.states), b.beta.end(), 1.0);

  std::vector<double> emis;
  ClusterRow msg, tmp, pulled;
  for (std::size_t t = b.steps - 1; t-- > 0;) {
    detail::compute_emissions(cm, q, t + 1, emis);
    const double* next = b.row(t + 1);
    double* cur = b.beta.data() + t * b.states;
    double inv = 1.0 / fwd.scale[t + 1];
    for (const auto& g : cm.groups) {
      detail::backward_message(cm, g, next, emis.data(), msg);
      detail::pull_back(cm, g, msg, tmp, pulled);
      for (std::size_t x : g.sources) {
        double* r = cur + x * kNumClusters;
        for (std::size_t c = 0; c < kNumClusters; ++c) r[c] = pulled[c] * inv;
      }
    }
  }
  return b;
}

inline BackwardTable backward(const TargetModel& m, const ErrorModelParams& p, const Query& q) {
  CompiledModel cm = compile(m, p);
  ForwardTable f = forward(cm, q, m.start);
  return backward(cm, q, f);
}

// ===========================================================================
// Viterbi

struct ViterbiResult {
  double log_prob = kLogZero;
  std::vector<HiddenState> path;
};

namespace detail {

struct ViterbiTrace {
  // Per step >= 1: for each group, argmax source edit per (k, s), argmax key
  // per (k', s), argmax tempo per (k', s'); per state, the winning group.
  std::vector<std::vector<std::array<std::uint32_t, kNumClusters>>> src, key, tempo;
  std::vector<std::vector<std::uint32_t>> group;
};

inline constexpr std::uint32_t kNoGroup = std::numeric_limits<std::uint32_t>::max();

inline void log_emissions(std::vector<double>& emis) {
  for (double& v : emis) v = safe_log(v);
}

/// Runs the log-space max-product recursion.  If `floor` is finite, cells
/// whose optimistic completion bound falls below it are discarded.  Returns
/// the best final log-probability (kLogZero if everything died) and the
/// final row in `last`.
inline double viterbi_run(const CompiledModel& cm, const Query& q, std::size_t start, double floor,
                          double log_f, ViterbiTrace* trace, std::vector<double>& last, bool& pruned_all,
                          const EmissionCache* log_cache = nullptr) {
  const TargetModel& m = *cm.model;
  const std::size_t n = m.num_states();
  const std::size_t steps = q.length();
  std::vector<double> emis, prev(n, kLogZero), cur(n, kLogZero);
  std::vector<char> active(m.num_edit_states(), 0), written(m.num_edit_states(), 0);
  std::vector<std::size_t> live, touched;  // rows of prev / cur that may be finite
  pruned_all = false;
  const bool bounded = floor != kLogZero;
  const double slack = 1e-9 * std::max(1.0, std::abs(floor));

  if (trace) {
    trace->src.assign(steps, {});
    trace->key.assign(steps, {});
    trace->tempo.assign(steps, {});
    trace->group.assign(steps, {});
  }

  for (std::size_t t = 0; t < steps; ++t) {
    const double* ep;
    if (log_cache) {
      ep = log_cache->steps[t].data();
    } else {
      compute_emissions(cm, q, t, emis);
      log_emissions(emis);
      ep = emis.data();
    }
    for (std::size_t e : touched)
      std::fill(cur.begin() + static_cast<std::ptrdiff_t>(e * kNumClusters),
                cur.begin() + static_cast<std::ptrdiff_t>((e + 1) * kNumClusters), kLogZero);
    touched.clear();
    if (t == 0) {
      for (std::size_t e : m.entries[start]) {
        touched.push_back(e);
        double le = safe_log(cm.entry_prob[e] / kNumKeys);
        const double* b = ep + e * kEmisStride;
        for (int k = 0; k < kNumKeys; ++k)
          for (int s = 0; s < kNumTempi; ++s)
            cur[e * kNumClusters + static_cast<std::size_t>(k * kNumTempi + s)] =
                le + safe_log(cm.init_tempo[static_cast<std::size_t>(s)]) + b[k] + b[kNumKeys + s];
      }
    } else {
      if (trace) {
        trace->src[t].assign(cm.groups.size(), {});
        trace->key[t].assign(cm.groups.size(), {});
        trace->tempo[t].assign(cm.groups.size(), {});
        trace->group[t].assign(n, kNoGroup);
      }
      ClusterRow pooled, keyed, moved;
      std::array<std::uint32_t, kNumClusters> arg_src{}, arg_key{}, arg_tempo{};
      for (std::size_t gi = 0; gi < cm.groups.size(); ++gi) {
        const auto& g = cm.groups[gi];
        bool any = false;
        pooled.fill(kLogZero);
        for (std::size_t x : g.sources) {
          if (!active[x]) continue;
          any = true;
          const double* r = prev.data() + x * kNumClusters;
          if (!trace) {
            for (std::size_t c = 0; c < kNumClusters; ++c) pooled[c] = std::max(pooled[c], r[c]);
            continue;
          }
          for (std::size_t c = 0; c < kNumClusters; ++c)
            if (r[c] > pooled[c]) {
              pooled[c] = r[c];
              arg_src[c] = static_cast<std::uint32_t>(x);
            }
        }
        if (!any) continue;
        const auto& lk = cm.log_key_trans[g.key_ctx];
        const auto& ls = cm.log_tempo_trans[g.tempo_ctx];
        keyed.fill(kLogZero);
        for (int k = 0; k < kNumKeys; ++k)
          for (int k2 = 0; k2 < kNumKeys; ++k2) {
            double w = lk[static_cast<std::size_t>(k * kNumKeys + k2)];
            if (w == kLogZero) continue;
            if (!trace) {
              for (int s = 0; s < kNumTempi; ++s) {
                auto c2 = static_cast<std::size_t>(k2 * kNumTempi + s);
                keyed[c2] = std::max(keyed[c2], pooled[static_cast<std::size_t>(k * kNumTempi + s)] + w);
              }
              continue;
            }
            for (int s = 0; s < kNumTempi; ++s) {
              double v = pooled[static_cast<std::size_t>(k * kNumTempi + s)] + w;
              auto c2 = static_cast<std::size_t>(k2 * kNumTempi + s);
              if (v > keyed[c2]) {
                keyed[c2] = v;
                arg_key[c2] = static_cast<std::uint32_t>(k);
              }
            }
          }
        moved.fill(kLogZero);
        for (int k2 = 0; k2 < kNumKeys; ++k2)
          for (int s = 0; s < kNumTempi; ++s) {
            double v = keyed[static_cast<std::size_t>(k2 * kNumTempi + s)];
            if (v == kLogZero) continue;
            if (!trace) {
              for (int s2 = 0; s2 < kNumTempi; ++s2) {
                auto c2 = static_cast<std::size_t>(k2 * kNumTempi + s2);
                moved[c2] = std::max(moved[c2], v + ls[static_cast<std::size_t>(s * kNumTempi + s2)]);
              }
              continue;
            }
            for (int s2 = 0; s2 < kNumTempi; ++s2) {
              double u = v + ls[static_cast<std::size_t>(s * kNumTempi + s2)];
              auto c2 = static_cast<std::size_t>(k2 * kNumTempi + s2);
              if (u > moved[c2]) {
                moved[c2] = u;
                arg_tempo[c2] = static_cast<std::uint32_t>(s);
              }
            }
          }
        if (trace) {
          trace->src[t][gi] = arg_src;
          trace->key[t][gi] = arg_key;
          trace->tempo[t][gi] = arg_tempo;
        }
        for (std::size_t i = 0; i < g.dests.size(); ++i) {
          std::size_t d = g.dests[i];
          double le = safe_log(g.dest_prob[i]);
          if (le == kLogZero) continue;
          if (!written[d]) {
            written[d] = 1;
            touched.push_back(d);
          }
          const double* b = ep + d * kEmisStride;
          double* out = cur.data() + d * kNumClusters;
          if (!trace) {
            for (int k = 0; k < kNumKeys; ++k)
              for (int s = 0; s < kNumTempi; ++s) {
                auto c = static_cast<std::size_t>(k * kNumTempi + s);
                out[c] = std::max(out[c], moved[c] + le + b[k] + b[kNumKeys + s]);
              }
            continue;
          }
          for (int k = 0; k < kNumKeys; ++k)
            for (int s = 0; s < kNumTempi; ++s) {
              auto c = static_cast<std::size_t>(k * kNumTempi + s);
              double v = moved[c] + le + b[k] + b[kNumKeys + s];
              if (v > out[c]) {
                out[c] = v;
                if (trace) trace->group[t][d * kNumClusters + c] = static_cast<std::uint32_t>(gi);
              }
            }
        }
      }
    }

    // Branch and bound: no completion of a cell can beat cell + remaining * log f.
    double remaining = static_cast<double>(steps - 1 - t) * log_f;
    bool alive = false;
    for (std::size_t e : live) active[e] = 0;
    for (std::size_t e : touched) {
      written[e] = 0;
      double* r = cur.data() + e * kNumClusters;
      for (std::size_t c = 0; c < kNumClusters; ++c) {
        if (r[c] == kLogZero) continue;
        if (bounded && r[c] + remaining < floor - slack) {
          r[c] = kLogZero;
          continue;
        }
        active[e] = 1;
        alive = true;
      }
    }
    if (!alive) {
      pruned_all = bounded;
      last = cur;
      return kLogZero;
    }
    std::swap(prev, cur);
    std::swap(live, touched);
  }
  double best = kLogZero;
  for (std::size_t e : live)
    for (std::size_t c = 0; c < kNumClusters; ++c) best = std::max(best, prev[e * kNumClusters + c]);
  if (trace) last = prev;
  return best;
}

inline std::vector<HiddenState> viterbi_backtrack(const CompiledModel& cm, const ViterbiTrace& tr,
                                                  const std::vector<double>& last, std::size_t steps) {
  const TargetModel& m = *cm.model;
  std::size_t x = static_cast<std::size_t>(std::max_element(last.begin(), last.end()) - last.begin());
  std::vector<HiddenState> path(steps);
  path[steps - 1] = m.hidden_state(x);
  for (std::size_t t = steps - 1; t > 0; --t) {
    std::uint32_t gi = tr.group[t][x];
    std::size_t c = x % kNumClusters;
    std::size_t k2 = c / kNumTempi, s2 = c % kNumTempi;
    std::size_t s = tr.tempo[t][gi][k2 * kNumTempi + s2];
    std::size_t k = tr.key[t][gi][k2 * kNumTempi + s];
    std::size_t src = tr.src[t][gi][k * kNumTempi + s];
    x = src * kNumClusters + k * kNumTempi + s;
    path[t - 1] = m.hidden_state(x);
  }
  return path;
}

}  // namespace detail

/// Log-space emission factors for repeated Viterbi runs over one (model, query).
inline EmissionCache log_emission_cache(const CompiledModel& cm, const Query& q) {
  EmissionCache c = emission_cache(cm, q);
  for (auto& step : c.steps) detail::log_emissions(step);
  return c;
}

inline ViterbiResult viterbi(const CompiledModel& cm, const Query& q, std::size_t start, bool with_path = true,
                             const EmissionCache* log_cache = nullptr) {
  detail::check_query(*cm.model, q, start);
  detail::ViterbiTrace tr;
  std::vector<double> last;
  bool pruned = false;
  ViterbiResult r;
  r.log_prob = detail::viterbi_run(cm, q, start, kLogZero, 0.0, with_path ? &tr : nullptr, last, pruned, log_cache);
  if (r.log_prob != kLogZero && with_path) r.path = detail::viterbi_backtrack(cm, tr, last, q.length());
  return r;
}

inline ViterbiResult viterbi(const TargetModel& m, const ErrorModelParams& p, const Query& q) {
  CompiledModel cm = compile(m, p);
  return viterbi(cm, q, m.start);
}

/// Viterbi that gives up once it can prove the best path scores below
/// `floor_log_prob`.  Returns nullopt ("pruned") in that case; otherwise the
/// result equals the unbounded one.
inline std::optional<ViterbiResult> viterbi_bounded(const CompiledModel& cm, const Query& q, std::size_t start,
                                                    double floor_log_prob, double log_step_factor,
                                                    bool with_path = true,
                                                    const EmissionCache* log_cache = nullptr) {
  detail::check_query(*cm.model, q, start);
  detail::ViterbiTrace tr;
  std::vector<double> last;
  bool pruned = false;
  ViterbiResult r;
  r.log_prob = detail::viterbi_run(cm, q, start, floor_log_prob, log_step_factor, with_path ? &tr : nullptr, last,
                                   pruned, log_cache);
  if (pruned) return std::nullopt;
  if (floor_log_prob != kLogZero && r.log_prob < floor_log_prob) return std::nullopt;
  if (r.log_prob != kLogZero && with_path) r.path = detail::viterbi_backtrack(cm, tr, last, q.length());
  return r;
}

inline std::optional<ViterbiResult> viterbi_bounded(const TargetModel& m, const ErrorModelParams& p, const Query& q,
                                                    double floor_log_prob) {
  CompiledModel cm = compile(m, p);
  return viterbi_bounded(cm, q, m.start, floor_log_prob, std::log(max_step_factor(p, m)));
}

// ===========================================================================
// Verification routes

/// log Pr(O, Q) of an explicit state path, from the per-state definitions.
inline double path_log_prob(const ErrorModelParams& p, const TargetModel& m, const Query& q,
                            std::span<const HiddenState> path, std::size_t start) {
  if (path.size() != q.length() || path.empty()) throw Error("path_log_prob: length mismatch");
  double lp = safe_log(initial_prob(p, m, path[0], start)) + safe_log(emission_prob(p, m, path[0], q, 0));
  for (std::size_t t = 1; t < path.size(); ++t)
    lp += safe_log(transition_prob(p, m, path[t - 1], path[t])) + safe_log(emission_prob(p, m, path[t], q, t));
  return lp;
}

enum class Caching { Cached, Uncached };

struct ReferenceForward {
  std::vector<std::vector<double>> alpha;  // unscaled, T x n
  double probability = 0.0;
};

/// Direct induction over successor lists and every cluster pair, without
/// scaling.  With Caching::Cached the product (edit x modulation x pitch
/// emission) is hoisted out of the tempo loops.
inline ReferenceForward reference_forward(const ErrorModelParams& p, const TargetModel& m, const Query& q,
                                          std::size_t start, Caching caching = Caching::Cached,
                                          OpCounter* ops = nullptr) {
  detail::check_query(m, q, start);
  check_compatible(m, p);
  const std::size_t n = m.num_states();
  ReferenceForward r;
  r.alpha.assign(q.length(), std::vector<double>(n, 0.0));
  for (std::size_t x = 0; x < n; ++x) {
    HiddenState s = m.hidden_state(x);
    double pi = initial_prob(p, m, s, start);
    if (pi > 0.0) r.alpha[0][x] = pi * emission_prob(p, m, s, q, 0);
  }
  ResolvedContexts rc = resolve_contexts(m, p);
  for (std::size_t t = 1; t < q.length(); ++t) {
    auto& next = r.alpha[t];
    const auto& prev = r.alpha[t - 1];
    for (std::size_t ex = 0; ex < m.num_edit_states(); ++ex) {
      for (std::size_t ey : m.successors[ex]) {
        if (caching == Caching::Uncached) {
          for (int kx = kKeyLo; kx <= kKeyHi; ++kx)
            for (int sx = kTempoLo; sx <= kTempoHi; ++sx) {
              // a * (aE * PK * PS) * (PP * PR): five products per pair.
              if (ops) ops->mults += 5 * kNumClusters;
              double a = prev[m.state_index({ex, kx, sx})];
              if (a == 0.0) continue;
              for (int ky = kKeyLo; ky <= kKeyHi; ++ky)
                for (int sy = kTempoLo; sy <= kTempoHi; ++sy) {
                  HiddenState hx{ex, kx, sx}, hy{ey, ky, sy};
                  next[m.state_index(hy)] += a * transition_prob(p, m, hx, hy) * emission_prob(p, m, hy, q, t);
                }
            }
          continue;
        }
        double ae = edit_transition_prob(p, m, ex, ey);
        const auto& pk = p.modulation[rc.modulation[ex]];
        const auto& ps = p.tempo_change[rc.tempo[ex]];
        EmissionFactors b = emission_factors(p, m, ey, q, t);
        for (int kx = kKeyLo; kx <= kKeyHi; ++kx)
          for (int ky = kKeyLo; ky <= kKeyHi; ++ky) {
            double cached = ae * modulation_prob(pk, kx, ky) * b.pitch[static_cast<std::size_t>(ky - kKeyLo)];
            // Cached product once per key pair, then a * cached * PS * PR per tempo pair.
            if (ops) ops->mults += 2 + 3 * kNumTempi * kNumTempi;
            if (cached == 0.0) continue;
            for (int sx = kTempoLo; sx <= kTempoHi; ++sx) {
              double a = prev[m.state_index({ex, kx, sx})];
              if (a == 0.0) continue;
              for (int sy = kTempoLo; sy <= kTempoHi; ++sy)
                next[m.state_index({ey, ky, sy})] +=
                    a * cached * tempo_transition_prob(ps, sx, sy) * b.rhythm[static_cast<std::size_t>(sy - kTempoLo)];
            }
          }
      }
    }
  }
  for (double v : r.alpha.back()) r.probability += v;
  return r;
}

inline constexpr std::uint64_t kEnumerationGuard = 10'000'000;

/// Pr(O) as the explicit sum over every nonzero-probability state path.
/// Throws "enumeration guard" beyond kEnumerationGuard paths.
inline double brute_force_likelihood(const ErrorModelParams& p, const TargetModel& m, const Query& q,
                                     std::size_t start, std::uint64_t guard = kEnumerationGuard) {
  detail::check_query(m, q, start);
  check_compatible(m, p);
  const std::size_t n = m.num_states();
  const std::size_t steps = q.length();

  // Nonzero transitions and emissions, straight from the per-state definitions.
  std::vector<std::vector<std::pair<std::size_t, double>>> succ(n);
  for (std::size_t x = 0; x < n; ++x) {
    HiddenState hx = m.hidden_state(x);
    for (std::size_t ey : m.successors[hx.edit])
      for (int k = kKeyLo; k <= kKeyHi; ++k)
        for (int s = kTempoLo; s <= kTempoHi; ++s) {
          HiddenState hy{ey, k, s};
          double a = transition_prob(p, m, hx, hy);
          if (a > 0.0) succ[x].push_back({m.state_index(hy), a});
        }
  }
  std::vector<std::vector<double>> emis(steps, std::vector<double>(n, 0.0));
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t x = 0; x < n; ++x) emis[t][x] = emission_prob(p, m, m.hidden_state(x), q, t);

  std::uint64_t paths = 0;
  double total = 0.0;
  std::vector<std::size_t> stack_state;
  std::vector<std::size_t> stack_next;
  std::vector<double> stack_prob;

  for (std::size_t x0 = 0; x0 < n; ++x0) {
    double pi = initial_prob(p, m, m.hidden_state(x0), start);
    double p0 = pi * emis[0][x0];
    if (!(p0 > 0.0)) continue;
    if (steps == 1) {
      if (++paths > guard) throw Error("enumeration guard");
      total += p0;
      continue;
    }
    stack_state = {x0};
    stack_next = {0};
    stack_prob = {p0};
    while (!stack_state.empty()) {
      std::size_t depth = stack_state.size() - 1;
      std::size_t x = stack_state.back();
      std::size_t& i = stack_next.back();
      if (i >= succ[x].size()) {
        stack_state.pop_back();
        stack_next.pop_back();
        stack_prob.pop_back();
        continue;
      }
      auto [y, a] = succ[x][i++];
      double py = stack_prob.back() * a * emis[depth + 1][y];
      if (!(py > 0.0)) continue;
      if (depth + 2 == steps) {
        if (++paths > guard) throw Error("enumeration guard");
        total += py;
        continue;
      }
      stack_state.push_back(y);
      stack_next.push_back(0);
      stack_prob.push_back(py);
    }
  }
  return total;
}

}  // namespace qbh
