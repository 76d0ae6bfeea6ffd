#pragma once

// Baum-Welch with parameter tying.
//
// The E-step pools posterior transition and occupancy mass by error value
// (dE, dK, dS, dP, dR) and context rather than by state pair.  Two details
// keep the M-step an exact EM update for this model:
//
//  * Edit and tempo rows are renormalized where some destinations do not
//    exist (joins past the end of the target, tempi outside [-4, 4]).  Such a
//    row is a truncated draw from the tied table, so the expected number of
//    rejected draws, n * P(d) / Z for every missing d, is imputed into the
//    counts.
//  * The initial edit distribution is tied to the edit table, so initial
//    occupancy counts as edit evidence as well.
//
// The additive floor acts as a small Dirichlet prior on bins that are
// currently non-zero; structurally zero bins (model variants) stay zero.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "qbh/distribution.hpp"
#include "qbh/error.hpp"
#include "qbh/lattice.hpp"
#include "qbh/model.hpp"
#include "qbh/params.hpp"

namespace qbh {

struct ExpectedCounts {
  std::vector<Distribution> edit;           // transitions into entering states
  std::vector<Distribution> edit_initial;   // initial occupancy
  std::vector<Distribution> edit_imputed;   // rejected draws at target boundaries
  std::vector<Distribution> modulation;
  std::vector<Distribution> tempo_change;
  std::vector<Distribution> tempo_imputed;  // rejected draws leaving [-4, 4]
  std::vector<Distribution> pitch_error;
  std::vector<Distribution> rhythm_error;
  double chain_links = 0.0;  // transitions inside elaboration chains (no edit choice)
  double log_likelihood = 0.0;
  std::size_t queries = 0;
  std::size_t skipped = 0;

  static ExpectedCounts zeros_like(const ErrorModelParams& p) {
    auto zero = [](const std::vector<Distribution>& tables) {
      std::vector<Distribution> out;
      for (const auto& d : tables) out.emplace_back(d.lo, d.hi());
      return out;
    };
    ExpectedCounts c;
    c.edit = zero(p.edit);
    c.edit_initial = zero(p.edit);
    c.edit_imputed = zero(p.edit);
    c.modulation = zero(p.modulation);
    c.tempo_change = zero(p.tempo_change);
    c.tempo_imputed = zero(p.tempo_change);
    c.pitch_error = zero(p.pitch_error);
    c.rhythm_error = zero(p.rhythm_error);
    return c;
  }

  void merge(const ExpectedCounts& o) {
    auto add = [](std::vector<Distribution>& a, const std::vector<Distribution>& b) {
      if (a.size() != b.size()) throw Error("ExpectedCounts: context count mismatch");
      for (std::size_t c = 0; c < a.size(); ++c) {
        if (a[c].lo != b[c].lo || a[c].size() != b[c].size()) throw Error("ExpectedCounts: support mismatch");
        for (std::size_t i = 0; i < a[c].size(); ++i) a[c].p[i] += b[c].p[i];
      }
    };
    add(edit, o.edit);
    add(edit_initial, o.edit_initial);
    add(edit_imputed, o.edit_imputed);
    add(modulation, o.modulation);
    add(tempo_change, o.tempo_change);
    add(tempo_imputed, o.tempo_imputed);
    add(pitch_error, o.pitch_error);
    add(rhythm_error, o.rhythm_error);
    chain_links += o.chain_links;
    log_likelihood += o.log_likelihood;
    queries += o.queries;
    skipped += o.skipped;
  }
};

/// xi_t(x, y): posterior probability of x at t and y at t + 1 (0-based t).
inline double posterior_xi(const ForwardTable& f, const BackwardTable& b, const TargetModel& m,
                           const ErrorModelParams& p, const Query& q, std::size_t t, const HiddenState& x,
                           const HiddenState& y) {
  if (!f.scorable()) throw Error("query has zero probability under model");
  if (t + 1 >= f.steps) throw Error("posterior_xi: t out of range");
  return f.at(t, m.state_index(x)) * transition_prob(p, m, x, y) * emission_prob(p, m, y, q, t + 1) *
         b.at(t + 1, m.state_index(y)) / f.scale[t + 1];
}

/// gamma_t(x) = alpha(t, x) * beta(t, x) with the shared scaling.
inline double posterior_gamma(const ForwardTable& f, const BackwardTable& b, std::size_t t, std::size_t x) {
  return f.at(t, x) * b.at(t, x);
}

/// Adds one query's expected counts.  Returns false (and bumps `skipped`)
/// when the query has zero probability under the model.
inline bool accumulate_counts(const CompiledModel& cm, const ErrorModelParams& p, const Query& q,
                              std::size_t start, ExpectedCounts& out) {
  const TargetModel& m = *cm.model;
  ForwardTable f = forward(cm, q, start);
  if (!f.scorable()) {
    ++out.skipped;
    return false;
  }
  BackwardTable b = backward(cm, q, f);
  ++out.queries;
  out.log_likelihood += f.log_likelihood;
  const std::size_t steps = q.length();
  const int span = p.rhythm_span();

  // Emissions (gamma-weighted error tallies).
  for (std::size_t t = 0; t < steps; ++t) {
    const double* a = f.row(t);
    const double* bt = b.row(t);
    for (std::size_t e = 0; e < m.num_edit_states(); ++e) {
      const double* ar = a + e * kNumClusters;
      const double* br = bt + e * kNumClusters;
      std::array<double, kNumKeys> by_key{};
      std::array<double, kNumTempi> by_tempo{};
      double tot = 0.0;
      for (int k = 0; k < kNumKeys; ++k)
        for (int s = 0; s < kNumTempi; ++s) {
          double g = ar[k * kNumTempi + s] * br[k * kNumTempi + s];
          by_key[static_cast<std::size_t>(k)] += g;
          by_tempo[static_cast<std::size_t>(s)] += g;
          tot += g;
        }
      if (tot == 0.0) continue;
      const auto& exp = m.expected[e];
      auto& pc = out.pitch_error[cm.ctx.pitch[e]];
      for (int k = 0; k < kNumKeys; ++k)
        pc.ref(pitch_error_of(exp.pitch_class, k + kKeyLo, q.events[t].pitch_class)) += by_key[static_cast<std::size_t>(k)];
      if (!m.emits_rhythm(e)) continue;
      const auto& es = m.edits[e];
      int observed = es.kind == EditKind::Elab ? q.run_rhythm[static_cast<std::size_t>(es.order)][t]
                                               : q.events[t].rhythm_bin;
      if (observed < 0) continue;
      auto& rc = out.rhythm_error[cm.ctx.rhythm[e]];
      for (int s = 0; s < kNumTempi; ++s)
        rc.ref(rhythm_error_of(exp.rhythm_bin, s + kTempoLo, observed, span)) += by_tempo[static_cast<std::size_t>(s)];
    }
  }

  // Initial edit occupancy, tied to the edit table of the start position.
  {
    std::size_t ctx = cm.ctx.edit_by_pos[start];
    const auto& pe = p.edit[ctx];
    double mass = 0.0;
    for (std::size_t e : m.entries[start]) {
      double g = 0.0;
      for (std::size_t c = 0; c < kNumClusters; ++c) g += f.at(0, e * kNumClusters + c) * b.at(0, e * kNumClusters + c);
      out.edit_initial[ctx].ref(edit_class(m.edits[e], m.max_join)) += g;
      mass += g;
    }
    double z = edit_mass_at(m, pe, start);
    std::vector<char> present(static_cast<std::size_t>(p.num_edit_classes()), 0);
    for (std::size_t e : m.entries[start]) present[static_cast<std::size_t>(edit_class(m.edits[e], m.max_join))] = 1;
    for (int c = 0; c < p.num_edit_classes(); ++c)
      if (!present[static_cast<std::size_t>(c)] && z > 0.0) out.edit_imputed[ctx].ref(c) += mass * pe.at(c) / z;
  }

  // Transitions.
  std::vector<double> emis;
  ClusterRow pooled, keyed, moved, msg, tempo_pulled;
  for (std::size_t t = 0; t + 1 < steps; ++t) {
    detail::compute_emissions(cm, q, t + 1, emis);
    const double* a = f.row(t);
    const double* bn = b.row(t + 1);
    const double inv = 1.0 / f.scale[t + 1];
    for (const auto& g : cm.groups) {
      pooled.fill(0.0);
      for (std::size_t x : g.sources) {
        const double* r = a + x * kNumClusters;
        for (std::size_t c = 0; c < kNumClusters; ++c) pooled[c] += r[c];
      }
      const auto& kt = cm.key_trans[g.key_ctx];
      const auto& st = cm.tempo_trans[g.tempo_ctx];
      // keyed(k', s) = sum_k pooled(k, s) PK(k, k');  moved(k', s') = sum_s keyed(k', s) PS(s, s')
      keyed.fill(0.0);
      for (int k = 0; k < kNumKeys; ++k)
        for (int k2 = 0; k2 < kNumKeys; ++k2)
          for (int s = 0; s < kNumTempi; ++s)
            keyed[static_cast<std::size_t>(k2 * kNumTempi + s)] +=
                pooled[static_cast<std::size_t>(k * kNumTempi + s)] * kt[static_cast<std::size_t>(k * kNumKeys + k2)];
      moved.fill(0.0);
      for (int k2 = 0; k2 < kNumKeys; ++k2)
        for (int s = 0; s < kNumTempi; ++s)
          for (int s2 = 0; s2 < kNumTempi; ++s2)
            moved[static_cast<std::size_t>(k2 * kNumTempi + s2)] +=
                keyed[static_cast<std::size_t>(k2 * kNumTempi + s)] * st[static_cast<std::size_t>(s * kNumTempi + s2)];

      detail::backward_message(cm, g, bn, emis.data(), msg);

      // Edit evidence per destination.
      double group_mass = 0.0;
      for (std::size_t i = 0; i < g.dests.size(); ++i) {
        std::size_t d = g.dests[i];
        const double* bd = emis.data() + d * kEmisStride;
        const double* betad = bn + d * kNumClusters;
        double v = 0.0;
        for (int k = 0; k < kNumKeys; ++k)
          for (int s = 0; s < kNumTempi; ++s)
            v += moved[static_cast<std::size_t>(k * kNumTempi + s)] * bd[k] * bd[kNumKeys + s] * betad[k * kNumTempi + s];
        v *= g.dest_prob[i] * inv;
        group_mass += v;
        if (g.edit_ctx != kNoPosition) out.edit[g.edit_ctx].ref(edit_class(m.edits[d], m.max_join)) += v;
      }
      if (group_mass == 0.0) continue;
      if (g.edit_ctx == kNoPosition) {
        out.chain_links += group_mass;
      } else {
        const auto& pe = p.edit[g.edit_ctx];
        std::vector<char> present(static_cast<std::size_t>(p.num_edit_classes()), 0);
        for (std::size_t d : g.dests) present[static_cast<std::size_t>(edit_class(m.edits[d], m.max_join))] = 1;
        for (int c = 0; c < p.num_edit_classes(); ++c)
          if (!present[static_cast<std::size_t>(c)] && g.edit_mass > 0.0)
            out.edit_imputed[g.edit_ctx].ref(c) += group_mass * pe.at(c) / g.edit_mass;
      }

      // Modulation: sum over (k, k') of pooled(k, .) PK(k, k') [PS G](k', .).
      for (int k2 = 0; k2 < kNumKeys; ++k2)
        for (int s = 0; s < kNumTempi; ++s) {
          double v = 0.0;
          for (int s2 = 0; s2 < kNumTempi; ++s2)
            v += st[static_cast<std::size_t>(s * kNumTempi + s2)] * msg[static_cast<std::size_t>(k2 * kNumTempi + s2)];
          tempo_pulled[static_cast<std::size_t>(k2 * kNumTempi + s)] = v;
        }
      auto& kc = out.modulation[g.key_ctx];
      for (int k = 0; k < kNumKeys; ++k)
        for (int k2 = 0; k2 < kNumKeys; ++k2) {
          double w = kt[static_cast<std::size_t>(k * kNumKeys + k2)];
          if (w == 0.0) continue;
          double v = 0.0;
          for (int s = 0; s < kNumTempi; ++s)
            v += pooled[static_cast<std::size_t>(k * kNumTempi + s)] * tempo_pulled[static_cast<std::size_t>(k2 * kNumTempi + s)];
          kc.ref(wrap_key(k2 - k)) += w * v * inv;
        }

      // Tempo change: sum over (s, s') of keyed(., s) PS(s, s') G(., s').
      auto& sc = out.tempo_change[g.tempo_ctx];
      auto& si = out.tempo_imputed[g.tempo_ctx];
      const auto& ps = p.tempo_change[g.tempo_ctx];
      for (int s = 0; s < kNumTempi; ++s) {
        double from_s = 0.0;
        for (int s2 = 0; s2 < kNumTempi; ++s2) {
          double w = st[static_cast<std::size_t>(s * kNumTempi + s2)];
          if (w == 0.0) continue;
          double v = 0.0;
          for (int k2 = 0; k2 < kNumKeys; ++k2)
            v += keyed[static_cast<std::size_t>(k2 * kNumTempi + s)] * msg[static_cast<std::size_t>(k2 * kNumTempi + s2)];
          v *= w * inv;
          sc.ref(s2 - s) += v;
          from_s += v;
        }
        if (from_s == 0.0) continue;
        int tempo = s + kTempoLo;
        double z = 0.0;
        for (int d = kTempoLo; d <= kTempoHi; ++d)
          if (tempo + d >= kTempoLo && tempo + d <= kTempoHi) z += ps.at(d);
        for (int d = kTempoLo; d <= kTempoHi; ++d)
          if ((tempo + d < kTempoLo || tempo + d > kTempoHi) && z > 0.0) si.ref(d) += from_s * ps.at(d) / z;
      }
    }
  }
  return true;
}

inline ExpectedCounts accumulate_counts(const TargetModel& m, const ErrorModelParams& p, const Query& q) {
  ExpectedCounts c = ExpectedCounts::zeros_like(p);
  CompiledModel cm = compile(m, p);
  accumulate_counts(cm, p, q, m.start, c);
  return c;
}

struct Reestimation {
  ErrorModelParams params;
  std::vector<std::string> fallbacks;  // "<component>[<context>]" kept from the previous parameters
};

/// Normalized counts with an additive floor on the current support.  A
/// context without evidence keeps its previous table.
inline Reestimation reestimate(const ExpectedCounts& counts, const ErrorModelParams& prev, double floor = 1e-6) {
  Reestimation r{prev, {}};
  auto update = [&](std::vector<Distribution>& tables, const std::vector<const std::vector<Distribution>*>& sources,
                    const char* name) {
    for (std::size_t c = 0; c < tables.size(); ++c) {
      Distribution next(tables[c].lo, tables[c].hi());
      double evidence = 0.0;
      for (const auto* src : sources) {
        const auto& d = (*src)[c];
        for (std::size_t i = 0; i < d.size(); ++i) {
          next.p[i] += d.p[i];
          evidence += d.p[i];
        }
      }
      if (!(evidence > 0.0)) {
        r.fallbacks.push_back(std::string(name) + "[" + std::to_string(c) + "]");
        continue;
      }
      for (std::size_t i = 0; i < next.size(); ++i) next.p[i] = tables[c].p[i] > 0.0 ? next.p[i] + floor : 0.0;
      if (!(next.sum() > 0.0)) {
        r.fallbacks.push_back(std::string(name) + "[" + std::to_string(c) + "]");
        continue;
      }
      next.normalize();
      tables[c] = std::move(next);
    }
  };
  update(r.params.edit, {&counts.edit, &counts.edit_initial, &counts.edit_imputed}, "edit");
  update(r.params.modulation, {&counts.modulation}, "modulation");
  update(r.params.tempo_change, {&counts.tempo_change, &counts.tempo_imputed}, "tempo_change");
  update(r.params.pitch_error, {&counts.pitch_error}, "pitch_error");
  update(r.params.rhythm_error, {&counts.rhythm_error}, "rhythm_error");
  return r;
}

inline double max_param_change(const ErrorModelParams& a, const ErrorModelParams& b) {
  double m = 0.0;
  auto cmp = [&](const std::vector<Distribution>& x, const std::vector<Distribution>& y) {
    for (std::size_t c = 0; c < x.size(); ++c)
      for (std::size_t i = 0; i < x[c].size(); ++i) m = std::max(m, std::abs(x[c].p[i] - y[c].p[i]));
  };
  cmp(a.edit, b.edit);
  cmp(a.modulation, b.modulation);
  cmp(a.tempo_change, b.tempo_change);
  cmp(a.pitch_error, b.pitch_error);
  cmp(a.rhythm_error, b.rhythm_error);
  return m;
}

/// floor * sum of log p over the support: the log-prior the floored M-step
/// maximizes alongside the likelihood.
inline double floor_log_prior(const ErrorModelParams& p, double floor) {
  if (floor <= 0.0) return 0.0;
  double s = 0.0;
  auto add = [&](const std::vector<Distribution>& tables) {
    for (const auto& d : tables)
      for (double v : d.p)
        if (v > 0.0) s += std::log(v);
  };
  add(p.edit);
  add(p.modulation);
  add(p.tempo_change);
  add(p.pitch_error);
  add(p.rhythm_error);
  return floor * s;
}

struct TrainingPair {
  std::vector<QuantizedEvent> target;
  std::vector<QuantizedEvent> query;
  std::size_t start = 0;  // 0-based alignment of the query in the target
};

struct TrainingOptions {
  double tol = 1e-4;
  int max_iter = 100;
  double floor = 1e-6;
  unsigned threads = 1;
};

struct TrainingReport {
  int iterations = 0;
  std::vector<double> log_likelihood_trace;  // one entry per parameter set, initial and final included
  std::vector<double> objective_trace;       // likelihood plus the floor's log-prior
  bool converged = false;
  std::size_t skipped_queries = 0;
  std::vector<std::string> fallbacks;
  ErrorModelParams final_params;
};

namespace detail {

inline ExpectedCounts e_step(const std::vector<TargetModel>& models, const std::vector<Query>& queries,
                             const std::vector<std::size_t>& starts, const ErrorModelParams& p, unsigned threads) {
  ExpectedCounts total = ExpectedCounts::zeros_like(p);
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(models.size())));
  if (threads == 1) {
    for (std::size_t i = 0; i < models.size(); ++i) {
      CompiledModel cm = compile(models[i], p);
      accumulate_counts(cm, p, queries[i], starts[i], total);
    }
    return total;
  }
  std::vector<ExpectedCounts> partial(threads, ExpectedCounts::zeros_like(p));
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < models.size(); i += threads) {
        CompiledModel cm = compile(models[i], p);
        accumulate_counts(cm, p, queries[i], starts[i], partial[w]);
      }
    });
  }
  for (auto& th : pool) th.join();
  // Fixed merge order keeps the result independent of scheduling.
  for (const auto& c : partial) total.merge(c);
  return total;
}

}  // namespace detail

/// Re-estimates the tied tables until the largest parameter change drops
/// below `tol` or `max_iter` updates have been made.
inline TrainingReport train(std::span<const TrainingPair> pairs, const ErrorModelParams& init,
                            const TrainingOptions& opt = {}) {
  validate_params(init, 1e-6);
  std::vector<TargetModel> models;
  std::vector<Query> queries;
  std::vector<std::size_t> starts;
  for (const auto& pr : pairs) {
    if (pr.query.empty()) continue;
    models.push_back(build_target_model(pr.target, init.max_join, init.max_elab, pr.start, init.quant));
    queries.push_back(make_query(pr.query, init.max_elab, init.quant));
    starts.push_back(pr.start);
  }
  if (models.empty()) throw Error("train: no scorable queries");

  TrainingReport rep;
  ErrorModelParams params = init;
  for (int iter = 0;; ++iter) {
    ExpectedCounts counts = detail::e_step(models, queries, starts, params, opt.threads);
    if (counts.queries == 0) throw Error("train: no scorable queries");
    rep.skipped_queries = counts.skipped;
    rep.log_likelihood_trace.push_back(counts.log_likelihood);
    rep.objective_trace.push_back(counts.log_likelihood + floor_log_prior(params, opt.floor));
    if (rep.converged || iter >= opt.max_iter) break;
    Reestimation next = reestimate(counts, params, opt.floor);
    for (auto& f : next.fallbacks)
      if (std::find(rep.fallbacks.begin(), rep.fallbacks.end(), f) == rep.fallbacks.end()) rep.fallbacks.push_back(f);
    double change = max_param_change(params, next.params);
    params = std::move(next.params);
    rep.iterations = iter + 1;
    if (change < opt.tol) rep.converged = true;
  }
  rep.final_params = std::move(params);
  return rep;
}

}  // namespace qbh
