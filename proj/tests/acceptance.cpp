// Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"

using namespace qbh;
using namespace qbh::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (ok) return;
    if (pass) detail << "; first failure: " << what;
    pass = false;
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

// ---------------------------------------------------------------------------

void gambler(Outcome& o) {
  auto rolls = rolls_154();
  double dishonest = forward_generic(dishonest_gambler(), rolls);
  double honest = forward_generic(honest_gambler(), rolls);
  std::vector<std::size_t> aab{0, 0, 1};
  double path = path_probability_generic(dishonest_gambler(), rolls, aab);
  GenericViterbi v = viterbi_generic(dishonest_gambler(), rolls);
  o.detail << "P(dishonest)=" << dishonest << " P(honest)=" << honest << " P(aab)=" << path
           << " viterbi=" << v.probability;
  o.require(near(dishonest, 5.78e-3, 1e-5), "dishonest likelihood");
  o.require(near(honest, 4.63e-3, 1e-5), "honest likelihood");
  o.require(near(path, 1.25e-3, 1e-5), "path {a,a,b}");
  o.require(v.path == std::vector<std::size_t>{0, 0, 0}, "Viterbi path {a,a,a}");
  o.require(near(v.probability, 3.75e-3, 1e-5), "Viterbi probability");
}

void offset_example(Outcome& o) {
  std::vector<double> notes{48.4, 46.6, 44.4, 43.6};
  OffsetSelection s = select_offset(notes);
  o.detail << "offset=" << s.offset << " rounded={";
  for (std::size_t i = 0; i < s.rounded.size(); ++i) o.detail << (i ? "," : "") << s.rounded[i];
  o.detail << "}";
  o.require(s.offset == 0.5, "offset");
  o.require(s.rounded == std::vector<int>{49, 47, 45, 44}, "rounded notes");
}

void doubling_law(Outcome& o) {
  QuantizationConfig cfg;
  o.require(cfg.q == 29 && cfg.ioi_min_ms == 30.0 && cfg.ioi_max_ms == 3840.0, "default quantizer");
  int checked = 0;
  for (int b = 0; b <= 24; ++b) {
    int got = quantize_ioi(2.0 * dequantize_ioi(b, cfg), cfg);
    o.require(got == b + 4, "bin " + std::to_string(b) + " doubled to " + std::to_string(got));
    ++checked;
  }
  o.detail << checked << " bins checked";
}

void entropy_anchors(Outcome& o) {
  double h1 = gaussian_differential_entropy(1.0), h2 = gaussian_differential_entropy(2.0);
  Distribution unit = discrete_normal(-12, 12, 0.0, 1.0);
  double var = variance(convolve(unit, unit));
  o.detail << "H(1)=" << h1 << " H(2)=" << h2 << " var(conv)=" << var;
  o.require(near(h1, 1.42, 0.01), "H(1)");
  o.require(near(h2, 1.77, 0.01), "H(2)");
  o.require(std::abs(var - 2.0) <= 0.02 * 2.0, "convolved variance");
}

// Target <= 4 notes, query <= 4 notes, L = M = 2.
struct Tiny {
  ErrorModelParams params;
  TargetModel model;
  Query query;
  std::size_t start;
};

Tiny tiny_instance(Rng& rng, bool sparse) {
  auto params = random_params(rng, sparse);
  auto n = static_cast<std::size_t>(rng.uniform_int(1, 4));
  auto target = random_events(rng, n, params.quant, 14, 2);
  auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n) - 1));
  auto len = static_cast<std::size_t>(rng.uniform_int(1, 4));
  auto qe = noisy_copy(rng, target, start, len, params.quant);
  return {params, build_target_model(target, 2, 2, start, params.quant), make_query(qe, 2, params.quant), start};
}

void oracle_equivalence(Outcome& o) {
  Rng rng(20240);
  int compared = 0, unscorable = 0;
  double worst = 0.0;
  for (int trial = 0; compared < 150 && trial < 1000; ++trial) {
    Tiny in = tiny_instance(rng, true);
    double brute = brute_force_likelihood(in.params, in.model, in.query, in.start);
    ForwardTable f = forward(in.model, in.params, in.query, in.start);
    if (brute == 0.0) {
      o.require(!f.scorable(), "forward scores a zero-probability instance");
      ++unscorable;
      continue;
    }
    double rel = std::abs(std::exp(f.log_likelihood) - brute) / brute;
    worst = std::max(worst, rel);
    o.require(rel <= 1e-9, "instance " + std::to_string(trial));
    ++compared;
  }
  o.detail << compared << " scorable instances (+" << unscorable << " zero), worst relative error " << worst;
  o.require(compared >= 100, "fewer than 100 instances compared");
}

std::vector<TrainingPair> simulated_pairs(const ErrorModelParams& truth, std::size_t count, std::size_t db_size,
                                          std::uint64_t seed) {
  SimulationConfig cfg;
  cfg.params = truth;
  cfg.database_size = db_size;
  cfg.rng_seed = seed;
  auto db = generate_database(default_corpus_stats(truth.quant), cfg);
  auto qs = sample_query_set(db, cfg, count, seed + 1);
  std::vector<TrainingPair> pairs;
  for (const auto& q : qs)
    pairs.push_back({quantize_target(db[q.target_id], truth.quant), quantize_sequence(q.sample.raw, truth.quant),
                     q.start});
  return pairs;
}

void em_monotonicity(Outcome& o) {
  ErrorModelParams truth = moderate_params();
  auto pairs = simulated_pairs(truth, 80, 40, 606);
  std::vector<ErrorModelParams> inits{default_params(), perturb_params(truth, 0.6, 11),
                                      perturb_params(default_params(), 0.8, 12), perturb_params(truth, 1.0, 13)};
  TrainingOptions opt;
  opt.max_iter = 25;
  double worst_drop = 0.0;
  for (std::size_t i = 0; i < inits.size(); ++i) {
    TrainingReport r = train(pairs, inits[i], opt);
    const auto& ll = r.log_likelihood_trace;
    for (std::size_t t = 1; t < ll.size(); ++t) {
      double drop = ll[t - 1] - ll[t];
      worst_drop = std::max(worst_drop, drop);
      o.require(drop <= 1e-9, "init " + std::to_string(i) + " iteration " + std::to_string(t));
    }
    o.detail << "init " << i << ": " << r.iterations << " iters, LL " << ll.front() << " -> " << ll.back() << "; ";
  }
  o.detail << "largest decrease " << worst_drop;
}

// Positive noise on every bin, so the starting point carries no knowledge of
// which bins are zero under the generating parameters.
ErrorModelParams dense_perturbation(ErrorModelParams p, double strength, std::uint64_t seed) {
  Rng rng(seed);
  auto mix = [&](std::vector<Distribution>& tables) {
    for (auto& d : tables) {
      for (double& v : d.p) v = (1.0 - strength) * v + strength * (0.05 + rng.uniform()) / static_cast<double>(d.size());
      d.normalize();
    }
  };
  mix(p.edit);
  mix(p.modulation);
  mix(p.tempo_change);
  mix(p.pitch_error);
  mix(p.rhythm_error);
  return p;
}

void parameter_recovery(Outcome& o) {
  ErrorModelParams truth = moderate_params();
  auto pairs = simulated_pairs(truth, 200, 60, 2024);
  ErrorModelParams init = dense_perturbation(perturb_params(truth, 0.5, 77), 0.3, 78);
  TrainingReport r = train(pairs, init, {});
  const ErrorModelParams& got = r.final_params;
  struct Table {
    const char* name;
    const Distribution& want;
    const Distribution& have;
    const Distribution& start;
  };
  const Table tables[] = {{"edit", truth.edit[0], got.edit[0], init.edit[0]},
                          {"modulation", truth.modulation[0], got.modulation[0], init.modulation[0]},
                          {"tempo_change", truth.tempo_change[0], got.tempo_change[0], init.tempo_change[0]},
                          {"pitch_error", truth.pitch_error[0], got.pitch_error[0], init.pitch_error[0]},
                          {"rhythm_error", truth.rhythm_error[0], got.rhythm_error[0], init.rhythm_error[0]}};
  o.detail << r.iterations << " iters" << (r.converged ? "" : " (not converged)") << "; L1:";
  for (const auto& t : tables) {
    double d = l1_distance(t.want, t.have);
    o.detail << " " << t.name << " " << l1_distance(t.want, t.start) << "->" << d;
    o.require(d <= 0.1, t.name);
  }
}

// Desk-scale collection shared by the retrieval and pruning criteria.
struct Desk {
  ErrorModelParams params;
  std::vector<std::vector<QuantizedEvent>> targets;
  std::vector<std::vector<QuantizedEvent>> queries;
  std::vector<std::size_t> truth;
};

const Desk& desk() {
  static const Desk d = [] {
    Desk out;
    out.params = moderate_params();
    SimulationConfig cfg;
    cfg.params = out.params;
    cfg.rng_seed = 1;
    cfg.database_size = 500;
    cfg.target_length_range = {20, 24};
    auto db = generate_database(default_corpus_stats(cfg.params.quant), cfg);
    for (const auto& t : db) out.targets.push_back(quantize_target(t, cfg.params.quant));
    for (const auto& q : sample_query_set(db, cfg, 50, 3)) {
      out.queries.push_back(quantize_sequence(q.sample.raw, cfg.params.quant));
      out.truth.push_back(q.target_id);
    }
    return out;
  }();
  return d;
}

void desk_retrieval(Outcome& o) {
  const Desk& d = desk();
  auto run = [&](Variant v) {
    ErrorModelParams p = apply_variant(d.params, v);
    RankOptions opt;
    opt.k = 10;
    std::vector<std::size_t> ranks;
    for (std::size_t i = 0; i < d.queries.size(); ++i)
      ranks.push_back(*rank_database(p, d.targets, d.queries[i], opt, d.truth[i]).correct_rank);
    return ranks;
  };
  auto full = run(Variant::Full);
  auto cumulative = run(Variant::Cumulative);
  double full_mrr = mrr(full), cum_mrr = mrr(cumulative), full_median = median_rank(full);
  o.detail << "full MRR " << full_mrr << " median " << full_median << "; cumulative MRR " << cum_mrr << " median "
           << median_rank(cumulative);
  o.require(full_mrr >= 0.8, "full MRR");
  o.require(full_median == 1.0, "full median rank");
  o.require(cum_mrr < full_mrr, "cumulative MRR not below full");
}

void prune_safety(Outcome& o) {
  Rng rng(909);
  int cases = 0, met = 0, pruned = 0;
  for (; cases < 1200; ++cases) {
    auto p = random_params(rng, cases % 2 == 0);
    auto target = random_events(rng, static_cast<std::size_t>(rng.uniform_int(2, 7)));
    auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(target.size()) - 1));
    auto qe = noisy_copy(rng, target, start, static_cast<std::size_t>(rng.uniform_int(1, 6)));
    TargetModel m = build_target_model(target, 2, 2, start);
    Query q = make_query(qe, 2);
    CompiledModel cm = compile(m, p);
    double exact = viterbi(cm, q, start, false).log_prob;
    if (exact == kLogZero) continue;
    // Floors straddle the true score, with every tenth case exactly on it.
    double floor = cases % 10 == 0 ? exact : exact + rng.uniform(-4.0, 4.0);
    auto b = viterbi_bounded(cm, q, start, floor, std::log(max_step_factor(p, m)), false);
    if (exact >= floor) {
      ++met;
      o.require(b.has_value(), "case " + std::to_string(cases) + " pruned although its score meets the floor");
      if (b) o.require(b->log_prob == exact, "case " + std::to_string(cases) + " bounded score differs");
    } else if (!b) {
      ++pruned;
    }
  }
  o.detail << cases << " random cases (" << met << " meeting the floor, " << pruned << " pruned)";

  const Desk& d = desk();
  RankOptions exact_opt;
  exact_opt.viterbi = true;
  exact_opt.k = 10;
  RankOptions bounded_opt = exact_opt;
  bounded_opt.prune = true;
  std::size_t skipped = 0, total = 0;
  for (std::size_t i = 0; i < d.queries.size(); ++i) {
    auto a = rank_database(d.params, d.targets, d.queries[i], exact_opt);
    auto b = rank_database(d.params, d.targets, d.queries[i], bounded_opt);
    o.require(a.top == b.top, "desk query " + std::to_string(i) + " top-10 differs");
    for (std::size_t id : a.top) o.require(a.scores[id] == b.scores[id], "desk query " + std::to_string(i) + " score");
    for (char c : b.pruned) skipped += c ? 1 : 0;
    total += d.targets.size();
  }
  o.detail << "; desk top-10 compared on " << d.queries.size() << " queries, " << skipped << "/" << total
           << " targets pruned";
}

void structural_invariants(Outcome& o) {
  Rng rng(1010);
  int rows = 0, edit_rows = 0, transposed = 0, viterbi_checked = 0, ab_steps = 0;
  for (int trial = 0; trial < 48; ++trial) {
    int L = rng.uniform_int(1, 3), M = rng.uniform_int(1, 3);
    ErrorModelParams p = random_params(rng, trial % 2 == 0, L, M);
    o.require(std::abs(p.edit[0].sum() - 1.0) <= 1e-12, "edit table sum");
    o.require(p.edit[0].size() == static_cast<std::size_t>(L + M - 1), "edit table size");
    auto target = random_events(rng, static_cast<std::size_t>(rng.uniform_int(2, 5)));
    TargetModel m = build_target_model(target, L, M);

    for (std::size_t e = 0; e < m.num_edit_states(); ++e) {
      if (m.successors[e].empty()) continue;
      double s = 0.0;
      for (std::size_t y : m.successors[e]) s += edit_transition_prob(p, m, e, y);
      o.require(std::abs(s - 1.0) <= 1e-9, "edit row " + std::to_string(e));
      ++edit_rows;
    }
    for (std::size_t x = 0; x < m.num_states(); x += 7) {
      HiddenState hx = m.hidden_state(x);
      if (m.successors[hx.edit].empty()) continue;
      double s = 0.0;
      for (std::size_t y = 0; y < m.num_states(); ++y) s += transition_prob(p, m, hx, m.hidden_state(y));
      o.require(std::abs(s - 1.0) <= 1e-9, "transition row " + std::to_string(x));
      ++rows;
    }

    auto qe = noisy_copy(rng, target, 0, static_cast<std::size_t>(rng.uniform_int(1, 5)));
    Query q = make_query(qe, M);
    CompiledModel cm = compile(m, p);
    ForwardTable f = forward(cm, q, 0);
    if (!f.scorable()) continue;

    int shift = rng.uniform_int(1, 11);
    auto moved = qe;
    for (auto& e : moved) e.pitch_class = pitch_class(e.pitch_class + shift);
    double shifted = forward(m, p, make_query(moved, M)).log_likelihood;
    o.require(std::abs(shifted - f.log_likelihood) <= 1e-10 * std::abs(f.log_likelihood), "transposition");
    ++transposed;

    o.require(viterbi(cm, q, 0, false).log_prob <= f.log_likelihood + 1e-12, "Viterbi above forward");
    ++viterbi_checked;

    BackwardTable b = backward(cm, q, f);
    for (std::size_t t = 0; t < f.steps; ++t) {
      double s = 0.0;
      for (std::size_t x = 0; x < f.states; ++x) s += f.at(t, x) * b.at(t, x);
      o.require(std::abs(s - 1.0) <= 1e-9, "alpha.beta at t=" + std::to_string(t));
      ++ab_steps;
    }
  }
  o.detail << rows << " transition rows, " << edit_rows << " edit rows, " << transposed << " transpositions, "
           << viterbi_checked << " Viterbi/forward pairs, " << ab_steps << " alpha.beta steps";
  o.require(rows > 0 && transposed > 0 && ab_steps > 0, "nothing checked");
}

struct Criterion {
  const char* name;
  double budget_seconds;
  std::function<void(Outcome&)> run;
};

}  // namespace

int main() {
  const Criterion criteria[] = {
      {"gambler oracle", 1.0, gambler},
      {"offset selection", 1.0, offset_example},
      {"quantization doubling law", 1.0, doubling_law},
      {"entropy anchors", 1.0, entropy_anchors},
      {"forward equals path enumeration", 60.0, oracle_equivalence},
      {"EM monotonicity", 600.0, em_monotonicity},
      {"parameter recovery", 900.0, parameter_recovery},
      {"desk-scale retrieval", 600.0, desk_retrieval},
      {"prune safety", 300.0, prune_safety},
      {"structural invariants", 120.0, structural_invariants},
  };
  int failed = 0, index = 0;
  for (const auto& c : criteria) {
    ++index;
    Outcome o;
    auto t0 = Clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "; exception: " << e.what();
    }
    double secs = seconds_since(t0);
    if (secs > c.budget_seconds) {
      o.pass = false;
      o.detail << "; over the " << c.budget_seconds << " s budget";
    }
    failed += o.pass ? 0 : 1;
    std::printf("%s %2d %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", index, c.name, o.detail.str().c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d of %d criteria passed\n", index - failed, index);
  return failed == 0 ? 0 : 1;
}
