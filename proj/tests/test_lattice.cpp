#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "support.hpp"

using namespace qbh;
using namespace qbh::testing;
using Catch::Approx;

namespace {

struct Instance {
  ErrorModelParams params;
  TargetModel model;
  Query query;
  std::size_t start;
};

// Random tiny instance (target <= 4 notes, query <= 4 notes, L = M = 2),
// with a query near the target so that most instances are scorable.
Instance tiny_instance(Rng& rng, bool sparse = true) {
  auto params = random_params(rng, sparse);
  std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 4));
  auto target = random_events(rng, n, params.quant, 14, 2);
  std::size_t start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n) - 1));
  std::size_t len = static_cast<std::size_t>(rng.uniform_int(1, 4));
  auto qe = noisy_copy(rng, target, start, len, params.quant);
  return {params, build_target_model(target, 2, 2, start, params.quant), make_query(qe, 2, params.quant), start};
}

double rel_diff(double a, double b) { return std::abs(a - b) / std::max(std::abs(a), std::abs(b)); }

// Distinct pitch classes and a steady duration: under impulse errors only
// the all-Same path explains a verbatim copy of a target segment.
std::vector<QuantizedEvent> distinct_target() {
  std::vector<QuantizedEvent> t;
  const int pcs[] = {0, 4, 7, 11, 2};
  for (int pc : pcs) t.push_back({pc, 14, dequantize_ioi(14)});
  return t;
}

ErrorModelParams impulse_params(int L = 2, int M = 2) {
  ErrorModelParams p = default_params(L, M);
  for (auto& d : p.modulation) d = impulse(kKeyLo, kKeyHi);
  for (auto& d : p.tempo_change) d = impulse(kTempoLo, kTempoHi);
  for (auto& d : p.pitch_error) d = impulse(kKeyLo, kKeyHi);
  for (auto& d : p.rhythm_error) d = impulse(-p.rhythm_span(), p.rhythm_span());
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Generic engine: the gambler example

TEST_CASE("dishonest gambler likelihood of rolls 1, 5, 4", "[lattice][generic]") {
  auto rolls = rolls_154();
  CHECK(forward_generic(dishonest_gambler(), rolls) == Approx(5.78e-3).margin(1e-5));
  CHECK(forward_generic(honest_gambler(), rolls) == Approx(4.63e-3).margin(1e-5));
}

TEST_CASE("gambler path probabilities", "[lattice][generic]") {
  auto h = dishonest_gambler();
  auto rolls = rolls_154();
  std::vector<std::size_t> aaa{0, 0, 0}, aab{0, 0, 1}, abb{0, 1, 1}, aba{0, 1, 0};
  CHECK(path_probability_generic(h, rolls, aab) == Approx(1.25e-3).margin(1e-5));
  CHECK(path_probability_generic(h, rolls, aaa) == Approx(3.75e-3).margin(1e-5));
  // The four paths that start honest account for the whole likelihood.
  double sum = path_probability_generic(h, rolls, aaa) + path_probability_generic(h, rolls, aab) +
               path_probability_generic(h, rolls, abb) + path_probability_generic(h, rolls, aba);
  CHECK(sum == Approx(forward_generic(h, rolls)).epsilon(1e-12));
  CHECK(path_probability_generic(h, rolls, aba) == Approx(2.78e-5).margin(1e-7));
  CHECK(path_probability_generic(h, rolls, abb) == Approx(7.50e-4).margin(1e-6));
}

TEST_CASE("gambler Viterbi path is all honest", "[lattice][generic]") {
  auto v = viterbi_generic(dishonest_gambler(), rolls_154());
  CHECK(v.path == std::vector<std::size_t>{0, 0, 0});
  CHECK(v.probability == Approx(3.75e-3).margin(1e-5));
}

TEST_CASE("gambler forward-backward products are constant over t", "[lattice][generic]") {
  auto h = dishonest_gambler();
  auto rolls = rolls_154();
  auto a = forward_generic_table(h, rolls);
  auto b = backward_generic_table(h, rolls);
  for (std::size_t t = 0; t < rolls.size(); ++t) {
    double s = 0.0;
    for (std::size_t x = 0; x < 2; ++x) s += a[t][x] * b[t][x];
    CHECK(s == Approx(5.78e-3).margin(1e-5));
    CHECK(s == Approx(forward_generic(h, rolls)).epsilon(1e-12));
  }
}

TEST_CASE("generic HMM validation", "[lattice][generic]") {
  GenericHmm h = dishonest_gambler();
  h.transition[0][0] = 0.8;
  CHECK_THROWS(h.validate());
  CHECK_THROWS(forward_generic(dishonest_gambler(), std::vector<int>{}));
}

// ---------------------------------------------------------------------------
// Target-model lattice

TEST_CASE("forward equals exhaustive path enumeration on tiny instances", "[lattice][oracle]") {
  Rng rng(2024);
  int compared = 0;
  for (int trial = 0; trial < 60; ++trial) {
    Instance in = tiny_instance(rng);
    double brute = brute_force_likelihood(in.params, in.model, in.query, in.start);
    ForwardTable f = forward(in.model, in.params, in.query, in.start);
    if (brute == 0.0) {
      CHECK_FALSE(f.scorable());
      continue;
    }
    ++compared;
    CHECK(rel_diff(std::exp(f.log_likelihood), brute) < 1e-9);
  }
  CHECK(compared >= 30);
}

TEST_CASE("single-step likelihood is the initial-times-emission sum", "[lattice][oracle]") {
  Rng rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = random_params(rng, false);
    auto target = random_events(rng, 3);
    std::size_t start = static_cast<std::size_t>(rng.uniform_int(0, 2));
    TargetModel m = build_target_model(target, 2, 2, start);
    Query q = make_query(random_events(rng, 1), 2);
    double direct = 0.0;
    for (std::size_t x = 0; x < m.num_states(); ++x)
      direct += initial_prob(p, m, m.hidden_state(x)) * emission_prob(p, m, m.hidden_state(x), q, 0);
    CHECK(rel_diff(brute_force_likelihood(p, m, q, start), direct) < 1e-12);
    CHECK(rel_diff(std::exp(forward(m, p, q).log_likelihood), direct) < 1e-12);
  }
}

TEST_CASE("enumeration guard", "[lattice][oracle]") {
  auto p = default_params();
  auto target = distinct_target();
  TargetModel m = build_target_model(target, 2, 2);
  Query q = make_query(std::vector<QuantizedEvent>(target.begin(), target.begin() + 3), 2);
  CHECK_THROWS_WITH(brute_force_likelihood(p, m, q, 0, 1000), Catch::Matchers::ContainsSubstring("enumeration guard"));
}

TEST_CASE("scaled forward agrees with unscaled induction", "[lattice]") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Instance in = tiny_instance(rng, false);
    auto ref = reference_forward(in.params, in.model, in.query, in.start, Caching::Uncached);
    ForwardTable f = forward(in.model, in.params, in.query, in.start);
    CHECK(f.scorable() == (ref.probability > 0.0));
    if (!f.scorable()) continue;
    CHECK(rel_diff(std::exp(f.log_likelihood), ref.probability) < 1e-12);
    // Per-step: alpha_hat(t) * prod_{s <= t} scale(s) equals the unscaled alpha.
    double cum = 1.0;
    for (std::size_t t = 0; t < f.steps; ++t) {
      cum *= f.scale[t];
      for (std::size_t x = 0; x < f.states; ++x)
        if (ref.alpha[t][x] > 1e-300) CHECK(rel_diff(f.at(t, x) * cum, ref.alpha[t][x]) < 1e-10);
    }
  }
}

TEST_CASE("cached and uncached reference inductions agree", "[lattice]") {
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    Instance in = tiny_instance(rng, false);
    OpCounter cached_ops, uncached_ops;
    auto a = reference_forward(in.params, in.model, in.query, in.start, Caching::Cached, &cached_ops);
    auto b = reference_forward(in.params, in.model, in.query, in.start, Caching::Uncached, &uncached_ops);
    if (b.probability > 0.0)
      CHECK(rel_diff(a.probability, b.probability) < 1e-12);
    else
      CHECK(a.probability == 0.0);
    if (in.query.length() > 1) CHECK(cached_ops.mults < uncached_ops.mults);
  }
}

TEST_CASE("verbatim segment under impulse errors", "[lattice]") {
  auto p = impulse_params();
  auto target = distinct_target();
  TargetModel m = build_target_model(target, 2, 2, 1);
  Query q = make_query(std::vector<QuantizedEvent>(target.begin() + 1, target.begin() + 4), 2);
  // 1/12 for the key, pi_S(0) for the tempo, then P_Same at three entries
  // (positions 2-4 all admit a two-note join, so no renormalization).  The
  // last note may also open an elaboration whose duration is never checked.
  double z = 0.0;
  for (int s = -4; s <= 4; ++s) z += std::exp(-s * s / (2.0 * 1.5 * 1.5));
  double head = std::log(1.0 / 12.0) + std::log(1.0 / z) + 2.0 * std::log(0.95);
  CHECK(forward(m, p, q).log_likelihood == Approx(head + std::log(0.95 + 0.02)).epsilon(1e-12));
  CHECK(viterbi(m, p, q).log_prob == Approx(head + std::log(0.95)).epsilon(1e-12));
}

TEST_CASE("score-only forward matches the full table at every start", "[lattice][property]") {
  Rng rng(31);
  for (int i = 0; i < 40; ++i) {
    auto params = random_params(rng, i % 2 == 0);
    auto target = random_events(rng, 7, params.quant, 14, 2);
    auto qe = noisy_copy(rng, target, 1, 5, params.quant);
    TargetModel m = build_target_model(target, 2, 2, 0, params.quant);
    Query q = make_query(qe, 2, params.quant);
    CompiledModel cm = compile(m, params);
    auto ec = emission_cache(cm, q);
    for (std::size_t s = 0; s < m.length(); ++s) {
      double full = forward(cm, q, s).log_likelihood;
      double fast = forward_score(cm, q, s, ec);
      if (full == kLogZero)
        CHECK(fast == kLogZero);
      else
        CHECK(fast == Approx(full).epsilon(1e-12));
    }
  }
}

TEST_CASE("backward at T = 1 is all ones", "[lattice]") {
  auto p = default_params();
  auto target = distinct_target();
  TargetModel m = build_target_model(target, 2, 2);
  Query q = make_query(std::vector<QuantizedEvent>(target.begin(), target.begin() + 1), 2);
  CompiledModel cm = compile(m, p);
  ForwardTable f = forward(cm, q, 0);
  BackwardTable b = backward(cm, q, f);
  for (double v : b.beta) CHECK(v == 1.0);
}

TEST_CASE("forward-backward products are constant over t", "[lattice][property]") {
  Rng rng(31);
  for (int trial = 0; trial < 25; ++trial) {
    auto p = random_params(rng, false);
    auto target = random_events(rng, static_cast<std::size_t>(rng.uniform_int(3, 8)));
    TargetModel m = build_target_model(target, 2, 2);
    Query q = make_query(noisy_copy(rng, target, 0, static_cast<std::size_t>(rng.uniform_int(1, 6))), 2);
    CompiledModel cm = compile(m, p);
    ForwardTable f = forward(cm, q, 0);
    REQUIRE(f.scorable());
    BackwardTable b = backward(cm, q, f);
    for (std::size_t t = 0; t < f.steps; ++t) {
      double s = 0.0;
      for (std::size_t x = 0; x < f.states; ++x) s += f.at(t, x) * b.at(t, x);
      CHECK(s == Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("backward of an unscorable query is an error", "[lattice]") {
  auto p = impulse_params();
  auto target = distinct_target();
  TargetModel m = build_target_model(target, 2, 2);
  std::vector<QuantizedEvent> qe{{0, 14, dequantize_ioi(14)}, {5, 3, dequantize_ioi(3)}};
  Query q = make_query(qe, 2);
  CompiledModel cm = compile(m, p);
  ForwardTable f = forward(cm, q, 0);
  CHECK_FALSE(f.scorable());
  CHECK_THROWS_WITH(backward(cm, q, f), Catch::Matchers::ContainsSubstring("zero probability"));
  auto v = viterbi(cm, q, 0);
  CHECK(v.log_prob == kLogZero);
  CHECK(v.path.empty());
}

TEST_CASE("query validation", "[lattice]") {
  auto p = default_params();
  TargetModel m = build_target_model(distinct_target(), 2, 2);
  CHECK_THROWS_WITH(forward(m, p, make_query(std::vector<QuantizedEvent>{}, 2)),
                    Catch::Matchers::ContainsSubstring("query length 0"));
  Query q = make_query(distinct_target(), 2);
  CompiledModel cm = compile(m, p);
  CHECK_THROWS(forward(cm, q, 5));
}

TEST_CASE("Viterbi never exceeds forward and its path is valid", "[lattice][property]") {
  Rng rng(41);
  for (int trial = 0; trial < 40; ++trial) {
    Instance in = tiny_instance(rng, trial % 2 == 0);
    CompiledModel cm = compile(in.model, in.params);
    ForwardTable f = forward(cm, in.query, in.start);
    ViterbiResult v = viterbi(cm, in.query, in.start);
    if (!f.scorable()) {
      CHECK(v.log_prob == kLogZero);
      continue;
    }
    CHECK(v.log_prob <= f.log_likelihood + 1e-12);
    REQUIRE(v.path.size() == in.query.length());
    CHECK(initial_prob(in.params, in.model, v.path[0], in.start) > 0.0);
    for (std::size_t t = 1; t < v.path.size(); ++t)
      CHECK(transition_prob(in.params, in.model, v.path[t - 1], v.path[t]) > 0.0);
    CHECK(path_log_prob(in.params, in.model, in.query, v.path, in.start) == Approx(v.log_prob).epsilon(1e-12));
  }
}

TEST_CASE("single-path model: Viterbi equals forward", "[lattice]") {
  // Impulse errors and no edits besides Same leave exactly one path.
  ErrorModelParams p = impulse_params(1, 1);
  p.edit = {impulse(0, 0)};
  auto target = distinct_target();
  TargetModel m = build_target_model(target, 1, 1, 0);
  Query q = make_query(std::vector<QuantizedEvent>(target.begin(), target.begin() + 4), 1);
  double fwd = forward(m, p, q).log_likelihood;
  REQUIRE(fwd != kLogZero);
  CHECK(viterbi(m, p, q).log_prob == Approx(fwd).epsilon(1e-14));
}

TEST_CASE("bounded Viterbi", "[lattice][prune]") {
  Rng rng(55);
  SECTION("no floor: identical to unbounded") {
    for (int trial = 0; trial < 20; ++trial) {
      Instance in = tiny_instance(rng, false);
      CompiledModel cm = compile(in.model, in.params);
      ViterbiResult v = viterbi(cm, in.query, in.start);
      auto b = viterbi_bounded(cm, in.query, in.start, kLogZero, std::log(max_step_factor(in.params, in.model)));
      REQUIRE(b.has_value());
      CHECK(b->log_prob == v.log_prob);
      CHECK(b->path == v.path);
    }
  }
  SECTION("floor at the true score: not pruned") {
    for (int trial = 0; trial < 20; ++trial) {
      Instance in = tiny_instance(rng, false);
      ViterbiResult v = viterbi(in.model, in.params, in.query);
      auto b = viterbi_bounded(in.model, in.params, in.query, v.log_prob);
      REQUIRE(b.has_value());
      CHECK(b->log_prob == v.log_prob);
    }
  }
  SECTION("random floors: pruned implies below the floor") {
    for (int trial = 0; trial < 60; ++trial) {
      Instance in = tiny_instance(rng, false);
      ViterbiResult v = viterbi(in.model, in.params, in.query);
      double floor = v.log_prob + rng.uniform(-3.0, 3.0);
      auto b = viterbi_bounded(in.model, in.params, in.query, floor);
      if (!b)
        CHECK(v.log_prob < floor);
      else
        CHECK(b->log_prob == v.log_prob);
    }
  }
}

TEST_CASE("operation count stays under the k |D| b^2 T ceiling", "[lattice][complexity]") {
  Rng rng(99);
  for (int L = 1; L <= 3; ++L)
    for (int M = 1; M <= 3; ++M) {
      auto p = random_params(rng, false, L, M);
      auto target = random_events(rng, 12);
      TargetModel m = build_target_model(target, L, M);
      Query q = make_query(noisy_copy(rng, target, 0, 8), M);
      CompiledModel cm = compile(m, p);
      OpCounter ops;
      forward(cm, q, 0, &ops);
      const double k = 108.0 * 108.0;
      const double b = L + M - 1;
      double ceiling = k * static_cast<double>(target.size()) * b * b * static_cast<double>(q.length());
      CHECK(ops.mults > 0);
      CHECK(static_cast<double>(ops.mults) <= ceiling);
    }
}

TEST_CASE("transposing the query leaves the likelihood unchanged", "[lattice][property]") {
  Rng rng(12);
  for (int trial = 0; trial < 15; ++trial) {
    auto p = random_params(rng, false);
    auto target = random_events(rng, 6);
    TargetModel m = build_target_model(target, 2, 2);
    auto qe = noisy_copy(rng, target, 0, 5);
    double base = forward(m, p, make_query(qe, 2)).log_likelihood;
    int c = rng.uniform_int(1, 11);
    for (auto& e : qe) e.pitch_class = pitch_class(e.pitch_class + c);
    CHECK(forward(m, p, make_query(qe, 2)).log_likelihood == Approx(base).epsilon(1e-10));
  }
}
