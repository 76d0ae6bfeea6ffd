#pragma once

// Synthetic targets and queries.
//
// Targets are random walks driven by unigram interval and rhythm-delta
// statistics.  Queries are drawn from the error model itself, so the hidden
// path that produced them is known.  Queries leave the sampler as raw notes
// (detuned, jittered, in milliseconds) and go back through the quantization
// front end like a real query would.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <random>
#include <span>
#include <thread>
#include <utility>
#include <vector>

#include "qbh/distribution.hpp"
#include "qbh/error.hpp"
#include "qbh/events.hpp"
#include "qbh/lattice.hpp"
#include "qbh/model.hpp"
#include "qbh/params.hpp"

namespace qbh {

inline constexpr int kMaxInterval = 24;
inline constexpr int kMaxRhythmDelta = 8;
inline constexpr int kMinTargetPitch = 36;
inline constexpr int kMaxTargetPitch = 96;

/// mt19937_64 with hand-written uniform and categorical draws, so sequences
/// are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw Error("uniform_int: empty range");
    auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(eng_() % span);
  }

  /// Inverse-CDF draw from a distribution.
  int sample(const Distribution& d) {
    double u = uniform() * d.sum();
    double acc = 0.0;
    int last = d.lo;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d.p[i] <= 0.0) continue;
      acc += d.p[i];
      last = d.lo + static_cast<int>(i);
      if (u < acc) return last;
    }
    return last;
  }

 private:
  std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Corpus statistics

struct CorpusStats {
  Distribution pitch_interval{-kMaxInterval, kMaxInterval};     // semitones
  Distribution rhythm_delta{-kMaxRhythmDelta, kMaxRhythmDelta};  // IOI-bin steps
  Distribution start_pitch{kMinTargetPitch, kMaxTargetPitch};    // MIDI note
  Distribution start_rhythm{0, 28};                              // IOI bin
  bool empirical = false;

  void validate(double tol = 1e-9) const {
    validate_distribution(pitch_interval, tol, "corpus stats: pitch_interval");
    validate_distribution(rhythm_delta, tol, "corpus stats: rhythm_delta");
    validate_distribution(start_pitch, tol, "corpus stats: start_pitch");
    validate_distribution(start_rhythm, tol, "corpus stats: start_rhythm");
  }
};

/// Hand-specified stand-in used when no corpus is given.  Not measured from
/// any collection: stepwise motion dominates, leaps of a third to a fifth
/// are common, and durations mostly repeat or change by a factor of two.
inline CorpusStats default_corpus_stats(const QuantizationConfig& quant = {}) {
  CorpusStats s;
  const std::pair<int, double> intervals[] = {{0, 0.16}, {1, 0.10}, {2, 0.15}, {3, 0.06}, {4, 0.05},
                                               {5, 0.04}, {7, 0.025}, {12, 0.005}};
  for (double& v : s.pitch_interval.p) v = 0.001;
  for (auto [d, w] : intervals) {
    s.pitch_interval.ref(d) += w;
    s.pitch_interval.ref(-d) += d == 0 ? 0.0 : w;
  }
  s.pitch_interval.normalize();

  const std::pair<int, double> deltas[] = {{0, 0.45}, {1, 0.04}, {2, 0.06}, {3, 0.01}, {4, 0.09}, {8, 0.01}};
  for (double& v : s.rhythm_delta.p) v = 0.002;
  for (auto [d, w] : deltas) {
    s.rhythm_delta.ref(d) += w;
    s.rhythm_delta.ref(-d) += d == 0 ? 0.0 : w;
  }
  s.rhythm_delta.normalize();

  s.start_pitch = discrete_normal(kMinTargetPitch, kMaxTargetPitch, 65.0, 6.0);
  s.start_rhythm = discrete_normal(0, quant.q - 1, quantize_ioi(500.0, quant), 2.0);
  s.empirical = false;
  return s;
}

/// Add-one smoothed unigram statistics of a symbolic corpus.  Intervals and
/// bin deltas beyond the table ranges are clamped to the end bins.
inline CorpusStats build_corpus_stats(std::span<const std::vector<RawNote>> corpus,
                                      const QuantizationConfig& quant = {}) {
  if (corpus.empty()) throw Error("build_corpus_stats: empty corpus");
  CorpusStats s;
  s.start_rhythm = Distribution(0, quant.q - 1);
  for (auto* d : {&s.pitch_interval, &s.rhythm_delta, &s.start_pitch, &s.start_rhythm})
    for (double& v : d->p) v = 1.0;
  for (const auto& song : corpus) {
    if (song.size() < 2) throw Error("build_corpus_stats: every file needs at least 2 notes");
    auto events = quantize_target(song, quant);
    int first = static_cast<int>(std::lround(song.front().note_number));
    s.start_pitch.ref(std::clamp(first, kMinTargetPitch, kMaxTargetPitch)) += 1.0;
    s.start_rhythm.ref(events.front().rhythm_bin) += 1.0;
    for (std::size_t i = 1; i < song.size(); ++i) {
      int a = static_cast<int>(std::lround(song[i - 1].note_number));
      int b = static_cast<int>(std::lround(song[i].note_number));
      s.pitch_interval.ref(std::clamp(b - a, -kMaxInterval, kMaxInterval)) += 1.0;
      s.rhythm_delta.ref(std::clamp(events[i].rhythm_bin - events[i - 1].rhythm_bin, -kMaxRhythmDelta,
                                    kMaxRhythmDelta)) += 1.0;
    }
  }
  for (auto* d : {&s.pitch_interval, &s.rhythm_delta, &s.start_pitch, &s.start_rhythm}) d->normalize();
  s.empirical = true;
  return s;
}

// ---------------------------------------------------------------------------
// Database generation

struct LengthRange {
  int min = 1;
  int max = 1;
};

struct SimulationConfig {
  ErrorModelParams params = default_params();
  std::uint64_t rng_seed = 1;
  LengthRange query_length_range{8, 12};
  std::size_t database_size = 100;
  LengthRange target_length_range{20, 24};
  // Target rhythm walks are reflected into this band so tempo offsets keep
  // expected durations inside the quantizer range.
  int min_target_bin = 6;
  int max_target_bin = 22;
  // Raw-query realism: a global fractional detune (semitones), per-note pitch
  // jitter (semitones) and per-note log-IOI jitter.
  double detune = 0.4;
  double pitch_jitter = 0.05;
  double ioi_jitter = 0.02;
};

namespace detail {

inline int reflect_into(int v, int lo, int hi) {
  while (v < lo || v > hi) v = v < lo ? 2 * lo - v : 2 * hi - v;
  return v;
}

inline int fold_octaves(int pitch) {
  while (pitch < kMinTargetPitch) pitch += 12;
  while (pitch > kMaxTargetPitch) pitch -= 12;
  return pitch;
}

inline std::vector<RawNote> random_walk_target(const CorpusStats& stats, const SimulationConfig& cfg,
                                               std::uint64_t seed) {
  Rng rng(seed);
  const auto& quant = cfg.params.quant;
  int n = rng.uniform_int(cfg.target_length_range.min, cfg.target_length_range.max);
  std::vector<RawNote> notes;
  notes.reserve(static_cast<std::size_t>(n));
  int pitch = fold_octaves(rng.sample(stats.start_pitch));
  int bin = reflect_into(rng.sample(stats.start_rhythm), cfg.min_target_bin, cfg.max_target_bin);
  for (int i = 0; i < n; ++i) {
    if (i > 0) {
      pitch = fold_octaves(pitch + rng.sample(stats.pitch_interval));
      bin = reflect_into(bin + rng.sample(stats.rhythm_delta), cfg.min_target_bin, cfg.max_target_bin);
    }
    notes.push_back({static_cast<double>(pitch), dequantize_ioi(bin, quant)});
  }
  return notes;
}

}  // namespace detail

/// `database_size` targets; target i depends only on (stats, config, seed + i).
inline std::vector<std::vector<RawNote>> generate_database(const CorpusStats& stats, const SimulationConfig& cfg,
                                                           unsigned threads = 1) {
  stats.validate(1e-6);
  if (cfg.target_length_range.min < 1 || cfg.target_length_range.max < cfg.target_length_range.min)
    throw Error("generate_database: invalid target length range");
  std::vector<std::vector<RawNote>> db(cfg.database_size);
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(db.size(), 1))));
  auto work = [&](unsigned w) {
    for (std::size_t i = w; i < db.size(); i += threads) db[i] = detail::random_walk_target(stats, cfg, cfg.rng_seed + i);
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < threads; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  return db;
}

// ---------------------------------------------------------------------------
// Query sampling

struct SampleOptions {
  std::optional<int> force_key;    // initial transposition
  std::optional<int> force_tempo;  // initial tempo offset
  double detune = 0.0;
  double pitch_jitter = 0.0;
  double ioi_jitter = 0.0;
};

struct SampledQuery {
  std::vector<RawNote> raw;
  std::vector<QuantizedEvent> events;  // `raw` through the query front end
  std::vector<HiddenState> path;       // indices refer to build_target_model(target, L, M)
  bool truncated = false;              // the walk ran off the end of the target
};

namespace detail {

inline int sample_edit_entry(Rng& rng, const CompiledModel& cm, std::size_t pos) {
  const auto& entries = cm.model->entries[pos];
  double u = rng.uniform();
  double acc = 0.0;
  std::size_t last = entries.front();
  for (std::size_t e : entries) {
    if (cm.entry_prob[e] <= 0.0) continue;
    acc += cm.entry_prob[e];
    last = e;
    if (u < acc) return static_cast<int>(e);
  }
  return static_cast<int>(last);
}

inline int sample_tempo_step(Rng& rng, const Distribution& ps, int from) {
  Distribution allowed(kTempoLo, kTempoHi);
  for (int d = kTempoLo; d <= kTempoHi; ++d)
    if (from + d >= kTempoLo && from + d <= kTempoHi) allowed.ref(d) = ps.at(d);
  if (!(allowed.sum() > 0.0)) throw Error("sample_query: tempo row has no mass");
  return from + rng.sample(allowed);
}

}  // namespace detail

/// Walks the generative model from `start` for `length` query notes.
/// Pitch: observed = expected + key + dP (mod 12), realized in the octave of
/// the target note.  Rhythm: observed bin = expected + tempo + dR, clamped to
/// the quantizer range; an order-m elaboration draws one total for its m
/// notes and splits it at random.
inline SampledQuery sample_query(std::span<const RawNote> target, const ErrorModelParams& params,
                                 std::size_t start, std::size_t length, std::uint64_t seed,
                                 const SampleOptions& opt = {}) {
  validate_params(params, 1e-6);
  auto tq = quantize_target(target, params.quant);
  TargetModel m = build_target_model(tq, params.max_join, params.max_elab, start, params.quant);
  CompiledModel cm = compile(m, params);
  Rng rng(seed);
  SampledQuery out;
  if (length == 0) return out;

  // Hidden path.
  HiddenState s;
  s.edit = static_cast<std::size_t>(detail::sample_edit_entry(rng, cm, start));
  s.key = opt.force_key ? *opt.force_key : rng.uniform_int(kKeyLo, kKeyHi);
  s.tempo = opt.force_tempo ? *opt.force_tempo : rng.sample(initial_tempo_distribution(params));
  if (s.key < kKeyLo || s.key > kKeyHi || s.tempo < kTempoLo || s.tempo > kTempoHi)
    throw Error("sample_query: forced cluster out of range");
  out.path.push_back(s);
  while (out.path.size() < length) {
    const HiddenState& x = out.path.back();
    if (m.successors[x.edit].empty()) {
      out.truncated = true;
      break;
    }
    HiddenState y;
    y.edit = m.is_chain_link(x.edit) ? x.edit + 1
                                     : static_cast<std::size_t>(detail::sample_edit_entry(rng, cm, m.exit_pos[x.edit]));
    y.key = wrap_key(x.key + rng.sample(params.modulation[cm.ctx.modulation[x.edit]]));
    y.tempo = detail::sample_tempo_step(rng, params.tempo_change[cm.ctx.tempo[x.edit]], x.tempo);
    out.path.push_back(y);
  }

  // Emissions.
  const int top_bin = params.quant.q - 1;
  const double detune = opt.detune;
  std::vector<RawNote> raw(out.path.size());
  for (std::size_t t = 0; t < out.path.size(); ++t) {
    const auto& x = out.path[t];
    const auto& es = m.edits[x.edit];
    const auto& exp = m.expected[x.edit];
    int dp = rng.sample(params.pitch_error[cm.ctx.pitch[x.edit]]);
    int base = static_cast<int>(std::lround(target[es.pos].note_number));
    int pc = pitch_class(exp.pitch_class + x.key + dp);
    int note = base + wrap_key(pc - pitch_class(base));
    raw[t].note_number = note + detune + rng.uniform(-opt.pitch_jitter, opt.pitch_jitter);

    if (es.kind == EditKind::Elab) {
      if (es.step != 1) continue;  // the chain head fills in all durations
      int order = es.order;
      // Duration total scored at the last link, using that link's tempo.
      std::size_t last = std::min(t + static_cast<std::size_t>(order) - 1, out.path.size() - 1);
      bool complete = t + static_cast<std::size_t>(order) - 1 < out.path.size();
      int tempo = out.path[last].tempo;
      int dr = complete ? rng.sample(params.rhythm_error[cm.ctx.rhythm[x.edit + static_cast<std::size_t>(order) - 1]]) : 0;
      int bin = std::clamp(exp.rhythm_bin + tempo + dr, 0, top_bin);
      double total = dequantize_ioi(bin, params.quant) * std::exp(rng.uniform(-opt.ioi_jitter, opt.ioi_jitter));
      std::vector<double> w(static_cast<std::size_t>(order));
      double wsum = 0.0;
      for (double& v : w) wsum += (v = 0.5 + rng.uniform());
      for (int j = 0; j < order && t + static_cast<std::size_t>(j) < raw.size(); ++j)
        raw[t + static_cast<std::size_t>(j)].ioi_ms = total * w[static_cast<std::size_t>(j)] / wsum;
      continue;
    }
    int dr = rng.sample(params.rhythm_error[cm.ctx.rhythm[x.edit]]);
    int bin = std::clamp(exp.rhythm_bin + x.tempo + dr, 0, top_bin);
    raw[t].ioi_ms = dequantize_ioi(bin, params.quant) * std::exp(rng.uniform(-opt.ioi_jitter, opt.ioi_jitter));
  }
  // Every note has a duration by now.
  for (std::size_t t = 0; t < raw.size(); ++t)
    if (!(raw[t].ioi_ms > 0.0)) throw Error("sample_query: internal error, missing duration");
  out.raw = std::move(raw);
  out.events = quantize_sequence(out.raw, params.quant);
  return out;
}

struct SimulatedQuery {
  std::size_t target_id = 0;
  std::size_t start = 0;
  SampledQuery sample;
};

/// `count` queries against random targets of `db`; query i depends only on
/// (db, cfg, seed + i).  Draws that run off the end of their target are
/// redrawn with a shifted seed.
inline std::vector<SimulatedQuery> sample_query_set(std::span<const std::vector<RawNote>> db,
                                                    const SimulationConfig& cfg, std::size_t count,
                                                    std::uint64_t seed) {
  if (db.empty()) throw Error("sample_query_set: empty database");
  SampleOptions opt{std::nullopt, std::nullopt, 0.0, cfg.pitch_jitter, cfg.ioi_jitter};
  std::vector<SimulatedQuery> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      if (attempt > 1000) throw Error("sample_query_set: targets too short for the query length");
      Rng rng(seed + i + attempt * 0x9E3779B97F4A7C15ULL);
      SimulatedQuery q;
      q.target_id = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(db.size()) - 1));
      const auto& tgt = db[q.target_id];
      auto len = static_cast<std::size_t>(rng.uniform_int(cfg.query_length_range.min, cfg.query_length_range.max));
      if (tgt.size() < len) continue;
      q.start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(tgt.size() - len)));
      opt.detune = rng.uniform(-cfg.detune, cfg.detune);
      q.sample = sample_query(tgt, cfg.params, q.start, len, rng.uniform_int(0, 1 << 30) + seed * 7919ULL, opt);
      if (q.sample.truncated) continue;
      out.push_back(std::move(q));
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generating parameters

namespace detail {
inline Distribution symmetric(int lo, int hi, std::initializer_list<double> from_zero) {
  Distribution d(lo, hi);
  int k = 0;
  for (double w : from_zero) {
    if (d.contains(k)) d.ref(k) = w;
    if (k != 0 && d.contains(-k)) d.ref(-k) = w;
    ++k;
  }
  d.normalize();
  return d;
}
}  // namespace detail

/// "Moderate" noise used for synthetic experiments: most notes are sung
/// correctly, errors are mostly one step, cluster changes are rare.
inline ErrorModelParams moderate_params(int max_join = 2, int max_elab = 2, QuantizationConfig quant = {}) {
  ErrorModelParams p = default_params(max_join, max_elab, quant);
  Distribution e(0, p.num_edit_classes() - 1);
  e.ref(0) = 0.90;
  for (int c = 1; c < p.num_edit_classes(); ++c) e.ref(c) = 0.10 / (p.num_edit_classes() - 1);
  e.normalize();
  p.edit = {e};
  p.modulation = {detail::symmetric(kKeyLo, kKeyHi, {0.90, 0.04, 0.01})};
  p.tempo_change = {detail::symmetric(kTempoLo, kTempoHi, {0.85, 0.06, 0.015})};
  p.pitch_error = {detail::symmetric(kKeyLo, kKeyHi, {0.70, 0.12, 0.03})};
  p.rhythm_error = {detail::symmetric(-p.rhythm_span(), p.rhythm_span(), {0.60, 0.15, 0.05})};
  return p;
}

// ---------------------------------------------------------------------------
// Parameter perturbation (training starts, identifiability checks)

/// Mixes every table with positive random noise on its current support:
/// (1 - strength) p + strength r.  Structural zeros are preserved.
inline ErrorModelParams perturb_params(ErrorModelParams p, double strength, std::uint64_t seed) {
  if (strength < 0.0 || strength > 1.0) throw Error("perturb_params: strength must be in [0, 1]");
  Rng rng(seed);
  auto mix = [&](std::vector<Distribution>& tables) {
    for (auto& d : tables) {
      Distribution r(d.lo, d.hi());
      for (std::size_t i = 0; i < d.size(); ++i) r.p[i] = d.p[i] > 0.0 ? 0.05 + rng.uniform() : 0.0;
      r.normalize();
      for (std::size_t i = 0; i < d.size(); ++i) d.p[i] = (1.0 - strength) * d.p[i] + strength * r.p[i];
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

}  // namespace qbh
