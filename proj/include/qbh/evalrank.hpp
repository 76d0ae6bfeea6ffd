#pragma once

// Database ranking and retrieval metrics.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <mutex>
#include <numbers>
#include <optional>
#include <queue>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "qbh/distribution.hpp"
#include "qbh/error.hpp"
#include "qbh/lattice.hpp"
#include "qbh/model.hpp"
#include "qbh/params.hpp"

namespace qbh {

enum class Alignment { Max, First };

inline Alignment parse_alignment(const std::string& s) {
  if (s == "max") return Alignment::Max;
  if (s == "first") return Alignment::First;
  throw Error("unknown alignment '" + s + "' (expected max or first)");
}

struct RankOptions {
  std::size_t k = 10;  // 0 keeps every target
  bool viterbi = false;
  bool prune = false;  // branch and bound, Viterbi only
  Alignment alignment = Alignment::Max;
  unsigned threads = 1;
};

struct RankedResult {
  std::vector<double> scores;             // per target; -inf when unscorable or pruned
  std::vector<std::size_t> best_start;    // alignment achieving the score
  std::vector<char> pruned;               // score is only known to be below the top-k floor
  std::vector<std::size_t> top;           // target ids, best first, ties by id
  std::optional<std::size_t> correct_rank;  // worst-case rank when the correct id was supplied
  bool unscorable = false;                // every target scored -inf
  double seconds = 0.0;
};

/// 1 + number of other targets scoring at least as well (ties count above).
inline std::size_t worst_case_rank(std::span<const double> scores, std::size_t correct) {
  if (correct >= scores.size()) throw Error("worst_case_rank: correct id out of range");
  std::size_t r = 1;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (i != correct && scores[i] >= scores[correct]) ++r;
  return r;
}

/// Ids sorted by score (descending), ties by id; the first k are kept.
inline std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> ids(scores.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  if (k != 0 && ids.size() > k) ids.resize(k);
  return ids;
}

/// Score of one target: forward (or Viterbi) log-likelihood, maximized over
/// start alignments.  With a finite `floor` and Viterbi scoring, alignments
/// that cannot reach the floor are abandoned; nullopt means all of them were.
struct TargetScore {
  double log_likelihood = kLogZero;
  std::size_t start = 0;
};

inline std::optional<TargetScore> score_target(const CompiledModel& cm, const ErrorModelParams& p, const Query& q,
                                               const RankOptions& opt, double floor = kLogZero) {
  const TargetModel& m = *cm.model;
  std::size_t starts = opt.alignment == Alignment::First ? 1 : m.length();
  TargetScore best;
  bool any = false;
  double step = opt.prune ? std::log(max_step_factor(p, m)) : 0.0;
  const EmissionCache emis = opt.viterbi ? log_emission_cache(cm, q) : emission_cache(cm, q);
  for (std::size_t s = 0; s < starts; ++s) {
    double v;
    if (!opt.viterbi) {
      v = forward_score(cm, q, s, emis);
    } else if (opt.prune) {
      // A start must beat both the global floor and this target's best so far.
      double f = std::max(floor, best.log_likelihood);
      auto r = viterbi_bounded(cm, q, s, f, step, false, &emis);
      if (!r) continue;
      v = r->log_prob;
    } else {
      v = viterbi(cm, q, s, false, &emis).log_prob;
    }
    any = true;
    if (v > best.log_likelihood || (best.log_likelihood == kLogZero && s == 0)) {
      best.log_likelihood = v;
      best.start = s;
    }
  }
  if (!any) return std::nullopt;
  return best;
}

namespace detail {

/// Shared k-th best score.  It only increases; a stale read is lower and
/// therefore prunes less, never more.
class TopKFloor {
 public:
  explicit TopKFloor(std::size_t k) : k_(k) {}

  double get() const { return floor_.load(std::memory_order_acquire); }

  void offer(double v) {
    if (k_ == 0 || v == kLogZero) return;
    std::lock_guard lock(mu_);
    heap_.push(v);
    if (heap_.size() > k_) heap_.pop();
    if (heap_.size() == k_) floor_.store(heap_.top(), std::memory_order_release);
  }

 private:
  std::size_t k_;
  std::mutex mu_;
  std::priority_queue<double, std::vector<double>, std::greater<>> heap_;
  std::atomic<double> floor_{kLogZero};
};

}  // namespace detail

/// Scores `query` against every target.  Pruning is exact for the top k:
/// a pruned target is known to score below the final k-th best.  When
/// `correct` is given, pruned targets whose bound does not rule them out are
/// rescored so the worst-case rank is exact as well.
inline RankedResult rank_database(const ErrorModelParams& params, std::span<const std::vector<QuantizedEvent>> db,
                                  std::span<const QuantizedEvent> query, const RankOptions& opt = {},
                                  std::optional<std::size_t> correct = std::nullopt) {
  if (db.empty()) throw Error("rank_database: empty database");
  if (query.empty()) throw Error("rank_database: empty query");
  if (opt.prune && !opt.viterbi) throw Error("rank_database: pruning requires Viterbi scoring");
  if (correct && *correct >= db.size()) throw Error("rank_database: correct id out of range");
  auto t0 = std::chrono::steady_clock::now();
  validate_params(params, 1e-6);
  Query q = make_query(query, params.max_elab, params.quant);

  RankedResult r;
  r.scores.assign(db.size(), kLogZero);
  r.best_start.assign(db.size(), 0);
  r.pruned.assign(db.size(), 0);
  std::vector<double> floor_used(db.size(), kLogZero);
  detail::TopKFloor floor(opt.prune ? opt.k : 0);

  auto score_one = [&](std::size_t i, double f) {
    TargetModel m = build_target_model(db[i], params.max_join, params.max_elab, 0, params.quant);
    CompiledModel cm = compile(m, params);
    return score_target(cm, params, q, opt, f);
  };
  auto work = [&](std::size_t i) {
    double f = opt.prune ? floor.get() : kLogZero;
    auto s = score_one(i, f);
    if (!s) {
      r.pruned[i] = 1;
      floor_used[i] = f;
      return;
    }
    r.scores[i] = s->log_likelihood;
    r.best_start[i] = s->start;
    floor.offer(s->log_likelihood);
  };

  // The correct target goes first so its score is available for the rank.
  std::vector<std::size_t> order;
  if (correct) order.push_back(*correct);
  for (std::size_t i = 0; i < db.size(); ++i)
    if (!correct || i != *correct) order.push_back(i);

  unsigned threads = std::max(1u, std::min<unsigned>(opt.threads, static_cast<unsigned>(db.size())));
  if (threads == 1) {
    for (std::size_t i : order) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < threads; ++w)
      pool.emplace_back([&] {
        for (std::size_t j; (j = next.fetch_add(1)) < order.size();) work(order[j]);
      });
    for (auto& t : pool) t.join();
  }

  if (correct) {
    std::size_t c = *correct;
    if (r.pruned[c]) {
      RankOptions full = opt;
      full.prune = false;
      TargetModel m = build_target_model(db[c], params.max_join, params.max_elab, 0, params.quant);
      CompiledModel cm = compile(m, params);
      auto s = score_target(cm, params, q, full);
      r.scores[c] = s->log_likelihood;
      r.best_start[c] = s->start;
      r.pruned[c] = 0;
    }
    std::vector<double> ranked = r.scores;
    for (std::size_t i = 0; i < db.size(); ++i) {
      // A pruned target scores below its floor; only an inconclusive bound is rescored.
      if (!r.pruned[i] || floor_used[i] <= r.scores[c]) continue;
      RankOptions full = opt;
      full.prune = false;
      TargetModel m = build_target_model(db[i], params.max_join, params.max_elab, 0, params.quant);
      CompiledModel cm = compile(m, params);
      ranked[i] = score_target(cm, params, q, full)->log_likelihood;
    }
    r.correct_rank = worst_case_rank(ranked, c);
  }
  r.unscorable = std::all_of(r.scores.begin(), r.scores.end(), [](double v) { return v == kLogZero; }) &&
                 std::none_of(r.pruned.begin(), r.pruned.end(), [](char p) { return p != 0; });
  r.top = top_k(r.scores, opt.k);
  // Pruned targets never belong to the top k; drop them if k exceeds the survivors.
  std::erase_if(r.top, [&](std::size_t i) { return r.pruned[i] != 0; });
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Metrics

inline double mrr(std::span<const std::size_t> ranks) {
  if (ranks.empty()) throw Error("mrr: empty input");
  double s = 0.0;
  for (std::size_t r : ranks) {
    if (r < 1) throw Error("mrr: ranks start at 1");
    s += 1.0 / static_cast<double>(r);
  }
  return s / static_cast<double>(ranks.size());
}

inline double median_rank(std::span<const std::size_t> ranks) {
  if (ranks.empty()) throw Error("median_rank: empty input");
  std::vector<std::size_t> v(ranks.begin(), ranks.end());
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? static_cast<double>(v[n / 2]) : 0.5 * static_cast<double>(v[n / 2 - 1] + v[n / 2]);
}

inline double mean_rank(std::span<const std::size_t> ranks) {
  if (ranks.empty()) throw Error("mean_rank: empty input");
  double s = 0.0;
  for (std::size_t r : ranks) s += static_cast<double>(r);
  return s / static_cast<double>(ranks.size());
}

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // (0,0) first, (1,1) last
};

/// Threshold sweep over the pooled score set: a score >= threshold is a
/// retrieval.  Scores from all queries share one threshold axis.
inline RocCurve roc(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty() || negatives.empty()) throw Error("roc: need at least one positive and one negative");
  std::vector<double> pos(positives.begin(), positives.end()), neg(negatives.begin(), negatives.end());
  for (double v : pos)
    if (std::isnan(v)) throw Error("roc: NaN score");
  for (double v : neg)
    if (std::isnan(v)) throw Error("roc: NaN score");
  std::sort(pos.begin(), pos.end(), std::greater<>());
  std::sort(neg.begin(), neg.end(), std::greater<>());
  std::vector<double> thresholds(pos);
  thresholds.insert(thresholds.end(), neg.begin(), neg.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  RocCurve c;
  c.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::size_t ip = 0, in = 0;
  for (double th : thresholds) {
    while (ip < pos.size() && pos[ip] >= th) ++ip;
    while (in < neg.size() && neg[in] >= th) ++in;
    c.points.push_back({static_cast<double>(in) / static_cast<double>(neg.size()),
                        static_cast<double>(ip) / static_cast<double>(pos.size()), th});
  }
  if (c.points.back().fpr != 1.0 || c.points.back().tpr != 1.0) c.points.push_back({1.0, 1.0, kLogZero});
  return c;
}

/// Area under the curve by the trapezoid rule.
inline double roc_auc(const RocCurve& c) {
  double a = 0.0;
  for (std::size_t i = 1; i < c.points.size(); ++i)
    a += (c.points[i].fpr - c.points[i - 1].fpr) * 0.5 * (c.points[i].tpr + c.points[i - 1].tpr);
  return a;
}

/// CSV with a log10 FPR column for log-scale plots (empty where FPR is 0).
inline std::string roc_csv(const RocCurve& c) {
  std::ostringstream os;
  os.precision(10);
  os << "fpr,tpr,log10_fpr,threshold\n";
  for (const auto& p : c.points) {
    os << p.fpr << ',' << p.tpr << ',';
    if (p.fpr > 0.0) os << std::log10(p.fpr);
    os << ',' << p.threshold << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Entropy

inline double gaussian_differential_entropy(double variance) {
  if (!(variance > 0.0)) throw Error("gaussian_differential_entropy: variance must be positive");
  return 0.5 * (std::log(2.0 * std::numbers::pi * variance) + 1.0);
}

inline double discrete_entropy(const Distribution& d) {
  validate_distribution(d, 1e-6, "discrete_entropy");
  double h = 0.0;
  for (double v : d.p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

/// Distribution of X + Y for independent X ~ a, Y ~ b.
inline Distribution convolve(const Distribution& a, const Distribution& b) {
  if (a.p.empty() || b.p.empty()) throw Error("convolve: empty distribution");
  Distribution out(a.lo + b.lo, a.hi() + b.hi());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out.p[i + j] += a.p[i] * b.p[j];
  return out;
}

}  // namespace qbh
