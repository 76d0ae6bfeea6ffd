#pragma once

// Subcommands of the `qbh` tool.  `run` takes the argument vector without
// the program name, so tests can drive the tool in-process.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qbh/qbh.hpp"

namespace qbh::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitNotConverged = 2;

/// MM_SEED, when set, replaces --seed.
inline std::uint64_t effective_seed(std::uint64_t flag) {
  if (const char* env = std::getenv("MM_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      unsigned long long v = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
      return v;
    } catch (const std::exception&) {
      throw Error(std::string("MM_SEED is not an unsigned integer: ") + env);
    }
  }
  return flag;
}

/// "N" or "MIN:MAX".
inline LengthRange parse_range(const std::string& s, const char* what) {
  LengthRange r;
  try {
    auto colon = s.find(':');
    std::size_t used = 0;
    if (colon == std::string::npos) {
      r.min = r.max = std::stoi(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
    } else {
      r.min = std::stoi(s.substr(0, colon), &used);
      if (used != colon) throw std::invalid_argument(s);
      r.max = std::stoi(s.substr(colon + 1), &used);
      if (used != s.size() - colon - 1) throw std::invalid_argument(s);
    }
  } catch (const std::invalid_argument&) {
    throw Error(std::string(what) + ": expected N or MIN:MAX, got '" + s + "'");
  }
  if (r.min < 1 || r.max < r.min) throw Error(std::string(what) + ": invalid range '" + s + "'");
  return r;
}

struct ModelFlags {
  std::string params;
  int L = 2;
  int M = 2;
  int q = 29;
  std::string variant = "full";

  void add(CLI::App* app, bool with_params = true) {
    if (with_params) app->add_option("--params", params, "Parameter JSON (default: built-in starting parameters)");
    app->add_option("--L", L, "Longest join when no parameter file is given")->check(CLI::PositiveNumber);
    app->add_option("--M", M, "Longest elaboration when no parameter file is given")->check(CLI::PositiveNumber);
    app->add_option("--q", q, "IOI quantization levels when no parameter file is given")->check(CLI::Range(2, 1000));
    app->add_option("--variant", variant, "full, restricted, local or cumulative")
        ->check(CLI::IsMember({"full", "restricted", "local", "cumulative"}));
  }

  ErrorModelParams load(const std::string& path) const {
    QuantizationConfig quant;
    quant.q = q;
    ErrorModelParams p = path.empty() ? default_params(L, M, quant) : read_params(path);
    return apply_variant(std::move(p), parse_variant(variant));
  }
  ErrorModelParams load() const { return load(params); }
};

inline std::vector<QuantizedEvent> load_target(const fs::path& path, const QuantizationConfig& quant) {
  NoteFile f = read_notes(path);
  if (f.notes.empty()) throw Error(path.string() + ": empty target");
  return quantize_target(f.notes, quant);
}

inline std::vector<QuantizedEvent> load_query(const fs::path& path, const QuantizationConfig& quant) {
  NoteFile f = read_notes(path);
  if (f.notes.empty()) throw Error(path.string() + ": empty query");
  return quantize_sequence(f.notes, quant);
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

inline std::string format_double(double v) {
  if (std::isinf(v)) return v < 0 ? "-inf" : "inf";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

/// JSON has no infinities; unscorable results are written as null.
inline json score_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string manifest, init, out;
  ModelFlags model;
  double tol = 1e-4;
  int max_iter = 100;
  double floor = 1e-6;
  unsigned threads = 1;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  ErrorModelParams init = a.model.load(a.init);
  auto entries = read_manifest(a.manifest);
  if (entries.empty()) throw Error(a.manifest + ": empty manifest");
  std::vector<TrainingPair> pairs;
  for (const auto& e : entries) {
    TrainingPair p;
    p.target = load_target(e.target, init.quant);
    p.query = load_query(e.query, init.quant);
    if (e.start_index > p.target.size())
      throw Error(e.target.string() + ": start_index " + std::to_string(e.start_index) + " beyond target length");
    p.start = e.start_index - 1;
    pairs.push_back(std::move(p));
  }
  TrainingOptions opt;
  opt.tol = a.tol;
  opt.max_iter = a.max_iter;
  opt.floor = a.floor;
  opt.threads = a.threads;
  TrainingReport rep = train(pairs, init, opt);
  if (rep.skipped_queries > 0)
    err << "warning: " << rep.skipped_queries << " queries have zero probability and were skipped\n";
  for (const auto& f : rep.fallbacks) err << "warning: no evidence for " << f << ", kept previous table\n";

  json report = report_to_json(rep);
  report["variant"] = a.model.variant;
  report["manifest"] = a.manifest;
  fs::path dir(a.out);
  atomic_write(dir / "params.json", dump(params_to_json(rep.final_params)));
  atomic_write(dir / "report.json", dump(report));
  out << "iterations " << rep.iterations << (rep.converged ? " (converged)" : " (max_iter reached)")
      << ", log-likelihood " << format_double(rep.log_likelihood_trace.back()) << "\n";
  return rep.converged ? kExitOk : kExitNotConverged;
}

struct ScoreArgs {
  std::string target, query;
  ModelFlags model;
  std::optional<std::size_t> start;  // 1-based
  std::string alignment = "max";
  bool viterbi = false;
};

inline int cmd_score(const ScoreArgs& a, std::ostream& out) {
  ErrorModelParams p = a.model.load();
  auto target = load_target(a.target, p.quant);
  auto query = load_query(a.query, p.quant);
  TargetModel m = build_target_model(target, p.max_join, p.max_elab, 0, p.quant);
  CompiledModel cm = compile(m, p);
  Query q = make_query(query, p.max_elab, p.quant);
  TargetScore s;
  if (a.start) {
    if (*a.start < 1 || *a.start > target.size()) throw Error("--start must be in [1, target length]");
    s.start = *a.start - 1;
    s.log_likelihood = a.viterbi ? viterbi(cm, q, s.start, false).log_prob : forward(cm, q, s.start).log_likelihood;
  } else {
    RankOptions opt;
    opt.viterbi = a.viterbi;
    opt.alignment = parse_alignment(a.alignment);
    s = *score_target(cm, p, q, opt);
  }
  out << json{{"log_likelihood", score_json(s.log_likelihood)}, {"start_index", s.start + 1}}.dump() << "\n";
  return kExitOk;
}

struct RankArgs {
  std::string database, queries_dir, out;
  std::vector<std::string> queries;
  ModelFlags model;
  std::size_t k = 10;
  bool viterbi = false, prune = false;
  std::string alignment = "max";
  unsigned threads = 1;
};

inline std::vector<fs::path> query_paths(const std::vector<std::string>& files, const std::string& dir) {
  std::vector<fs::path> paths(files.begin(), files.end());
  if (!dir.empty()) {
    if (!fs::is_directory(dir)) throw Error(dir + ": not a directory");
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".json") found.push_back(e.path());
    std::sort(found.begin(), found.end());
    paths.insert(paths.end(), found.begin(), found.end());
  }
  if (paths.empty()) throw Error("no queries given (use --query or --queries-dir)");
  return paths;
}

inline int cmd_rank(const RankArgs& a, std::ostream& out) {
  ErrorModelParams p = a.model.load();
  auto raw_db = read_database(a.database);
  if (raw_db.empty()) throw Error(a.database + ": empty database");
  std::vector<std::vector<QuantizedEvent>> db;
  for (const auto& t : raw_db) {
    if (t.empty()) throw Error(a.database + ": empty target");
    db.push_back(quantize_target(t, p.quant));
  }
  RankOptions opt;
  opt.k = a.k;
  opt.viterbi = a.viterbi;
  opt.prune = a.prune;
  opt.alignment = parse_alignment(a.alignment);
  opt.threads = a.threads;
  if (opt.prune && !opt.viterbi) throw Error("--prune requires --viterbi");

  std::ostringstream lines;
  for (const auto& path : query_paths(a.queries, a.queries_dir)) {
    auto query = load_query(path, p.quant);
    RankedResult r = rank_database(p, db, query, opt);
    std::string id = path.stem().string();
    for (std::size_t i = 0; i < r.top.size(); ++i) {
      std::size_t t = r.top[i];
      json line{{"query", id}, {"target_id", t}, {"log_likelihood", score_json(r.scores[t])}, {"rank", i + 1}};
      if (r.unscorable) line["unscorable"] = true;
      lines << line.dump() << "\n";
    }
  }
  if (a.out.empty())
    out << lines.str();
  else
    atomic_write(a.out, lines.str());
  return kExitOk;
}

struct SimulateArgs {
  std::string out, params, corpus_dir;
  std::uint64_t seed = 1;
  std::size_t db_size = 500, queries = 50, train_queries = 80;
  std::string query_len = "8:12", target_len = "20:24";
  unsigned threads = 1;
  int L = 2, M = 2;
};

inline int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  std::uint64_t seed = effective_seed(a.seed);
  SimulationConfig cfg;
  cfg.params = a.params.empty() ? moderate_params(a.L, a.M) : read_params(a.params);
  cfg.rng_seed = seed;
  cfg.database_size = a.db_size;
  cfg.query_length_range = parse_range(a.query_len, "--query-len");
  cfg.target_length_range = parse_range(a.target_len, "--target-len");
  if (cfg.query_length_range.max > cfg.target_length_range.min)
    throw Error("--query-len must not exceed the shortest target length");
  if (a.db_size == 0 && (a.queries > 0 || a.train_queries > 0)) throw Error("queries need a non-empty database");

  CorpusStats stats = default_corpus_stats(cfg.params.quant);
  if (!a.corpus_dir.empty()) {
    std::vector<std::vector<RawNote>> corpus;
    for (const auto& p : query_paths({}, a.corpus_dir)) corpus.push_back(read_notes(p).notes);
    stats = build_corpus_stats(corpus, cfg.params.quant);
  }
  auto db = generate_database(stats, cfg, a.threads);

  // Everything is staged next to the destination and moved in at the end.
  fs::path dest(a.out);
  if (fs::exists(dest) && !fs::is_empty(dest)) throw Error(a.out + ": output directory exists and is not empty");
  fs::path stage = dest;
  stage += ".partial";
  fs::remove_all(stage);
  try {
    atomic_write(stage / "database.json", dump(database_to_json(db)));
    atomic_write(stage / "params.json", dump(params_to_json(cfg.params)));
    for (std::size_t i = 0; i < db.size(); ++i) {
      std::ostringstream name;
      name << "t" << std::setw(4) << std::setfill('0') << i << ".json";
      atomic_write(stage / "targets" / name.str(), dump(notes_to_json(db[i], true)));
    }
    auto test = a.queries ? sample_query_set(db, cfg, a.queries, seed * 2 + 1) : std::vector<SimulatedQuery>{};
    json truth = json::object();
    for (std::size_t i = 0; i < test.size(); ++i) {
      std::ostringstream name;
      name << "q" << std::setw(3) << std::setfill('0') << i;
      atomic_write(stage / "queries" / (name.str() + ".json"), dump(notes_to_json(test[i].sample.raw, false)));
      truth[name.str()] = {{"target_id", test[i].target_id}, {"start_index", test[i].start + 1}};
    }
    atomic_write(stage / "truth.json", dump(truth));
    auto train_set =
        a.train_queries ? sample_query_set(db, cfg, a.train_queries, seed * 2 + 2) : std::vector<SimulatedQuery>{};
    std::vector<ManifestEntry> manifest;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
      std::ostringstream name, tname;
      name << "train/r" << std::setw(3) << std::setfill('0') << i << ".json";
      tname << "targets/t" << std::setw(4) << std::setfill('0') << train_set[i].target_id << ".json";
      atomic_write(stage / name.str(), dump(notes_to_json(train_set[i].sample.raw, false)));
      manifest.push_back({tname.str(), name.str(), train_set[i].start + 1});
    }
    atomic_write(stage / "manifest.json", dump(manifest_to_json(manifest)));
    if (fs::exists(dest)) fs::remove(dest);
    fs::rename(stage, dest);
  } catch (...) {
    fs::remove_all(stage);
    throw;
  }
  out << "wrote " << db.size() << " targets, " << a.queries << " queries, " << a.train_queries
      << " training queries to " << a.out << " (seed " << seed << ")\n";
  return kExitOk;
}

struct EvalArgs {
  std::string results, truth, out, roc_csv;
};

struct EvalMetrics {
  std::vector<std::size_t> ranks;
  std::vector<double> positives, negatives;
  std::size_t incomplete = 0;  // queries whose correct target was not listed
};

/// Worst-case ranks from JSON-lines results.  A query whose correct target
/// is missing from its lines is ranked just below everything listed.
inline EvalMetrics evaluate_results(const std::string& results_path, const json& truth) {
  std::map<std::string, std::vector<std::pair<std::size_t, double>>> by_query;
  std::istringstream in(read_file(results_path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
      double v = j.at("log_likelihood").is_null() ? kLogZero : j.at("log_likelihood").get<double>();
      by_query[j.at("query").get<std::string>()].emplace_back(j.at("target_id").get<std::size_t>(), v);
    } catch (const json::exception& e) {
      throw Error(results_path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!truth.is_object() || truth.empty()) throw Error("truth: expected a non-empty object");
  EvalMetrics m;
  for (const auto& [qid, t] : truth.items()) {
    std::size_t correct = t.is_object() ? t.at("target_id").get<std::size_t>() : t.get<std::size_t>();
    auto it = by_query.find(qid);
    if (it == by_query.end()) throw Error("results contain no lines for query " + qid);
    std::optional<double> cs;
    for (auto [id, v] : it->second)
      if (id == correct) cs = v;
    if (!cs) {
      ++m.incomplete;
      m.ranks.push_back(it->second.size() + 1);
      for (auto [id, v] : it->second) m.negatives.push_back(v);
      continue;
    }
    std::size_t rank = 1;
    for (auto [id, v] : it->second)
      if (id != correct) {
        if (v >= *cs) ++rank;
        m.negatives.push_back(v);
      }
    m.ranks.push_back(rank);
    m.positives.push_back(*cs);
  }
  return m;
}

inline int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  EvalMetrics m = evaluate_results(a.results, read_json(a.truth));
  json metrics{{"queries", m.ranks.size()},
               {"mrr", mrr(m.ranks)},
               {"median_rank", median_rank(m.ranks)},
               {"mean_rank", mean_rank(m.ranks)},
               {"ranks", m.ranks},
               {"incomplete", m.incomplete}};
  std::optional<RocCurve> curve;
  if (!m.positives.empty() && !m.negatives.empty()) {
    curve = roc(m.positives, m.negatives);
    json pts = json::array();
    for (const auto& p : curve->points) pts.push_back({p.fpr, p.tpr});
    metrics["roc"] = pts;
    metrics["auc"] = roc_auc(*curve);
  } else {
    metrics["roc"] = json::array();
  }
  if (m.incomplete) err << "warning: " << m.incomplete << " queries lack a score for their correct target\n";
  if (!a.roc_csv.empty()) {
    if (!curve) throw Error("--roc-csv: no positives or negatives to build a curve from");
    atomic_write(a.roc_csv, roc_csv(*curve));
  }
  std::ostringstream mrr4;
  mrr4 << std::fixed << std::setprecision(4) << metrics["mrr"].get<double>();
  metrics["mrr_4dp"] = mrr4.str();
  if (a.out.empty())
    out << dump(metrics);
  else
    atomic_write(a.out, dump(metrics));
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Query-by-humming matcher: train, score, rank, simulate, eval"};
  app.name("qbh");
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Re-estimate error-model parameters from a training manifest");
  train_cmd->add_option("--manifest", ta.manifest, "Training manifest JSON")->required();
  train_cmd->add_option("--init", ta.init, "Starting parameters (default: built-in)");
  train_cmd->add_option("--out", ta.out, "Output directory for params.json and report.json")->required();
  ta.model.add(train_cmd, false);
  train_cmd->add_option("--tol", ta.tol, "Convergence threshold on the largest parameter change");
  train_cmd->add_option("--max-iter", ta.max_iter, "Iteration cap")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--floor", ta.floor, "Additive floor before renormalization")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--threads", ta.threads, "Worker threads")->check(CLI::PositiveNumber);

  ScoreArgs sa;
  auto* score_cmd = app.add_subcommand("score", "Log-likelihood of one query against one target");
  score_cmd->add_option("--target", sa.target, "Target note file")->required();
  score_cmd->add_option("--query", sa.query, "Query note file")->required();
  sa.model.add(score_cmd);
  score_cmd->add_option("--start", sa.start, "1-based start alignment (default: best over all)");
  score_cmd->add_option("--alignment", sa.alignment, "max or first")->check(CLI::IsMember({"max", "first"}));
  score_cmd->add_flag("--viterbi", sa.viterbi, "Best-path score instead of forward likelihood");

  RankArgs ra;
  auto* rank_cmd = app.add_subcommand("rank", "Rank database targets for each query (JSON lines)");
  rank_cmd->add_option("--database", ra.database, "Database JSON")->required();
  rank_cmd->add_option("--query", ra.queries, "Query note file(s)");
  rank_cmd->add_option("--queries-dir", ra.queries_dir, "Directory of query note files");
  ra.model.add(rank_cmd);
  rank_cmd->add_option("--k", ra.k, "Results per query, 0 for all (default 10)");
  rank_cmd->add_flag("--viterbi", ra.viterbi, "Best-path scoring");
  rank_cmd->add_flag("--prune", ra.prune, "Branch and bound against the k-th best (needs --viterbi)");
  rank_cmd->add_option("--alignment", ra.alignment, "max or first")->check(CLI::IsMember({"max", "first"}));
  rank_cmd->add_option("--threads", ra.threads, "Worker threads")->check(CLI::PositiveNumber);
  rank_cmd->add_option("--out", ra.out, "Output file (default: stdout)");

  SimulateArgs ma;
  auto* sim_cmd = app.add_subcommand("simulate", "Write a synthetic database, queries and ground truth");
  sim_cmd->add_option("--out", ma.out, "Output directory")->required();
  sim_cmd->add_option("--seed", ma.seed, "Random seed (MM_SEED overrides)");
  sim_cmd->add_option("--db-size", ma.db_size, "Number of targets");
  sim_cmd->add_option("--queries", ma.queries, "Number of test queries");
  sim_cmd->add_option("--train-queries", ma.train_queries, "Number of training queries");
  sim_cmd->add_option("--query-len", ma.query_len, "Query length, N or MIN:MAX");
  sim_cmd->add_option("--target-len", ma.target_len, "Target length, N or MIN:MAX");
  sim_cmd->add_option("--params", ma.params, "Generating parameters (default: moderate noise)");
  sim_cmd->add_option("--corpus", ma.corpus_dir, "Directory of symbolic note files for corpus statistics");
  sim_cmd->add_option("--L", ma.L, "Longest join for the default parameters")->check(CLI::PositiveNumber);
  sim_cmd->add_option("--M", ma.M, "Longest elaboration for the default parameters")->check(CLI::PositiveNumber);
  sim_cmd->add_option("--threads", ma.threads, "Worker threads")->check(CLI::PositiveNumber);

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "MRR, ranks and ROC from rank output and ground truth");
  eval_cmd->add_option("--results", ea.results, "JSON lines from `rank --k 0`")->required();
  eval_cmd->add_option("--truth", ea.truth, "Ground truth JSON")->required();
  eval_cmd->add_option("--out", ea.out, "Metrics file (default: stdout)");
  eval_cmd->add_option("--roc-csv", ea.roc_csv, "Also write the ROC curve as CSV");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitError;
  }

  try {
    if (*train_cmd) return cmd_train(ta, out, err);
    if (*score_cmd) return cmd_score(sa, out);
    if (*rank_cmd) return cmd_rank(ra, out);
    if (*sim_cmd) return cmd_simulate(ma, out);
    if (*eval_cmd) return cmd_eval(ea, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}

}  // namespace qbh::cli
