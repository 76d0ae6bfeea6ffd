#pragma once

// JSON file formats.
//
//   notes      [{"note": 60.3, "ioi_ms": 480}, ...]   queries (offset search applies)
//              [{"pitch": 60, "ioi_ms": 480}, ...]    symbolic targets
//   database   [<notes>, <notes>, ...]
//   params     {"L", "M", "q", "init_tempo_sigma", "edit", "modulation",
//               "tempo_change", "pitch_error", "rhythm_error"}
//              Each table is a flat list over its delta range, or a list of
//              such lists (one per context).
//   manifest   [{"target": path, "query": path, "start_index": 1}, ...]
//              Paths are relative to the manifest; start_index is 1-based.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qbh/error.hpp"
#include "qbh/events.hpp"
#include "qbh/params.hpp"
#include "qbh/training.hpp"

namespace qbh {

using json = nlohmann::json;

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

/// Writes to a sibling temporary and renames it into place, so readers never
/// see a partial file.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error("cannot rename " + tmp.string() + ": " + ec.message());
  }
}

// ---------------------------------------------------------------------------
// Notes

struct NoteFile {
  std::vector<RawNote> notes;
  bool symbolic = false;  // every entry used "pitch"
};

inline NoteFile notes_from_json(const json& j, const std::string& what = "notes") {
  if (!j.is_array()) throw Error(what + ": expected an array of note objects");
  NoteFile f;
  std::size_t pitched = 0;
  for (const auto& n : j) {
    if (!n.is_object() || !n.contains("ioi_ms")) throw Error(what + ": each note needs ioi_ms");
    RawNote r;
    if (n.contains("note")) {
      r.note_number = n.at("note").get<double>();
    } else if (n.contains("pitch")) {
      if (!n.at("pitch").is_number_integer()) throw Error(what + ": pitch must be an integer");
      r.note_number = n.at("pitch").get<int>();
      ++pitched;
    } else {
      throw Error(what + ": each note needs note or pitch");
    }
    r.ioi_ms = n.at("ioi_ms").get<double>();
    f.notes.push_back(r);
  }
  check_notes(f.notes);
  f.symbolic = !f.notes.empty() && pitched == f.notes.size();
  return f;
}

inline json notes_to_json(std::span<const RawNote> notes, bool symbolic) {
  json j = json::array();
  for (const auto& n : notes) {
    if (symbolic)
      j.push_back({{"pitch", static_cast<int>(std::lround(n.note_number))}, {"ioi_ms", n.ioi_ms}});
    else
      j.push_back({{"note", n.note_number}, {"ioi_ms", n.ioi_ms}});
  }
  return j;
}

inline NoteFile read_notes(const std::filesystem::path& path) {
  return notes_from_json(read_json(path), path.string());
}

/// Quantizes a note file: symbolic files as targets, the rest as queries.
inline std::vector<QuantizedEvent> quantize_file(const NoteFile& f, const QuantizationConfig& quant, bool as_target) {
  return as_target ? quantize_target(f.notes, quant) : quantize_sequence(f.notes, quant);
}

inline std::vector<std::vector<RawNote>> read_database(const std::filesystem::path& path) {
  json j = read_json(path);
  if (!j.is_array()) throw Error(path.string() + ": expected an array of targets");
  std::vector<std::vector<RawNote>> db;
  for (std::size_t i = 0; i < j.size(); ++i)
    db.push_back(notes_from_json(j[i], path.string() + "[" + std::to_string(i) + "]").notes);
  return db;
}

inline json database_to_json(std::span<const std::vector<RawNote>> db) {
  json j = json::array();
  for (const auto& t : db) j.push_back(notes_to_json(t, true));
  return j;
}

// ---------------------------------------------------------------------------
// Parameters

namespace detail {

inline json tables_to_json(const std::vector<Distribution>& tables) {
  if (tables.size() == 1) return tables.front().p;
  json j = json::array();
  for (const auto& d : tables) j.push_back(d.p);
  return j;
}

inline std::vector<Distribution> tables_from_json(const json& j, int lo, int hi, const char* name) {
  if (!j.is_array() || j.empty()) throw Error(std::string("params: ") + name + " must be a non-empty list");
  std::vector<json> rows;
  if (j.front().is_array())
    rows.assign(j.begin(), j.end());
  else
    rows.push_back(j);
  std::vector<Distribution> out;
  for (const auto& r : rows) {
    auto v = r.get<std::vector<double>>();
    if (static_cast<int>(v.size()) != hi - lo + 1)
      throw Error(std::string("params: ") + name + " needs " + std::to_string(hi - lo + 1) + " values");
    out.emplace_back(lo, std::move(v));
  }
  return out;
}

}  // namespace detail

inline json params_to_json(const ErrorModelParams& p) {
  return {{"L", p.max_join},
          {"M", p.max_elab},
          {"q", p.quant.q},
          {"ioi_min_ms", p.quant.ioi_min_ms},
          {"ioi_max_ms", p.quant.ioi_max_ms},
          {"init_tempo_sigma", p.init_tempo_sigma},
          {"edit", detail::tables_to_json(p.edit)},
          {"modulation", detail::tables_to_json(p.modulation)},
          {"tempo_change", detail::tables_to_json(p.tempo_change)},
          {"pitch_error", detail::tables_to_json(p.pitch_error)},
          {"rhythm_error", detail::tables_to_json(p.rhythm_error)}};
}

/// Parses and validates (sums within 1e-6) a parameter object.
inline ErrorModelParams params_from_json(const json& j) {
  if (!j.is_object()) throw Error("params: expected an object");
  try {
    ErrorModelParams p;
    p.max_join = j.value("L", 2);
    p.max_elab = j.value("M", 2);
    p.quant.q = j.value("q", 29);
    p.quant.ioi_min_ms = j.value("ioi_min_ms", 30.0);
    p.quant.ioi_max_ms = j.value("ioi_max_ms", 3840.0);
    p.init_tempo_sigma = j.value("init_tempo_sigma", 1.5);
    p.quant.validate();
    for (const char* key : {"edit", "modulation", "tempo_change", "pitch_error", "rhythm_error"})
      if (!j.contains(key)) throw Error(std::string("params: missing ") + key);
    p.edit = detail::tables_from_json(j.at("edit"), 0, p.max_join + p.max_elab - 2, "edit");
    p.modulation = detail::tables_from_json(j.at("modulation"), kKeyLo, kKeyHi, "modulation");
    p.tempo_change = detail::tables_from_json(j.at("tempo_change"), kTempoLo, kTempoHi, "tempo_change");
    p.pitch_error = detail::tables_from_json(j.at("pitch_error"), kKeyLo, kKeyHi, "pitch_error");
    p.rhythm_error = detail::tables_from_json(j.at("rhythm_error"), -(p.quant.q - 1), p.quant.q - 1, "rhythm_error");
    validate_params(p, 1e-6);
    return p;
  } catch (const json::exception& e) {
    throw Error(std::string("params: ") + e.what());
  }
}

inline ErrorModelParams read_params(const std::filesystem::path& path) {
  try {
    return params_from_json(read_json(path));
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training manifest and report

struct ManifestEntry {
  std::filesystem::path target;
  std::filesystem::path query;
  std::size_t start_index = 1;  // 1-based
};

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  json j = read_json(path);
  if (!j.is_array()) throw Error(path.string() + ": manifest must be a list");
  std::filesystem::path base = path.parent_path();
  std::vector<ManifestEntry> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    std::string where = path.string() + "[" + std::to_string(i) + "]";
    if (!e.is_object() || !e.contains("target") || !e.contains("query") || !e.at("target").is_string() ||
        !e.at("query").is_string())
      throw Error(where + ": needs string fields target and query");
    ManifestEntry m;
    m.target = base / e.at("target").get<std::string>();
    m.query = base / e.at("query").get<std::string>();
    if (e.contains("start_index")) {
      if (!e.at("start_index").is_number_integer() || e.at("start_index").get<long long>() < 1)
        throw Error(where + ": start_index must be an integer >= 1");
      m.start_index = e.at("start_index").get<std::size_t>();
    }
    out.push_back(std::move(m));
  }
  return out;
}

inline json manifest_to_json(const std::vector<ManifestEntry>& entries) {
  json j = json::array();
  for (const auto& e : entries)
    j.push_back({{"target", e.target.generic_string()}, {"query", e.query.generic_string()}, {"start_index", e.start_index}});
  return j;
}

inline json report_to_json(const TrainingReport& r) {
  return {{"iterations", r.iterations},
          {"converged", r.converged},
          {"log_likelihood_trace", r.log_likelihood_trace},
          {"objective_trace", r.objective_trace},
          {"skipped_queries", r.skipped_queries},
          {"fallback_contexts", r.fallbacks},
          {"final_params", params_to_json(r.final_params)}};
}

}  // namespace qbh
