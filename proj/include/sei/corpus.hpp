#pragma once

// Canonical corpus types, JSONL ingestion and the empty/meaningless report
// filter. Everything downstream consumes StudyRecord.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "sei/error.hpp"
#include "sei/tokenizer.hpp"

namespace sei {

using json = nlohmann::json;

enum class EntityLabel { AnatDP, ObsDP, ObsDA, ObsU };

inline std::string_view label_name(EntityLabel l) {
  switch (l) {
    case EntityLabel::AnatDP: return "ANAT-DP";
    case EntityLabel::ObsDP: return "OBS-DP";
    case EntityLabel::ObsDA: return "OBS-DA";
    case EntityLabel::ObsU: return "OBS-U";
  }
  return "?";
}

inline std::optional<EntityLabel> parse_label(std::string_view s) {
  if (s == "ANAT-DP") return EntityLabel::AnatDP;
  if (s == "OBS-DP") return EntityLabel::ObsDP;
  if (s == "OBS-DA") return EntityLabel::ObsDA;
  if (s == "OBS-U") return EntityLabel::ObsU;
  return std::nullopt;
}

/// One RadGraph-style entity. `start_ix`/`end_ix` are inclusive indices into
/// the owning report's token list.
struct EntityAnnotation {
  std::string tokens;
  EntityLabel label = EntityLabel::AnatDP;
  std::size_t start_ix = 0;
  std::size_t end_ix = 0;

  std::size_t length() const { return end_ix - start_ix + 1; }
  bool operator==(const EntityAnnotation&) const = default;
};

struct ReportDocument {
  std::string study_id;
  std::string text;
  std::vector<std::string> tokens;
  std::vector<std::size_t> sentence_ends;  // indices of "." tokens, ascending

  bool operator==(const ReportDocument&) const = default;
};

inline ReportDocument make_report(std::string study_id, std::string text) {
  ReportDocument doc;
  doc.study_id = std::move(study_id);
  doc.text = std::move(text);
  doc.tokens = tokenize(doc.text);
  for (std::size_t i = 0; i < doc.tokens.size(); ++i)
    if (doc.tokens[i] == ".") doc.sentence_ends.push_back(i);
  return doc;
}

inline constexpr std::size_t kNumConditions = 14;
using LabelVector = std::array<std::uint8_t, kNumConditions>;

struct StudyRecord {
  std::string study_id;
  ReportDocument report;
  std::vector<EntityAnnotation> entities;
  std::optional<std::string> indication;
  std::optional<std::vector<float>> embedding;
  std::optional<LabelVector> labels14;

  bool operator==(const StudyRecord&) const = default;
};

struct CorpusFilterConfig {
  std::size_t min_tokens = 3;
  std::vector<std::string> junk_patterns = {"is subnitted"};
};

struct DroppedRecord {
  StudyRecord record;
  std::string reason;  // "empty", "too_short" or "junk:<pattern>"
};

struct FilterResult {
  std::vector<StudyRecord> kept;
  std::vector<DroppedRecord> dropped;
};

/// Checks span bounds and span/token-count agreement for every entity.
inline void validate_record(const StudyRecord& r) {
  const auto n = r.report.tokens.size();
  for (const auto& e : r.entities) {
    if (e.end_ix < e.start_ix)
      throw ValidationError("study " + r.study_id + ": entity '" + e.tokens +
                            "' has end_ix < start_ix");
    if (e.end_ix >= n)
      throw ValidationError("study " + r.study_id + ": entity '" + e.tokens + "' end_ix " +
                            std::to_string(e.end_ix) + " out of bounds for " +
                            std::to_string(n) + " report tokens");
    const auto words = split_whitespace(e.tokens).size();
    if (words != e.length())
      throw ValidationError("study " + r.study_id + ": entity '" + e.tokens + "' spans " +
                            std::to_string(e.length()) + " tokens but has " +
                            std::to_string(words) + " words");
  }
}

namespace detail {

template <typename T>
T field(const json& obj, const char* name, std::size_t line) {
  auto it = obj.find(name);
  if (it == obj.end())
    throw ValidationError("line " + std::to_string(line) + ": missing field '" + name + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ValidationError("line " + std::to_string(line) + ": field '" + name +
                          "' has wrong type");
  }
}

inline std::vector<float> parse_vec(const json& v, std::size_t line, const char* name) {
  if (!v.is_array())
    throw ValidationError("line " + std::to_string(line) + ": field '" + name +
                          "' must be an array of numbers");
  std::vector<float> out;
  out.reserve(v.size());
  for (const auto& x : v) {
    if (!x.is_number())
      throw ValidationError("line " + std::to_string(line) + ": field '" + name +
                            "' must be an array of numbers");
    out.push_back(x.get<float>());
  }
  return out;
}

inline json parse_line(const std::string& text, std::size_t line) {
  try {
    auto j = json::parse(text);
    if (!j.is_object()) throw ValidationError("line " + std::to_string(line) + ": not a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw ValidationError("line " + std::to_string(line) + ": malformed JSON (" + e.what() + ")");
  }
}

inline bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return is_space(c); });
}

}  // namespace detail

inline EntityAnnotation parse_entity(const json& j, std::size_t line) {
  if (!j.is_object())
    throw ValidationError("line " + std::to_string(line) + ": field 'entities' must hold objects");
  EntityAnnotation e;
  e.tokens = detail::field<std::string>(j, "tokens", line);
  const auto label = detail::field<std::string>(j, "label", line);
  const auto parsed = parse_label(label);
  if (!parsed)
    throw ValidationError("line " + std::to_string(line) + ": unknown entity label '" + label + "'");
  e.label = *parsed;
  const auto s = detail::field<long long>(j, "start_ix", line);
  const auto t = detail::field<long long>(j, "end_ix", line);
  if (s < 0 || t < 0)
    throw ValidationError("line " + std::to_string(line) + ": field 'start_ix'/'end_ix' negative");
  e.start_ix = static_cast<std::size_t>(s);
  e.end_ix = static_cast<std::size_t>(t);
  return e;
}

inline json entity_to_json(const EntityAnnotation& e) {
  return json{{"tokens", e.tokens},
              {"label", std::string(label_name(e.label))},
              {"start_ix", e.start_ix},
              {"end_ix", e.end_ix}};
}

inline LabelVector parse_labels14(const json& v, std::size_t line) {
  if (!v.is_array() || v.size() != kNumConditions)
    throw ValidationError("line " + std::to_string(line) + ": field 'labels14' must have 14 entries");
  LabelVector out{};
  for (std::size_t i = 0; i < kNumConditions; ++i) {
    if (!v[i].is_number_integer() || (v[i].get<int>() != 0 && v[i].get<int>() != 1))
      throw ValidationError("line " + std::to_string(line) + ": field 'labels14' entries must be 0 or 1");
    out[i] = static_cast<std::uint8_t>(v[i].get<int>());
  }
  return out;
}

/// Parses one corpus line. `line` is used for error messages only.
inline StudyRecord parse_record(const json& j, std::size_t line) {
  StudyRecord r;
  r.study_id = detail::field<std::string>(j, "study_id", line);
  r.report = make_report(r.study_id, detail::field<std::string>(j, "findings", line));
  if (auto it = j.find("indication"); it != j.end() && !it->is_null()) {
    if (!it->is_string())
      throw ValidationError("line " + std::to_string(line) + ": field 'indication' has wrong type");
    r.indication = it->get<std::string>();
  }
  if (auto it = j.find("entities"); it != j.end() && !it->is_null()) {
    if (!it->is_array())
      throw ValidationError("line " + std::to_string(line) + ": field 'entities' must be an array");
    for (const auto& e : *it) r.entities.push_back(parse_entity(e, line));
  }
  if (auto it = j.find("labels14"); it != j.end() && !it->is_null())
    r.labels14 = parse_labels14(*it, line);
  if (auto it = j.find("vec"); it != j.end() && !it->is_null())
    r.embedding = detail::parse_vec(*it, line, "vec");
  try {
    validate_record(r);
  } catch (const ValidationError& e) {
    throw ValidationError("line " + std::to_string(line) + ": " + e.what());
  }
  return r;
}

inline json record_to_json(const StudyRecord& r) {
  json j;
  j["study_id"] = r.study_id;
  j["findings"] = r.report.text;
  j["indication"] = r.indication ? json(*r.indication) : json(nullptr);
  json ents = json::array();
  for (const auto& e : r.entities) ents.push_back(entity_to_json(e));
  j["entities"] = std::move(ents);
  j["labels14"] = r.labels14 ? json(*r.labels14) : json(nullptr);
  if (r.embedding) j["vec"] = *r.embedding;
  return j;
}

inline std::string serialize_record(const StudyRecord& r) { return record_to_json(r).dump(); }

inline std::vector<StudyRecord> parse_corpus(std::istream& in) {
  std::vector<StudyRecord> out;
  std::unordered_set<std::string> seen;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (detail::blank(text)) continue;
    auto rec = parse_record(detail::parse_line(text, line), line);
    if (!seen.insert(rec.study_id).second)
      throw ValidationError("line " + std::to_string(line) + ": duplicate study_id '" +
                            rec.study_id + "'");
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return in;
}

inline std::ofstream open_output(const std::string& path, bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary | std::ios::out : std::ios::out);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  return out;
}

inline std::vector<StudyRecord> load_corpus(const std::string& path) {
  auto in = open_input(path);
  try {
    return parse_corpus(in);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

inline void write_corpus(const std::string& path, const std::vector<StudyRecord>& records) {
  auto out = open_output(path);
  for (const auto& r : records) out << serialize_record(r) << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

struct EmbeddingRow {
  std::string study_id;
  std::vector<float> vec;
};

inline std::vector<EmbeddingRow> parse_embeddings(std::istream& in) {
  std::vector<EmbeddingRow> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (detail::blank(text)) continue;
    const auto j = detail::parse_line(text, line);
    EmbeddingRow row;
    row.study_id = detail::field<std::string>(j, "study_id", line);
    auto it = j.find("vec");
    if (it == j.end()) throw ValidationError("line " + std::to_string(line) + ": missing field 'vec'");
    row.vec = detail::parse_vec(*it, line, "vec");
    out.push_back(std::move(row));
  }
  return out;
}

inline std::vector<EmbeddingRow> load_embeddings(const std::string& path) {
  auto in = open_input(path);
  try {
    return parse_embeddings(in);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

/// Copies embeddings onto records by study_id. Records without a row keep
/// their current value.
inline void attach_embeddings(std::vector<StudyRecord>& records,
                              const std::vector<EmbeddingRow>& rows) {
  std::unordered_map<std::string, const EmbeddingRow*> by_id;
  for (const auto& r : rows) by_id[r.study_id] = &r;
  for (auto& rec : records)
    if (auto it = by_id.find(rec.study_id); it != by_id.end()) rec.embedding = it->second->vec;
}

/// labels.csv: `study_id,l1,...,l14`, optional header row starting with "study_id".
inline std::unordered_map<std::string, LabelVector> parse_label_csv(std::istream& in) {
  std::unordered_map<std::string, LabelVector> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (detail::blank(text)) continue;
    std::vector<std::string> cells;
    std::stringstream ss(text);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line == 1 && !cells.empty() && cells[0] == "study_id") continue;
    if (cells.size() != kNumConditions + 1)
      throw ValidationError("line " + std::to_string(line) + ": expected study_id plus 14 labels");
    LabelVector v{};
    for (std::size_t i = 0; i < kNumConditions; ++i) {
      const auto& c = cells[i + 1];
      if (c != "0" && c != "1")
        throw ValidationError("line " + std::to_string(line) + ": label " + std::to_string(i + 1) +
                              " must be 0 or 1");
      v[i] = c == "1" ? 1 : 0;
    }
    out[cells[0]] = v;
  }
  return out;
}

inline std::unordered_map<std::string, LabelVector> load_label_csv(const std::string& path) {
  auto in = open_input(path);
  try {
    return parse_label_csv(in);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

/// Case-insensitive substring search.
inline bool contains_ci(std::string_view haystack, std::string_view needle) {
  if (needle.empty()) return false;
  return to_lower(haystack).find(to_lower(needle)) != std::string::npos;
}

/// Returns the drop reason for a record, or nullopt if it is kept.
inline std::optional<std::string> drop_reason(const StudyRecord& r, const CorpusFilterConfig& cfg) {
  if (detail::blank(r.report.text)) return "empty";
  if (r.report.tokens.size() < cfg.min_tokens) return "too_short";
  for (const auto& p : cfg.junk_patterns)
    if (contains_ci(r.report.text, p)) return "junk:" + p;
  return std::nullopt;
}

inline FilterResult filter_corpus(const std::vector<StudyRecord>& records,
                                  const CorpusFilterConfig& cfg) {
  for (const auto& p : cfg.junk_patterns)
    if (p.empty()) throw ValidationError("junk pattern must be non-empty");
  FilterResult result;
  for (const auto& r : records) {
    if (auto why = drop_reason(r, cfg))
      result.dropped.push_back({r, *why});
    else
      result.kept.push_back(r);
  }
  return result;
}

inline CorpusFilterConfig filter_config_from_json(const json& j) {
  CorpusFilterConfig cfg;
  if (auto it = j.find("min_tokens"); it != j.end()) {
    if (!it->is_number_integer() || it->get<long long>() < 0)
      throw ValidationError("filter config: 'min_tokens' must be a non-negative integer");
    cfg.min_tokens = it->get<std::size_t>();
  }
  if (auto it = j.find("junk_patterns"); it != j.end()) {
    if (!it->is_array()) throw ValidationError("filter config: 'junk_patterns' must be an array");
    cfg.junk_patterns.clear();
    for (const auto& p : *it) {
      if (!p.is_string() || p.get<std::string>().empty())
        throw ValidationError("filter config: junk patterns must be non-empty strings");
      cfg.junk_patterns.push_back(p.get<std::string>());
    }
  }
  return cfg;
}

inline json filter_config_to_json(const CorpusFilterConfig& cfg) {
  return json{{"min_tokens", cfg.min_tokens}, {"junk_patterns", cfg.junk_patterns}};
}

}  // namespace sei
