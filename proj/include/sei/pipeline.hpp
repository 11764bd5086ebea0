#pragma once

// Stage functions behind the `sei` subcommands and the end-to-end `run`
// pipeline with its hashed manifest.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "sei/alignment.hpp"
#include "sei/corpus.hpp"
#include "sei/fusion.hpp"
#include "sei/indication.hpp"
#include "sei/metrics.hpp"
#include "sei/retrieval.hpp"
#include "sei/rng.hpp"
#include "sei/see.hpp"

namespace sei {

inline constexpr const char* kToolVersion = "1.0.0";

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Callers write into
/// pre-sized slots so output order never depends on scheduling.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(jobs);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < jobs; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += jobs) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw IoError("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  auto out = open_output(path, true);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::string to_jsonl(const std::vector<json>& rows) {
  std::string s;
  for (const auto& r : rows) {
    s += r.dump();
    s += '\n';
  }
  return s;
}

// ---- individual stages -------------------------------------------------

inline std::vector<json> see_extract_rows(const std::vector<StudyRecord>& records, std::size_t jobs = 1) {
  std::vector<json> rows(records.size());
  parallel_for(records.size(), jobs, [&](std::size_t i) {
    rows[i] = json{{"study_id", records[i].study_id}, {"factual_sequence", see_extract(records[i]).rendered}};
  });
  return rows;
}

inline std::vector<StudyRecord> normalize_corpus(std::vector<StudyRecord> records, const NormalizerConfig& cfg,
                                                 std::size_t jobs = 1) {
  parallel_for(records.size(), jobs,
               [&](std::size_t i) { records[i].indication = normalize_indication(records[i].indication, cfg); });
  return records;
}

inline std::unordered_map<std::string, std::string> sequence_map(const std::vector<StudyRecord>& records) {
  std::unordered_map<std::string, std::string> m;
  for (const auto& r : records) m[r.study_id] = see_extract(r).rendered;
  return m;
}

inline std::vector<json> shc_rows(const std::vector<ShcAttachment>& shc) {
  std::vector<json> rows;
  for (const auto& a : shc) {
    json hits = json::array();
    for (std::size_t i = 0; i < a.hits.size(); ++i)
      hits.push_back({{"study_id", a.hits[i].study_id},
                      {"score", a.hits[i].score},
                      {"factual_sequence", a.factual_sequences[i]}});
    rows.push_back({{"study_id", a.study_id}, {"shc", std::move(hits)}});
  }
  return rows;
}

inline std::vector<ShcAttachment> attach_shc_parallel(const std::vector<StudyRecord>& records,
                                                      const EmbeddingIndex& index, std::size_t k,
                                                      const std::unordered_map<std::string, std::string>& seqs,
                                                      std::size_t jobs) {
  std::vector<ShcAttachment> out(records.size());
  parallel_for(records.size(), jobs, [&](std::size_t i) { out[i] = attach_shc({records[i]}, index, k, seqs).front(); });
  return out;
}

/// Deterministic hashed token features standing in for the text encoder:
/// one row per token, seeded by the token string.
inline Mat hashed_features(const std::vector<std::string>& tokens, std::size_t d, std::uint64_t seed) {
  Mat m(static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(d));
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    SplitMix64 rng(fnv1a(tokens[i], seed));
    for (std::size_t j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = scale * rng.normal();
  }
  return m;
}

inline constexpr std::size_t kImagePatches = 4;
inline constexpr std::size_t kMaxShcRows = 64;

/// Builds the fusion inputs for one study: hashed image patches keyed by
/// study_id, SHC rows from the retrieved factual sequences, indication rows
/// from the normalized indication. SHC/indication are absent when empty.
inline FeatureSet study_features(const StudyRecord& r, const ShcAttachment& shc, std::size_t d, std::uint64_t seed) {
  FeatureSet f;
  std::vector<std::string> patches;
  for (std::size_t p = 0; p < kImagePatches; ++p) patches.push_back(r.study_id + "#patch" + std::to_string(p));
  f.image = hashed_features(patches, d, seed);
  std::vector<std::string> shc_tokens;
  for (std::size_t i = 0; i < shc.hits.size(); ++i) {
    auto toks = split_whitespace(shc.factual_sequences[i]);
    if (toks.empty()) toks.push_back(shc.hits[i].study_id);
    for (auto& t : toks)
      if (shc_tokens.size() < kMaxShcRows) shc_tokens.push_back(std::move(t));
  }
  if (!shc_tokens.empty()) f.shc = hashed_features(shc_tokens, d, seed);
  if (r.indication) {
    const auto toks = split_whitespace(*r.indication);
    if (!toks.empty()) f.indication = hashed_features(toks, d, seed);
  }
  return f;
}

inline std::vector<json> fusion_rows(const std::vector<StudyRecord>& records, const std::vector<ShcAttachment>& shc,
                                     const FusionParams& params, std::size_t jobs) {
  std::vector<json> rows(records.size());
  parallel_for(records.size(), jobs, [&](std::size_t i) {
    const auto out = fuse(study_features(records[i], shc[i], params.d, params.seed), params);
    rows[i] = json{{"study_id", records[i].study_id},
                   {"branch", std::string(branch_name(out.branch_taken))},
                   {"rows", out.fused.rows()},
                   {"cols", out.fused.cols()},
                   {"checksum", out.fused.sum()}};
  });
  return rows;
}

/// gen.jsonl: {"study_id": str, "report": str}.
inline std::unordered_map<std::string, std::string> load_generated(const std::string& path) {
  auto in = open_input(path);
  std::unordered_map<std::string, std::string> out;
  std::string text;
  std::size_t line = 0;
  try {
    while (std::getline(in, text)) {
      ++line;
      if (detail::blank(text)) continue;
      const auto j = detail::parse_line(text, line);
      out[detail::field<std::string>(j, "study_id", line)] = detail::field<std::string>(j, "report", line);
    }
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return out;
}

/// ents.jsonl: {"study_id": str, "entities": [entity...]}.
inline std::unordered_map<std::string, EntitySet> load_entity_sets(const std::string& path) {
  auto in = open_input(path);
  std::unordered_map<std::string, EntitySet> out;
  std::string text;
  std::size_t line = 0;
  try {
    while (std::getline(in, text)) {
      ++line;
      if (detail::blank(text)) continue;
      const auto j = detail::parse_line(text, line);
      std::vector<EntityAnnotation> ents;
      for (const auto& e : detail::field<json>(j, "entities", line)) ents.push_back(parse_entity(e, line));
      out[detail::field<std::string>(j, "study_id", line)] = entity_set(ents);
    }
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return out;
}

/// Everything needed to score generated reports against reference studies.
struct ScoringInputs {
  std::vector<EvalPair> pairs;
  std::optional<LabelInputs> labels;
  std::optional<EntityInputs> entities;
};

inline ScoringInputs assemble_scoring(const std::vector<StudyRecord>& refs,
                                      const std::unordered_map<std::string, std::string>& generated,
                                      const std::optional<std::unordered_map<std::string, LabelVector>>& gen_labels,
                                      const std::optional<std::unordered_map<std::string, LabelVector>>& ref_labels,
                                      const std::optional<std::unordered_map<std::string, EntitySet>>& gen_entities) {
  ScoringInputs in;
  if (gen_labels) in.labels.emplace();
  if (gen_entities) in.entities.emplace();
  for (const auto& r : refs) {
    auto g = generated.find(r.study_id);
    if (g == generated.end()) throw ValidationError("no generated report for study '" + r.study_id + "'");
    in.pairs.push_back({tokenize(g->second), r.report.tokens});
    if (in.labels) {
      auto gl = gen_labels->find(r.study_id);
      if (gl == gen_labels->end()) throw ValidationError("no generated labels for study '" + r.study_id + "'");
      std::optional<LabelVector> rl = r.labels14;
      if (ref_labels) {
        auto it = ref_labels->find(r.study_id);
        rl = it == ref_labels->end() ? std::nullopt : std::optional<LabelVector>(it->second);
      }
      if (!rl) throw ValidationError("no reference labels for study '" + r.study_id + "'");
      in.labels->generated.push_back(gl->second);
      in.labels->reference.push_back(*rl);
    }
    if (in.entities) {
      auto ge = gen_entities->find(r.study_id);
      if (ge == gen_entities->end()) throw ValidationError("no generated entities for study '" + r.study_id + "'");
      in.entities->generated.push_back(ge->second);
      in.entities->reference.push_back(entity_set(r.entities));
    }
  }
  return in;
}

inline json score_json(const ScoreReport& r) {
  json j = json::object();
  for (const auto& [k, v] : r) j[k] = v;
  return j;
}

// ---- end-to-end pipeline ----------------------------------------------

struct PipelineConfig {
  std::string corpus;
  std::string embeddings;
  std::string out_dir = "sei_out";
  std::optional<std::string> generated;   // gen.jsonl; nearest-neighbour baseline when absent
  std::optional<std::string> gen_labels;  // labels.csv for the generated reports
  std::optional<std::string> gen_entities;
  std::size_t k = 1;
  std::vector<MGt> m_gt = {60, 80, 90, 100, std::nullopt};
  std::vector<std::size_t> cx5_positions = five_subset();
  NormalizerConfig normalizer;
  CorpusFilterConfig filter;
  bool normalize_embeddings = true;
  std::size_t fusion_d = 8;
  std::size_t fusion_heads = 2;
  std::uint64_t seed = 7;
  double tau = kDefaultTemperature;
  std::size_t jobs = 1;
};

inline void update_config(PipelineConfig& c, const json& j) {
  try {
    if (j.contains("corpus")) c.corpus = j.at("corpus").get<std::string>();
    if (j.contains("embeddings")) c.embeddings = j.at("embeddings").get<std::string>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    auto opt_path = [&](const char* key, std::optional<std::string>& dst) {
      if (!j.contains(key)) return;
      dst = j.at(key).is_null() ? std::nullopt : std::optional<std::string>(j.at(key).get<std::string>());
    };
    opt_path("generated", c.generated);
    opt_path("gen_labels", c.gen_labels);
    opt_path("gen_entities", c.gen_entities);
    if (j.contains("k")) {
      const auto k = j.at("k").get<long long>();
      if (k < 0) throw ValidationError("config: k must be >= 0");
      c.k = static_cast<std::size_t>(k);
    }
    if (j.contains("m_gt")) {
      c.m_gt.clear();
      for (const auto& m : j.at("m_gt")) c.m_gt.push_back(parse_mgt(m.is_string() ? m.get<std::string>() : m.dump()));
    }
    if (j.contains("cx5_positions")) {
      c.cx5_positions = j.at("cx5_positions").get<std::vector<std::size_t>>();
      for (auto k : c.cx5_positions)
        if (k >= kNumConditions) throw ValidationError("config: cx5_positions entries must be < 14");
    }
    if (j.contains("normalizer")) c.normalizer = normalizer_config_from_json(j.at("normalizer"));
    if (j.contains("filter")) c.filter = filter_config_from_json(j.at("filter"));
    if (j.contains("normalize_embeddings")) c.normalize_embeddings = j.at("normalize_embeddings").get<bool>();
    if (j.contains("fusion")) {
      const auto& f = j.at("fusion");
      if (f.contains("d")) c.fusion_d = f.at("d").get<std::size_t>();
      if (f.contains("heads")) c.fusion_heads = f.at("heads").get<std::size_t>();
      if (f.contains("seed")) c.seed = f.at("seed").get<std::uint64_t>();
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("tau")) c.tau = j.at("tau").get<double>();
    if (j.contains("jobs")) c.jobs = j.at("jobs").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  if (!(c.tau > 0.0)) throw ValidationError("config: tau must be positive");
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  PipelineConfig c;
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": malformed JSON (" + e.what() + ")");
  }
  update_config(c, j);
  return c;
}

/// Config echo for the manifest. Excludes `jobs`, which cannot change output.
inline json config_to_json(const PipelineConfig& c) {
  json mg = json::array();
  for (const auto& m : c.m_gt) mg.push_back(mgt_name(m));
  auto opt = [](const std::optional<std::string>& s) { return s ? json(*s) : json(nullptr); };
  return json{{"corpus", c.corpus},
              {"embeddings", c.embeddings},
              {"out_dir", c.out_dir},
              {"generated", opt(c.generated)},
              {"gen_labels", opt(c.gen_labels)},
              {"gen_entities", opt(c.gen_entities)},
              {"k", c.k},
              {"m_gt", mg},
              {"cx5_positions", c.cx5_positions},
              {"normalizer", normalizer_config_to_json(c.normalizer)},
              {"filter", filter_config_to_json(c.filter)},
              {"normalize_embeddings", c.normalize_embeddings},
              {"fusion", {{"d", c.fusion_d}, {"heads", c.fusion_heads}, {"seed", c.seed}}},
              {"tau", c.tau}};
}

/// Error raised by run_pipeline, carrying the failed stage and the category
/// of the underlying error.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& msg, bool io)
      : std::runtime_error("stage '" + stage + "': " + msg), stage_(std::move(stage)), io_(io) {}
  const std::string& stage() const { return stage_; }
  bool io() const { return io_; }

 private:
  std::string stage_;
  bool io_;
};

inline const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> s = {"filter", "see-extract", "normalize", "index",
                                             "attach-shc", "fuse-demo", "score"};
  return s;
}

/// Runs filter -> see-extract -> normalize -> index -> attach-shc ->
/// fuse-demo -> score, writing each artifact into out_dir plus
/// manifest.json. Returns the manifest.
inline json run_pipeline(const PipelineConfig& cfg) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw StageError("setup", "cannot create output directory '" + cfg.out_dir + "'", true);

  json manifest;
  manifest["tool"] = "sei";
  manifest["version"] = kToolVersion;
  manifest["config"] = config_to_json(cfg);
  manifest["inputs"] = json::array();
  manifest["stages"] = json::array();
  manifest["status"] = "ok";

  const auto artifact = [&](const std::string& name) { return (fs::path(cfg.out_dir) / name).string(); };
  const auto write_manifest = [&] { write_file(artifact("manifest.json"), manifest.dump(2) + "\n"); };

  std::vector<StudyRecord> kept, normalized;
  std::vector<EmbeddingRow> embeddings;
  std::unordered_map<std::string, std::string> sequences;
  EmbeddingIndex index;
  std::vector<ShcAttachment> shc;

  const auto stage = [&](const std::string& name, const std::function<std::vector<std::pair<std::string, std::string>>()>& body) {
    json entry{{"name", name}};
    try {
      const auto outputs = body();
      json outs = json::array();
      for (const auto& [file, bytes] : outputs) {
        write_file(artifact(file), bytes);
        outs.push_back({{"file", file}, {"sha256", sha256_hex(bytes)}, {"bytes", bytes.size()}});
      }
      entry["status"] = "ok";
      entry["outputs"] = std::move(outs);
      manifest["stages"].push_back(std::move(entry));
    } catch (const std::exception& e) {
      const bool io = dynamic_cast<const IoError*>(&e) != nullptr;
      entry["status"] = "failed";
      entry["error"] = e.what();
      manifest["stages"].push_back(std::move(entry));
      manifest["status"] = "failed";
      manifest["failed_stage"] = name;
      manifest["partial"] = true;
      try {
        write_manifest();
      } catch (...) {
      }
      throw StageError(name, e.what(), io);
    }
  };

  stage("filter", [&] {
    const auto bytes = read_file(cfg.corpus);
    manifest["inputs"].push_back({{"path", cfg.corpus}, {"sha256", sha256_hex(bytes)}});
    std::istringstream in(bytes);
    std::vector<StudyRecord> records;
    try {
      records = parse_corpus(in);
    } catch (const ValidationError& e) {
      throw ValidationError(cfg.corpus + ": " + e.what());
    }
    auto result = filter_corpus(records, cfg.filter);
    kept = std::move(result.kept);
    std::vector<json> dropped;
    for (const auto& d : result.dropped) dropped.push_back({{"study_id", d.record.study_id}, {"reason", d.reason}});
    std::vector<json> kept_rows;
    for (const auto& r : kept) kept_rows.push_back(record_to_json(r));
    return std::vector<std::pair<std::string, std::string>>{{"kept.jsonl", to_jsonl(kept_rows)},
                                                            {"dropped.jsonl", to_jsonl(dropped)}};
  });

  stage("see-extract", [&] {
    const auto rows = see_extract_rows(kept, cfg.jobs);
    for (const auto& r : rows) sequences[r["study_id"].get<std::string>()] = r["factual_sequence"].get<std::string>();
    return std::vector<std::pair<std::string, std::string>>{{"sequences.jsonl", to_jsonl(rows)}};
  });

  stage("normalize", [&] {
    normalized = normalize_corpus(kept, cfg.normalizer, cfg.jobs);
    std::vector<json> rows;
    for (const auto& r : normalized) rows.push_back(record_to_json(r));
    return std::vector<std::pair<std::string, std::string>>{{"normalized.jsonl", to_jsonl(rows)}};
  });

  stage("index", [&] {
    const auto bytes = read_file(cfg.embeddings);
    manifest["inputs"].push_back({{"path", cfg.embeddings}, {"sha256", sha256_hex(bytes)}});
    std::istringstream in(bytes);
    try {
      embeddings = parse_embeddings(in);
    } catch (const ValidationError& e) {
      throw ValidationError(cfg.embeddings + ": " + e.what());
    }
    attach_embeddings(normalized, embeddings);
    index = build_index(normalized, cfg.normalize_embeddings);
    return std::vector<std::pair<std::string, std::string>>{{"index.bin", encode_index(index)}};
  });

  stage("attach-shc", [&] {
    shc = attach_shc_parallel(normalized, index, cfg.k, sequences, cfg.jobs);
    return std::vector<std::pair<std::string, std::string>>{{"shc.jsonl", to_jsonl(shc_rows(shc))}};
  });

  stage("fuse-demo", [&] {
    const auto params = init_params(cfg.fusion_d, cfg.fusion_heads, cfg.seed);
    return std::vector<std::pair<std::string, std::string>>{
        {"fusion.jsonl", to_jsonl(fusion_rows(normalized, shc, params, cfg.jobs))}};
  });

  stage("score", [&] {
    std::unordered_map<std::string, std::string> generated;
    std::optional<std::unordered_map<std::string, LabelVector>> gen_labels;
    std::optional<std::unordered_map<std::string, EntitySet>> gen_entities;
    std::string source;
    if (cfg.generated) {
      source = "file";
      manifest["inputs"].push_back({{"path", *cfg.generated}, {"sha256", sha256_hex(read_file(*cfg.generated))}});
      generated = load_generated(*cfg.generated);
      if (cfg.gen_labels) gen_labels = load_label_csv(*cfg.gen_labels);
      if (cfg.gen_entities) gen_entities = load_entity_sets(*cfg.gen_entities);
    } else {
      // Retrieval baseline: each study's "generated" report is the findings
      // of its nearest other study, with that study's labels and entities.
      source = "nearest_neighbour";
      std::unordered_map<std::string, const StudyRecord*> by_id;
      for (const auto& r : normalized) by_id[r.study_id] = &r;
      const bool all_labelled =
          std::all_of(normalized.begin(), normalized.end(), [](const auto& r) { return r.labels14.has_value(); });
      if (all_labelled) gen_labels.emplace();
      gen_entities.emplace();
      for (const auto& r : normalized) {
        const auto nn = top_k(index, *r.embedding, 1, r.study_id);
        const StudyRecord* src = nn.hits.empty() ? nullptr : by_id.at(nn.hits.front().study_id);
        generated[r.study_id] = src ? src->report.text : "";
        if (gen_labels) (*gen_labels)[r.study_id] = src ? *src->labels14 : LabelVector{};
        (*gen_entities)[r.study_id] = src ? entity_set(src->entities) : EntitySet{};
      }
    }
    const auto inputs = assemble_scoring(normalized, generated, gen_labels, std::nullopt, gen_entities);
    json scores = json::object();
    scores["generated_source"] = source;
    for (const auto& m : cfg.m_gt) scores[mgt_name(m)] = score_json(score_corpus(inputs.pairs, inputs.labels, inputs.entities, m, cfg.cx5_positions));
    return std::vector<std::pair<std::string, std::string>>{{"scores.json", scores.dump(2) + "\n"}};
  });

  write_manifest();
  return manifest;
}

}  // namespace sei
