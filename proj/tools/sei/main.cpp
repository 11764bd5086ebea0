// sei: command-line front end for the report-generation toolkit.
//
// Exit codes: 0 success, 2 validation error, 3 IO error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "sei/alignment.hpp"
#include "sei/corpus.hpp"
#include "sei/demo.hpp"
#include "sei/indication.hpp"
#include "sei/metrics.hpp"
#include "sei/pipeline.hpp"
#include "sei/retrieval.hpp"
#include "sei/see.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
};

sei::json load_json_file(const std::string& path) {
  try {
    return sei::json::parse(sei::read_file(path));
  } catch (const sei::json::parse_error& e) {
    throw sei::ValidationError(path + ": malformed JSON (" + e.what() + ")");
  }
}

// Section of the --config file for a subcommand, or {} when absent.
sei::json config_section(const Globals& g, const char* key) {
  if (g.config.empty()) return sei::json::object();
  const auto j = load_json_file(g.config);
  return j.contains(key) ? j.at(key) : sei::json::object();
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structural entities extraction, similar-case retrieval, fusion and evaluation toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON config file (flags override it)");
  app.add_option("--seed", g.seed, "Seed override for seeded commands");
  app.add_option("--jobs", g.jobs, "Worker threads for per-record stages")->check(CLI::PositiveNumber);

  // filter
  auto* filter = app.add_subcommand("filter", "Drop empty or clinically meaningless reports");
  std::string f_corpus, f_out, f_dropped, f_cfg;
  filter->add_option("--corpus", f_corpus)->required();
  filter->add_option("--out", f_out)->required();
  filter->add_option("--dropped", f_dropped, "Write dropped study ids and reasons here");
  filter->add_option("--filter-config", f_cfg, "Filter config JSON (min_tokens, junk_patterns)");

  // see-extract
  auto* see = app.add_subcommand("see-extract", "Factual entity sequences from entity annotations");
  std::string s_corpus, s_out;
  see->add_option("--corpus", s_corpus)->required();
  see->add_option("--out", s_out)->required();

  // normalize
  auto* norm = app.add_subcommand("normalize", "Clean indication text in place");
  std::string n_corpus, n_out;
  norm->add_option("--corpus", n_corpus)->required();
  norm->add_option("--out", n_out)->required();

  // index
  auto* index = app.add_subcommand("index", "Build a binary embedding index");
  std::string i_emb, i_out;
  bool i_raw = false;
  index->add_option("--embeddings", i_emb)->required();
  index->add_option("--out", i_out)->required();
  index->add_flag("--raw", i_raw, "Keep raw vectors (plain dot product instead of cosine)");

  // retrieve
  auto* retrieve = app.add_subcommand("retrieve", "Top-k similar studies for a stored study");
  std::string r_index, r_query;
  std::size_t r_k = 5;
  retrieve->add_option("--index", r_index)->required();
  retrieve->add_option("--query-id", r_query)->required();
  retrieve->add_option("--k", r_k);

  // attach-shc
  auto* attach = app.add_subcommand("attach-shc", "Attach similar historical cases to every study");
  std::string a_corpus, a_index, a_emb, a_out;
  std::size_t a_k = 1;
  attach->add_option("--corpus", a_corpus)->required();
  attach->add_option("--index", a_index)->required();
  attach->add_option("--embeddings", a_emb, "Query embeddings (default: index rows)");
  attach->add_option("--k", a_k);
  attach->add_option("--out", a_out)->required();

  // fuse-demo
  auto* fuse = app.add_subcommand("fuse-demo", "Run the fusion network on random features with a gradient check");
  sei::FuseDemoOptions fo;
  bool no_ind = false, no_shc = false;
  fuse->add_option("--d", fo.d);
  fuse->add_option("--heads", fo.heads);
  fuse->add_option("--seed", fo.seed);
  fuse->add_option("--si", fo.si)->check(CLI::PositiveNumber);
  fuse->add_option("--sh", fo.sh)->check(CLI::PositiveNumber);
  fuse->add_option("--sn", fo.sn)->check(CLI::PositiveNumber);
  fuse->add_flag("--no-indication", no_ind);
  fuse->add_flag("--no-shc", no_shc);

  // align-demo
  auto* align = app.add_subcommand("align-demo", "Alignment losses on a random batch with a gradient check");
  std::size_t al_b = 4, al_d = 8;
  std::uint64_t al_seed = 3;
  align->add_option("--b", al_b)->check(CLI::PositiveNumber);
  align->add_option("--d", al_d)->check(CLI::PositiveNumber);
  align->add_option("--seed", al_seed);

  // score
  auto* score = app.add_subcommand("score", "Score generated reports against references");
  std::string sc_gen, sc_ref, sc_labels, sc_ref_labels, sc_ents, sc_mgt = "cpl", sc_out;
  score->add_option("--gen", sc_gen, "JSONL {study_id, report}")->required();
  score->add_option("--ref", sc_ref, "Reference corpus JSONL")->required();
  score->add_option("--labels", sc_labels, "CSV labels of the generated reports");
  score->add_option("--ref-labels", sc_ref_labels, "CSV reference labels (default: labels14 of --ref)");
  score->add_option("--entities", sc_ents, "JSONL {study_id, entities} for the generated reports");
  score->add_option("--mgt", sc_mgt, "60|80|90|100|cpl");
  score->add_option("--out", sc_out)->required();

  // run
  auto* run = app.add_subcommand("run", "Run the full pipeline");
  std::string run_corpus, run_emb, run_out, run_gen;
  std::optional<std::size_t> run_k;
  run->add_option("--corpus", run_corpus);
  run->add_option("--embeddings", run_emb);
  run->add_option("--out-dir", run_out);
  run->add_option("--generated", run_gen);
  run->add_option("--k", run_k);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*filter) {
      auto cfg = sei::filter_config_from_json(config_section(g, "filter"));
      if (!f_cfg.empty()) cfg = sei::filter_config_from_json(load_json_file(f_cfg));
      const auto result = sei::filter_corpus(sei::load_corpus(f_corpus), cfg);
      sei::write_corpus(f_out, result.kept);
      if (!f_dropped.empty()) {
        std::vector<sei::json> rows;
        for (const auto& d : result.dropped) rows.push_back({{"study_id", d.record.study_id}, {"reason", d.reason}});
        sei::write_file(f_dropped, sei::to_jsonl(rows));
      }
      std::cerr << "kept " << result.kept.size() << ", dropped " << result.dropped.size() << "\n";
    } else if (*see) {
      sei::write_file(s_out, sei::to_jsonl(sei::see_extract_rows(sei::load_corpus(s_corpus), g.jobs)));
    } else if (*norm) {
      const auto section = config_section(g, "normalizer");
      const auto cfg = section.empty() ? sei::NormalizerConfig{} : sei::normalizer_config_from_json(section);
      sei::write_corpus(n_out, sei::normalize_corpus(sei::load_corpus(n_corpus), cfg, g.jobs));
    } else if (*index) {
      const auto idx = sei::build_index(sei::load_embeddings(i_emb), !i_raw);
      sei::save_index(i_out, idx);
      std::cerr << "indexed " << idx.size() << " vectors of dimension " << idx.dim() << "\n";
    } else if (*retrieve) {
      const auto idx = sei::load_index(r_index);
      const auto row = idx.find(r_query);
      if (!row) throw sei::ValidationError("study '" + r_query + "' is not in the index");
      const auto rowv = idx.row(*row);
      const auto res = sei::top_k(idx, std::vector<float>(rowv.begin(), rowv.end()), r_k, r_query);
      std::cout << "rank\tstudy_id\tscore\n";
      for (std::size_t i = 0; i < res.hits.size(); ++i)
        std::cout << i + 1 << '\t' << res.hits[i].study_id << '\t' << format_double(res.hits[i].score) << '\n';
    } else if (*attach) {
      auto records = sei::load_corpus(a_corpus);
      const auto idx = sei::load_index(a_index);
      if (!a_emb.empty()) {
        sei::attach_embeddings(records, sei::load_embeddings(a_emb));
      } else {
        for (auto& r : records)
          if (auto row = idx.find(r.study_id)) {
            const auto v = idx.row(*row);
            r.embedding = std::vector<float>(v.begin(), v.end());
          }
      }
      const auto seqs = sei::sequence_map(records);
      sei::write_file(a_out, sei::to_jsonl(sei::shc_rows(sei::attach_shc_parallel(records, idx, a_k, seqs, g.jobs))));
    } else if (*fuse) {
      if (g.seed) fo.seed = *g.seed;
      fo.indication = !no_ind;
      fo.shc = !no_shc;
      const auto r = sei::run_fuse_demo(fo);
      std::cout << "branch\t" << sei::branch_name(r.branch) << "\n"
                << "shape\t" << r.rows << "x" << r.cols << "\n"
                << "checksum\t" << format_double(r.checksum) << "\n"
                << "checked_params\t" << r.checked << "\n"
                << "max_fd_rel_error\t" << r.max_fd_error << "\n";
    } else if (*align) {
      if (g.seed) al_seed = *g.seed;
      const auto r = sei::run_align_demo(al_b, al_d, al_seed);
      std::cout << "global_image_to_text\t" << format_double(r.terms.image_to_text) << "\n"
                << "global_text_to_image\t" << format_double(r.terms.text_to_image) << "\n"
                << "local\t" << format_double(r.terms.local) << "\n"
                << "total\t" << format_double(r.terms.total()) << "\n"
                << "max_fd_rel_error\t" << r.max_fd_error << "\n";
    } else if (*score) {
      const auto refs = sei::load_corpus(sc_ref);
      std::optional<std::unordered_map<std::string, sei::LabelVector>> gl, rl;
      std::optional<std::unordered_map<std::string, sei::EntitySet>> ge;
      if (!sc_labels.empty()) gl = sei::load_label_csv(sc_labels);
      if (!sc_ref_labels.empty()) rl = sei::load_label_csv(sc_ref_labels);
      if (!sc_ents.empty()) ge = sei::load_entity_sets(sc_ents);
      const auto in = sei::assemble_scoring(refs, sei::load_generated(sc_gen), gl, rl, ge);
      const auto report = sei::score_corpus(in.pairs, in.labels, in.entities, sei::parse_mgt(sc_mgt));
      sei::write_file(sc_out, sei::score_json(report).dump(2) + "\n");
    } else if (*run) {
      sei::PipelineConfig cfg;
      if (!g.config.empty()) cfg = sei::load_pipeline_config(g.config);
      if (!run_corpus.empty()) cfg.corpus = run_corpus;
      if (!run_emb.empty()) cfg.embeddings = run_emb;
      if (!run_out.empty()) cfg.out_dir = run_out;
      if (!run_gen.empty()) cfg.generated = run_gen;
      if (run_k) cfg.k = *run_k;
      if (g.seed) cfg.seed = *g.seed;
      cfg.jobs = g.jobs;
      if (cfg.corpus.empty() || cfg.embeddings.empty())
        throw sei::ValidationError("run needs a corpus and an embeddings file");
      const auto manifest = sei::run_pipeline(cfg);
      std::cerr << "pipeline finished: " << manifest["stages"].size() << " stages, artifacts in " << cfg.out_dir << "\n";
    }
  } catch (const sei::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.io() ? kExitIo : kExitValidation;
  } catch (const sei::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const sei::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return 0;
}
