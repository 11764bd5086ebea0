#pragma once

// Evaluation: corpus BLEU, ROUGE-L, CheXbert-style micro F1, entity F1 and
// the reference-truncation protocol.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "sei/corpus.hpp"
#include "sei/error.hpp"
#include "sei/tokenizer.hpp"

namespace sei {

using Tokens = std::vector<std::string>;

/// Reference length cap. nullopt means the complete reference ("cpl").
using MGt = std::optional<std::size_t>;

inline MGt parse_mgt(const std::string& s) {
  if (s == "cpl" || s == "Cpl" || s == "Cpl." || s == "inf") return std::nullopt;
  for (std::size_t v : {60u, 80u, 90u, 100u})
    if (s == std::to_string(v)) return v;
  throw ValidationError("m_gt must be one of 60, 80, 90, 100, cpl (got '" + s + "')");
}

inline std::string mgt_name(const MGt& m) { return m ? std::to_string(*m) : "cpl"; }

struct EvalPair {
  Tokens generated;
  Tokens reference;
};

inline Tokens truncate_reference(const Tokens& tokens, const MGt& m_gt) {
  if (!m_gt || *m_gt >= tokens.size()) return tokens;
  return Tokens(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(*m_gt));
}

namespace detail {

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> out;
  if (t.size() < n) return out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + i, t.begin() + i + n)];
  return out;
}

}  // namespace detail

/// Corpus-level BLEU-n: clipped n-gram precisions pooled over the corpus,
/// uniform 1/n weights, brevity penalty, no smoothing.
inline double corpus_bleu(const std::vector<EvalPair>& pairs, std::size_t max_n) {
  if (pairs.empty()) throw ValidationError("bleu: no pairs");
  if (max_n == 0) throw ValidationError("bleu: n must be positive");
  std::size_t hyp_len = 0, ref_len = 0;
  std::vector<std::size_t> matched(max_n, 0), total(max_n, 0);
  for (const auto& p : pairs) {
    hyp_len += p.generated.size();
    ref_len += p.reference.size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto hyp = detail::ngram_counts(p.generated, n);
      const auto ref = detail::ngram_counts(p.reference, n);
      for (const auto& [g, c] : hyp) {
        total[n - 1] += c;
        if (auto it = ref.find(g); it != ref.end()) matched[n - 1] += std::min(c, it->second);
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (matched[n] == 0) return 0.0;
    log_p += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
  }
  log_p /= static_cast<double>(max_n);
  const double bp = hyp_len < ref_len ? 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len) : 0.0;
  return std::exp(log_p + bp);
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline constexpr double kRougeBeta = 1.2;

inline double rouge_l_pair(const Tokens& generated, const Tokens& reference) {
  if (generated.empty() || reference.empty()) return 0.0;
  const auto lcs = static_cast<double>(lcs_length(generated, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(generated.size());
  const double r = lcs / static_cast<double>(reference.size());
  const double b2 = kRougeBeta * kRougeBeta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

/// Mean per-pair ROUGE-L F-measure (beta = 1.2).
inline double rouge_l(const std::vector<EvalPair>& pairs) {
  if (pairs.empty()) throw ValidationError("rouge-l: no pairs");
  double sum = 0.0;
  for (const auto& p : pairs) sum += rouge_l_pair(p.generated, p.reference);
  return sum / static_cast<double>(pairs.size());
}

/// Positions of Cardiomegaly, Edema, Consolidation, Atelectasis and Pleural
/// Effusion in the CheXbert 14-condition order.
inline const std::vector<std::size_t>& five_subset() {
  static const std::vector<std::size_t> idx = {1, 4, 5, 7, 9};
  return idx;
}

inline const std::vector<std::size_t>& all_fourteen() {
  static const std::vector<std::size_t> idx = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13};
  return idx;
}

/// Micro-averaged F1 = 2TP / (2TP + FP + FN) over the selected label
/// positions; 0 when the denominator is 0.
inline double micro_f1(const std::vector<LabelVector>& pred, const std::vector<LabelVector>& gold,
                       const std::vector<std::size_t>& positions = all_fourteen()) {
  if (pred.size() != gold.size())
    throw ValidationError("micro-f1: " + std::to_string(pred.size()) + " predictions vs " +
                          std::to_string(gold.size()) + " gold vectors");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (auto k : positions) {
      if (k >= kNumConditions) throw ValidationError("micro-f1: label position out of range");
      tp += pred[i][k] && gold[i][k];
      fp += pred[i][k] && !gold[i][k];
      fn += !pred[i][k] && gold[i][k];
    }
  const auto denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

using EntityKey = std::pair<std::string, EntityLabel>;
using EntitySet = std::set<EntityKey>;

inline EntitySet entity_set(const std::vector<EntityAnnotation>& ents) {
  EntitySet s;
  for (const auto& e : ents) s.emplace(join(split_whitespace(to_lower(e.tokens)), " "), e.label);
  return s;
}

/// Exact-match F1 on (lowercased text, label). Both empty scores 1; exactly
/// one empty scores 0.
inline double entity_f1(const EntitySet& gen, const EntitySet& ref) {
  if (gen.empty() && ref.empty()) return 1.0;
  if (gen.empty() || ref.empty()) return 0.0;
  std::size_t common = 0;
  for (const auto& e : gen) common += ref.count(e);
  if (common == 0) return 0.0;
  const double p = static_cast<double>(common) / static_cast<double>(gen.size());
  const double r = static_cast<double>(common) / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

using ScoreReport = std::map<std::string, double>;

struct LabelInputs {
  std::vector<LabelVector> generated;
  std::vector<LabelVector> reference;
};

struct EntityInputs {
  std::vector<EntitySet> generated;
  std::vector<EntitySet> reference;
};

/// Truncates references at m_gt, then computes every metric whose inputs are
/// present. Generated tokens are never modified.
inline ScoreReport score_corpus(const std::vector<EvalPair>& pairs, const std::optional<LabelInputs>& labels,
                                const std::optional<EntityInputs>& entities, const MGt& m_gt,
                                const std::vector<std::size_t>& cx5_positions = five_subset()) {
  if (pairs.empty()) throw ValidationError("score: no pairs");
  std::vector<EvalPair> cut;
  cut.reserve(pairs.size());
  for (const auto& p : pairs) cut.push_back({p.generated, truncate_reference(p.reference, m_gt)});

  ScoreReport r;
  r["BL-2"] = corpus_bleu(cut, 2);
  r["BL-4"] = corpus_bleu(cut, 4);
  r["R_L"] = rouge_l(cut);
  if (labels) {
    if (labels->generated.size() != pairs.size() || labels->reference.size() != pairs.size())
      throw ValidationError("score: label vectors are not aligned with report pairs");
    r["CX14"] = micro_f1(labels->generated, labels->reference, all_fourteen());
    r["CX5"] = micro_f1(labels->generated, labels->reference, cx5_positions);
  }
  if (entities) {
    if (entities->generated.size() != pairs.size() || entities->reference.size() != pairs.size())
      throw ValidationError("score: entity sets are not aligned with report pairs");
    double sum = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) sum += entity_f1(entities->generated[i], entities->reference[i]);
    r["RG-F1"] = sum / static_cast<double>(pairs.size());
  }
  return r;
}

}  // namespace sei
