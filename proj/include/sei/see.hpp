#pragma once

// Structural entities extraction: turns a report's entity annotations into
// a factual entity sequence ("aicd in place [SEP] no pleural effusion").

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sei/corpus.hpp"
#include "sei/tokenizer.hpp"

namespace sei {

inline constexpr std::string_view kSepToken = "[SEP]";

struct FactualSubsequence {
  std::optional<std::string> prefix;  // "no" or "maybe"
  std::vector<std::string> entity_texts;

  std::string render() const {
    std::string out = prefix.value_or("");
    for (const auto& t : entity_texts) {
      if (!out.empty()) out += ' ';
      out += t;
    }
    return out;
  }
  bool operator==(const FactualSubsequence&) const = default;
};

struct FactualEntitySequence {
  std::vector<FactualSubsequence> subsequences;
  std::string rendered;
};

struct SentenceGroup {
  std::size_t sentence_index = 0;
  std::vector<EntityAnnotation> entities;
};

/// Removes entities whose span contains a sentence end strictly before its
/// last token, i.e. some e with start_ix <= e < end_ix.
inline std::vector<EntityAnnotation> drop_cross_sentence(const std::vector<EntityAnnotation>& entities,
                                                         const std::vector<std::size_t>& sentence_ends) {
  std::vector<EntityAnnotation> out;
  for (const auto& e : entities) {
    auto it = std::lower_bound(sentence_ends.begin(), sentence_ends.end(), e.start_ix);
    const bool crosses = it != sentence_ends.end() && *it < e.end_ix;
    if (!crosses) out.push_back(e);
  }
  return out;
}

namespace detail {

// Strict "better survivor" order for overlap resolution. Length first, then
// position, then content so the choice does not depend on input order.
inline bool preferred(const EntityAnnotation& a, const EntityAnnotation& b) {
  if (a.length() != b.length()) return a.length() > b.length();
  if (a.start_ix != b.start_ix) return a.start_ix < b.start_ix;
  if (a.tokens != b.tokens) return a.tokens < b.tokens;
  return a.label < b.label;
}

}  // namespace detail

/// Keeps exactly one entity (the longest) per connected component of the
/// span-intersection graph. Output is sorted by start_ix.
inline std::vector<EntityAnnotation> dedupe_overlaps(std::vector<EntityAnnotation> entities) {
  std::stable_sort(entities.begin(), entities.end(),
                   [](const auto& a, const auto& b) { return a.start_ix < b.start_ix; });
  std::vector<EntityAnnotation> out;
  std::size_t i = 0;
  while (i < entities.size()) {
    // Intervals sorted by start: a component is a maximal run whose starts
    // stay within the running max end.
    std::size_t best = i;
    std::size_t reach = entities[i].end_ix;
    std::size_t j = i + 1;
    for (; j < entities.size() && entities[j].start_ix <= reach; ++j) {
      reach = std::max(reach, entities[j].end_ix);
      if (detail::preferred(entities[j], entities[best])) best = j;
    }
    out.push_back(entities[best]);
    i = j;
  }
  return out;
}

/// Sentence index of a span = number of sentence ends before its start.
inline std::size_t sentence_of(const EntityAnnotation& e, const std::vector<std::size_t>& sentence_ends) {
  return static_cast<std::size_t>(
      std::lower_bound(sentence_ends.begin(), sentence_ends.end(), e.start_ix) - sentence_ends.begin());
}

inline std::vector<SentenceGroup> split_subsequences(std::vector<EntityAnnotation> entities,
                                                     const std::vector<std::size_t>& sentence_ends) {
  std::stable_sort(entities.begin(), entities.end(),
                   [](const auto& a, const auto& b) { return a.start_ix < b.start_ix; });
  std::vector<SentenceGroup> groups;
  for (auto& e : entities) {
    const auto s = sentence_of(e, sentence_ends);
    if (groups.empty() || groups.back().sentence_index != s) groups.push_back({s, {}});
    groups.back().entities.push_back(std::move(e));
  }
  return groups;
}

/// Entity surface text in the tokenizer's case convention, with "." tokens removed.
inline std::string entity_text(const EntityAnnotation& e) {
  std::vector<std::string> words;
  for (auto& w : split_whitespace(to_lower(e.tokens)))
    if (w != ".") words.push_back(std::move(w));
  return join(words, " ");
}

inline FactualSubsequence apply_negation_prefix(const std::vector<EntityAnnotation>& group) {
  FactualSubsequence sub;
  const auto has = [&](EntityLabel l) {
    return std::any_of(group.begin(), group.end(), [l](const auto& e) { return e.label == l; });
  };
  if (has(EntityLabel::ObsDA))
    sub.prefix = "no";
  else if (has(EntityLabel::ObsU))
    sub.prefix = "maybe";
  for (const auto& e : group) sub.entity_texts.push_back(entity_text(e));
  return sub;
}

inline std::string render_sequence(const std::vector<FactualSubsequence>& subs) {
  std::string out;
  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (i) {
      out += ' ';
      out += kSepToken;
      out += ' ';
    }
    out += subs[i].render();
  }
  return out;
}

inline FactualEntitySequence see_extract(const std::vector<EntityAnnotation>& entities,
                                         const std::vector<std::size_t>& sentence_ends) {
  auto kept = drop_cross_sentence(entities, sentence_ends);
  // A span made only of periods has nothing to render.
  std::erase_if(kept, [](const auto& e) { return entity_text(e).empty(); });
  kept = dedupe_overlaps(std::move(kept));
  FactualEntitySequence seq;
  for (const auto& g : split_subsequences(std::move(kept), sentence_ends))
    seq.subsequences.push_back(apply_negation_prefix(g.entities));
  seq.rendered = render_sequence(seq.subsequences);
  return seq;
}

inline FactualEntitySequence see_extract(const StudyRecord& record) {
  return see_extract(record.entities, record.report.sentence_ends);
}

}  // namespace sei
