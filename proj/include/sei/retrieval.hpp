#pragma once

// Exact top-K dot-product retrieval of similar historical cases.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "sei/corpus.hpp"
#include "sei/error.hpp"

namespace sei {

struct Hit {
  std::string study_id;
  double score = 0.0;
  bool operator==(const Hit&) const = default;
};

struct RetrievalResult {
  std::optional<std::string> query_id;
  std::vector<Hit> hits;
};

/// Immutable row-major store of study embeddings.
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;

  EmbeddingIndex(std::size_t dim, std::vector<std::string> ids, std::vector<float> matrix, bool normalized)
      : dim_(dim), ids_(std::move(ids)), matrix_(std::move(matrix)), normalized_(normalized) {
    if (matrix_.size() != ids_.size() * dim_)
      throw ValidationError("index matrix holds " + std::to_string(matrix_.size()) + " values, expected " +
                            std::to_string(ids_.size() * dim_));
    for (std::size_t i = 0; i < ids_.size(); ++i)
      if (!row_of_.emplace(ids_[i], i).second)
        throw ValidationError("duplicate study_id '" + ids_[i] + "' in index");
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  bool normalized() const { return normalized_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::vector<float>& matrix() const { return matrix_; }

  std::span<const float> row(std::size_t i) const { return {matrix_.data() + i * dim_, dim_}; }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = row_of_.find(id);
    if (it == row_of_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<float> matrix_;
  bool normalized_ = false;
  std::unordered_map<std::string, std::size_t> row_of_;
};

namespace detail {

inline void l2_normalize_into(std::span<const float> v, float* out) {
  double ss = 0.0;
  for (float x : v) ss += static_cast<double>(x) * x;
  const double n = std::sqrt(ss);
  if (n == 0.0) throw ValidationError("cannot normalize a zero vector");
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / n);
}

inline std::vector<float> prepare_query(const EmbeddingIndex& index, std::span<const float> query) {
  if (query.size() != index.dim())
    throw ValidationError("query has dimension " + std::to_string(query.size()) + " but index has " +
                          std::to_string(index.dim()));
  std::vector<float> q(query.begin(), query.end());
  if (index.normalized()) l2_normalize_into(query, q.data());
  return q;
}

// Higher score wins; equal scores go to the earlier row.
struct Candidate {
  double score;
  std::size_t row;
};
inline bool better(const Candidate& a, const Candidate& b) {
  return a.score > b.score || (a.score == b.score && a.row < b.row);
}

inline RetrievalResult make_result(const EmbeddingIndex& index, const std::vector<Candidate>& picked,
                                   const std::optional<std::string>& exclude_id) {
  RetrievalResult r;
  r.query_id = exclude_id;
  r.hits.reserve(picked.size());
  for (const auto& c : picked) r.hits.push_back({index.ids()[c.row], c.score});
  return r;
}

}  // namespace detail

inline EmbeddingIndex build_index(const std::vector<EmbeddingRow>& rows, bool normalize = true) {
  if (rows.empty()) return EmbeddingIndex(0, {}, {}, normalize);
  const std::size_t dim = rows.front().vec.size();
  std::vector<std::string> ids;
  std::vector<float> matrix(rows.size() * dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.vec.size() != dim)
      throw ValidationError("study " + r.study_id + ": embedding dimension " + std::to_string(r.vec.size()) +
                            " does not match index dimension " + std::to_string(dim));
    ids.push_back(r.study_id);
    float* dst = matrix.data() + i * dim;
    if (normalize) {
      try {
        detail::l2_normalize_into(r.vec, dst);
      } catch (const ValidationError&) {
        throw ValidationError("study " + r.study_id + ": zero embedding cannot be normalized");
      }
    } else {
      std::copy(r.vec.begin(), r.vec.end(), dst);
    }
  }
  return EmbeddingIndex(dim, std::move(ids), std::move(matrix), normalize);
}

inline EmbeddingIndex build_index(const std::vector<StudyRecord>& records, bool normalize = true) {
  std::vector<EmbeddingRow> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    if (!r.embedding) throw ValidationError("study " + r.study_id + " has no embedding");
    rows.push_back({r.study_id, *r.embedding});
  }
  return build_index(rows, normalize);
}

/// Reference scan: one sequential dot product per row, then a full sort.
inline RetrievalResult top_k_naive(const EmbeddingIndex& index, std::span<const float> query, std::size_t k,
                                   const std::optional<std::string>& exclude_id = std::nullopt) {
  const auto q = detail::prepare_query(index, query);
  std::vector<detail::Candidate> all;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (exclude_id && index.ids()[i] == *exclude_id) continue;
    double s = 0.0;
    const auto row = index.row(i);
    for (std::size_t j = 0; j < index.dim(); ++j) s += static_cast<double>(row[j]) * q[j];
    all.push_back({s, i});
  }
  std::sort(all.begin(), all.end(), detail::better);
  if (all.size() > k) all.resize(k);
  return detail::make_result(index, all, exclude_id);
}

/// Optimized exact search: rows are scored four at a time with independent
/// accumulators, and the best k are kept in a bounded heap.
inline RetrievalResult top_k(const EmbeddingIndex& index, std::span<const float> query, std::size_t k,
                             const std::optional<std::string>& exclude_id = std::nullopt) {
  const auto qf = detail::prepare_query(index, query);
  const std::size_t d = index.dim();
  const std::size_t n = index.size();
  std::vector<double> q(qf.begin(), qf.end());
  std::optional<std::size_t> skip;
  if (exclude_id) skip = index.find(*exclude_id);
  if (k == 0 || n == 0) return detail::make_result(index, {}, exclude_id);

  // heap.front() is the worst retained candidate.
  std::vector<detail::Candidate> heap;
  heap.reserve(k + 1);
  const auto worse_first = [](const detail::Candidate& a, const detail::Candidate& b) {
    return detail::better(a, b);
  };
  const auto offer = [&](double score, std::size_t row) {
    if (skip && *skip == row) return;
    const detail::Candidate c{score, row};
    if (heap.size() < k) {
      heap.push_back(c);
      std::push_heap(heap.begin(), heap.end(), worse_first);
    } else if (detail::better(c, heap.front())) {
      std::pop_heap(heap.begin(), heap.end(), worse_first);
      heap.back() = c;
      std::push_heap(heap.begin(), heap.end(), worse_first);
    }
  };

  const float* base = index.matrix().data();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const float* r0 = base + i * d;
    const float* r1 = r0 + d;
    const float* r2 = r1 + d;
    const float* r3 = r2 + d;
    double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double qj = q[j];
      a0 += r0[j] * qj;
      a1 += r1[j] * qj;
      a2 += r2[j] * qj;
      a3 += r3[j] * qj;
    }
    offer(a0, i);
    offer(a1, i + 1);
    offer(a2, i + 2);
    offer(a3, i + 3);
  }
  for (; i < n; ++i) {
    const float* r = base + i * d;
    double a = 0;
    for (std::size_t j = 0; j < d; ++j) a += r[j] * q[j];
    offer(a, i);
  }
  std::sort(heap.begin(), heap.end(), detail::better);
  return detail::make_result(index, heap, exclude_id);
}

struct ShcAttachment {
  std::string study_id;
  std::vector<Hit> hits;
  std::vector<std::string> factual_sequences;  // parallel to hits
};

/// Retrieves the k most similar *other* studies for each record. Sequences
/// for hit ids are looked up in `sequences`; unknown ids get "".
inline std::vector<ShcAttachment> attach_shc(const std::vector<StudyRecord>& records, const EmbeddingIndex& index,
                                             std::size_t k,
                                             const std::unordered_map<std::string, std::string>& sequences) {
  std::vector<ShcAttachment> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (!r.embedding) throw ValidationError("study " + r.study_id + " has no embedding");
    ShcAttachment a;
    a.study_id = r.study_id;
    a.hits = top_k(index, *r.embedding, k, r.study_id).hits;
    for (const auto& h : a.hits) {
      auto it = sequences.find(h.study_id);
      a.factual_sequences.push_back(it == sequences.end() ? std::string() : it->second);
    }
    out.push_back(std::move(a));
  }
  return out;
}

// Binary index file: "SEIX", u32 version, u32 n, u32 d, u8 normalized, n ids
// as u32 length + UTF-8 bytes, then the n*d row-major f32 matrix. All
// integers and floats little-endian.
inline constexpr std::uint32_t kIndexVersion = 1;

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const std::string& buf, std::size_t& pos) {
  if (pos + 4 > buf.size()) throw ValidationError("index file truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace detail

inline std::string encode_index(const EmbeddingIndex& index) {
  std::string buf = "SEIX";
  detail::put_u32(buf, kIndexVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(index.size()));
  detail::put_u32(buf, static_cast<std::uint32_t>(index.dim()));
  buf.push_back(index.normalized() ? 1 : 0);
  for (const auto& id : index.ids()) {
    detail::put_u32(buf, static_cast<std::uint32_t>(id.size()));
    buf += id;
  }
  for (float f : index.matrix()) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    detail::put_u32(buf, bits);
  }
  return buf;
}

inline EmbeddingIndex decode_index(const std::string& buf) {
  if (buf.size() < 4 || buf.compare(0, 4, "SEIX") != 0) throw ValidationError("not an index file (bad magic)");
  std::size_t pos = 4;
  const auto version = detail::get_u32(buf, pos);
  if (version != kIndexVersion) throw ValidationError("unsupported index version " + std::to_string(version));
  const auto n = detail::get_u32(buf, pos);
  const auto d = detail::get_u32(buf, pos);
  if (pos >= buf.size()) throw ValidationError("index file truncated");
  const unsigned char flag = static_cast<unsigned char>(buf[pos++]);
  if (flag > 1) throw ValidationError("index file has invalid normalized flag");
  std::vector<std::string> ids;
  ids.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto len = detail::get_u32(buf, pos);
    if (pos + len > buf.size()) throw ValidationError("index file truncated");
    ids.push_back(buf.substr(pos, len));
    pos += len;
  }
  const std::size_t count = static_cast<std::size_t>(n) * d;
  if (buf.size() - pos != count * 4) throw ValidationError("index file matrix size mismatch");
  std::vector<float> matrix(count);
  for (auto& f : matrix) {
    const auto bits = detail::get_u32(buf, pos);
    std::memcpy(&f, &bits, sizeof f);
  }
  return EmbeddingIndex(d, std::move(ids), std::move(matrix), flag == 1);
}

inline void save_index(const std::string& path, const EmbeddingIndex& index) {
  auto out = open_output(path, true);
  const auto buf = encode_index(index);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline EmbeddingIndex load_index(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_index(buf);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

}  // namespace sei
