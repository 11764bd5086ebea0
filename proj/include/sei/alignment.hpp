#pragma once

// Image/report alignment objectives (two global contrastive directions plus
// a token-level local term) and the token negative log-likelihood used by
// the generation stage. Every loss has an analytic gradient.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sei/error.hpp"

namespace sei {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline constexpr double kDefaultTemperature = 0.07;
inline constexpr double kProbFloor = 1e-12;

struct AlignmentBatch {
  Mat image_feats;                // B x d, one pooled row per study
  Mat text_feats;                 // B x d, factual-entity-sequence features
  std::vector<Mat> image_locals;  // B entries of S_i x d
  std::vector<Mat> text_locals;   // B entries of S_t x d
  double tau = kDefaultTemperature;

  std::size_t batch_size() const { return static_cast<std::size_t>(image_feats.rows()); }
};

struct AlignmentGradients {
  Mat image_feats, text_feats;
  std::vector<Mat> image_locals, text_locals;

  static AlignmentGradients zeros_like(const AlignmentBatch& b) {
    AlignmentGradients g;
    g.image_feats = Mat::Zero(b.image_feats.rows(), b.image_feats.cols());
    g.text_feats = Mat::Zero(b.text_feats.rows(), b.text_feats.cols());
    for (const auto& m : b.image_locals) g.image_locals.push_back(Mat::Zero(m.rows(), m.cols()));
    for (const auto& m : b.text_locals) g.text_locals.push_back(Mat::Zero(m.rows(), m.cols()));
    return g;
  }
};

enum class Direction { ImageToText, TextToImage };

struct LossWithGrad {
  double value = 0.0;
  AlignmentGradients grad;
};

namespace detail {

inline void check_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("alignment: temperature must be finite and positive");
}

inline void check_globals(const AlignmentBatch& b) {
  check_tau(b.tau);
  if (b.image_feats.rows() < 1) throw ValidationError("alignment: batch must hold at least one study");
  if (b.image_feats.rows() != b.text_feats.rows() || b.image_feats.cols() != b.text_feats.cols())
    throw ValidationError("alignment: image and text feature shapes differ");
  if (!b.image_feats.allFinite() || !b.text_feats.allFinite())
    throw ValidationError("alignment: non-finite features");
}

inline void check_locals(const AlignmentBatch& b) {
  check_tau(b.tau);
  const auto B = b.image_locals.size();
  if (B < 1) throw ValidationError("alignment: local features are required");
  if (b.text_locals.size() != B) throw ValidationError("alignment: image and text locals differ in batch size");
  const auto d = b.image_locals[0].cols();
  const auto st = b.text_locals[0].rows();
  for (std::size_t i = 0; i < B; ++i) {
    if (b.image_locals[i].cols() != d || b.text_locals[i].cols() != d)
      throw ValidationError("alignment: local feature widths differ");
    if (b.image_locals[i].rows() < 1 || b.text_locals[i].rows() != st || st < 1)
      throw ValidationError("alignment: every study needs >= 1 image patch and the same number of text tokens");
    if (!b.image_locals[i].allFinite() || !b.text_locals[i].allFinite())
      throw ValidationError("alignment: non-finite local features");
  }
}

// Row-wise L2 normalization; `norms` receives the original norms.
inline Mat normalize_rows(const Mat& x, Vec& norms, const char* what) {
  norms = x.rowwise().norm();
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (norms(i) == 0.0) throw ValidationError(std::string("alignment: zero-norm ") + what + " row " + std::to_string(i));
    out.row(i) = x.row(i) / norms(i);
  }
  return out;
}

// d/dx of x/|x| applied to an upstream du, per row.
inline Mat normalize_rows_backward(const Mat& u, const Vec& norms, const Mat& du) {
  Mat dx(u.rows(), u.cols());
  for (Eigen::Index i = 0; i < u.rows(); ++i)
    dx.row(i) = (du.row(i) - u.row(i) * u.row(i).dot(du.row(i))) / norms(i);
  return dx;
}

inline double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace detail

/// InfoNCE over the cosine similarity matrix S = U V^T / tau. ImageToText
/// normalizes each row of S (image i retrieves its report); TextToImage
/// normalizes each column.
inline LossWithGrad global_alignment_loss_with_grad(const AlignmentBatch& b, Direction dir) {
  detail::check_globals(b);
  Vec ni, nt;
  const Mat u = detail::normalize_rows(b.image_feats, ni, "image feature");
  const Mat v = detail::normalize_rows(b.text_feats, nt, "text feature");
  Mat s = u * v.transpose() / b.tau;
  if (dir == Direction::TextToImage) s.transposeInPlace();
  const auto B = s.rows();
  const double inv_b = 1.0 / static_cast<double>(B);

  LossWithGrad r;
  r.grad = AlignmentGradients::zeros_like(b);
  Mat ds(B, B);
  double total = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    const double lse = detail::log_sum_exp(s.row(i));
    total += lse - s(i, i);
    ds.row(i) = (s.row(i).array() - lse).exp() * inv_b;
    ds(i, i) -= inv_b;
  }
  r.value = total * inv_b;
  if (dir == Direction::TextToImage) ds.transposeInPlace();
  const Mat du = ds * v / b.tau;
  const Mat dv = ds.transpose() * u / b.tau;
  r.grad.image_feats = detail::normalize_rows_backward(u, ni, du);
  r.grad.text_feats = detail::normalize_rows_backward(v, nt, dv);
  return r;
}

inline double global_alignment_loss(const AlignmentBatch& b, Direction dir) {
  return global_alignment_loss_with_grad(b, dir).value;
}

/// Token-level term. For text token t of study i and each candidate study j,
/// c_j = softmax(t . P_j^T / sqrt(d)) P_j pools study j's image patches P_j.
/// The loss is the mean over (i, t) of -log softmax_j(cos(t, c_j) / tau) at j = i.
inline LossWithGrad local_alignment_loss_with_grad(const AlignmentBatch& b) {
  detail::check_locals(b);
  const auto B = static_cast<Eigen::Index>(b.image_locals.size());
  const auto d = b.image_locals[0].cols();
  const auto st = b.text_locals[0].rows();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_n = 1.0 / static_cast<double>(B * st);

  LossWithGrad r;
  r.grad = AlignmentGradients::zeros_like(b);
  double total = 0.0;

  struct Pooled {
    Eigen::RowVectorXd attn;
    Eigen::RowVectorXd ctx;
    double ctx_norm;
  };
  std::vector<Pooled> pooled(static_cast<std::size_t>(B));
  Eigen::RowVectorXd sims(B);

  for (Eigen::Index i = 0; i < B; ++i) {
    for (Eigen::Index t = 0; t < st; ++t) {
      const Eigen::RowVectorXd tok = b.text_locals[i].row(t);
      const double tn = tok.norm();
      if (tn == 0.0)
        throw ValidationError("alignment: zero-norm text token " + std::to_string(t) + " in study " + std::to_string(i));
      for (Eigen::Index j = 0; j < B; ++j) {
        const Mat& P = b.image_locals[j];
        Eigen::RowVectorXd z = (P * tok.transpose()).transpose() * inv_sqrt_d;
        const double zm = z.maxCoeff();
        Eigen::RowVectorXd a = (z.array() - zm).exp();
        a /= a.sum();
        Eigen::RowVectorXd c = a * P;
        const double cn = c.norm();
        if (cn == 0.0) throw ValidationError("alignment: zero-norm pooled image context for study " + std::to_string(j));
        sims(j) = tok.dot(c) / (tn * cn) / b.tau;
        pooled[j] = {std::move(a), std::move(c), cn};
      }
      const double lse = detail::log_sum_exp(sims);
      total += lse - sims(i);

      Eigen::RowVectorXd dtok = Eigen::RowVectorXd::Zero(d);
      for (Eigen::Index j = 0; j < B; ++j) {
        const double dsim = (std::exp(sims(j) - lse) - (j == i ? 1.0 : 0.0)) * inv_n / b.tau;
        const auto& pj = pooled[j];
        const double cosv = sims(j) * b.tau;
        // cos = t.c / (|t||c|)
        dtok += dsim * (pj.ctx / (tn * pj.ctx_norm) - cosv * tok / (tn * tn));
        const Eigen::RowVectorXd dc = dsim * (tok / (tn * pj.ctx_norm) - cosv * pj.ctx / (pj.ctx_norm * pj.ctx_norm));
        const Mat& P = b.image_locals[j];
        Mat& gP = r.grad.image_locals[j];
        // c = a P
        gP += pj.attn.transpose() * dc;
        const Eigen::RowVectorXd da = (P * dc.transpose()).transpose();
        const Eigen::RowVectorXd dz = pj.attn.array() * (da.array() - pj.attn.dot(da));
        // z = t P^T / sqrt(d)
        dtok += dz * P * inv_sqrt_d;
        gP += dz.transpose() * tok * inv_sqrt_d;
      }
      r.grad.text_locals[i].row(t) += dtok;
    }
  }
  r.value = total * inv_n;
  return r;
}

inline double local_alignment_loss(const AlignmentBatch& b) { return local_alignment_loss_with_grad(b).value; }

struct AlignmentTerms {
  double image_to_text = 0.0;
  double text_to_image = 0.0;
  double local = 0.0;
  double total() const { return image_to_text + text_to_image + local; }
};

inline AlignmentTerms alignment_terms(const AlignmentBatch& b) {
  return {global_alignment_loss(b, Direction::ImageToText), global_alignment_loss(b, Direction::TextToImage),
          local_alignment_loss(b)};
}

inline LossWithGrad total_alignment_loss_with_grad(const AlignmentBatch& b) {
  auto r = global_alignment_loss_with_grad(b, Direction::ImageToText);
  const auto t2i = global_alignment_loss_with_grad(b, Direction::TextToImage);
  const auto loc = local_alignment_loss_with_grad(b);
  r.value = r.value + t2i.value + loc.value;
  r.grad.image_feats += t2i.grad.image_feats;
  r.grad.text_feats += t2i.grad.text_feats;
  r.grad.image_locals = loc.grad.image_locals;
  r.grad.text_locals = loc.grad.text_locals;
  return r;
}

inline double total_alignment_loss(const AlignmentBatch& b) { return alignment_terms(b).total(); }

/// Decoder output distributions for one sample: M x V, each row a
/// distribution over the vocabulary, and the M reference token ids.
struct TokenPrediction {
  Mat probs;
  std::vector<std::size_t> reference;
};

inline void validate_prediction(const TokenPrediction& p, double tol = 1e-6) {
  if (static_cast<std::size_t>(p.probs.rows()) != p.reference.size())
    throw ValidationError("nll: prediction has " + std::to_string(p.probs.rows()) + " steps but reference has " +
                          std::to_string(p.reference.size()) + " tokens");
  for (Eigen::Index t = 0; t < p.probs.rows(); ++t) {
    if ((p.probs.row(t).array() < 0.0).any() || !p.probs.row(t).allFinite())
      throw ValidationError("nll: row " + std::to_string(t) + " has invalid probabilities");
    const double s = p.probs.row(t).sum();
    if (std::abs(s - 1.0) > tol)
      throw ValidationError("nll: row " + std::to_string(t) + " sums to " + std::to_string(s) + ", not 1");
    if (p.reference[static_cast<std::size_t>(t)] >= static_cast<std::size_t>(p.probs.cols()))
      throw ValidationError("nll: reference id out of vocabulary at step " + std::to_string(t));
  }
}

/// -(1/B) sum_i sum_t log max(p_t[ref_t], 1e-12), with no validation. The
/// gradient with respect to probs is written to `grads` when non-null.
inline double nll_unchecked(const std::vector<TokenPrediction>& batch, std::vector<Mat>* grads = nullptr) {
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  if (grads) grads->clear();
  double total = 0.0;
  for (const auto& p : batch) {
    if (grads) grads->push_back(Mat::Zero(p.probs.rows(), p.probs.cols()));
    for (std::size_t t = 0; t < p.reference.size(); ++t) {
      const auto row = static_cast<Eigen::Index>(t);
      const auto col = static_cast<Eigen::Index>(p.reference[t]);
      const double q = p.probs(row, col);
      total -= std::log(std::max(q, kProbFloor));
      if (grads && q > kProbFloor) grads->back()(row, col) = -inv_b / q;
    }
  }
  return total * inv_b;
}

inline double nll_loss(const std::vector<TokenPrediction>& batch) {
  if (batch.empty()) throw ValidationError("nll: empty batch");
  for (const auto& p : batch) validate_prediction(p);
  return nll_unchecked(batch);
}

inline std::vector<Mat> nll_loss_grad(const std::vector<TokenPrediction>& batch) {
  if (batch.empty()) throw ValidationError("nll: empty batch");
  for (const auto& p : batch) validate_prediction(p);
  std::vector<Mat> g;
  nll_unchecked(batch, &g);
  return g;
}

}  // namespace sei
