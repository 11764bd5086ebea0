#pragma once

// Small self-checking runs of the fusion network and alignment losses,
// used by the fuse-demo and align-demo commands.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sei/alignment.hpp"
#include "sei/fusion.hpp"
#include "sei/rng.hpp"

namespace sei {

/// ||analytic - numeric|| / max(||analytic||, ||numeric||), 0 when both vanish.
inline double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  const double scale = std::max(analytic.norm(), numeric.norm());
  return scale < 1e-12 ? 0.0 : (analytic - numeric).norm() / scale;
}

/// Central differences of f over every entry of m.
template <typename M>
Eigen::VectorXd central_difference(M& m, const std::function<double()>& f, double eps = 1e-4) {
  Eigen::VectorXd out(m.size());
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double saved = m.data()[i];
    m.data()[i] = saved + eps;
    const double up = f();
    m.data()[i] = saved - eps;
    const double down = f();
    m.data()[i] = saved;
    out(i) = (up - down) / (2 * eps);
  }
  return out;
}

template <typename M>
Eigen::VectorXd flat(const M& m) {
  return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
}

inline Mat random_matrix(Eigen::Index rows, Eigen::Index cols, SplitMix64& rng, double scale = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

struct FuseDemoOptions {
  std::size_t d = 8, heads = 2;
  std::uint64_t seed = 7;
  std::size_t si = 4, sh = 6, sn = 3;
  bool indication = true, shc = true;
  std::size_t checked_params = 48;
};

struct FuseDemoResult {
  Branch branch = Branch::ImageOnly;
  std::size_t rows = 0, cols = 0;
  double checksum = 0.0;
  double max_fd_error = 0.0;
  std::size_t checked = 0;
};

inline FuseDemoResult run_fuse_demo(const FuseDemoOptions& o) {
  const auto params = init_params(o.d, o.heads, o.seed);
  SplitMix64 rng(o.seed ^ 0xF05Eull);
  const auto d = static_cast<Eigen::Index>(o.d);
  FeatureSet f;
  f.image = random_matrix(static_cast<Eigen::Index>(o.si), d, rng);
  if (o.shc) f.shc = random_matrix(static_cast<Eigen::Index>(o.sh), d, rng);
  if (o.indication) f.indication = random_matrix(static_cast<Eigen::Index>(o.sn), d, rng);

  const auto out = fuse(f, params);
  FuseDemoResult r;
  r.branch = out.branch_taken;
  r.rows = static_cast<std::size_t>(out.fused.rows());
  r.cols = static_cast<std::size_t>(out.fused.cols());
  r.checksum = out.fused.sum();

  const Mat upstream = random_matrix(out.fused.rows(), out.fused.cols(), rng);
  const auto grads = fuse_backward(f, params, upstream);
  const auto objective = [&](const FusionParams& p) { return (fuse(f, p).fused.array() * upstream.array()).sum(); };

  // Central differences on a random sample of entries across all three layers.
  constexpr double eps = 1e-4;
  Eigen::VectorXd analytic(static_cast<Eigen::Index>(o.checked_params)), numeric(analytic.size());
  auto probe = params;
  auto g = grads;
  for (std::size_t n = 0; n < o.checked_params; ++n) {
    const auto which = static_cast<FusionLayer>(rng.below(3));
    auto& pl = probe.layer(which);
    auto& gl = g.layer(which);
    std::vector<double*> pslots;
    std::vector<double> gvals;
    pl.for_each([&](std::string_view name, auto& m) {
      gl.for_each([&](std::string_view gname, auto& gm) {
        if (gname != name) return;
        for (Eigen::Index i = 0; i < m.size(); ++i) {
          pslots.push_back(m.data() + i);
          gvals.push_back(gm.data()[i]);
        }
      });
    });
    const auto pick = rng.below(pslots.size());
    double* slot = pslots[pick];
    const double saved = *slot;
    *slot = saved + eps;
    const double up = objective(probe);
    *slot = saved - eps;
    const double down = objective(probe);
    *slot = saved;
    analytic(static_cast<Eigen::Index>(n)) = gvals[pick];
    numeric(static_cast<Eigen::Index>(n)) = (up - down) / (2 * eps);
    ++r.checked;
  }
  r.max_fd_error = relative_error(analytic, numeric);
  return r;
}

inline AlignmentBatch random_alignment_batch(std::size_t b, std::size_t d, std::size_t s_img, std::size_t s_txt,
                                             SplitMix64& rng, double tau = kDefaultTemperature) {
  AlignmentBatch batch;
  const auto B = static_cast<Eigen::Index>(b);
  const auto D = static_cast<Eigen::Index>(d);
  batch.image_feats = random_matrix(B, D, rng);
  batch.text_feats = random_matrix(B, D, rng);
  for (std::size_t i = 0; i < b; ++i) {
    batch.image_locals.push_back(random_matrix(static_cast<Eigen::Index>(s_img), D, rng));
    batch.text_locals.push_back(random_matrix(static_cast<Eigen::Index>(s_txt), D, rng));
  }
  batch.tau = tau;
  return batch;
}

struct AlignDemoResult {
  AlignmentTerms terms;
  double max_fd_error = 0.0;
};

/// Random batch, the three loss terms, and the worst central-difference
/// error of the total-loss gradient over every input entry.
inline AlignDemoResult run_align_demo(std::size_t b, std::size_t d, std::uint64_t seed) {
  SplitMix64 rng(seed);
  // A softer temperature than the default keeps the demo's losses readable.
  auto batch = random_alignment_batch(b, d, 3, 3, rng, 0.5);
  AlignDemoResult r;
  r.terms = alignment_terms(batch);
  const auto g = total_alignment_loss_with_grad(batch).grad;
  const auto f = [&] { return total_alignment_loss(batch); };
  auto check = [&](Mat& m, const Mat& gm) {
    r.max_fd_error = std::max(r.max_fd_error, relative_error(flat(gm), central_difference(m, f)));
  };
  check(batch.image_feats, g.image_feats);
  check(batch.text_feats, g.text_feats);
  for (std::size_t i = 0; i < b; ++i) {
    check(batch.image_locals[i], g.image_locals[i]);
    check(batch.text_locals[i], g.text_locals[i]);
  }
  return r;
}

}  // namespace sei
