#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "sei/alignment.hpp"
#include "sei/demo.hpp"

using sei::AlignmentBatch;
using sei::Direction;
using sei::Mat;

namespace {

double fd_check(Mat& m, const Mat& analytic, const std::function<double()>& f) {
  constexpr double eps = 1e-4;
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double saved = m.data()[i];
    m.data()[i] = saved + eps;
    const double up = f();
    m.data()[i] = saved - eps;
    const double down = f();
    m.data()[i] = saved;
    const double a = analytic.data()[i], n = (up - down) / (2 * eps);
    diff += (a - n) * (a - n);
    na += a * a;
    nn += n * n;
  }
  const double scale = std::sqrt(std::max(na, nn));
  return scale < 1e-12 ? 0.0 : std::sqrt(diff) / scale;
}

// Loop-only local loss.
double naive_local(const AlignmentBatch& b) {
  const std::size_t B = b.image_locals.size();
  const auto d = static_cast<std::size_t>(b.image_locals[0].cols());
  const auto st = static_cast<std::size_t>(b.text_locals[0].rows());
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t t = 0; t < st; ++t) {
      std::vector<double> tok(d);
      for (std::size_t c = 0; c < d; ++c) tok[c] = b.text_locals[i](t, c);
      std::vector<double> logits(B);
      for (std::size_t j = 0; j < B; ++j) {
        const Mat& P = b.image_locals[j];
        std::vector<double> w(static_cast<std::size_t>(P.rows()));
        for (std::size_t r = 0; r < w.size(); ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < d; ++c) s += tok[c] * P(r, c);
          w[r] = std::exp(s / std::sqrt(static_cast<double>(d)));
        }
        const double z = std::accumulate(w.begin(), w.end(), 0.0);
        std::vector<double> ctx(d, 0.0);
        for (std::size_t r = 0; r < w.size(); ++r)
          for (std::size_t c = 0; c < d; ++c) ctx[c] += w[r] / z * P(r, c);
        double dot = 0.0, nt = 0.0, nc = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          dot += tok[c] * ctx[c];
          nt += tok[c] * tok[c];
          nc += ctx[c] * ctx[c];
        }
        logits[j] = dot / std::sqrt(nt * nc) / b.tau;
      }
      double z = 0.0;
      for (double l : logits) z += std::exp(l);
      total += std::log(z) - logits[i];
    }
  return total / static_cast<double>(B * st);
}

AlignmentBatch random_batch(std::uint64_t seed, std::size_t b, std::size_t d, double tau) {
  sei::SplitMix64 rng(seed);
  return sei::random_alignment_batch(b, d, 3, 4, rng, tau);
}

AlignmentBatch permuted(const AlignmentBatch& b, const std::vector<Eigen::Index>& perm) {
  AlignmentBatch out = b;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out.image_feats.row(static_cast<Eigen::Index>(i)) = b.image_feats.row(perm[i]);
    out.text_feats.row(static_cast<Eigen::Index>(i)) = b.text_feats.row(perm[i]);
    out.image_locals[i] = b.image_locals[static_cast<std::size_t>(perm[i])];
    out.text_locals[i] = b.text_locals[static_cast<std::size_t>(perm[i])];
  }
  return out;
}

}  // namespace

TEST(GlobalAlignment, SingleStudyIsZero) {
  const auto b = random_batch(1, 1, 4, 0.07);
  EXPECT_NEAR(sei::global_alignment_loss(b, Direction::ImageToText), 0.0, 1e-12);
  EXPECT_NEAR(sei::global_alignment_loss(b, Direction::TextToImage), 0.0, 1e-12);
}

TEST(GlobalAlignment, OrthonormalPairAtUnitTemperature) {
  AlignmentBatch b;
  b.image_feats = Mat::Identity(2, 2);
  b.text_feats = Mat::Identity(2, 2);
  b.tau = 1.0;
  const double want = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(sei::global_alignment_loss(b, Direction::ImageToText), want, 1e-6);
  EXPECT_NEAR(sei::global_alignment_loss(b, Direction::TextToImage), want, 1e-6);
  EXPECT_NEAR(want, 0.31326, 1e-5);
}

TEST(GlobalAlignment, JointPermutationInvariance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto b = random_batch(seed, 4, 6, 0.07);
    const auto p = permuted(b, {2, 0, 3, 1});
    for (auto dir : {Direction::ImageToText, Direction::TextToImage})
      EXPECT_NEAR(sei::global_alignment_loss(b, dir), sei::global_alignment_loss(p, dir), 1e-10);
    EXPECT_NEAR(sei::local_alignment_loss(b), sei::local_alignment_loss(p), 1e-10);
  }
}

TEST(GlobalAlignment, ScaleInvariance) {
  const auto b = random_batch(3, 4, 5, 0.07);
  const double base = sei::global_alignment_loss(b, Direction::ImageToText);
  for (double c : {2.0, 0.5}) {
    auto s = b;
    s.image_feats *= c;
    s.text_feats *= c;
    EXPECT_EQ(sei::global_alignment_loss(s, Direction::ImageToText), base);
  }
  auto s = b;
  s.image_feats *= 3.7;
  EXPECT_NEAR(sei::global_alignment_loss(s, Direction::ImageToText), base, 1e-12);
}

TEST(GlobalAlignment, RejectsBadInputs) {
  auto b = random_batch(4, 3, 4, 0.07);
  b.image_feats.row(1).setZero();
  EXPECT_THROW(sei::global_alignment_loss(b, Direction::ImageToText), sei::ValidationError);
  b = random_batch(4, 3, 4, 0.0);
  EXPECT_THROW(sei::global_alignment_loss(b, Direction::ImageToText), sei::ValidationError);
  b = random_batch(4, 3, 4, 0.07);
  b.text_feats = Mat::Ones(2, 4);
  EXPECT_THROW(sei::global_alignment_loss(b, Direction::TextToImage), sei::ValidationError);
}

TEST(LocalAlignment, IdenticalLocalsGiveLogBatch) {
  auto b = random_batch(5, 2, 4, 0.07);
  b.image_locals[1] = b.image_locals[0];
  b.text_locals[1] = b.text_locals[0];
  EXPECT_NEAR(sei::local_alignment_loss(b), std::log(2.0), 1e-12);
}

TEST(LocalAlignment, MatchesNaiveLoops) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const auto b = random_batch(100 + seed, 1 + seed % 4, 2 + seed % 6, seed % 2 ? 0.07 : 0.5);
    EXPECT_NEAR(sei::local_alignment_loss(b), naive_local(b), 1e-10);
  }
}

TEST(TotalAlignment, IsSumOfTerms) {
  const auto b = random_batch(6, 4, 6, 0.07);
  const auto terms = sei::alignment_terms(b);
  EXPECT_NEAR(sei::total_alignment_loss(b), terms.image_to_text + terms.text_to_image + terms.local, 1e-12);
  EXPECT_NEAR(sei::total_alignment_loss_with_grad(b).value, terms.total(), 1e-12);
}

TEST(AlignmentGradients, MatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const double tau = seed % 3 == 0 ? 0.07 : (seed % 3 == 1 ? 0.5 : 1.0);
    auto b = random_batch(200 + seed, 1 + seed % 4, 2 + seed % 7, tau);
    for (auto dir : {Direction::ImageToText, Direction::TextToImage}) {
      const auto g = sei::global_alignment_loss_with_grad(b, dir).grad;
      auto f = [&] { return sei::global_alignment_loss(b, dir); };
      EXPECT_LT(fd_check(b.image_feats, g.image_feats, f), 1e-4) << "seed " << seed;
      EXPECT_LT(fd_check(b.text_feats, g.text_feats, f), 1e-4) << "seed " << seed;
    }
    const auto gl = sei::local_alignment_loss_with_grad(b).grad;
    auto fl = [&] { return sei::local_alignment_loss(b); };
    for (std::size_t i = 0; i < b.image_locals.size(); ++i) {
      EXPECT_LT(fd_check(b.image_locals[i], gl.image_locals[i], fl), 1e-4) << "seed " << seed;
      EXPECT_LT(fd_check(b.text_locals[i], gl.text_locals[i], fl), 1e-4) << "seed " << seed;
    }
    const auto gt = sei::total_alignment_loss_with_grad(b).grad;
    auto ft = [&] { return sei::total_alignment_loss(b); };
    EXPECT_LT(fd_check(b.image_feats, gt.image_feats, ft), 1e-4);
    EXPECT_LT(fd_check(b.text_locals[0], gt.text_locals[0], ft), 1e-4);
  }
}

TEST(AlignDemo, ReportsSmallGradientError) {
  const auto r = sei::run_align_demo(4, 8, 9);
  EXPECT_LT(r.max_fd_error, 1e-4);
  EXPECT_GT(r.terms.total(), 0.0);
}

TEST(Nll, UniformDistribution) {
  sei::TokenPrediction p{Mat::Constant(3, 4, 0.25), {0, 3, 1}};
  EXPECT_NEAR(sei::nll_loss({p}), 3 * std::log(4.0), 1e-9);
}

TEST(Nll, CertainPredictionIsZero) {
  Mat probs = Mat::Zero(2, 3);
  probs(0, 2) = 1.0;
  probs(1, 0) = 1.0;
  EXPECT_EQ(sei::nll_loss({{probs, {2, 0}}}), 0.0);
}

TEST(Nll, DuplicatedBatchIsUnchanged) {
  Mat probs(2, 3);
  probs << 0.2, 0.3, 0.5, 0.6, 0.1, 0.3;
  const sei::TokenPrediction p{probs, {1, 0}};
  EXPECT_NEAR(sei::nll_loss({p}), sei::nll_loss({p, p}), 1e-12);
}

TEST(Nll, MonotoneInReferenceProbability) {
  double last = INFINITY;
  for (double q : {0.1, 0.3, 0.5, 0.9}) {
    Mat probs(1, 2);
    probs << q, 1 - q;
    const double v = sei::nll_loss({{probs, {0}}});
    EXPECT_LT(v, last);
    last = v;
  }
}

TEST(Nll, RejectsInvalidPredictions) {
  Mat probs = Mat::Constant(2, 3, 0.3);
  EXPECT_THROW(sei::nll_loss({{probs, {0, 1}}}), sei::ValidationError);
  probs = Mat::Constant(2, 3, 1.0 / 3);
  EXPECT_THROW(sei::nll_loss({{probs, {0}}}), sei::ValidationError);
  EXPECT_THROW(sei::nll_loss({{probs, {0, 3}}}), sei::ValidationError);
  EXPECT_THROW(sei::nll_loss({}), sei::ValidationError);
}

TEST(Nll, GradientMatchesFiniteDifferences) {
  sei::SplitMix64 rng(77);
  std::vector<sei::TokenPrediction> batch;
  for (int i = 0; i < 3; ++i) {
    Mat probs(4, 5);
    for (Eigen::Index k = 0; k < probs.size(); ++k) probs.data()[k] = 0.1 + rng.unit();
    for (Eigen::Index r = 0; r < 4; ++r) probs.row(r) /= probs.row(r).sum();
    batch.push_back({probs, {rng.below(5), rng.below(5), rng.below(5), rng.below(5)}});
  }
  const auto g = sei::nll_loss_grad(batch);
  for (std::size_t i = 0; i < batch.size(); ++i)
    EXPECT_LT(fd_check(batch[i].probs, g[i], [&] { return sei::nll_unchecked(batch); }), 1e-4);
}
