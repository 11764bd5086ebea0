#pragma once

// Cross-modal fusion network: three pre-norm attention decoder layers that
// enrich image and indication features with similar-historical-case (SHC)
// evidence and then integrate them. Forward and exact reverse-mode backward,
// all in double precision.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "sei/error.hpp"
#include "sei/rng.hpp"

namespace sei {

using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

inline constexpr double kLayerNormEps = 1e-5;

struct NormParams {
  RowVec gain;
  RowVec bias;
};

struct AttentionParams {
  Mat wq, wk, wv, wo;  // d x d each
};

/// One decoder layer: self-attention, cross-attention and a GELU
/// feed-forward block, each behind its own layer norm.
struct LayerParams {
  NormParams norm_self, norm_cross, norm_ffn;
  AttentionParams self_attn, cross_attn;
  Mat ff_in;   // d x 4d
  Mat ff_out;  // 4d x d

  template <typename F>
  void for_each(F&& f) {
    f("norm_self.gain", norm_self.gain);
    f("norm_self.bias", norm_self.bias);
    f("norm_cross.gain", norm_cross.gain);
    f("norm_cross.bias", norm_cross.bias);
    f("norm_ffn.gain", norm_ffn.gain);
    f("norm_ffn.bias", norm_ffn.bias);
    f("self_attn.wq", self_attn.wq);
    f("self_attn.wk", self_attn.wk);
    f("self_attn.wv", self_attn.wv);
    f("self_attn.wo", self_attn.wo);
    f("cross_attn.wq", cross_attn.wq);
    f("cross_attn.wk", cross_attn.wk);
    f("cross_attn.wv", cross_attn.wv);
    f("cross_attn.wo", cross_attn.wo);
    f("ff_in", ff_in);
    f("ff_out", ff_out);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<LayerParams*>(this)->for_each([&](std::string_view name, auto& m) {
      f(name, static_cast<const std::remove_reference_t<decltype(m)>&>(m));
    });
  }

  static LayerParams zeros(std::size_t d) {
    LayerParams p;
    const auto dd = static_cast<Eigen::Index>(d);
    for (NormParams* n : {&p.norm_self, &p.norm_cross, &p.norm_ffn}) {
      n->gain = RowVec::Zero(dd);
      n->bias = RowVec::Zero(dd);
    }
    for (AttentionParams* a : {&p.self_attn, &p.cross_attn})
      for (Mat* m : {&a->wq, &a->wk, &a->wv, &a->wo}) *m = Mat::Zero(dd, dd);
    p.ff_in = Mat::Zero(dd, 4 * dd);
    p.ff_out = Mat::Zero(4 * dd, dd);
    return p;
  }
};

enum class FusionLayer { ImgEnrich, IndEnrich, Integrate };

struct FusionParams {
  std::size_t d = 0;
  std::size_t heads = 1;
  std::uint64_t seed = 0;
  LayerParams img_enrich, ind_enrich, integrate;

  LayerParams& layer(FusionLayer l) {
    return l == FusionLayer::ImgEnrich ? img_enrich : l == FusionLayer::IndEnrich ? ind_enrich : integrate;
  }
  const LayerParams& layer(FusionLayer l) const { return const_cast<FusionParams*>(this)->layer(l); }
};

/// Seeded init: projections and feed-forward weights uniform in
/// [-1/sqrt(d), 1/sqrt(d)], norm gains 1, biases 0.
inline FusionParams init_params(std::size_t d, std::size_t heads, std::uint64_t seed) {
  if (d == 0 || heads == 0 || d % heads != 0)
    throw ValidationError("fusion: heads (" + std::to_string(heads) + ") must divide d (" + std::to_string(d) + ")");
  FusionParams p;
  p.d = d;
  p.heads = heads;
  p.seed = seed;
  SplitMix64 rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (LayerParams* layer : {&p.img_enrich, &p.ind_enrich, &p.integrate}) {
    *layer = LayerParams::zeros(d);
    layer->for_each([&](std::string_view name, auto& m) {
      if (name.find(".gain") != std::string_view::npos) {
        m.setOnes();
      } else if (name.find(".bias") == std::string_view::npos) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
      }
    });
  }
  return p;
}

namespace detail {

inline void require_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw ValidationError(std::string("fusion: non-finite values in ") + what);
}

struct NormCache {
  Mat xhat;
  Eigen::VectorXd inv_std;
};

inline Mat layer_norm(const Mat& x, const NormParams& p, NormCache& c) {
  const auto n = x.rows();
  const auto d = static_cast<double>(x.cols());
  c.xhat.resize(n, x.cols());
  c.inv_std.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().sum() / d;
    c.inv_std(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    c.xhat.row(i) = (x.row(i).array() - mu) * c.inv_std(i);
  }
  Mat y = c.xhat.array().rowwise() * p.gain.array();
  y.rowwise() += p.bias;
  return y;
}

inline Mat layer_norm_backward(const Mat& dy, const NormParams& p, const NormCache& c, NormParams& g) {
  g.gain += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g.bias += dy.colwise().sum();
  const Mat dxhat = dy.array().rowwise() * p.gain.array();
  const double d = static_cast<double>(dy.cols());
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).sum() / d;
    const double m2 = dxhat.row(i).dot(c.xhat.row(i)) / d;
    dx.row(i) = c.inv_std(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2).matrix();
  }
  return dx;
}

inline void softmax_rows(Mat& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp();
    s.row(i) /= s.row(i).sum();
  }
}

struct AttentionCache {
  Mat q, k, v;              // projected, S x d
  std::vector<Mat> probs;   // per head, S_q x S_m
  Mat context;              // concatenated head outputs, S_q x d
};

inline Mat attention(const Mat& qin, const Mat& kvin, const AttentionParams& p, std::size_t heads,
                     AttentionCache& c) {
  const auto d = qin.cols();
  const auto dh = d / static_cast<Eigen::Index>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.q = qin * p.wq;
  c.k = kvin * p.wk;
  c.v = kvin * p.wv;
  c.context.resize(qin.rows(), d);
  c.probs.assign(heads, Mat());
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    Mat s = c.q.middleCols(off, dh) * c.k.middleCols(off, dh).transpose() * scale;
    softmax_rows(s);
    c.context.middleCols(off, dh) = s * c.v.middleCols(off, dh);
    c.probs[h] = std::move(s);
  }
  return c.context * p.wo;
}

// Accumulates parameter grads into g, returns (d qin, d kvin).
inline std::pair<Mat, Mat> attention_backward(const Mat& dout, const Mat& qin, const Mat& kvin,
                                              const AttentionParams& p, std::size_t heads, const AttentionCache& c,
                                              AttentionParams& g) {
  const auto d = qin.cols();
  const auto dh = d / static_cast<Eigen::Index>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  g.wo += c.context.transpose() * dout;
  const Mat dctx = dout * p.wo.transpose();
  Mat dq(c.q.rows(), d), dk(c.k.rows(), d), dv(c.v.rows(), d);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    const Mat& P = c.probs[h];
    const Mat dctx_h = dctx.middleCols(off, dh);
    const Mat dP = dctx_h * c.v.middleCols(off, dh).transpose();
    dv.middleCols(off, dh) = P.transpose() * dctx_h;
    const Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
    const Mat dS = P.array() * (dP.colwise() - rowdot).array();
    dq.middleCols(off, dh) = dS * c.k.middleCols(off, dh) * scale;
    dk.middleCols(off, dh) = dS.transpose() * c.q.middleCols(off, dh) * scale;
  }
  g.wq += qin.transpose() * dq;
  g.wk += kvin.transpose() * dk;
  g.wv += kvin.transpose() * dv;
  Mat dqin = dq * p.wq.transpose();
  Mat dkvin = dk * p.wk.transpose() + dv * p.wv.transpose();
  return {std::move(dqin), std::move(dkvin)};
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

}  // namespace detail

/// Intermediate values of one decoder layer, kept for backward and inspection.
struct LayerTrace {
  Mat x, memory;
  detail::NormCache n1, n2, n3;
  Mat a, b, c;  // normed inputs to each sub-layer
  Mat x1, x2;   // residual stream after self and cross attention
  detail::AttentionCache self_attn, cross_attn;
  Mat ff_pre;   // c * ff_in
  Mat ff_act;   // gelu(ff_pre)
  Mat out;
};

inline void check_layer_shapes(const Mat& x, const Mat& memory, const LayerParams& p, std::size_t heads) {
  const auto d = p.self_attn.wq.rows();
  if (x.cols() != d || memory.cols() != d)
    throw ValidationError("fusion: feature width " + std::to_string(x.cols()) + "/" + std::to_string(memory.cols()) +
                          " does not match model width " + std::to_string(d));
  if (x.rows() < 1 || memory.rows() < 1) throw ValidationError("fusion: empty feature matrix");
  if (heads == 0 || d % static_cast<Eigen::Index>(heads) != 0)
    throw ValidationError("fusion: heads must divide d");
  detail::require_finite(x, "queries");
  detail::require_finite(memory, "memory");
}

inline LayerTrace decoder_layer_trace(const Mat& x, const Mat& memory, const LayerParams& p, std::size_t heads) {
  check_layer_shapes(x, memory, p, heads);
  LayerTrace t;
  t.x = x;
  t.memory = memory;
  t.a = detail::layer_norm(x, p.norm_self, t.n1);
  t.x1 = x + detail::attention(t.a, t.a, p.self_attn, heads, t.self_attn);
  t.b = detail::layer_norm(t.x1, p.norm_cross, t.n2);
  t.x2 = t.x1 + detail::attention(t.b, memory, p.cross_attn, heads, t.cross_attn);
  t.c = detail::layer_norm(t.x2, p.norm_ffn, t.n3);
  t.ff_pre = t.c * p.ff_in;
  t.ff_act = t.ff_pre.unaryExpr(&detail::gelu);
  t.out = t.x2 + t.ff_act * p.ff_out;
  return t;
}

inline Mat decoder_layer(const Mat& x, const Mat& memory, const LayerParams& p, std::size_t heads) {
  return decoder_layer_trace(x, memory, p, heads).out;
}

struct LayerInputGrads {
  Mat x, memory;
};

inline LayerInputGrads decoder_layer_backward(const LayerTrace& t, const Mat& dout, const LayerParams& p,
                                              std::size_t heads, LayerParams& g) {
  // y = x2 + gelu(c W1) W2
  Mat dx2 = dout;
  g.ff_out += t.ff_act.transpose() * dout;
  const Mat dact = dout * p.ff_out.transpose();
  const Mat dpre = dact.array() * t.ff_pre.unaryExpr(&detail::gelu_grad).array();
  g.ff_in += t.c.transpose() * dpre;
  dx2 += detail::layer_norm_backward(dpre * p.ff_in.transpose(), p.norm_ffn, t.n3, g.norm_ffn);

  // x2 = x1 + cross(b, memory)
  Mat dx1 = dx2;
  auto [db, dmem] = detail::attention_backward(dx2, t.b, t.memory, p.cross_attn, heads, t.cross_attn, g.cross_attn);
  dx1 += detail::layer_norm_backward(db, p.norm_cross, t.n2, g.norm_cross);

  // x1 = x + self(a, a)
  Mat dx = dx1;
  auto [daq, dakv] = detail::attention_backward(dx1, t.a, t.a, p.self_attn, heads, t.self_attn, g.self_attn);
  dx += detail::layer_norm_backward(daq + dakv, p.norm_self, t.n1, g.norm_self);
  return {std::move(dx), std::move(dmem)};
}

struct FeatureSet {
  Mat image;                       // S_i x d patch features
  std::optional<Mat> shc;          // S_h x d encoded similar-case text
  std::optional<Mat> indication;   // S_n x d encoded indication
};

enum class Branch { Full, NoIndication, NoShc, ImageOnly };

inline std::string_view branch_name(Branch b) {
  switch (b) {
    case Branch::Full: return "full";
    case Branch::NoIndication: return "no_indication";
    case Branch::NoShc: return "no_shc";
    case Branch::ImageOnly: return "image_only";
  }
  return "?";
}

inline Branch select_branch(bool has_shc, bool has_indication) {
  if (has_shc) return has_indication ? Branch::Full : Branch::NoIndication;
  return has_indication ? Branch::NoShc : Branch::ImageOnly;
}

struct FusionOutput {
  Mat fused;
  Branch branch_taken = Branch::ImageOnly;
};

/// Full forward state for one fuse() call.
struct FusionTrace {
  Branch branch = Branch::ImageOnly;
  std::optional<LayerTrace> img_enrich, ind_enrich;
  LayerTrace integrate;
};

/// Branch rules:
///   full           E_img = L1(image, shc), E_ind = L2(indication, shc), fused = L3(E_img, E_ind)
///   no_indication  fused = L3(E_img, E_img)
///   no_shc         fused = L3(image, indication)
///   image_only     fused = L3(image, image)
inline FusionTrace fuse_trace(const FeatureSet& f, const FusionParams& p) {
  if (f.image.size() == 0) throw ValidationError("fusion: image features are required");
  FusionTrace t;
  t.branch = select_branch(f.shc.has_value(), f.indication.has_value());
  const auto h = p.heads;
  Mat e_img = f.image;
  if (f.shc) {
    t.img_enrich = decoder_layer_trace(f.image, *f.shc, p.img_enrich, h);
    e_img = t.img_enrich->out;
  }
  switch (t.branch) {
    case Branch::Full:
      t.ind_enrich = decoder_layer_trace(*f.indication, *f.shc, p.ind_enrich, h);
      t.integrate = decoder_layer_trace(e_img, t.ind_enrich->out, p.integrate, h);
      break;
    case Branch::NoIndication:
    case Branch::ImageOnly:
      t.integrate = decoder_layer_trace(e_img, e_img, p.integrate, h);
      break;
    case Branch::NoShc:
      t.integrate = decoder_layer_trace(e_img, *f.indication, p.integrate, h);
      break;
  }
  return t;
}

inline FusionOutput fuse(const FeatureSet& f, const FusionParams& p) {
  auto t = fuse_trace(f, p);
  return {std::move(t.integrate.out), t.branch};
}

struct FusionGradients {
  LayerParams img_enrich, ind_enrich, integrate;
  Mat image;
  std::optional<Mat> shc, indication;

  LayerParams& layer(FusionLayer l) {
    return l == FusionLayer::ImgEnrich ? img_enrich : l == FusionLayer::IndEnrich ? ind_enrich : integrate;
  }
};

/// Reverse-mode gradients of sum(fused .* upstream) with respect to every
/// parameter and every present input.
inline FusionGradients fuse_backward(const FeatureSet& f, const FusionParams& p, const Mat& upstream) {
  const auto t = fuse_trace(f, p);
  if (upstream.rows() != t.integrate.out.rows() || upstream.cols() != t.integrate.out.cols())
    throw ValidationError("fusion: upstream gradient shape does not match the fused output");
  FusionGradients g;
  g.img_enrich = LayerParams::zeros(p.d);
  g.ind_enrich = LayerParams::zeros(p.d);
  g.integrate = LayerParams::zeros(p.d);
  g.image = Mat::Zero(f.image.rows(), f.image.cols());
  if (f.shc) g.shc = Mat::Zero(f.shc->rows(), f.shc->cols());
  if (f.indication) g.indication = Mat::Zero(f.indication->rows(), f.indication->cols());

  const auto top = decoder_layer_backward(t.integrate, upstream, p.integrate, p.heads, g.integrate);
  Mat d_eimg = top.x;
  switch (t.branch) {
    case Branch::Full: {
      const auto ind = decoder_layer_backward(*t.ind_enrich, top.memory, p.ind_enrich, p.heads, g.ind_enrich);
      *g.indication += ind.x;
      *g.shc += ind.memory;
      break;
    }
    case Branch::NoIndication:
    case Branch::ImageOnly:
      d_eimg += top.memory;
      break;
    case Branch::NoShc:
      *g.indication += top.memory;
      break;
  }
  if (t.img_enrich) {
    const auto img = decoder_layer_backward(*t.img_enrich, d_eimg, p.img_enrich, p.heads, g.img_enrich);
    g.image += img.x;
    *g.shc += img.memory;
  } else {
    g.image += d_eimg;
  }
  return g;
}

}  // namespace sei
