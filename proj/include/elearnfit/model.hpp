#pragma once

// Pre-layer-norm decoder-only transformer with hand-written reverse mode.
//
//   x0 = tok_emb[t] + pos_emb[i]
//   h  = x + Attn(LN1(x))            causal multi-head attention
//   x' = h + GELU(LN2(h) W1 + b1) W2 + b2
//   logits = LN_f(x_L) head
//
// LoRA adapters, when supplied, add (a A) B^T to the targeted projections.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "elearnfit/common.hpp"
#include "elearnfit/parameters.hpp"
#include "elearnfit/peft.hpp"

namespace elearnfit {

/// True where the next-token prediction at that position enters the loss.
using LossMask = std::vector<std::uint8_t>;

/// Gradient tree congruent with Parameters (and adapters). Tensors outside
/// the trainable mask are left empty.
struct Gradients {
  Parameters base;
  LoraAdapters lora;
  TrainableMask mask;

  /// Gradient tensor by checkpoint name, or nullptr if not trainable.
  const Mat* find(const std::string& name) const {
    const Mat* out = nullptr;
    for_each_tensor([&](const std::string& n, const Mat& m) { if (n == name && m.size()) out = &m; }, base);
    for_each_lora_tensor([&](const std::string& n, const Mat& m) { if (n == name && m.size()) out = &m; }, lora);
    return out;
  }

  void set_zero() {
    for_each_tensor([](const std::string&, Mat& m) { m.setZero(); }, base);
    for_each_lora_tensor([](const std::string&, Mat& m) { m.setZero(); }, lora);
  }

  double squared_norm() const {
    double s = 0.0;
    for_each_tensor([&](const std::string&, const Mat& m) { s += m.squaredNorm(); }, base);
    for_each_lora_tensor([&](const std::string&, const Mat& m) { s += m.squaredNorm(); }, lora);
    return s;
  }

  void scale(double k) {
    for_each_tensor([&](const std::string&, Mat& m) { m *= k; }, base);
    for_each_lora_tensor([&](const std::string&, Mat& m) { m *= k; }, lora);
  }

  void add(const Gradients& o) {
    for_each_tensor([](const std::string&, Mat& a, const Mat& b) { if (a.size()) a += b; }, base, o.base);
    for_each_lora_tensor([](const std::string&, Mat& a, const Mat& b) { if (a.size()) a += b; }, lora, o.lora);
  }
};

inline Gradients make_gradients(const Parameters& params, const LoraAdapters* adapters, const TrainableMask& mask) {
  if (mask.empty()) throw Error("trainable mask is empty");
  Gradients g;
  g.mask = mask;
  std::size_t matched = 0;
  g.base = params;
  for_each_tensor(
      [&](const std::string& n, Mat& m) {
        if (mask.count(n)) {
          m.setZero();
          ++matched;
        } else {
          m = Mat();
        }
      },
      g.base);
  if (adapters) {
    g.lora = *adapters;
    for_each_lora_tensor(
        [&](const std::string& n, Mat& m) {
          if (mask.count(n)) {
            m.setZero();
            ++matched;
          } else {
            m = Mat();
          }
        },
        g.lora);
  }
  if (matched != mask.size()) {
    for (const auto& n : mask) {
      bool found = false;
      for_each_tensor([&](const std::string& m, const Mat&) { found |= (m == n); }, params);
      if (adapters) for_each_lora_tensor([&](const std::string& m, const Mat&) { found |= (m == n); }, *adapters);
      if (!found) throw Error("trainable mask names unknown tensor " + n);
    }
  }
  return g;
}

namespace detail {

inline constexpr double kLnEps = 1e-5;

template <class S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
struct LnCache {
  MatT<S> xhat;
  Eigen::Matrix<S, Eigen::Dynamic, 1> rstd;
};

template <class S>
MatT<S> layer_norm(const MatT<S>& x, const MatT<S>& gamma, const MatT<S>& beta, LnCache<S>& c) {
  const auto rows = x.rows();
  c.xhat.resize(rows, x.cols());
  c.rstd.resize(rows);
  for (Eigen::Index t = 0; t < rows; ++t) {
    const S mean = x.row(t).mean();
    auto centered = (x.row(t).array() - mean).eval();
    const S var = centered.square().mean();
    const S r = S(1) / std::sqrt(var + S(kLnEps));
    c.rstd(t) = r;
    c.xhat.row(t) = (centered * r).matrix();
  }
  MatT<S> y = c.xhat.array().rowwise() * gamma.row(0).array();
  y.array().rowwise() += beta.row(0).array();
  return y;
}

inline Mat layer_norm_backward(const Mat& dy, const LnCache<double>& c, const Mat& gamma, Mat* dgamma, Mat* dbeta) {
  if (dgamma && dgamma->size()) *dgamma += dy.cwiseProduct(c.xhat).colwise().sum();
  if (dbeta && dbeta->size()) *dbeta += dy.colwise().sum();
  Mat dxhat = dy.array().rowwise() * gamma.row(0).array();
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index t = 0; t < dy.rows(); ++t) {
    const double m1 = dxhat.row(t).mean();
    const double m2 = dxhat.row(t).cwiseProduct(c.xhat.row(t)).mean();
    dx.row(t) = c.rstd(t) * (dxhat.row(t).array() - m1 - c.xhat.row(t).array() * m2).matrix();
  }
  return dx;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluK = 0.044715;

template <class S>
S gelu(S z) {
  return S(0.5) * z * (S(1) + std::tanh(S(kGeluC) * (z + S(kGeluK) * z * z * z)));
}

inline double gelu_grad(double z) {
  const double t = std::tanh(kGeluC * (z + kGeluK * z * z * z));
  return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluK * z * z);
}

/// Read-only view of the weights in scalar type S. For S = double the
/// tensors are referenced in place; otherwise a converted copy is held.
template <class S>
class WeightView {
 public:
  explicit WeightView(const Parameters& p) : p_(p) {
    if constexpr (!std::is_same_v<S, double>) {
      for_each_tensor([&](const std::string& n, const Mat& m) { owned_.emplace(n, m.template cast<S>()); }, p);
    }
  }
  const MatT<S>& operator()(const std::string& name, const Mat& m) const {
    if constexpr (std::is_same_v<S, double>) {
      (void)name;
      return m;
    } else {
      return owned_.at(name);
    }
  }
  const Parameters& params() const { return p_; }

 private:
  const Parameters& p_;
  std::map<std::string, MatT<S>> owned_;
};

template <class S>
struct LoraFactorT {
  MatT<S> a, b;
};

/// y = a W (+ (a A) B^T); the low-rank intermediate a A is stored in `u`.
template <class S>
MatT<S> project(const MatT<S>& a, const MatT<S>& w, const LoraFactorT<S>* f, MatT<S>& u) {
  MatT<S> y = a * w;
  if (f) {
    u = a * f->a;
    y.noalias() += u * f->b.transpose();
  }
  return y;
}

inline void project_backward(const Mat& dy, const Mat& a, const Mat& w, const LoraFactor* f, const Mat& u, Mat* dw,
                             LoraFactor* df, Mat* da) {
  if (dw && dw->size()) dw->noalias() += a.transpose() * dy;
  if (f) {
    Mat dyb = dy * f->b;
    if (df && df->a.size()) df->a.noalias() += a.transpose() * dyb;
    if (df && df->b.size()) df->b.noalias() += dy.transpose() * u;
    if (da) da->noalias() += dyb * f->a.transpose();
  }
  if (da) da->noalias() += dy * w.transpose();
}

template <class S>
struct BlockCache {
  LnCache<S> ln1;
  MatT<S> a1;
  MatT<S> q, k, v;
  std::array<MatT<S>, 4> lora_u;
  std::vector<MatT<S>> probs;
  MatT<S> attn;
  LnCache<S> ln2;
  MatT<S> a2;
  MatT<S> z1;
  MatT<S> g;
};

template <class S>
struct ForwardCache {
  std::vector<BlockCache<S>> blocks;
  LnCache<S> lnf;
  MatT<S> af;
};

inline void check_tokens(const Parameters& params, const TokenIds& tokens) {
  if (tokens.empty()) throw Error("empty token sequence");
  if (tokens.size() > params.config.context_len)
    throw Error("sequence of " + std::to_string(tokens.size()) + " tokens exceeds context_len " +
                std::to_string(params.config.context_len));
  for (TokenId t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= params.config.vocab_size)
      throw Error("token id " + std::to_string(t) + " outside vocabulary");
}

template <class S>
MatT<S> forward_impl(const Parameters& params, const TokenIds& tokens, const LoraAdapters* adapters,
                     ForwardCache<S>* cache, bool last_only) {
  check_tokens(params, tokens);
  const auto& cfg = params.config;
  const auto T = static_cast<Eigen::Index>(tokens.size());
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto H = static_cast<Eigen::Index>(cfg.n_heads);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const S neg_inf = -std::numeric_limits<S>::infinity();
  const WeightView<S> wv(params);

  // Adapter factors converted to S (referenced when S = double).
  std::vector<std::array<std::optional<LoraFactorT<S>>, 4>> lora_s;
  if (adapters) {
    lora_s.resize(params.blocks.size());
    for (std::size_t l = 0; l < params.blocks.size(); ++l)
      for (auto p : {AttnProj::Q, AttnProj::K, AttnProj::V, AttnProj::O})
        if (const auto* f = adapters->factor(l, p))
          lora_s[l][static_cast<std::size_t>(p)] = LoraFactorT<S>{f->a.template cast<S>(), f->b.template cast<S>()};
  }

  const auto& tok_emb = wv("tok_emb", params.tok_emb);
  const auto& pos_emb = wv("pos_emb", params.pos_emb);
  MatT<S> x(T, d);
  for (Eigen::Index t = 0; t < T; ++t) x.row(t) = tok_emb.row(tokens[t]) + pos_emb.row(t);

  if (cache) cache->blocks.resize(params.blocks.size());
  BlockCache<S> scratch;
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    const auto& b = params.blocks[l];
    const auto pre = block_prefix(l);
    BlockCache<S>& bc = cache ? cache->blocks[l] : scratch;
    auto lora = [&](AttnProj p) -> const LoraFactorT<S>* {
      if (lora_s.empty()) return nullptr;
      const auto& f = lora_s[l][static_cast<std::size_t>(p)];
      return f ? &*f : nullptr;
    };

    bc.a1 = layer_norm<S>(x, wv(pre + "ln1.gamma", b.ln1_gamma), wv(pre + "ln1.beta", b.ln1_beta), bc.ln1);
    bc.q = project<S>(bc.a1, wv(pre + "attn.Wq", b.wq), lora(AttnProj::Q), bc.lora_u[0]);
    bc.k = project<S>(bc.a1, wv(pre + "attn.Wk", b.wk), lora(AttnProj::K), bc.lora_u[1]);
    bc.v = project<S>(bc.a1, wv(pre + "attn.Wv", b.wv), lora(AttnProj::V), bc.lora_u[2]);
    bc.attn.resize(T, d);
    bc.probs.resize(static_cast<std::size_t>(H));
    for (Eigen::Index h = 0; h < H; ++h) {
      MatT<S> s = bc.q.middleCols(h * dh, dh) * bc.k.middleCols(h * dh, dh).transpose();
      s *= scale;
      for (Eigen::Index i = 0; i < T; ++i) {
        S mx = neg_inf;
        for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, s(i, j));
        S sum = 0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          s(i, j) = std::exp(s(i, j) - mx);
          sum += s(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < T; ++j) s(i, j) = 0;
      }
      bc.attn.middleCols(h * dh, dh).noalias() = s * bc.v.middleCols(h * dh, dh);
      bc.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    x += project<S>(bc.attn, wv(pre + "attn.Wo", b.wo), lora(AttnProj::O), bc.lora_u[3]);

    bc.a2 = layer_norm<S>(x, wv(pre + "ln2.gamma", b.ln2_gamma), wv(pre + "ln2.beta", b.ln2_beta), bc.ln2);
    bc.z1 = bc.a2 * wv(pre + "ffn.W1", b.w1);
    bc.z1.array().rowwise() += wv(pre + "ffn.b1", b.b1).row(0).array();
    bc.g = bc.z1.unaryExpr([](S z) { return gelu<S>(z); });
    x.noalias() += bc.g * wv(pre + "ffn.W2", b.w2);
    x.array().rowwise() += wv(pre + "ffn.b2", b.b2).row(0).array();
  }

  LnCache<S> lnf_scratch;
  LnCache<S>& lnf = cache ? cache->lnf : lnf_scratch;
  const auto& g = wv("ln_f.gamma", params.lnf_gamma);
  const auto& be = wv("ln_f.beta", params.lnf_beta);
  MatT<S> af = last_only ? layer_norm<S>(MatT<S>(x.bottomRows(1)), g, be, lnf) : layer_norm<S>(x, g, be, lnf);
  MatT<S> logits = af * wv("head", params.head);
  if (cache) cache->af = std::move(af);
  return logits;
}

inline bool block_has_trainable(const Gradients& g, std::size_t l) {
  bool any = false;
  for_each_tensor(
      [&](const std::string& n, const Mat& m) {
        if (m.size() && n.rfind(block_prefix(l), 0) == 0) any = true;
      },
      g.base);
  for_each_lora_tensor(
      [&](const std::string& n, const Mat& m) {
        if (m.size() && n.rfind(block_prefix(l), 0) == 0) any = true;
      },
      g.lora);
  return any;
}

inline void backward(const Parameters& params, const TokenIds& tokens, const LoraAdapters* adapters,
                     const ForwardCache<double>& c, const Mat& dlogits, Gradients& g) {
  const auto& cfg = params.config;
  const auto T = static_cast<Eigen::Index>(tokens.size());
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto H = static_cast<Eigen::Index>(cfg.n_heads);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  if (g.base.head.size()) g.base.head.noalias() += c.af.transpose() * dlogits;
  Mat daf = dlogits * params.head.transpose();
  Mat dx = layer_norm_backward(daf, c.lnf, params.lnf_gamma, &g.base.lnf_gamma, &g.base.lnf_beta);

  // Lowest block whose input gradient is still needed.
  const bool embeds = g.base.tok_emb.size() || g.base.pos_emb.size();
  std::ptrdiff_t stop = static_cast<std::ptrdiff_t>(params.blocks.size());
  for (std::size_t l = 0; l < params.blocks.size(); ++l)
    if (block_has_trainable(g, l)) {
      stop = static_cast<std::ptrdiff_t>(l);
      break;
    }
  if (embeds) stop = 0;

  for (auto li = static_cast<std::ptrdiff_t>(params.blocks.size()) - 1; li >= stop; --li) {
    const auto l = static_cast<std::size_t>(li);
    const auto& b = params.blocks[l];
    const auto& bc = c.blocks[l];
    auto& gb = g.base.blocks[l];
    auto lora = [&](AttnProj p) { return adapters ? adapters->factor(l, p) : nullptr; };
    auto glora = [&](AttnProj p) { return g.lora.factor(l, p); };

    // Feed-forward sublayer.
    if (gb.w2.size()) gb.w2.noalias() += bc.g.transpose() * dx;
    if (gb.b2.size()) gb.b2 += dx.colwise().sum();
    Mat dz1 = dx * b.w2.transpose();
    dz1.array() *= bc.z1.unaryExpr([](double z) { return gelu_grad(z); }).array();
    if (gb.w1.size()) gb.w1.noalias() += bc.a2.transpose() * dz1;
    if (gb.b1.size()) gb.b1 += dz1.colwise().sum();
    Mat da2 = dz1 * b.w1.transpose();
    Mat dh_res = dx + layer_norm_backward(da2, bc.ln2, b.ln2_gamma, &gb.ln2_gamma, &gb.ln2_beta);

    // Attention sublayer.
    Mat dattn = Mat::Zero(T, d);
    project_backward(dh_res, bc.attn, b.wo, lora(AttnProj::O), bc.lora_u[3], &gb.wo, glora(AttnProj::O), &dattn);
    Mat dq = Mat::Zero(T, d), dk = Mat::Zero(T, d), dv = Mat::Zero(T, d);
    for (Eigen::Index h = 0; h < H; ++h) {
      const Mat& p = bc.probs[static_cast<std::size_t>(h)];
      auto dout = dattn.middleCols(h * dh, dh);
      Mat dp = dout * bc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() += p.transpose() * dout;
      Eigen::VectorXd rowdot = dp.cwiseProduct(p).rowwise().sum();
      Mat ds = p.cwiseProduct(dp - rowdot.replicate(1, T));
      ds *= scale;
      dq.middleCols(h * dh, dh).noalias() += ds * bc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() += ds.transpose() * bc.q.middleCols(h * dh, dh);
    }
    Mat da1 = Mat::Zero(T, d);
    project_backward(dq, bc.a1, b.wq, lora(AttnProj::Q), bc.lora_u[0], &gb.wq, glora(AttnProj::Q), &da1);
    project_backward(dk, bc.a1, b.wk, lora(AttnProj::K), bc.lora_u[1], &gb.wk, glora(AttnProj::K), &da1);
    project_backward(dv, bc.a1, b.wv, lora(AttnProj::V), bc.lora_u[2], &gb.wv, glora(AttnProj::V), &da1);
    dx = dh_res + layer_norm_backward(da1, bc.ln1, b.ln1_gamma, &gb.ln1_gamma, &gb.ln1_beta);
  }

  if (embeds) {
    for (Eigen::Index t = 0; t < T; ++t) {
      if (g.base.tok_emb.size()) g.base.tok_emb.row(tokens[t]) += dx.row(t);
      if (g.base.pos_emb.size()) g.base.pos_emb.row(t) += dx.row(t);
    }
  }
}

/// Mean cross-entropy over masked rows; writes d(loss)/d(logits) * weight.
inline double masked_cross_entropy(const Mat& logits, const TokenIds& targets, const LossMask& mask, double weight,
                                   Mat* dlogits) {
  std::size_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  if (n == 0) throw Error("loss mask has no true position");
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  double loss = 0.0;
  const double inv = 1.0 / static_cast<double>(n);
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    const TokenId y = targets[static_cast<std::size_t>(t)];
    if (y < 0 || y >= logits.cols()) throw Error("target id " + std::to_string(y) + " outside vocabulary");
    const double mx = logits.row(t).maxCoeff();
    const auto e = (logits.row(t).array() - mx).exp().eval();
    const double sum = e.sum();
    loss += (std::log(sum) + mx - logits(t, y)) * inv;
    if (dlogits) {
      dlogits->row(t) = (e / sum * (inv * weight)).matrix();
      (*dlogits)(t, y) -= inv * weight;
    }
  }
  return loss;
}

inline void check_loss_inputs(const TokenIds& tokens, const TokenIds& targets, const LossMask& mask) {
  if (targets.size() != tokens.size()) throw Error("targets and tokens differ in length");
  if (mask.size() != tokens.size()) throw Error("loss mask and tokens differ in length");
}

}  // namespace detail

/// Logits [tokens x vocab].
inline Mat forward(const Parameters& params, const TokenIds& tokens, const LoraAdapters* adapters = nullptr) {
  return detail::forward_impl<double>(params, tokens, adapters, nullptr, false);
}

/// Logits of the final position only [1 x vocab].
inline Mat forward_last(const Parameters& params, const TokenIds& tokens, const LoraAdapters* adapters = nullptr) {
  return detail::forward_impl<double>(params, tokens, adapters, nullptr, true);
}

/// Attention probabilities of every block and head, for inspection.
inline std::vector<std::vector<Mat>> attention_maps(const Parameters& params, const TokenIds& tokens,
                                                     const LoraAdapters* adapters = nullptr) {
  detail::ForwardCache<double> cache;
  detail::forward_impl<double>(params, tokens, adapters, &cache, false);
  std::vector<std::vector<Mat>> out;
  for (auto& b : cache.blocks) out.push_back(b.probs);
  return out;
}

inline double loss(const Parameters& params, const TokenIds& tokens, const TokenIds& targets, const LossMask& mask,
                   const LoraAdapters* adapters = nullptr) {
  detail::check_loss_inputs(tokens, targets, mask);
  return detail::masked_cross_entropy(forward(params, tokens, adapters), targets, mask, 1.0, nullptr);
}

/// Same loss evaluated entirely in extended precision; used by the
/// finite-difference oracle so that central differences of tiny gradients
/// are not dominated by double rounding.
inline long double loss_extended(const Parameters& params, const TokenIds& tokens, const TokenIds& targets,
                                 const LossMask& mask, const LoraAdapters* adapters = nullptr) {
  using LD = long double;
  detail::check_loss_inputs(tokens, targets, mask);
  const auto logits = detail::forward_impl<LD>(params, tokens, adapters, nullptr, false);
  std::size_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  if (n == 0) throw Error("loss mask has no true position");
  LD total = 0;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    const TokenId y = targets[static_cast<std::size_t>(t)];
    if (y < 0 || y >= logits.cols()) throw Error("target id " + std::to_string(y) + " outside vocabulary");
    const LD mx = logits.row(t).maxCoeff();
    LD sum = 0;
    for (Eigen::Index v = 0; v < logits.cols(); ++v) sum += std::exp(logits(t, v) - mx);
    total += std::log(sum) + mx - logits(t, y);
  }
  return total / static_cast<LD>(n);
}

/// Adds weight * d(loss)/d(theta) into `grads` and returns the loss.
inline double accumulate_loss_and_grad(const Parameters& params, const TokenIds& tokens, const TokenIds& targets,
                                       const LossMask& mask, const LoraAdapters* adapters, Gradients& grads,
                                       double weight = 1.0) {
  detail::check_loss_inputs(tokens, targets, mask);
  detail::ForwardCache<double> cache;
  Mat logits = detail::forward_impl<double>(params, tokens, adapters, &cache, false);
  Mat dlogits;
  const double l = detail::masked_cross_entropy(logits, targets, mask, weight, &dlogits);
  detail::backward(params, tokens, adapters, cache, dlogits, grads);
  return l;
}

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
};

inline LossAndGrad loss_and_grad(const Parameters& params, const TokenIds& tokens, const TokenIds& targets,
                                 const LossMask& mask, const LoraAdapters* adapters, const TrainableMask& trainable) {
  LossAndGrad out;
  out.grads = make_gradients(params, adapters, trainable);
  out.loss = accumulate_loss_and_grad(params, tokens, targets, mask, adapters, out.grads, 1.0);
  return out;
}

/// Argmax decoding (ties go to the lowest id). Stops when `stop_id` is
/// produced (not included) or after `max_new` tokens. Once the window is
/// full the oldest tokens slide out.
inline TokenIds greedy_decode(const Parameters& params, const TokenIds& prompt, TokenId stop_id,
                              std::size_t max_new = 100, const LoraAdapters* adapters = nullptr) {
  if (prompt.empty()) throw Error("greedy_decode: empty prompt");
  const std::size_t ctx = params.config.context_len;
  TokenIds window(prompt.size() > ctx ? prompt.end() - static_cast<std::ptrdiff_t>(ctx) : prompt.begin(),
                  prompt.end());
  TokenIds out;
  while (out.size() < max_new) {
    Mat logits = forward_last(params, window, adapters);
    Eigen::Index best = 0;
    double best_v = logits(0, 0);
    for (Eigen::Index v = 1; v < logits.cols(); ++v)
      if (logits(0, v) > best_v) {
        best_v = logits(0, v);
        best = v;
      }
    const auto next = static_cast<TokenId>(best);
    if (next == stop_id) break;
    out.push_back(next);
    if (window.size() == ctx) window.erase(window.begin());
    window.push_back(next);
  }
  return out;
}

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst_tensor;
};

/// Compares `analytic` against central differences at up to `n_coords`
/// random coordinates of every trainable tensor. Relative error per
/// coordinate is |a - cd| / max(|a|, |cd|, 1e-8).
inline FiniteDiffReport compare_finite_differences(const Parameters& params, const TokenIds& tokens,
                                                   const TokenIds& targets, const LossMask& mask,
                                                   const LoraAdapters* adapters, const Gradients& analytic,
                                                   std::size_t n_coords, double step, std::uint64_t seed) {
  Parameters work = params;
  LoraAdapters work_lora = adapters ? *adapters : LoraAdapters{};
  const LoraAdapters* lp = adapters ? &work_lora : nullptr;

  std::vector<std::pair<std::string, std::pair<Mat*, const Mat*>>> tensors;
  for_each_tensor(
      [&](const std::string& n, Mat& w, const Mat& g) {
        if (g.size()) tensors.push_back({n, {&w, &g}});
      },
      work, analytic.base);
  if (adapters)
    for_each_lora_tensor(
        [&](const std::string& n, Mat& w, const Mat& g) {
          if (g.size()) tensors.push_back({n, {&w, &g}});
        },
        work_lora, analytic.lora);

  FiniteDiffReport rep;
  Rng rng(seed);
  for (auto& [name, ptrs] : tensors) {
    Mat& w = *ptrs.first;
    const Mat& g = *ptrs.second;
    const auto size = static_cast<std::size_t>(w.size());
    std::vector<std::size_t> coords;
    if (size <= n_coords) {
      for (std::size_t i = 0; i < size; ++i) coords.push_back(i);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, size - 1);
      for (std::size_t i = 0; i < n_coords; ++i) coords.push_back(pick(rng));
    }
    for (auto i : coords) {
      const double orig = w.data()[i];
      w.data()[i] = orig + step;
      const long double lp_plus = loss_extended(work, tokens, targets, mask, lp);
      w.data()[i] = orig - step;
      const long double lp_minus = loss_extended(work, tokens, targets, mask, lp);
      w.data()[i] = orig;
      // The realised step may differ from `step` by rounding of orig +/- step.
      const long double span = static_cast<long double>(orig + step) - static_cast<long double>(orig - step);
      const double cd = static_cast<double>((lp_plus - lp_minus) / span);
      const double a = g.data()[i];
      const double rel = std::abs(a - cd) / std::max({std::abs(a), std::abs(cd), 1e-8});
      ++rep.coords_checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_tensor = name;
      }
    }
  }
  return rep;
}

inline FiniteDiffReport finite_diff_check(const Parameters& params, const TokenIds& tokens, const TokenIds& targets,
                                          const LossMask& mask, const LoraAdapters* adapters,
                                          const TrainableMask& trainable, std::size_t n_coords, double step,
                                          std::uint64_t seed) {
  auto lg = loss_and_grad(params, tokens, targets, mask, adapters, trainable);
  return compare_finite_differences(params, tokens, targets, mask, adapters, lg.grads, n_coords, step, seed);
}

}  // namespace elearnfit
