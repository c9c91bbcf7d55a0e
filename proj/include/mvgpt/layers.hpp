#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mvgpt/autodiff.hpp"
#include "mvgpt/rng.hpp"

namespace mvgpt {

// Additive attention masks: 0 keeps a key, kMaskedOut removes it. The value is
// large enough that exp(x - max) underflows to exactly +0.0, which is what
// makes causality and pad invariance bit-exact rather than approximate.
constexpr double kMaskedOut = -1e9;

inline Tensor causal_mask(std::size_t n) {
  Tensor m(Shape{n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m(i, j) = kMaskedOut;
  return m;
}

// Blocks every query from attending to PAD keys.
inline Tensor key_pad_mask(std::size_t q_len, const std::vector<bool>& key_is_real) {
  Tensor m(Shape{q_len, key_is_real.size()}, 0.0);
  for (std::size_t i = 0; i < q_len; ++i)
    for (std::size_t j = 0; j < key_is_real.size(); ++j)
      if (!key_is_real[j]) m(i, j) = kMaskedOut;
  return m;
}

// Keeps mask entries canonical (0 or kMaskedOut) instead of stacking -2e9s.
inline Tensor merge_masks(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("merge_masks: shape mismatch");
  Tensor out = a.clone();
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::min(out.at(i), b.at(i));
  return out;
}

// GPT-2 style init: weights N(0, 0.02), biases zero, norm gains one.
inline Tensor normal_init(const Shape& s, Rng& rng, double stddev = 0.02) {
  Tensor t(s);
  for (auto& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : w(name + ".w", ParamKind::Weight, normal_init({in, out}, rng)),
        b(name + ".b", ParamKind::Bias, Tensor(Shape{out}, 0.0)) {}

  Var forward(const Var& x) {
    Tape& t = x.tape();
    return add_rowvec(matmul(x, t.param(w)), t.param(b));
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }

  Parameter w, b;
};

class LayerNormP {
 public:
  LayerNormP() = default;
  LayerNormP(const std::string& name, std::size_t dim)
      : gain(name + ".g", ParamKind::Gain, Tensor(Shape{dim}, 1.0)),
        bias(name + ".b", ParamKind::Bias, Tensor(Shape{dim}, 0.0)) {}

  Var forward(const Var& x) {
    Tape& t = x.tape();
    return layer_norm(x, t.param(gain), t.param(bias));
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&gain);
    out.push_back(&bias);
  }

  Parameter gain, bias;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, std::size_t dim, std::size_t heads, Rng& rng)
      : heads_(heads),
        head_dim_(dim / heads),
        q(name + ".q", dim, dim, rng),
        k(name + ".k", dim, dim, rng),
        v(name + ".v", dim, dim, rng),
        o(name + ".o", dim, dim, rng) {
    if (dim % heads != 0) throw std::invalid_argument("attention: heads must divide dim");
  }

  // xq: [nq, d] queries, xkv: [nk, d] keys/values, mask: additive [nq, nk] or
  // undefined for full attention.
  Var forward(const Var& xq, const Var& xkv, const Tensor& mask = Tensor()) {
    Tape& t = xq.tape();
    Var Q = q.forward(xq), K = k.forward(xkv), V = v.forward(xkv);
    Var m;
    if (mask.defined()) {
      if (mask.rank() != 2 || mask.dim(0) != xq.rows() || mask.dim(1) != xkv.rows()) {
        throw std::invalid_argument("attention: mask " + shape_str(mask.shape()) +
                                    " does not cover " + std::to_string(xq.rows()) + "x" +
                                    std::to_string(xkv.rows()));
      }
      m = t.constant(mask);
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim_));
    std::vector<Var> outs;
    outs.reserve(heads_);
    for (std::size_t h = 0; h < heads_; ++h) {
      Var Qh = slice_cols(Q, h * head_dim_, (h + 1) * head_dim_);
      Var Kh = slice_cols(K, h * head_dim_, (h + 1) * head_dim_);
      Var Vh = slice_cols(V, h * head_dim_, (h + 1) * head_dim_);
      Var scores = scale(matmul(Qh, transpose(Kh)), inv_sqrt);
      if (mask.defined()) scores = add(scores, m);
      outs.push_back(matmul(softmax(scores, 1), Vh));
    }
    return o.forward(concat_cols(outs));
  }

  void collect(std::vector<Parameter*>& out) {
    q.collect(out);
    k.collect(out);
    v.collect(out);
    o.collect(out);
  }

  std::size_t heads_ = 0, head_dim_ = 0;
  Linear q, k, v, o;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(const std::string& name, std::size_t dim, std::size_t mult, Rng& rng)
      : up(name + ".up", dim, dim * mult, rng), down(name + ".down", dim * mult, dim, rng) {}

  Var forward(const Var& x) { return down.forward(gelu(up.forward(x))); }

  void collect(std::vector<Parameter*>& out) {
    up.collect(out);
    down.collect(out);
  }

  Linear up, down;
};

// Pre-norm self-attention block: x += attn(LN(x)); x += ffn(LN(x)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(const std::string& name, std::size_t dim, std::size_t heads, std::size_t ffn_mult,
                   Rng& rng)
      : ln1(name + ".ln1", dim),
        attn(name + ".attn", dim, heads, rng),
        ln2(name + ".ln2", dim),
        ffn(name + ".ffn", dim, ffn_mult, rng) {}

  Var forward(const Var& x, const Tensor& mask = Tensor()) {
    Var normed = ln1.forward(x);
    Var h = add(x, attn.forward(normed, normed, mask));
    return add(h, ffn.forward(ln2.forward(h)));
  }

  void collect(std::vector<Parameter*>& out) {
    ln1.collect(out);
    attn.collect(out);
    ln2.collect(out);
    ffn.collect(out);
  }

  LayerNormP ln1;
  MultiHeadAttention attn;
  LayerNormP ln2;
  FeedForward ffn;
};

// Pre-norm cross-attention block: queries from x, keys/values from the other
// stream; both sides normalized by their own norms.
class CrossBlock {
 public:
  CrossBlock() = default;
  CrossBlock(const std::string& name, std::size_t dim, std::size_t heads, std::size_t ffn_mult,
             Rng& rng)
      : ln_q(name + ".lnq", dim),
        ln_kv(name + ".lnkv", dim),
        attn(name + ".attn", dim, heads, rng),
        ln2(name + ".ln2", dim),
        ffn(name + ".ffn", dim, ffn_mult, rng) {}

  Var forward(const Var& x, const Var& other, const Tensor& mask = Tensor()) {
    Var h = add(x, attn.forward(ln_q.forward(x), ln_kv.forward(other), mask));
    return add(h, ffn.forward(ln2.forward(h)));
  }

  void collect(std::vector<Parameter*>& out) {
    ln_q.collect(out);
    ln_kv.collect(out);
    attn.collect(out);
    ln2.collect(out);
    ffn.collect(out);
  }

  LayerNormP ln_q, ln_kv;
  MultiHeadAttention attn;
  LayerNormP ln2;
  FeedForward ffn;
};

}  // namespace mvgpt
