#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mvgpt/autodiff.hpp"
#include "mvgpt/config.hpp"
#include "mvgpt/layers.hpp"
#include "mvgpt/tokenizer.hpp"

namespace mvgpt {

struct DecoderOutput {
  Var logits;   // [token count, vocab]
  Var c_tilde;  // [context rows, d], feeds the masked-reconstruction head
  Var h_tilde;  // [token count, d]
};

struct Hypothesis {
  std::vector<int> ids;  // generated tokens, BOS excluded, EOS included when emitted
  double logp = 0.0;
  bool finished = false;
};

// Greedy decoding over any step function: step(prefix ids) -> logits over the
// vocabulary for the next token. First index wins ties.
template <typename StepFn>
std::vector<int> greedy_search(StepFn&& step, int eos_id, std::size_t max_len) {
  if (max_len < 1) throw std::invalid_argument("greedy_search: max_len must be at least 1");
  std::vector<int> out;
  while (out.size() < max_len) {
    const std::vector<double> logits = step(out);
    std::size_t best = 0;
    for (std::size_t v = 1; v < logits.size(); ++v) {
      if (logits[v] > logits[best]) best = v;
    }
    out.push_back(static_cast<int>(best));
    if (static_cast<int>(best) == eos_id) break;
  }
  return out;
}

// Beam search over log-probabilities. Finished hypotheses are ranked by
// logP / len^alpha (length includes EOS); the search stops once `beam`
// hypotheses have finished, which makes beam = 1 coincide with greedy. Ties
// break toward the lexicographically smaller token sequence.
template <typename StepFn>
std::vector<int> beam_search(StepFn&& step, int eos_id, std::size_t beam, std::size_t max_len,
                             double length_alpha) {
  if (beam < 1) throw std::invalid_argument("beam_search: beam must be at least 1");
  if (max_len < 1) throw std::invalid_argument("beam_search: max_len must be at least 1");

  auto ids_less = [](const std::vector<int>& a, const std::vector<int>& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
  };
  auto live_before = [&](const Hypothesis& a, const Hypothesis& b) {
    if (a.logp != b.logp) return a.logp > b.logp;
    return ids_less(a.ids, b.ids);
  };
  auto final_score = [&](const Hypothesis& h) {
    return h.logp / std::pow(static_cast<double>(h.ids.size()), length_alpha);
  };
  auto finished_before = [&](const Hypothesis& a, const Hypothesis& b) {
    const double sa = final_score(a), sb = final_score(b);
    if (sa != sb) return sa > sb;
    return ids_less(a.ids, b.ids);
  };

  std::vector<Hypothesis> live{{{}, 0.0, false}};
  std::vector<Hypothesis> finished;

  for (std::size_t depth = 0; depth < max_len && !live.empty(); ++depth) {
    std::vector<Hypothesis> candidates;
    for (const Hypothesis& h : live) {
      const std::vector<double> logits = step(h.ids);
      double mx = logits[0];
      for (double l : logits) mx = std::max(mx, l);
      double z = 0.0;
      for (double l : logits) z += std::exp(l - mx);
      const double logz = mx + std::log(z);
      for (std::size_t v = 0; v < logits.size(); ++v) {
        Hypothesis c = h;
        c.ids.push_back(static_cast<int>(v));
        c.logp += logits[v] - logz;
        c.finished = static_cast<int>(v) == eos_id;
        candidates.push_back(std::move(c));
      }
    }
    std::sort(candidates.begin(), candidates.end(), live_before);
    std::vector<Hypothesis> next_live;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      Hypothesis& c = candidates[i];
      if (c.finished) {
        // an EOS hypothesis only finishes when it ranks inside the beam;
        // a low-ranked EOS is pruned exactly like any other weak candidate
        if (i < beam) finished.push_back(std::move(c));
      } else if (next_live.size() < beam) {
        next_live.push_back(std::move(c));
      }
    }
    live = std::move(next_live);
    if (finished.size() >= beam) break;
  }

  if (!finished.empty()) {
    return std::min_element(finished.begin(), finished.end(), finished_before)->ids;
  }
  return std::min_element(live.begin(), live.end(), live_before)->ids;
}

// Single transformer over [context; generated] with a prefix mask: context
// rows see all real context (bidirectional, so C-tilde has right context for
// masked reconstruction), generated rows see real context plus their causal
// past. Context gets no fresh position embedding, only a segment embedding;
// the encoders already injected order.
class Decoder {
 public:
  Decoder() = default;
  Decoder(const Config& cfg, Rng& rng)
      : vocab_(cfg.vocab_size),
        max_positions_(std::max(cfg.max_gen_len, cfg.max_text_len) + 1),
        tied_(cfg.tie_output_proj),
        tok_emb("dec.tok", ParamKind::Embedding, normal_init({cfg.vocab_size, cfg.dim}, rng)),
        pos_emb("dec.pos", ParamKind::Embedding, normal_init({max_positions_, cfg.dim}, rng)),
        seg_ctx("dec.segc", ParamKind::Bias, Tensor(Shape{cfg.dim}, 0.0)),
        seg_gen("dec.segg", ParamKind::Bias, Tensor(Shape{cfg.dim}, 0.0)),
        final_ln("dec.final", cfg.dim),
        phi_b("dec.phi.b", ParamKind::Bias, Tensor(Shape{cfg.vocab_size}, 0.0)) {
    if (!tied_) {
      phi_w = Parameter("dec.phi.w", ParamKind::Weight, normal_init({cfg.dim, cfg.vocab_size}, rng));
    }
    for (std::size_t i = 0; i < cfg.decoder_layers; ++i) {
      blocks.emplace_back("dec.l" + std::to_string(i), cfg.dim, cfg.heads, cfg.ffn_mult, rng);
    }
  }

  // Prefix mask over n_c context rows followed by n_g generated rows.
  static Tensor prefix_mask(std::size_t n_c, const std::vector<bool>& ctx_real, std::size_t n_g) {
    const std::size_t n = n_c + n_g;
    Tensor m(Shape{n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const bool j_ctx = j < n_c;
        if (j_ctx) {
          if (!ctx_real[j]) m(i, j) = kMaskedOut;  // padded context row
        } else if (i < n_c) {
          m(i, j) = kMaskedOut;  // context never sees generated tokens
        } else if (j > i) {
          m(i, j) = kMaskedOut;  // causal within the generated span
        }
      }
    }
    return m;
  }

  DecoderOutput forward(Var context, const std::vector<bool>& context_mask,
                        const std::vector<int>& token_ids) {
    if (token_ids.empty() || (token_ids[0] != tok::kBos1 && token_ids[0] != tok::kBos2)) {
      throw std::invalid_argument("decoder: input must start with BOS1 or BOS2");
    }
    if (context.value().rank() != 2) throw std::invalid_argument("decoder: context must be rank-2");
    if (context_mask.size() != context.rows()) {
      throw std::invalid_argument("decoder: context mask length mismatch");
    }
    if (token_ids.size() > max_positions_) {
      throw std::invalid_argument("decoder: sequence length " + std::to_string(token_ids.size()) +
                                  " exceeds position table " + std::to_string(max_positions_));
    }
    Tape& tape = context.tape();
    const std::size_t n_c = context.rows(), n_g = token_ids.size();

    Var ctx = add_rowvec(context, tape.param(seg_ctx));
    Var gen = add(embedding_rows(tape.param(tok_emb), token_ids),
                  slice_rows(tape.param(pos_emb), 0, n_g));
    gen = add_rowvec(gen, tape.param(seg_gen));

    Var x = concat_rows(ctx, gen);
    const Tensor mask = prefix_mask(n_c, context_mask, n_g);
    for (auto& blk : blocks) x = blk.forward(x, mask);
    x = final_ln.forward(x);

    Var h_tilde = slice_rows(x, n_c, n_c + n_g);
    Var c_tilde = slice_rows(x, 0, n_c);
    return {project(h_tilde), c_tilde, h_tilde};
  }

  // Shared output projection, also used by the masked-reconstruction head.
  Var project(const Var& h) {
    Tape& tape = h.tape();
    Var w = tied_ ? transpose(tape.param(tok_emb)) : tape.param(phi_w);
    return add_rowvec(matmul(h, w), tape.param(phi_b));
  }

  // Context-only pass: no BOS, no generated rows; the transformer just
  // contextualizes the context. Used by the pooled classification head.
  Var encode_context_only(Var context, const std::vector<bool>& context_mask) {
    if (context.value().rank() != 2) throw std::invalid_argument("decoder: context must be rank-2");
    if (context_mask.size() != context.rows()) {
      throw std::invalid_argument("decoder: context mask length mismatch");
    }
    Tape& tape = context.tape();
    Var x = add_rowvec(context, tape.param(seg_ctx));
    const Tensor mask = prefix_mask(context.rows(), context_mask, 0);
    for (auto& blk : blocks) x = blk.forward(x, mask);
    return final_ln.forward(x);
  }

  // step closure: run the transformer on BOS + prefix, read the last logits row
  auto step_fn(const Tensor& context, const std::vector<bool>& context_mask, int bos) {
    return [this, context, context_mask, bos](const std::vector<int>& prefix) {
      std::vector<int> ids{bos};
      ids.insert(ids.end(), prefix.begin(), prefix.end());
      Tape tape;
      DecoderOutput o = forward(tape.constant(context), context_mask, ids);
      const Tensor& logits = o.logits.value();
      const std::size_t last = logits.dim(0) - 1;
      std::vector<double> row(vocab_);
      for (std::size_t v = 0; v < vocab_; ++v) row[v] = logits(last, v);
      return row;
    };
  }

  std::vector<int> greedy_generate(const Tensor& context, const std::vector<bool>& context_mask,
                                   int bos, std::size_t max_len) {
    return greedy_search(step_fn(context, context_mask, bos), tok::kEos, max_len);
  }

  std::vector<int> beam_generate(const Tensor& context, const std::vector<bool>& context_mask,
                                 int bos, std::size_t beam, std::size_t max_len,
                                 double length_alpha) {
    return beam_search(step_fn(context, context_mask, bos), tok::kEos, beam, max_len, length_alpha);
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&tok_emb);
    out.push_back(&pos_emb);
    out.push_back(&seg_ctx);
    out.push_back(&seg_gen);
    for (auto& b : blocks) b.collect(out);
    final_ln.collect(out);
    if (!tied_) out.push_back(&phi_w);
    out.push_back(&phi_b);
  }

  std::size_t vocab_ = 0, max_positions_ = 0;
  bool tied_ = false;
  Parameter tok_emb, pos_emb, seg_ctx, seg_gen;
  std::vector<TransformerBlock> blocks;
  LayerNormP final_ln;
  Parameter phi_w, phi_b;
};

}  // namespace mvgpt
