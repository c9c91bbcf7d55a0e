#pragma once
// Pretraining objectives. A triplet (clip, utterance, target) is trained in
// both orientations: forward generates the target from (clip, utterance),
// backward generates the utterance from (clip, target). Each orientation has
// its own prefix pair so the decoder knows which way it is running:
// forward = CLS1 on the encoder side, BOS1 on the generation side;
// backward = CLS2 / BOS2. Finetuning later mixes CLS1 with BOS2.
//
// On top of the two generation losses sit two masked-reconstruction losses
// (the masked stream is read back off the decoder's contextualized rows, not
// the encoder's) and a batch-level contrastive loss between pooled fused
// visual rows and separately encoded target text.

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvgpt/autodiff.hpp"
#include "mvgpt/model.hpp"
#include "mvgpt/rng.hpp"
#include "mvgpt/tokenizer.hpp"

namespace mvgpt {

enum class Direction { Forward, Backward };

inline int cls_for(Direction d) { return d == Direction::Forward ? tok::kCls1 : tok::kCls2; }
inline int bos_for(Direction d) { return d == Direction::Forward ? tok::kBos1 : tok::kBos2; }

// Which prefix tokens a generation pass actually used. Lets callers verify a
// pass was wired in the intended token configuration without digging through
// the graph.
struct PassTrace {
  int encoder_prefix = -1;
  int decoder_bos = -1;
};

inline TokenStream with_prefix(int prefix_id, const TokenStream& body) {
  TokenStream s;
  s.ids.reserve(body.ids.size() + 1);
  s.pad_mask.reserve(body.ids.size() + 1);
  s.ids.push_back(prefix_id);
  s.pad_mask.push_back(true);
  s.ids.insert(s.ids.end(), body.ids.begin(), body.ids.end());
  s.pad_mask.insert(s.pad_mask.end(), body.pad_mask.begin(), body.pad_mask.end());
  return s;
}

// ---------------------------------------------------------------------------
// generation loss

// Mean NLL of the target sequence (EOS included) given the fused context.
// Decoder input is [BOS, w_1 .. w_{n-1}]; row i predicts target id i.
inline Var decoder_nll(Model& m, const Model::Context& ctx, int bos, const TokenStream& target) {
  if (target.ids.empty()) throw std::invalid_argument("generation loss: empty target");
  if (target.ids.back() != tok::kEos) {
    throw std::invalid_argument("generation loss: target must end with EOS");
  }
  std::vector<int> dec_in;
  dec_in.reserve(target.ids.size());
  dec_in.push_back(bos);
  dec_in.insert(dec_in.end(), target.ids.begin(), target.ids.end() - 1);
  DecoderOutput out = m.decoder.forward(ctx.features, ctx.mask, dec_in);
  return cross_entropy(out.logits, target.ids);
}

inline Var generation_loss(Model& m, Tape& tape, const FrameClip& clip,
                           const TokenStream& conditioning, const TokenStream& target,
                           Direction dir, PassTrace* trace = nullptr) {
  const int cls = cls_for(dir), bos = bos_for(dir);
  Model::Context ctx = m.encode_context(tape, clip, with_prefix(cls, conditioning));
  if (trace) {
    trace->encoder_prefix = cls;
    trace->decoder_bos = bos;
  }
  return decoder_nll(m, ctx, bos, target);
}

inline double generation_loss(Model& m, const FrameClip& clip, const TokenStream& conditioning,
                              const TokenStream& target, Direction dir,
                              PassTrace* trace = nullptr) {
  Tape tape;
  return generation_loss(m, tape, clip, conditioning, target, dir, trace).value().item();
}

// ---------------------------------------------------------------------------
// finetune captioning

// Caption finetuning keeps the forward sentinel on the encoder input but
// starts generation from the backward BOS, so both pretrained start rows stay
// in play: CLS1 fed forward, BOS2 kicking off decoding.
inline Var finetune_loss(Model& m, Tape& tape, const FrameClip& clip,
                         const TokenStream& conditioning, const TokenStream& target,
                         PassTrace* trace = nullptr) {
  Model::Context ctx = m.encode_context(tape, clip, with_prefix(tok::kCls1, conditioning));
  if (trace) {
    trace->encoder_prefix = tok::kCls1;
    trace->decoder_bos = tok::kBos2;
  }
  return decoder_nll(m, ctx, tok::kBos2, target);
}

inline Var finetune_batch(Model& m, Tape& tape, const std::vector<TrainingExample>& batch,
                          PassTrace* trace = nullptr) {
  if (batch.empty()) throw std::invalid_argument("empty finetune batch");
  Var sum;
  for (const TrainingExample& ex : batch) {
    if (ex.utterance.empty()) throw std::invalid_argument("finetune: empty utterance");
    if (ex.target.empty()) throw std::invalid_argument("finetune: empty target");
    Var nll = finetune_loss(m, tape, ex.clip, m.encode_conditioning(ex.utterance),
                            m.encode_target(ex.target), trace);
    sum = sum.defined() ? add(sum, nll) : nll;
  }
  return scale(sum, 1.0 / static_cast<double>(batch.size()));
}

// Decode a caption for a clip. `cls`/`bos` pick the token configuration;
// beam = 0 requests greedy search, anything else runs beam search.
inline std::vector<int> generate_ids(Model& m, const FrameClip& clip,
                                     const TokenStream& conditioning, int cls, int bos,
                                     std::size_t beam, std::size_t max_len, double length_alpha) {
  Tape tape;
  Model::Context ctx = m.encode_context(tape, clip, with_prefix(cls, conditioning));
  const Tensor context = ctx.features.value();
  if (beam == 0) return m.decoder.greedy_generate(context, ctx.mask, bos, max_len);
  return m.decoder.beam_generate(context, ctx.mask, bos, beam, max_len, length_alpha);
}

inline std::vector<int> caption_greedy(Model& m, const FrameClip& clip,
                                       const TokenStream& conditioning, std::size_t max_len) {
  return generate_ids(m, clip, conditioning, tok::kCls1, tok::kBos2, 0, max_len, 0.0);
}

inline std::vector<int> caption_beam(Model& m, const FrameClip& clip,
                                     const TokenStream& conditioning, std::size_t beam,
                                     std::size_t max_len, double length_alpha) {
  if (beam == 0) throw std::invalid_argument("caption_beam: beam must be positive");
  return generate_ids(m, clip, conditioning, tok::kCls1, tok::kBos2, beam, max_len, length_alpha);
}

// ---------------------------------------------------------------------------
// masked reconstruction

struct MaskedStream {
  TokenStream stream;           // corrupted ids, original pad mask
  std::vector<int> labels;      // original ids at every position
  std::vector<bool> is_masked;  // positions carrying a reconstruction target
};

// BERT-style corruption over non-special, non-pad positions: each is selected
// with probability `rate` (at least one forced); selected positions become
// MASK 80% of the time, a random word 10%, and stay unchanged 10%. Draw order
// is fixed: one Bernoulli per candidate, then the forced pick if needed, then
// per selected position the bucket draw and (only for the random bucket) the
// replacement draw.
inline MaskedStream mask_for_mlm(const TokenStream& stream, double rate, Rng& rng,
                                 std::size_t vocab_size) {
  if (!(rate > 0.0 && rate < 1.0)) {
    throw std::invalid_argument("mask rate must lie strictly between 0 and 1");
  }
  if (vocab_size <= static_cast<std::size_t>(tok::kNumSpecial)) {
    throw std::invalid_argument("masking needs at least one non-special word in the vocabulary");
  }
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < stream.ids.size(); ++i) {
    if (stream.pad_mask[i] && !tok::is_special(stream.ids[i])) candidates.push_back(i);
  }
  if (candidates.empty()) throw std::invalid_argument("stream has no maskable tokens");

  MaskedStream out;
  out.stream = stream;
  out.labels = stream.ids;
  out.is_masked.assign(stream.ids.size(), false);

  std::vector<std::size_t> selected;
  for (std::size_t i : candidates) {
    if (rng.bernoulli(rate)) selected.push_back(i);
  }
  if (selected.empty()) selected.push_back(candidates[rng.uniform_int(candidates.size())]);

  const std::size_t words = vocab_size - static_cast<std::size_t>(tok::kNumSpecial);
  for (std::size_t i : selected) {
    out.is_masked[i] = true;
    const double r = rng.uniform();
    if (r < 0.8) {
      out.stream.ids[i] = tok::kMask;
    } else if (r < 0.9) {
      out.stream.ids[i] = tok::kNumSpecial + static_cast<int>(rng.uniform_int(words));
    }  // else: keep the original id, label still applies
  }
  return out;
}

// Reconstruction loss read off the decoder side: the corrupted stream goes
// through the full encode+fuse path, the decoder runs with a lone BOS row,
// and the contextualized context rows at masked text positions are pushed
// through the shared output projection. Generation-side rows carry no targets,
// so they get zero gradient from this loss.
inline Var mlm_d_loss(Model& m, Tape& tape, const FrameClip& clip, const MaskedStream& masked,
                      Direction dir) {
  bool any = false;
  for (bool b : masked.is_masked) any |= b;
  if (!any) throw std::invalid_argument("masked stream has no masked positions");
  if (masked.labels.size() != masked.stream.ids.size() ||
      masked.is_masked.size() != masked.stream.ids.size()) {
    throw std::invalid_argument("masked stream fields disagree on length");
  }
  Model::Context ctx = m.encode_context(tape, clip, masked.stream);
  DecoderOutput out = m.decoder.forward(ctx.features, ctx.mask, {bos_for(dir)});
  Var text_rows = slice_rows(out.c_tilde, 0, ctx.text_rows);
  Var logits = m.decoder.project(text_rows);
  std::vector<bool> ignore(ctx.text_rows);
  for (std::size_t i = 0; i < ctx.text_rows; ++i) ignore[i] = !masked.is_masked[i];
  return cross_entropy(logits, masked.labels, ignore);
}

// ---------------------------------------------------------------------------
// contrastive loss

// Symmetric in-batch InfoNCE over L2-normalized rows. Row i of each side is a
// positive pair; everything else in the batch is a negative. With a single
// row the softmax is degenerate and the loss is exactly zero.
inline Var bi_nce_loss(const Var& video_emb, const Var& text_emb, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("contrastive temperature must be positive");
  if (video_emb.rows() != text_emb.rows() || video_emb.cols() != text_emb.cols()) {
    throw std::invalid_argument("contrastive sides disagree: " + shape_str(video_emb.shape()) +
                                " vs " + shape_str(text_emb.shape()));
  }
  Var vn = l2_normalize_rows(video_emb);
  Var tn = l2_normalize_rows(text_emb);
  Var sim = scale(matmul(vn, transpose(tn)), 1.0 / temperature);
  std::vector<int> diag(video_emb.rows());
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = static_cast<int>(i);
  Var v2t = cross_entropy(sim, diag);
  Var t2v = cross_entropy(transpose(sim), diag);
  return scale(add(v2t, t2v), 0.5);
}

// ---------------------------------------------------------------------------
// full pretraining step

struct LossReport {
  double fg = 0.0;     // forward generation
  double bg = 0.0;     // backward generation
  double mlm_u = 0.0;  // masked reconstruction of the utterance
  double mlm_w = 0.0;  // masked reconstruction of the target
  double nce = 0.0;    // unweighted contrastive term (batch-level, both orientations)
  double total = 0.0;  // fg + bg + mlm_u + mlm_w, in that order
};

// Per-item graph nodes. Undefined Vars mean the term is disabled in config.
struct PretrainItemVars {
  Var fg, bg, mlm_u, mlm_w;
  Var total;
  Var video_fwd, text_fwd;  // contrastive rows for the forward orientation
  Var video_bwd, text_bwd;
};

namespace detail {
inline void accumulate(Var& total, const Var& term) {
  total = total.defined() ? add(total, term) : term;
}
}  // namespace detail

inline PretrainItemVars pretrain_item(Model& m, Tape& tape, const TrainingExample& ex,
                                      Rng& mask_rng) {
  const Config& cfg = m.cfg;
  if (!(cfg.use_fg || cfg.use_bg || cfg.use_mlm_u || cfg.use_mlm_w)) {
    throw std::invalid_argument("no per-item pretraining objectives enabled");
  }
  TokenStream u_body = m.encode_conditioning(ex.utterance);
  TokenStream w_body = m.encode_conditioning(ex.target);
  if (u_body.ids.empty()) throw std::invalid_argument("pretrain item: empty utterance");
  if (w_body.ids.empty()) throw std::invalid_argument("pretrain item: empty target");

  PretrainItemVars out;
  const bool need_fwd_ctx = cfg.use_fg || cfg.use_nce;
  const bool need_bwd_ctx = cfg.use_bg || cfg.use_nce;

  if (need_fwd_ctx) {
    Model::Context ctx = m.encode_context(tape, ex.clip, with_prefix(tok::kCls1, u_body));
    if (cfg.use_fg) out.fg = decoder_nll(m, ctx, tok::kBos1, m.encode_target(ex.target));
    if (cfg.use_nce) {
      out.video_fwd = m.nce_video_embedding(ctx);
      out.text_fwd = m.nce_text_embedding(tape, w_body);
    }
  }
  if (need_bwd_ctx) {
    Model::Context ctx = m.encode_context(tape, ex.clip, with_prefix(tok::kCls2, w_body));
    if (cfg.use_bg) out.bg = decoder_nll(m, ctx, tok::kBos2, m.encode_target(ex.utterance));
    if (cfg.use_nce) {
      out.video_bwd = m.nce_video_embedding(ctx);
      out.text_bwd = m.nce_text_embedding(tape, u_body);
    }
  }
  if (cfg.use_mlm_u) {
    MaskedStream masked =
        mask_for_mlm(with_prefix(tok::kCls1, u_body), cfg.mask_rate, mask_rng, m.vocab.size());
    out.mlm_u = mlm_d_loss(m, tape, ex.clip, masked, Direction::Forward);
  }
  if (cfg.use_mlm_w) {
    MaskedStream masked =
        mask_for_mlm(with_prefix(tok::kCls2, w_body), cfg.mask_rate, mask_rng, m.vocab.size());
    out.mlm_w = mlm_d_loss(m, tape, ex.clip, masked, Direction::Backward);
  }

  if (out.fg.defined()) detail::accumulate(out.total, out.fg);
  if (out.bg.defined()) detail::accumulate(out.total, out.bg);
  if (out.mlm_u.defined()) detail::accumulate(out.total, out.mlm_u);
  if (out.mlm_w.defined()) detail::accumulate(out.total, out.mlm_w);
  return out;
}

// Batch loss: mean of item totals, plus the weighted contrastive term applied
// once per orientation across the batch. `nce` is reported unweighted so the
// weighting itself stays visible: loss == mean + nce_weight * nce.
struct BatchVars {
  Var loss;
  Var nce;  // undefined when the contrastive term is disabled
  std::vector<PretrainItemVars> items;
};

inline BatchVars pretrain_batch(Model& m, Tape& tape, const std::vector<TrainingExample>& batch,
                                Rng& mask_rng) {
  if (batch.empty()) throw std::invalid_argument("empty pretraining batch");
  BatchVars out;
  Var sum;
  for (const TrainingExample& ex : batch) {
    out.items.push_back(pretrain_item(m, tape, ex, mask_rng));
    detail::accumulate(sum, out.items.back().total);
  }
  out.loss = scale(sum, 1.0 / static_cast<double>(batch.size()));
  if (m.cfg.use_nce) {
    std::vector<Var> vf, tf, vb, tb;
    for (const PretrainItemVars& it : out.items) {
      vf.push_back(it.video_fwd);
      tf.push_back(it.text_fwd);
      vb.push_back(it.video_bwd);
      tb.push_back(it.text_bwd);
    }
    Var fwd = bi_nce_loss(concat_rows(vf), concat_rows(tf), m.cfg.nce_temperature);
    Var bwd = bi_nce_loss(concat_rows(vb), concat_rows(tb), m.cfg.nce_temperature);
    out.nce = add(fwd, bwd);
    out.loss = add(out.loss, scale(out.nce, m.cfg.nce_weight));
  }
  return out;
}

// Scalar report for a single triplet. No contrastive term here: with one item
// it is identically zero, and in training it is applied at batch level.
inline LossReport pretrain_loss(Model& m, const TrainingExample& ex, Rng& mask_rng) {
  Tape tape;
  PretrainItemVars vars = pretrain_item(m, tape, ex, mask_rng);
  LossReport r;
  if (vars.fg.defined()) r.fg = vars.fg.value().item();
  if (vars.bg.defined()) r.bg = vars.bg.value().item();
  if (vars.mlm_u.defined()) r.mlm_u = vars.mlm_u.value().item();
  if (vars.mlm_w.defined()) r.mlm_w = vars.mlm_w.value().item();
  r.total = vars.total.value().item();
  return r;
}

// ---------------------------------------------------------------------------
// pooled classification head

// Discriminative finetuning mode: the decoder runs context-only (no BOS row
// at all), its contextualized rows are mean-pooled over real positions, and a
// two-layer head maps the pooled vector to class logits.
class PooledClassifier {
 public:
  PooledClassifier() = default;
  PooledClassifier(const Config& cfg, std::size_t num_classes, Rng& rng)
      : hidden("head.hidden", cfg.dim, cfg.dim, rng), out("head.out", cfg.dim, num_classes, rng) {}

  Var logits(Model& m, Tape& tape, const FrameClip& clip, const TokenStream& body) {
    Model::Context ctx = m.encode_context(tape, clip, with_prefix(tok::kCls1, body));
    Var c_tilde = m.decoder.encode_context_only(ctx.features, ctx.mask);
    Var pooled = mean_rows(c_tilde, ctx.mask);
    return out.forward(gelu(hidden.forward(pooled)));
  }

  void collect(std::vector<Parameter*>& params) {
    hidden.collect(params);
    out.collect(params);
  }

  Linear hidden, out;
};

inline std::size_t pooled_classify(Model& m, PooledClassifier& head, const FrameClip& clip,
                                   const TokenStream& body) {
  Tape tape;
  Var lg = head.logits(m, tape, clip, body);
  auto row = lg.value().data();
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

}  // namespace mvgpt
