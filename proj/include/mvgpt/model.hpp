#pragma once
// Full multimodal assembly: text encoder, visual encoder, co-attention fusion,
// and the generative decoder, plus the heads used only during pretraining
// (contrastive video/text projections and a separately trained target-text
// encoder). Construction order is fixed so a given seed always produces the
// same weights.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvgpt/autodiff.hpp"
#include "mvgpt/config.hpp"
#include "mvgpt/decoder.hpp"
#include "mvgpt/encoders.hpp"
#include "mvgpt/fusion.hpp"
#include "mvgpt/rng.hpp"
#include "mvgpt/tokenizer.hpp"

namespace mvgpt {

// One training item: a clip, the transcript aligned with it, and the future
// utterance the model learns to generate.
struct TrainingExample {
  FrameClip clip;
  std::string utterance;
  std::string target;
};

class Model {
 public:
  Config cfg;
  Vocabulary vocab;
  TextEncoder text_enc;
  VisualEncoder vis_enc;
  CoAttention fusion;
  Decoder decoder;
  // Contrastive heads. The target side gets its own shallow encoder so the
  // generation pathway is not asked to double as a retrieval embedding.
  TextEncoder nce_text_enc;
  Linear nce_video_proj;
  Linear nce_text_proj;

  Model() = default;

  Model(const Config& c, const Vocabulary& v, Rng& rng)
      : cfg(c),
        vocab(v),
        text_enc("enc", with_vocab(c, v), c.text_layers, rng),
        vis_enc(with_vocab(c, v), rng),
        fusion("fuse", c.fusion_layers, c.dim, c.heads, c.ffn_mult, rng),
        decoder(with_vocab(c, v), rng),
        nce_text_enc("nce", with_vocab(c, v), 2, rng),
        nce_video_proj("nce.vproj", c.dim, c.dim, rng),
        nce_text_proj("nce.tproj", c.dim, c.dim, rng) {
    cfg.vocab_size = vocab.size();
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    text_enc.collect(out);
    vis_enc.collect(out);
    fusion.collect(out);
    decoder.collect(out);
    nce_text_enc.collect(out);
    nce_video_proj.collect(out);
    nce_text_proj.collect(out);
    return out;
  }

  // Fused context fed to the decoder: text rows first, then visual rows.
  struct Context {
    Var features;
    std::vector<bool> mask;
    std::size_t text_rows = 0;
    Var fused_visual;  // visual stream after fusion, for the contrastive head
  };

  Context encode_context(Tape& tape, const FrameClip& clip, const TokenStream& text) {
    Var e = text_enc.forward(tape, text);
    Var v = vis_enc.forward(tape, clip);
    FusedFeatures fused = fusion.forward(e, text.pad_mask, v);
    Context ctx;
    ctx.features = concat_rows(fused.e_hat, fused.v_hat);
    ctx.mask = text.pad_mask;
    ctx.mask.resize(text.length() + fused.v_hat.rows(), true);
    ctx.text_rows = text.length();
    ctx.fused_visual = fused.v_hat;
    return ctx;
  }

  // Conditioning text leaves one slot for the task prefix token.
  TokenStream encode_conditioning(const std::string& text) const {
    return encode(vocab, text, std::nullopt, false, cfg.max_text_len - 1);
  }

  // Generation target: ends with EOS, budgeted so [BOS] + body still fits the
  // decoder position table.
  TokenStream encode_target(const std::string& text) const {
    return encode(vocab, text, std::nullopt, true, cfg.max_text_len);
  }

  // Pooled fused-visual rows, projected into the shared contrastive space.
  Var nce_video_embedding(const Context& ctx) {
    return nce_video_proj.forward(mean_rows(ctx.fused_visual));
  }

  // Target text through the dedicated encoder, mean-pooled over real tokens.
  Var nce_text_embedding(Tape& tape, const TokenStream& target_body) {
    Var enc = nce_text_enc.forward(tape, target_body);
    return nce_text_proj.forward(mean_rows(enc, target_body.pad_mask));
  }

 private:
  // Member encoders read vocab_size from the config; fill it in before any
  // embedding table is sized.
  static Config with_vocab(Config c, const Vocabulary& v) {
    c.vocab_size = v.size();
    return c;
  }
};

}  // namespace mvgpt
