#pragma once

#include <string>
#include <vector>

#include "mvgpt/autodiff.hpp"
#include "mvgpt/config.hpp"
#include "mvgpt/layers.hpp"
#include "mvgpt/tokenizer.hpp"

namespace mvgpt {

// Frame stack with pixels in [0,1], laid out [frame][y][x][channel].
struct FrameClip {
  std::size_t frames = 0, height = 0, width = 0, channels = 0;
  std::vector<double> pixels;
  double frame_rate = 1.0;

  FrameClip() = default;
  FrameClip(std::size_t f, std::size_t h, std::size_t w, std::size_t c, double rate = 1.0)
      : frames(f), height(h), width(w), channels(c), pixels(f * h * w * c, 0.0), frame_rate(rate) {}

  double& px(std::size_t f, std::size_t y, std::size_t x, std::size_t c) {
    return pixels[((f * height + y) * width + x) * channels + c];
  }
  double px(std::size_t f, std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[((f * height + y) * width + x) * channels + c];
  }
};

inline void validate_clip(const FrameClip& clip) {
  if (clip.frames == 0) throw std::invalid_argument("clip: no frames");
  if (clip.pixels.size() != clip.frames * clip.height * clip.width * clip.channels) {
    throw std::invalid_argument("clip: pixel buffer size does not match dimensions");
  }
  for (double p : clip.pixels) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw std::invalid_argument("clip: pixel value " + std::to_string(p) + " outside [0,1]");
    }
  }
}

// Tubelet front end plus the factorized spatial/temporal transformer. The
// spatial transformer runs per temporal group over S tokens and a spatial CLS;
// the temporal transformer runs over the T group summaries and a temporal CLS,
// so the output is always (T+1) x d.
class VisualEncoder {
 public:
  VisualEncoder() = default;
  VisualEncoder(const Config& cfg, Rng& rng)
      : cfg_(cfg),
        spatial_tokens_((cfg.frame_h / cfg.tubelet_h) * (cfg.frame_w / cfg.tubelet_w)),
        max_groups_(cfg.max_frames / cfg.tubelet_t),
        tube_proj("vis.tube", cfg.tubelet_h * cfg.tubelet_w * cfg.tubelet_t * cfg.frame_channels,
                  cfg.dim, rng),
        spatial_pos("vis.spos", ParamKind::Embedding, normal_init({spatial_tokens_, cfg.dim}, rng)),
        spatial_cls("vis.scls", ParamKind::Embedding, normal_init({1, cfg.dim}, rng)),
        temporal_pos("vis.tpos", ParamKind::Embedding, normal_init({max_groups_, cfg.dim}, rng)),
        temporal_cls("vis.tcls", ParamKind::Embedding, normal_init({1, cfg.dim}, rng)),
        spatial_final("vis.sfinal", cfg.dim),
        temporal_final("vis.tfinal", cfg.dim) {
    for (std::size_t i = 0; i < cfg.spatial_layers; ++i) {
      spatial_blocks.emplace_back("vis.s" + std::to_string(i), cfg.dim, cfg.heads, cfg.ffn_mult, rng);
    }
    for (std::size_t i = 0; i < cfg.temporal_layers; ++i) {
      temporal_blocks.emplace_back("vis.t" + std::to_string(i), cfg.dim, cfg.heads, cfg.ffn_mult,
                                   rng);
    }
  }

  std::size_t spatial_tokens() const { return spatial_tokens_; }

  // [T*S, d] token embeddings, groups in temporal order; spatial position
  // embeddings repeat across groups.
  Var tubelet_embed(Tape& tape, const FrameClip& clip) {
    validate_clip(clip);
    const std::size_t th = cfg_.tubelet_h, tw = cfg_.tubelet_w, tt = cfg_.tubelet_t;
    if (clip.frames % tt != 0) {
      throw std::invalid_argument("tubelet: frame count " + std::to_string(clip.frames) +
                                  " not divisible by temporal extent " + std::to_string(tt));
    }
    if (clip.height % th != 0) {
      throw std::invalid_argument("tubelet: height " + std::to_string(clip.height) +
                                  " not divisible by " + std::to_string(th));
    }
    if (clip.width % tw != 0) {
      throw std::invalid_argument("tubelet: width " + std::to_string(clip.width) +
                                  " not divisible by " + std::to_string(tw));
    }
    if (clip.channels != cfg_.frame_channels) {
      throw std::invalid_argument("tubelet: clip has " + std::to_string(clip.channels) +
                                  " channels, config expects " + std::to_string(cfg_.frame_channels));
    }
    const std::size_t gy = clip.height / th, gx = clip.width / tw;
    const std::size_t S = gy * gx, T = clip.frames / tt;
    if (S != spatial_tokens_) {
      throw std::invalid_argument("tubelet: clip yields " + std::to_string(S) +
                                  " spatial tokens, encoder built for " +
                                  std::to_string(spatial_tokens_));
    }
    if (T > max_groups_) {
      throw std::invalid_argument("tubelet: clip spans " + std::to_string(T) +
                                  " temporal groups, max_frames allows " +
                                  std::to_string(max_groups_));
    }

    // flatten every tube in (t, y, x, channel) order
    const std::size_t tube_dim = th * tw * tt * clip.channels;
    Tensor flat(Shape{T * S, tube_dim});
    for (std::size_t g = 0; g < T; ++g) {
      for (std::size_t sy = 0; sy < gy; ++sy) {
        for (std::size_t sx = 0; sx < gx; ++sx) {
          const std::size_t row = g * S + sy * gx + sx;
          std::size_t idx = 0;
          for (std::size_t f = 0; f < tt; ++f)
            for (std::size_t y = 0; y < th; ++y)
              for (std::size_t x = 0; x < tw; ++x)
                for (std::size_t c = 0; c < clip.channels; ++c)
                  flat(row, idx++) = clip.px(g * tt + f, sy * th + y, sx * tw + x, c);
        }
      }
    }
    Var proj = tube_proj.forward(tape.constant(flat));
    // spatial position embedding tiled over the T groups
    std::vector<int> pos_ids(T * S);
    for (std::size_t g = 0; g < T; ++g)
      for (std::size_t s = 0; s < S; ++s) pos_ids[g * S + s] = static_cast<int>(s);
    return add(proj, embedding_rows(tape.param(spatial_pos), pos_ids));
  }

  // tokens: [T*S, d] -> [(T+1), d]
  Var encode_tokens(Var tokens, std::size_t T) {
    if (T == 0 || tokens.rows() % T != 0 || tokens.rows() / T != spatial_tokens_) {
      throw std::invalid_argument("encode_visual: token rows " + std::to_string(tokens.rows()) +
                                  " do not factor into " + std::to_string(T) + " groups of " +
                                  std::to_string(spatial_tokens_));
    }
    Tape& tape = tokens.tape();
    std::vector<Var> summaries;
    summaries.reserve(T + 1);
    summaries.push_back(tape.param(temporal_cls));
    for (std::size_t g = 0; g < T; ++g) {
      Var group = slice_rows(tokens, g * spatial_tokens_, (g + 1) * spatial_tokens_);
      Var x = concat_rows(tape.param(spatial_cls), group);
      for (auto& blk : spatial_blocks) x = blk.forward(x);
      x = spatial_final.forward(x);
      summaries.push_back(slice_rows(x, 0, 1));  // non-CLS spatial outputs are discarded
    }
    // temporal position embeddings on the group summaries, none on the CLS
    std::vector<int> pos_ids(T);
    for (std::size_t g = 0; g < T; ++g) pos_ids[g] = static_cast<int>(g);
    Var groups = concat_rows(std::vector<Var>(summaries.begin() + 1, summaries.end()));
    groups = add(groups, embedding_rows(tokens.tape().param(temporal_pos), pos_ids));
    Var x = concat_rows(summaries[0], groups);
    for (auto& blk : temporal_blocks) x = blk.forward(x);
    return temporal_final.forward(x);
  }

  Var forward(Tape& tape, const FrameClip& clip) {
    Var tokens = tubelet_embed(tape, clip);
    return encode_tokens(tokens, clip.frames / cfg_.tubelet_t);
  }

  void collect(std::vector<Parameter*>& out) {
    tube_proj.collect(out);
    out.push_back(&spatial_pos);
    out.push_back(&spatial_cls);
    out.push_back(&temporal_pos);
    out.push_back(&temporal_cls);
    for (auto& b : spatial_blocks) b.collect(out);
    spatial_final.collect(out);
    for (auto& b : temporal_blocks) b.collect(out);
    temporal_final.collect(out);
  }

  Config cfg_;
  std::size_t spatial_tokens_ = 0, max_groups_ = 0;
  Linear tube_proj;
  Parameter spatial_pos, spatial_cls, temporal_pos, temporal_cls;
  std::vector<TransformerBlock> spatial_blocks;
  std::vector<TransformerBlock> temporal_blocks;
  LayerNormP spatial_final, temporal_final;
};

// BERT-style bidirectional text encoder. PAD keys are masked out of attention
// and PAD rows are zeroed in the returned features.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const std::string& name, const Config& cfg, std::size_t layers, Rng& rng)
      : max_len_(cfg.max_text_len),
        tok_emb(name + ".tok", ParamKind::Embedding, normal_init({cfg.vocab_size, cfg.dim}, rng)),
        pos_emb(name + ".pos", ParamKind::Embedding, normal_init({cfg.max_text_len, cfg.dim}, rng)),
        final_ln(name + ".final", cfg.dim) {
    if (cfg.vocab_size < tok::kNumSpecial) {
      throw std::invalid_argument("text encoder: vocab_size must cover the special tokens");
    }
    for (std::size_t i = 0; i < layers; ++i) {
      blocks.emplace_back(name + ".l" + std::to_string(i), cfg.dim, cfg.heads, cfg.ffn_mult, rng);
    }
  }

  Var forward(Tape& tape, const TokenStream& stream) {
    const std::size_t n = stream.ids.size();
    if (n == 0) throw std::invalid_argument("encode_text: empty stream");
    if (n > max_len_) {
      throw std::invalid_argument("encode_text: stream length " + std::to_string(n) +
                                  " exceeds max_text_len " + std::to_string(max_len_));
    }
    if (stream.pad_mask.size() != n) {
      throw std::invalid_argument("encode_text: pad mask length mismatch");
    }
    bool any_real = false;
    for (bool b : stream.pad_mask) any_real = any_real || b;
    if (!any_real) throw std::invalid_argument("encode_text: stream has no real tokens");

    Var x = add(embedding_rows(tape.param(tok_emb), stream.ids),
                slice_rows(tape.param(pos_emb), 0, n));
    const Tensor mask = key_pad_mask(n, stream.pad_mask);
    for (auto& blk : blocks) x = blk.forward(x, mask);
    x = final_ln.forward(x);
    std::vector<double> keep(n);
    for (std::size_t i = 0; i < n; ++i) keep[i] = stream.pad_mask[i] ? 1.0 : 0.0;
    return scale_rows(x, keep);
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&tok_emb);
    out.push_back(&pos_emb);
    for (auto& b : blocks) b.collect(out);
    final_ln.collect(out);
  }

  std::size_t max_len_ = 0;
  Parameter tok_emb, pos_emb;
  std::vector<TransformerBlock> blocks;
  LayerNormP final_ln;
};

}  // namespace mvgpt
