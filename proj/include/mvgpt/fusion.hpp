#pragma once

#include <string>
#include <vector>

#include "mvgpt/autodiff.hpp"
#include "mvgpt/layers.hpp"

namespace mvgpt {

struct FusedFeatures {
  Var e_hat;  // [N_x, d]
  Var v_hat;  // [T+1, d]
};

// Records which feature nodes each stream read per layer, so tests can verify
// both streams update from layer r-1 rather than seeing each other's fresh
// outputs.
struct FusionTrace {
  struct Layer {
    const void* text_stream_kv = nullptr;    // visual node the text stream attended to
    const void* visual_stream_kv = nullptr;  // text node the visual stream attended to
    const void* text_out = nullptr;
    const void* visual_out = nullptr;
  };
  const void* e_in = nullptr;
  const void* v_in = nullptr;
  std::vector<Layer> layers;
};

// Two-stream co-attention: per layer, each stream runs a cross-attention block
// against the other stream's previous-layer features, then a self-attention
// block. No final norm so R=0 is the identity.
class CoAttention {
 public:
  CoAttention() = default;
  CoAttention(const std::string& name, std::size_t layers, std::size_t dim, std::size_t heads,
              std::size_t ffn_mult, Rng& rng) {
    for (std::size_t r = 0; r < layers; ++r) {
      const std::string base = name + ".l" + std::to_string(r);
      text_cross.emplace_back(base + ".tc", dim, heads, ffn_mult, rng);
      text_self.emplace_back(base + ".ts", dim, heads, ffn_mult, rng);
      vis_cross.emplace_back(base + ".vc", dim, heads, ffn_mult, rng);
      vis_self.emplace_back(base + ".vs", dim, heads, ffn_mult, rng);
    }
  }

  std::size_t layers() const { return text_cross.size(); }

  FusedFeatures forward(Var e, const std::vector<bool>& text_mask, Var v,
                        FusionTrace* trace = nullptr) {
    if (e.value().rank() != 2 || v.value().rank() != 2 || e.cols() != v.cols()) {
      throw std::invalid_argument("coattend: dim mismatch " + shape_str(e.shape()) + " vs " +
                                  shape_str(v.shape()));
    }
    if (text_mask.size() != e.rows()) {
      throw std::invalid_argument("coattend: text mask covers " + std::to_string(text_mask.size()) +
                                  " rows, E has " + std::to_string(e.rows()));
    }
    if (trace) {
      trace->e_in = e.node();
      trace->v_in = v.node();
      trace->layers.clear();
    }
    const Tensor text_self_mask = key_pad_mask(e.rows(), text_mask);
    const Tensor vis_cross_mask = key_pad_mask(v.rows(), text_mask);
    for (std::size_t r = 0; r < layers(); ++r) {
      Var e_prev = e, v_prev = v;
      Var e_mid = text_cross[r].forward(e_prev, v_prev);
      Var e_next = text_self[r].forward(e_mid, text_self_mask);
      Var v_mid = vis_cross[r].forward(v_prev, e_prev, vis_cross_mask);
      Var v_next = vis_self[r].forward(v_mid);
      if (trace) {
        trace->layers.push_back({v_prev.node(), e_prev.node(), e_next.node(), v_next.node()});
      }
      e = e_next;
      v = v_next;
    }
    return {e, v};
  }

  void collect(std::vector<Parameter*>& out) {
    for (std::size_t r = 0; r < layers(); ++r) {
      text_cross[r].collect(out);
      text_self[r].collect(out);
      vis_cross[r].collect(out);
      vis_self[r].collect(out);
    }
  }

  std::vector<CrossBlock> text_cross, vis_cross;
  std::vector<TransformerBlock> text_self, vis_self;
};

}  // namespace mvgpt
