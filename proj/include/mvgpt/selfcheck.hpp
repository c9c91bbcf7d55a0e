#pragma once

// In-binary verification: gradient, causality, and metric-oracle sweeps that
// a deployed build can run without the test suite present. Each check is
// small enough to finish in seconds yet sharp enough to catch a miscompiled
// or misported build (wrong FMA contraction, broken mask arithmetic, bad
// metric counting).

#include <cmath>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "mvgpt/gradcheck.hpp"
#include "mvgpt/metrics.hpp"
#include "mvgpt/objectives.hpp"

namespace mvgpt {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline Config selfcheck_config() {
  Config c;
  c.dim = 16;
  c.heads = 2;
  c.ffn_mult = 2;
  c.text_layers = 1;
  c.spatial_layers = 1;
  c.temporal_layers = 1;
  c.fusion_layers = 1;
  c.decoder_layers = 1;
  c.max_text_len = 12;
  c.max_gen_len = 8;
  c.frame_h = 16;
  c.frame_w = 16;
  c.frame_channels = 3;
  return c;
}

inline Vocabulary selfcheck_vocab() {
  Vocabulary v;
  for (int i = 0; i < 8; ++i) v.add_word("w" + std::to_string(i));
  return v;
}

inline TrainingExample selfcheck_example(std::uint64_t seed) {
  TrainingExample ex;
  ex.clip = FrameClip(4, 16, 16, 3);
  Rng rng(seed);
  for (auto& p : ex.clip.pixels) p = rng.uniform();
  ex.utterance = "w0 w1 w2";
  ex.target = "w3 w4";
  return ex;
}

}  // namespace detail

// Central differences against the analytic gradient of the full pretraining
// batch loss, one random coordinate per parameter.
inline CheckResult check_gradients(std::uint64_t seed) {
  CheckResult r{"gradients", false, ""};
  Rng rng(seed);
  Model m(detail::selfcheck_config(), detail::selfcheck_vocab(), rng);
  std::vector<TrainingExample> data = {detail::selfcheck_example(seed + 1),
                                       detail::selfcheck_example(seed + 2)};
  auto params = m.parameters();
  auto f = [&](bool train) {
    Tape tape;
    Rng mask_rng(seed + 3);
    BatchVars out = pretrain_batch(m, tape, data, mask_rng);
    if (train) tape.backward(out.loss);
    return out.loss.value().item();
  };
  GradCheckOptions opt;
  opt.max_coords_per_param = 1;
  opt.seed = seed;
  GradCheckResult g = finite_diff_check(f, params, opt);
  std::ostringstream os;
  os << "max rel err " << g.max_rel_err << " over " << g.coords_checked << " coords";
  r.detail = os.str();
  r.passed = g.max_rel_err < 1e-4 && g.coords_checked >= 40;
  return r;
}

// Perturbing generated token j must leave decoder logit rows < j bit-equal.
inline CheckResult check_causality(std::uint64_t seed) {
  CheckResult r{"causality", false, ""};
  const Config cfg = detail::selfcheck_config();
  std::size_t rows_checked = 0;
  for (std::uint64_t s = seed; s < seed + 3; ++s) {
    Rng rng(s);
    Config c = cfg;
    c.vocab_size = 16;
    Decoder dec(c, rng);
    Rng drng(s + 100);
    Tensor ctx({4, c.dim});
    for (auto& x : ctx.data()) x = drng.uniform(-1.0, 1.0);
    const std::vector<bool> mask(4, true);
    std::vector<int> ids{tok::kBos1, 9, 10, 11, 12};

    Tape t0;
    const Tensor base = dec.forward(t0.constant(ctx), mask, ids).logits.value();
    for (std::size_t j = 1; j < ids.size(); ++j) {
      std::vector<int> changed = ids;
      changed[j] = 13;
      Tape t1;
      const Tensor alt = dec.forward(t1.constant(ctx), mask, changed).logits.value();
      for (std::size_t row = 0; row < j; ++row) {
        for (std::size_t v = 0; v < c.vocab_size; ++v) {
          const double a = base(row, v), b = alt(row, v);
          if (std::memcmp(&a, &b, sizeof(double)) != 0) {
            r.detail = "row " + std::to_string(row) + " moved under a token-" +
                       std::to_string(j) + " edit (seed " + std::to_string(s) + ")";
            return r;
          }
          ++rows_checked;
        }
      }
    }
  }
  r.detail = std::to_string(rows_checked) + " logit entries bit-stable";
  r.passed = true;
  return r;
}

// Metric sanity: closed-form scores plus a scan-counting BLEU recount that
// shares no code with the map-based implementation.
inline CheckResult check_metric_oracles(std::uint64_t seed) {
  CheckResult r{"metric oracles", false, ""};
  const auto T = [](std::initializer_list<const char*> ws) {
    std::vector<std::string> v;
    for (const char* w : ws) v.emplace_back(w);
    return v;
  };

  const EvalCorpus identity = {
      {T({"the", "cat", "sat", "on", "the", "mat"}), {T({"the", "cat", "sat", "on", "the", "mat"})}},
      {T({"a", "dog", "ran", "through", "a", "park"}), {T({"a", "dog", "ran", "through", "a", "park"})}}};
  if (bleu(identity, 4) != 1.0) {
    r.detail = "identical captions: BLEU-4 != 1";
    return r;
  }
  if (rouge_l(identity) != 1.0) {
    r.detail = "identical captions: ROUGE-L != 1";
    return r;
  }
  if (cider(identity) != 10.0) {
    r.detail = "identical captions: CIDEr != 10";
    return r;
  }
  const EvalCorpus clipped = {{T({"the", "the", "the"}), {T({"the", "cat"})}}};
  if (std::abs(bleu(clipped, 1) - 1.0 / 3.0) > 1e-12) {
    r.detail = "clipped unigram example off 1/3";
    return r;
  }
  const EvalCorpus lcs = {{T({"a", "b", "c"}), {T({"a", "c", "d"})}}};
  if (std::abs(rouge_l(lcs) - 2.0 / 3.0) > 1e-12) {
    r.detail = "LCS example off 2/3";
    return r;
  }
  const EvalCorpus disjoint = {{T({"p", "q"}), {T({"x", "y"})}},
                               {T({"u", "v"}), {T({"s", "t"})}}};
  if (cider(disjoint) != 0.0) {
    r.detail = "disjoint captions: CIDEr != 0";
    return r;
  }

  // Recount BLEU-2 by brute scanning on random corpora.
  const auto occurrences = [](const std::vector<std::string>& t,
                              const std::vector<std::string>& g) {
    std::size_t n = 0;
    for (std::size_t i = 0; i + g.size() <= t.size(); ++i) {
      if (std::equal(g.begin(), g.end(), t.begin() + i)) ++n;
    }
    return n;
  };
  Rng rng(seed);
  const std::vector<std::string> words = {"cat", "dog", "ran", "the"};
  for (int trial = 0; trial < 5; ++trial) {
    EvalCorpus corpus;
    for (int e = 0; e < 3; ++e) {
      EvalExample ex;
      for (std::size_t i = 0, n = 1 + rng.uniform_int(5); i < n; ++i) {
        ex.hyp.push_back(words[rng.uniform_int(words.size())]);
      }
      std::vector<std::string> ref;
      for (std::size_t i = 0, n = 1 + rng.uniform_int(5); i < n; ++i) {
        ref.push_back(words[rng.uniform_int(words.size())]);
      }
      ex.refs.push_back(ref);
      corpus.push_back(ex);
    }
    double matched[2] = {0, 0}, total[2] = {0, 0};
    double c_len = 0, r_len = 0;
    for (const auto& ex : corpus) {
      c_len += double(ex.hyp.size());
      r_len += double(ex.refs[0].size());
      for (std::size_t k = 1; k <= 2; ++k) {
        for (std::size_t i = 0; i + k <= ex.hyp.size(); ++i) {
          total[k - 1] += 1.0;
          const std::vector<std::string> g(ex.hyp.begin() + i, ex.hyp.begin() + i + k);
          bool first = true;
          for (std::size_t p = 0; p < i; ++p) {
            if (std::equal(g.begin(), g.end(), ex.hyp.begin() + p)) first = false;
          }
          if (!first) continue;
          matched[k - 1] += double(std::min(occurrences(ex.hyp, g), occurrences(ex.refs[0], g)));
        }
      }
    }
    double want = 0.0;
    if (matched[0] > 0 && matched[1] > 0 && total[1] > 0) {
      const double gm = std::sqrt(matched[0] / total[0] * (matched[1] / total[1]));
      want = (c_len < r_len ? std::exp(1.0 - r_len / c_len) : 1.0) * gm;
    }
    const double got = bleu(corpus, 2);
    if (std::abs(got - want) > 1e-12) {
      std::ostringstream os;
      os << "BLEU-2 recount mismatch: " << got << " vs " << want << " (trial " << trial << ")";
      r.detail = os.str();
      return r;
    }
  }
  r.detail = "closed forms and recounts agree";
  r.passed = true;
  return r;
}

inline std::vector<CheckResult> run_selfcheck(std::uint64_t seed = 1) {
  return {check_gradients(seed), check_causality(seed), check_metric_oracles(seed)};
}

}  // namespace mvgpt
