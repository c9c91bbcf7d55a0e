#pragma once

// Corpus-level caption metrics: BLEU-n, ROUGE-L, CIDEr.
// All three consume pre-tokenized text; metric_tokens() applies the same
// normalization the tokenizer uses, so scores never depend on casing or
// punctuation placement.

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvgpt/tokenizer.hpp"

namespace mvgpt {

struct EvalExample {
  std::vector<std::string> hyp;
  std::vector<std::vector<std::string>> refs;
};

using EvalCorpus = std::vector<EvalExample>;

inline std::vector<std::string> metric_tokens(const std::string& text) {
  return normalize_words(text);
}

namespace detail {

using Gram = std::vector<std::string>;
using GramCounts = std::map<Gram, std::size_t>;

inline GramCounts count_grams(const std::vector<std::string>& toks, std::size_t k) {
  GramCounts out;
  if (k == 0 || toks.size() < k) return out;
  for (std::size_t i = 0; i + k <= toks.size(); ++i) {
    ++out[Gram(toks.begin() + i, toks.begin() + i + k)];
  }
  return out;
}

inline void validate_corpus(const EvalCorpus& corpus) {
  if (corpus.empty()) throw std::invalid_argument("empty evaluation corpus");
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].refs.empty()) {
      throw std::invalid_argument("example " + std::to_string(i) + " has no references");
    }
    for (const auto& r : corpus[i].refs) {
      if (r.empty()) {
        throw std::invalid_argument("example " + std::to_string(i) + " has an empty reference");
      }
    }
    // Hypotheses may be empty; each metric scores those 0.
  }
}

// LCS length, classic O(nm) table.
inline std::size_t lcs_length(const std::vector<std::string>& a,
                              const std::vector<std::string>& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1
                                      : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

// Corpus BLEU with modified (clipped) n-gram precision and the standard
// brevity penalty. Matches are pooled across the corpus before the geometric
// mean, so a single example cannot zero the score unless the whole corpus
// lacks that order. Reference length r uses, per example, the reference
// closest in length to the hypothesis (ties prefer the shorter reference).
inline double bleu(const EvalCorpus& corpus, std::size_t max_order) {
  detail::validate_corpus(corpus);
  if (max_order < 1) throw std::invalid_argument("bleu order must be at least 1");

  std::vector<std::size_t> matched(max_order, 0), total(max_order, 0);
  std::size_t hyp_len = 0, ref_len = 0;
  for (const auto& ex : corpus) {
    hyp_len += ex.hyp.size();
    std::size_t best = ex.refs.front().size();
    for (const auto& r : ex.refs) {
      const auto dist = [&](std::size_t n) {
        return n > ex.hyp.size() ? n - ex.hyp.size() : ex.hyp.size() - n;
      };
      if (dist(r.size()) < dist(best) || (dist(r.size()) == dist(best) && r.size() < best)) {
        best = r.size();
      }
    }
    ref_len += best;

    for (std::size_t k = 1; k <= max_order; ++k) {
      const auto hyp_counts = detail::count_grams(ex.hyp, k);
      detail::GramCounts clip;
      for (const auto& r : ex.refs) {
        for (const auto& [g, c] : detail::count_grams(r, k)) {
          auto& m = clip[g];
          m = std::max(m, c);
        }
      }
      for (const auto& [g, c] : hyp_counts) {
        total[k - 1] += c;
        auto it = clip.find(g);
        if (it != clip.end()) matched[k - 1] += std::min(c, it->second);
      }
    }
  }

  double log_sum = 0.0;
  for (std::size_t k = 0; k < max_order; ++k) {
    if (matched[k] == 0 || total[k] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched[k]) / static_cast<double>(total[k]));
  }
  const double precision = std::exp(log_sum / static_cast<double>(max_order));
  const double bp = hyp_len < ref_len
                        ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len))
                        : 1.0;
  return bp * precision;
}

// Mean over examples of the best-reference LCS F-score. beta weights recall;
// an example with no common subsequence (or an empty hypothesis) scores 0.
inline double rouge_l(const EvalCorpus& corpus, double beta = 1.2) {
  detail::validate_corpus(corpus);
  if (!(beta > 0.0)) throw std::invalid_argument("rouge beta must be positive");

  const double b2 = beta * beta;
  double sum = 0.0;
  for (const auto& ex : corpus) {
    double best = 0.0;
    for (const auto& r : ex.refs) {
      const std::size_t l = detail::lcs_length(ex.hyp, r);
      if (l == 0) continue;
      const double p = static_cast<double>(l) / static_cast<double>(ex.hyp.size());
      const double rec = static_cast<double>(l) / static_cast<double>(r.size());
      best = std::max(best, (1.0 + b2) * p * rec / (rec + b2 * p));
    }
    sum += best;
  }
  return sum / static_cast<double>(corpus.size());
}

// CIDEr: TF-IDF weighted k-gram cosine for k = 1..max_order, averaged over
// references, then over orders, then over examples, scaled by 10. Document
// frequency counts how many examples' reference sets contain a gram; grams
// never seen in any reference fall back to df = 1 so idf stays finite.
inline double cider(const EvalCorpus& corpus, std::size_t max_order = 4) {
  detail::validate_corpus(corpus);
  if (max_order < 1) throw std::invalid_argument("cider order must be at least 1");
  if (corpus.size() < 2) {
    throw std::invalid_argument("cider needs at least 2 examples for document frequencies");
  }

  const double n_docs = static_cast<double>(corpus.size());
  std::vector<detail::GramCounts> df(max_order);
  for (const auto& ex : corpus) {
    for (std::size_t k = 1; k <= max_order; ++k) {
      detail::GramCounts seen;
      for (const auto& r : ex.refs) {
        for (const auto& [g, c] : detail::count_grams(r, k)) seen[g] = 1;
      }
      for (const auto& [g, c] : seen) ++df[k - 1][g];
    }
  }
  const auto idf = [&](std::size_t k, const detail::Gram& g) {
    auto it = df[k - 1].find(g);
    const double d = it == df[k - 1].end() ? 1.0 : static_cast<double>(std::max<std::size_t>(it->second, 1));
    return std::log(n_docs / d);
  };

  // TF normalizes by the text's own k-gram total, so vector weights are
  // (count / total) * idf.
  const auto weigh = [&](const std::vector<std::string>& toks, std::size_t k) {
    std::map<detail::Gram, double> v;
    const auto counts = detail::count_grams(toks, k);
    double total = 0.0;
    for (const auto& [g, c] : counts) total += static_cast<double>(c);
    if (total == 0.0) return v;
    for (const auto& [g, c] : counts) v[g] = static_cast<double>(c) / total * idf(k, g);
    return v;
  };
  const auto cosine = [](const std::map<detail::Gram, double>& a,
                         const std::map<detail::Gram, double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [g, w] : a) {
      na += w * w;
      auto it = b.find(g);
      if (it != b.end()) dot += w * it->second;
    }
    for (const auto& [g, w] : b) nb += w * w;
    if (na == 0.0 || nb == 0.0) return 0.0;
    // Identical vectors must score exactly 1; sqrt(x)*sqrt(x) can be an ulp
    // off x, which would leak into the "perfect caption" score.
    if (dot == na && na == nb) return 1.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
  };

  double corpus_sum = 0.0;
  for (const auto& ex : corpus) {
    double order_sum = 0.0;
    for (std::size_t k = 1; k <= max_order; ++k) {
      const auto hv = weigh(ex.hyp, k);
      double ref_sum = 0.0;
      for (const auto& r : ex.refs) ref_sum += cosine(hv, weigh(r, k));
      order_sum += ref_sum / static_cast<double>(ex.refs.size());
    }
    corpus_sum += order_sum / static_cast<double>(max_order);
  }
  return 10.0 * corpus_sum / n_docs;
}

}  // namespace mvgpt
