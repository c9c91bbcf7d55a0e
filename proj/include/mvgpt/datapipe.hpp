#pragma once
// Triplet extraction from timestamped transcripts, synthetic clip generation,
// and JSONL dataset I/O.
//
// A dataset record is one video: a frame source plus a transcript. Triplets
// are cut from the transcript by seeding each utterance in turn and expanding
// the clip backwards, whole utterances at a time, until the span reaches the
// minimum length; the next utterance becomes the generation target.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvgpt/config.hpp"
#include "mvgpt/encoders.hpp"
#include "mvgpt/model.hpp"
#include "mvgpt/rng.hpp"

namespace mvgpt {

inline constexpr std::uint64_t kSynthStream = 0x73796e74ULL;  // per-record draws
inline constexpr std::uint64_t kFrameStream = 0x6672616dULL;  // + global frame index

struct TimedUtterance {
  std::string text;
  double start = 0.0, end = 0.0;
};

struct ClipTriplet {
  FrameClip frames;
  std::string u;  // concatenated present utterances
  std::string w;  // the single future utterance
  double span_start = 0.0, span_end = 0.0;
};

struct VideoRecord {
  std::string id;
  enum class Mode { Synthetic, Literal } mode = Mode::Synthetic;
  std::uint64_t frame_seed = 0;                   // synthetic source
  std::vector<std::vector<double>> frames;        // literal source, row-major per frame
  std::vector<double> frame_times;
  std::vector<TimedUtterance> utterances;
};

// ---------------------------------------------------------------------------
// span selection

inline void validate_transcript(const std::vector<TimedUtterance>& ts) {
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (!(ts[i].end > ts[i].start) || ts[i].start < 0.0) {
      throw std::invalid_argument("utterance " + std::to_string(i) +
                                  " has a degenerate time range");
    }
    if (i > 0 && ts[i].start < ts[i - 1].end) {
      throw std::invalid_argument("transcript unsorted or overlapping at utterance " +
                                  std::to_string(i));
    }
  }
}

// One planned clip: utterances [first, seed] form U, utterance seed+1 is W.
struct SpanPlan {
  std::size_t first = 0, seed = 0;
  double start = 0.0, end = 0.0;
  std::string u, w;
};

inline std::vector<SpanPlan> plan_triplets(const std::vector<TimedUtterance>& ts,
                                           double min_span_seconds, bool keep_short_prefix) {
  validate_transcript(ts);
  std::vector<SpanPlan> plans;
  if (ts.size() < 2) return plans;
  for (std::size_t seed = 0; seed + 1 < ts.size(); ++seed) {
    SpanPlan p;
    p.seed = seed;
    p.first = seed;
    p.end = ts[seed].end;
    // Expand backwards a whole sentence at a time until the span is long
    // enough; spans pinned to the transcript head may stay short.
    while (p.end - ts[p.first].start < min_span_seconds && p.first > 0) --p.first;
    p.start = ts[p.first].start;
    if (p.end - p.start < min_span_seconds && !keep_short_prefix) continue;
    for (std::size_t j = p.first; j <= seed; ++j) {
      if (!p.u.empty()) p.u += ' ';
      p.u += ts[j].text;
    }
    p.w = ts[seed + 1].text;
    plans.push_back(std::move(p));
  }
  return plans;
}

// ---------------------------------------------------------------------------
// frame sampling

inline std::size_t real_frame_count(double span_seconds, double fps, std::size_t max_frames) {
  const auto raw = static_cast<std::size_t>(std::floor(span_seconds * fps));
  return std::min(std::max<std::size_t>(raw, 1), max_frames);
}

inline std::size_t padded_frame_count(std::size_t real, std::size_t tubelet_t) {
  return ((real + tubelet_t - 1) / tubelet_t) * tubelet_t;
}

inline constexpr std::array<std::array<double, 3>, 4> kPalette{
    {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}, {1.0, 1.0, 0.0}}};
inline constexpr std::array<const char*, 4> kColorWords{"red", "green", "blue", "yellow"};

// Synthetic pixels: per-frame noise in [0, 0.05] plus a centered 8x8 patch at
// the pure palette color chosen by the low two bits of the seed. The patch is
// the only class signal; keeping it in one place means the pixels carry the
// color word and nothing else. A per-record position would itself identify the
// record, which tiny models exploit instead of the color channels. The noise
// stays faint for the same reason: it is a per-clip fingerprint, and the class
// contrast has to dominate it at the tubelet projection or small models never
// leave the text-only optimum.
inline void render_frame(std::uint64_t frame_seed, std::size_t global_index, FrameClip& clip,
                         std::size_t slot) {
  const std::size_t h = clip.height, w = clip.width, c = clip.channels;
  Rng noise(Rng::derive(frame_seed, kFrameStream + global_index));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) clip.px(slot, y, x, ch) = 0.05 * noise.uniform();

  const auto& color = kPalette[frame_seed & 3];
  const std::size_t ph = std::min<std::size_t>(8, h), pw = std::min<std::size_t>(8, w);
  const std::size_t y0 = (h - ph) / 2;
  const std::size_t x0 = (w - pw) / 2;
  for (std::size_t y = y0; y < y0 + ph; ++y)
    for (std::size_t x = x0; x < x0 + pw; ++x)
      for (std::size_t ch = 0; ch < c && ch < 3; ++ch) clip.px(slot, y, x, ch) = color[ch];
}

// Cuts the planned span out of the record's frame source. Frames are sampled
// at cfg.fps from span start; the tail repeats the last real frame so the
// count lands on a tubelet boundary.
inline FrameClip materialize_frames(const VideoRecord& rec, const SpanPlan& plan,
                                    const Config& cfg) {
  const std::size_t real = real_frame_count(plan.end - plan.start, cfg.fps, cfg.max_frames);
  const std::size_t total = padded_frame_count(real, cfg.tubelet_t);
  FrameClip clip(total, cfg.frame_h, cfg.frame_w, cfg.frame_channels, cfg.fps);
  const std::size_t frame_px = cfg.frame_h * cfg.frame_w * cfg.frame_channels;

  if (rec.mode == VideoRecord::Mode::Literal) {
    if (rec.frames.empty()) {
      throw std::invalid_argument("literal record " + rec.id + " stores no frames");
    }
    if (rec.frames.size() != rec.frame_times.size()) {
      throw std::invalid_argument("literal record " + rec.id + " has " +
                                  std::to_string(rec.frames.size()) + " frames but " +
                                  std::to_string(rec.frame_times.size()) + " frame times");
    }
  }
  for (std::size_t k = 0; k < real; ++k) {
    const double t = plan.start + static_cast<double>(k) / cfg.fps;
    if (rec.mode == VideoRecord::Mode::Synthetic) {
      const auto global = static_cast<std::size_t>(std::floor(t * cfg.fps + 1e-9));
      render_frame(rec.frame_seed, global, clip, k);
    } else {
      // Latest stored frame at or before the sample instant.
      std::size_t j = 0;
      for (std::size_t cand = 0; cand < rec.frame_times.size(); ++cand) {
        if (rec.frame_times[cand] <= t + 1e-9) j = cand;
      }
      const std::vector<double>& src = rec.frames[j];
      if (src.size() != frame_px) {
        throw std::invalid_argument("literal record " + rec.id + " frame " + std::to_string(j) +
                                    " has " + std::to_string(src.size()) + " values, expected " +
                                    std::to_string(frame_px));
      }
      std::copy(src.begin(), src.end(),
                clip.pixels.begin() + static_cast<std::ptrdiff_t>(k * frame_px));
    }
  }
  for (std::size_t k = real; k < total; ++k) {
    std::copy_n(clip.pixels.begin() + static_cast<std::ptrdiff_t>((real - 1) * frame_px), frame_px,
                clip.pixels.begin() + static_cast<std::ptrdiff_t>(k * frame_px));
  }
  if (!cfg.visual_input) std::fill(clip.pixels.begin(), clip.pixels.end(), 0.0);
  return clip;
}

inline std::vector<ClipTriplet> extract_triplets(const VideoRecord& rec, const Config& cfg) {
  std::vector<ClipTriplet> out;
  for (const SpanPlan& plan :
       plan_triplets(rec.utterances, cfg.min_span_seconds, cfg.keep_short_prefix)) {
    ClipTriplet t;
    t.frames = materialize_frames(rec, plan, cfg);
    t.u = plan.u;
    t.w = plan.w;
    t.span_start = plan.start;
    t.span_end = plan.end;
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<TrainingExample> to_examples(const std::vector<ClipTriplet>& triplets) {
  std::vector<TrainingExample> out;
  out.reserve(triplets.size());
  for (const ClipTriplet& t : triplets) out.push_back({t.frames, t.u, t.w});
  return out;
}

// ---------------------------------------------------------------------------
// synthetic dataset

struct SynthData {
  std::vector<VideoRecord> records;
  std::vector<ClipTriplet> triplets;
  std::vector<std::string> corpus;  // utterance texts, for vocabulary building
};

// Each record is a two-utterance video: the first spans at least the minimum
// clip length (so it alone forms U), the second is the target W and names the
// color of the rendered patch. Colors cycle i mod 4 and the U template changes
// only every four records, so each template co-occurs with all four colors
// equally: the transcript alone cannot predict the color better than chance,
// the pixels always can. Clip timing is constant for the same reason; varying
// durations would let frame counts stand in for record identity.
inline SynthData synth_dataset(std::uint64_t seed, std::size_t n, const Config& cfg) {
  if (n == 0) throw std::invalid_argument("synthetic dataset needs at least one record");
  static constexpr std::array<const char*, 4> kVerbs{"stir", "chop", "pour", "whisk"};
  static constexpr std::array<const char*, 4> kNouns{"mixture", "onions", "batter", "sauce"};
  static constexpr std::array<const char*, 4> kThings{"bowl", "pan", "jar", "plate"};
  static constexpr std::array<const char*, 4> kIntros{"now we", "next we", "then we", "first we"};

  SynthData data;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(Rng::derive(seed, kSynthStream + i));
    const std::size_t color = i % 4;
    VideoRecord rec;
    rec.id = "synth-" + std::to_string(i);
    rec.mode = VideoRecord::Mode::Synthetic;
    rec.frame_seed = (rng.next_u64() & ~std::uint64_t{3}) | color;

    const std::size_t pattern = i / 4;
    const bool tagged = pattern % 2 == 1;
    const char* verb = kVerbs[pattern % 4];
    const char* noun = kNouns[(pattern / 4) % 4];
    const char* thing = kThings[rng.uniform_int(4)];
    const char* intro = kIntros[(pattern / 2) % 4];
    std::string u_text, w_text;
    if (tagged) {
      u_text = std::string("step one ") + verb + " the " + noun + " now";
      w_text = std::string("the ") + kColorWords[color] + " " + thing + " is ready";
    } else {
      u_text = std::string(intro) + " " + verb + " the " + noun;
      w_text = std::string("take the ") + kColorWords[color] + " " + thing;
    }

    const double u_end = cfg.min_span_seconds + 0.5;
    const double w_end = u_end + 2.5;
    rec.utterances = {{u_text, 0.0, u_end}, {w_text, u_end, w_end}};
    for (double t = 0.0; t < w_end; t += 1.0 / cfg.fps) rec.frame_times.push_back(t);

    std::vector<ClipTriplet> cut = extract_triplets(rec, cfg);
    data.triplets.insert(data.triplets.end(), cut.begin(), cut.end());
    for (const TimedUtterance& utt : rec.utterances) data.corpus.push_back(utt.text);
    data.records.push_back(std::move(rec));
  }
  return data;
}

// ---------------------------------------------------------------------------
// JSONL I/O

inline void write_jsonl(const std::string& path, const std::vector<VideoRecord>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  for (const VideoRecord& rec : records) {
    nlohmann::ordered_json j;
    j["id"] = rec.id;
    j["mode"] = rec.mode == VideoRecord::Mode::Synthetic ? "synthetic" : "literal";
    if (rec.mode == VideoRecord::Mode::Synthetic) {
      j["frame_seed"] = rec.frame_seed;
    } else {
      j["frames"] = rec.frames;
    }
    j["frame_times"] = rec.frame_times;
    j["utterances"] = nlohmann::ordered_json::array();
    for (const TimedUtterance& u : rec.utterances) {
      j["utterances"].push_back({{"text", u.text}, {"start", u.start}, {"end", u.end}});
    }
    os << j.dump() << '\n';
  }
  if (!os) throw std::runtime_error("short write to " + path);
}

inline std::vector<VideoRecord> read_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::vector<VideoRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = path + " line " + std::to_string(lineno);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      VideoRecord rec;
      rec.id = j.at("id").get<std::string>();
      const std::string mode = j.at("mode").get<std::string>();
      if (mode == "synthetic") {
        rec.mode = VideoRecord::Mode::Synthetic;
        rec.frame_seed = j.at("frame_seed").get<std::uint64_t>();
      } else if (mode == "literal") {
        rec.mode = VideoRecord::Mode::Literal;
        rec.frames = j.at("frames").get<std::vector<std::vector<double>>>();
      } else {
        throw std::runtime_error("unknown mode \"" + mode + "\"");
      }
      rec.frame_times = j.at("frame_times").get<std::vector<double>>();
      for (const auto& u : j.at("utterances")) {
        rec.utterances.push_back({u.at("text").get<std::string>(), u.at("start").get<double>(),
                                  u.at("end").get<double>()});
      }
      records.push_back(std::move(rec));
    } catch (const std::exception& e) {
      throw std::runtime_error(where + ": malformed record: " + e.what());
    }
  }
  return records;
}

}  // namespace mvgpt
