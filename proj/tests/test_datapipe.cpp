#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "mvgpt/datapipe.hpp"
#include "mvgpt/tokenizer.hpp"

using namespace mvgpt;

namespace {

std::vector<TimedUtterance> four_sentences() {
  return {{"first we chop the onions", 0.0, 2.0},
          {"now we stir the mixture", 2.0, 4.5},
          {"then we pour the batter", 4.5, 9.0},
          {"take the red bowl", 9.0, 10.0}};
}

bool frames_equal(const FrameClip& clip, std::size_t a, std::size_t b) {
  const std::size_t n = clip.height * clip.width * clip.channels;
  return std::memcmp(clip.pixels.data() + a * n, clip.pixels.data() + b * n,
                     n * sizeof(double)) == 0;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("tmp_" + name) {}
  ~TempFile() { std::filesystem::remove(path); }
};

}  // namespace

TEST_CASE("backward expansion follows the five-second rule") {
  auto ts = four_sentences();
  auto plans = plan_triplets(ts, 5.0, true);
  REQUIRE(plans.size() == 3);  // last utterance never seeds

  // Seed 0: nothing earlier, kept short.
  REQUIRE(plans[0].first == 0);
  REQUIRE(plans[0].start == 0.0);
  REQUIRE(plans[0].end == 2.0);
  REQUIRE(plans[0].u == ts[0].text);
  REQUIRE(plans[0].w == ts[1].text);

  // Seed 1: expands to the head and still falls short of 5 s.
  REQUIRE(plans[1].first == 0);
  REQUIRE(plans[1].start == 0.0);
  REQUIRE(plans[1].end == 4.5);
  REQUIRE(plans[1].u == ts[0].text + " " + ts[1].text);

  // Seed 2: 4.5 s alone, adding the previous sentence reaches 7 s and stops.
  REQUIRE(plans[2].first == 1);
  REQUIRE(plans[2].start == 2.0);
  REQUIRE(plans[2].end == 9.0);
  REQUIRE(plans[2].u == ts[1].text + " " + ts[2].text);
  REQUIRE(plans[2].w == ts[3].text);

  // Span edges always coincide with utterance boundaries.
  for (const SpanPlan& p : plans) {
    REQUIRE(p.start == ts[p.first].start);
    REQUIRE(p.end == ts[p.seed].end);
  }

  SECTION("short prefix-anchored spans can be dropped instead") {
    auto strict = plan_triplets(ts, 5.0, false);
    REQUIRE(strict.size() == 1);
    REQUIRE(strict[0].seed == 2);
  }

  SECTION("tiny transcripts yield nothing") {
    REQUIRE(plan_triplets({}, 5.0, true).empty());
    REQUIRE(plan_triplets({ts[0]}, 5.0, true).empty());
  }
}

TEST_CASE("transcript validation rejects disorder") {
  auto ts = four_sentences();
  std::swap(ts[1], ts[2]);
  REQUIRE_THROWS_WITH(plan_triplets(ts, 5.0, true),
                      Catch::Matchers::ContainsSubstring("unsorted or overlapping"));

  auto overlap = four_sentences();
  overlap[1].start = 1.5;  // starts before the previous ends
  REQUIRE_THROWS_WITH(plan_triplets(overlap, 5.0, true),
                      Catch::Matchers::ContainsSubstring("unsorted or overlapping"));

  auto degenerate = four_sentences();
  degenerate[2].end = degenerate[2].start;
  REQUIRE_THROWS_WITH(plan_triplets(degenerate, 5.0, true),
                      Catch::Matchers::ContainsSubstring("degenerate"));

  auto negative = four_sentences();
  negative[0].start = -0.5;
  REQUIRE_THROWS(plan_triplets(negative, 5.0, true));
}

TEST_CASE("frame counts honor fps, the cap, and tubelet padding") {
  REQUIRE(real_frame_count(4.5, 1.0, 32) == 4);
  REQUIRE(real_frame_count(0.3, 1.0, 32) == 1);  // never zero frames
  REQUIRE(real_frame_count(40.0, 1.0, 32) == 32);
  REQUIRE(real_frame_count(4.5, 2.0, 32) == 9);
  REQUIRE(padded_frame_count(5, 4) == 8);
  REQUIRE(padded_frame_count(4, 4) == 4);
  REQUIRE(padded_frame_count(1, 4) == 4);

  Config cfg;
  VideoRecord rec;
  rec.id = "r";
  rec.frame_seed = 17;
  rec.utterances = {{"now we stir the mixture", 0.0, 5.2}, {"take the red bowl", 5.2, 7.0}};
  auto triplets = extract_triplets(rec, cfg);
  REQUIRE(triplets.size() == 1);
  const FrameClip& clip = triplets[0].frames;
  REQUIRE(clip.frames == 8);  // 5 real, padded to the tubelet multiple
  REQUIRE(clip.frames % cfg.tubelet_t == 0);
  REQUIRE(frames_equal(clip, 4, 5));
  REQUIRE(frames_equal(clip, 4, 6));
  REQUIRE(frames_equal(clip, 4, 7));
  REQUIRE_FALSE(frames_equal(clip, 3, 4));
  validate_clip(clip);  // pixels stay inside [0,1]

  SECTION("long spans are capped at max_frames") {
    VideoRecord wide = rec;
    wide.utterances = {{"now we stir the mixture", 0.0, 40.0}, {"take the red bowl", 40.0, 41.0}};
    auto capped = extract_triplets(wide, cfg);
    REQUIRE(capped.size() == 1);
    REQUIRE(capped[0].frames.frames == 32);
  }

  SECTION("visual ablation zeroes every pixel") {
    Config blind = cfg;
    blind.visual_input = false;
    auto dark = extract_triplets(rec, blind);
    for (double p : dark[0].frames.pixels) REQUIRE(p == 0.0);
  }
}

TEST_CASE("synthetic dataset is deterministic and visually informative") {
  Config cfg;
  SynthData a = synth_dataset(7, 16, cfg);
  SynthData b = synth_dataset(7, 16, cfg);
  REQUIRE(a.records.size() == 16);
  REQUIRE(a.triplets.size() == 16);
  REQUIRE(a.corpus == b.corpus);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    REQUIRE(a.records[i].frame_seed == b.records[i].frame_seed);
    REQUIRE(a.records[i].utterances[0].text == b.records[i].utterances[0].text);
    REQUIRE(a.records[i].utterances[1].text == b.records[i].utterances[1].text);
    REQUIRE(a.triplets[i].frames.pixels == b.triplets[i].frames.pixels);
  }

  // The caption names exactly the rendered patch color. Words are matched with
  // surrounding spaces ("red" is a substring of "ready").
  for (const VideoRecord& rec : a.records) {
    const std::string want = kColorWords[rec.frame_seed & 3];
    REQUIRE_THAT(rec.utterances[1].text, Catch::Matchers::ContainsSubstring(" " + want + " "));
    for (const char* other : kColorWords) {
      if (want != other) {
        REQUIRE_THAT(rec.utterances[1].text,
                     !Catch::Matchers::ContainsSubstring(" " + std::string(other) + " "));
      }
    }
  }

  for (const ClipTriplet& t : a.triplets) {
    validate_clip(t.frames);
    REQUIRE(t.frames.frames % cfg.tubelet_t == 0);
  }
  REQUIRE_THROWS(synth_dataset(7, 0, cfg));

  SECTION("vocabulary built from the corpus covers every caption") {
    Vocabulary v = build_vocab(a.corpus);
    for (const TrainingExample& ex : to_examples(a.triplets)) {
      for (int id : encode(v, ex.utterance, std::nullopt, false, 32).ids) {
        REQUIRE(id != tok::kUnk);
      }
      for (int id : encode(v, ex.target, std::nullopt, true, 32).ids) {
        REQUIRE(id != tok::kUnk);
      }
    }
  }
}

TEST_CASE("mean color linearly separates the caption classes") {
  Config cfg;
  SynthData data = synth_dataset(3, 64, cfg);

  // Features: mean pixel value per channel; labels: patch color index.
  const std::size_t n = data.triplets.size();
  Tensor x(Shape{n, 3}, 0.0);
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const FrameClip& clip = data.triplets[i].frames;
    double sums[3] = {0, 0, 0};
    for (std::size_t p = 0; p < clip.pixels.size(); ++p) sums[p % 3] += clip.pixels[p];
    const double per = double(clip.pixels.size()) / 3.0;
    for (std::size_t ch = 0; ch < 3; ++ch) x.data()[i * 3 + ch] = sums[ch] / per;
    labels.push_back(int(data.records[i].frame_seed & 3));
  }
  // Standardize columns so the probe converges quickly.
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < n; ++i) mean += x.data()[i * 3 + ch] / double(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = x.data()[i * 3 + ch] - mean;
      var += d * d / double(n);
    }
    for (std::size_t i = 0; i < n; ++i)
      x.data()[i * 3 + ch] = (x.data()[i * 3 + ch] - mean) / std::sqrt(var + 1e-12);
  }

  Rng rng(1);
  Parameter w("probe.w", ParamKind::Weight, normal_init({3, 4}, rng));
  Parameter b("probe.b", ParamKind::Bias, Tensor(Shape{4}, 0.0));
  int perfect_at = -1;
  for (int step = 0; step < 500; ++step) {
    Tape tape;
    Var logits = add_rowvec(matmul(tape.constant(x), tape.param(w)), tape.param(b));
    Var loss = cross_entropy(logits, labels);
    tape.backward(loss);
    for (Parameter* p : {&w, &b}) {
      for (std::size_t i = 0; i < p->value.data().size(); ++i)
        p->value.data()[i] -= 0.5 * p->grad.data()[i];
      p->grad.zero();
    }
    int hits = 0;
    Tape eval;
    Var lg = add_rowvec(matmul(eval.constant(x), eval.param(w)), eval.param(b));
    for (std::size_t i = 0; i < n; ++i) {
      auto row = lg.value().data().subspan(i * 4, 4);
      std::size_t best = 0;
      for (std::size_t j = 1; j < 4; ++j)
        if (row[j] > row[best]) best = j;
      if (int(best) == labels[i]) ++hits;
    }
    if (hits == int(n)) {
      perfect_at = step;
      break;
    }
  }
  REQUIRE(perfect_at >= 0);
}

TEST_CASE("jsonl round trip is lossless") {
  Config cfg;
  SynthData data = synth_dataset(11, 4, cfg);

  VideoRecord literal;
  literal.id = "lit-0";
  literal.mode = VideoRecord::Mode::Literal;
  literal.frames = {{0.1, 0.2 + 1e-16, 0.30000000000000004, 1.0 / 3.0},
                    {0.9999999999999999, 0.0, 0.5, 0.125}};
  literal.frame_times = {0.0, 1.0};
  literal.utterances = {{"now we stir the mixture", 0.0, 6.0}, {"take the red bowl", 6.0, 7.5}};

  std::vector<VideoRecord> records = data.records;
  records.push_back(literal);

  TempFile f("roundtrip.jsonl");
  write_jsonl(f.path, records);
  auto back = read_jsonl(f.path);
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    REQUIRE(back[i].id == records[i].id);
    REQUIRE(back[i].mode == records[i].mode);
    REQUIRE(back[i].frame_seed == records[i].frame_seed);
    REQUIRE(back[i].frames == records[i].frames);  // bit-exact doubles
    REQUIRE(back[i].frame_times == records[i].frame_times);
    REQUIRE(back[i].utterances.size() == records[i].utterances.size());
    for (std::size_t u = 0; u < records[i].utterances.size(); ++u) {
      REQUIRE(back[i].utterances[u].text == records[i].utterances[u].text);
      REQUIRE(back[i].utterances[u].start == records[i].utterances[u].start);
      REQUIRE(back[i].utterances[u].end == records[i].utterances[u].end);
    }
  }
}

TEST_CASE("jsonl errors carry the line number") {
  TempFile f("broken.jsonl");
  {
    std::ofstream os(f.path);
    os << R"({"id":"a","mode":"synthetic","frame_seed":1,"frame_times":[],"utterances":[]})" << "\n";
    os << R"({"id":"b","mode":"synthetic","frame_seed":2,"frame_times":[],"utterances":[]})" << "\n";
    os << "{oops\n";
  }
  REQUIRE_THROWS_WITH(read_jsonl(f.path), Catch::Matchers::ContainsSubstring("line 3"));

  TempFile g("badmode.jsonl");
  {
    std::ofstream os(g.path);
    os << R"({"id":"a","mode":"holographic","frame_times":[],"utterances":[]})" << "\n";
  }
  REQUIRE_THROWS_WITH(read_jsonl(g.path), Catch::Matchers::ContainsSubstring("unknown mode"));

  TempFile h("missing.jsonl");
  {
    std::ofstream os(h.path);
    os << R"({"id":"a"})" << "\n";
  }
  REQUIRE_THROWS_WITH(read_jsonl(h.path), Catch::Matchers::ContainsSubstring("line 1"));

  REQUIRE_THROWS_WITH(read_jsonl("no_such_file.jsonl"),
                      Catch::Matchers::ContainsSubstring("cannot read"));
}

TEST_CASE("literal records sample stored frames by time") {
  Config cfg;
  cfg.frame_h = 2;
  cfg.frame_w = 2;
  cfg.frame_channels = 1;  // 4 values per frame
  VideoRecord rec;
  rec.id = "lit";
  rec.mode = VideoRecord::Mode::Literal;
  rec.frames = {{0.0, 0.0, 0.0, 0.0}, {0.25, 0.25, 0.25, 0.25}, {0.5, 0.5, 0.5, 0.5},
                {0.75, 0.75, 0.75, 0.75}, {1.0, 1.0, 1.0, 1.0}, {0.1, 0.1, 0.1, 0.1},
                {0.2, 0.2, 0.2, 0.2}};
  rec.frame_times = {0, 1, 2, 3, 4, 5, 6};
  rec.utterances = {{"now we stir the mixture", 0.0, 6.0}, {"take the red bowl", 6.0, 7.0}};

  auto triplets = extract_triplets(rec, cfg);
  REQUIRE(triplets.size() == 1);
  const FrameClip& clip = triplets[0].frames;
  REQUIRE(clip.frames == 8);  // 6 real + padding
  for (std::size_t k = 0; k < 6; ++k) REQUIRE(clip.px(k, 0, 0, 0) == rec.frames[k][0]);
  REQUIRE(clip.px(6, 0, 0, 0) == rec.frames[5][0]);  // padding repeats the last real frame
  REQUIRE(clip.px(7, 0, 0, 0) == rec.frames[5][0]);

  SECTION("frame size mismatches are named") {
    VideoRecord bad = rec;
    bad.frames[2] = {0.5};
    REQUIRE_THROWS_WITH(extract_triplets(bad, cfg),
                        Catch::Matchers::ContainsSubstring("frame 2"));
  }
  SECTION("frame and time arrays must align") {
    VideoRecord bad = rec;
    bad.frame_times.pop_back();
    REQUIRE_THROWS_WITH(extract_triplets(bad, cfg),
                        Catch::Matchers::ContainsSubstring("frame times"));
  }
  SECTION("literal records need frames") {
    VideoRecord bad = rec;
    bad.frames.clear();
    bad.frame_times.clear();
    REQUIRE_THROWS_WITH(extract_triplets(bad, cfg),
                        Catch::Matchers::ContainsSubstring("stores no frames"));
  }
}
