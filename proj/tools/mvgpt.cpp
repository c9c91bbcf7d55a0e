// Operator entry point: one binary with explicit paths and reproducible runs.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "mvgpt/config.hpp"
#include "mvgpt/datapipe.hpp"
#include "mvgpt/metrics.hpp"
#include "mvgpt/model.hpp"
#include "mvgpt/objectives.hpp"
#include "mvgpt/selfcheck.hpp"
#include "mvgpt/tokenizer.hpp"
#include "mvgpt/trainer.hpp"

namespace {

using namespace mvgpt;

// Bad config keys or values are operator mistakes, not runtime failures.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigCli {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string seed_text;
};

void add_config_options(CLI::App* sub, ConfigCli& cc, bool with_file) {
  if (with_file) {
    sub->add_option("--config", cc.config_path, "config file with `key = value` lines");
  }
  sub->add_option("--set", cc.overrides, "config override, key=value (repeatable)");
  sub->add_option("--seed", cc.seed_text, "shorthand for --set seed=N");
}

Config resolve_config(const ConfigCli& cc, const Config& base) {
  try {
    Config cfg = cc.config_path.empty() ? base : load_config(cc.config_path);
    for (const std::string& kv : cc.overrides) apply_override(cfg, kv);
    if (!cc.seed_text.empty()) apply_override(cfg, "seed=" + cc.seed_text);
    validate_config(cfg);
    return cfg;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

// Every run logs the configuration it actually used, on stderr so stdout
// stays machine-parseable.
void log_config(const Config& cfg) {
  std::cerr << "# resolved config\n" << config_to_text(cfg);
}

std::string token_name(int id) {
  switch (id) {
    case tok::kPad: return "PAD";
    case tok::kUnk: return "UNK";
    case tok::kMask: return "MASK";
    case tok::kEos: return "EOS";
    case tok::kCls1: return "CLS1";
    case tok::kCls2: return "CLS2";
    case tok::kBos1: return "BOS1";
    case tok::kBos2: return "BOS2";
    default: return "id" + std::to_string(id);
  }
}

std::string tsv_safe(std::string s) {
  for (char& c : s) {
    if (c == '\t' || c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

struct NamedExample {
  std::string id;
  TrainingExample ex;
};

// Triplet ids are `<record id>#<triplet index>`, matching across extract,
// caption, and reference files.
std::vector<NamedExample> load_examples(const std::string& path, const Config& cfg) {
  std::vector<NamedExample> out;
  for (const VideoRecord& rec : read_jsonl(path)) {
    const std::vector<ClipTriplet> triplets = extract_triplets(rec, cfg);
    for (std::size_t k = 0; k < triplets.size(); ++k) {
      NamedExample ne;
      ne.id = rec.id + "#" + std::to_string(k);
      ne.ex.clip = triplets[k].frames;
      ne.ex.utterance = triplets[k].u;
      ne.ex.target = triplets[k].w;
      out.push_back(std::move(ne));
    }
  }
  if (out.empty()) throw std::runtime_error("no usable triplets in " + path);
  return out;
}

std::vector<TrainingExample> strip_ids(const std::vector<NamedExample>& named) {
  std::vector<TrainingExample> out;
  out.reserve(named.size());
  for (const NamedExample& ne : named) out.push_back(ne.ex);
  return out;
}

Vocabulary vocab_from_records(const std::string& path) {
  std::vector<std::string> corpus;
  for (const VideoRecord& rec : read_jsonl(path)) {
    for (const TimedUtterance& u : rec.utterances) corpus.push_back(u.text);
  }
  return build_vocab(corpus);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  return os;
}

// ---------------------------------------------------------------------------
// subcommands

int run_extract(const std::string& data, const std::string& out, const std::string& refs,
                const Config& cfg) {
  const auto records = read_jsonl(data);
  std::ofstream os = open_out(out);
  std::ofstream rs;
  if (!refs.empty()) rs = open_out(refs);
  std::size_t n = 0;
  for (const VideoRecord& rec : records) {
    const auto plans = plan_triplets(rec.utterances, cfg.min_span_seconds, cfg.keep_short_prefix);
    for (std::size_t k = 0; k < plans.size(); ++k) {
      nlohmann::ordered_json j;
      j["id"] = rec.id + "#" + std::to_string(k);
      j["span_start"] = plans[k].start;
      j["span_end"] = plans[k].end;
      j["u"] = plans[k].u;
      j["w"] = plans[k].w;
      os << j.dump() << '\n';
      if (rs.is_open()) rs << rec.id << '#' << k << '\t' << tsv_safe(plans[k].w) << '\n';
      ++n;
    }
  }
  std::cout << "extracted " << n << " triplets from " << records.size() << " records\n";
  return 0;
}

int run_synth(const std::string& out, std::size_t count, const Config& cfg) {
  const SynthData data = synth_dataset(cfg.seed, count, cfg);
  write_jsonl(out, data.records);
  std::cout << "wrote " << data.records.size() << " records to " << out << '\n';
  return 0;
}

std::ofstream open_loss_log(const std::string& dir) {
  std::ofstream loss = open_out(dir + "/loss.tsv");
  loss << std::setprecision(17) << "step\tfg\tbg\tmlm_u\tmlm_w\tnce\ttotal\n";
  return loss;
}

int run_pretrain(const std::string& data, const std::string& out_dir, const Config& cfg) {
  std::filesystem::create_directories(out_dir);
  const auto named = load_examples(data, cfg);
  const auto examples = strip_ids(named);
  const Vocabulary vocab = vocab_from_records(data);
  save_vocab(vocab, out_dir + "/vocab.txt");

  Rng rng(cfg.seed);
  Model model(cfg, vocab, rng);
  Trainer trainer(model);
  std::ofstream loss = open_loss_log(out_dir);
  run_training(trainer, examples, out_dir, [&](std::size_t step, const LossReport& r) {
    loss << step << '\t' << r.fg << '\t' << r.bg << '\t' << r.mlm_u << '\t' << r.mlm_w << '\t'
         << r.nce << '\t' << r.total << '\n';
    if (step % 100 == 0 || step == cfg.total_steps) {
      std::cout << "step " << step << "\ttotal " << r.total << '\n';
    }
  });
  std::cout << "checkpoint " << out_dir << "/final.ckpt\n";
  return 0;
}

int run_finetune(const std::string& data, const std::string& init, const std::string& vocab_path,
                 const std::string& out_dir, const ConfigCli& cc, bool trace) {
  const Config cfg = resolve_config(cc, peek_checkpoint_config(init));
  log_config(cfg);
  std::filesystem::create_directories(out_dir);
  const Vocabulary vocab = load_vocab(vocab_path);
  Rng rng(cfg.seed);
  Model model(cfg, vocab, rng);
  load_weights(init, model);
  const auto named = load_examples(data, cfg);

  if (trace) {
    Tape tape;
    PassTrace tr;
    finetune_loss(model, tape, named.front().ex.clip,
                  model.encode_conditioning(named.front().ex.utterance),
                  model.encode_target(named.front().ex.target), &tr);
    std::cout << "trace\tencoder_prefix\t" << token_name(tr.encoder_prefix) << '\n';
    std::cout << "trace\tdecoder_bos\t" << token_name(tr.decoder_bos) << '\n';
  }

  Trainer trainer(model, TrainObjective::Finetune);
  std::ofstream loss = open_loss_log(out_dir);
  run_training(trainer, strip_ids(named), out_dir, [&](std::size_t step, const LossReport& r) {
    loss << step << "\t0\t0\t0\t0\t0\t" << r.total << '\n';
    if (step % 100 == 0 || step == cfg.total_steps) {
      std::cout << "step " << step << "\ttotal " << r.total << '\n';
    }
  });
  save_vocab(vocab, out_dir + "/vocab.txt");
  std::cout << "checkpoint " << out_dir << "/final.ckpt\n";
  return 0;
}

int run_caption(const std::string& data, const std::string& ckpt, const std::string& vocab_path,
                const std::string& out, std::size_t beam_opt, bool greedy, const ConfigCli& cc) {
  const Config cfg = resolve_config(cc, peek_checkpoint_config(ckpt));
  log_config(cfg);
  const Vocabulary vocab = load_vocab(vocab_path);
  Rng rng(cfg.seed);
  Model model(cfg, vocab, rng);
  load_weights(ckpt, model);

  const std::size_t beam = beam_opt == 0 ? cfg.beam : beam_opt;
  const auto named = load_examples(data, cfg);
  std::ofstream os = open_out(out);
  for (const NamedExample& ne : named) {
    const TokenStream cond = model.encode_conditioning(ne.ex.utterance);
    const std::vector<int> ids =
        greedy ? caption_greedy(model, ne.ex.clip, cond, cfg.max_gen_len)
               : caption_beam(model, ne.ex.clip, cond, beam, cfg.max_gen_len, cfg.length_alpha);
    os << ne.id << '\t' << tsv_safe(decode(vocab, ids)) << '\n';
  }
  std::cout << "wrote " << named.size() << " captions to " << out << '\n';
  return 0;
}

// Hypothesis files carry one `id<TAB>text` line per clip; reference files may
// repeat an id to supply multiple references.
int run_eval(const std::string& hyp_path, const std::string& ref_path) {
  const auto read_tsv = [](const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    std::vector<std::pair<std::string, std::string>> lines;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const std::size_t tab = line.find('\t');
      if (tab == std::string::npos || tab == 0) {
        throw std::runtime_error(path + " line " + std::to_string(lineno) +
                                 ": expected id<TAB>text");
      }
      lines.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    return lines;
  };

  const auto hyp_lines = read_tsv(hyp_path);
  std::map<std::string, std::vector<std::string>> refs;
  for (const auto& [id, text] : read_tsv(ref_path)) refs[id].push_back(text);

  EvalCorpus corpus;
  std::map<std::string, bool> seen;
  for (const auto& [id, text] : hyp_lines) {
    if (seen[id]) throw std::runtime_error("duplicate hypothesis for id " + id);
    seen[id] = true;
    const auto it = refs.find(id);
    if (it == refs.end()) throw std::runtime_error("no references for id " + id);
    EvalExample ex;
    ex.hyp = metric_tokens(text);
    for (const std::string& r : it->second) ex.refs.push_back(metric_tokens(r));
    corpus.push_back(std::move(ex));
  }
  if (corpus.empty()) throw std::runtime_error("no hypotheses in " + hyp_path);

  std::cout << std::setprecision(17);
  std::cout << "BLEU-1\t" << bleu(corpus, 1) << '\n';
  std::cout << "BLEU-4\t" << bleu(corpus, 4) << '\n';
  std::cout << "ROUGE-L\t" << rouge_l(corpus) << '\n';
  if (corpus.size() >= 2) {
    std::cout << "CIDEr\t" << cider(corpus) << '\n';
  } else {
    std::cerr << "CIDEr skipped: needs at least 2 examples\n";
  }
  return 0;
}

int run_selfcheck_cmd(const std::string& seed_text) {
  std::uint64_t seed = 1;
  if (!seed_text.empty()) {
    try {
      seed = std::stoull(seed_text);
    } catch (const std::exception&) {
      throw UsageError("selfcheck: bad seed '" + seed_text + "'");
    }
  }
  bool all_ok = true;
  for (const CheckResult& r : run_selfcheck(seed)) {
    std::cout << (r.passed ? "ok" : "FAIL") << '\t' << r.name << '\t' << r.detail << '\n';
    all_ok = all_ok && r.passed;
  }
  std::cout << (all_ok ? "selfcheck passed" : "selfcheck FAILED") << '\n';
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal video captioning: data, pretraining, finetuning, decoding, scoring"};
  app.require_subcommand(1);

  struct {
    std::string data, out, refs;
    ConfigCli cc;
  } ex;
  auto* extract = app.add_subcommand("extract", "turn transcripts into training triplets");
  extract->add_option("--data", ex.data, "video records, one JSON object per line")->required();
  extract->add_option("--out", ex.out, "triplet file to write (JSONL)")->required();
  extract->add_option("--refs", ex.refs, "also write references as id<TAB>text");
  add_config_options(extract, ex.cc, true);

  struct {
    std::string out;
    std::size_t count = 16;
    ConfigCli cc;
  } sy;
  auto* synth = app.add_subcommand("synth", "generate a seeded synthetic dataset");
  synth->add_option("--out", sy.out, "records file to write (JSONL)")->required();
  synth->add_option("--count", sy.count, "number of records (default 16)");
  add_config_options(synth, sy.cc, true);

  struct {
    std::string data, out_dir;
    ConfigCli cc;
  } pt;
  auto* pretrain = app.add_subcommand("pretrain", "bidirectional generative pretraining");
  pretrain->add_option("--data", pt.data, "video records (JSONL)")->required();
  pretrain->add_option("--out-dir", pt.out_dir, "directory for vocab, loss log, checkpoints")
      ->required();
  add_config_options(pretrain, pt.cc, true);

  struct {
    std::string data, init, vocab, out_dir;
    bool trace = false;
    ConfigCli cc;
  } ft;
  auto* finetune = app.add_subcommand("finetune", "caption finetuning from a checkpoint");
  finetune->add_option("--data", ft.data, "video records (JSONL)")->required();
  finetune->add_option("--init", ft.init, "checkpoint to warm-start from")->required();
  finetune->add_option("--vocab", ft.vocab, "vocabulary file matching the checkpoint")->required();
  finetune->add_option("--out-dir", ft.out_dir, "directory for outputs")->required();
  finetune->add_flag("--trace", ft.trace, "log the token configuration of the first pass");
  add_config_options(finetune, ft.cc, false);

  struct {
    std::string data, ckpt, vocab, out;
    std::size_t beam = 0;
    bool greedy = false;
    ConfigCli cc;
  } cp;
  auto* caption = app.add_subcommand("caption", "decode captions for clips");
  caption->add_option("--data", cp.data, "video records (JSONL)")->required();
  caption->add_option("--ckpt", cp.ckpt, "model checkpoint")->required();
  caption->add_option("--vocab", cp.vocab, "vocabulary file matching the checkpoint")->required();
  caption->add_option("--out", cp.out, "hypotheses file to write, id<TAB>caption")->required();
  caption->add_option("--beam", cp.beam, "beam width (default: config beam)");
  caption->add_flag("--greedy", cp.greedy, "greedy decoding instead of beam search");
  add_config_options(caption, cp.cc, false);

  struct {
    std::string hyp, ref;
  } ev;
  auto* eval = app.add_subcommand("eval", "score hypotheses against references");
  eval->add_option("--hyp", ev.hyp, "hypotheses, id<TAB>text")->required();
  eval->add_option("--ref", ev.ref, "references, id<TAB>text (ids may repeat)")->required();

  std::string sc_seed;
  auto* selfcheck = app.add_subcommand("selfcheck", "gradient, causality, and metric-oracle sweeps");
  selfcheck->add_option("--seed", sc_seed, "sweep seed (default 1)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (app.got_subcommand(extract)) {
      const Config cfg = resolve_config(ex.cc, Config{});
      log_config(cfg);
      return run_extract(ex.data, ex.out, ex.refs, cfg);
    }
    if (app.got_subcommand(synth)) {
      const Config cfg = resolve_config(sy.cc, Config{});
      log_config(cfg);
      return run_synth(sy.out, sy.count, cfg);
    }
    if (app.got_subcommand(pretrain)) {
      const Config cfg = resolve_config(pt.cc, Config{});
      log_config(cfg);
      return run_pretrain(pt.data, pt.out_dir, cfg);
    }
    if (app.got_subcommand(finetune)) {
      return run_finetune(ft.data, ft.init, ft.vocab, ft.out_dir, ft.cc, ft.trace);
    }
    if (app.got_subcommand(caption)) {
      return run_caption(cp.data, cp.ckpt, cp.vocab, cp.out, cp.beam, cp.greedy, cp.cc);
    }
    if (app.got_subcommand(eval)) return run_eval(ev.hyp, ev.ref);
    if (app.got_subcommand(selfcheck)) return run_selfcheck_cmd(sc_seed);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
