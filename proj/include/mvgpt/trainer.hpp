#pragma once
// Optimization and persistence: warmup+cosine schedule, Adam with decoupled
// weight decay (weight matrices only), a deterministic training loop, and a
// bit-exact binary checkpoint format.
//
// Determinism scheme: model init draws from Rng(seed); the epoch-e shuffle
// draws from a stream derived as (seed, epoch-stream + e), so any step's batch
// is a pure function of (seed, step, dataset size, batch size); masking draws
// from one stateful stream whose state rides along in checkpoints. Resuming a
// run therefore replays the uninterrupted run bit for bit.

#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvgpt/model.hpp"
#include "mvgpt/objectives.hpp"

namespace mvgpt {

inline constexpr std::uint64_t kMaskStream = 0x6d61736bULL;   // masking draws
inline constexpr std::uint64_t kShuffleStream = 0x73687566ULL;  // + epoch index

// ---------------------------------------------------------------------------
// schedule

// Linear ramp to lr_peak over warmup_steps, then cosine decay to zero at
// total_steps. Both branches agree exactly at the boundary.
inline double lr_at(std::size_t step, const Config& cfg) {
  if (step > cfg.total_steps) {
    throw std::invalid_argument("lr_at: step " + std::to_string(step) + " past total_steps " +
                                std::to_string(cfg.total_steps));
  }
  if (step < cfg.warmup_steps) {
    return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const double span = static_cast<double>(std::max<std::size_t>(cfg.total_steps - cfg.warmup_steps, 1));
  const double phase = static_cast<double>(step - cfg.warmup_steps) / span;
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * phase));
}

// ---------------------------------------------------------------------------
// optimizer

inline void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->grad.zero();
}

class Adam {
 public:
  Adam() = default;

  Adam(const std::vector<Parameter*>& params, const Config& cfg)
      : beta1(cfg.beta1), beta2(cfg.beta2), eps(cfg.adam_eps), weight_decay(cfg.weight_decay) {
    for (Parameter* p : params) {
      m.emplace_back(p->value.shape(), 0.0);
      v.emplace_back(p->value.shape(), 0.0);
    }
  }

  // Bias-corrected update; the decay term is decoupled from the moments and
  // skips everything that is not a weight matrix.
  void step(const std::vector<Parameter*>& params, double lr) {
    if (params.size() != m.size()) {
      throw std::invalid_argument("optimizer tracks " + std::to_string(m.size()) +
                                  " parameters, got " + std::to_string(params.size()));
    }
    ++steps_done;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps_done));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps_done));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = *params[i];
      if (!p.grad.all_finite()) {
        throw std::invalid_argument("non-finite gradient in " + p.name);
      }
      auto w = p.value.data();
      auto g = p.grad.data();
      auto mi = m[i].data();
      auto vi = v[i].data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        mi[k] = beta1 * mi[k] + (1.0 - beta1) * g[k];
        vi[k] = beta2 * vi[k] + (1.0 - beta2) * g[k] * g[k];
        const double mhat = mi[k] / bc1;
        const double vhat = vi[k] / bc2;
        w[k] -= lr * mhat / (std::sqrt(vhat) + eps);
        if (p.kind == ParamKind::Weight) w[k] -= lr * weight_decay * w[k];
      }
    }
  }

  std::size_t steps_done = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
  std::vector<Tensor> m, v;
};

// ---------------------------------------------------------------------------
// batch schedule

// Each epoch is an independent shuffle of the dataset; the infinite item
// sequence is the epochs laid end to end. Pure in (seed, step).
inline std::vector<std::size_t> epoch_permutation(std::uint64_t seed, std::size_t epoch,
                                                  std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(Rng::derive(seed, kShuffleStream + epoch));
  rng.shuffle(idx);
  return idx;
}

inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t step,
                                              std::size_t batch_size, std::size_t n) {
  if (n == 0) throw std::invalid_argument("batch_indices: empty dataset");
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  std::size_t epoch = (step * batch_size) / n;
  std::vector<std::size_t> perm = epoch_permutation(seed, epoch, n);
  for (std::size_t k = 0; k < batch_size; ++k) {
    const std::size_t pos = step * batch_size + k;
    if (pos / n != epoch) {
      epoch = pos / n;
      perm = epoch_permutation(seed, epoch, n);
    }
    out.push_back(perm[pos % n]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint format
//
// "MVGPTCK1", u32 version, length-prefixed config text, parameter tensor
// records, optimizer step + moment records, rng state. All integers
// little-endian; tensor payloads are raw IEEE-754 bit patterns.

inline constexpr char kCheckpointMagic[8] = {'M', 'V', 'G', 'P', 'T', 'C', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt {

inline void put_u32(std::ostream& os, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((x >> (8 * i)) & 0xff));
}
inline void put_u64(std::ostream& os, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((x >> (8 * i)) & 0xff));
}
inline void put_bytes(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put_bytes(os, name);
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t i = 0; i < t.rank(); ++i) put_u64(os, t.dim(i));
  for (double x : t.data()) put_u64(os, std::bit_cast<std::uint64_t>(x));
}

inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t x = 0;
  for (int i = 0; i < 4; ++i) {
    const int c = is.get();
    if (c < 0) throw std::runtime_error("truncated checkpoint");
    x |= static_cast<std::uint32_t>(c) << (8 * i);
  }
  return x;
}
inline std::uint64_t get_u64(std::istream& is) {
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = is.get();
    if (c < 0) throw std::runtime_error("truncated checkpoint");
    x |= static_cast<std::uint64_t>(c) << (8 * i);
  }
  return x;
}
inline std::string get_bytes(std::istream& is) {
  const std::uint64_t n = get_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::uint64_t>(is.gcount()) != n) throw std::runtime_error("truncated checkpoint");
  return s;
}

// Reads one record into `into`, which must already have the right name/shape.
inline void get_tensor_into(std::istream& is, const std::string& expect_name, Tensor& into) {
  const std::string name = get_bytes(is);
  if (name != expect_name) {
    throw std::runtime_error("checkpoint tensor order mismatch: expected " + expect_name +
                             ", found " + name);
  }
  const std::uint32_t rank = get_u32(is);
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) shape[i] = get_u64(is);
  if (shape != into.shape()) {
    throw std::runtime_error("shape mismatch for " + name + ": checkpoint " + shape_str(shape) +
                             " vs model " + shape_str(into.shape()));
  }
  auto d = into.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::bit_cast<double>(get_u64(is));
}

inline void check_header(std::istream& is, const std::string& path) {
  char magic[8];
  is.read(magic, 8);
  if (is.gcount() != 8 || !std::equal(magic, magic + 8, kCheckpointMagic)) {
    throw std::runtime_error(path + " is not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = get_u32(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
}

}  // namespace ckpt

// Atomic save: serialize into memory, write a sibling temp file, rename over.
inline void save_checkpoint(const std::string& path, Model& model, const Adam& opt,
                            const Rng& mask_rng) {
  std::vector<Parameter*> params = model.parameters();
  if (opt.m.size() != params.size()) {
    throw std::invalid_argument("optimizer state does not match model parameters");
  }
  std::ostringstream buf;
  buf.write(kCheckpointMagic, 8);
  ckpt::put_u32(buf, kCheckpointVersion);
  ckpt::put_bytes(buf, config_to_text(model.cfg));
  ckpt::put_u64(buf, params.size());
  for (Parameter* p : params) ckpt::put_tensor(buf, p->name, p->value);
  ckpt::put_u64(buf, opt.steps_done);
  for (std::size_t i = 0; i < params.size(); ++i) {
    ckpt::put_tensor(buf, params[i]->name + ".m", opt.m[i]);
    ckpt::put_tensor(buf, params[i]->name + ".v", opt.v[i]);
  }
  ckpt::put_bytes(buf, mask_rng.state());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    const std::string bytes = buf.str();
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

// Restores parameters, optimizer state, and the masking stream. Returns the
// config the checkpoint was trained with.
inline Config load_checkpoint(const std::string& path, Model& model, Adam& opt, Rng& mask_rng) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  ckpt::check_header(is, path);
  Config cfg = parse_config_text(ckpt::get_bytes(is));

  std::vector<Parameter*> params = model.parameters();
  const std::uint64_t count = ckpt::get_u64(is);
  if (count != params.size()) {
    throw std::runtime_error("checkpoint stores " + std::to_string(count) +
                             " tensors, model has " + std::to_string(params.size()));
  }
  for (Parameter* p : params) ckpt::get_tensor_into(is, p->name, p->value);
  opt.steps_done = ckpt::get_u64(is);
  if (opt.m.size() != params.size()) {
    throw std::runtime_error("optimizer state does not match model parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    ckpt::get_tensor_into(is, params[i]->name + ".m", opt.m[i]);
    ckpt::get_tensor_into(is, params[i]->name + ".v", opt.v[i]);
  }
  mask_rng.set_state(ckpt::get_bytes(is));
  if (is.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("trailing bytes after checkpoint payload in " + path);
  }
  return cfg;
}

// Header-only read, for reconstructing the architecture before loading.
inline Config peek_checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  ckpt::check_header(is, path);
  return parse_config_text(ckpt::get_bytes(is));
}

// ---------------------------------------------------------------------------
// training loop

enum class TrainObjective { Pretrain, Finetune };

class Trainer {
 public:
  explicit Trainer(Model& model, TrainObjective objective = TrainObjective::Pretrain)
      : model_(model),
        objective_(objective),
        params_(model.parameters()),
        opt_(params_, model.cfg),
        mask_rng_(Rng::derive(model.cfg.seed, kMaskStream)) {}

  std::size_t steps_done() const { return opt_.steps_done; }

  // One optimizer update on the next scheduled batch.
  LossReport step(const std::vector<TrainingExample>& data) {
    if (data.empty()) throw std::invalid_argument("cannot train on an empty dataset");
    const Config& cfg = model_.cfg;
    std::vector<TrainingExample> batch;
    for (std::size_t i : batch_indices(cfg.seed, opt_.steps_done, cfg.batch_size, data.size())) {
      batch.push_back(data[i]);
    }
    Tape tape;
    LossReport r;
    if (objective_ == TrainObjective::Finetune) {
      Var loss = finetune_batch(model_, tape, batch);
      tape.backward(loss);
      r.total = loss.value().item();
    } else {
      BatchVars out = pretrain_batch(model_, tape, batch, mask_rng_);
      tape.backward(out.loss);
      const double inv = 1.0 / static_cast<double>(out.items.size());
      for (const PretrainItemVars& it : out.items) {
        if (it.fg.defined()) r.fg += it.fg.value().item() * inv;
        if (it.bg.defined()) r.bg += it.bg.value().item() * inv;
        if (it.mlm_u.defined()) r.mlm_u += it.mlm_u.value().item() * inv;
        if (it.mlm_w.defined()) r.mlm_w += it.mlm_w.value().item() * inv;
      }
      if (out.nce.defined()) r.nce = out.nce.value().item();
      r.total = out.loss.value().item();
    }
    opt_.step(params_, lr_at(opt_.steps_done + 1, cfg));
    zero_grads(params_);
    return r;
  }

  void save(const std::string& path) { save_checkpoint(path, model_, opt_, mask_rng_); }
  Config load(const std::string& path) { return load_checkpoint(path, model_, opt_, mask_rng_); }

  Model& model() { return model_; }
  Adam& optimizer() { return opt_; }
  Rng& mask_rng() { return mask_rng_; }

 private:
  Model& model_;
  TrainObjective objective_;
  std::vector<Parameter*> params_;
  Adam opt_;
  Rng mask_rng_;
};

// Restores only the parameter tensors from a checkpoint; optimizer state and
// the masking stream are parsed for format validation but discarded. This is
// the warm-start path: finetuning begins with a fresh optimizer and schedule.
inline Config load_weights(const std::string& path, Model& m) {
  Adam scratch_opt(m.parameters(), m.cfg);
  Rng scratch_rng(0);
  return load_checkpoint(path, m, scratch_opt, scratch_rng);
}

struct TrainResult {
  std::vector<LossReport> curve;
};

// Runs the trainer up to total_steps, checkpointing every checkpoint_every
// steps (0 disables) plus a final checkpoint, all under checkpoint_dir when
// one is given. Works for fresh trainers and resumed ones alike.
inline TrainResult run_training(Trainer& trainer, const std::vector<TrainingExample>& data,
                                const std::string& checkpoint_dir = "",
                                const std::function<void(std::size_t, const LossReport&)>& on_step = {}) {
  const Config& cfg = trainer.model().cfg;
  if (!checkpoint_dir.empty()) std::filesystem::create_directories(checkpoint_dir);
  auto step_path = [&](std::size_t s) {
    std::ostringstream name;
    name << checkpoint_dir << "/step_" << std::setw(6) << std::setfill('0') << s << ".ckpt";
    return name.str();
  };
  TrainResult res;
  while (trainer.steps_done() < cfg.total_steps) {
    LossReport r = trainer.step(data);
    res.curve.push_back(r);
    if (on_step) on_step(trainer.steps_done(), r);
    if (!checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
        trainer.steps_done() % cfg.checkpoint_every == 0 &&
        trainer.steps_done() < cfg.total_steps) {
      trainer.save(step_path(trainer.steps_done()));
    }
  }
  if (!checkpoint_dir.empty()) trainer.save(checkpoint_dir + "/final.ckpt");
  return res;
}

inline TrainResult train(Model& model, const std::vector<TrainingExample>& data,
                         const std::string& checkpoint_dir = "",
                         const std::function<void(std::size_t, const LossReport&)>& on_step = {}) {
  Trainer trainer(model);
  return run_training(trainer, data, checkpoint_dir, on_step);
}

}  // namespace mvgpt
