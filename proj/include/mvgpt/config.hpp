#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace mvgpt {

// Every tunable in one flat struct. Field order here is the canonical
// serialization order for config files and checkpoints.
struct Config {
  // model dimensions
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t text_layers = 2;
  std::size_t spatial_layers = 2;
  std::size_t temporal_layers = 1;
  std::size_t fusion_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t vocab_size = 0;  // filled in from the vocab file
  std::size_t max_text_len = 32;
  std::size_t max_gen_len = 32;
  bool tie_output_proj = false;

  // visual front end
  bool visual_input = true;
  std::size_t frame_h = 32;
  std::size_t frame_w = 32;
  std::size_t frame_channels = 3;
  std::size_t tubelet_h = 16;
  std::size_t tubelet_w = 16;
  std::size_t tubelet_t = 4;
  std::size_t max_frames = 32;  // bounds the temporal position table
  double fps = 1.0;

  // triplet extraction
  double min_span_seconds = 5.0;
  bool keep_short_prefix = true;

  // objectives
  bool use_fg = true;
  bool use_bg = true;
  bool use_mlm_u = true;
  bool use_mlm_w = true;
  bool use_nce = true;
  bool mlm_on_encoder = false;
  double mask_rate = 0.15;
  double nce_temperature = 0.1;
  double nce_weight = 0.001;

  // optimization
  double lr_peak = 3e-3;
  std::size_t warmup_steps = 500;
  std::size_t total_steps = 2000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // 0 = final checkpoint only

  // decoding
  std::size_t beam = 5;
  double length_alpha = 0.6;
};

namespace detail {

// size_t and uint64_t are the same type on this platform, so one unsigned
// alternative covers both seed and the structural sizes
using ConfigMember = std::variant<std::uint64_t Config::*, double Config::*, bool Config::*>;

struct ConfigField {
  const char* key;
  ConfigMember member;
};

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      {"dim", &Config::dim},
      {"heads", &Config::heads},
      {"ffn_mult", &Config::ffn_mult},
      {"text_layers", &Config::text_layers},
      {"spatial_layers", &Config::spatial_layers},
      {"temporal_layers", &Config::temporal_layers},
      {"fusion_layers", &Config::fusion_layers},
      {"decoder_layers", &Config::decoder_layers},
      {"vocab_size", &Config::vocab_size},
      {"max_text_len", &Config::max_text_len},
      {"max_gen_len", &Config::max_gen_len},
      {"tie_output_proj", &Config::tie_output_proj},
      {"visual_input", &Config::visual_input},
      {"frame_h", &Config::frame_h},
      {"frame_w", &Config::frame_w},
      {"frame_channels", &Config::frame_channels},
      {"tubelet_h", &Config::tubelet_h},
      {"tubelet_w", &Config::tubelet_w},
      {"tubelet_t", &Config::tubelet_t},
      {"max_frames", &Config::max_frames},
      {"fps", &Config::fps},
      {"min_span_seconds", &Config::min_span_seconds},
      {"keep_short_prefix", &Config::keep_short_prefix},
      {"use_fg", &Config::use_fg},
      {"use_bg", &Config::use_bg},
      {"use_mlm_u", &Config::use_mlm_u},
      {"use_mlm_w", &Config::use_mlm_w},
      {"use_nce", &Config::use_nce},
      {"mlm_on_encoder", &Config::mlm_on_encoder},
      {"mask_rate", &Config::mask_rate},
      {"nce_temperature", &Config::nce_temperature},
      {"nce_weight", &Config::nce_weight},
      {"lr_peak", &Config::lr_peak},
      {"warmup_steps", &Config::warmup_steps},
      {"total_steps", &Config::total_steps},
      {"beta1", &Config::beta1},
      {"beta2", &Config::beta2},
      {"adam_eps", &Config::adam_eps},
      {"weight_decay", &Config::weight_decay},
      {"batch_size", &Config::batch_size},
      {"seed", &Config::seed},
      {"checkpoint_every", &Config::checkpoint_every},
      {"beam", &Config::beam},
      {"length_alpha", &Config::length_alpha},
  };
  return fields;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline void set_config_value(Config& c, const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (key != f.key) continue;
    try {
      std::size_t used = 0;
      if (auto m = std::get_if<std::uint64_t Config::*>(&f.member)) {
        unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing junk");
        c.*(*m) = v;
      } else if (auto m2 = std::get_if<double Config::*>(&f.member)) {
        double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing junk");
        c.*(*m2) = v;
      } else if (auto m3 = std::get_if<bool Config::*>(&f.member)) {
        if (value == "true" || value == "1") {
          c.*(*m3) = true;
        } else if (value == "false" || value == "0") {
          c.*(*m3) = false;
        } else {
          throw std::invalid_argument("expected true/false");
        }
      }
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad value '" + value + "' for key '" + key + "'");
    }
    return;
  }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

inline std::string get_config_value(const Config& c, const detail::ConfigField& f) {
  if (auto m = std::get_if<std::uint64_t Config::*>(&f.member)) return std::to_string(c.*(*m));
  if (auto m2 = std::get_if<double Config::*>(&f.member)) return detail::format_double(c.*(*m2));
  auto m3 = std::get_if<bool Config::*>(&f.member);
  return c.*(*m3) ? "true" : "false";
}

// `key = value` lines; '#' starts a comment; unknown keys are errors.
inline Config parse_config_text(const std::string& text) {
  Config c;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: malformed line " + std::to_string(lineno) +
                                  " (expected key = value): '" + line + "'");
    }
    set_config_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

// "key=value" as passed to --set
inline void apply_override(Config& c, const std::string& kv) {
  std::size_t eq = kv.find('=');
  if (eq == std::string::npos) {
    throw std::invalid_argument("config: override '" + kv + "' is not key=value");
  }
  set_config_value(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

// Canonical text form; round-trips through parse_config_text bit-exactly
// because doubles print with 17 significant digits.
inline std::string config_to_text(const Config& c) {
  std::ostringstream os;
  for (const auto& f : detail::config_fields()) {
    os << f.key << " = " << get_config_value(c, f) << '\n';
  }
  return os.str();
}

inline void validate_config(const Config& c) {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (c.dim == 0 || c.heads == 0) fail("dim and heads must be positive");
  if (c.dim % c.heads != 0) {
    fail("heads (" + std::to_string(c.heads) + ") must divide dim (" + std::to_string(c.dim) + ")");
  }
  if (c.max_text_len < 2) fail("max_text_len must be at least 2");
  if (c.max_gen_len < 1) fail("max_gen_len must be at least 1");
  if (c.visual_input) {
    if (c.tubelet_h == 0 || c.tubelet_w == 0 || c.tubelet_t == 0) fail("tubelet dims must be positive");
    if (c.frame_h % c.tubelet_h != 0 || c.frame_w % c.tubelet_w != 0) {
      fail("frame " + std::to_string(c.frame_h) + "x" + std::to_string(c.frame_w) +
           " must tile by tubelet " + std::to_string(c.tubelet_h) + "x" + std::to_string(c.tubelet_w));
    }
    if (c.frame_channels == 0) fail("frame_channels must be positive");
    if (c.max_frames < c.tubelet_t || c.max_frames % c.tubelet_t != 0) {
      fail("max_frames must be a positive multiple of tubelet_t");
    }
    if (c.fps <= 0.0) fail("fps must be positive");
  }
  if (!(c.mask_rate > 0.0 && c.mask_rate < 1.0)) fail("mask_rate must lie in (0, 1)");
  if (c.nce_temperature <= 0.0) fail("nce_temperature must be positive");
  if (c.total_steps == 0) fail("total_steps must be positive");
  if (c.warmup_steps > c.total_steps) fail("warmup_steps cannot exceed total_steps");
  if (c.batch_size == 0) fail("batch_size must be positive");
  if (c.beam == 0) fail("beam must be at least 1");
  if (c.min_span_seconds <= 0.0) fail("min_span_seconds must be positive");
}

}  // namespace mvgpt
