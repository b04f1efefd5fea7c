#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "nlip/errors.hpp"

namespace nlip {

/// Everything a run needs. Defaults are the desk-scale settings.
struct PipelineConfig {
  // data
  std::string corpus;  // empty: generate from the keys below
  int n = 200;
  int num_concepts = 8;
  int d_img = 16;
  int patch_count = 16;
  int concepts_per_image = 3;
  double noise_std = 0.1;
  double mismatch_rate = 0.4;
  double incomplete_rate = 0.0;
  double drop_fraction = 0.5;
  std::uint64_t seed = 1;

  // schedule
  int E_e = 2;
  int E_t = 8;
  int E_f = 4;
  double alpha = 1.0;
  double beta = 1.0;
  double lambda = 0.5;
  int batch_size = 32;
  double base_lr = 0.003;
  double min_lr = 0.0;
  double weight_decay = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double stage3_lr_scale = 0.1;
  int stage3_warmup_cap = 4000;

  // model
  int width = 32;
  int d_embed = 32;
  int blocks = 2;
  int decoder_blocks = 1;
  int mae_depth = 1;
  int d_dec = 16;
  double mask_ratio = 0.5;
  bool use_positional = true;
  double span_lambda = 3.0;

  // noise model
  int gmm_max_iters = 200;
  double gmm_tol = 1e-9;
  bool noise_adaptive = true;  // false: w forced to zero in every NITC epoch

  // concepts and captioning
  int top_k = 5;
  int min_frequency = 5;
  double clean_fraction = 0.05;
  int caption_epochs = 4;
  double caption_lr = 0.003;
  int max_caption_len = 24;
  bool concept_conditioning = true;
  bool completion = true;  // false: stage 3 trains on the original captions

  // evaluation and execution
  int eval_size = 200;
  int threads = 1;

  void validate() const;
};

namespace detail {

using FieldRef = std::variant<int PipelineConfig::*, double PipelineConfig::*, bool PipelineConfig::*,
                              std::string PipelineConfig::*, std::uint64_t PipelineConfig::*>;

inline const std::vector<std::pair<std::string, FieldRef>>& config_fields() {
  using C = PipelineConfig;
  static const std::vector<std::pair<std::string, FieldRef>> fields = {
      {"corpus", &C::corpus},
      {"n", &C::n},
      {"num_concepts", &C::num_concepts},
      {"d_img", &C::d_img},
      {"patch_count", &C::patch_count},
      {"concepts_per_image", &C::concepts_per_image},
      {"noise_std", &C::noise_std},
      {"mismatch_rate", &C::mismatch_rate},
      {"incomplete_rate", &C::incomplete_rate},
      {"drop_fraction", &C::drop_fraction},
      {"seed", &C::seed},
      {"E_e", &C::E_e},
      {"E_t", &C::E_t},
      {"E_f", &C::E_f},
      {"alpha", &C::alpha},
      {"beta", &C::beta},
      {"lambda", &C::lambda},
      {"batch_size", &C::batch_size},
      {"base_lr", &C::base_lr},
      {"min_lr", &C::min_lr},
      {"weight_decay", &C::weight_decay},
      {"adam_beta1", &C::adam_beta1},
      {"adam_beta2", &C::adam_beta2},
      {"stage3_lr_scale", &C::stage3_lr_scale},
      {"stage3_warmup_cap", &C::stage3_warmup_cap},
      {"width", &C::width},
      {"d_embed", &C::d_embed},
      {"blocks", &C::blocks},
      {"decoder_blocks", &C::decoder_blocks},
      {"mae_depth", &C::mae_depth},
      {"d_dec", &C::d_dec},
      {"mask_ratio", &C::mask_ratio},
      {"use_positional", &C::use_positional},
      {"span_lambda", &C::span_lambda},
      {"gmm_max_iters", &C::gmm_max_iters},
      {"gmm_tol", &C::gmm_tol},
      {"noise_adaptive", &C::noise_adaptive},
      {"top_k", &C::top_k},
      {"min_frequency", &C::min_frequency},
      {"clean_fraction", &C::clean_fraction},
      {"caption_epochs", &C::caption_epochs},
      {"caption_lr", &C::caption_lr},
      {"max_caption_len", &C::max_caption_len},
      {"concept_conditioning", &C::concept_conditioning},
      {"completion", &C::completion},
      {"eval_size", &C::eval_size},
      {"threads", &C::threads},
  };
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::config_fields()) out.push_back(k);
  return out;
}

/// Sets one field from its text form. ConfigError on unknown keys or values
/// that do not parse as the field's type.
inline void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, ref] : detail::config_fields()) {
    if (name != key) continue;
    const auto bad = [&] { return ConfigError("bad value '" + value + "' for key " + key); };
    std::visit(
        [&](auto member) {
          using T = std::remove_cvref_t<decltype(cfg.*member)>;
          if constexpr (std::is_same_v<T, std::string>) {
            cfg.*member = value;
          } else if constexpr (std::is_same_v<T, bool>) {
            if (value == "true" || value == "1") cfg.*member = true;
            else if (value == "false" || value == "0") cfg.*member = false;
            else throw bad();
          } else {
            std::size_t used = 0;
            try {
              if constexpr (std::is_same_v<T, int>) cfg.*member = std::stoi(value, &used);
              else if constexpr (std::is_same_v<T, double>) cfg.*member = std::stod(value, &used);
              else {
                if (!value.empty() && value[0] == '-') throw bad();
                cfg.*member = std::stoull(value, &used);
              }
            } catch (const std::logic_error&) {
              throw bad();
            }
            if (used != value.size()) throw bad();
          }
        },
        ref);
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const PipelineConfig& cfg, const std::string& key) {
  for (const auto& [name, ref] : detail::config_fields()) {
    if (name != key) continue;
    return std::visit(
        [&](auto member) -> std::string {
          using T = std::remove_cvref_t<decltype(cfg.*member)>;
          if constexpr (std::is_same_v<T, std::string>) return cfg.*member;
          else if constexpr (std::is_same_v<T, bool>) return cfg.*member ? "true" : "false";
          else if constexpr (std::is_same_v<T, double>) return detail::format_double(cfg.*member);
          else return std::to_string(cfg.*member);
        },
        ref);
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// key = value lines; '#' starts a comment. Later duplicates win.
inline std::map<std::string, std::string> parse_key_values(std::istream& in) {
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(line_no, "expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ParseError(line_no, "empty key");
    out[key] = detail::trim(line.substr(eq + 1));
  }
  return out;
}

inline PipelineConfig apply_key_values(PipelineConfig cfg, const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) set_config_value(cfg, k, v);
  return cfg;
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  return apply_key_values(PipelineConfig{}, parse_key_values(in));
}

/// Every key, in declaration order; parsing the result gives back `cfg`.
inline std::string config_to_text(const PipelineConfig& cfg) {
  std::ostringstream out;
  for (const auto& [k, _] : detail::config_fields()) out << k << " = " << get_config_value(cfg, k) << '\n';
  return out.str();
}

inline void PipelineConfig::validate() const {
  const auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(E_e >= 0 && E_t >= 0 && E_f >= 0, "epoch counts must be >= 0");
  need(lambda >= 0.0 && lambda < 1.0, "lambda must lie in [0, 1)");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(base_lr > 0.0 && min_lr >= 0.0 && caption_lr > 0.0, "learning rates must be positive");
  need(stage3_lr_scale > 0.0 && stage3_warmup_cap >= 0, "bad stage-3 schedule");
  need(mask_ratio >= 0.0 && mask_ratio < 1.0, "mask_ratio must lie in [0, 1)");
  need(n >= 1 || !corpus.empty(), "n must be >= 1");
  need(mismatch_rate >= 0.0 && incomplete_rate >= 0.0 && mismatch_rate + incomplete_rate <= 1.0,
       "noise rates must be non-negative and sum to at most 1");
  need(drop_fraction > 0.0 && drop_fraction <= 1.0, "drop_fraction must lie in (0, 1]");
  need(top_k >= 1 && min_frequency >= 1, "top_k and min_frequency must be >= 1");
  need(clean_fraction > 0.0 && clean_fraction <= 1.0, "clean_fraction must lie in (0, 1]");
  need(caption_epochs >= 0 && max_caption_len >= 2 && max_caption_len <= 77, "bad captioning settings");
  need(eval_size >= 1, "eval_size must be >= 1");
  need(threads >= 1, "threads must be >= 1");
  need(width >= 1 && d_embed >= 1 && d_dec >= 1 && blocks >= 0 && decoder_blocks >= 0 && mae_depth >= 0,
       "bad model dimensions");
  need(gmm_max_iters >= 1 && gmm_tol >= 0.0, "bad mixture-fit settings");
}

}  // namespace nlip
