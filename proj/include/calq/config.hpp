#pragma once

#include <cstdint>
#include <set>
#include <string>

#include <json.hpp>

#include "calq/adaptive_round.hpp"
#include "calq/error.hpp"
#include "calq/paired_transform.hpp"
#include "calq/quantizer.hpp"
#include "calq/single_transform.hpp"

namespace calq {

enum class Method { uniform, random, cafeq };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::uniform: return "uniform";
    case Method::random: return "random";
    case Method::cafeq: return "cafeq";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "uniform") return Method::uniform;
  if (s == "random") return Method::random;
  if (s == "cafeq") return Method::cafeq;
  throw ConfigError("unknown method '" + s + "' (expected uniform, random or cafeq)");
}

inline const char* to_string(GroupKind k) {
  switch (k) {
    case GroupKind::per_tensor: return "per_tensor";
    case GroupKind::per_channel: return "per_channel";
    case GroupKind::subchannel: return "subchannel";
  }
  return "?";
}

inline GroupKind parse_group_kind(const std::string& s) {
  if (s == "per_tensor") return GroupKind::per_tensor;
  if (s == "per_channel") return GroupKind::per_channel;
  if (s == "subchannel") return GroupKind::subchannel;
  throw ConfigError("unknown granularity '" + s + "'");
}

inline PairedLoss parse_paired_loss(const std::string& s) {
  if (s == "logsumexp") return PairedLoss::log_sum_exp;
  if (s == "sumsq") return PairedLoss::sum_sq;
  if (s == "sumsq_weighted") return PairedLoss::sum_sq_weighted;
  throw ConfigError("unknown paired loss '" + s + "' (expected logsumexp, sumsq or sumsq_weighted)");
}

// Everything a quantization run depends on. Tensor files and the manifest are the only other inputs.
struct PipelineConfig {
  Method method = Method::cafeq;
  std::uint64_t seed = 0;
  int bits = 4;
  GroupKind granularity = GroupKind::per_channel;
  std::size_t group_block_size = 128;  // used by subchannel granularity
  std::size_t transform_block_size = 128;
  bool quantize_embedding = false;
  int threads = 1;

  SingleLossConfig single{.bits = 4, .adam = {.lr = 1e-2}};

  PairedLossKind paired_loss = PairedLossKind::log_sum_exp(5.0);
  PairedOptConfig paired{};

  bool adaptive_enabled = true;
  AdaptiveRoundConfig adaptive{};

  // Groups for a single-transform tensor: one per row of M·W (or blocks of it).
  QuantConfig single_quant() const {
    QuantConfig q;
    q.bits = bits;
    switch (granularity) {
      case GroupKind::per_tensor: q.granularity = Granularity::per_tensor(); break;
      case GroupKind::per_channel: q.granularity = Granularity::per_channel(Axis::rows); break;
      case GroupKind::subchannel: q.granularity = Granularity::subchannel(group_block_size, Axis::rows); break;
    }
    return q;
  }

  PairQuantConfig pair_quant() const {
    switch (granularity) {
      case GroupKind::per_tensor: return PairQuantConfig::per_tensor(bits);
      case GroupKind::per_channel: return PairQuantConfig::per_channel(bits);
      case GroupKind::subchannel: return PairQuantConfig::subchannel(bits, group_block_size);
    }
    return PairQuantConfig::per_channel(bits);
  }
};

// Copies the shared quantizer settings into the per-module configs. Call after editing bits or
// granularity directly.
inline void sync_derived(PipelineConfig& c) {
  c.single.bits = c.bits;
  c.paired.track = c.pair_quant();
  c.adaptive.quant = c.pair_quant();
}

inline void validate(const PipelineConfig& c) {
  if (c.bits < 1 || c.bits > 8) throw ConfigError("config: bits must lie in [1, 8]");
  if (c.granularity == GroupKind::subchannel && c.group_block_size == 0) throw ConfigError("config: group block size must be positive");
  if (c.transform_block_size == 0) throw ConfigError("config: transform block size must be positive");
  if (c.threads < 1) throw ConfigError("config: threads must be >= 1");
  validate(c.single);
  validate(c.paired);
  if (c.adaptive.iterations < 0) throw ConfigError("config: adaptive iterations must be non-negative");
  if (!(c.adaptive.rcond > 0.0 && c.adaptive.rcond < 1.0)) throw ConfigError("config: rcond must lie in (0, 1)");
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "' in " + where);
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

// Worker count is a scheduling choice, not a result input, so it is not serialized.
inline nlohmann::json config_to_json(const PipelineConfig& c) {
  using nlohmann::json;
  json quant = {{"bits", c.bits}, {"granularity", to_string(c.granularity)}};
  if (c.granularity == GroupKind::subchannel) quant["block_size"] = c.group_block_size;
  return json{
      {"method", to_string(c.method)},
      {"seed", c.seed},
      {"quant", quant},
      {"transform_block_size", c.transform_block_size},
      {"quantize_embedding", c.quantize_embedding},
      {"single",
       {{"iterations", c.single.iterations},
        {"lr", c.single.adam.lr},
        {"beta1", c.single.adam.beta1},
        {"beta2", c.single.adam.beta2},
        {"eps", c.single.adam.eps},
        {"inf_norm", c.single.inf_norm == InfNormMode::smoothed ? "smoothed" : "exact"},
        {"tau", c.single.tau},
        {"hadamard_count", c.single.hadamard_count}}},
      {"paired",
       {{"loss", to_string(c.paired_loss.loss)},
        {"t", c.paired_loss.t},
        {"optimizer", c.paired.optimizer == PairedOptimizer::cayley ? "cayley" : "adam"},
        {"lr", c.paired.lr},
        {"beta1", c.paired.beta1},
        {"beta2", c.paired.beta2},
        {"eps", c.paired.eps},
        {"momentum", c.paired.momentum},
        {"lambda_orth", c.paired.lambda_orth},
        {"iterations", c.paired.iterations},
        {"checkpoint_every", c.paired.checkpoint_every}}},
      {"adaptive",
       {{"enabled", c.adaptive_enabled},
        {"iterations", c.adaptive.iterations},
        {"rcond", c.adaptive.rcond},
        {"early_stop", c.adaptive.early_stop},
        {"early_stop_tolerance", c.adaptive.early_stop_tolerance}}},
  };
}

// Missing keys keep their defaults; unknown keys are rejected so typos do not pass silently.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
  using detail::read_opt;
  PipelineConfig c;
  try {
    detail::reject_unknown_keys(j, {"method", "seed", "quant", "transform_block_size", "quantize_embedding", "threads", "single", "paired", "adaptive"},
                                "config");
    if (j.contains("method")) c.method = parse_method(j.at("method").get<std::string>());
    read_opt(j, "seed", c.seed);
    read_opt(j, "transform_block_size", c.transform_block_size);
    read_opt(j, "quantize_embedding", c.quantize_embedding);
    read_opt(j, "threads", c.threads);
    if (j.contains("quant")) {
      const auto& q = j.at("quant");
      detail::reject_unknown_keys(q, {"bits", "granularity", "block_size"}, "quant");
      read_opt(q, "bits", c.bits);
      if (q.contains("granularity")) c.granularity = parse_group_kind(q.at("granularity").get<std::string>());
      read_opt(q, "block_size", c.group_block_size);
    }
    if (j.contains("single")) {
      const auto& s = j.at("single");
      detail::reject_unknown_keys(s, {"iterations", "lr", "beta1", "beta2", "eps", "inf_norm", "tau", "hadamard_count"}, "single");
      read_opt(s, "iterations", c.single.iterations);
      read_opt(s, "lr", c.single.adam.lr);
      read_opt(s, "beta1", c.single.adam.beta1);
      read_opt(s, "beta2", c.single.adam.beta2);
      read_opt(s, "eps", c.single.adam.eps);
      read_opt(s, "tau", c.single.tau);
      read_opt(s, "hadamard_count", c.single.hadamard_count);
      if (s.contains("inf_norm")) {
        const auto mode = s.at("inf_norm").get<std::string>();
        if (mode == "exact") c.single.inf_norm = InfNormMode::exact_subgradient;
        else if (mode == "smoothed") c.single.inf_norm = InfNormMode::smoothed;
        else throw ConfigError("config: single.inf_norm must be exact or smoothed");
      }
    }
    if (j.contains("paired")) {
      const auto& p = j.at("paired");
      detail::reject_unknown_keys(p, {"loss", "t", "optimizer", "lr", "beta1", "beta2", "eps", "momentum", "lambda_orth", "iterations", "checkpoint_every"},
                                  "paired");
      if (p.contains("loss")) c.paired_loss.loss = parse_paired_loss(p.at("loss").get<std::string>());
      read_opt(p, "t", c.paired_loss.t);
      if (p.contains("optimizer")) {
        const auto opt = p.at("optimizer").get<std::string>();
        if (opt == "adam") c.paired.optimizer = PairedOptimizer::adam;
        else if (opt == "cayley") c.paired.optimizer = PairedOptimizer::cayley;
        else throw ConfigError("config: paired.optimizer must be adam or cayley");
      }
      read_opt(p, "lr", c.paired.lr);
      read_opt(p, "beta1", c.paired.beta1);
      read_opt(p, "beta2", c.paired.beta2);
      read_opt(p, "eps", c.paired.eps);
      read_opt(p, "momentum", c.paired.momentum);
      read_opt(p, "lambda_orth", c.paired.lambda_orth);
      read_opt(p, "iterations", c.paired.iterations);
      read_opt(p, "checkpoint_every", c.paired.checkpoint_every);
    }
    if (j.contains("adaptive")) {
      const auto& a = j.at("adaptive");
      detail::reject_unknown_keys(a, {"enabled", "iterations", "rcond", "early_stop", "early_stop_tolerance"}, "adaptive");
      read_opt(a, "enabled", c.adaptive_enabled);
      read_opt(a, "iterations", c.adaptive.iterations);
      read_opt(a, "rcond", c.adaptive.rcond);
      read_opt(a, "early_stop", c.adaptive.early_stop);
      read_opt(a, "early_stop_tolerance", c.adaptive.early_stop_tolerance);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  sync_derived(c);
  validate(c);
  return c;
}

}  // namespace calq
