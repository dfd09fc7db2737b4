// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "moelora/config.hpp"

#include <fstream>
#include <functional>
#include <map>

#include "moelora/error.hpp"

namespace moelora {

std::string to_string(AdapterKind kind) {
  return kind == AdapterKind::kLora ? "lora" : "moelora";
}

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kAdam ? "adam" : "sgd";
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  require(steps >= 1, "steps must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(learning_rate >= 0.0, "learning_rate must be >= 0");
  require(grad_clip >= 0.0, "grad_clip must be >= 0");
  require(d >= 1, "d must be >= 1");
  require(n_layers >= 1, "n_layers must be >= 1");
  require(rank >= 1, "rank must be >= 1");
  require(n_experts >= 1, "n_experts must be >= 1");
  if (adapter == AdapterKind::kMoELora) {
    require(top_k >= 1 && top_k <= n_experts, "top_k must be in [1, n_experts]");
  }
  require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  require(aux.tau > 0.0, "tau must be > 0");
  require(aux.alpha >= 0.0, "alpha must be >= 0");
  require(aux.beta >= 0.0, "beta must be >= 0");
  require(n_clusters >= 1, "n_clusters must be >= 1");
  require(noise_std >= 0.0 && input_std >= 0.0, "standard deviations must be >= 0");
  require(delta_rank >= 1, "delta_rank must be >= 1");
  require(eval_batches >= 1, "eval_batches must be >= 1");
}

TaskSpec TrainConfig::task_spec() const {
  TaskSpec spec;
  spec.d = d;
  spec.n_clusters = n_clusters;
  spec.noise_std = noise_std;
  spec.delta_scale = delta_scale;
  spec.delta_rank = delta_rank;
  spec.cluster_spread = cluster_spread;
  spec.input_std = input_std;
  spec.seed = SeededRng(seed).fork(1).seed();
  return spec;
}

std::uint64_t TrainConfig::trainable_params() const {
  return trainable_param_count(adapter, n_experts, rank, d, n_layers);
}

nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{
      {"adapter", to_string(c.adapter)},
      {"steps", c.steps},
      {"batch_size", c.batch_size},
      {"learning_rate", c.learning_rate},
      {"optimizer", to_string(c.optimizer)},
      {"grad_clip", c.grad_clip},
      {"d", c.d},
      {"n_layers", c.n_layers},
      {"n_experts", c.n_experts},
      {"rank", c.rank},
      {"top_k", c.top_k},
      {"dropout", c.dropout},
      {"scaling", c.scaling},
      {"renormalize_topk", c.renormalize_topk},
      {"alpha", c.aux.alpha},
      {"beta", c.aux.beta},
      {"tau", c.aux.tau},
      {"queue_capacity", c.aux.queue_capacity},
      {"normalize_embeddings", c.aux.normalize_embeddings},
      {"balance_count_topk", c.aux.balance_count_topk},
      {"n_clusters", c.n_clusters},
      {"noise_std", c.noise_std},
      {"delta_scale", c.delta_scale},
      {"delta_rank", c.delta_rank},
      {"cluster_spread", c.cluster_spread},
      {"input_std", c.input_std},
      {"eval_batches", c.eval_batches},
      {"seed", c.seed},
  };
}

namespace {

using Setter = std::function<void(TrainConfig&, const nlohmann::json&)>;

template <typename T>
Setter set(T TrainConfig::*field) {
  return [field](TrainConfig& c, const nlohmann::json& v) { c.*field = v.get<T>(); };
}

template <typename T>
Setter set_aux(T AuxLossConfig::*field) {
  return [field](TrainConfig& c, const nlohmann::json& v) { c.aux.*field = v.get<T>(); };
}

// nlohmann would silently wrap -1.
bool is_count(const nlohmann::json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

Setter set_count(std::size_t TrainConfig::*field) {
  return [field](TrainConfig& c, const nlohmann::json& v) {
    if (!is_count(v)) throw ConfigError("expected a non-negative integer");
    c.*field = v.get<std::size_t>();
  };
}

Setter set_real(double TrainConfig::*field) {
  return [field](TrainConfig& c, const nlohmann::json& v) {
    if (!v.is_number()) throw ConfigError("expected a number");
    c.*field = v.get<double>();
  };
}

Setter set_aux_real(double AuxLossConfig::*field) {
  return [field](TrainConfig& c, const nlohmann::json& v) {
    if (!v.is_number()) throw ConfigError("expected a number");
    c.aux.*field = v.get<double>();
  };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"adapter",
       [](TrainConfig& c, const nlohmann::json& v) {
         const auto s = v.get<std::string>();
         if (s == "moelora") c.adapter = AdapterKind::kMoELora;
         else if (s == "lora") c.adapter = AdapterKind::kLora;
         else throw ConfigError("adapter must be 'moelora' or 'lora', got '" + s + "'");
       }},
      {"optimizer",
       [](TrainConfig& c, const nlohmann::json& v) {
         const auto s = v.get<std::string>();
         if (s == "sgd") c.optimizer = OptimizerKind::kSgd;
         else if (s == "adam") c.optimizer = OptimizerKind::kAdam;
         else throw ConfigError("optimizer must be 'sgd' or 'adam', got '" + s + "'");
       }},
      {"steps", set_count(&TrainConfig::steps)},
      {"batch_size", set_count(&TrainConfig::batch_size)},
      {"learning_rate", set_real(&TrainConfig::learning_rate)},
      {"grad_clip", set_real(&TrainConfig::grad_clip)},
      {"d", set_count(&TrainConfig::d)},
      {"n_layers", set_count(&TrainConfig::n_layers)},
      {"n_experts", set_count(&TrainConfig::n_experts)},
      {"rank", set_count(&TrainConfig::rank)},
      {"top_k", set_count(&TrainConfig::top_k)},
      {"dropout", set_real(&TrainConfig::dropout)},
      {"scaling", set_real(&TrainConfig::scaling)},
      {"renormalize_topk", set(&TrainConfig::renormalize_topk)},
      {"alpha", set_aux_real(&AuxLossConfig::alpha)},
      {"beta", set_aux_real(&AuxLossConfig::beta)},
      {"tau", set_aux_real(&AuxLossConfig::tau)},
      {"queue_capacity",
       [](TrainConfig& c, const nlohmann::json& v) {
         if (!is_count(v)) throw ConfigError("expected a non-negative integer");
         c.aux.queue_capacity = v.get<std::size_t>();
       }},
      {"normalize_embeddings", set_aux(&AuxLossConfig::normalize_embeddings)},
      {"balance_count_topk", set_aux(&AuxLossConfig::balance_count_topk)},
      {"n_clusters", set_count(&TrainConfig::n_clusters)},
      {"noise_std", set_real(&TrainConfig::noise_std)},
      {"delta_scale", set_real(&TrainConfig::delta_scale)},
      {"delta_rank", set_count(&TrainConfig::delta_rank)},
      {"cluster_spread", set_real(&TrainConfig::cluster_spread)},
      {"input_std", set_real(&TrainConfig::input_std)},
      {"eval_batches", set_count(&TrainConfig::eval_batches)},
      {"seed",
       [](TrainConfig& c, const nlohmann::json& v) {
         if (!is_count(v)) throw ConfigError("expected a non-negative integer");
         c.seed = v.get<std::uint64_t>();
       }},
  };
  return table;
}

}  // namespace

TrainConfig apply_config_json(const TrainConfig& base, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig cfg = base;
  for (const auto& [key, value] : j.items()) {
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      it->second(cfg, value);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config file " + path.string() + ": " + e.what());
  }
  try {
    return apply_config_json(TrainConfig{}, j);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace moelora
