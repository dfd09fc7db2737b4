// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "moelora/moelora.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <new>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "moelora/ablation.hpp"
#include "moelora/checkpoint.hpp"
#include "moelora/config.hpp"
#include "moelora/error.hpp"
#include "moelora/tracer.hpp"
#include "moelora/trainer.hpp"

struct moelora_config {
  moelora::TrainConfig cfg;
};

struct moelora_session {
  explicit moelora_session(const moelora::TrainConfig& cfg) : trainer(cfg) {}
  explicit moelora_session(const moelora::Checkpoint& cp)
      : trainer(moelora::Trainer::from_checkpoint(cp)) {}
  moelora::Trainer trainer;
};

namespace {

thread_local std::string g_last_error;

moelora_status status_for(moelora::ErrorKind kind) {
  switch (kind) {
    case moelora::ErrorKind::kDimension: return MOELORA_DIMENSION;
    case moelora::ErrorKind::kParameter: return MOELORA_INVALID_ARGUMENT;
    case moelora::ErrorKind::kConfig: return MOELORA_CONFIG;
    case moelora::ErrorKind::kIo: return MOELORA_IO;
    case moelora::ErrorKind::kState: return MOELORA_STATE;
    case moelora::ErrorKind::kNumeric: return MOELORA_NUMERIC;
  }
  return MOELORA_INTERNAL;
}

template <typename F>
moelora_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return MOELORA_OK;
  } catch (const moelora::Error& e) {
    g_last_error = e.what();
    return status_for(e.kind());
  } catch (const nlohmann::json::exception& e) {
    g_last_error = e.what();
    return MOELORA_CONFIG;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return MOELORA_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return MOELORA_INTERNAL;
  } catch (...) {
    g_last_error = "unknown failure";
    return MOELORA_INTERNAL;
  }
}

void require(const void* p, const char* name) {
  if (p == nullptr) throw moelora::ParameterError(std::string(name) + " is null");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

nlohmann::json parse_json(const char* text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw moelora::ConfigError(std::string("malformed JSON: ") + e.what());
  }
}

void fill(moelora_step_report* out, const moelora::StepReport& r) {
  out->step = r.step;
  out->task_loss = r.task_loss;
  out->balance_loss = r.balance_loss;
  out->contrastive_loss = r.contrastive_loss;
  out->total_loss = r.total_loss;
}

void fill(moelora_eval_report* out, const moelora::EvalReport& r) {
  out->task_loss = r.task_loss;
  out->base_loss = r.base_loss;
  out->nmi = r.routing.nmi;
  const auto sep = r.routing.mean_separation();
  out->separation_intra = sep ? sep->intra : std::nan("");
  out->separation_inter = sep ? sep->inter : std::nan("");
  double entropy = 0.0, max_load = 0.0;
  for (const auto& [layer, lr] : r.routing.layers) {
    entropy += lr.entropy;
    if (!lr.load_fraction.empty())
      max_load += *std::max_element(lr.load_fraction.begin(), lr.load_fraction.end());
  }
  const double layers = static_cast<double>(r.routing.layers.size());
  out->load_entropy = layers > 0 ? entropy / layers : 0.0;
  out->max_load_fraction = layers > 0 ? max_load / layers : 0.0;
}

}  // namespace

extern "C" {

const char* moelora_last_error(void) { return g_last_error.c_str(); }

void moelora_string_free(char* s) { std::free(s); }

moelora_status moelora_config_default(moelora_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new moelora_config{};
  });
}

moelora_status moelora_config_from_file(const char* path, moelora_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new moelora_config{moelora::load_config_file(path)};
  });
}

moelora_status moelora_config_from_json(const char* json, moelora_config** out) {
  return guarded([&] {
    require(json, "json");
    require(out, "out");
    *out = new moelora_config{moelora::apply_config_json(moelora::TrainConfig{}, parse_json(json))};
  });
}

moelora_status moelora_config_apply_json(moelora_config* cfg, const char* json) {
  return guarded([&] {
    require(cfg, "cfg");
    require(json, "json");
    cfg->cfg = moelora::apply_config_json(cfg->cfg, parse_json(json));
  });
}

moelora_status moelora_config_to_json(const moelora_config* cfg, char** out) {
  return guarded([&] {
    require(cfg, "cfg");
    require(out, "out");
    *out = dup_string(moelora::to_json(cfg->cfg).dump(2));
  });
}

moelora_status moelora_config_trainable_params(const moelora_config* cfg, uint64_t* out) {
  return guarded([&] {
    require(cfg, "cfg");
    require(out, "out");
    *out = cfg->cfg.trainable_params();
  });
}

void moelora_config_destroy(moelora_config* cfg) { delete cfg; }

moelora_status moelora_param_count(uint64_t d, uint64_t matrices, uint64_t n_experts,
                                   uint64_t rank, uint64_t* out) {
  return guarded([&] {
    require(out, "out");
    if (d == 0 || rank == 0) throw moelora::ParameterError("d and rank must be positive");
    *out = n_experts == 0
               ? moelora::trainable_param_count(moelora::AdapterKind::kLora, 1, rank, d, matrices)
               : moelora::trainable_param_count(moelora::AdapterKind::kMoELora, n_experts, rank,
                                                d, matrices);
  });
}

moelora_status moelora_session_create(const moelora_config* cfg, moelora_session** out) {
  return guarded([&] {
    require(cfg, "cfg");
    require(out, "out");
    *out = new moelora_session(cfg->cfg);
  });
}

moelora_status moelora_session_load(const char* checkpoint_dir, moelora_session** out) {
  return guarded([&] {
    require(checkpoint_dir, "checkpoint_dir");
    require(out, "out");
    *out = new moelora_session(moelora::read_checkpoint(checkpoint_dir));
  });
}

moelora_status moelora_session_step(moelora_session* s, moelora_step_report* out) {
  return guarded([&] {
    require(s, "session");
    moelora::StepReport r = s->trainer.step();
    if (out != nullptr) fill(out, r);
  });
}

moelora_status moelora_session_train(moelora_session* s, uint64_t steps, const char* jsonl_path,
                                     moelora_step_report* last) {
  return guarded([&] {
    require(s, "session");
    std::ofstream log;
    if (jsonl_path != nullptr) {
      log.open(jsonl_path, std::ios::binary | std::ios::trunc);
      if (!log) throw moelora::IoError(std::string("cannot write ") + jsonl_path);
    }
    const std::size_t n = steps == 0 ? s->trainer.config().steps : steps;
    std::vector<moelora::StepReport> reports =
        s->trainer.run(n, [&](const moelora::StepReport& r) {
          if (log.is_open()) log << moelora::to_jsonl(r) << '\n';
        });
    if (log.is_open()) {
      log.flush();
      if (!log) throw moelora::IoError(std::string("write failed: ") + jsonl_path);
    }
    if (last != nullptr && !reports.empty()) fill(last, reports.back());
  });
}

moelora_status moelora_session_evaluate(moelora_session* s, uint64_t batches,
                                        moelora_eval_report* out) {
  return guarded([&] {
    require(s, "session");
    require(out, "out");
    const std::size_t n = batches == 0 ? s->trainer.config().eval_batches : batches;
    fill(out, s->trainer.evaluate(n));
  });
}

moelora_status moelora_session_save(const moelora_session* s, const char* checkpoint_dir) {
  return guarded([&] {
    require(s, "session");
    require(checkpoint_dir, "checkpoint_dir");
    moelora::write_checkpoint(checkpoint_dir, s->trainer.checkpoint());
  });
}

moelora_status moelora_session_steps_done(const moelora_session* s, uint64_t* out) {
  return guarded([&] {
    require(s, "session");
    require(out, "out");
    *out = s->trainer.steps_done();
  });
}

moelora_status moelora_session_config_json(const moelora_session* s, char** out) {
  return guarded([&] {
    require(s, "session");
    require(out, "out");
    *out = dup_string(moelora::to_json(s->trainer.config()).dump(2));
  });
}

moelora_status moelora_session_trace(moelora_session* s, uint64_t batches, const char* csv_path,
                                     const char* frequency_csv_path) {
  return guarded([&] {
    require(s, "session");
    require(csv_path, "csv_path");
    const moelora::TrainConfig& cfg = s->trainer.config();
    const std::size_t n = batches == 0 ? cfg.eval_batches : batches;
    const std::size_t experts = cfg.adapter == moelora::AdapterKind::kLora ? 1 : cfg.n_experts;
    const std::size_t k = cfg.adapter == moelora::AdapterKind::kLora ? 1 : cfg.top_k;
    moelora::RoutingTracer tracer(experts, k);
    moelora::EvalReport report = s->trainer.evaluate(n, &tracer);
    moelora::export_summary(report.routing, csv_path, moelora::ExportFormat::kCsv);
    if (frequency_csv_path != nullptr) {
      moelora::write_frequency_table(moelora::token_frequency_table(tracer.records()),
                                     frequency_csv_path);
    }
  });
}

void moelora_session_destroy(moelora_session* s) { delete s; }

moelora_status moelora_ablate(const char* grid_json, const char* csv_path, uint64_t* rows_out) {
  return guarded([&] {
    require(grid_json, "grid_json");
    require(csv_path, "csv_path");
    moelora::AblationGrid grid = moelora::ablation_grid_from_json(parse_json(grid_json));
    std::vector<moelora::AblationRow> rows = moelora::run_ablation(grid);
    moelora::write_ablation_csv(rows, csv_path);
    if (rows_out != nullptr) *rows_out = rows.size();
  });
}

}  // extern "C"
