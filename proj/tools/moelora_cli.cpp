// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Talks to the library only through moelora.h.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "moelora/moelora.h"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

int exit_code_for(moelora_status s) {
  switch (s) {
    case MOELORA_OK: return kExitOk;
    case MOELORA_CONFIG:
    case MOELORA_INVALID_ARGUMENT: return kExitUsage;
    default: return kExitRuntime;
  }
}

// Thrown from helpers below and turned into an exit code in main().
struct Failure {
  int code;
  std::string message;
};

void check(moelora_status s, const std::string& context) {
  if (s == MOELORA_OK) return;
  throw Failure{exit_code_for(s), context + ": " + moelora_last_error()};
}

struct ConfigHandle {
  moelora_config* p = nullptr;
  ~ConfigHandle() { moelora_config_destroy(p); }
};

struct SessionHandle {
  moelora_session* p = nullptr;
  ~SessionHandle() { moelora_session_destroy(p); }
};

std::string take_string(char* s) {
  std::string out = s;
  moelora_string_free(s);
  return out;
}

// Overrides collected from flags; only flags the user actually passed land
// in the JSON object.
struct Overrides {
  std::optional<std::uint64_t> seed, steps, top_k, n, r, batch_size;
  std::optional<double> alpha, beta, tau, learning_rate;
  std::optional<bool> renormalize_topk, normalize_embeddings, balance_count_topk;
  std::optional<std::string> adapter, optimizer;

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    if (seed) j["seed"] = *seed;
    if (steps) j["steps"] = *steps;
    if (top_k) j["top_k"] = *top_k;
    if (n) j["n_experts"] = *n;
    if (r) j["rank"] = *r;
    if (batch_size) j["batch_size"] = *batch_size;
    if (alpha) j["alpha"] = *alpha;
    if (beta) j["beta"] = *beta;
    if (tau) j["tau"] = *tau;
    if (learning_rate) j["learning_rate"] = *learning_rate;
    if (renormalize_topk) j["renormalize_topk"] = *renormalize_topk;
    if (normalize_embeddings) j["normalize_embeddings"] = *normalize_embeddings;
    if (balance_count_topk) j["balance_count_topk"] = *balance_count_topk;
    if (adapter) j["adapter"] = *adapter;
    if (optimizer) j["optimizer"] = *optimizer;
    return j;
  }
};

void add_override_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Random seed");
  cmd->add_option("--steps", o.steps, "Training steps");
  cmd->add_option("--batch-size", o.batch_size, "Tokens per batch");
  cmd->add_option("--lr", o.learning_rate, "Learning rate");
  cmd->add_option("--optimizer", o.optimizer, "sgd or adam");
  cmd->add_option("--adapter", o.adapter, "moelora or lora");
  cmd->add_option("--top-k", o.top_k, "Experts selected per token");
  cmd->add_option("--n", o.n, "Number of experts");
  cmd->add_option("--r", o.r, "Rank of each expert (of the adapter for lora)");
  cmd->add_option("--alpha", o.alpha, "Load-balance loss weight");
  cmd->add_option("--beta", o.beta, "Contrastive loss weight");
  cmd->add_option("--tau", o.tau, "Contrastive temperature");
  cmd->add_option("--renormalize-topk", o.renormalize_topk,
                  "Rescale the selected gate weights to sum to 1 (true/false)");
  cmd->add_option("--normalize-embeddings", o.normalize_embeddings,
                  "L2-normalize expert outputs before the contrastive loss (true/false)");
  cmd->add_option("--balance-count-topk", o.balance_count_topk,
                  "Count every selected expert in the load fractions, not just the argmax "
                  "(true/false)");
}

// defaults <- config file <- flags
void build_config(const std::string& config_path, const Overrides& o, ConfigHandle& cfg) {
  if (config_path.empty()) {
    check(moelora_config_default(&cfg.p), "config");
  } else {
    check(moelora_config_from_file(config_path.c_str(), &cfg.p), "config");
  }
  const std::string flags = o.to_json().dump();
  check(moelora_config_apply_json(cfg.p, flags.c_str()), "flags");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Failure{kExitRuntime, "cannot write " + path.string()};
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Failure{kExitRuntime, "cannot create " + dir.string() + ": " + ec.message()};
}

nlohmann::ordered_json eval_json(const moelora_eval_report& r) {
  auto num = [](double v) -> nlohmann::ordered_json {
    if (std::isnan(v)) return nullptr;
    return v;
  };
  nlohmann::ordered_json j;
  j["task_loss"] = r.task_loss;
  j["base_loss"] = r.base_loss;
  j["nmi"] = r.nmi;
  j["separation_intra"] = num(r.separation_intra);
  j["separation_inter"] = num(r.separation_inter);
  j["load_entropy"] = r.load_entropy;
  j["max_load_fraction"] = r.max_load_fraction;
  return j;
}

void write_trace(moelora_session* s, std::uint64_t batches, const fs::path& out) {
  const std::string csv = (out / "trace.csv").string();
  const std::string freq = (out / "token_frequency.csv").string();
  check(moelora_session_trace(s, batches, csv.c_str(), freq.c_str()), "trace");
}

std::string with_commas(std::uint64_t v) {
  std::string digits = std::to_string(v);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i != 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

int cmd_train(const std::string& config_path, const Overrides& o, const fs::path& out,
              std::uint64_t batches) {
  ConfigHandle cfg;
  build_config(config_path, o, cfg);
  make_dir(out);

  char* cfg_json = nullptr;
  check(moelora_config_to_json(cfg.p, &cfg_json), "config");
  write_text(out / "config.json", take_string(cfg_json) + "\n");

  SessionHandle session;
  check(moelora_session_create(cfg.p, &session.p), "session");
  moelora_step_report last{};
  const std::string steps_path = (out / "steps.jsonl").string();
  check(moelora_session_train(session.p, 0, steps_path.c_str(), &last), "train");
  check(moelora_session_save(session.p, (out / "checkpoint").string().c_str()), "checkpoint");
  write_trace(session.p, batches, out);

  moelora_eval_report eval{};
  check(moelora_session_evaluate(session.p, batches, &eval), "evaluate");
  nlohmann::ordered_json j;
  j["steps"] = last.step + 1;
  j["final_total_loss"] = last.total_loss;
  j["eval"] = eval_json(eval);
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, std::uint64_t batches) {
  SessionHandle session;
  check(moelora_session_load(checkpoint.c_str(), &session.p), "checkpoint");
  moelora_eval_report eval{};
  check(moelora_session_evaluate(session.p, batches, &eval), "evaluate");
  std::cout << eval_json(eval).dump(2) << "\n";
  return kExitOk;
}

int cmd_trace(const std::string& checkpoint, std::uint64_t batches, const fs::path& out) {
  SessionHandle session;
  check(moelora_session_load(checkpoint.c_str(), &session.p), "checkpoint");
  make_dir(out);
  write_trace(session.p, batches, out);
  std::cout << (out / "trace.csv").string() << "\n";
  return kExitOk;
}

int cmd_ablate(const std::string& grid_path, const Overrides& o, const fs::path& csv) {
  std::ifstream in(grid_path, std::ios::binary);
  if (!in) throw Failure{kExitUsage, "cannot read grid file " + grid_path};
  nlohmann::json grid;
  try {
    grid = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Failure{kExitUsage, grid_path + ": " + e.what()};
  }
  if (!grid.is_object()) throw Failure{kExitUsage, grid_path + ": grid must be a JSON object"};
  const nlohmann::json flags = o.to_json();
  if (!flags.empty()) {
    if (!grid.contains("base")) grid["base"] = nlohmann::json::object();
    grid["base"].update(flags);
  }
  if (csv.has_parent_path()) make_dir(csv.parent_path());
  std::uint64_t rows = 0;
  const std::string text = grid.dump();
  check(moelora_ablate(text.c_str(), csv.string().c_str(), &rows), grid_path);
  std::cout << rows << " rows -> " << csv.string() << "\n";
  return kExitOk;
}

int cmd_params(std::uint64_t d, std::uint64_t matrices, std::uint64_t lora_rank,
               std::uint64_t n, std::uint64_t r) {
  std::uint64_t lora = 0, moe = 0;
  check(moelora_param_count(d, matrices, 0, lora_rank, &lora), "params");
  check(moelora_param_count(d, matrices, n, r, &moe), "params");
  std::cout << "d=" << d << " matrices=" << matrices << "\n";
  std::cout << "LoRA     R=" << lora_rank << "            " << with_commas(lora) << "\n";
  std::cout << "MoELoRA  n=" << n << " r=" << r << " +gate  " << with_commas(moe) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moelora: mixture of LoRA experts on a synthetic regression task"};
  app.footer(
      "Configuration precedence: command-line flags override the --config file, which "
      "overrides built-in defaults.\n"
      "Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.");
  app.require_subcommand(1);

  Overrides o;
  std::string config_path;
  std::string out_dir = "out";
  std::string checkpoint;
  std::uint64_t batches = 0;

  CLI::App* train = app.add_subcommand("train", "Train, then write checkpoint, step log and trace");
  train->add_option("--config", config_path, "JSON config file");
  train->add_option("--out", out_dir, "Output directory")->capture_default_str();
  train->add_option("--batches", batches, "Evaluation batches (0: config value)");
  add_override_flags(train, o);

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  eval->add_option("--batches", batches, "Evaluation batches (0: config value)");

  CLI::App* trace = app.add_subcommand("trace", "Export routing statistics of a checkpoint");
  trace->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  trace->add_option("--out", out_dir, "Output directory")->capture_default_str();
  trace->add_option("--batches", batches, "Evaluation batches (0: config value)");

  std::string grid_path;
  std::string ablate_csv = "ablation.csv";
  CLI::App* ablate = app.add_subcommand("ablate", "Run an ablation grid over seeds");
  ablate->add_option("--config,--grid", grid_path, "Grid JSON file")->required();
  ablate->add_option("--out", ablate_csv, "Output CSV")->capture_default_str();
  add_override_flags(ablate, o);

  std::uint64_t d = 4096, matrices = 64, lora_rank = 36, n = 8, r = 4;
  CLI::App* params = app.add_subcommand("params", "Trainable parameter counts, LoRA vs MoELoRA");
  params->add_option("--d", d, "Model width")->capture_default_str();
  params->add_option("--matrices", matrices, "Adapted d x d matrices")->capture_default_str();
  params->add_option("--lora-rank", lora_rank, "LoRA rank R")->capture_default_str();
  params->add_option("--n", n, "Experts")->capture_default_str();
  params->add_option("--r", r, "Rank per expert")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return cmd_train(config_path, o, out_dir, batches);
    if (*eval) return cmd_eval(checkpoint, batches);
    if (*trace) return cmd_trace(checkpoint, batches, out_dir);
    if (*ablate) return cmd_ablate(grid_path, o, ablate_csv);
    if (*params) return cmd_params(d, matrices, lora_rank, n, r);
  } catch (const Failure& f) {
    std::cerr << "moelora: " << f.message << "\n";
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "moelora: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
