// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "moelora/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "moelora/error.hpp"
#include "moelora/trainer.hpp"

namespace moelora {

namespace {

constexpr const char* kAblationColumns =
    "label,adapter,n_experts,rank,top_k,alpha,beta,tau,trainable_params,seeds,"
    "final_loss_mean,final_loss_std,nmi_mean,nmi_std,intra_mean,inter_mean,"
    "separation_ratio_mean,separation_ratio_std,load_entropy_mean,max_load_fraction_mean,"
    "balance_loss_mean,contrastive_loss_mean";

std::string scalar_label(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

template <typename F>
std::pair<double, double> mean_std(const std::vector<SeedMetrics>& runs, F field) {
  if (runs.empty()) return {std::nan(""), std::nan("")};
  double m = 0.0;
  for (const auto& r : runs) m += field(r);
  m /= static_cast<double>(runs.size());
  double v = 0.0;
  for (const auto& r : runs) v += (field(r) - m) * (field(r) - m);
  const double sd = runs.size() > 1 ? std::sqrt(v / static_cast<double>(runs.size() - 1)) : 0.0;
  return {m, sd};
}

}  // namespace

AblationGrid ablation_grid_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("ablation grid must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "base" && key != "seeds" && key != "axes" && key != "variants") {
      throw ConfigError("unknown ablation key '" + key + "'");
    }
  }
  AblationGrid grid;
  if (j.contains("base")) grid.base = apply_config_json(TrainConfig{}, j["base"]);
  if (j.contains("seeds")) {
    if (!j["seeds"].is_number_integer() || j["seeds"].get<std::int64_t>() <= 0) {
      throw ConfigError("ablation 'seeds' must be a positive integer");
    }
    grid.seeds = j["seeds"].get<std::size_t>();
  }
  if (j.contains("axes") && j.contains("variants")) {
    throw ConfigError("ablation grid takes either 'axes' or 'variants', not both");
  }
  if (j.contains("axes")) {
    const auto& axes = j["axes"];
    if (!axes.is_object()) throw ConfigError("ablation 'axes' must be an object");
    std::vector<AblationVariant> acc;
    if (!axes.empty()) acc.push_back({});
    for (const auto& [key, values] : axes.items()) {
      if (!values.is_array() || values.empty()) {
        throw ConfigError("ablation axis '" + key + "' must be a non-empty array");
      }
      std::vector<AblationVariant> next;
      for (const auto& prev : acc) {
        for (const auto& v : values) {
          AblationVariant var = prev;
          var.overrides[key] = v;
          var.label += (var.label.empty() ? "" : ";") + key + "=" + scalar_label(v);
          next.push_back(std::move(var));
        }
      }
      acc = std::move(next);
    }
    grid.variants = std::move(acc);
  }
  if (j.contains("variants")) {
    if (!j["variants"].is_array()) throw ConfigError("ablation 'variants' must be an array");
    std::size_t idx = 0;
    for (const auto& v : j["variants"]) {
      if (!v.is_object()) throw ConfigError("each ablation variant must be an object");
      AblationVariant var;
      var.overrides = v;
      if (v.contains("label")) {
        var.label = v["label"].get<std::string>();
        var.overrides.erase("label");
      } else {
        var.label = "variant" + std::to_string(idx);
      }
      ++idx;
      grid.variants.push_back(std::move(var));
    }
  }
  if (grid.variants.empty()) throw ConfigError("ablation grid is empty");
  for (const auto& v : grid.variants) apply_config_json(grid.base, v.overrides);
  return grid;
}

SeedMetrics train_and_measure(const TrainConfig& cfg) {
  Trainer trainer(cfg);
  std::vector<StepReport> reports = trainer.run();
  EvalReport eval = trainer.evaluate(cfg.eval_batches);

  SeedMetrics m;
  m.seed = cfg.seed;
  m.final_loss = eval.task_loss;
  m.nmi = eval.routing.nmi;
  const auto sep = eval.routing.mean_separation();
  m.intra = sep ? sep->intra : std::nan("");
  m.inter = sep ? sep->inter : std::nan("");
  m.separation_ratio = eval.separation_ratio();
  double entropy = 0.0, max_load = 0.0;
  for (const auto& [layer, lr] : eval.routing.layers) {
    entropy += lr.entropy;
    max_load += *std::max_element(lr.load_fraction.begin(), lr.load_fraction.end());
  }
  const double layers = static_cast<double>(eval.routing.layers.size());
  m.load_entropy = entropy / layers;
  m.max_load_fraction = max_load / layers;
  m.balance_loss = reports.back().balance_loss;
  m.contrastive_loss = reports.back().contrastive_loss;
  return m;
}

std::vector<AblationRow> run_ablation(
    const AblationGrid& grid,
    const std::function<void(const std::string& label, const SeedMetrics&)>& on_run) {
  if (grid.variants.empty()) throw ConfigError("ablation grid is empty");
  std::vector<AblationRow> rows;
  for (const auto& variant : grid.variants) {
    AblationRow row;
    row.label = variant.label;
    row.config = apply_config_json(grid.base, variant.overrides);
    for (std::size_t s = 0; s < grid.seeds; ++s) {
      TrainConfig cfg = row.config;
      cfg.seed = row.config.seed + s;
      row.runs.push_back(train_and_measure(cfg));
      if (on_run) on_run(row.label, row.runs.back());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string csv = std::string(kAblationColumns) + "\n";
  for (const auto& row : rows) {
    const auto& c = row.config;
    const auto loss = mean_std(row.runs, [](const SeedMetrics& m) { return m.final_loss; });
    const auto nmi = mean_std(row.runs, [](const SeedMetrics& m) { return m.nmi; });
    const auto intra = mean_std(row.runs, [](const SeedMetrics& m) { return m.intra; });
    const auto inter = mean_std(row.runs, [](const SeedMetrics& m) { return m.inter; });
    const auto ratio = mean_std(row.runs, [](const SeedMetrics& m) { return m.separation_ratio; });
    const auto entropy = mean_std(row.runs, [](const SeedMetrics& m) { return m.load_entropy; });
    const auto max_load = mean_std(row.runs, [](const SeedMetrics& m) { return m.max_load_fraction; });
    const auto balance = mean_std(row.runs, [](const SeedMetrics& m) { return m.balance_loss; });
    const auto contrast = mean_std(row.runs, [](const SeedMetrics& m) { return m.contrastive_loss; });
    std::string label = row.label;
    if (label.find_first_of(",\"") != std::string::npos) {
      std::string quoted = "\"";
      for (char ch : label) quoted += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      label = quoted + "\"";
    }
    csv += label + "," + to_string(c.adapter) + "," + std::to_string(c.n_experts) + "," +
           std::to_string(c.rank) + "," + std::to_string(c.top_k) + "," + fmt(c.aux.alpha) + "," +
           fmt(c.aux.beta) + "," + fmt(c.aux.tau) + "," + std::to_string(c.trainable_params()) +
           "," + std::to_string(row.runs.size()) + "," + fmt(loss.first) + "," + fmt(loss.second) +
           "," + fmt(nmi.first) + "," + fmt(nmi.second) + "," + fmt(intra.first) + "," +
           fmt(inter.first) + "," + fmt(ratio.first) + "," + fmt(ratio.second) + "," +
           fmt(entropy.first) + "," + fmt(max_load.first) + "," + fmt(balance.first) + "," +
           fmt(contrast.first) + "\n";
  }
  return csv;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << ablation_csv(rows);
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace moelora
