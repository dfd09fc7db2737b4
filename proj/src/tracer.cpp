// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "moelora/tracer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "moelora/error.hpp"

namespace moelora {

namespace {

constexpr const char* kHistogramHeader = "layer,token_type,expert,count,fraction";

std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

double entropy_of(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

nlohmann::json metrics_json(const RoutingSummary& s) {
  nlohmann::json j;
  j["num_experts"] = s.num_experts;
  j["top_k"] = s.top_k;
  j["records"] = s.records;
  j["nmi"] = s.nmi;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& [layer, lr] : s.layers) {
    nlohmann::json l;
    l["layer"] = layer;
    l["tokens"] = lr.tokens;
    l["load_fraction"] = lr.load_fraction;
    l["entropy"] = lr.entropy;
    l["nmi"] = lr.nmi;
    if (lr.separation) {
      l["separation"] = {{"intra", lr.separation->intra}, {"inter", lr.separation->inter}};
    } else {
      l["separation"] = nullptr;
    }
    layers.push_back(std::move(l));
  }
  j["layers"] = std::move(layers);
  return j;
}

void metrics_from_json(const nlohmann::json& j, RoutingSummary& s) {
  s.num_experts = j.at("num_experts").get<std::size_t>();
  s.top_k = j.at("top_k").get<std::size_t>();
  s.records = j.at("records").get<std::uint64_t>();
  s.nmi = j.at("nmi").get<double>();
  for (const auto& l : j.at("layers")) {
    LayerRouting lr;
    lr.tokens = l.at("tokens").get<std::size_t>();
    lr.load_fraction = l.at("load_fraction").get<std::vector<double>>();
    lr.entropy = l.at("entropy").get<double>();
    lr.nmi = l.at("nmi").get<double>();
    if (!l.at("separation").is_null()) {
      lr.separation = SeparationScore{l["separation"].at("intra").get<double>(),
                                      l["separation"].at("inter").get<double>()};
    }
    s.layers[l.at("layer").get<std::size_t>()] = std::move(lr);
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::optional<SeparationScore> RoutingSummary::mean_separation() const {
  SeparationScore acc;
  double n = 0.0;
  for (const auto& [layer, lr] : layers) {
    if (!lr.separation) continue;
    acc.intra += lr.separation->intra;
    acc.inter += lr.separation->inter;
    n += 1.0;
  }
  if (n == 0.0) return std::nullopt;
  return SeparationScore{acc.intra / n, acc.inter / n};
}

RoutingTracer::RoutingTracer(std::size_t num_experts, std::size_t top_k)
    : num_experts_(num_experts), top_k_(top_k) {
  if (num_experts == 0 || top_k == 0 || top_k > num_experts) {
    throw ConfigError("tracer needs 1 <= top_k <= num_experts, got top_k=" +
                      std::to_string(top_k) + ", n=" + std::to_string(num_experts));
  }
}

void RoutingTracer::record(RoutingRecord rec) {
  if (rec.probs.size() != num_experts_) {
    throw ParameterError("routing record has " + std::to_string(rec.probs.size()) +
                         " probabilities, expected " + std::to_string(num_experts_));
  }
  double total = 0.0;
  for (double p : rec.probs) {
    if (!std::isfinite(p) || p < 0.0) throw ParameterError("routing record has an invalid probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ParameterError("routing record probabilities sum to " + format_double(total));
  }
  if (rec.selected.size() != top_k_) {
    throw ParameterError("routing record selects " + std::to_string(rec.selected.size()) +
                         " experts, expected " + std::to_string(top_k_));
  }
  std::set<std::size_t> seen;
  for (std::size_t e : rec.selected) {
    if (e >= num_experts_ || !seen.insert(e).second) {
      throw ParameterError("routing record has an invalid or repeated expert index");
    }
  }
  records_.push_back(std::move(rec));
}

double normalized_mutual_information(const std::vector<std::string>& a,
                                     const std::vector<std::size_t>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw ParameterError("NMI needs two non-empty labelings of equal length");
  }
  std::map<std::string, double> pa;
  std::map<std::size_t, double> pb;
  std::map<std::pair<std::string, std::size_t>, double> joint;
  const double n = static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    pa[a[i]] += 1.0;
    pb[b[i]] += 1.0;
    joint[{a[i], b[i]}] += 1.0;
  }
  double ha = 0.0, hb = 0.0, mi = 0.0;
  for (const auto& [k, c] : pa) ha -= (c / n) * std::log(c / n);
  for (const auto& [k, c] : pb) hb -= (c / n) * std::log(c / n);
  for (const auto& [k, c] : joint) {
    const double pij = c / n;
    mi += pij * std::log(pij / ((pa[k.first] / n) * (pb[k.second] / n)));
  }
  if (ha == 0.0 && hb == 0.0) return 1.0;
  const double denom = 0.5 * (ha + hb);
  return std::clamp(mi / denom, 0.0, 1.0);
}

RoutingSummary summarize(const std::vector<RoutingRecord>& records, std::size_t num_experts,
                         std::size_t top_k) {
  if (records.empty()) throw ParameterError("summarize: no routing records");
  RoutingSummary s;
  s.num_experts = num_experts;
  s.top_k = top_k;
  s.records = records.size();

  struct LayerAcc {
    std::vector<double> counts;
    std::vector<std::pair<std::pair<std::uint64_t, std::size_t>, std::pair<std::string, std::size_t>>> labels;
  };
  std::map<std::size_t, LayerAcc> acc;
  for (const auto& rec : records) {
    auto& hist = s.histograms[{rec.layer, rec.token_type}];
    hist.resize(num_experts, 0);
    for (std::size_t e : rec.selected) ++hist.at(e);
    auto& la = acc[rec.layer];
    la.counts.resize(num_experts, 0.0);
    const std::size_t top1 = argmax(rec.probs);
    la.counts[top1] += 1.0;
    la.labels.push_back({{rec.step, rec.token}, {rec.token_type, top1}});
  }

  double nmi_total = 0.0;
  for (auto& [layer, la] : acc) {
    // Order labels by (step, token) so the result does not depend on record order.
    std::sort(la.labels.begin(), la.labels.end());
    LayerRouting lr;
    lr.tokens = la.labels.size();
    lr.load_fraction = la.counts;
    for (double& f : lr.load_fraction) f /= static_cast<double>(lr.tokens);
    lr.entropy = num_experts > 1 ? entropy_of(lr.load_fraction) / std::log(static_cast<double>(num_experts)) : 0.0;
    std::vector<std::string> types;
    std::vector<std::size_t> experts;
    for (const auto& l : la.labels) {
      types.push_back(l.second.first);
      experts.push_back(l.second.second);
    }
    lr.nmi = normalized_mutual_information(types, experts);
    nmi_total += lr.nmi;
    s.layers[layer] = std::move(lr);
  }
  s.nmi = nmi_total / static_cast<double>(s.layers.size());
  return s;
}

std::vector<std::pair<std::string, std::uint64_t>> token_frequency_table(
    const std::vector<RoutingRecord>& records) {
  std::set<std::pair<std::uint64_t, std::size_t>> seen;
  std::map<std::string, std::uint64_t> counts;
  for (const auto& rec : records) {
    if (seen.insert({rec.step, rec.token}).second) ++counts[rec.token_type];
  }
  std::vector<std::pair<std::string, std::uint64_t>> table(counts.begin(), counts.end());
  std::stable_sort(table.begin(), table.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return table;
}

std::filesystem::path metrics_path_for(const std::filesystem::path& csv_path) {
  auto p = csv_path;
  p.replace_extension(".json");
  return p;
}

void export_summary(const RoutingSummary& summary, const std::filesystem::path& path,
                    ExportFormat format) {
  if (format == ExportFormat::kJson) {
    nlohmann::json j = metrics_json(summary);
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& [key, counts] : summary.histograms) {
      hist.push_back({{"layer", key.first}, {"token_type", key.second}, {"counts", counts}});
    }
    j["histograms"] = std::move(hist);
    write_text(path, j.dump(2) + "\n");
    return;
  }
  std::string csv = std::string(kHistogramHeader) + "\n";
  for (const auto& [key, counts] : summary.histograms) {
    std::uint64_t total = 0;
    for (auto c : counts) total += c;
    for (std::size_t e = 0; e < counts.size(); ++e) {
      const double fraction = total > 0 ? static_cast<double>(counts[e]) / static_cast<double>(total) : 0.0;
      csv += std::to_string(key.first) + "," + csv_field(key.second) + "," + std::to_string(e) +
             "," + std::to_string(counts[e]) + "," + format_double(fraction) + "\n";
    }
  }
  write_text(path, csv);
  write_text(metrics_path_for(path), metrics_json(summary).dump(2) + "\n");
}

RoutingSummary import_summary(const std::filesystem::path& path, ExportFormat format) {
  RoutingSummary s;
  if (format == ExportFormat::kJson) {
    try {
      const auto j = nlohmann::json::parse(read_text(path));
      metrics_from_json(j, s);
      for (const auto& h : j.at("histograms")) {
        s.histograms[{h.at("layer").get<std::size_t>(), h.at("token_type").get<std::string>()}] =
            h.at("counts").get<std::vector<std::uint64_t>>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed summary " + path.string() + ": " + e.what());
    }
    return s;
  }
  const auto metrics = metrics_path_for(path);
  try {
    metrics_from_json(nlohmann::json::parse(read_text(metrics)), s);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed metrics " + metrics.string() + ": " + e.what());
  }
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || line != kHistogramHeader) {
    throw IoError(path.string() + ": missing header '" + kHistogramHeader + "'");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5) throw IoError(path.string() + ":" + std::to_string(line_no) + ": expected 5 fields");
    try {
      auto& counts = s.histograms[{std::stoull(f[0]), f[1]}];
      const std::size_t expert = std::stoull(f[2]);
      if (counts.size() <= expert) counts.resize(expert + 1, 0);
      counts[expert] = std::stoull(f[3]);
    } catch (const std::exception&) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": malformed row");
    }
  }
  return s;
}

void write_frequency_table(const std::vector<std::pair<std::string, std::uint64_t>>& table,
                           const std::filesystem::path& path) {
  std::string csv = "rank,token_type,frequency\n";
  for (std::size_t i = 0; i < table.size(); ++i) {
    csv += std::to_string(i + 1) + "," + csv_field(table[i].first) + "," +
           std::to_string(table[i].second) + "\n";
  }
  write_text(path, csv);
}

}  // namespace moelora
