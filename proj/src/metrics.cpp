#include "esmc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "esmc/error.hpp"

namespace esmc {

namespace {

std::vector<Label> distinct(std::span<const Label> v) {
  std::vector<Label> out(v.begin(), v.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::size_t index_of(const std::vector<Label>& sorted, Label l) {
  return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), l) - sorted.begin());
}

double entropy(const std::vector<std::int64_t>& sizes, double n) {
  double h = 0.0;
  for (auto s : sizes) {
    if (s == 0) continue;
    const double p = static_cast<double>(s) / n;
    h -= p * std::log(p);
  }
  return h;
}

std::int64_t pairs(std::int64_t m) { return m * (m - 1) / 2; }

}  // namespace

Contingency contingency(std::span<const Label> pred, std::span<const Label> truth) {
  if (pred.size() != truth.size()) {
    throw ValidationError("label vectors differ in length: " + std::to_string(pred.size()) + " vs " +
                          std::to_string(truth.size()));
  }
  Contingency c;
  c.row_labels = distinct(pred);
  c.col_labels = distinct(truth);
  c.n = static_cast<std::int64_t>(pred.size());
  c.table.assign(c.row_labels.size(), std::vector<std::int64_t>(c.col_labels.size(), 0));
  c.row_sums.assign(c.row_labels.size(), 0);
  c.col_sums.assign(c.col_labels.size(), 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto r = index_of(c.row_labels, pred[i]);
    const auto k = index_of(c.col_labels, truth[i]);
    ++c.table[r][k];
    ++c.row_sums[r];
    ++c.col_sums[k];
  }
  return c;
}

NmiNorm parse_nmi_norm(const std::string& name) {
  if (name == "arithmetic") return NmiNorm::arithmetic;
  if (name == "geometric") return NmiNorm::geometric;
  if (name == "max") return NmiNorm::max;
  throw ValidationError("unknown NMI normalization '" + name + "' (expected arithmetic, geometric or max)");
}

std::string to_string(NmiNorm norm) {
  switch (norm) {
    case NmiNorm::arithmetic: return "arithmetic";
    case NmiNorm::geometric: return "geometric";
    case NmiNorm::max: return "max";
  }
  return "arithmetic";
}

double nmi(std::span<const Label> pred, std::span<const Label> truth, NmiNorm norm) {
  if (pred.empty()) throw ValidationError("nmi needs at least one label");
  const Contingency c = contingency(pred, truth);
  const double n = static_cast<double>(c.n);
  const double hu = entropy(c.row_sums, n);
  const double hv = entropy(c.col_sums, n);
  const bool u_single = c.row_labels.size() == 1;
  const bool v_single = c.col_labels.size() == 1;
  if (u_single && v_single) return 1.0;
  if (u_single || v_single) return 0.0;

  double mi = 0.0;
  for (std::size_t r = 0; r < c.table.size(); ++r) {
    for (std::size_t k = 0; k < c.table[r].size(); ++k) {
      const auto nij = c.table[r][k];
      if (nij == 0) continue;
      const double pij = static_cast<double>(nij) / n;
      mi += pij * std::log(n * static_cast<double>(nij) /
                           (static_cast<double>(c.row_sums[r]) * static_cast<double>(c.col_sums[k])));
    }
  }
  double denom = 0.0;
  switch (norm) {
    case NmiNorm::arithmetic: denom = 0.5 * (hu + hv); break;
    case NmiNorm::geometric: denom = std::sqrt(hu * hv); break;
    case NmiNorm::max: denom = std::max(hu, hv); break;
  }
  return std::clamp(mi / denom, 0.0, 1.0);
}

double rand_index(std::span<const Label> pred, std::span<const Label> truth) {
  if (pred.size() < 2) throw ValidationError("rand_index needs at least two labels");
  const Contingency c = contingency(pred, truth);
  std::int64_t same_both = 0;
  for (const auto& row : c.table)
    for (auto nij : row) same_both += pairs(nij);
  std::int64_t same_pred = 0, same_truth = 0;
  for (auto s : c.row_sums) same_pred += pairs(s);
  for (auto s : c.col_sums) same_truth += pairs(s);
  const std::int64_t total = pairs(c.n);
  const std::int64_t apart_both = total - same_pred - same_truth + same_both;
  return static_cast<double>(same_both + apart_both) / static_cast<double>(total);
}

std::vector<Label> encode_labels(std::span<const std::string> labels) {
  std::vector<std::string> names(labels.begin(), labels.end());
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  std::vector<Label> out;
  out.reserve(labels.size());
  for (const auto& l : labels) {
    out.push_back(static_cast<Label>(std::lower_bound(names.begin(), names.end(), l) - names.begin()));
  }
  return out;
}

EvalReport evaluate(std::span<const std::string> pred, std::span<const std::string> truth, NmiNorm norm) {
  const auto p = encode_labels(pred);
  const auto t = encode_labels(truth);
  EvalReport r;
  r.nmi = nmi(p, t, norm);
  r.rand_index = rand_index(p, t);
  r.n = static_cast<std::int64_t>(pred.size());
  r.nmi_norm = norm;
  for (const auto& s : pred) ++r.predicted_sizes[s];
  for (const auto& s : truth) ++r.truth_sizes[s];
  return r;
}

void write_report(const EvalReport& report, const std::filesystem::path& path) {
  nlohmann::json j;
  j["nmi"] = report.nmi;
  j["rand_index"] = report.rand_index;
  j["n"] = report.n;
  j["nmi_norm"] = to_string(report.nmi_norm);
  j["criterion"] = report.criterion;
  j["cluster_sizes"] = {{"predicted", report.predicted_sizes}, {"truth", report.truth_sizes}};
  j["config"] = report.config;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace esmc
