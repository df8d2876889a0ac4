#pragma once

// External clustering metrics: normalized mutual information and Rand index,
// both computed from the contingency table of two labelings.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace esmc {

using Label = std::int64_t;

struct Contingency {
  std::vector<Label> row_labels;  // sorted distinct predicted labels
  std::vector<Label> col_labels;  // sorted distinct true labels
  std::vector<std::vector<std::int64_t>> table;
  std::vector<std::int64_t> row_sums;
  std::vector<std::int64_t> col_sums;
  std::int64_t n = 0;
};

Contingency contingency(std::span<const Label> pred, std::span<const Label> truth);

enum class NmiNorm { arithmetic, geometric, max };

NmiNorm parse_nmi_norm(const std::string& name);
std::string to_string(NmiNorm norm);

// Mutual information over a mean of the two entropies (natural log). Both
// partitions single-cluster gives 1; exactly one single-cluster gives 0.
double nmi(std::span<const Label> pred, std::span<const Label> truth, NmiNorm norm = NmiNorm::arithmetic);

// Fraction of pairs on which the labelings agree. Needs n >= 2.
double rand_index(std::span<const Label> pred, std::span<const Label> truth);

// Dense integer codes for string labels, assigned in sorted order.
std::vector<Label> encode_labels(std::span<const std::string> labels);

template <typename T>
std::vector<Label> to_labels(const std::vector<T>& v) {
  return std::vector<Label>(v.begin(), v.end());
}

struct EvalReport {
  double nmi = 0.0;
  double rand_index = 0.0;
  std::int64_t n = 0;
  NmiNorm nmi_norm = NmiNorm::arithmetic;
  std::string criterion;
  std::map<std::string, std::int64_t> predicted_sizes;
  std::map<std::string, std::int64_t> truth_sizes;
  // Echo of the run that produced the predictions (alpha, seed, target ...).
  std::map<std::string, std::string> config;
};

EvalReport evaluate(std::span<const std::string> pred, std::span<const std::string> truth, NmiNorm norm);

void write_report(const EvalReport& report, const std::filesystem::path& path);

}  // namespace esmc
