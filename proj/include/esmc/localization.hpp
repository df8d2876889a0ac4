#pragma once

// Target-embedding localization: find the (layer, position) cells whose
// logit-lens distribution puts high mass on feature keywords across a small
// sample of images.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "esmc/logit_lens.hpp"
#include "esmc/tensor_store.hpp"

namespace esmc {

inline constexpr double kDefaultTau = 0.2;

// keyword -> token ids of its tokenization; only the first id is used.
using TokenizationSidecar = std::map<std::string, std::vector<TokenId>>;

// Reads a JSON object mapping keyword strings to a token id or an array of
// token ids.
TokenizationSidecar read_sidecar(const std::filesystem::path& path);

// Newline-delimited keyword list; blank lines and surrounding whitespace are
// dropped.
std::vector<std::string> read_keywords(const std::filesystem::path& path);

struct KeywordSet {
  std::string feature;
  std::vector<std::string> keywords;
  std::vector<TokenId> token_ids;       // deduplicated, first-seen order
  std::vector<std::string> unresolved;  // keywords with no token id
  std::vector<std::string> warnings;
};

// Exact vocabulary match first, then the first sidecar id. Throws
// ValidationError when no keyword resolves.
KeywordSet resolve_keywords(const std::string& feature, const std::vector<std::string>& keywords,
                            const Vocab& vocab, const TokenizationSidecar* sidecar = nullptr);

struct CountOptions {
  double tau = kDefaultTau;
  // Only scan positions inside each dump's text_token_range.
  bool restrict_to_text = false;
  // Additionally require the keyword to rank among the cell's top-k tokens.
  std::optional<std::size_t> top_k_filter;
  // Threshold softmax probabilities (default) or raw logits.
  bool normalize = true;
  // Only scan these layers; all layers when unset.
  std::optional<std::vector<std::int64_t>> layers;
};

// Sparse tally of threshold crossings. A cell is present only if at least one
// (image, keyword) pair crossed the threshold there; value_sum accumulates the
// keyword values of exactly those crossings.
struct CountMap {
  struct Tally {
    std::int64_t count = 0;
    double value_sum = 0.0;
    bool operator==(const Tally&) const = default;
  };
  std::map<Cell, Tally> cells;

  std::map<Cell, std::int64_t> counts() const;
  // Mean keyword value over the counted crossings of each cell.
  std::map<Cell, double> mean_keyword_values() const;
  void merge(const CountMap& other);
  bool operator==(const CountMap&) const = default;
};

CountMap count_high_logits(std::span<const HiddenStateDump> dumps, const UnembeddingMatrix& w,
                           std::span<const TokenId> keyword_ids, const CountOptions& options = {});

struct TargetCandidate {
  std::int64_t layer = 0;
  std::int64_t position = 0;
  std::int64_t count = 0;
  double mean_keyword_logit = 0.0;
  bool operator==(const TargetCandidate&) const = default;
};

struct TargetSpec {
  std::string feature;
  double tau = kDefaultTau;
  bool normalized = true;
  std::vector<std::string> keywords;
  std::int64_t num_images = 0;
  std::vector<TargetCandidate> candidates;  // every cell at the maximal count, by (layer, position)
  Cell chosen;
  bool operator==(const TargetSpec&) const = default;
};

// Candidates are all cells at the maximal count. The chosen one has the
// highest tie_rank value, then the lowest layer, then the lowest position.
// Cells missing from tie_rank rank as 0.
TargetSpec select_targets(const std::map<Cell, std::int64_t>& counts, const std::map<Cell, double>& tie_rank);
TargetSpec select_targets(const CountMap& counts);

// resolve_keywords -> count_high_logits -> select_targets.
TargetSpec localize(std::span<const HiddenStateDump> dumps, const std::string& feature,
                    const std::vector<std::string>& keywords, const Vocab& vocab, const UnembeddingMatrix& w,
                    const CountOptions& options = {}, const TokenizationSidecar* sidecar = nullptr);

void write_target(const TargetSpec& target, const std::filesystem::path& path);
TargetSpec read_target(const std::filesystem::path& path);

// `count` distinct indices from [0, total), drawn with a seeded shuffle and
// returned in ascending order. count >= total returns every index.
std::vector<std::size_t> sample_indices(std::size_t total, std::size_t count, std::uint64_t seed);

}  // namespace esmc
