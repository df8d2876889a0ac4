#pragma once

// Logit lens: read an intermediate hidden state as a distribution over the
// vocabulary by pushing it through the model's unembedding matrix.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "esmc/tensor_store.hpp"

namespace esmc {

// One (layer, token position) cell of a dump.
struct Cell {
  std::int64_t layer = 0;
  std::int64_t position = 0;
  auto operator<=>(const Cell&) const = default;
};

struct VocabDistribution {
  std::vector<double> values;
  bool normalized = false;
};

// values[v] = <W.row(v), state>, accumulated in double.
VocabDistribution project(std::span<const float> state, const UnembeddingMatrix& w);

// Max-subtracted softmax. Throws ValidationError on non-finite input.
VocabDistribution softmax(const VocabDistribution& dist);

struct ProjectionRequest {
  std::optional<std::vector<std::int64_t>> layers;     // all layers when unset
  std::optional<std::vector<std::int64_t>> positions;  // all positions when unset
  bool normalize = true;
};

// Projects every requested (layer, position) cell. Cells are computed in
// parallel; each result depends only on its own state row.
std::map<Cell, VocabDistribution> project_dump(const HiddenStateDump& dump, const UnembeddingMatrix& w,
                                               const ProjectionRequest& request = {});

// The k largest entries, descending by value, ties broken by lower token id.
std::vector<std::pair<TokenId, double>> top_k(const VocabDistribution& dist, std::size_t k);

}  // namespace esmc
