#include "esmc/logit_lens.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "esmc/error.hpp"
#include "esmc/parallel.hpp"

namespace esmc {

VocabDistribution project(std::span<const float> state, const UnembeddingMatrix& w) {
  if (static_cast<std::int64_t>(state.size()) != w.d_model) {
    throw ValidationError("state has dimension " + std::to_string(state.size()) + " but unembedding expects " +
                          std::to_string(w.d_model));
  }
  VocabDistribution out;
  out.values.resize(static_cast<std::size_t>(w.vocab_size));
  for (std::int64_t v = 0; v < w.vocab_size; ++v) {
    const auto row = w.row(v);
    double acc = 0.0;
    for (std::size_t d = 0; d < state.size(); ++d) acc += static_cast<double>(row[d]) * static_cast<double>(state[d]);
    out.values[static_cast<std::size_t>(v)] = acc;
  }
  return out;
}

VocabDistribution softmax(const VocabDistribution& dist) {
  if (dist.values.empty()) throw ValidationError("softmax of an empty distribution");
  for (double x : dist.values) {
    if (!std::isfinite(x)) throw ValidationError("softmax input contains a non-finite value");
  }
  const double max = *std::max_element(dist.values.begin(), dist.values.end());
  VocabDistribution out;
  out.normalized = true;
  out.values.resize(dist.values.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < dist.values.size(); ++i) {
    out.values[i] = std::exp(dist.values[i] - max);
    sum += out.values[i];
  }
  for (double& x : out.values) x /= sum;
  return out;
}

std::map<Cell, VocabDistribution> project_dump(const HiddenStateDump& dump, const UnembeddingMatrix& w,
                                               const ProjectionRequest& request) {
  if (dump.d_model != w.d_model) {
    throw ValidationError("dump '" + dump.image_id + "' has d_model " + std::to_string(dump.d_model) +
                          " but unembedding expects " + std::to_string(w.d_model));
  }
  std::vector<std::int64_t> layers, positions;
  if (request.layers) {
    layers = *request.layers;
  } else {
    layers.resize(static_cast<std::size_t>(dump.num_layers));
    std::iota(layers.begin(), layers.end(), 0);
  }
  if (request.positions) {
    positions = *request.positions;
  } else {
    positions.resize(static_cast<std::size_t>(dump.num_tokens));
    std::iota(positions.begin(), positions.end(), 0);
  }
  for (auto l : layers) {
    if (l < 0 || l >= dump.num_layers) {
      throw ValidationError("layer " + std::to_string(l) + " out of range for dump '" + dump.image_id + "' with " +
                            std::to_string(dump.num_layers) + " layers");
    }
  }
  for (auto p : positions) {
    if (p < 0 || p >= dump.num_tokens) {
      throw ValidationError("position " + std::to_string(p) + " out of range for dump '" + dump.image_id +
                            "' with " + std::to_string(dump.num_tokens) + " tokens");
    }
  }

  std::vector<Cell> cells;
  for (auto l : layers)
    for (auto p : positions) cells.push_back({l, p});
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());

  std::vector<VocabDistribution> results(cells.size());
  parallel_for(cells.size(), [&](std::size_t i) {
    auto raw = project(dump.state(cells[i].layer, cells[i].position), w);
    results[i] = request.normalize ? softmax(raw) : std::move(raw);
  });

  std::map<Cell, VocabDistribution> out;
  for (std::size_t i = 0; i < cells.size(); ++i) out.emplace(cells[i], std::move(results[i]));
  return out;
}

std::vector<std::pair<TokenId, double>> top_k(const VocabDistribution& dist, std::size_t k) {
  if (k < 1 || k > dist.values.size()) {
    throw ValidationError("top_k: k=" + std::to_string(k) + " outside [1, " + std::to_string(dist.values.size()) +
                          "]");
  }
  std::vector<TokenId> ids(dist.values.size());
  std::iota(ids.begin(), ids.end(), TokenId{0});
  auto better = [&](TokenId a, TokenId b) {
    const double va = dist.values[static_cast<std::size_t>(a)];
    const double vb = dist.values[static_cast<std::size_t>(b)];
    return va > vb || (va == vb && a < b);
  };
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), better);
  std::vector<std::pair<TokenId, double>> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.emplace_back(ids[i], dist.values[static_cast<std::size_t>(ids[i])]);
  return out;
}

}  // namespace esmc
