#include "esmc/localization.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "esmc/error.hpp"
#include "esmc/parallel.hpp"
#include "esmc/random.hpp"

namespace esmc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

// Rank of token `id` in the descending order used by top_k.
std::size_t rank_of(const std::vector<double>& values, std::size_t id) {
  const double v = values[id];
  std::size_t rank = 0;
  for (std::size_t u = 0; u < values.size(); ++u) {
    if (values[u] > v || (values[u] == v && u < id)) ++rank;
  }
  return rank;
}

}  // namespace

TokenizationSidecar read_sidecar(const fs::path& path) {
  const json j = load_json(path);
  if (!j.is_object()) throw FormatError("'" + path.string() + "': sidecar must be a JSON object");
  TokenizationSidecar out;
  for (const auto& [key, value] : j.items()) {
    std::vector<TokenId> ids;
    if (value.is_number_integer()) {
      ids.push_back(value.get<TokenId>());
    } else if (value.is_array()) {
      for (const auto& v : value) {
        if (!v.is_number_integer()) throw FormatError("'" + path.string() + "': non-integer id for '" + key + "'");
        ids.push_back(v.get<TokenId>());
      }
    } else {
      throw FormatError("'" + path.string() + "': entry '" + key + "' must be an id or an array of ids");
    }
    out[key] = std::move(ids);
  }
  return out;
}

std::vector<std::string> read_keywords(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open keywords file '" + path.string() + "'");
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    auto t = trim(line);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

KeywordSet resolve_keywords(const std::string& feature, const std::vector<std::string>& keywords,
                            const Vocab& vocab, const TokenizationSidecar* sidecar) {
  if (keywords.empty()) throw ValidationError("keyword list for feature '" + feature + "' is empty");
  KeywordSet set;
  set.feature = feature;
  set.keywords = keywords;
  std::map<TokenId, std::string> owner;
  for (const auto& kw : keywords) {
    std::optional<TokenId> id = vocab.find(kw);
    if (!id && sidecar) {
      auto it = sidecar->find(kw);
      if (it != sidecar->end() && !it->second.empty()) {
        const TokenId first = it->second.front();
        if (first >= 0 && static_cast<std::size_t>(first) < vocab.size()) {
          id = first;
        } else {
          set.warnings.push_back("sidecar id " + std::to_string(first) + " for '" + kw + "' is outside the vocabulary");
        }
      }
    }
    if (!id) {
      set.unresolved.push_back(kw);
      continue;
    }
    auto [it, inserted] = owner.emplace(*id, kw);
    if (inserted) {
      set.token_ids.push_back(*id);
    } else {
      set.warnings.push_back("keyword '" + kw + "' resolves to token " + std::to_string(*id) + " already used by '" +
                             it->second + "'; counted once");
    }
  }
  if (set.token_ids.empty()) {
    std::string list;
    for (const auto& u : set.unresolved) list += (list.empty() ? "" : ", ") + u;
    throw ValidationError("no keyword for feature '" + feature + "' resolves to a vocabulary token (unresolved: " +
                          list + ")");
  }
  return set;
}

std::map<Cell, std::int64_t> CountMap::counts() const {
  std::map<Cell, std::int64_t> out;
  for (const auto& [cell, t] : cells) out.emplace(cell, t.count);
  return out;
}

std::map<Cell, double> CountMap::mean_keyword_values() const {
  std::map<Cell, double> out;
  for (const auto& [cell, t] : cells) out.emplace(cell, t.value_sum / static_cast<double>(t.count));
  return out;
}

void CountMap::merge(const CountMap& other) {
  for (const auto& [cell, t] : other.cells) {
    auto& mine = cells[cell];
    mine.count += t.count;
    mine.value_sum += t.value_sum;
  }
}

CountMap count_high_logits(std::span<const HiddenStateDump> dumps, const UnembeddingMatrix& w,
                           std::span<const TokenId> keyword_ids, const CountOptions& options) {
  if (dumps.empty()) throw ValidationError("localization needs at least one dump");
  if (keyword_ids.empty()) throw ValidationError("localization needs at least one keyword id");
  if (!std::isfinite(options.tau)) throw ValidationError("tau must be finite");
  if (options.normalize && (options.tau < 0.0 || options.tau > 1.0)) {
    throw ValidationError("tau=" + std::to_string(options.tau) + " is outside [0, 1] for normalized distributions");
  }
  for (auto id : keyword_ids) {
    if (id < 0 || id >= w.vocab_size) {
      throw ValidationError("keyword token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(w.vocab_size));
    }
  }
  if (options.top_k_filter &&
      (*options.top_k_filter < 1 || *options.top_k_filter > static_cast<std::size_t>(w.vocab_size))) {
    throw ValidationError("top_k_filter must lie in [1, vocab_size]");
  }

  struct Task {
    std::size_t image;
    Cell cell;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < dumps.size(); ++i) {
    const auto& d = dumps[i];
    if (d.d_model != w.d_model) {
      throw ValidationError("dump '" + d.image_id + "' has d_model " + std::to_string(d.d_model) +
                            " but the unembedding matrix expects " + std::to_string(w.d_model));
    }
    std::vector<std::int64_t> layers;
    if (options.layers) {
      for (auto l : *options.layers) {
        if (l < 0 || l >= d.num_layers) {
          throw ValidationError("layer " + std::to_string(l) + " out of range for dump '" + d.image_id + "'");
        }
      }
      layers = *options.layers;
    } else {
      layers.resize(static_cast<std::size_t>(d.num_layers));
      std::iota(layers.begin(), layers.end(), 0);
    }
    const std::int64_t p0 = options.restrict_to_text ? d.text_token_range.start : 0;
    const std::int64_t p1 = options.restrict_to_text ? d.text_token_range.end : d.num_tokens;
    for (auto l : layers)
      for (std::int64_t p = p0; p < p1; ++p) tasks.push_back({i, {l, p}});
  }

  // Per task: values of the keywords that crossed the threshold, in keyword order.
  std::vector<std::vector<double>> fired(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t t) {
    const auto& task = tasks[t];
    auto dist = project(dumps[task.image].state(task.cell.layer, task.cell.position), w);
    if (options.normalize) dist = softmax(dist);
    for (auto id : keyword_ids) {
      const double value = dist.values[static_cast<std::size_t>(id)];
      if (!(value > options.tau)) continue;
      if (options.top_k_filter && rank_of(dist.values, static_cast<std::size_t>(id)) >= *options.top_k_filter) {
        continue;
      }
      fired[t].push_back(value);
    }
  });

  // Tally each image on its own, then merge in image order, so counting dumps
  // one at a time and merging gives bit-identical sums.
  CountMap out;
  CountMap image_counts;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    for (double v : fired[t]) {
      auto& tally = image_counts.cells[tasks[t].cell];
      ++tally.count;
      tally.value_sum += v;
    }
    if (t + 1 == tasks.size() || tasks[t + 1].image != tasks[t].image) {
      out.merge(image_counts);
      image_counts.cells.clear();
    }
  }
  return out;
}

TargetSpec select_targets(const std::map<Cell, std::int64_t>& counts, const std::map<Cell, double>& tie_rank) {
  std::int64_t max_count = 0;
  for (const auto& [cell, c] : counts) max_count = std::max(max_count, c);
  if (counts.empty() || max_count == 0) {
    throw ValidationError("no position exceeded tau; lower tau or check the keywords");
  }

  TargetSpec spec;
  for (const auto& [cell, c] : counts) {
    if (c != max_count) continue;
    auto it = tie_rank.find(cell);
    spec.candidates.push_back({cell.layer, cell.position, c, it == tie_rank.end() ? 0.0 : it->second});
  }
  // counts is ordered by (layer, position), so the first strict maximum wins ties.
  const TargetCandidate* best = &spec.candidates.front();
  for (const auto& c : spec.candidates) {
    if (c.mean_keyword_logit > best->mean_keyword_logit) best = &c;
  }
  spec.chosen = {best->layer, best->position};
  return spec;
}

TargetSpec select_targets(const CountMap& counts) {
  return select_targets(counts.counts(), counts.mean_keyword_values());
}

TargetSpec localize(std::span<const HiddenStateDump> dumps, const std::string& feature,
                    const std::vector<std::string>& keywords, const Vocab& vocab, const UnembeddingMatrix& w,
                    const CountOptions& options, const TokenizationSidecar* sidecar) {
  if (static_cast<std::int64_t>(vocab.size()) != w.vocab_size) {
    throw ValidationError("vocabulary has " + std::to_string(vocab.size()) + " tokens but the unembedding matrix has " +
                          std::to_string(w.vocab_size) + " rows");
  }
  const KeywordSet set = resolve_keywords(feature, keywords, vocab, sidecar);
  const CountMap counts = count_high_logits(dumps, w, set.token_ids, options);
  TargetSpec spec = select_targets(counts);
  spec.feature = feature;
  spec.tau = options.tau;
  spec.normalized = options.normalize;
  for (auto id : set.token_ids) spec.keywords.push_back(vocab.token(id));
  spec.num_images = static_cast<std::int64_t>(dumps.size());
  return spec;
}

void write_target(const TargetSpec& target, const fs::path& path) {
  json j;
  j["feature"] = target.feature;
  j["tau"] = target.tau;
  j["normalized"] = target.normalized;
  j["keywords"] = target.keywords;
  j["num_images"] = target.num_images;
  j["chosen"] = {{"layer", target.chosen.layer}, {"position", target.chosen.position}};
  j["candidates"] = json::array();
  for (const auto& c : target.candidates) {
    j["candidates"].push_back(
        {{"layer", c.layer}, {"position", c.position}, {"count", c.count}, {"mean_keyword_logit", c.mean_keyword_logit}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

TargetSpec read_target(const fs::path& path) {
  const json j = load_json(path);
  TargetSpec t;
  try {
    t.feature = j.at("feature").get<std::string>();
    t.tau = j.at("tau").get<double>();
    t.normalized = j.value("normalized", true);
    t.keywords = j.value("keywords", std::vector<std::string>{});
    t.num_images = j.value("num_images", std::int64_t{0});
    t.chosen.layer = j.at("chosen").at("layer").get<std::int64_t>();
    t.chosen.position = j.at("chosen").at("position").get<std::int64_t>();
    for (const auto& c : j.at("candidates")) {
      t.candidates.push_back({c.at("layer").get<std::int64_t>(), c.at("position").get<std::int64_t>(),
                              c.at("count").get<std::int64_t>(), c.at("mean_keyword_logit").get<double>()});
    }
  } catch (const json::exception& e) {
    throw FormatError("'" + path.string() + "' is not a valid target file: " + e.what());
  }
  return t;
}

std::vector<std::size_t> sample_indices(std::size_t total, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (count >= total) return idx;
  SplitMix64 rng(seed);
  // Partial Fisher-Yates over the first `count` slots.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(total - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace esmc
