#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "esmc/clustering.hpp"
#include "esmc/error.hpp"
#include "esmc/localization.hpp"
#include "esmc/logit_lens.hpp"
#include "esmc/metrics.hpp"
#include "esmc/parallel.hpp"
#include "esmc/pseudo_head.hpp"
#include "esmc/tensor_store.hpp"

namespace esmc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// Output written next to its destination under a hidden name and renamed
// into place on commit; removed if never committed.
class Staged {
 public:
  Staged(fs::path target, const char* marker) : target_(std::move(target)) {
    if (fs::exists(target_) && fs::is_directory(target_) && marker != nullptr && !fs::is_empty(target_) &&
        !fs::exists(target_ / marker)) {
      throw ValidationError("refusing to replace '" + target_.string() + "': not an earlier output of this command");
    }
    if (fs::exists(target_) && fs::is_directory(target_) && marker == nullptr) {
      throw ValidationError("'" + target_.string() + "' is a directory, expected a file path");
    }
    const fs::path parent = target_.parent_path();
    if (!parent.empty()) {
      std::error_code ec;
      fs::create_directories(parent, ec);
      if (ec) throw IoError("cannot create directory '" + parent.string() + "'");
    }
    stage_ = parent / ("." + target_.filename().string() + ".partial");
    fs::remove_all(stage_);
  }
  Staged(const Staged&) = delete;
  Staged& operator=(const Staged&) = delete;
  ~Staged() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(stage_, ec);
    }
  }

  const fs::path& path() const { return stage_; }

  void commit() {
    fs::remove_all(target_);
    fs::rename(stage_, target_);
    committed_ = true;
  }

 private:
  fs::path target_;
  fs::path stage_;
  bool committed_ = false;
};

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::string list_some(const std::vector<std::string>& items, std::size_t limit = 10) {
  std::string s;
  for (std::size_t i = 0; i < items.size() && i < limit; ++i) s += (i ? ", " : "") + items[i];
  if (items.size() > limit) s += ", ... (" + std::to_string(items.size()) + " total)";
  return s;
}

std::vector<fs::path> dump_dirs(const fs::path& root) {
  auto dirs = list_dump_dirs(root);
  if (dirs.empty()) throw ValidationError("no dump directories (with manifest.json) under '" + root.string() + "'");
  return dirs;
}

// Image id -> label under `criterion`, or a ValidationError naming the
// criteria that do exist.
std::map<std::string, std::string> truth_for(const LabelTable& table, const std::string& criterion,
                                             const fs::path& path) {
  const auto labels = table.labels_for(criterion);
  if (labels.empty()) {
    throw ValidationError("criterion '" + criterion + "' not found in '" + path.string() +
                          "'; available: " + list_some(table.criteria(), 100));
  }
  return labels;
}

std::vector<std::string> aligned_truth(const std::vector<std::string>& ids,
                                       const std::map<std::string, std::string>& truth, const std::string& what) {
  std::vector<std::string> out, missing;
  for (const auto& id : ids) {
    const auto it = truth.find(id);
    if (it == truth.end()) {
      missing.push_back(id);
    } else {
      out.push_back(it->second);
    }
  }
  if (!missing.empty()) {
    throw ValidationError(std::to_string(missing.size()) + " image id(s) in " + what +
                          " have no label: " + list_some(missing));
  }
  return out;
}

// ---- localize --------------------------------------------------------------

struct LocalizeArgs {
  std::string dumps, unembed, vocab, keywords, feature, sidecar, out = "target.json";
  double tau = kDefaultTau;
  bool restrict_to_text = false, raw_logits = false;
  std::size_t top_k_filter = 0, num_samples = 0;
  std::vector<std::int64_t> layers;
  std::uint64_t seed = 0;
};

void cmd_localize(const LocalizeArgs& a, std::ostream& out, std::ostream& err) {
  if (!a.raw_logits && !(a.tau > 0.0 && a.tau <= 1.0)) {
    throw ValidationError("--tau must lie in (0, 1] for probabilities (got " + num(a.tau) + "); use --raw-logits to "
                          "threshold logits");
  }
  if (!std::isfinite(a.tau)) throw ValidationError("--tau must be finite");

  auto dirs = dump_dirs(a.dumps);
  if (a.num_samples > 0 && a.num_samples < dirs.size()) {
    std::vector<fs::path> picked;
    for (auto i : sample_indices(dirs.size(), a.num_samples, a.seed)) picked.push_back(dirs[i]);
    dirs = std::move(picked);
  }

  const Vocab vocab = read_vocab(a.vocab);
  const auto keywords = read_keywords(a.keywords);
  if (keywords.empty()) throw ValidationError("keyword file '" + a.keywords + "' has no keywords");
  TokenizationSidecar sidecar;
  if (!a.sidecar.empty()) sidecar = read_sidecar(a.sidecar);
  const KeywordSet set = resolve_keywords(a.feature, keywords, vocab, a.sidecar.empty() ? nullptr : &sidecar);
  for (const auto& w : set.warnings) err << "warning: " << w << "\n";
  for (const auto& k : set.unresolved) err << "warning: keyword '" << k << "' has no token id, skipped\n";

  CountOptions options;
  options.tau = a.tau;
  options.restrict_to_text = a.restrict_to_text;
  options.normalize = !a.raw_logits;
  if (a.top_k_filter > 0) options.top_k_filter = a.top_k_filter;
  if (!a.layers.empty()) options.layers = a.layers;

  // One dump in memory at a time.
  CountMap counts;
  std::optional<UnembeddingMatrix> w;
  std::set<std::string> seen;
  for (const auto& dir : dirs) {
    const HiddenStateDump dump = read_dump(dir);
    if (!seen.insert(dump.image_id).second) throw ValidationError("duplicate image_id '" + dump.image_id + "'");
    if (!w) {
      w = read_unembedding(a.unembed, static_cast<std::int64_t>(vocab.size()), dump.d_model);
    }
    counts.merge(count_high_logits(std::span(&dump, 1), *w, set.token_ids, options));
  }

  TargetSpec spec = select_targets(counts);
  spec.feature = a.feature;
  spec.tau = a.tau;
  spec.normalized = options.normalize;
  for (auto id : set.token_ids) spec.keywords.push_back(vocab.token(id));
  spec.num_images = static_cast<std::int64_t>(dirs.size());

  Staged staged(a.out, nullptr);
  write_target(spec, staged.path());
  staged.commit();

  out << "scanned " << dirs.size() << " dumps, " << set.token_ids.size() << " keyword tokens, tau " << num(a.tau)
      << "\n";
  out << "  layer  position  count  mean_keyword_" << (spec.normalized ? "prob" : "logit") << "\n";
  for (const auto& c : spec.candidates) {
    char line[128];
    const bool chosen = c.layer == spec.chosen.layer && c.position == spec.chosen.position;
    std::snprintf(line, sizeof line, "%c %5lld  %8lld  %5lld  %.6f\n", chosen ? '*' : ' ',
                  static_cast<long long>(c.layer), static_cast<long long>(c.position),
                  static_cast<long long>(c.count), c.mean_keyword_logit);
    out << line;
  }
  out << "chosen (" << spec.chosen.layer << ", " << spec.chosen.position << ") -> " << a.out << "\n";
}

// ---- embed -----------------------------------------------------------------

struct EmbedArgs {
  std::string dumps, target, unembed, vocab, out = "embeddings";
  bool raw_logits = false;
};

void cmd_embed(const EmbedArgs& a, std::ostream& out) {
  const TargetSpec target = read_target(a.target);
  const Vocab vocab = read_vocab(a.vocab);
  const auto dirs = dump_dirs(a.dumps);

  EmbeddingSet set;
  set.vocab_size = static_cast<std::int64_t>(vocab.size());
  set.source = {target.feature, target.chosen.layer, target.chosen.position};
  set.normalized = !a.raw_logits;

  std::optional<UnembeddingMatrix> w;
  std::set<std::string> seen;
  for (const auto& dir : dirs) {
    const HiddenStateDump dump = read_dump(dir);
    if (!seen.insert(dump.image_id).second) throw ValidationError("duplicate image_id '" + dump.image_id + "'");
    if (target.chosen.layer >= dump.num_layers || target.chosen.position >= dump.num_tokens) {
      throw ValidationError("dump for image '" + dump.image_id + "' (" + dir.string() + ") has no layer " +
                            std::to_string(target.chosen.layer) + " / position " +
                            std::to_string(target.chosen.position));
    }
    if (!w) w = read_unembedding(a.unembed, set.vocab_size, dump.d_model);
    VocabDistribution dist = project(dump.state(target.chosen.layer, target.chosen.position), *w);
    if (set.normalized) dist = softmax(dist);
    for (double v : dist.values) set.matrix.push_back(static_cast<float>(v));
    set.image_ids.push_back(dump.image_id);
  }
  set.n = static_cast<std::int64_t>(set.image_ids.size());

  Staged staged(a.out, "manifest.json");
  write_embeddings(set, staged.path());
  staged.commit();
  out << "embedded " << set.n << " images at (" << set.source.layer << ", " << set.source.position << "), "
      << (set.normalized ? "probabilities" : "raw logits") << " -> " << a.out << "\n";
}

// ---- cluster / sweep shared options ----------------------------------------

struct TrainArgs {
  std::size_t epochs = kDefaultEpochs;
  double lr = 1e-3;
  double momentum = 0.9;
  std::size_t hidden = kDefaultHiddenUnits;
  std::size_t max_iters = 300;
  double tol = 1e-6;
  bool skip_head = false;
};

void add_train_options(CLI::App* sub, TrainArgs& t) {
  sub->add_option("--epochs", t.epochs, "Head training epochs (published setting: 100)")->capture_default_str();
  sub->add_option("--lr", t.lr, "Head learning rate")->capture_default_str();
  sub->add_option("--momentum", t.momentum, "Momentum coefficient")->capture_default_str();
  sub->add_option("--hidden", t.hidden, "Hidden units of the head (published setting: 512)")->capture_default_str();
  sub->add_option("--max-iters", t.max_iters, "K-means iteration cap")->capture_default_str();
  sub->add_option("--tol", t.tol, "K-means centroid-shift tolerance")->capture_default_str();
  sub->add_flag("--skip-head", t.skip_head, "Report raw K-means assignments (no clustering head)");
}

PipelineConfig pipeline_config(const TrainArgs& t, std::uint64_t seed) {
  PipelineConfig cfg;
  cfg.kmeans.max_iters = t.max_iters;
  cfg.kmeans.tol = t.tol;
  cfg.train.epochs = t.epochs;
  cfg.train.learning_rate = t.lr;
  cfg.train.momentum = t.momentum;
  cfg.train.hidden = t.hidden;
  cfg.train.seed = seed;
  cfg.seed = seed;
  cfg.skip_head = t.skip_head;
  return cfg;
}

void check_k_alpha(std::size_t k, double alpha, std::int64_t n) {
  if (k < 1) throw ValidationError("--k must be at least 1");
  if (static_cast<std::int64_t>(k) > n) {
    throw ValidationError("--k " + std::to_string(k) + " exceeds the number of images (" + std::to_string(n) + ")");
  }
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ValidationError("--alpha must lie in (0, 1] (got " + num(alpha) + ")");
}

// ---- cluster ---------------------------------------------------------------

struct ClusterArgs {
  std::string embeddings, out = "run";
  std::size_t k = 0;
  double alpha = 0.3;
  std::uint64_t seed = 0;
  bool save_head = false;
  TrainArgs train;
};

void cmd_cluster(const ClusterArgs& a, std::ostream& out) {
  const EmbeddingSet set = read_embeddings(a.embeddings);
  check_k_alpha(a.k, a.alpha, set.n);
  const Matrix x = to_matrix(set);
  const PipelineResult r = cluster_pipeline(x, a.k, a.alpha, pipeline_config(a.train, a.seed));

  Staged staged(a.out, "history.json");
  fs::create_directories(staged.path());
  {
    std::ofstream csv(staged.path() / "assignments.csv", std::ios::binary | std::ios::trunc);
    csv << "image_id,cluster\n";
    for (std::size_t i = 0; i < r.labels.size(); ++i) csv << csv_escape(set.image_ids[i]) << "," << r.labels[i] << "\n";
    if (!csv) throw IoError("write failed for assignments.csv");
  }

  json history;
  history["config"] = {{"embeddings", a.embeddings},
                       {"k", a.k},
                       {"alpha", a.alpha},
                       {"seed", a.seed},
                       {"epochs", a.train.epochs},
                       {"learning_rate", a.train.lr},
                       {"momentum", a.train.momentum},
                       {"hidden", a.train.hidden},
                       {"max_iters", a.train.max_iters},
                       {"tol", a.train.tol},
                       {"skip_head", a.train.skip_head}};
  history["source"] = {{"feature", set.source.feature},
                       {"layer", set.source.layer},
                       {"position", set.source.position},
                       {"normalized", set.normalized}};
  history["kmeans"] = {{"inertia", r.kmeans.inertia},
                       {"iterations", r.kmeans.iterations_run},
                       {"inertia_history", r.kmeans.inertia_history}};
  history["loss"] = r.training ? json(r.training->loss_history) : json::array();
  history["final_loss"] = r.training ? json(r.training->final_loss) : json(nullptr);
  write_json(history, staged.path() / "history.json");

  json pseudo;
  pseudo["alpha"] = a.alpha;
  pseudo["clusters"] = json::array();
  std::vector<std::size_t> sizes(a.k, 0);
  for (auto c : r.kmeans.assignments) ++sizes[c];
  for (std::size_t j = 0; j < a.k; ++j) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < r.pseudo.size(); ++i) {
      if (r.pseudo.labels[i] == j) ids.push_back(set.image_ids[r.pseudo.indices[i]]);
    }
    pseudo["clusters"].push_back({{"cluster", j}, {"size", sizes[j]}, {"selected", ids}});
  }
  write_json(pseudo, staged.path() / "pseudo_labels.json");

  if (a.save_head && r.training) write_head(r.training->params, staged.path() / "head");
  staged.commit();

  out << "clustered " << set.n << " images into " << a.k << " groups";
  if (r.training) {
    out << "; head loss " << num(r.training->loss_history.front()) << " -> " << num(r.training->final_loss);
  } else {
    out << " (K-means only)";
  }
  out << "; K-means inertia " << num(r.kmeans.inertia) << " after " << r.kmeans.iterations_run << " iterations -> "
      << a.out << "\n";
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string predictions, labels, criterion, nmi_norm = "arithmetic", run, out = "report.json";
};

// Reads `image_id,cluster` or the labels format (using `criterion`).
std::pair<std::vector<std::string>, std::vector<std::string>> read_predictions(const fs::path& path,
                                                                              const std::string& criterion) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw ValidationError("'" + path.string() + "' is empty");
  const auto header = split_csv_line(lines[0], 1);
  std::vector<std::string> ids, labels;
  if (header == std::vector<std::string>{"image_id", "cluster"}) {
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      const auto f = split_csv_line(lines[i], i + 1);
      if (f.size() != 2) {
        throw ValidationError("'" + path.string() + "' line " + std::to_string(i + 1) + ": expected 2 fields");
      }
      ids.push_back(f[0]);
      labels.push_back(f[1]);
    }
  } else if (header == std::vector<std::string>{"image_id", "criterion", "label"}) {
    const LabelTable table = read_labels(path);
    const auto crits = table.criteria();
    const std::string use = crits.size() == 1 ? crits[0] : criterion;
    for (const auto& [id, label] : truth_for(table, use, path)) {
      ids.push_back(id);
      labels.push_back(label);
    }
  } else {
    throw FormatError("'" + path.string() + "': header must be 'image_id,cluster' or 'image_id,criterion,label'");
  }
  std::set<std::string> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw ValidationError("'" + path.string() + "' lists image '" + id + "' twice");
  }
  return {ids, labels};
}

void cmd_eval(const EvalArgs& a, std::ostream& out) {
  const NmiNorm norm = parse_nmi_norm(a.nmi_norm);
  const auto [ids, pred] = read_predictions(a.predictions, a.criterion);
  const auto truth = aligned_truth(ids, truth_for(read_labels(a.labels), a.criterion, a.labels), "the predictions");
  if (ids.size() < 2) throw ValidationError("need at least 2 predictions to evaluate");

  EvalReport report = evaluate(pred, truth, norm);
  report.criterion = a.criterion;
  if (!a.run.empty()) {
    const json history = read_json(fs::path(a.run) / "history.json");
    if (history.contains("config")) {
      for (const auto& [key, value] : history["config"].items()) {
        report.config[key] = value.is_string() ? value.get<std::string>() : value.dump();
      }
    }
  }

  Staged staged(a.out, nullptr);
  write_report(report, staged.path());
  staged.commit();

  char line[256];
  std::snprintf(line, sizeof line, "criterion   %s\nn           %lld\nnmi         %.6f\nrand_index  %.6f\nnmi_norm    %s\n",
                report.criterion.c_str(), static_cast<long long>(report.n), report.nmi, report.rand_index,
                to_string(norm).c_str());
  out << line;
}

// ---- sweep -----------------------------------------------------------------

struct SweepArgs {
  std::string embeddings, labels, criterion, nmi_norm = "arithmetic", out = "sweep.csv";
  std::string alphas, seeds = "0";
  std::size_t k = 0;
  TrainArgs train;
};

double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// Comma-separated numbers, sorted and deduplicated.
template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& flag) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    T v{};
    const auto r = std::from_chars(item.data(), item.data() + item.size(), v);
    if (r.ec != std::errc() || r.ptr != item.data() + item.size()) {
      throw ValidationError(flag + ": '" + item + "' is not a valid number");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ValidationError(flag + " is empty");
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void cmd_sweep(const SweepArgs& args, std::ostream& out) {
  struct {
    std::vector<double> alphas;
    std::vector<std::uint64_t> seeds;
  } a{parse_list<double>(args.alphas, "--alphas"), parse_list<std::uint64_t>(args.seeds, "--seeds")};
  const NmiNorm norm = parse_nmi_norm(args.nmi_norm);

  const EmbeddingSet set = read_embeddings(args.embeddings);
  const auto truth =
      aligned_truth(set.image_ids, truth_for(read_labels(args.labels), args.criterion, args.labels), "the embeddings");
  const std::size_t k = args.k > 0 ? args.k : std::set<std::string>(truth.begin(), truth.end()).size();
  for (double alpha : a.alphas) check_k_alpha(k, alpha, set.n);
  if (set.n < 2) throw ValidationError("need at least 2 images to evaluate");
  const Matrix x = to_matrix(set);

  struct Cell {
    double nmi = 0.0, ri = 0.0;
  };
  const std::size_t cells = a.alphas.size() * a.seeds.size();
  std::vector<Cell> results(cells);
  parallel_for(cells, [&](std::size_t c) {
    const double alpha = a.alphas[c / a.seeds.size()];
    const std::uint64_t seed = a.seeds[c % a.seeds.size()];
    const auto r = cluster_pipeline(x, k, alpha, pipeline_config(args.train, seed));
    std::vector<std::string> pred;
    for (auto l : r.labels) pred.push_back(std::to_string(l));
    const EvalReport report = evaluate(pred, truth, norm);
    results[c] = {report.nmi, report.rand_index};
  });

  Staged staged(args.out, nullptr);
  {
    std::ofstream csv(staged.path(), std::ios::binary | std::ios::trunc);
    if (!csv) throw IoError("cannot open '" + staged.path().string() + "' for writing");
    csv << "kind,alpha,seed,nmi,ri,nmi_std,ri_std\n";
    for (std::size_t c = 0; c < cells; ++c) {
      csv << "run," << num(a.alphas[c / a.seeds.size()]) << "," << a.seeds[c % a.seeds.size()] << ","
          << num(results[c].nmi) << "," << num(results[c].ri) << ",,\n";
    }
    for (std::size_t i = 0; i < a.alphas.size(); ++i) {
      std::vector<double> nmis, ris;
      for (std::size_t s = 0; s < a.seeds.size(); ++s) {
        nmis.push_back(results[i * a.seeds.size() + s].nmi);
        ris.push_back(results[i * a.seeds.size() + s].ri);
      }
      const double mn = std::accumulate(nmis.begin(), nmis.end(), 0.0) / static_cast<double>(nmis.size());
      const double mr = std::accumulate(ris.begin(), ris.end(), 0.0) / static_cast<double>(ris.size());
      csv << "summary," << num(a.alphas[i]) << ",," << num(mn) << "," << num(mr) << "," << num(sample_std(nmis, mn))
          << "," << num(sample_std(ris, mr)) << "\n";
    }
    if (!csv) throw IoError("write failed for '" + staged.path().string() + "'");
  }
  staged.commit();
  out << "swept " << a.alphas.size() << " alpha values x " << a.seeds.size() << " seeds (K = " << k << ") -> "
      << args.out << "\n";
}

// ---- config file -----------------------------------------------------------

bool user_passed(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& s) { return s == flag || s.rfind(flag + "=", 0) == 0; });
}

// Flat `key = value` entries (or entries under a [subcommand] table) become
// command-line options of the selected subcommand, unless that option was
// given explicitly.
std::vector<std::string> apply_config(std::vector<std::string> args, const CLI::App& app, std::ostream& err) {
  std::string config;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config = args[i].substr(9);
  }
  if (config.empty()) return args;
  if (!fs::is_regular_file(config)) throw ValidationError("config file '" + config + "' not found");

  std::size_t sub_pos = args.size();
  const CLI::App* sub = nullptr;
  for (std::size_t i = 0; i < args.size() && !sub; ++i) {
    for (const CLI::App* s : app.get_subcommands({})) {
      if (s->get_name() == args[i]) {
        sub = s;
        sub_pos = i;
      }
    }
  }
  if (!sub) return args;

  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_file(config);
  } catch (const CLI::Error& e) {
    throw ValidationError("cannot parse config file '" + config + "': " + e.what());
  }

  std::vector<std::string> injected;
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    if (!item.parents.empty() && item.parents.front() != sub->get_name()) continue;
    std::string key = item.name;
    std::replace(key.begin(), key.end(), '_', '-');
    const std::string flag = "--" + key;
    const CLI::Option* opt = sub->get_option_no_throw(flag);
    if (!opt) {
      bool known = false;
      for (const CLI::App* s : app.get_subcommands({})) known |= s->get_option_no_throw(flag) != nullptr;
      if (!known) err << "warning: config key '" << item.name << "' matches no option, ignored\n";
      continue;
    }
    if (user_passed(args, flag)) continue;
    if (opt->get_expected_max() == 0) {
      const std::string v = item.inputs.empty() ? "true" : item.inputs.front();
      if (v == "true" || v == "1") injected.push_back(flag);
      continue;
    }
    std::string joined;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) joined += (i ? "," : "") + item.inputs[i];
    injected.push_back(flag);
    injected.push_back(joined);
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub_pos) + 1, injected.begin(), injected.end());
  return args;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Criterion-guided multiple clustering from multimodal LLM hidden states", "esmc"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string("esmc ") + kVersion);
  std::string config_path;
  app.add_option("--config", config_path,
                 "Flat TOML key = value file (keys as option names, '_' or '-'); command-line flags take precedence");
  app.footer("ESMC_THREADS caps worker threads.");

  LocalizeArgs loc;
  auto* l = app.add_subcommand("localize", "Find the (layer, position) whose logit lens carries the feature keywords");
  l->add_option("--dumps", loc.dumps, "Directory of per-image dump directories")->required()->check(CLI::ExistingDirectory);
  l->add_option("--unembed", loc.unembed, "Unembedding matrix, f32 [V][D]")->required()->check(CLI::ExistingFile);
  l->add_option("--vocab", loc.vocab, "Vocabulary, one token per line")->required()->check(CLI::ExistingFile);
  l->add_option("--keywords", loc.keywords, "Keyword list, one per line")->required()->check(CLI::ExistingFile);
  l->add_option("--feature", loc.feature, "Criterion name, e.g. color")->required();
  l->add_option("--sidecar", loc.sidecar, "Keyword tokenization JSON")->check(CLI::ExistingFile);
  l->add_option("--tau", loc.tau, "High-logit threshold on keyword probability (published setting: 0.2)")
      ->capture_default_str();
  l->add_flag("--restrict-to-text", loc.restrict_to_text, "Scan only the prompt's text tokens");
  l->add_option("--top-k-filter", loc.top_k_filter, "Also require the keyword among the cell's top-k tokens");
  l->add_flag("--raw-logits", loc.raw_logits, "Threshold raw logits instead of probabilities");
  l->add_option("--layers", loc.layers, "Only scan these layers (comma separated)")->delimiter(',');
  l->add_option("--num-samples", loc.num_samples, "Use a seeded random subset of this many dumps (0 = all)")
      ->capture_default_str();
  l->add_option("--seed", loc.seed, "Sampling seed")->capture_default_str();
  l->add_option("--out", loc.out, "Output target JSON")->capture_default_str();

  EmbedArgs emb;
  auto* e = app.add_subcommand("embed", "Read every image's target embedding at the chosen cell");
  e->add_option("--dumps", emb.dumps, "Directory of per-image dump directories")->required()->check(CLI::ExistingDirectory);
  e->add_option("--target", emb.target, "Target JSON written by localize")->required()->check(CLI::ExistingFile);
  e->add_option("--unembed", emb.unembed, "Unembedding matrix, f32 [V][D]")->required()->check(CLI::ExistingFile);
  e->add_option("--vocab", emb.vocab, "Vocabulary, one token per line")->required()->check(CLI::ExistingFile);
  e->add_flag("--raw-logits", emb.raw_logits, "Store logits instead of softmax probabilities");
  e->add_option("--out", emb.out, "Output embeddings directory")->capture_default_str();

  ClusterArgs clu;
  auto* c = app.add_subcommand("cluster", "K-means, pseudo-labels and the clustering head");
  c->add_option("--embeddings", clu.embeddings, "Embeddings directory")->required()->check(CLI::ExistingDirectory);
  c->add_option("--k", clu.k, "Number of clusters")->required();
  c->add_option("--alpha", clu.alpha,
                "Fraction of each cluster kept as pseudo-labels (published settings: 0.1 to 0.4 by dataset)")
      ->capture_default_str();
  c->add_option("--seed", clu.seed, "Seed for K-means and head initialization")->capture_default_str();
  add_train_options(c, clu.train);
  c->add_flag("--save-head", clu.save_head, "Also write the trained head weights");
  c->add_option("--out", clu.out, "Output run directory")->capture_default_str();

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "NMI and Rand index of predictions against labels");
  v->add_option("--predictions", ev.predictions, "assignments.csv or a labels-format CSV")
      ->required()
      ->check(CLI::ExistingFile);
  v->add_option("--labels", ev.labels, "Ground-truth labels CSV")->required()->check(CLI::ExistingFile);
  v->add_option("--criterion", ev.criterion, "Criterion column value to score against")->required();
  v->add_option("--nmi-norm", ev.nmi_norm, "arithmetic, geometric or max")->capture_default_str();
  v->add_option("--run", ev.run, "Run directory whose config is echoed into the report")
      ->check(CLI::ExistingDirectory);
  v->add_option("--out", ev.out, "Output report JSON")->capture_default_str();

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Pseudo-label fraction sensitivity over alphas and seeds");
  s->add_option("--embeddings", sw.embeddings, "Embeddings directory")->required()->check(CLI::ExistingDirectory);
  s->add_option("--labels", sw.labels, "Ground-truth labels CSV")->required()->check(CLI::ExistingFile);
  s->add_option("--criterion", sw.criterion, "Criterion to score against")->required();
  s->add_option("--alphas", sw.alphas, "Comma-separated alpha values")->required();
  s->add_option("--seeds", sw.seeds, "Comma-separated seeds")->capture_default_str();
  s->add_option("--k", sw.k, "Number of clusters (default: number of distinct labels)");
  s->add_option("--nmi-norm", sw.nmi_norm, "arithmetic, geometric or max")->capture_default_str();
  add_train_options(s, sw.train);
  s->add_option("--out", sw.out, "Output CSV")->capture_default_str();

  try {
    std::vector<std::string> argv = apply_config(args, app, err);
    std::reverse(argv.begin(), argv.end());
    try {
      app.parse(argv);
    } catch (const CLI::ParseError& pe) {
      const int code = app.exit(pe, out, err);
      return code == 0 ? 0 : 2;
    }

    if (l->parsed()) cmd_localize(loc, out, err);
    if (e->parsed()) cmd_embed(emb, out);
    if (c->parsed()) cmd_cluster(clu, out);
    if (v->parsed()) cmd_eval(ev, out);
    if (s->parsed()) cmd_sweep(sw, out);
    return 0;
  } catch (const ValidationError& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  } catch (const IoError& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  }
}

}  // namespace esmc::cli
