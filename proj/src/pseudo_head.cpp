#include "esmc/pseudo_head.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include <nlohmann/json.hpp>

#include "esmc/error.hpp"
#include "esmc/random.hpp"
#include "esmc/tensor_store.hpp"

namespace esmc {

namespace fs = std::filesystem;

namespace {

inline constexpr const char* kHeadLayout = "head_f32_le";

void check_batch(const HeadParams& params, const Matrix& x, const PseudoLabelSet& batch) {
  if (batch.indices.empty()) throw ValidationError("pseudo-label batch is empty");
  if (batch.indices.size() != batch.labels.size()) throw ValidationError("pseudo-label indices/labels differ in size");
  if (x.cols() != params.input_dim()) {
    throw ValidationError("head expects input dimension " + std::to_string(params.input_dim()) + ", rows have " +
                          std::to_string(x.cols()));
  }
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch.indices[b] >= x.rows()) throw ValidationError("pseudo-label row index out of range");
    if (batch.labels[b] >= params.classes()) throw ValidationError("pseudo-label class out of range");
  }
}

double log_sum_exp(std::span<const double> s) {
  const double m = *std::max_element(s.begin(), s.end());
  double sum = 0.0;
  for (double v : s) sum += std::exp(v - m);
  return m + std::log(sum);
}

// Forward pass keeping the pre-activations for backprop.
void forward(const HeadParams& p, std::span<const double> x, std::vector<double>& pre, std::vector<double>& scores) {
  const std::size_t hidden = p.hidden();
  pre.resize(hidden);
  for (std::size_t h = 0; h < hidden; ++h) pre[h] = dot(p.w1.row(h), x) + p.b1[h];
  scores.assign(p.classes(), 0.0);
  for (std::size_t c = 0; c < p.classes(); ++c) {
    const auto w = p.w2.row(c);
    double acc = p.b2[c];
    for (std::size_t h = 0; h < hidden; ++h) {
      if (pre[h] > 0.0) acc += w[h] * pre[h];
    }
    scores[c] = acc;
  }
}

void fill_uniform(std::span<double> values, double bound, SplitMix64& rng) {
  for (double& v : values) v = rng.uniform(-bound, bound);
}

// p <- p - lr * v after v <- mu * v + g, elementwise over a flat buffer.
void momentum_step(std::span<double> param, std::span<double> velocity, std::span<const double> grad, double lr,
                   double mu) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = mu * velocity[i] + grad[i];
    param[i] -= lr * velocity[i];
  }
}

}  // namespace

std::size_t pseudo_label_quota(double alpha, std::size_t cluster_size) {
  // The 1e-9 slack keeps products like 0.3 * 10 from rounding up past 3.
  const double raw = std::ceil(alpha * static_cast<double>(cluster_size) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(raw, 1.0)), 1, std::max<std::size_t>(cluster_size, 1));
}

PseudoLabelSet select_pseudo_labels(const Matrix& x, const ClusterModel& model, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw ValidationError("alpha=" + std::to_string(alpha) + " must lie in (0, 1]");
  }
  if (model.assignments.size() != x.rows()) {
    throw ValidationError("cluster model covers " + std::to_string(model.assignments.size()) + " rows, data has " +
                          std::to_string(x.rows()));
  }
  if (model.centroids.cols() != x.cols()) throw ValidationError("cluster model dimension differs from the data");

  PseudoLabelSet out;
  out.alpha = alpha;
  for (std::size_t j = 0; j < model.k; ++j) {
    std::vector<std::pair<double, std::size_t>> members;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      if (model.assignments[i] == j) members.emplace_back(squared_distance(x.row(i), model.centroids.row(j)), i);
    }
    if (members.empty()) continue;
    std::sort(members.begin(), members.end());
    const std::size_t keep = pseudo_label_quota(alpha, members.size());
    for (std::size_t m = 0; m < keep; ++m) {
      out.indices.push_back(members[m].second);
      out.labels.push_back(j);
    }
  }
  return out;
}

HeadParams zero_head(std::size_t input_dim, std::size_t hidden, std::size_t classes) {
  return {Matrix(hidden, input_dim), std::vector<double>(hidden, 0.0), Matrix(classes, hidden),
          std::vector<double>(classes, 0.0)};
}

HeadParams init_head(std::size_t input_dim, std::size_t hidden, std::size_t classes, std::uint64_t seed) {
  HeadParams p = zero_head(input_dim, hidden, classes);
  SplitMix64 rng(seed);
  const double b_in = 1.0 / std::sqrt(static_cast<double>(input_dim));
  const double b_hidden = 1.0 / std::sqrt(static_cast<double>(hidden));
  fill_uniform(p.w1.data(), b_in, rng);
  fill_uniform(p.b1, b_in, rng);
  fill_uniform(p.w2.data(), b_hidden, rng);
  fill_uniform(p.b2, b_hidden, rng);
  return p;
}

std::vector<double> head_forward(const HeadParams& params, std::span<const double> x) {
  if (x.size() != params.input_dim()) {
    throw ValidationError("head expects input dimension " + std::to_string(params.input_dim()) + ", got " +
                          std::to_string(x.size()));
  }
  std::vector<double> pre, scores;
  forward(params, x, pre, scores);
  return scores;
}

double head_loss(const HeadParams& params, const Matrix& x, const PseudoLabelSet& batch) {
  check_batch(params, x, batch);
  std::vector<double> pre, scores;
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    forward(params, x.row(batch.indices[b]), pre, scores);
    total += log_sum_exp(scores) - scores[batch.labels[b]];
  }
  return total / static_cast<double>(batch.size());
}

LossAndGrad head_loss_and_grad(const HeadParams& params, const Matrix& x, const PseudoLabelSet& batch) {
  check_batch(params, x, batch);
  const std::size_t hidden = params.hidden();
  const std::size_t classes = params.classes();
  const double inv_m = 1.0 / static_cast<double>(batch.size());

  LossAndGrad out{0.0, zero_head(params.input_dim(), hidden, classes)};
  HeadParams& g = out.grad;
  std::vector<double> pre, scores, dscore(classes), dpre(hidden);

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto row = x.row(batch.indices[b]);
    const std::size_t label = batch.labels[b];
    forward(params, row, pre, scores);
    const double lse = log_sum_exp(scores);
    out.loss += lse - scores[label];

    for (std::size_t c = 0; c < classes; ++c) {
      dscore[c] = (std::exp(scores[c] - lse) - (c == label ? 1.0 : 0.0)) * inv_m;
      g.b2[c] += dscore[c];
      auto gw2 = g.w2.row(c);
      for (std::size_t h = 0; h < hidden; ++h) {
        if (pre[h] > 0.0) gw2[h] += dscore[c] * pre[h];
      }
    }
    for (std::size_t h = 0; h < hidden; ++h) {
      if (pre[h] <= 0.0) {
        dpre[h] = 0.0;
        continue;
      }
      double acc = 0.0;
      for (std::size_t c = 0; c < classes; ++c) acc += params.w2(c, h) * dscore[c];
      dpre[h] = acc;
    }
    for (std::size_t h = 0; h < hidden; ++h) {
      if (dpre[h] == 0.0) continue;
      g.b1[h] += dpre[h];
      auto gw1 = g.w1.row(h);
      for (std::size_t d = 0; d < row.size(); ++d) gw1[d] += dpre[h] * row[d];
    }
  }
  out.loss /= static_cast<double>(batch.size());
  return out;
}

HeadParams head_grad(const HeadParams& params, const Matrix& x, const PseudoLabelSet& batch) {
  return head_loss_and_grad(params, x, batch).grad;
}

void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ValidationError("epochs must be at least 1");
  if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate)) {
    throw ValidationError("learning_rate must be a positive finite number");
  }
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ValidationError("momentum must lie in [0, 1)");
  if (cfg.hidden < 1) throw ValidationError("hidden width must be at least 1");
}

TrainResult train_head(const Matrix& x, const PseudoLabelSet& pseudo, std::size_t k, const TrainConfig& cfg) {
  validate(cfg);
  if (k < 2) throw ValidationError("training a head needs K >= 2");
  if (pseudo.indices.empty()) throw ValidationError("pseudo-label set is empty");

  TrainResult result;
  result.params = init_head(x.cols(), cfg.hidden, k, cfg.seed);
  HeadParams& p = result.params;
  HeadParams velocity = zero_head(x.cols(), cfg.hidden, k);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const LossAndGrad lg = head_loss_and_grad(p, x, pseudo);
    if (!std::isfinite(lg.loss)) {
      throw NumericError("head training diverged at epoch " + std::to_string(epoch) +
                         " (non-finite loss); lower the learning rate");
    }
    result.loss_history.push_back(lg.loss);
    momentum_step(p.w1.data(), velocity.w1.data(), lg.grad.w1.data(), cfg.learning_rate, cfg.momentum);
    momentum_step(p.b1, velocity.b1, lg.grad.b1, cfg.learning_rate, cfg.momentum);
    momentum_step(p.w2.data(), velocity.w2.data(), lg.grad.w2.data(), cfg.learning_rate, cfg.momentum);
    momentum_step(p.b2, velocity.b2, lg.grad.b2, cfg.learning_rate, cfg.momentum);
  }
  result.final_loss = head_loss(p, x, pseudo);
  if (!std::isfinite(result.final_loss)) {
    throw NumericError("head training diverged after the last epoch (non-finite loss); lower the learning rate");
  }
  return result;
}

std::vector<std::size_t> head_predict(const HeadParams& params, const Matrix& x) {
  if (x.cols() != params.input_dim()) throw ValidationError("head input dimension differs from the data");
  std::vector<std::size_t> labels(x.rows());
  std::vector<double> pre, scores;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    forward(params, x.row(i), pre, scores);
    labels[i] = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
  }
  return labels;
}

PipelineResult cluster_pipeline(const Matrix& x, std::size_t k, double alpha, const PipelineConfig& cfg) {
  if (!cfg.skip_head && k >= 2) validate(cfg.train);
  PipelineResult out;
  out.kmeans = kmeans_fit(x, k, cfg.seed, cfg.kmeans);
  out.pseudo = select_pseudo_labels(x, out.kmeans, alpha);
  if (k == 1) {
    out.labels.assign(x.rows(), 0);
    return out;
  }
  if (cfg.skip_head) {
    out.labels = out.kmeans.assignments;
    return out;
  }
  out.training = train_head(x, out.pseudo, k, cfg.train);
  out.labels = head_predict(out.training->params, x);
  return out;
}

void write_head(const HeadParams& params, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
  nlohmann::json m;
  m["layout"] = kHeadLayout;
  m["input_dim"] = params.input_dim();
  m["hidden"] = params.hidden();
  m["classes"] = params.classes();
  m["activation"] = "relu";
  {
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw IoError("cannot write '" + (dir / "manifest.json").string() + "'");
    out << m.dump(2) << "\n";
  }
  auto narrow = [](std::span<const double> v) { return std::vector<float>(v.begin(), v.end()); };
  write_f32_file(dir / "w1.bin", narrow(params.w1.data()));
  write_f32_file(dir / "b1.bin", narrow(params.b1));
  write_f32_file(dir / "w2.bin", narrow(params.w2.data()));
  write_f32_file(dir / "b2.bin", narrow(params.b2));
}

HeadParams read_head(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open '" + (dir / "manifest.json").string() + "'");
  nlohmann::json m;
  std::size_t input = 0, hidden = 0, classes = 0;
  try {
    m = nlohmann::json::parse(in);
    if (m.at("layout").get<std::string>() != kHeadLayout) throw FormatError("unknown head layout");
    input = m.at("input_dim").get<std::size_t>();
    hidden = m.at("hidden").get<std::size_t>();
    classes = m.at("classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed head manifest in '" + dir.string() + "': " + e.what());
  }
  auto widen = [](const std::vector<float>& v) { return std::vector<double>(v.begin(), v.end()); };
  HeadParams p;
  p.w1 = Matrix(hidden, input, widen(read_f32_file(dir / "w1.bin", hidden * input)));
  p.b1 = widen(read_f32_file(dir / "b1.bin", hidden));
  p.w2 = Matrix(classes, hidden, widen(read_f32_file(dir / "w2.bin", classes * hidden)));
  p.b2 = widen(read_f32_file(dir / "b2.bin", classes));
  return p;
}

}  // namespace esmc
