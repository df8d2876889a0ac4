#pragma once

// Pseudo-label clustering head: K-means picks the most central members of
// every cluster, a two-layer MLP is trained on them with cross-entropy, and
// the MLP then labels every row.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "esmc/clustering.hpp"
#include "esmc/matrix.hpp"

namespace esmc {

inline constexpr std::size_t kDefaultHiddenUnits = 512;
inline constexpr std::size_t kDefaultEpochs = 100;

struct PseudoLabelSet {
  std::vector<std::size_t> indices;  // rows of X, grouped by cluster, nearest first
  std::vector<std::size_t> labels;   // parallel to indices
  double alpha = 0.0;

  std::size_t size() const { return indices.size(); }
};

// Number of rows kept from a cluster of `cluster_size` members:
// max(1, ceil(alpha * cluster_size)).
std::size_t pseudo_label_quota(double alpha, std::size_t cluster_size);

// Per cluster, the quota members with the smallest squared distance to the
// centroid; distance ties go to the lower row index.
PseudoLabelSet select_pseudo_labels(const Matrix& x, const ClusterModel& model, double alpha);

// scores = W2 * relu(W1 * x + b1) + b2
struct HeadParams {
  Matrix w1;               // [hidden][input]
  std::vector<double> b1;  // [hidden]
  Matrix w2;               // [classes][hidden]
  std::vector<double> b2;  // [classes]

  std::size_t input_dim() const { return w1.cols(); }
  std::size_t hidden() const { return w1.rows(); }
  std::size_t classes() const { return w2.rows(); }

  bool operator==(const HeadParams&) const = default;
};

HeadParams zero_head(std::size_t input_dim, std::size_t hidden, std::size_t classes);

// Weights and biases uniform in +-1/sqrt(fan_in).
HeadParams init_head(std::size_t input_dim, std::size_t hidden, std::size_t classes, std::uint64_t seed);

std::vector<double> head_forward(const HeadParams& params, std::span<const double> x);

// Mean cross-entropy of softmax(scores) against the pseudo-labels.
double head_loss(const HeadParams& params, const Matrix& x, const PseudoLabelSet& batch);

struct LossAndGrad {
  double loss = 0.0;
  HeadParams grad;
};

// Exact gradient of head_loss by backpropagation. Pre-activations equal to 0
// take the rectifier's zero subgradient.
LossAndGrad head_loss_and_grad(const HeadParams& params, const Matrix& x, const PseudoLabelSet& batch);
HeadParams head_grad(const HeadParams& params, const Matrix& x, const PseudoLabelSet& batch);

struct TrainConfig {
  std::size_t epochs = kDefaultEpochs;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::size_t hidden = kDefaultHiddenUnits;
  std::uint64_t seed = 0;
};

void validate(const TrainConfig& cfg);

struct TrainResult {
  HeadParams params;
  std::vector<double> loss_history;  // loss before each update, one per epoch
  double final_loss = 0.0;           // loss after the last update
};

// Full-batch gradient descent with heavy-ball momentum:
//   v <- momentum * v + g;  p <- p - learning_rate * v
// Throws NumericError if the loss stops being finite.
TrainResult train_head(const Matrix& x, const PseudoLabelSet& pseudo, std::size_t k, const TrainConfig& cfg);

// Argmax of head scores per row, ties to the lower class.
std::vector<std::size_t> head_predict(const HeadParams& params, const Matrix& x);

struct PipelineConfig {
  KMeansOptions kmeans;
  TrainConfig train;
  std::uint64_t seed = 0;  // K-means seeding
  // Return the K-means assignments without training a head.
  bool skip_head = false;
};

struct PipelineResult {
  std::vector<std::size_t> labels;
  ClusterModel kmeans;
  PseudoLabelSet pseudo;
  std::optional<TrainResult> training;
};

// kmeans_fit -> select_pseudo_labels -> train_head -> head_predict.
// K = 1 labels every row 0.
PipelineResult cluster_pipeline(const Matrix& x, std::size_t k, double alpha, const PipelineConfig& cfg);

void write_head(const HeadParams& params, const std::filesystem::path& dir);
HeadParams read_head(const std::filesystem::path& dir);

}  // namespace esmc
