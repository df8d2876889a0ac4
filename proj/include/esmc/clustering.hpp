#pragma once

// Seeded K-means (k-means++ seeding + Lloyd iterations) over embedding rows.

#include <cstdint>
#include <vector>

#include "esmc/matrix.hpp"
#include "esmc/tensor_store.hpp"

namespace esmc {

// Rows of an EmbeddingSet widened to double.
Matrix to_matrix(const EmbeddingSet& set);

struct KMeansOptions {
  std::size_t max_iters = 300;
  // Stop once no centroid moves farther than this (Euclidean).
  double tol = 1e-6;
};

struct ClusterModel {
  std::size_t k = 0;
  Matrix centroids;                  // [k][dim]
  std::vector<std::size_t> assignments;
  double inertia = 0.0;              // sum of squared distances to own centroid
  std::size_t iterations_run = 0;
  std::uint64_t seed = 0;
  // Inertia after each Lloyd iteration; non-increasing.
  std::vector<double> inertia_history;
};

// [n][k] squared Euclidean distances.
Matrix sq_distances(const Matrix& x, const Matrix& centroids);

// Nearest centroid per row, ties to the lowest centroid index.
std::vector<std::size_t> assign(const Matrix& x, const Matrix& centroids);

// Sum of squared distances of each row to its assigned centroid.
double inertia(const Matrix& x, const Matrix& centroids, const std::vector<std::size_t>& assignments);

// k-means++ seeding followed by Lloyd iterations until the assignment stops
// changing, centroid movement drops below tol, or max_iters. A cluster left
// empty by an assignment step takes the point farthest from its own centroid
// (among clusters with more than one member). Deterministic given the seed.
ClusterModel kmeans_fit(const Matrix& x, std::size_t k, std::uint64_t seed, const KMeansOptions& options = {});

}  // namespace esmc
