#include "esmc/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "esmc/error.hpp"
#include "esmc/parallel.hpp"
#include "esmc/random.hpp"

namespace esmc {

namespace {

void check_dims(const Matrix& x, const Matrix& centroids) {
  if (x.cols() != centroids.cols()) {
    throw ValidationError("dimension mismatch: rows have " + std::to_string(x.cols()) + " columns, centroids have " +
                          std::to_string(centroids.cols()));
  }
}

Matrix kmeanspp_seed(const Matrix& x, std::size_t k, SplitMix64& rng) {
  const std::size_t n = x.rows();
  Matrix centroids(k, x.cols());
  std::vector<bool> taken(n, false);

  auto place = [&](std::size_t c, std::size_t i) {
    std::copy(x.row(i).begin(), x.row(i).end(), centroids.row(c).begin());
    taken[i] = true;
  };

  place(0, static_cast<std::size_t>(rng.below(n)));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(x.row(i), centroids.row(0));

  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (d2[i] > 0.0 && acc > target) {
          pick = i;
          break;
        }
      }
      if (pick == n) {
        // Rounding left target past the last positive weight.
        for (std::size_t i = n; i-- > 0;) {
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    } else {
      // Every point coincides with a chosen centroid: take an unused row.
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i]) free.push_back(i);
      pick = free[static_cast<std::size_t>(rng.below(free.size()))];
    }
    place(c, pick);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(x.row(i), centroids.row(c)));
  }
  return centroids;
}

// Gives every empty cluster the point farthest from its own centroid, taken
// from a cluster that keeps at least one member. The emptied cluster's
// centroid moves onto that point.
void repair_empty(const Matrix& x, Matrix& centroids, std::vector<std::size_t>& assignments) {
  const std::size_t k = centroids.rows();
  std::vector<std::size_t> sizes(k, 0);
  for (auto a : assignments) ++sizes[a];
  for (std::size_t c = 0; c < k; ++c) {
    if (sizes[c] > 0) continue;
    std::size_t far = assignments.size();
    double far_d = -1.0;
    for (std::size_t i = 0; i < assignments.size(); ++i) {
      if (sizes[assignments[i]] < 2) continue;
      const double d = squared_distance(x.row(i), centroids.row(assignments[i]));
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    --sizes[assignments[far]];
    assignments[far] = c;
    sizes[c] = 1;
    std::copy(x.row(far).begin(), x.row(far).end(), centroids.row(c).begin());
  }
}

Matrix member_means(const Matrix& x, const std::vector<std::size_t>& assignments, std::size_t k) {
  Matrix means(k, x.cols());
  std::vector<std::size_t> sizes(k, 0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto dst = means.row(assignments[i]);
    const auto src = x.row(i);
    for (std::size_t d = 0; d < src.size(); ++d) dst[d] += src[d];
    ++sizes[assignments[i]];
  }
  for (std::size_t c = 0; c < k; ++c) {
    for (double& v : means.row(c)) v /= static_cast<double>(sizes[c]);
  }
  return means;
}

}  // namespace

Matrix to_matrix(const EmbeddingSet& set) {
  Matrix m(static_cast<std::size_t>(set.n), static_cast<std::size_t>(set.vocab_size));
  for (std::size_t i = 0; i < set.matrix.size(); ++i) m.data()[i] = set.matrix[i];
  return m;
}

Matrix sq_distances(const Matrix& x, const Matrix& centroids) {
  check_dims(x, centroids);
  Matrix out(x.rows(), centroids.rows());
  parallel_for(x.rows(), [&](std::size_t i) {
    for (std::size_t j = 0; j < centroids.rows(); ++j) out(i, j) = squared_distance(x.row(i), centroids.row(j));
  });
  return out;
}

std::vector<std::size_t> assign(const Matrix& x, const Matrix& centroids) {
  if (centroids.rows() == 0) throw ValidationError("assign needs at least one centroid");
  const Matrix d = sq_distances(x, centroids);
  std::vector<std::size_t> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < centroids.rows(); ++j) {
      if (d(i, j) < d(i, best)) best = j;
    }
    out[i] = best;
  }
  return out;
}

double inertia(const Matrix& x, const Matrix& centroids, const std::vector<std::size_t>& assignments) {
  check_dims(x, centroids);
  double total = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) total += squared_distance(x.row(i), centroids.row(assignments[i]));
  return total;
}

ClusterModel kmeans_fit(const Matrix& x, std::size_t k, std::uint64_t seed, const KMeansOptions& options) {
  if (k == 0) throw ValidationError("K must be at least 1");
  if (x.rows() < k) {
    throw ValidationError("cannot form K=" + std::to_string(k) + " clusters from " + std::to_string(x.rows()) +
                          " rows");
  }
  if (options.max_iters == 0) throw ValidationError("max_iters must be at least 1");
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw ValidationError("K-means input contains a non-finite value");
  }

  SplitMix64 rng(seed);
  ClusterModel model;
  model.k = k;
  model.seed = seed;
  model.centroids = kmeanspp_seed(x, k, rng);

  std::vector<std::size_t> previous;
  for (std::size_t it = 1; it <= options.max_iters; ++it) {
    std::vector<std::size_t> current = assign(x, model.centroids);
    repair_empty(x, model.centroids, current);
    Matrix updated = member_means(x, current, k);

    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      shift = std::max(shift, std::sqrt(squared_distance(updated.row(c), model.centroids.row(c))));
    }
    model.centroids = std::move(updated);
    model.assignments = current;
    model.iterations_run = it;
    model.inertia = inertia(x, model.centroids, model.assignments);
    model.inertia_history.push_back(model.inertia);

    if (current == previous || shift < options.tol) break;
    previous = std::move(current);
  }
  return model;
}

}  // namespace esmc
