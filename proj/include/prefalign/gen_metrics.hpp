#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prefalign/dataset.hpp"
#include "prefalign/embedding_store.hpp"

namespace prefalign::metrics {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr std::size_t kDefaultSplits = 10;
inline constexpr double kLogFloor = 1e-12;

struct GaussianStats {
  Vector mu;
  Matrix sigma;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

// Throws InvalidProbabilities unless every row is non-negative and sums to
// 1 within 1e-6.
void check_probabilities(const Matrix& probs);

// Rows are shuffled by seed and cut into n_splits contiguous, near-equal
// splits. Per split IS = exp(mean_x KL(p(y|x) || p_split(y))); returns mean
// and population std over splits. Throws EmptySplit, InvalidProbabilities.
MeanStd inception_score(const Matrix& probs, std::size_t n_splits = kDefaultSplits,
                        std::uint64_t seed = 0);

// Column mean and unbiased covariance, symmetrized. Throws TooFewRows.
GaussianStats fit_gaussian(const Matrix& features);

// Symmetric PSD square root by eigendecomposition, negative eigenvalues
// clamped to zero. Tolerances scale with max(1, max|a_ij|):
// asymmetry above 1e-9 throws NotSymmetric, eigenvalues below -1e-8 throw
// IndefiniteMatrix.
Matrix matrix_sqrt_psd(const Matrix& a);

// |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), clamped at 0.
double frechet_distance(const GaussianStats& g1, const GaussianStats& g2);

double fid(const Matrix& features_a, const Matrix& features_b);

// Rows of `source` for `ids`, in order. Throws IdListError(MissingFeature).
Matrix gather_rows(const emb::EmbeddingProvider& source, const std::vector<std::string>& ids);

// All rows of a store, in id order.
Matrix to_matrix(const emb::EmbeddingMatrix& store);

struct PartitionMetrics {
  std::size_t images = 0;
  std::optional<MeanStd> inception;
  std::optional<double> fid;  // against the reference set
};

struct SplitMetricReport {
  PartitionMetrics preferred;
  PartitionMetrics non_preferred;
  std::vector<std::string> warnings;
};

// Partitions dataset images by their preferred flag and evaluates IS on the
// class probabilities and, when a reference is supplied, FID against it.
// Partitions too small for a metric get an absent entry and a warning.
SplitMetricReport split_metric_report(const dataset::Dataset& dataset,
                                      const emb::EmbeddingProvider& probs,
                                      const emb::EmbeddingProvider* features,
                                      const Matrix* reference_features,
                                      std::size_t n_splits = kDefaultSplits,
                                      std::uint64_t seed = 0);

}  // namespace prefalign::metrics
