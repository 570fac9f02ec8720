#include "prefalign/gen_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "prefalign/error.hpp"
#include "prefalign/rng.hpp"

namespace prefalign::metrics {
namespace {

constexpr double kRowSumTolerance = 1e-6;
constexpr double kSymmetryTolerance = 1e-9;
constexpr double kEigenTolerance = 1e-8;
constexpr double kDistanceTolerance = 1e-6;

double magnitude(const Matrix& a) {
  return std::max(1.0, a.size() ? a.cwiseAbs().maxCoeff() : 0.0);
}

double split_score(const Matrix& probs, std::span<const std::size_t> rows) {
  const auto k = probs.cols();
  Vector marginal = Vector::Zero(k);
  for (auto r : rows) marginal += probs.row(static_cast<Eigen::Index>(r)).transpose();
  marginal /= static_cast<double>(rows.size());

  Vector log_marginal(k);
  for (Eigen::Index y = 0; y < k; ++y) {
    log_marginal[y] = std::log(std::max(marginal[y], kLogFloor));
  }
  double kl_sum = 0.0;
  for (auto r : rows) {
    double kl = 0.0;
    for (Eigen::Index y = 0; y < k; ++y) {
      const double p = probs(static_cast<Eigen::Index>(r), y);
      if (p > 0.0) kl += p * (std::log(std::max(p, kLogFloor)) - log_marginal[y]);
    }
    kl_sum += kl;
  }
  return std::exp(kl_sum / static_cast<double>(rows.size()));
}

}  // namespace

void check_probabilities(const Matrix& probs) {
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    const auto row = probs.row(r);
    if (!row.allFinite() || (row.array() < 0.0).any()) {
      throw Error(ErrorKind::InvalidProbabilities,
                  "row " + std::to_string(r) + " has a negative or non-finite entry");
    }
    const double sum = row.sum();
    if (std::abs(sum - 1.0) > kRowSumTolerance) {
      throw Error(ErrorKind::InvalidProbabilities,
                  "row " + std::to_string(r) + " sums to " + std::to_string(sum));
    }
  }
}

MeanStd inception_score(const Matrix& probs, std::size_t n_splits, std::uint64_t seed) {
  const auto rows = static_cast<std::size_t>(probs.rows());
  if (n_splits == 0 || rows < n_splits) {
    throw Error(ErrorKind::EmptySplit, std::to_string(rows) + " rows cannot fill " +
                                           std::to_string(n_splits) + " splits");
  }
  check_probabilities(probs);

  std::vector<std::size_t> order(rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  std::vector<double> scores;
  scores.reserve(n_splits);
  const std::size_t base = rows / n_splits, extra = rows % n_splits;
  std::size_t start = 0;
  for (std::size_t s = 0; s < n_splits; ++s) {
    const std::size_t len = base + (s < extra ? 1 : 0);
    scores.push_back(split_score(probs, std::span<const std::size_t>(order).subspan(start, len)));
    start += len;
  }

  MeanStd out;
  for (double x : scores) out.mean += x;
  out.mean /= static_cast<double>(n_splits);
  double var = 0.0;
  for (double x : scores) var += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(var / static_cast<double>(n_splits));
  return out;
}

GaussianStats fit_gaussian(const Matrix& features) {
  if (features.rows() < 2) {
    throw Error(ErrorKind::TooFewRows, "covariance needs at least 2 rows, got " +
                                           std::to_string(features.rows()));
  }
  if (!features.allFinite()) throw Error(ErrorKind::NonFiniteValue, "non-finite feature");
  GaussianStats g;
  g.mu = features.colwise().mean().transpose();
  const Matrix centered = features.rowwise() - g.mu.transpose();
  const Matrix s = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
  g.sigma = 0.5 * (s + s.transpose());
  return g;
}

Matrix matrix_sqrt_psd(const Matrix& a) {
  if (a.rows() != a.cols()) {
    throw Error(ErrorKind::DimensionMismatch, "square root of a non-square matrix");
  }
  const double scale = magnitude(a);
  const double asym = a.size() ? (a - a.transpose()).cwiseAbs().maxCoeff() : 0.0;
  if (asym > kSymmetryTolerance * scale) {
    throw Error(ErrorKind::NotSymmetric, "asymmetry " + std::to_string(asym));
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(a);
  if (eig.info() != Eigen::Success) {
    throw Error(ErrorKind::NumericalFailure, "eigendecomposition did not converge");
  }
  Vector lambda = eig.eigenvalues();
  if (lambda.size() && lambda.minCoeff() < -kEigenTolerance * scale) {
    throw Error(ErrorKind::IndefiniteMatrix,
                "eigenvalue " + std::to_string(lambda.minCoeff()));
  }
  lambda = lambda.cwiseMax(0.0).cwiseSqrt();
  const Matrix& v = eig.eigenvectors();
  const Matrix s = v * lambda.asDiagonal() * v.transpose();
  return 0.5 * (s + s.transpose());
}

double frechet_distance(const GaussianStats& g1, const GaussianStats& g2) {
  const auto d = g1.mu.size();
  if (g2.mu.size() != d || g1.sigma.rows() != d || g1.sigma.cols() != d ||
      g2.sigma.rows() != d || g2.sigma.cols() != d) {
    throw Error(ErrorKind::DimensionMismatch, "Gaussian stats of different dimension");
  }
  const Matrix root1 = matrix_sqrt_psd(g1.sigma);
  Matrix inner = root1 * g2.sigma * root1;
  inner = 0.5 * (inner + inner.transpose());
  const Matrix cross = matrix_sqrt_psd(inner);

  const double mean_term = (g1.mu - g2.mu).squaredNorm();
  const double trace_term = g1.sigma.trace() + g2.sigma.trace() - 2.0 * cross.trace();
  const double dist = mean_term + trace_term;
  if (dist >= 0.0) return dist;
  const double slack =
      kDistanceTolerance * std::max({1.0, g1.sigma.trace(), g2.sigma.trace()});
  if (dist >= -slack) return 0.0;
  throw Error(ErrorKind::NumericalFailure, "negative Frechet distance " + std::to_string(dist));
}

double fid(const Matrix& features_a, const Matrix& features_b) {
  if (features_a.cols() != features_b.cols()) {
    throw Error(ErrorKind::DimensionMismatch, "feature sets have different widths");
  }
  return frechet_distance(fit_gaussian(features_a), fit_gaussian(features_b));
}

Matrix gather_rows(const emb::EmbeddingProvider& source, const std::vector<std::string>& ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(source.dim()));
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto v = source.lookup(ids[i]);
    if (!v) {
      missing.push_back(ids[i]);
      continue;
    }
    for (std::size_t c = 0; c < v->size(); ++c) {
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = (*v)[c];
    }
  }
  if (!missing.empty()) {
    throw IdListError(ErrorKind::MissingFeature, std::move(missing), "no row for images");
  }
  return out;
}

Matrix to_matrix(const emb::EmbeddingMatrix& store) {
  Matrix out(static_cast<Eigen::Index>(store.size()), static_cast<Eigen::Index>(store.dim()));
  Eigen::Index r = 0;
  for (const auto& [id, values] : store.entries()) {
    for (std::size_t c = 0; c < values.size(); ++c) {
      out(r, static_cast<Eigen::Index>(c)) = values[c];
    }
    ++r;
  }
  return out;
}

SplitMetricReport split_metric_report(const dataset::Dataset& dataset,
                                      const emb::EmbeddingProvider& probs,
                                      const emb::EmbeddingProvider* features,
                                      const Matrix* reference_features,
                                      std::size_t n_splits, std::uint64_t seed) {
  std::vector<std::string> preferred, non_preferred, missing;
  for (const auto& inst : dataset.instances) {
    for (std::size_t k = 0; k < inst.image_ids.size(); ++k) {
      const auto& id = inst.image_ids[k];
      (k == inst.preferred_index ? preferred : non_preferred).push_back(id);
      if (!probs.lookup(id) || (features && !features->lookup(id))) missing.push_back(id);
    }
  }
  if (!missing.empty()) {
    throw IdListError(ErrorKind::MissingFeature, std::move(missing), "no metric input for images");
  }

  SplitMetricReport report;
  auto evaluate = [&](const std::vector<std::string>& ids, const char* name) {
    PartitionMetrics m;
    m.images = ids.size();
    if (ids.empty()) {
      report.warnings.push_back(std::string(name) + " partition is empty");
      return m;
    }
    if (ids.size() < n_splits) {
      report.warnings.push_back(std::string(name) + " partition has fewer images than splits");
    } else {
      m.inception = inception_score(gather_rows(probs, ids), n_splits, seed);
    }
    if (features && reference_features) {
      if (ids.size() < 2) {
        report.warnings.push_back(std::string(name) + " partition too small for FID");
      } else {
        m.fid = fid(gather_rows(*features, ids), *reference_features);
      }
    }
    return m;
  };
  report.preferred = evaluate(preferred, "preferred");
  report.non_preferred = evaluate(non_preferred, "non-preferred");
  return report;
}

}  // namespace prefalign::metrics
