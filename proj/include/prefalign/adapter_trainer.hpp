#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "prefalign/dataset.hpp"
#include "prefalign/embedding_store.hpp"

namespace prefalign::adapter {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Shared low-rank residual projection P(x) = x + A (B x) applied to both the
// image and the text embedding, followed by scaled cosine logits.
struct AdapterParams {
  Matrix a;  // dim x rank
  Matrix b;  // rank x dim
  double logit_scale = 100.0;

  std::size_t dim() const { return static_cast<std::size_t>(a.rows()); }
  std::size_t rank() const { return static_cast<std::size_t>(a.cols()); }

  // A = 0 (so P starts as the identity), B ~ N(0, 1/dim).
  static AdapterParams initial(std::size_t dim, std::size_t rank, double logit_scale,
                               std::uint64_t seed);

  // Throws InvalidArgument unless shapes, rank and scale are valid.
  void check() const;

  Vector project(const Vector& x) const { return x + a * (b * x); }
};

// ADP1, little-endian: "ADP1", u32 dim, u32 rank, f32 logit scale, then A and
// B row-major as f32.
std::string encode_adapter(const AdapterParams& params);
AdapterParams decode_adapter(std::string_view bytes);
AdapterParams load_adapter(const std::filesystem::path& path);
void save_adapter(const AdapterParams& params, const std::filesystem::path& path);

// Image vectors are looked up by image id, text vectors by prompt id.
struct EmbeddingSources {
  const emb::EmbeddingProvider& images;
  const emb::EmbeddingProvider& texts;
};

struct LossResult {
  double loss = 0.0;
  std::vector<double> logits;
};

// logit_i = s * cos(P(e_i), P(t)); loss = -log softmax(logits)[preferred].
LossResult forward_loss(const PreferenceInstance& instance, const EmbeddingSources& sources,
                        const AdapterParams& params);

struct Gradient {
  Matrix a;
  Matrix b;
  double logit_scale = 0.0;
  double loss = 0.0;  // mean loss over the batch
};

// Gradient of the mean batch loss. Throws InvalidArgument on an empty batch.
Gradient grad(std::span<const PreferenceInstance> batch, const EmbeddingSources& sources,
              const AdapterParams& params);

struct TrainerConfig {
  double learning_rate = 1.7e-2;
  std::size_t epochs = 1;
  std::size_t batch_size = 5;
  double weight_decay = 3.1e-3;
  std::size_t rank = 32;
  double logit_scale = 100.0;
  bool train_logit_scale = false;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
};

struct StepRecord {
  std::size_t step;  // 1-based
  double learning_rate;
  double train_loss;

  bool operator==(const StepRecord&) const = default;
};

struct EpochRecord {
  std::size_t epoch;  // 1-based
  double mean_train_loss;
  std::optional<double> val_accuracy;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainHistory {
  double initial_train_loss = 0.0;
  std::optional<double> initial_val_accuracy;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;

  bool operator==(const TrainHistory&) const = default;
};

struct TrainResult {
  AdapterParams params;
  TrainHistory history;
};

// Cosine decay from base to 0 over total_steps; step is 0-based.
double cosine_learning_rate(double base, std::size_t step, std::size_t total_steps);

// AdamW with decoupled weight decay over shuffled mini-batches. Deterministic
// for a fixed seed. Starts from `start` when given, else from
// AdapterParams::initial(dim, rank, logit_scale, seed). Throws
// MissingEmbedding before training if any id is not covered, NonFiniteLoss
// with the failing step otherwise.
TrainResult train(const dataset::Dataset& train_set, const dataset::Dataset* val_set,
                  const EmbeddingSources& sources, const TrainerConfig& config,
                  std::optional<AdapterParams> start = std::nullopt);

// Fraction of instances whose argmax logit is the preferred image.
double evaluate(const AdapterParams& params, const dataset::Dataset& dataset,
                const EmbeddingSources& sources);

// Applies P to every vector of a store.
emb::EmbeddingMatrix project_store(const AdapterParams& params, const emb::EmbeddingMatrix& store);

void write_history_csv(const TrainHistory& history, std::ostream& out);

}  // namespace prefalign::adapter
