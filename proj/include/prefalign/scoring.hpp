#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prefalign/dataset.hpp"

namespace prefalign::scoring {

// 100 * cosine(image, text). Same errors as emb::cosine.
double hps(std::span<const double> img_emb, std::span<const double> txt_emb);
double hps(std::span<const float> img_emb, std::span<const float> txt_emb);

// Raw cosine between image and prompt embeddings.
double clip_score(std::span<const double> img_emb, std::span<const double> txt_emb);
double clip_score(std::span<const float> img_emb, std::span<const float> txt_emb);

enum class Activation : std::uint8_t { Identity = 0, Relu = 1 };

struct MlpLayer {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> weight;  // rows x cols, row-major
  std::vector<float> bias;    // rows
  Activation activation = Activation::Identity;

  bool operator==(const MlpLayer&) const = default;
};

// Aesthetic head. The architecture lives entirely in the weights.
struct MlpWeights {
  std::vector<MlpLayer> layers;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().cols; }
  // Throws DimensionMismatch unless shapes chain and the output is scalar.
  void check() const;

  bool operator==(const MlpWeights&) const = default;
};

// MLP1: "MLP1", u32 layer count, per layer u32 rows, u32 cols, row-major f32
// weights, f32 bias, u8 activation code.
std::string encode_mlp(const MlpWeights& weights);
MlpWeights decode_mlp(std::string_view bytes);
MlpWeights load_mlp(const std::filesystem::path& path);
void save_mlp(const MlpWeights& weights, const std::filesystem::path& path);

double aesthetic_score(std::span<const double> img_emb, const MlpWeights& weights);
double aesthetic_score(std::span<const float> img_emb, const MlpWeights& weights);

struct ScoredGroup {
  std::string prompt_id;
  std::string text_embedding_id;
  std::vector<std::pair<std::string, double>> image_scores;  // instance order
};

struct Choice {
  std::size_t index = 0;
  bool tie = false;  // several entries share the maximum
};

// Argmax with lowest-index tie-breaking.
Choice choose(std::span<const double> scores);
Choice choose(const ScoredGroup& group);

struct ChoiceVector {
  std::string rater_id;
  std::map<std::string, std::size_t> choices;  // prompt or pair id -> index

  bool operator==(const ChoiceVector&) const = default;
};

// Fraction of instances whose predicted index equals preferred_index.
// Throws MissingPrediction naming uncovered prompt ids, EmptyDataset on
// an empty dataset.
double preference_accuracy(const ChoiceVector& predicted, const dataset::Dataset& truth);

// Exact-match fraction over a shared key set. Throws KeyMismatch.
double pairwise_agreement(const ChoiceVector& a, const ChoiceVector& b);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

// Mean/std of agreement(model, rater) over the panel.
MeanStd panel_agreement(const ChoiceVector& model, const std::vector<ChoiceVector>& panel);

// Mean/std of agreement over all unordered rater pairs; needs >= 2 raters.
MeanStd human_agreement(const std::vector<ChoiceVector>& panel);

// JSONL {rater_id, key, choice}; raters returned in order of first appearance.
std::vector<ChoiceVector> read_choice_vectors(std::istream& in);
std::vector<ChoiceVector> load_choice_vectors(const std::filesystem::path& path);
void write_choice_vectors(const std::vector<ChoiceVector>& raters, std::ostream& out);

}  // namespace prefalign::scoring
