#include "prefalign/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "prefalign/embedding_store.hpp"
#include "prefalign/error.hpp"

namespace prefalign::scoring {
namespace {

constexpr std::string_view kMlpMagic = "MLP1";

template <typename T>
double forward(std::span<const T> input, const MlpWeights& weights) {
  weights.check();
  if (input.size() != weights.input_dim()) {
    throw Error(ErrorKind::DimensionMismatch,
                "embedding has dim " + std::to_string(input.size()) +
                    ", aesthetic head expects " + std::to_string(weights.input_dim()));
  }
  std::vector<double> x(input.begin(), input.end());
  for (const auto& layer : weights.layers) {
    std::vector<double> y(layer.rows);
    for (std::uint32_t r = 0; r < layer.rows; ++r) {
      double acc = layer.bias[r];
      const float* row = layer.weight.data() + std::size_t{r} * layer.cols;
      for (std::uint32_t c = 0; c < layer.cols; ++c) acc += double{row[c]} * x[c];
      y[r] = layer.activation == Activation::Relu ? std::max(acc, 0.0) : acc;
    }
    x = std::move(y);
  }
  return x.front();
}

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd out;
  if (xs.empty()) return out;
  for (double x : xs) out.mean += x;
  out.mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(var / static_cast<double>(xs.size()));
  return out;
}

}  // namespace

double hps(std::span<const double> img_emb, std::span<const double> txt_emb) {
  return 100.0 * emb::cosine(img_emb, txt_emb);
}

double hps(std::span<const float> img_emb, std::span<const float> txt_emb) {
  return 100.0 * emb::cosine(img_emb, txt_emb);
}

double clip_score(std::span<const double> img_emb, std::span<const double> txt_emb) {
  return emb::cosine(img_emb, txt_emb);
}

double clip_score(std::span<const float> img_emb, std::span<const float> txt_emb) {
  return emb::cosine(img_emb, txt_emb);
}

void MlpWeights::check() const {
  if (layers.empty()) throw Error(ErrorKind::DimensionMismatch, "MLP has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.rows == 0 || l.cols == 0 ||
        l.weight.size() != std::size_t{l.rows} * l.cols || l.bias.size() != l.rows) {
      throw Error(ErrorKind::DimensionMismatch,
                  "layer " + std::to_string(i) + " has inconsistent shape");
    }
    if (i > 0 && l.cols != layers[i - 1].rows) {
      throw Error(ErrorKind::DimensionMismatch,
                  "layer " + std::to_string(i) + " expects " + std::to_string(l.cols) +
                      " inputs but layer " + std::to_string(i - 1) + " produces " +
                      std::to_string(layers[i - 1].rows));
    }
  }
  if (layers.back().rows != 1) {
    throw Error(ErrorKind::DimensionMismatch, "last layer must produce a scalar");
  }
}

std::string encode_mlp(const MlpWeights& weights) {
  weights.check();
  detail::ByteWriter w;
  w.bytes(kMlpMagic);
  w.u32(static_cast<std::uint32_t>(weights.layers.size()));
  for (const auto& l : weights.layers) {
    w.u32(l.rows);
    w.u32(l.cols);
    for (float x : l.weight) w.f32(x);
    for (float x : l.bias) w.f32(x);
    w.u8(static_cast<std::uint8_t>(l.activation));
  }
  return w.data();
}

MlpWeights decode_mlp(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(kMlpMagic.size(), "magic") != kMlpMagic) {
    throw Error(ErrorKind::BadMagic, "expected MLP1 header");
  }
  MlpWeights weights;
  const std::uint32_t count = r.u32("layer count");
  for (std::uint32_t i = 0; i < count; ++i) {
    MlpLayer l;
    l.rows = r.u32("layer rows");
    l.cols = r.u32("layer cols");
    const std::size_t cells = std::size_t{l.rows} * l.cols;
    if (cells > r.size()) r.need(r.size() + 1, "layer parameters");
    r.need(4 * (cells + l.rows) + 1, "layer parameters");
    l.weight.resize(cells);
    for (auto& x : l.weight) x = r.f32("layer weights");
    l.bias.resize(l.rows);
    for (auto& x : l.bias) x = r.f32("layer bias");
    const std::uint8_t code = r.u8("activation code");
    if (code > 1) {
      throw Error(ErrorKind::MalformedInput,
                  "unknown activation code " + std::to_string(code));
    }
    l.activation = static_cast<Activation>(code);
    const bool finite = std::all_of(l.weight.begin(), l.weight.end(),
                                    [](float x) { return std::isfinite(x); }) &&
                        std::all_of(l.bias.begin(), l.bias.end(),
                                    [](float x) { return std::isfinite(x); });
    if (!finite) throw Error(ErrorKind::NonFiniteValue, "non-finite MLP parameter");
    weights.layers.push_back(std::move(l));
  }
  if (!r.at_end()) throw Error(ErrorKind::MalformedInput, "trailing bytes after MLP1 layers");
  weights.check();
  return weights;
}

MlpWeights load_mlp(const std::filesystem::path& path) {
  return decode_mlp(detail::read_file(path));
}

void save_mlp(const MlpWeights& weights, const std::filesystem::path& path) {
  detail::write_file(path, encode_mlp(weights));
}

double aesthetic_score(std::span<const double> img_emb, const MlpWeights& weights) {
  return forward(img_emb, weights);
}

double aesthetic_score(std::span<const float> img_emb, const MlpWeights& weights) {
  return forward(img_emb, weights);
}

Choice choose(std::span<const double> scores) {
  Choice c;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[c.index]) c.index = i;
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != c.index && scores[i] == scores[c.index]) c.tie = true;
  }
  return c;
}

Choice choose(const ScoredGroup& group) {
  std::vector<double> scores;
  scores.reserve(group.image_scores.size());
  for (const auto& [id, s] : group.image_scores) scores.push_back(s);
  return choose(scores);
}

double preference_accuracy(const ChoiceVector& predicted, const dataset::Dataset& truth) {
  if (truth.instances.empty()) {
    throw Error(ErrorKind::EmptyDataset, "accuracy over an empty dataset");
  }
  std::vector<std::string> missing;
  std::size_t hits = 0;
  for (const auto& inst : truth.instances) {
    const auto it = predicted.choices.find(inst.prompt_id);
    if (it == predicted.choices.end()) {
      missing.push_back(inst.prompt_id);
    } else if (it->second == inst.preferred_index) {
      ++hits;
    }
  }
  if (!missing.empty()) {
    throw IdListError(ErrorKind::MissingPrediction, std::move(missing),
                      "no prediction for prompts");
  }
  return static_cast<double>(hits) / static_cast<double>(truth.instances.size());
}

double pairwise_agreement(const ChoiceVector& a, const ChoiceVector& b) {
  const bool same_keys =
      a.choices.size() == b.choices.size() &&
      std::equal(a.choices.begin(), a.choices.end(), b.choices.begin(),
                 [](const auto& x, const auto& y) { return x.first == y.first; });
  if (!same_keys) {
    throw Error(ErrorKind::KeyMismatch,
                "raters '" + a.rater_id + "' and '" + b.rater_id +
                    "' answered different key sets");
  }
  if (a.choices.empty()) {
    throw Error(ErrorKind::KeyMismatch, "agreement over an empty key set");
  }
  std::size_t same = 0;
  auto ib = b.choices.begin();
  for (auto ia = a.choices.begin(); ia != a.choices.end(); ++ia, ++ib) {
    if (ia->second == ib->second) ++same;
  }
  return static_cast<double>(same) / static_cast<double>(a.choices.size());
}

MeanStd panel_agreement(const ChoiceVector& model, const std::vector<ChoiceVector>& panel) {
  if (panel.empty()) throw Error(ErrorKind::InvalidArgument, "empty rater panel");
  std::vector<double> values;
  values.reserve(panel.size());
  for (const auto& rater : panel) values.push_back(pairwise_agreement(model, rater));
  return mean_std(values);
}

MeanStd human_agreement(const std::vector<ChoiceVector>& panel) {
  if (panel.size() < 2) {
    throw Error(ErrorKind::InvalidArgument, "human agreement needs at least two raters");
  }
  std::vector<double> values;
  for (std::size_t i = 0; i < panel.size(); ++i) {
    for (std::size_t j = i + 1; j < panel.size(); ++j) {
      values.push_back(pairwise_agreement(panel[i], panel[j]));
    }
  }
  return mean_std(values);
}

std::vector<ChoiceVector> read_choice_vectors(std::istream& in) {
  using nlohmann::json;
  std::vector<ChoiceVector> raters;
  std::unordered_map<std::string, std::size_t> slot;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      const auto rater = j.at("rater_id").get<std::string>();
      const auto key = j.at("key").get<std::string>();
      const auto choice = j.at("choice").get<long long>();
      if (choice < 0) throw Error(ErrorKind::MalformedInput, "negative choice");
      auto [it, fresh] = slot.emplace(rater, raters.size());
      if (fresh) raters.push_back(ChoiceVector{rater, {}});
      auto& cv = raters[it->second];
      if (!cv.choices.emplace(key, static_cast<std::size_t>(choice)).second) {
        throw Error(ErrorKind::MalformedInput,
                    "rater '" + rater + "' answered key '" + key + "' twice");
      }
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedInput,
                  "choices line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return raters;
}

std::vector<ChoiceVector> load_choice_vectors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  return read_choice_vectors(in);
}

void write_choice_vectors(const std::vector<ChoiceVector>& raters, std::ostream& out) {
  for (const auto& cv : raters) {
    for (const auto& [key, choice] : cv.choices) {
      out << nlohmann::json{{"rater_id", cv.rater_id}, {"key", key}, {"choice", choice}}.dump()
          << '\n';
    }
  }
}

}  // namespace prefalign::scoring
