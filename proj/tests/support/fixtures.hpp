#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unistd.h>

#include "prefalign/chat_ingest.hpp"
#include "prefalign/dataset.hpp"
#include "prefalign/embedding_store.hpp"
#include "prefalign/rng.hpp"

namespace fixtures {

namespace fs = std::filesystem;
using prefalign::Rng;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("prefalign_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

// What the generator planted, keyed by generation message id.
struct PlantedSession {
  std::size_t n = 0;
  std::size_t preferred = 0;
  std::string author;
  std::string prompt;
};

struct SyntheticLog {
  prefalign::ingest::ChatLog log;
  std::map<std::string, PlantedSession> sessions;  // only the well-formed ones
  std::size_t noise = 0;
};

struct LogSpec {
  std::size_t good = 100;
  std::size_t noise = 20;
  std::size_t user_upload = 0;
  std::size_t nsfw = 0;
  std::uint64_t seed = 1;
};

// Sessions are prompt -> bot generation (reply) -> user choice (reply to the
// generation), interleaved with chatter that cannot form a session. Message
// streams from different sessions are merged at random, preserving each
// session's own order.
inline SyntheticLog make_chat_log(const LogSpec& spec) {
  using prefalign::ingest::Attachment;
  using prefalign::ingest::ChatMessage;
  Rng rng(spec.seed);
  std::vector<std::vector<ChatMessage>> streams;
  SyntheticLog out;

  const std::size_t total = spec.good + spec.user_upload + spec.nsfw;
  for (std::size_t k = 0; k < total; ++k) {
    const bool upload = k >= spec.good && k < spec.good + spec.user_upload;
    const bool nsfw = k >= spec.good + spec.user_upload;
    const std::string tag = std::to_string(k);
    const std::string author = "author" + std::to_string(rng.below(17));
    const std::size_t n = 2 + rng.below(3);
    const std::size_t pick = rng.below(n);

    ChatMessage prompt{"p" + tag, author, false, "a prompt numbered " + tag, {}, std::nullopt, 0};
    ChatMessage gen{"g" + tag, "bot", true, "", {}, prompt.message_id, 0};
    for (std::size_t i = 0; i < n; ++i) {
      gen.attachments.push_back({"img" + tag + "_" + std::to_string(i), false, false});
    }
    if (nsfw) gen.attachments[rng.below(n)].nsfw_flag = true;
    ChatMessage choice{"c" + tag, author, false, "", {}, gen.message_id, 0};
    choice.attachments.push_back({gen.attachments[pick].attachment_id, upload, false});

    streams.push_back({prompt, gen, choice});
    if (!upload && !nsfw) out.sessions[gen.message_id] = {n, pick, author, prompt.content};
  }
  for (std::size_t k = 0; k < spec.noise; ++k) {
    const std::string tag = "z" + std::to_string(k);
    switch (rng.below(3)) {
      case 0:
        streams.push_back({{tag, "chatter", false, "hello there " + tag, {}, std::nullopt, 0}});
        break;
      case 1:  // a bot upscale with one attachment is not a generation grid
        streams.push_back(
            {{tag, "bot", true, "upscaled", {{"up" + tag, false, false}}, std::nullopt, 0}});
        break;
      default:
        streams.push_back({{tag, "bot", true, "status ok", {}, std::nullopt, 0}});
        break;
    }
  }
  out.noise = spec.noise;

  std::vector<std::size_t> cursor(streams.size(), 0);
  std::vector<std::size_t> live(streams.size());
  for (std::size_t i = 0; i < live.size(); ++i) live[i] = i;
  std::int64_t ts = 1'700'000'000'000;
  while (!live.empty()) {
    const std::size_t j = rng.below(live.size());
    const std::size_t s = live[j];
    auto msg = streams[s][cursor[s]++];
    msg.timestamp = ts;
    ts += 1 + static_cast<std::int64_t>(rng.below(5000));
    out.log.push_back(std::move(msg));
    if (cursor[s] == streams[s].size()) {
      live[j] = live.back();
      live.pop_back();
    }
  }
  return out;
}

// Embedding fixture for the adapter. A hidden reflection R = Q diag(+1, -1) Q^T
// fixes `fixed_dims` directions and flips the rest. The preferred image is
// R t plus small noise; other candidates and prompts are isotropic. Plain
// cosine sits near chance, while projecting onto the fixed subspace makes
// the preferred image parallel to its prompt. The projection is I + A B with
// A = -flipped and B = flipped^T, so rank dim - fixed_dims suffices.
struct SeparableFixture {
  prefalign::dataset::Dataset dataset;
  prefalign::emb::EmbeddingMatrix images{1};
  prefalign::emb::EmbeddingMatrix texts{1};
  Eigen::MatrixXd flipped;  // dim x (dim - fixed_dims), orthonormal columns
};

struct SeparableSpec {
  std::size_t prompts = 500;
  std::size_t n = 4;
  std::size_t dim = 32;
  std::size_t fixed_dims = 16;
  double noise = 0.1;
  std::uint64_t seed = 7;
};

inline Eigen::MatrixXd random_orthogonal(std::size_t dim, Rng& rng) {
  Eigen::MatrixXd m(dim, dim);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  return qr.householderQ() * Eigen::MatrixXd::Identity(dim, dim);
}

inline SeparableFixture make_separable(const SeparableSpec& spec) {
  Rng rng(spec.seed);
  const auto dim = static_cast<Eigen::Index>(spec.dim);
  const auto fixed = static_cast<Eigen::Index>(spec.fixed_dims);
  const Eigen::MatrixXd q = random_orthogonal(spec.dim, rng);
  Eigen::VectorXd signs = Eigen::VectorXd::Ones(dim);
  signs.tail(dim - fixed).setConstant(-1.0);
  const Eigen::MatrixXd reflect = q * signs.asDiagonal() * q.transpose();

  SeparableFixture fx;
  fx.images = prefalign::emb::EmbeddingMatrix(spec.dim);
  fx.texts = prefalign::emb::EmbeddingMatrix(spec.dim);
  fx.flipped = q.rightCols(dim - fixed);

  auto draw = [&] {
    Eigen::VectorXd v(dim);
    for (auto& x : v) x = rng.normal();
    return v;
  };
  auto store = [&](prefalign::emb::EmbeddingMatrix& m, const std::string& id,
                   const Eigen::VectorXd& v) {
    m.insert(id, std::span<const double>(v.data(), spec.dim));
  };

  for (std::size_t p = 0; p < spec.prompts; ++p) {
    const std::string pid = "prompt" + std::to_string(p);
    const Eigen::VectorXd t = draw();
    store(fx.texts, pid, t);
    prefalign::PreferenceInstance inst{pid, "prompt text " + std::to_string(p), "u", {},
                                       rng.below(spec.n)};
    for (std::size_t i = 0; i < spec.n; ++i) {
      const std::string iid = pid + "_img" + std::to_string(i);
      if (i == inst.preferred_index) {
        store(fx.images, iid, reflect * t + spec.noise * draw());
      } else {
        store(fx.images, iid, draw());
      }
      inst.image_ids.push_back(iid);
    }
    fx.dataset.instances.push_back(std::move(inst));
  }
  return fx;
}

// Isotropic random embeddings with uniformly random preferred indices and
// no relation between text and images.
inline SeparableFixture make_isotropic(std::size_t prompts, std::size_t n, std::size_t dim,
                                       std::uint64_t seed) {
  Rng rng(seed);
  SeparableFixture fx;
  fx.images = prefalign::emb::EmbeddingMatrix(dim);
  fx.texts = prefalign::emb::EmbeddingMatrix(dim);
  auto vec = [&] {
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.normal();
    return v;
  };
  for (std::size_t p = 0; p < prompts; ++p) {
    const std::string pid = "q" + std::to_string(p);
    const auto t = vec();
    fx.texts.insert(pid, std::span<const double>(t));
    prefalign::PreferenceInstance inst{pid, pid, "u", {}, rng.below(n)};
    for (std::size_t i = 0; i < n; ++i) {
      const std::string iid = pid + "_" + std::to_string(i);
      const auto e = vec();
      fx.images.insert(iid, std::span<const double>(e));
      inst.image_ids.push_back(iid);
    }
    fx.dataset.instances.push_back(std::move(inst));
  }
  return fx;
}

}  // namespace fixtures
