#include "prefalign/adapter_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>

#include "binary_io.hpp"
#include "prefalign/error.hpp"
#include "prefalign/rng.hpp"
#include "prefalign/scoring.hpp"

namespace prefalign::adapter {
namespace {

constexpr std::string_view kMagic = "ADP1";

Vector fetch(const emb::EmbeddingProvider& source, const std::string& id, std::size_t dim) {
  const auto v = source.lookup(id);
  if (!v) throw IdListError(ErrorKind::MissingEmbedding, {id}, "no embedding for");
  if (v->size() != dim) {
    throw Error(ErrorKind::DimensionMismatch,
                "embedding '" + id + "' has dim " + std::to_string(v->size()) +
                    ", adapter expects " + std::to_string(dim));
  }
  Vector out(static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < dim; ++i) out[static_cast<Eigen::Index>(i)] = (*v)[i];
  return out;
}

double checked_norm(const Vector& v) {
  const double n = v.norm();
  if (n == 0.0) throw Error(ErrorKind::ZeroVector, "projected embedding is zero");
  return n;
}

// Numerically stable -log softmax(logits)[target]; fills probabilities.
double softmax_nll(const std::vector<double>& logits, std::size_t target,
                   std::vector<double>* probs) {
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - top);
  if (probs) {
    probs->resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
      (*probs)[i] = std::exp(logits[i] - top) / z;
    }
  }
  return std::max(0.0, top + std::log(z) - logits[target]);
}

void check_instance(const PreferenceInstance& inst) {
  if (inst.image_ids.empty() || inst.preferred_index >= inst.image_ids.size()) {
    throw Error(ErrorKind::InvalidArgument,
                "instance '" + inst.prompt_id + "' has an invalid preferred index");
  }
}

// Adds the per-instance loss gradient (scaled by `weight`) into `g`.
double accumulate(const PreferenceInstance& inst, const EmbeddingSources& sources,
                  const AdapterParams& p, double weight, Gradient& g) {
  check_instance(inst);
  const std::size_t dim = p.dim();
  const std::size_t n = inst.image_ids.size();
  const double s = p.logit_scale;

  const Vector t = fetch(sources.texts, inst.prompt_id, dim);
  const Vector bt = p.b * t;
  const Vector w = t + p.a * bt;
  const double w_norm = checked_norm(w);

  std::vector<Vector> e(n), be(n), u(n);
  std::vector<double> u_norm(n), cos(n), logits(n);
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = fetch(sources.images, inst.image_ids[i], dim);
    be[i] = p.b * e[i];
    u[i] = e[i] + p.a * be[i];
    u_norm[i] = checked_norm(u[i]);
    cos[i] = u[i].dot(w) / (u_norm[i] * w_norm);
    logits[i] = s * cos[i];
  }

  std::vector<double> probs;
  const double loss = softmax_nll(logits, inst.preferred_index, &probs);

  Vector grad_w = Vector::Zero(static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    const double dlogit = weight * (probs[i] - (i == inst.preferred_index ? 1.0 : 0.0));
    g.logit_scale += dlogit * cos[i];
    const double dcos = s * dlogit;
    const Vector grad_u =
        dcos * (w / (u_norm[i] * w_norm) - cos[i] * u[i] / (u_norm[i] * u_norm[i]));
    grad_w += dcos * (u[i] / (u_norm[i] * w_norm) - cos[i] * w / (w_norm * w_norm));
    // P(x) = x + A B x:  dA += g (Bx)^T,  dB += A^T g x^T.
    g.a.noalias() += grad_u * be[i].transpose();
    g.b.noalias() += (p.a.transpose() * grad_u) * e[i].transpose();
  }
  g.a.noalias() += grad_w * bt.transpose();
  g.b.noalias() += (p.a.transpose() * grad_w) * t.transpose();
  return loss;
}

void require_coverage(const dataset::Dataset& ds, const EmbeddingSources& sources) {
  std::vector<std::string> missing;
  for (const auto& inst : ds.instances) {
    if (!sources.texts.lookup(inst.prompt_id)) missing.push_back(inst.prompt_id);
    for (const auto& id : inst.image_ids) {
      if (!sources.images.lookup(id)) missing.push_back(id);
    }
  }
  if (!missing.empty()) {
    throw IdListError(ErrorKind::MissingEmbedding, std::move(missing), "no embedding for");
  }
}

double mean_loss(const dataset::Dataset& ds, const EmbeddingSources& sources,
                 const AdapterParams& params) {
  if (ds.instances.empty()) return 0.0;
  double total = 0.0;
  for (const auto& inst : ds.instances) total += forward_loss(inst, sources, params).loss;
  return total / static_cast<double>(ds.instances.size());
}

struct AdamState {
  Matrix m, v;
  explicit AdamState(const Matrix& like)
      : m(Matrix::Zero(like.rows(), like.cols())), v(Matrix::Zero(like.rows(), like.cols())) {}
};

void adamw_step(Matrix& param, const Matrix& grad, AdamState& st, const TrainerConfig& cfg,
                double lr, std::size_t t, double decay) {
  param *= (1.0 - lr * decay);
  st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * grad;
  st.v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  param.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + cfg.epsilon);
}

}  // namespace

AdapterParams AdapterParams::initial(std::size_t dim, std::size_t rank, double logit_scale,
                                     std::uint64_t seed) {
  AdapterParams p;
  p.a = Matrix::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(rank));
  p.b.resize(static_cast<Eigen::Index>(rank), static_cast<Eigen::Index>(dim));
  p.logit_scale = logit_scale;
  Rng rng(seed);
  const double sd = dim ? 1.0 / std::sqrt(static_cast<double>(dim)) : 0.0;
  for (Eigen::Index r = 0; r < p.b.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.b.cols(); ++c) p.b(r, c) = sd * rng.normal();
  }
  p.check();
  return p;
}

void AdapterParams::check() const {
  if (a.rows() == 0 || a.cols() == 0) {
    throw Error(ErrorKind::InvalidArgument, "adapter needs dim >= 1 and rank >= 1");
  }
  if (a.cols() > a.rows()) {
    throw Error(ErrorKind::InvalidArgument, "adapter rank " + std::to_string(a.cols()) +
                                                " exceeds dim " + std::to_string(a.rows()));
  }
  if (b.rows() != a.cols() || b.cols() != a.rows()) {
    throw Error(ErrorKind::InvalidArgument, "adapter factors have mismatched shapes");
  }
  if (!(logit_scale > 0.0) || !std::isfinite(logit_scale)) {
    throw Error(ErrorKind::InvalidArgument, "logit scale must be positive and finite");
  }
  if (!a.allFinite() || !b.allFinite()) {
    throw Error(ErrorKind::NonFiniteValue, "adapter has non-finite parameters");
  }
}

std::string encode_adapter(const AdapterParams& params) {
  params.check();
  detail::ByteWriter w;
  w.bytes(kMagic);
  w.u32(static_cast<std::uint32_t>(params.dim()));
  w.u32(static_cast<std::uint32_t>(params.rank()));
  w.f32(static_cast<float>(params.logit_scale));
  for (Eigen::Index r = 0; r < params.a.rows(); ++r) {
    for (Eigen::Index c = 0; c < params.a.cols(); ++c) w.f32(static_cast<float>(params.a(r, c)));
  }
  for (Eigen::Index r = 0; r < params.b.rows(); ++r) {
    for (Eigen::Index c = 0; c < params.b.cols(); ++c) w.f32(static_cast<float>(params.b(r, c)));
  }
  return w.data();
}

AdapterParams decode_adapter(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(kMagic.size(), "magic") != kMagic) {
    throw Error(ErrorKind::BadMagic, "expected ADP1 header");
  }
  const std::uint32_t dim = r.u32("dim");
  const std::uint32_t rank = r.u32("rank");
  AdapterParams p;
  p.logit_scale = r.f32("logit scale");
  const std::size_t cells = std::size_t{dim} * rank;
  if (cells > r.size()) r.need(r.size() + 1, "adapter factors");
  r.need(8 * cells, "adapter factors");
  p.a.resize(dim, rank);
  p.b.resize(rank, dim);
  for (Eigen::Index i = 0; i < p.a.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.a.cols(); ++j) p.a(i, j) = r.f32("A");
  }
  for (Eigen::Index i = 0; i < p.b.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.b.cols(); ++j) p.b(i, j) = r.f32("B");
  }
  if (!r.at_end()) throw Error(ErrorKind::MalformedInput, "trailing bytes after ADP1 factors");
  p.check();
  return p;
}

AdapterParams load_adapter(const std::filesystem::path& path) {
  return decode_adapter(detail::read_file(path));
}

void save_adapter(const AdapterParams& params, const std::filesystem::path& path) {
  detail::write_file(path, encode_adapter(params));
}

LossResult forward_loss(const PreferenceInstance& instance, const EmbeddingSources& sources,
                        const AdapterParams& params) {
  check_instance(instance);
  const std::size_t dim = params.dim();
  const Vector w = params.project(fetch(sources.texts, instance.prompt_id, dim));
  const double w_norm = checked_norm(w);
  LossResult out;
  out.logits.reserve(instance.image_ids.size());
  for (const auto& id : instance.image_ids) {
    const Vector u = params.project(fetch(sources.images, id, dim));
    const double c = std::clamp(u.dot(w) / (checked_norm(u) * w_norm), -1.0, 1.0);
    out.logits.push_back(params.logit_scale * c);
  }
  out.loss = softmax_nll(out.logits, instance.preferred_index, nullptr);
  return out;
}

Gradient grad(std::span<const PreferenceInstance> batch, const EmbeddingSources& sources,
              const AdapterParams& params) {
  if (batch.empty()) throw Error(ErrorKind::InvalidArgument, "gradient of an empty batch");
  Gradient g;
  g.a = Matrix::Zero(params.a.rows(), params.a.cols());
  g.b = Matrix::Zero(params.b.rows(), params.b.cols());
  const double weight = 1.0 / static_cast<double>(batch.size());
  for (const auto& inst : batch) g.loss += weight * accumulate(inst, sources, params, weight, g);
  return g;
}

double cosine_learning_rate(double base, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * progress));
}

TrainResult train(const dataset::Dataset& train_set, const dataset::Dataset* val_set,
                  const EmbeddingSources& sources, const TrainerConfig& config,
                  std::optional<AdapterParams> start) {
  if (config.batch_size == 0) throw Error(ErrorKind::InvalidArgument, "batch_size must be >= 1");
  if (!(config.learning_rate > 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "learning_rate must be positive");
  }
  if (sources.images.dim() != sources.texts.dim()) {
    throw Error(ErrorKind::DimensionMismatch, "image and text embeddings differ in dim");
  }
  TrainResult result{
      start ? std::move(*start)
            : AdapterParams::initial(sources.images.dim(), config.rank, config.logit_scale,
                                     config.seed),
      {}};
  AdapterParams& params = result.params;
  params.check();
  TrainHistory& history = result.history;
  if (config.epochs == 0) return result;

  require_coverage(train_set, sources);
  if (val_set) require_coverage(*val_set, sources);

  history.initial_train_loss = mean_loss(train_set, sources, params);
  if (val_set && !val_set->instances.empty()) {
    history.initial_val_accuracy = evaluate(params, *val_set, sources);
  }
  if (train_set.instances.empty()) return result;

  const std::size_t n = train_set.instances.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = per_epoch * config.epochs;

  AdamState state_a(params.a), state_b(params.b);
  double m_s = 0.0, v_s = 0.0;
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<PreferenceInstance> batch;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
      const std::size_t end = std::min(n, begin + config.batch_size);
      batch.clear();
      for (std::size_t k = begin; k < end; ++k) batch.push_back(train_set.instances[order[k]]);

      const double lr = cosine_learning_rate(config.learning_rate, step, total_steps);
      const Gradient g = grad(batch, sources, params);
      ++step;
      if (!std::isfinite(g.loss) || !g.a.allFinite() || !g.b.allFinite()) {
        throw Error(ErrorKind::NonFiniteLoss, "non-finite loss at step " + std::to_string(step));
      }
      adamw_step(params.a, g.a, state_a, config, lr, step, config.weight_decay);
      adamw_step(params.b, g.b, state_b, config, lr, step, config.weight_decay);
      if (config.train_logit_scale) {
        m_s = config.beta1 * m_s + (1.0 - config.beta1) * g.logit_scale;
        v_s = config.beta2 * v_s + (1.0 - config.beta2) * g.logit_scale * g.logit_scale;
        const double mh = m_s / (1.0 - std::pow(config.beta1, static_cast<double>(step)));
        const double vh = v_s / (1.0 - std::pow(config.beta2, static_cast<double>(step)));
        params.logit_scale = std::max(1e-6, params.logit_scale - lr * mh / (std::sqrt(vh) + config.epsilon));
      }
      history.steps.push_back({step, lr, g.loss});
      epoch_loss += g.loss * static_cast<double>(end - begin);
    }
    EpochRecord rec{epoch, epoch_loss / static_cast<double>(n), std::nullopt};
    if (val_set && !val_set->instances.empty()) rec.val_accuracy = evaluate(params, *val_set, sources);
    history.epochs.push_back(rec);
  }
  return result;
}

double evaluate(const AdapterParams& params, const dataset::Dataset& dataset,
                const EmbeddingSources& sources) {
  if (dataset.instances.empty()) {
    throw Error(ErrorKind::EmptyDataset, "evaluation over an empty dataset");
  }
  std::size_t hits = 0;
  for (const auto& inst : dataset.instances) {
    const auto res = forward_loss(inst, sources, params);
    if (scoring::choose(res.logits).index == inst.preferred_index) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(dataset.instances.size());
}

emb::EmbeddingMatrix project_store(const AdapterParams& params, const emb::EmbeddingMatrix& store) {
  if (store.dim() != params.dim()) {
    throw Error(ErrorKind::DimensionMismatch, "store dim differs from adapter dim");
  }
  emb::EmbeddingMatrix out(store.dim());
  for (const auto& [id, values] : store.entries()) {
    Vector x(static_cast<Eigen::Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) x[static_cast<Eigen::Index>(i)] = values[i];
    const Vector y = params.project(x);
    out.insert(id, std::span<const double>(y.data(), static_cast<std::size_t>(y.size())));
  }
  return out;
}

void write_history_csv(const TrainHistory& history, std::ostream& out) {
  out << "step,lr,loss\n";
  const auto precision = out.precision(17);
  for (const auto& s : history.steps) {
    out << s.step << ',' << s.learning_rate << ',' << s.train_loss << '\n';
  }
  out.precision(precision);
}

}  // namespace prefalign::adapter
