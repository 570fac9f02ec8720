#include "prefalign/cli.hpp"

#include <csignal>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "prefalign/adapter_trainer.hpp"
#include "prefalign/chat_ingest.hpp"
#include "prefalign/curation.hpp"
#include "prefalign/dataset.hpp"
#include "prefalign/embedding_store.hpp"
#include "prefalign/error.hpp"
#include "prefalign/gen_metrics.hpp"
#include "prefalign/scoring.hpp"
#include "prefalign/study_service.hpp"
#include "binary_io.hpp"

namespace prefalign::cli {
namespace {

using nlohmann::json;

// Metric values are reported with 6 significant digits.
double sig6(double v) {
  if (!std::isfinite(v)) return v;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return std::strtod(buf, nullptr);
}

void emit(const std::string& path, std::ostream& fallback,
          const std::function<void(std::ostream&)>& fn) {
  if (path.empty() || path == "-") {
    fn(fallback);
    return;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + path);
  fn(f);
  if (!f) throw Error(ErrorKind::IoError, "write failed for " + path);
}

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path);
  return in;
}

json mean_std_json(double mean, double std) { return {{"mean", sig6(mean)}, {"std", sig6(std)}}; }

json stats_json(const dataset::DatasetStats& s) {
  json by_n = json::object();
  for (const auto& [n, c] : s.counts_by_n) by_n[std::to_string(n)] = c;
  json j = {{"total_prompts", s.total_prompts},
            {"total_images", s.total_images},
            {"counts_by_n", by_n},
            {"distinct_users", s.distinct_users},
            {"max_choices_per_user", s.max_choices_per_user},
            {"random_guess_accuracy", nullptr}};
  if (s.total_prompts) j["random_guess_accuracy"] = sig6(dataset::random_guess_accuracy(s));
  return j;
}

json partition_json(const metrics::PartitionMetrics& m) {
  json j = {{"images", m.images}, {"is", nullptr}, {"fid", nullptr}};
  if (m.inception) j["is"] = mean_std_json(m.inception->mean, m.inception->std);
  if (m.fid) j["fid"] = sig6(*m.fid);
  return j;
}

volatile std::sig_atomic_t g_stop_requested = 0;
study::StudyServer* g_server = nullptr;

extern "C" void handle_stop_signal(int) {
  g_stop_requested = 1;
  if (g_server) g_server->stop();
}

struct Options {
  std::string input, dataset, out, key;
  std::string emb_images, emb_texts, weights, adapter;
  std::string scores, choices, metric = "hps", model, rater;
  std::string a, b, probs, features, reference;
  std::string train_out, val_out, history, regularization;
  std::string identifier = std::string(curation::kDefaultIdentifier);
  std::string data_dir, image_dir, host = "0.0.0.0";
  double alpha = curation::kDefaultAlpha;
  std::size_t splits = metrics::kDefaultSplits;
  std::size_t val_size = 0;
  std::uint64_t seed = 0;
  bool stratify = false;
  bool no_sync = false;
  int port = -1;
  adapter::TrainerConfig train;
};

struct ScoredRow {
  std::string prompt_id;
  std::size_t index;
  double hps;
  std::optional<double> clip;
  std::optional<double> aesthetic;
};

int cmd_ingest(const Options& o, std::ostream& out, std::ostream& err) {
  auto in = open_input(o.input);
  std::stringstream raw;
  raw << in.rdbuf();
  const auto log = ingest::parse_export(raw.str());
  const auto extracted = ingest::extract_sessions(log);
  const auto anonymizer = o.key.empty() ? ingest::Anonymizer::random()
                                        : ingest::Anonymizer::from_passphrase(o.key);
  if (o.key.empty()) err << "anonymization key (random): " << anonymizer.key_hex() << '\n';
  dataset::Dataset ds{ingest::sessions_to_instances(extracted.sessions, anonymizer)};

  const auto& d = extracted.diagnostics;
  const json diag = {{"messages", log.size()},
                     {"sessions", d.sessions},
                     {"unmatched_messages", d.unmatched_messages},
                     {"dropped_user_upload", d.dropped_user_upload},
                     {"dropped_nsfw", d.dropped_nsfw},
                     {"dropped_ambiguous", d.dropped_ambiguous},
                     {"dropped_no_match", d.dropped_no_match},
                     {"dropped_author_mismatch", d.dropped_author_mismatch},
                     {"dropped_repeat_choice", d.dropped_repeat_choice}};
  emit(o.out, out, [&](std::ostream& s) { dataset::write_jsonl(ds, s); });
  (o.out.empty() || o.out == "-" ? err : out) << diag.dump() << '\n';
  return kExitOk;
}

int cmd_validate(const Options& o, std::ostream& out, std::ostream&) {
  const auto ds = dataset::load_jsonl(o.dataset);
  const auto report = dataset::validate(ds);
  json v = json::array();
  for (const auto& x : report) {
    v.push_back({{"index", x.index}, {"kind", x.kind}, {"detail", x.detail}});
  }
  out << json{{"instances", ds.size()}, {"valid", report.empty()}, {"violations", v}}.dump()
      << '\n';
  return report.empty() ? kExitOk : kExitDataError;
}

int cmd_stats(const Options& o, std::ostream& out, std::ostream& err) {
  const auto ds = dataset::load_jsonl(o.dataset);
  if (const auto report = dataset::validate(ds); !report.empty()) {
    err << report.size() << " validation violations; run `validate`\n";
    return kExitDataError;
  }
  out << stats_json(dataset::stats(ds)).dump() << '\n';
  return kExitOk;
}

int cmd_split(const Options& o, std::ostream& out, std::ostream&) {
  const auto ds = dataset::load_jsonl(o.dataset);
  const auto parts = dataset::split(ds, o.seed, o.val_size, o.stratify);
  if (!o.train_out.empty()) dataset::save_jsonl(parts.train, o.train_out);
  if (!o.val_out.empty()) dataset::save_jsonl(parts.val, o.val_out);
  out << json{{"train", parts.train.size()}, {"val", parts.val.size()}, {"seed", o.seed}}.dump()
      << '\n';
  return kExitOk;
}

std::vector<ScoredRow> score_rows(const Options& o, const dataset::Dataset& ds,
                                  std::vector<std::string>* image_ids) {
  const auto images = emb::load_emb(o.emb_images);
  const auto texts = emb::load_emb(o.emb_texts);
  std::optional<scoring::MlpWeights> mlp;
  if (!o.weights.empty()) mlp = scoring::load_mlp(o.weights);
  std::optional<emb::EmbeddingMatrix> tuned_images, tuned_texts;
  if (!o.adapter.empty()) {
    const auto params = adapter::load_adapter(o.adapter);
    tuned_images = adapter::project_store(params, images);
    tuned_texts = adapter::project_store(params, texts);
  }
  const emb::EmbeddingProvider& hps_images = tuned_images ? *tuned_images : images;
  const emb::EmbeddingProvider& hps_texts = tuned_texts ? *tuned_texts : texts;

  std::vector<std::string> missing;
  for (const auto& inst : ds.instances) {
    if (!texts.lookup(inst.prompt_id)) missing.push_back(inst.prompt_id);
    for (const auto& id : inst.image_ids) {
      if (!images.lookup(id)) missing.push_back(id);
    }
  }
  if (!missing.empty()) {
    throw IdListError(ErrorKind::MissingEmbedding, std::move(missing), "no embedding for");
  }

  std::vector<ScoredRow> rows;
  for (const auto& inst : ds.instances) {
    const auto t = *texts.lookup(inst.prompt_id);
    const auto th = *hps_texts.lookup(inst.prompt_id);
    for (std::size_t k = 0; k < inst.image_ids.size(); ++k) {
      const auto& id = inst.image_ids[k];
      const auto e = *images.lookup(id);
      ScoredRow r{inst.prompt_id, k, scoring::hps(*hps_images.lookup(id), th),
                  scoring::clip_score(e, t), std::nullopt};
      if (mlp) r.aesthetic = scoring::aesthetic_score(e, *mlp);
      rows.push_back(r);
      if (image_ids) image_ids->push_back(id);
    }
  }
  return rows;
}

int cmd_score(const Options& o, std::ostream& out, std::ostream&) {
  const auto ds = dataset::load_jsonl(o.dataset);
  std::vector<std::string> ids;
  const auto rows = score_rows(o, ds, &ids);
  std::unordered_map<std::string, const PreferenceInstance*> by_prompt;
  for (const auto& inst : ds.instances) by_prompt[inst.prompt_id] = &inst;
  emit(o.out, out, [&](std::ostream& s) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      json j = {{"prompt_id", r.prompt_id},
                {"prompt", by_prompt.at(r.prompt_id)->prompt},
                {"image_id", ids[i]},
                {"index", r.index},
                {"hps", sig6(r.hps)},
                {"clip_score", sig6(*r.clip)}};
      if (r.aesthetic) j["aesthetic"] = sig6(*r.aesthetic);
      s << j.dump() << '\n';
    }
  });
  return kExitOk;
}

// Model choices from a scored JSONL file: argmax of `metric` per prompt.
scoring::ChoiceVector choices_from_scores(const std::string& path, const std::string& metric,
                                          const dataset::Dataset& ds, std::size_t& ties) {
  auto in = open_input(path);
  std::map<std::string, std::map<std::size_t, double>> groups;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = json::parse(line);
    if (!j.contains(metric)) {
      throw Error(ErrorKind::MalformedInput, "scored row lacks metric '" + metric + "'");
    }
    groups[j.at("prompt_id").get<std::string>()][j.at("index").get<std::size_t>()] =
        j.at(metric).get<double>();
  }
  scoring::ChoiceVector cv{metric, {}};
  for (const auto& inst : ds.instances) {
    const auto it = groups.find(inst.prompt_id);
    if (it == groups.end()) continue;
    scoring::ScoredGroup g{inst.prompt_id, inst.prompt_id, {}};
    for (std::size_t k = 0; k < inst.image_ids.size(); ++k) {
      const auto s = it->second.find(k);
      if (s == it->second.end()) {
        throw Error(ErrorKind::MalformedInput,
                    "prompt '" + inst.prompt_id + "' lacks a score for index " + std::to_string(k));
      }
      g.image_scores.emplace_back(inst.image_ids[k], s->second);
    }
    const auto c = scoring::choose(g);
    ties += c.tie ? 1 : 0;
    cv.choices[inst.prompt_id] = c.index;
  }
  return cv;
}

int cmd_eval_accuracy(const Options& o, std::ostream& out, std::ostream&) {
  const auto ds = dataset::load_jsonl(o.dataset);
  std::size_t ties = 0;
  scoring::ChoiceVector predicted;
  if (!o.choices.empty()) {
    const auto raters = scoring::load_choice_vectors(o.choices);
    const auto it = std::find_if(raters.begin(), raters.end(), [&](const auto& r) {
      return o.rater.empty() || r.rater_id == o.rater;
    });
    if (it == raters.end()) throw Error(ErrorKind::InvalidArgument, "no rater '" + o.rater + "'");
    predicted = *it;
  } else if (!o.scores.empty()) {
    predicted = choices_from_scores(o.scores, o.metric, ds, ties);
  } else if (!o.emb_images.empty() && !o.emb_texts.empty()) {
    const auto rows = score_rows(o, ds, nullptr);
    std::size_t r = 0;
    predicted.rater_id = o.metric;
    for (const auto& inst : ds.instances) {
      std::vector<double> s;
      for (std::size_t k = 0; k < inst.image_ids.size(); ++k, ++r) {
        const auto& row = rows[r];
        if (o.metric == "hps") s.push_back(row.hps);
        else if (o.metric == "clip_score") s.push_back(*row.clip);
        else if (o.metric == "aesthetic" && row.aesthetic) s.push_back(*row.aesthetic);
        else throw Error(ErrorKind::InvalidArgument, "metric '" + o.metric + "' unavailable");
      }
      const auto c = scoring::choose(s);
      ties += c.tie ? 1 : 0;
      predicted.choices[inst.prompt_id] = c.index;
    }
  } else {
    throw Error(ErrorKind::InvalidArgument,
                "eval-accuracy needs --choices, --scores, or --emb-images with --emb-texts");
  }
  const double acc = scoring::preference_accuracy(predicted, ds);
  out << json{{"rater_id", predicted.rater_id},
              {"instances", ds.size()},
              {"accuracy", sig6(acc)},
              {"random_guess_accuracy", sig6(dataset::random_guess_accuracy(dataset::stats(ds)))},
              {"ties", ties}}
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_agreement(const Options& o, std::ostream& out, std::ostream&) {
  auto raters = scoring::load_choice_vectors(o.choices);
  json j = {{"raters", raters.size()}, {"model_vs_human", nullptr}, {"human_vs_human", nullptr}};
  if (!o.model.empty()) {
    const auto it = std::find_if(raters.begin(), raters.end(),
                                 [&](const auto& r) { return r.rater_id == o.model; });
    if (it == raters.end()) throw Error(ErrorKind::InvalidArgument, "no rater '" + o.model + "'");
    const auto model = *it;
    raters.erase(it);
    const auto ms = scoring::panel_agreement(model, raters);
    j["model_rater_id"] = model.rater_id;
    j["model_vs_human"] = mean_std_json(ms.mean, ms.std);
  }
  if (raters.size() >= 2) {
    const auto hh = scoring::human_agreement(raters);
    j["human_vs_human"] = mean_std_json(hh.mean, hh.std);
  }
  out << j.dump() << '\n';
  return kExitOk;
}

int cmd_is(const Options& o, std::ostream& out, std::ostream&) {
  const auto probs = metrics::to_matrix(emb::load_emb(o.probs));
  const auto r = metrics::inception_score(probs, o.splits, o.seed);
  out << json{{"images", probs.rows()}, {"splits", o.splits}, {"seed", o.seed},
              {"mean", sig6(r.mean)}, {"std", sig6(r.std)}}.dump()
      << '\n';
  return kExitOk;
}

int cmd_fid(const Options& o, std::ostream& out, std::ostream&) {
  const auto a = metrics::to_matrix(emb::load_emb(o.a));
  const auto b = metrics::to_matrix(emb::load_emb(o.b));
  out << json{{"fid", sig6(metrics::fid(a, b))}, {"rows_a", a.rows()}, {"rows_b", b.rows()}}.dump()
      << '\n';
  return kExitOk;
}

int cmd_split_metrics(const Options& o, std::ostream& out, std::ostream& err) {
  const auto ds = dataset::load_jsonl(o.dataset);
  const auto probs = emb::load_emb(o.probs);
  std::optional<emb::EmbeddingMatrix> features;
  std::optional<metrics::Matrix> reference;
  if (!o.features.empty()) features = emb::load_emb(o.features);
  if (!o.reference.empty()) reference = metrics::to_matrix(emb::load_emb(o.reference));
  const auto report = metrics::split_metric_report(ds, probs, features ? &*features : nullptr,
                                                   reference ? &*reference : nullptr, o.splits,
                                                   o.seed);
  for (const auto& w : report.warnings) err << "warning: " << w << '\n';
  out << json{{"preferred", partition_json(report.preferred)},
              {"non_preferred", partition_json(report.non_preferred)},
              {"warnings", report.warnings}}
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_train_adapter(const Options& o, std::ostream& out, std::ostream& err) {
  const auto ds = dataset::load_jsonl(o.dataset);
  const auto images = emb::load_emb(o.emb_images);
  const auto texts = emb::load_emb(o.emb_texts);
  adapter::TrainerConfig cfg = o.train;
  cfg.seed = o.seed;
  const auto parts = dataset::split(ds, o.seed, o.val_size);
  const adapter::EmbeddingSources sources{images, texts};
  const auto result = adapter::train(parts.train, parts.val.size() ? &parts.val : nullptr,
                                     sources, cfg);
  if (!o.out.empty()) adapter::save_adapter(result.params, o.out);
  if (!o.history.empty()) {
    emit(o.history, out, [&](std::ostream& s) { adapter::write_history_csv(result.history, s); });
  }
  json epochs = json::array();
  for (const auto& e : result.history.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"mean_train_loss", sig6(e.mean_train_loss)},
                      {"val_accuracy", e.val_accuracy ? json(sig6(*e.val_accuracy)) : json(nullptr)}});
  }
  const auto& h = result.history;
  out << json{{"train", parts.train.size()},
              {"val", parts.val.size()},
              {"steps", h.steps.size()},
              {"initial_train_loss", sig6(h.initial_train_loss)},
              {"initial_val_accuracy",
               h.initial_val_accuracy ? json(sig6(*h.initial_val_accuracy)) : json(nullptr)},
              {"epochs", epochs}}
             .dump()
      << '\n';
  if (o.out.empty()) err << "note: --out not given; adapter parameters discarded\n";
  return kExitOk;
}

int cmd_curate(const Options& o, std::ostream& out, std::ostream& err) {
  auto in = open_input(o.scores);
  const auto items = curation::read_scored_items(in);
  const auto grouped = curation::group_by_prompt(items);
  std::vector<curation::RegularizationItem> reg;
  if (!o.regularization.empty()) {
    auto rin = open_input(o.regularization);
    reg = curation::read_regularization(rin);
  }
  const curation::CurationConfig cfg{o.alpha, o.identifier};
  auto manifest = curation::build_manifest(grouped.groups, cfg, reg);
  if (grouped.duplicates_dropped) {
    manifest.summary.warnings.push_back(std::to_string(grouped.duplicates_dropped) +
                                        " duplicate (prompt, image_id) rows dropped");
  }
  emit(o.out, out, [&](std::ostream& s) { curation::write_manifest(manifest, s); });
  (o.out.empty() || o.out == "-" ? err : out) << curation::summary_json(manifest.summary) << '\n';
  return kExitOk;
}

int cmd_serve(const Options& o, std::ostream& out, std::ostream& err) {
  auto cfg = study::ServiceConfig::from_env();
  if (o.port >= 0) cfg.port = o.port;
  if (!o.data_dir.empty()) cfg.data_dir = o.data_dir;
  if (!o.image_dir.empty()) cfg.image_dir = o.image_dir;

  study::StudyStore store(cfg.data_dir, !o.no_sync);
  study::StudyServer server(store, cfg.image_dir);
  const int port = server.bind(o.host, cfg.port);
  if (port < 0) {
    err << "cannot bind " << o.host << ':' << cfg.port << '\n';
    return kExitDataError;
  }
  out << json{{"listening", true}, {"host", o.host}, {"port", port},
              {"data_dir", cfg.data_dir.string()}}.dump()
      << std::endl;
  g_server = &server;
  std::signal(SIGINT, handle_stop_signal);
  std::signal(SIGTERM, handle_stop_signal);
  server.listen();
  g_server = nullptr;
  return kExitOk;
}

int exit_code_for(ErrorKind kind) {
  return kind == ErrorKind::InvalidArgument ? kExitUsage : kExitDataError;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"prefalign: human-preference dataset, metric and curation toolkit", "prefalign"};
  app.require_subcommand(1, 1);
  app.allow_extras(false);
  Options o;
  std::function<int(const Options&, std::ostream&, std::ostream&)> handler;

  auto sub = [&](const char* name, const char* desc, auto fn) {
    auto* s = app.add_subcommand(name, desc);
    s->callback([&handler, fn] { handler = fn; });
    return s;
  };
  auto dataset_opt = [&](CLI::App* s) {
    s->add_option("--dataset", o.dataset, "Dataset JSONL")->required();
  };
  auto seed_opt = [&](CLI::App* s) { s->add_option("--seed", o.seed, "Random seed"); };

  auto* ingest = sub("ingest", "Chat export -> dataset JSONL", cmd_ingest);
  ingest->add_option("--input", o.input, "Chat export JSON")->required();
  ingest->add_option("--out", o.out, "Dataset JSONL output (default stdout)");
  ingest->add_option("--key", o.key, "Anonymization passphrase (random if omitted)");

  dataset_opt(sub("validate", "Check dataset invariants", cmd_validate));
  dataset_opt(sub("stats", "Dataset composition statistics", cmd_stats));

  auto* split = sub("split", "Seeded train/validation split by prompt", cmd_split);
  dataset_opt(split);
  seed_opt(split);
  split->add_option("--val-size", o.val_size, "Validation prompts")->required();
  split->add_flag("--stratify", o.stratify, "Preserve the per-n composition");
  split->add_option("--train-out", o.train_out, "Train JSONL");
  split->add_option("--val-out", o.val_out, "Validation JSONL");

  auto emb_opts = [&](CLI::App* s, bool required) {
    auto* i = s->add_option("--emb-images", o.emb_images, "Image embeddings (EMB1)");
    auto* t = s->add_option("--emb-texts", o.emb_texts, "Prompt embeddings keyed by prompt_id (EMB1)");
    if (required) {
      i->required();
      t->required();
    }
    s->add_option("--weights", o.weights, "Aesthetic MLP weights (MLP1)");
    s->add_option("--adapter", o.adapter, "Preference adapter applied before HPS (ADP1)");
  };

  auto* score = sub("score", "HPS / CLIP / aesthetic scores per image", cmd_score);
  dataset_opt(score);
  emb_opts(score, true);
  score->add_option("--out", o.out, "Scored JSONL output (default stdout)");

  auto* eval = sub("eval-accuracy", "Preference prediction accuracy", cmd_eval_accuracy);
  dataset_opt(eval);
  emb_opts(eval, false);
  eval->add_option("--scores", o.scores, "Scored JSONL from `score`");
  eval->add_option("--metric", o.metric, "hps | clip_score | aesthetic");
  eval->add_option("--choices", o.choices, "Choice JSONL {rater_id, key, choice}");
  eval->add_option("--rater", o.rater, "Rater to evaluate from --choices");

  auto* agree = sub("agreement", "Rater agreement statistics", cmd_agreement);
  agree->add_option("--choices", o.choices, "Choice JSONL {rater_id, key, choice}")->required();
  agree->add_option("--model", o.model, "Rater id treated as the model");

  auto* is = sub("is", "Inception Score from class probabilities", cmd_is);
  is->add_option("--probs", o.probs, "Class probabilities (EMB1)")->required();
  is->add_option("--splits", o.splits, "Number of splits");
  seed_opt(is);

  auto* fid = sub("fid", "Frechet distance between two feature sets", cmd_fid);
  fid->add_option("--a", o.a, "Features A (EMB1)")->required();
  fid->add_option("--b", o.b, "Features B (EMB1)")->required();

  auto* sm = sub("split-metrics", "IS/FID for preferred vs non-preferred images", cmd_split_metrics);
  dataset_opt(sm);
  sm->add_option("--probs", o.probs, "Class probabilities keyed by image id (EMB1)")->required();
  sm->add_option("--features", o.features, "Features keyed by image id (EMB1)");
  sm->add_option("--reference", o.reference, "Reference features (EMB1)");
  sm->add_option("--splits", o.splits, "Number of IS splits");
  seed_opt(sm);

  auto* tr = sub("train-adapter", "Train the low-rank preference adapter", cmd_train_adapter);
  dataset_opt(tr);
  emb_opts(tr, true);
  seed_opt(tr);
  tr->add_option("--val-size", o.val_size, "Validation prompts held out");
  tr->add_option("--epochs", o.train.epochs, "Epochs");
  tr->add_option("--lr", o.train.learning_rate, "Peak learning rate");
  tr->add_option("--batch-size", o.train.batch_size, "Batch size");
  tr->add_option("--weight-decay", o.train.weight_decay, "Decoupled weight decay");
  tr->add_option("--rank", o.train.rank, "Adapter rank");
  tr->add_option("--logit-scale", o.train.logit_scale, "Fixed logit scale");
  tr->add_option("--out", o.out, "Adapter output (ADP1)");
  tr->add_option("--history", o.history, "Per-step CSV (step,lr,loss)");

  auto* cur = sub("curate", "Build a preference-labeled training manifest", cmd_curate);
  cur->add_option("--scores", o.scores, "Scored JSONL {prompt, image_id, hps}")->required();
  cur->add_option("--alpha", o.alpha, "Selectivity alpha");
  cur->add_option("--identifier", o.identifier, "Prefix for non-preferred captions");
  cur->add_option("--regularization", o.regularization, "Regularization JSONL {image_id, caption}");
  cur->add_option("--out", o.out, "Manifest JSONL output (default stdout)");

  auto* serve = sub("serve", "Run the pairwise user-study HTTP service", cmd_serve);
  serve->add_option("--host", o.host, "Bind address");
  serve->add_option("--port", o.port, "Port (overrides PREFALIGN_PORT)");
  serve->add_option("--data-dir", o.data_dir, "Record log directory");
  serve->add_option("--image-dir", o.image_dir, "Image directory");
  serve->add_flag("--no-sync", o.no_sync, "Skip fdatasync after each append");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    return handler(o, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed input: " << e.what() << '\n';
    return kExitDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitDataError;
  }
}

}  // namespace prefalign::cli
