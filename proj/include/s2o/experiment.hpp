#pragma once

// Experiment orchestration: dataset construction from config, full training
// runs with checkpointing, and the deterministic metrics CSV plus metadata
// JSON that every run directory carries. The CSV holds only seeded
// quantities so reruns from the same config are byte-identical; wall-clock
// times live in the metadata file.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "serialize.hpp"
#include "training.hpp"

namespace s2o {

struct DataConfig {
  std::string kind = "blobs";  // blobs | idx
  // blobs parameters
  std::size_t classes = 4;
  std::size_t dim = 20;
  std::size_t per_class = 500;
  double spread = 0.12;
  std::uint64_t seed = 1;
  // idx parameters
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t train_limit = 0, test_limit = 0;

  void validate() const {
    if (kind != "blobs" && kind != "idx")
      throw ConfigError("data: kind must be 'blobs' or 'idx'");
    if (kind == "idx" && (train_images.empty() || train_labels.empty() ||
                          test_images.empty() || test_labels.empty()))
      throw ConfigError("data: idx kind requires all four image/label paths");
  }

  Dataset load() const {
    validate();
    if (kind == "blobs") return make_blobs(classes, dim, per_class, spread, seed);
    return load_idx_dataset(train_images, train_labels, test_images, test_labels,
                            train_limit, test_limit);
  }
};

struct ExperimentConfig {
  TrainConfig train;
  DataConfig data;
  std::string out_dir = "run";
  int checkpoint_every = 0;  // 0 = final epoch only

  void validate() const {
    train.validate();
    data.validate();
    if (out_dir.empty()) throw ConfigError("experiment: out_dir must not be empty");
    if (checkpoint_every < 0) throw ConfigError("experiment: checkpoint_every must be >= 0");
  }
};

namespace experiment_detail {

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace experiment_detail

inline nlohmann::json attack_config_json(const AttackConfig& a) {
  nlohmann::json j{{"norm", norm_name(a.norm)},
                   {"epsilon", a.epsilon},
                   {"step_size", a.step_size},
                   {"iterations", a.iterations},
                   {"random_start", a.random_start},
                   {"seed", a.seed}};
  if (a.clamp) j["clamp"] = {a.clamp->first, a.clamp->second};
  return j;
}

inline nlohmann::json optimizer_config_json(const OptimizerConfig& o) {
  return {{"lr", o.lr},
          {"momentum", o.momentum},
          {"weight_decay", o.weight_decay},
          {"milestones", o.milestones},
          {"decay", o.decay}};
}

inline nlohmann::json train_config_json(const TrainConfig& t) {
  nlohmann::json j{{"method", method_name(t.method)},
                   {"alpha", t.alpha},
                   {"s2o_mode", s2o_mode_name(t.s2o_mode)},
                   {"attack", attack_config_json(t.attack)},
                   {"optimizer", optimizer_config_json(t.optimizer)},
                   {"hidden", t.hidden},
                   {"activation", activation_name(t.activation)},
                   {"epochs", t.epochs},
                   {"batch_size", t.batch_size},
                   {"seed", t.seed},
                   {"trades_inv_lambda", t.trades_inv_lambda},
                   {"avmixup_gamma", t.avmixup_gamma},
                   {"avmixup_lambda1", t.avmixup_lambda1},
                   {"avmixup_lambda2", t.avmixup_lambda2},
                   {"avmixup_beta_a", t.avmixup_beta_a},
                   {"avmixup_beta_b", t.avmixup_beta_b},
                   {"avmixup_anchored", t.avmixup_anchored},
                   {"awp", t.awp},
                   {"awp_gamma", t.awp_gamma},
                   {"awp_steps", t.awp_steps}};
  if (t.eval_attack) j["eval_attack"] = attack_config_json(*t.eval_attack);
  return j;
}

inline nlohmann::json data_config_json(const DataConfig& d) {
  nlohmann::json j{{"kind", d.kind}};
  if (d.kind == "blobs") {
    j["classes"] = d.classes;
    j["dim"] = d.dim;
    j["per_class"] = d.per_class;
    j["spread"] = d.spread;
    j["seed"] = d.seed;
  } else {
    j["train_images"] = d.train_images;
    j["train_labels"] = d.train_labels;
    j["test_images"] = d.test_images;
    j["test_labels"] = d.test_labels;
    j["train_limit"] = d.train_limit;
    j["test_limit"] = d.test_limit;
  }
  return j;
}

inline nlohmann::json experiment_config_json(const ExperimentConfig& e) {
  return {{"train", train_config_json(e.train)},
          {"data", data_config_json(e.data)},
          {"out_dir", e.out_dir},
          {"checkpoint_every", e.checkpoint_every}};
}

// Stable fingerprint of a config: FNV-1a over the canonical (sorted-key)
// JSON dump. Stored in every metadata file so outputs can be traced back to
// the exact configuration that produced them.
inline std::string config_hash(const nlohmann::json& j) {
  return experiment_detail::hex64(experiment_detail::fnv1a64(j.dump()));
}

// The layout conventions every artifact is written under; recorded next to
// outputs so downstream readers need not guess.
inline nlohmann::json conventions_json() {
  return {{"vec_order", "row-major"},
          {"kron_order", "row_factor_left"},
          {"rng", "xoshiro256**"},
          {"sigma_default", "uniform"},
          {"c1", 1.0},
          {"c2", 1.0}};
}

// One row per epoch; `checkpoint` is the run-relative path of the weights
// saved at that epoch, empty when none was. Doubles at full precision so a
// rerun is comparable byte for byte.
inline std::string metrics_csv(const std::vector<MetricsRecord>& history,
                               const std::map<int, std::string>& checkpoints) {
  std::ostringstream os;
  os << "epoch,lr,train_loss,s2o_penalty,clean_acc,robust_acc,checkpoint\n";
  os << std::setprecision(17);
  for (const MetricsRecord& r : history) {
    auto it = checkpoints.find(r.epoch);
    os << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.penalty << ','
       << r.clean_acc << ',' << r.robust_acc << ','
       << (it == checkpoints.end() ? std::string() : it->second) << '\n';
  }
  return os.str();
}

struct ExperimentResult {
  TrainResult train;
  std::string out_dir;
  std::map<int, std::string> checkpoints;  // epoch -> run-relative path
  std::string final_checkpoint;            // run-relative
  std::string metrics_path;                // absolute-or-as-given paths on disk
  std::string metadata_path;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  const Dataset data = cfg.data.load();

  const fs::path root(cfg.out_dir);
  fs::create_directories(root / "checkpoints");

  const nlohmann::json cfg_json = experiment_config_json(cfg);
  const std::string hash = config_hash(cfg_json);

  ExperimentResult res;
  res.out_dir = cfg.out_dir;

  const auto t0 = std::chrono::steady_clock::now();
  res.train = run_training(cfg.train, data, [&](int epoch, const MlpNetwork& net,
                                                const MetricsRecord&) {
    const bool scheduled =
        cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
    const bool last = epoch == cfg.train.epochs - 1;
    if (!scheduled && !last) return;
    std::ostringstream name;
    name << "checkpoints/epoch_" << std::setw(3) << std::setfill('0') << epoch << ".bin";
    save_checkpoint((root / name.str()).string(), net,
                    {{"config_hash", hash},
                     {"seed", cfg.train.seed},
                     {"epoch", epoch},
                     {"method", method_name(cfg.train.method)},
                     {"s2o_mode", s2o_mode_name(cfg.train.s2o_mode)},
                     {"alpha", cfg.train.alpha}});
    res.checkpoints[epoch] = name.str();
  });
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  // The final weights are always saved, aborted runs included (they carry
  // the last completed epoch's weights).
  res.final_checkpoint = "checkpoints/final.bin";
  save_checkpoint((root / res.final_checkpoint).string(), res.train.net,
                  {{"config_hash", hash},
                   {"seed", cfg.train.seed},
                   {"final", true},
                   {"aborted", res.train.aborted}});

  res.metrics_path = (root / "metrics.csv").string();
  write_text_file(res.metrics_path, metrics_csv(res.train.history, res.checkpoints));

  nlohmann::json meta{{"kind", "train"},
                      {"format_version", kFormatVersion},
                      {"config", cfg_json},
                      {"config_hash", hash},
                      {"seed", cfg.train.seed},
                      {"conventions", conventions_json()},
                      {"wall_time_seconds", wall},
                      {"epochs_completed", res.train.history.size()},
                      {"aborted", res.train.aborted},
                      {"abort_reason", res.train.abort_reason},
                      {"final_checkpoint", res.final_checkpoint},
                      {"metrics", "metrics.csv"}};
  nlohmann::json ck = nlohmann::json::array();
  for (const auto& [epoch, path] : res.checkpoints)
    ck.push_back({{"epoch", epoch}, {"path", path}});
  meta["checkpoints"] = ck;
  res.metadata_path = (root / "metadata.json").string();
  write_text_file(res.metadata_path, meta.dump(2) + "\n");
  return res;
}

// Evaluation of one checkpoint under the standard probes: clean accuracy,
// the one-step attack, the configured multi-step attack, measured budgets,
// and the bitwise cross-check that one projected step with step_size ==
// epsilon reproduces the one-step attack exactly.
inline nlohmann::json attack_eval_report(const MlpNetwork& net, const LabeledBatch& batch,
                                         const AttackConfig& cfg) {
  cfg.validate();
  check_batch(net, batch.x);

  const EvalResult clean = clean_eval(net, batch);

  Tensor fgm_adv = fgm_perturb(net, batch, cfg.epsilon, cfg.norm, cfg.clamp);
  double fgm_correct = 0.0;
  const EvalResult fgm_res = clean_eval(net, LabeledBatch{fgm_adv, batch.y});
  fgm_correct = fgm_res.accuracy;

  const Tensor pgd_adv = pgd_perturb(net, batch, cfg);
  const EvalResult pgd_res = clean_eval(net, LabeledBatch{pgd_adv, batch.y});

  AttackConfig one = cfg;
  one.iterations = 1;
  one.random_start = false;
  one.step_size = cfg.epsilon > 0.0 ? cfg.epsilon : cfg.step_size;
  const Tensor one_adv = pgd_perturb(net, batch, one);
  bool bitwise = one_adv.numel() == fgm_adv.numel();
  if (bitwise)
    for (std::size_t i = 0; i < one_adv.numel(); ++i)
      if (one_adv.data[i] != fgm_adv.data[i]) {
        bitwise = false;
        break;
      }

  return {{"clean", {{"accuracy", clean.accuracy}, {"mean_loss", clean.mean_loss}}},
          {"fgm",
           {{"accuracy", fgm_correct},
            {"mean_loss", fgm_res.mean_loss},
            {"max_perturbation", max_perturbation(batch.x, fgm_adv, cfg.norm)}}},
          {"pgd",
           {{"accuracy", pgd_res.accuracy},
            {"mean_loss", pgd_res.mean_loss},
            {"iterations", cfg.iterations},
            {"max_perturbation", max_perturbation(batch.x, pgd_adv, cfg.norm)}}},
          {"epsilon", cfg.epsilon},
          {"norm", norm_name(cfg.norm)},
          {"one_step_matches_fgm_bitwise", bitwise},
          {"pgd_not_weaker_than_fgm", pgd_res.accuracy <= fgm_correct}};
}

}  // namespace s2o
