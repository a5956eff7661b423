// End-to-end experiment driver: directory layout, metrics CSV, metadata JSON,
// checkpoint schedule, rerun determinism, and the attack evaluation report.
#include <catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "s2o/experiment.hpp"

using namespace s2o;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// A deliberately tiny run: 3-class blobs in 6 dimensions, one hidden layer,
// three epochs, a 3-step training attack. Finishes in well under a second.
ExperimentConfig tiny_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.train.method = Method::at;
  cfg.train.alpha = 0.1;
  cfg.train.s2o_mode = S2oMode::fast;
  cfg.train.hidden = {8};
  cfg.train.activation = Activation::relu;
  cfg.train.epochs = 3;
  cfg.train.batch_size = 16;
  cfg.train.seed = 7;
  cfg.train.optimizer.lr = 0.05;
  cfg.train.attack.epsilon = 0.05;
  cfg.train.attack.step_size = 0.02;
  cfg.train.attack.iterations = 3;
  cfg.data.kind = "blobs";
  cfg.data.classes = 3;
  cfg.data.dim = 6;
  cfg.data.per_class = 20;
  cfg.data.spread = 0.1;
  cfg.data.seed = 11;
  cfg.out_dir = out_dir;
  cfg.checkpoint_every = 2;
  return cfg;
}

}  // namespace

TEST_CASE("metrics_csv formats header, rows, and checkpoint column") {
  std::vector<MetricsRecord> history(2);
  history[0].epoch = 0;
  history[0].lr = 0.1;
  history[0].train_loss = 1.0 / 3.0;
  history[0].penalty = 0.0;
  history[0].clean_acc = 0.5;
  history[0].robust_acc = 0.25;
  history[1].epoch = 1;
  history[1].lr = 0.01;
  history[1].train_loss = 0.125;
  history[1].penalty = 2.0;
  history[1].clean_acc = 1.0;
  history[1].robust_acc = 0.75;
  const std::map<int, std::string> marks{{1, "checkpoints/epoch_001.bin"}};

  const std::string csv = metrics_csv(history, marks);
  std::istringstream is(csv);
  std::string line;
  REQUIRE(std::getline(is, line));
  CHECK(line == "epoch,lr,train_loss,s2o_penalty,clean_acc,robust_acc,checkpoint");
  REQUIRE(std::getline(is, line));
  // 1/3 must survive a text round trip: 17 significant digits.
  CHECK(line == "0,0.10000000000000001,0.33333333333333331,0,0.5,0.25,");
  REQUIRE(std::getline(is, line));
  CHECK(line == "1,0.01,0.125,2,1,0.75,checkpoints/epoch_001.bin");
  CHECK_FALSE(std::getline(is, line));
}

TEST_CASE("config_hash is 16 lowercase hex chars and tracks the config") {
  const ExperimentConfig a = tiny_config("/tmp/s2o_hash_a");
  ExperimentConfig b = a;
  b.train.seed = 8;

  const std::string ha =
      config_hash(experiment_config_json(a));
  const std::string ha2 =
      config_hash(experiment_config_json(a));
  const std::string hb =
      config_hash(experiment_config_json(b));

  CHECK(ha.size() == 16);
  for (char c : ha)
    CHECK(((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f')));
  CHECK(ha == ha2);   // stable across calls
  CHECK(ha != hb);    // sensitive to a one-field change
}

TEST_CASE("run_experiment lays out checkpoints, metrics, and metadata") {
  const std::string dir = "/tmp/s2o_exp_layout";
  fs::remove_all(dir);
  const ExperimentConfig cfg = tiny_config(dir);

  const ExperimentResult res = run_experiment(cfg);

  CHECK_FALSE(res.train.aborted);
  REQUIRE(res.train.history.size() == 3);

  // checkpoint_every = 2 over 3 epochs: epoch 1 is scheduled, epoch 2 is last.
  REQUIRE(res.checkpoints.size() == 2);
  CHECK(res.checkpoints.at(1) == "checkpoints/epoch_001.bin");
  CHECK(res.checkpoints.at(2) == "checkpoints/epoch_002.bin");
  CHECK(res.final_checkpoint == "checkpoints/final.bin");
  for (const auto& [epoch, rel] : res.checkpoints) {
    (void)epoch;
    CHECK(fs::exists(fs::path(dir) / rel));
    CHECK(fs::exists(fs::path(dir) / (rel + ".json")));
  }
  CHECK(fs::exists(fs::path(dir) / "checkpoints/final.bin"));
  CHECK(fs::exists(res.metrics_path));
  CHECK(fs::exists(res.metadata_path));

  SECTION("metrics.csv carries one row per epoch and marks checkpoints") {
    const std::string csv = read_file(res.metrics_path);
    std::istringstream is(csv);
    std::string line;
    REQUIRE(std::getline(is, line));
    CHECK(line == "epoch,lr,train_loss,s2o_penalty,clean_acc,robust_acc,checkpoint");
    std::vector<std::string> rows;
    while (std::getline(is, line)) rows.push_back(line);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].substr(0, 2) == "0,");
    CHECK(rows[0].back() == ',');  // epoch 0 not checkpointed
    CHECK(rows[1].rfind("checkpoints/epoch_001.bin") != std::string::npos);
    CHECK(rows[2].rfind("checkpoints/epoch_002.bin") != std::string::npos);
  }

  SECTION("metadata.json records config, hash, conventions, and outcome") {
    const nlohmann::json meta = nlohmann::json::parse(read_file(res.metadata_path));
    CHECK(meta.at("kind") == "train");
    CHECK(meta.at("format_version").get<int>() >= 1);
    CHECK(meta.at("seed").get<std::uint64_t>() == 7);
    CHECK(meta.at("aborted").get<bool>() == false);
    CHECK(meta.at("abort_reason").get<std::string>().empty());
    CHECK(meta.at("epochs_completed").get<int>() == 3);
    CHECK(meta.at("final_checkpoint") == "checkpoints/final.bin");
    CHECK(meta.at("metrics") == "metrics.csv");
    CHECK(meta.at("wall_time_seconds").get<double>() >= 0.0);

    const std::string hash = meta.at("config_hash").get<std::string>();
    CHECK(hash ==
          config_hash(experiment_config_json(cfg)));

    const nlohmann::json& conv = meta.at("conventions");
    CHECK(conv.at("vec_order") == "row-major");
    CHECK(conv.at("kron_order") == "row_factor_left");
    CHECK(conv.at("c1").get<double>() == 1.0);
    CHECK(conv.at("c2").get<double>() == 1.0);

    const nlohmann::json& cfg_echo = meta.at("config");
    CHECK(cfg_echo.at("train").at("method") == "at");
    CHECK(cfg_echo.at("data").at("kind") == "blobs");

    const nlohmann::json& cks = meta.at("checkpoints");
    REQUIRE(cks.is_array());
    REQUIRE(cks.size() == 2);
    CHECK(cks[0].at("epoch").get<int>() == 1);
    CHECK(cks[0].at("path") == "checkpoints/epoch_001.bin");
    CHECK(cks[1].at("epoch").get<int>() == 2);
  }

  SECTION("checkpoint sidecar carries the run hash and final flag") {
    const nlohmann::json side = nlohmann::json::parse(
        read_file((fs::path(dir) / "checkpoints/final.bin.json").string()));
    CHECK(side.at("format") == "weight-checkpoint");
    CHECK(side.at("final").get<bool>() == true);
    CHECK(side.at("aborted").get<bool>() == false);
    CHECK(side.at("config_hash") ==
          config_hash(experiment_config_json(cfg)));

    const nlohmann::json epoch_side = nlohmann::json::parse(
        read_file((fs::path(dir) / "checkpoints/epoch_001.bin.json").string()));
    CHECK(epoch_side.at("epoch").get<int>() == 1);
    CHECK(epoch_side.at("method") == "at");
    CHECK(epoch_side.at("s2o_mode") == "fast");
  }

  fs::remove_all(dir);
}

TEST_CASE("checkpoint_every=0 keeps only the final epoch checkpoint") {
  const std::string dir = "/tmp/s2o_exp_final_only";
  fs::remove_all(dir);
  ExperimentConfig cfg = tiny_config(dir);
  cfg.checkpoint_every = 0;
  cfg.train.epochs = 2;

  const ExperimentResult res = run_experiment(cfg);
  REQUIRE(res.checkpoints.size() == 1);
  CHECK(res.checkpoints.at(1) == "checkpoints/epoch_001.bin");
  CHECK(fs::exists(fs::path(dir) / "checkpoints/final.bin"));
  fs::remove_all(dir);
}

TEST_CASE("rerunning the same config reproduces metrics and weights bitwise") {
  const std::string dir_a = "/tmp/s2o_exp_rerun_a";
  const std::string dir_b = "/tmp/s2o_exp_rerun_b";
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);

  ExperimentConfig cfg_a = tiny_config(dir_a);
  ExperimentConfig cfg_b = tiny_config(dir_b);

  const ExperimentResult ra = run_experiment(cfg_a);
  const ExperimentResult rb = run_experiment(cfg_b);

  // The CSV is a pure function of the trajectory, so byte equality here is
  // exactly trajectory equality.
  CHECK(read_file(ra.metrics_path) == read_file(rb.metrics_path));

  const MlpNetwork na = load_checkpoint((fs::path(dir_a) / ra.final_checkpoint).string());
  const MlpNetwork nb = load_checkpoint((fs::path(dir_b) / rb.final_checkpoint).string());
  REQUIRE(na.weights.size() == nb.weights.size());
  for (std::size_t l = 0; l < na.weights.size(); ++l)
    CHECK(max_abs_diff(na.weights[l], nb.weights[l]) == 0.0);

  // out_dir feeds the hash, so the two runs disagree there by construction;
  // everything else in the config matches.
  const nlohmann::json ma = nlohmann::json::parse(read_file(ra.metadata_path));
  const nlohmann::json mb = nlohmann::json::parse(read_file(rb.metadata_path));
  CHECK(ma.at("config").at("train") == mb.at("config").at("train"));
  CHECK(ma.at("config").at("data") == mb.at("config").at("data"));

  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("attack_eval_report covers clean, one-step, and multi-step probes") {
  const Dataset data = make_blobs(3, 6, 20, 0.1, 11);
  MlpNetwork net = init_network({6, 8, 3}, Activation::relu, 21);

  AttackConfig cfg;
  cfg.epsilon = 0.05;
  cfg.step_size = 0.02;
  cfg.iterations = 5;
  cfg.random_start = true;
  cfg.seed = 3;

  const nlohmann::json rep = attack_eval_report(net, data.test, cfg);

  for (const char* key : {"clean", "fgm", "pgd", "epsilon", "norm",
                          "one_step_matches_fgm_bitwise", "pgd_not_weaker_than_fgm"})
    CHECK(rep.contains(key));
  CHECK(rep.at("epsilon").get<double>() == 0.05);
  CHECK(rep.at("norm") == "linf");
  CHECK(rep.at("pgd").at("iterations").get<int>() == 5);

  for (const char* section : {"clean", "fgm", "pgd"}) {
    const double acc = rep.at(section).at("accuracy").get<double>();
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    CHECK(std::isfinite(rep.at(section).at("mean_loss").get<double>()));
  }
  // Budgets are measured, never merely assumed.
  CHECK(rep.at("fgm").at("max_perturbation").get<double>() <= cfg.epsilon);
  CHECK(rep.at("pgd").at("max_perturbation").get<double>() <= cfg.epsilon);

  // One full-budget projected step without random start must be the one-step
  // attack, bit for bit; the report performs that cross-check itself.
  CHECK(rep.at("one_step_matches_fgm_bitwise").get<bool>());
  CHECK(rep.at("pgd_not_weaker_than_fgm").is_boolean());
}

TEST_CASE("data and experiment configs validate their inputs") {
  DataConfig bad_kind;
  bad_kind.kind = "parquet";
  CHECK_THROWS_AS(bad_kind.validate(), ConfigError);

  DataConfig idx_missing;
  idx_missing.kind = "idx";
  idx_missing.train_images = "/tmp/only_one_path.idx";
  CHECK_THROWS_AS(idx_missing.validate(), ConfigError);

  DataConfig blobs;
  const Dataset data = blobs.load();  // defaults: 4 classes, dim 20, 500/class
  CHECK(data.train.x.rows() == 4 * 400);
  CHECK(data.train.x.cols() == 20);
  CHECK(data.num_classes == 4);

  ExperimentConfig no_dir = tiny_config("");
  CHECK_THROWS_AS(no_dir.validate(), ConfigError);

  ExperimentConfig neg_every = tiny_config("/tmp/s2o_exp_neg");
  neg_every.checkpoint_every = -1;
  CHECK_THROWS_AS(neg_every.validate(), ConfigError);
}
