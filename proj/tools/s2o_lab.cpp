// s2o_lab: adversarial-training laboratory driver.
//
// Subcommands: train | attack-eval | estimate | bound | simulate | gradcheck.
// Every subcommand accepts --seed, --out, and --config (a key=value file whose
// keys are the subcommand's long option names without the leading dashes).
// Outputs land in --out together with a metadata.json naming the resolved
// config, its hash, the seed, and the layout conventions. Failures print a
// one-line JSON error object to stderr and exit nonzero.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "s2o/bounds.hpp"
#include "s2o/experiment.hpp"
#include "s2o/gradcheck.hpp"
#include "s2o/serialize.hpp"
#include "s2o/simulation.hpp"

namespace {

using namespace s2o;
namespace fs = std::filesystem;

struct AttackOpts {
  std::string norm = "linf";
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int iterations = 10;
  bool random_start = true;
};

void add_attack_options(CLI::App* cmd, AttackOpts& a, const std::string& prefix,
                        const std::string& what) {
  cmd->add_option("--" + prefix + "norm", a.norm, what + " norm: linf | l2")
      ->check(CLI::IsMember({"linf", "l2"}))
      ->capture_default_str();
  cmd->add_option("--" + prefix + "epsilon", a.epsilon, what + " budget")
      ->capture_default_str();
  cmd->add_option("--" + prefix + "step", a.step_size, what + " step size")
      ->capture_default_str();
  cmd->add_option("--" + prefix + "iterations", a.iterations, what + " iteration count")
      ->capture_default_str();
  cmd->add_flag("--" + prefix + "random-start,!--" + prefix + "no-random-start",
                a.random_start, what + " random start inside the ball");
}

AttackConfig to_attack(const AttackOpts& a, std::uint64_t seed,
                       const std::optional<std::pair<double, double>>& clamp) {
  AttackConfig c;
  c.norm = norm_from_name(a.norm);
  c.epsilon = a.epsilon;
  c.step_size = a.step_size;
  c.iterations = a.iterations;
  c.random_start = a.random_start;
  c.seed = seed;
  c.clamp = clamp;
  return c;
}

nlohmann::json attack_opts_json(const AttackOpts& a) {
  return {{"norm", a.norm},
          {"epsilon", a.epsilon},
          {"step", a.step_size},
          {"iterations", a.iterations},
          {"random_start", a.random_start}};
}

void add_data_options(CLI::App* cmd, DataConfig& d) {
  cmd->add_option("--data-kind", d.kind, "Dataset kind: blobs | idx")
      ->check(CLI::IsMember({"blobs", "idx"}))
      ->capture_default_str();
  cmd->add_option("--data-classes", d.classes, "Blob class count")->capture_default_str();
  cmd->add_option("--data-dim", d.dim, "Blob input dimension")->capture_default_str();
  cmd->add_option("--data-per-class", d.per_class, "Blob points per class")
      ->capture_default_str();
  cmd->add_option("--data-spread", d.spread, "Blob noise scale")->capture_default_str();
  cmd->add_option("--data-seed", d.seed, "Dataset generation seed")->capture_default_str();
  cmd->add_option("--data-train-images", d.train_images, "IDX train image file");
  cmd->add_option("--data-train-labels", d.train_labels, "IDX train label file");
  cmd->add_option("--data-test-images", d.test_images, "IDX test image file");
  cmd->add_option("--data-test-labels", d.test_labels, "IDX test label file");
  cmd->add_option("--data-train-limit", d.train_limit, "Cap on train rows (0 = all)")
      ->capture_default_str();
  cmd->add_option("--data-test-limit", d.test_limit, "Cap on test rows (0 = all)")
      ->capture_default_str();
}

void write_metadata(const std::string& out_dir, const std::string& kind,
                    const nlohmann::json& config, std::uint64_t seed,
                    const std::vector<std::string>& outputs, double wall_seconds) {
  nlohmann::json meta{{"kind", kind},
                      {"format_version", kFormatVersion},
                      {"config", config},
                      {"config_hash", config_hash(config)},
                      {"seed", seed},
                      {"conventions", conventions_json()},
                      {"wall_time_seconds", wall_seconds},
                      {"outputs", outputs}};
  write_text_file(out_dir + "/metadata.json", meta.dump(2) + "\n");
}

int fail_json(const std::string& type, const std::string& message, int code) {
  nlohmann::json j{{"error", {{"type", type}, {"message", message}, {"exit_code", code}}}};
  std::cerr << j.dump() << "\n";
  return code;
}

// Reads a key=value config file (TOML subset: comments, quoting, arrays, an
// optional [<subcommand>] section) into the equivalent command-line flags.
// The keys are the subcommand's long option names without the leading
// dashes. Handled before the regular parse because this CLI11 version only
// processes config files attached to the root command, while ours belongs
// after the subcommand.
std::vector<std::string> config_file_args(const std::string& path, const std::string& subcmd) {
  if (!std::ifstream(path).good())
    throw ConfigError("config file not readable: " + path);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML{}.from_file(path);
  } catch (const CLI::Error& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  std::vector<std::string> out;
  for (const CLI::ConfigItem& item : items) {
    if (!item.parents.empty() &&
        !(item.parents.size() == 1 && item.parents.front() == subcmd))
      throw ConfigError("config file " + path + ": key '" + item.fullname() +
                        "' is not in the '" + subcmd + "' section");
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (item.inputs.empty()) {
      out.push_back("--" + item.name);
    } else if (item.inputs.size() == 1) {
      out.push_back("--" + item.name + "=" + item.inputs.front());
    } else {
      out.push_back("--" + item.name);
      for (const std::string& v : item.inputs) out.push_back(v);
    }
  }
  return out;
}

// Splices config-file options into the argument list right after the
// subcommand so explicitly passed flags (parsed with a take-last policy)
// override them.
std::vector<std::string> apply_config_files(const std::vector<std::string>& args,
                                            const std::vector<std::string>& subcommands) {
  std::size_t sub_pos = args.size();
  for (std::size_t i = 0; i < args.size() && sub_pos == args.size(); ++i)
    for (const std::string& s : subcommands)
      if (args[i] == s) sub_pos = i;
  if (sub_pos == args.size()) return args;

  std::string cfg_path;
  std::vector<std::string> rest;
  for (std::size_t i = sub_pos + 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      cfg_path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      cfg_path = args[i].substr(std::string("--config=").size());
    } else {
      rest.push_back(args[i]);
    }
  }
  if (cfg_path.empty()) return args;

  std::vector<std::string> rebuilt(args.begin(),
                                   args.begin() + static_cast<std::ptrdiff_t>(sub_pos) + 1);
  const std::vector<std::string> cfg_args = config_file_args(cfg_path, args[sub_pos]);
  rebuilt.insert(rebuilt.end(), cfg_args.begin(), cfg_args.end());
  rebuilt.insert(rebuilt.end(), rest.begin(), rest.end());
  return rebuilt;
}

// ---------------------------------------------------------------- train ----

struct TrainOpts {
  std::uint64_t seed = 0;
  std::string out = "out/train";
  std::string method = "at";
  double alpha = 0.3;
  std::string s2o_mode = "fast";
  std::vector<std::size_t> hidden = {64, 64};
  std::string activation = "relu";
  int epochs = 10;
  std::size_t batch_size = 128;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<int> milestones;
  double lr_decay = 0.1;
  AttackOpts attack;
  AttackOpts eval_attack;
  double trades_inv_lambda = 6.0;
  double avmixup_gamma = 2.0;
  double avmixup_lambda1 = 1.0;
  double avmixup_lambda2 = 0.1;
  bool avmixup_anchored = false;
  bool awp = false;
  double awp_gamma = 5e-3;
  int awp_steps = 1;
  int checkpoint_every = 0;
  DataConfig data;
};

int cmd_train(const TrainOpts& o) {
  ExperimentConfig cfg;
  cfg.train.method = method_from_name(o.method);
  cfg.train.alpha = o.alpha;
  cfg.train.s2o_mode = s2o_mode_from_name(o.s2o_mode);
  cfg.train.hidden = o.hidden;
  cfg.train.activation = activation_from_name(o.activation);
  cfg.train.epochs = o.epochs;
  cfg.train.batch_size = o.batch_size;
  cfg.train.seed = o.seed;
  cfg.train.optimizer.lr = o.lr;
  cfg.train.optimizer.momentum = o.momentum;
  cfg.train.optimizer.weight_decay = o.weight_decay;
  cfg.train.optimizer.milestones = o.milestones;
  cfg.train.optimizer.decay = o.lr_decay;
  cfg.train.attack = to_attack(o.attack, 0, std::nullopt);  // seeds set by the loop
  cfg.train.eval_attack = to_attack(o.eval_attack, 0, std::nullopt);
  cfg.train.trades_inv_lambda = o.trades_inv_lambda;
  cfg.train.avmixup_gamma = o.avmixup_gamma;
  cfg.train.avmixup_lambda1 = o.avmixup_lambda1;
  cfg.train.avmixup_lambda2 = o.avmixup_lambda2;
  cfg.train.avmixup_anchored = o.avmixup_anchored;
  cfg.train.awp = o.awp;
  cfg.train.awp_gamma = o.awp_gamma;
  cfg.train.awp_steps = o.awp_steps;
  cfg.data = o.data;
  cfg.out_dir = o.out;
  cfg.checkpoint_every = o.checkpoint_every;

  const ExperimentResult res = run_experiment(cfg);
  for (const MetricsRecord& r : res.train.history)
    std::printf("epoch %3d  lr %.4g  loss %.4f  penalty %.4f  clean %.4f  robust %.4f\n",
                r.epoch, r.lr, r.train_loss, r.penalty, r.clean_acc, r.robust_acc);
  std::printf("wrote %s and %s\n", res.metrics_path.c_str(), res.metadata_path.c_str());
  if (res.train.aborted)
    return fail_json("TrainingAborted",
                     res.train.abort_reason + " (metrics for completed epochs were written)",
                     4);
  return 0;
}

// ----------------------------------------------------------- attack-eval ----

struct AttackEvalOpts {
  std::uint64_t seed = 0;
  std::string out = "out/attack_eval";
  std::string checkpoint;
  AttackOpts attack;
  DataConfig data;
};

int cmd_attack_eval(const AttackEvalOpts& o) {
  const MlpNetwork net = load_checkpoint(o.checkpoint);
  const Dataset ds = o.data.load();
  const AttackConfig atk = to_attack(o.attack, derive_seed(o.seed, 0xE7A1), ds.clamp);

  const auto t0 = std::chrono::steady_clock::now();
  const nlohmann::json rep = attack_eval_report(net, ds.test, atk);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  fs::create_directories(o.out);
  write_text_file(o.out + "/attack_eval.json", rep.dump(2) + "\n");
  const nlohmann::json cfg{{"checkpoint", o.checkpoint},
                           {"attack", attack_opts_json(o.attack)},
                           {"data", data_config_json(o.data)},
                           {"seed", o.seed},
                           {"out", o.out}};
  write_metadata(o.out, "attack-eval", cfg, o.seed, {"attack_eval.json"}, wall);

  std::printf("clean %.4f  fgm %.4f  pgd-%d %.4f  (budget %s <= %.6g: %s)\n",
              rep["clean"]["accuracy"].get<double>(), rep["fgm"]["accuracy"].get<double>(),
              atk.iterations, rep["pgd"]["accuracy"].get<double>(), norm_name(atk.norm).c_str(),
              atk.epsilon,
              rep["pgd"]["max_perturbation"].get<double>() <= atk.epsilon ? "yes" : "NO");
  std::printf("wrote %s/attack_eval.json\n", o.out.c_str());
  return 0;
}

// -------------------------------------------------------------- estimate ----

struct EstimateOpts {
  std::uint64_t seed = 0;
  std::string out = "out/estimate";
  std::string checkpoint;
  std::vector<std::string> estimators = {"laplace", "sampling"};
  std::vector<std::string> domains = {"clean", "adversarial"};
  std::string head = "softmax";
  double damping = -1.0;  // <0 = trace-scaled default
  double noise_std = 0.01;
  int sample_epochs = 40;
  double sample_lr = 0.01;
  double eps_prime = 0.5;
  AttackOpts attack;
  DataConfig data;
};

int cmd_estimate(const EstimateOpts& o) {
  const MlpNetwork net = load_checkpoint(o.checkpoint);
  const Dataset ds = o.data.load();
  const AttackConfig atk = to_attack(o.attack, derive_seed(o.seed, 0xAD4), ds.clamp);
  const CurvatureHead head =
      o.head == "squared" ? CurvatureHead::squared_error : CurvatureHead::softmax_ce;
  std::optional<double> damping;
  if (o.damping >= 0.0) damping = o.damping;

  const auto t0 = std::chrono::steady_clock::now();
  // The adversarial domain sees the training split attacked once against the
  // loaded weights.
  Tensor adv_x;
  for (const std::string& d : o.domains)
    if (d == "adversarial") adv_x = pgd_perturb(net, ds.train, atk);

  fs::create_directories(o.out);
  std::vector<std::string> outputs;
  for (const std::string& est_name : o.estimators) {
    for (const std::string& dom_name : o.domains) {
      const DomainTag dom = domain_from_name(dom_name);
      const Tensor& x = dom == DomainTag::adversarial ? adv_x : ds.train.x;
      CorrelationEstimate est;
      if (est_name == "laplace") {
        ActivationStats stats(dom);
        stats.accumulate(net, x);
        const std::vector<Tensor> curv = ggn_preactivation_curvature(net, x, head);
        est = correlation_from_covariance(laplace_covariance(stats, curv, damping), dom,
                                          o.seed);
      } else if (est_name == "sampling") {
        const LabeledBatch batch{x, ds.train.y};
        const WeightSampleSet set =
            sample_posterior_weights(net, batch, o.noise_std, o.sample_epochs, o.sample_lr,
                                     o.eps_prime, derive_seed(o.seed, 0x5A3, dom == DomainTag::adversarial));
        est = correlation_from_samples(set, dom, o.seed);
      } else {
        throw ConfigError("estimate: unknown estimator '" + est_name + "'");
      }
      std::ostringstream name;
      name << "estimate_" << est_name << "_" << dom_name << ".bin";
      save_estimate(o.out + "/" + name.str(), est);
      outputs.push_back(name.str());
      double sigma_sum = 0.0, logdet_sum = 0.0;
      bool degenerate = false;
      for (const LayerCorrelation& lc : est.layers) {
        sigma_sum += lc.sigma;
        logdet_sum += lc.log_det_r;
        degenerate = degenerate || lc.degenerate;
      }
      std::printf("%-10s %-12s layers %zu  sum sigma %.6g  sum logdet %.6g%s\n",
                  est_name.c_str(), dom_name.c_str(), est.layers.size(), sigma_sum,
                  logdet_sum, degenerate ? "  [degenerate]" : "");
    }
  }
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const nlohmann::json cfg{{"checkpoint", o.checkpoint},
                           {"estimators", o.estimators},
                           {"domains", o.domains},
                           {"head", o.head},
                           {"damping", o.damping},
                           {"noise_std", o.noise_std},
                           {"sample_epochs", o.sample_epochs},
                           {"sample_lr", o.sample_lr},
                           {"eps_prime", o.eps_prime},
                           {"attack", attack_opts_json(o.attack)},
                           {"data", data_config_json(o.data)},
                           {"seed", o.seed},
                           {"out", o.out}};
  write_metadata(o.out, "estimate", cfg, o.seed, outputs, wall);
  std::printf("wrote %zu estimate files under %s\n", outputs.size(), o.out.c_str());
  return 0;
}

// ----------------------------------------------------------------- bound ----

struct BoundOpts {
  std::uint64_t seed = 0;
  std::string out = "out/bound";
  std::string checkpoint;
  std::string estimate_clean;
  std::string estimate_adv;
  std::size_t m = 0;  // 0 = training-split size of --data-*
  double input_bound = 0.0;  // 0 = estimate from data
  double epsilon = 8.0 / 255.0;
  double kappa = 0.0;  // 0 = estimate from data
  double margin = 1.0;
  double delta = 0.05;
  double sigma = 1.0;
  std::string sigma_convention = "uniform";
  std::string attack_model = "fgm";
  int pgm_iterations = 1;
  double pgm_step = 0.0;
  AttackOpts attack;
  DataConfig data;
};

int cmd_bound(const BoundOpts& o) {
  const MlpNetwork net = load_checkpoint(o.checkpoint);
  const CorrelationEstimate clean_est = load_estimate(o.estimate_clean);
  const CorrelationEstimate adv_est = load_estimate(o.estimate_adv);

  const auto t0 = std::chrono::steady_clock::now();
  BoundInputs in;
  layer_norms(net, in.spectral_norms, in.frob_norms);
  in.epsilon = o.epsilon;
  in.margin = o.margin;
  in.delta = o.delta;
  in.sigma = o.sigma;
  in.sigma_convention = sigma_convention_from_name(o.sigma_convention);
  in.attack = attack_kind_from_name(o.attack_model);
  in.pgm_iterations = o.pgm_iterations;
  in.pgm_step = o.pgm_step > 0.0 ? o.pgm_step : o.epsilon;
  in.m = o.m;
  in.input_bound = o.input_bound;
  in.kappa = o.kappa;

  bool kappa_floored = false;
  if (o.m == 0 || o.input_bound <= 0.0 || o.kappa <= 0.0) {
    const Dataset ds = o.data.load();
    if (o.m == 0) in.m = ds.train.x.rows();
    if (o.input_bound <= 0.0 || o.kappa <= 0.0) {
      const AttackConfig atk = to_attack(o.attack, derive_seed(o.seed, 0xCAB), ds.clamp);
      const KappaB kb = estimate_kappa_B(net, ds.train, atk);
      if (o.input_bound <= 0.0) in.input_bound = kb.input_bound;
      if (o.kappa <= 0.0) in.kappa = kb.kappa;
      kappa_floored = kb.kappa_floored;
    }
  }

  const BoundReport rep = corollary_bound(in, clean_est, adv_est);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  fs::create_directories(o.out);
  nlohmann::json rep_json = bound_report_json(rep);
  rep_json["inputs"] = {{"m", in.m},
                        {"input_bound", in.input_bound},
                        {"epsilon", in.epsilon},
                        {"kappa", in.kappa},
                        {"kappa_floored", kappa_floored},
                        {"margin", in.margin},
                        {"delta", in.delta},
                        {"sigma", in.sigma}};
  write_text_file(o.out + "/bound.json", rep_json.dump(2) + "\n");

  const nlohmann::json cfg{{"checkpoint", o.checkpoint},
                           {"estimate_clean", o.estimate_clean},
                           {"estimate_adv", o.estimate_adv},
                           {"m", o.m},
                           {"input_bound", o.input_bound},
                           {"epsilon", o.epsilon},
                           {"kappa", o.kappa},
                           {"margin", o.margin},
                           {"delta", o.delta},
                           {"sigma", o.sigma},
                           {"sigma_convention", o.sigma_convention},
                           {"attack_model", o.attack_model},
                           {"pgm_iterations", o.pgm_iterations},
                           {"pgm_step", o.pgm_step},
                           {"attack", attack_opts_json(o.attack)},
                           {"data", data_config_json(o.data)},
                           {"seed", o.seed},
                           {"out", o.out}};
  write_metadata(o.out, "bound", cfg, o.seed, {"bound.json"}, wall);

  std::printf("phi %.6g  psi %.6g  kl %.6g  lambda_sum %.6g  complexity %.6g\n", rep.phi,
              rep.psi, rep.kl, rep.lambda_sum, rep.complexity);
  std::printf("wrote %s/bound.json\n", o.out.c_str());
  return 0;
}

// -------------------------------------------------------------- simulate ----

struct SimulateOpts {
  std::uint64_t seed = 0;
  std::string out = "out/simulate";
  std::size_t dim = 9;
  std::size_t count = 10000;
  std::string generator = "wishart-normalized";
  std::size_t trend_h = 0;  // 0 = skip the monotonicity check
  std::vector<double> trend_grid = {0.1, 0.3, 0.5, 0.7, 0.9};
};

int cmd_simulate(const SimulateOpts& o) {
  SimConfig cfg;
  cfg.dim = o.dim;
  cfg.count = o.count;
  cfg.generator = generator_from_name(o.generator);
  cfg.seed = o.seed;

  const auto t0 = std::chrono::steady_clock::now();
  const ScatterResult res = scatter_experiment(cfg);
  fs::create_directories(o.out);
  write_text_file(o.out + "/scatter.csv", scatter_csv(res));
  nlohmann::json summary = scatter_summary_json(res);
  std::vector<std::string> outputs = {"scatter.csv", "scatter_summary.json"};

  if (o.trend_h > 0) {
    const TrendReport trend = lemma_trend_check(o.trend_h, o.trend_grid);
    nlohmann::json tj{{"h", trend.h}, {"all_pass", trend.all_pass}};
    nlohmann::json pairs = nlohmann::json::array();
    for (const TrendPair& p : trend.pairs)
      pairs.push_back(nlohmann::json{{"r_from", p.r_from},
                                     {"r_to", p.r_to},
                                     {"lambda_ok", p.lambda_ok},
                                     {"c_ok", p.c_ok}});
    tj["pairs"] = pairs;
    summary["trend"] = tj;
  }
  write_text_file(o.out + "/scatter_summary.json", summary.dump(2) + "\n");
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const nlohmann::json cfg_json{{"dim", o.dim},
                                {"count", o.count},
                                {"generator", o.generator},
                                {"trend_h", o.trend_h},
                                {"trend_grid", o.trend_grid},
                                {"seed", o.seed},
                                {"out", o.out}};
  write_metadata(o.out, "simulate", cfg_json, o.seed, outputs, wall);

  auto show = [](const std::optional<double>& v) {
    return v ? std::to_string(*v) : std::string("undefined");
  };
  std::printf("rows %zu  spearman(frob, lambda'): %s  spearman(frob, det-bound): %s\n",
              res.rows.size(), show(res.spearman_lambda_prime).c_str(),
              show(res.spearman_det_bound).c_str());
  std::printf("wrote %s/scatter.csv (%zu rows)\n", o.out.c_str(), res.rows.size());
  return 0;
}

// ------------------------------------------------------------- gradcheck ----

struct GradcheckOpts {
  std::uint64_t seed = 0;
  std::string out = "out/gradcheck";
  std::size_t cases = 100;
  std::size_t objective_cases = 10;
  double tol = 1e-5;
};

int cmd_gradcheck(const GradcheckOpts& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<GradCheckResult> results =
      run_gradcheck_suite(o.seed, o.tol, o.cases, o.objective_cases);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::size_t failures = 0;
  nlohmann::json rows = nlohmann::json::array();
  for (const GradCheckResult& r : results) {
    std::printf("%-24s cases %4zu  max rel err %.3e  %s\n", r.name.c_str(), r.cases,
                r.rel_error, r.pass ? "ok" : "FAIL");
    rows.push_back({{"name", r.name},
                    {"cases", r.cases},
                    {"max_rel_error", r.rel_error},
                    {"pass", r.pass}});
    if (!r.pass) ++failures;
  }
  fs::create_directories(o.out);
  write_text_file(o.out + "/gradcheck.json",
                  nlohmann::json{{"tolerance", o.tol}, {"results", rows}}.dump(2) + "\n");
  const nlohmann::json cfg{{"cases", o.cases},
                           {"objective_cases", o.objective_cases},
                           {"tol", o.tol},
                           {"seed", o.seed},
                           {"out", o.out}};
  write_metadata(o.out, "gradcheck", cfg, o.seed, {"gradcheck.json"}, wall);
  if (failures > 0) {
    std::ostringstream os;
    os << failures << " of " << results.size() << " gradient checks failed";
    return fail_json("GradCheckFailure", os.str(), 1);
  }
  std::printf("all %zu checks passed\n", results.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial training laboratory: weight-statistics regularization, "
               "posterior correlation estimators, and generalization bound reports"};
  app.require_subcommand(1);
  std::string config_sink;  // real handling happens in apply_config_files

  TrainOpts train_o;
  CLI::App* train = app.add_subcommand("train", "Train a model and write metrics + checkpoints");
  train->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  train->add_option("--config", config_sink,
                  "Key=value config file; explicit flags override its values");
  train->add_option("--seed", train_o.seed, "Run seed")->capture_default_str();
  train->add_option("--out", train_o.out, "Output directory")->capture_default_str();
  train->add_option("--method", train_o.method, "Objective: at | trades | avmixup")
      ->check(CLI::IsMember({"at", "trades", "avmixup"}))
      ->capture_default_str();
  train->add_option("--alpha", train_o.alpha, "Penalty weight (0 disables)")
      ->capture_default_str();
  train->add_option("--s2o-mode", train_o.s2o_mode, "Penalty mode: off | fast | exact")
      ->check(CLI::IsMember({"off", "fast", "exact"}))
      ->capture_default_str();
  train->add_option("--hidden", train_o.hidden, "Hidden layer widths")->capture_default_str();
  train->add_option("--activation", train_o.activation, "Activation: relu | tanh | linear")
      ->check(CLI::IsMember({"relu", "tanh", "linear"}))
      ->capture_default_str();
  train->add_option("--epochs", train_o.epochs, "Epoch count")->capture_default_str();
  train->add_option("--batch-size", train_o.batch_size, "Minibatch size (0 = full batch)")
      ->capture_default_str();
  train->add_option("--lr", train_o.lr, "Learning rate")->capture_default_str();
  train->add_option("--momentum", train_o.momentum, "Momentum")->capture_default_str();
  train->add_option("--weight-decay", train_o.weight_decay, "Weight decay")
      ->capture_default_str();
  train->add_option("--milestones", train_o.milestones, "Epochs at which lr decays");
  train->add_option("--lr-decay", train_o.lr_decay, "Multiplicative lr decay at milestones")
      ->capture_default_str();
  add_attack_options(train, train_o.attack, "attack-", "Training attack");
  train_o.eval_attack.iterations = 20;
  add_attack_options(train, train_o.eval_attack, "eval-", "Evaluation attack");
  train->add_option("--trades-inv-lambda", train_o.trades_inv_lambda,
                    "KL weight of the trades objective")
      ->capture_default_str();
  train->add_option("--avmixup-gamma", train_o.avmixup_gamma, "Adversarial vertex scale")
      ->capture_default_str();
  train->add_option("--avmixup-lambda1", train_o.avmixup_lambda1,
                    "Label smoothing toward the clean vertex")
      ->capture_default_str();
  train->add_option("--avmixup-lambda2", train_o.avmixup_lambda2,
                    "Label smoothing toward the adversarial vertex")
      ->capture_default_str();
  train->add_flag("--avmixup-anchored", train_o.avmixup_anchored,
                  "Anchor the interpolation at the clean sample");
  train->add_flag("--awp", train_o.awp, "Wrap each step in an adversarial weight ascent");
  train->add_option("--awp-gamma", train_o.awp_gamma, "Relative weight-ascent radius")
      ->capture_default_str();
  train->add_option("--awp-steps", train_o.awp_steps, "Weight-ascent steps")
      ->capture_default_str();
  train->add_option("--checkpoint-every", train_o.checkpoint_every,
                    "Save a checkpoint every N epochs (0 = final only)")
      ->capture_default_str();
  add_data_options(train, train_o.data);

  AttackEvalOpts ae_o;
  CLI::App* ae = app.add_subcommand("attack-eval", "Evaluate a checkpoint under attacks");
  ae->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  ae->add_option("--config", config_sink,
                  "Key=value config file; explicit flags override its values");
  ae->add_option("--seed", ae_o.seed, "Attack seed")->capture_default_str();
  ae->add_option("--out", ae_o.out, "Output directory")->capture_default_str();
  ae->add_option("--checkpoint", ae_o.checkpoint, "Checkpoint file")->required();
  add_attack_options(ae, ae_o.attack, "", "Attack");
  add_data_options(ae, ae_o.data);

  EstimateOpts est_o;
  CLI::App* est = app.add_subcommand(
      "estimate", "Estimate posterior weight correlations for a checkpoint");
  est->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  est->add_option("--config", config_sink,
                  "Key=value config file; explicit flags override its values");
  est->add_option("--seed", est_o.seed, "Estimation seed")->capture_default_str();
  est->add_option("--out", est_o.out, "Output directory")->capture_default_str();
  est->add_option("--checkpoint", est_o.checkpoint, "Checkpoint file")->required();
  est->add_option("--estimators", est_o.estimators, "Estimators: laplace sampling")
      ->capture_default_str();
  est->add_option("--domains", est_o.domains, "Domains: clean adversarial")
      ->capture_default_str();
  est->add_option("--head", est_o.head, "Curvature head: softmax | squared")
      ->check(CLI::IsMember({"softmax", "squared"}))
      ->capture_default_str();
  est->add_option("--damping", est_o.damping,
                  "Factor damping (<0 = trace-scaled default, 0 = none)")
      ->capture_default_str();
  est->add_option("--noise-std", est_o.noise_std, "Relative sampling noise scale")
      ->capture_default_str();
  est->add_option("--sample-epochs", est_o.sample_epochs, "Sampling trajectory length")
      ->capture_default_str();
  est->add_option("--sample-lr", est_o.sample_lr, "Sampling step size")
      ->capture_default_str();
  est->add_option("--eps-prime", est_o.eps_prime, "Loss window for retaining samples")
      ->capture_default_str();
  add_attack_options(est, est_o.attack, "", "Adversarial-domain attack");
  add_data_options(est, est_o.data);

  BoundOpts bd_o;
  CLI::App* bd = app.add_subcommand("bound", "Compute a generalization bound report");
  bd->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  bd->add_option("--config", config_sink,
                  "Key=value config file; explicit flags override its values");
  bd->add_option("--seed", bd_o.seed, "Seed for data-derived constants")
      ->capture_default_str();
  bd->add_option("--out", bd_o.out, "Output directory")->capture_default_str();
  bd->add_option("--checkpoint", bd_o.checkpoint, "Checkpoint file")->required();
  bd->add_option("--estimate-clean", bd_o.estimate_clean, "Clean-domain estimate file")
      ->required();
  bd->add_option("--estimate-adv", bd_o.estimate_adv, "Adversarial-domain estimate file")
      ->required();
  bd->add_option("--m", bd_o.m, "Sample count (0 = training-split size)")
      ->capture_default_str();
  bd->add_option("--input-bound", bd_o.input_bound,
                 "Input norm bound B (0 = measure from data)")
      ->capture_default_str();
  bd->add_option("--epsilon", bd_o.epsilon, "Attack budget in the bound")
      ->capture_default_str();
  bd->add_option("--kappa", bd_o.kappa, "Gradient-norm lower bound (0 = measure from data)")
      ->capture_default_str();
  bd->add_option("--margin", bd_o.margin, "Margin gamma")->capture_default_str();
  bd->add_option("--delta", bd_o.delta, "Confidence level")->capture_default_str();
  bd->add_option("--sigma", bd_o.sigma, "Posterior noise scale")->capture_default_str();
  bd->add_option("--sigma-convention", bd_o.sigma_convention,
                 "Noise allocation: uniform | spectral")
      ->check(CLI::IsMember({"uniform", "spectral"}))
      ->capture_default_str();
  bd->add_option("--attack-model", bd_o.attack_model, "Perturbation model: fgm | pgm")
      ->check(CLI::IsMember({"fgm", "pgm"}))
      ->capture_default_str();
  bd->add_option("--pgm-iterations", bd_o.pgm_iterations, "Iterations r of the pgm model")
      ->capture_default_str();
  bd->add_option("--pgm-step", bd_o.pgm_step, "Step size of the pgm model (0 = epsilon)")
      ->capture_default_str();
  add_attack_options(bd, bd_o.attack, "probe-", "Constant-measuring attack");
  add_data_options(bd, bd_o.data);

  SimulateOpts sim_o;
  CLI::App* sim = app.add_subcommand(
      "simulate", "Random-correlation scatter study and closed-form trend checks");
  sim->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  sim->add_option("--config", config_sink,
                  "Key=value config file; explicit flags override its values");
  sim->add_option("--seed", sim_o.seed, "Generator seed")->capture_default_str();
  sim->add_option("--out", sim_o.out, "Output directory")->capture_default_str();
  sim->add_option("--dim", sim_o.dim, "Correlation matrix dimension (a perfect square)")
      ->capture_default_str();
  sim->add_option("--count", sim_o.count, "Number of sampled matrices")
      ->capture_default_str();
  sim->add_option("--generator", sim_o.generator,
                  "Matrix source: wishart-normalized | equicorrelated-sweep | identity")
      ->check(CLI::IsMember({"wishart-normalized", "equicorrelated-sweep", "identity"}))
      ->capture_default_str();
  sim->add_option("--trend-h", sim_o.trend_h,
                  "Layer width for the closed-form monotonicity check (0 = skip)")
      ->capture_default_str();
  sim->add_option("--trend-grid", sim_o.trend_grid, "Correlation grid for the trend check")
      ->capture_default_str();

  GradcheckOpts gc_o;
  CLI::App* gc = app.add_subcommand("gradcheck",
                                    "Finite-difference validation of all gradients");
  gc->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  gc->add_option("--config", config_sink,
                  "Key=value config file; explicit flags override its values");
  gc->add_option("--seed", gc_o.seed, "Case seed")->capture_default_str();
  gc->add_option("--out", gc_o.out, "Output directory")->capture_default_str();
  gc->add_option("--cases", gc_o.cases, "Random cases per primitive")->capture_default_str();
  gc->add_option("--objective-cases", gc_o.objective_cases, "Cases per training objective")
      ->capture_default_str();
  gc->add_option("--tol", gc_o.tol, "Relative-error tolerance")->capture_default_str();

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    args = apply_config_files(
        args, {"train", "attack-eval", "estimate", "bound", "simulate", "gradcheck"});
  } catch (const ConfigError& e) {
    return fail_json("ConfigError", e.what(), 2);
  }
  std::reverse(args.begin(), args.end());  // CLI11 consumes the vector back to front
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (train->parsed()) return cmd_train(train_o);
    if (ae->parsed()) return cmd_attack_eval(ae_o);
    if (est->parsed()) return cmd_estimate(est_o);
    if (bd->parsed()) return cmd_bound(bd_o);
    if (sim->parsed()) return cmd_simulate(sim_o);
    if (gc->parsed()) return cmd_gradcheck(gc_o);
  } catch (const ConfigError& e) {
    return fail_json("ConfigError", e.what(), 2);
  } catch (const IoError& e) {
    return fail_json("IoError", e.what(), 3);
  } catch (const NumericsError& e) {
    return fail_json("NumericsError", e.what(), 4);
  } catch (const ShapeError& e) {
    return fail_json("ShapeError", e.what(), 5);
  } catch (const std::exception& e) {
    return fail_json("Error", e.what(), 1);
  }
  return 0;
}
