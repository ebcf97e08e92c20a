// raee: build exit-profile databases, run retrieval-augmented early-exit
// evaluation, sweep ablations and generate synthetic datasets.

#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "raee/raee.hpp"

namespace {

struct PolicyFlags {
  std::string config;
  std::size_t k = 12;
  double tau = 0.9;
  double epsilon = 1e-12;
  std::string metric = "l2";
  std::string fallback = "final";
  CLI::Option* k_opt = nullptr;
  CLI::Option* tau_opt = nullptr;
  CLI::Option* epsilon_opt = nullptr;
  CLI::Option* metric_opt = nullptr;
  CLI::Option* fallback_opt = nullptr;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "Policy config file (k, tau, epsilon, metric, fallback_layer)");
    k_opt = app->add_option("--k", k, "Retrieved neighbors")->capture_default_str();
    tau_opt = app->add_option("--tau", tau, "Confidence threshold")->capture_default_str();
    epsilon_opt = app->add_option("--epsilon", epsilon, "Distance clamp")->capture_default_str();
    metric_opt = app->add_option("--metric", metric, "l2 or cosine")->capture_default_str();
    fallback_opt = app->add_option("--fallback", fallback, "final or a layer index")->capture_default_str();
  }

  // Config file first, explicit flags override it.
  raee::PolicyConfig resolve() const {
    raee::PolicyConfig cfg = config.empty() ? raee::PolicyConfig{} : raee::load_policy_config(config);
    if (config.empty() || k_opt->count()) cfg.k = k;
    if (config.empty() || tau_opt->count()) cfg.tau = tau;
    if (config.empty() || epsilon_opt->count()) cfg.epsilon = epsilon;
    if (config.empty() || metric_opt->count()) cfg.metric = raee::parse_metric(metric);
    if (config.empty() || fallback_opt->count()) cfg.fallback_layer = raee::parse_fallback(fallback);
    cfg.validate();
    return cfg;
  }
};

// Writes to --out when given, stdout otherwise.
class OutputSink {
 public:
  explicit OutputSink(const std::string& path) {
    if (!path.empty()) {
      file_ = std::make_unique<std::ofstream>(path, std::ios::trunc);
      if (!*file_) throw raee::data_error("cannot open output file: " + path);
    }
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-augmented early-exit toolkit"};
  app.require_subcommand(1);

  raee::BuildOptions build;
  auto* build_cmd = app.add_subcommand("build", "Collect exit profiles and write a database");
  build_cmd->add_option("--spec", build.spec_path, "Synthetic model spec file")->required();
  build_cmd->add_option("--dataset", build.dataset_path, "Training dataset (RAEEDS01)")->required();
  build_cmd->add_option("--out", build.out_path, "Output database path")->required();
  build_cmd->add_option("--embedding", build.embedding_source, "Key source: backbone:L")->capture_default_str();

  raee::EvalOptions eval;
  PolicyFlags eval_policy;
  std::string eval_format = "table";
  std::string eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "Run early-exit inference over an eval split");
  eval_cmd->add_option("--db", eval.db_path, "Database file")->required();
  eval_cmd->add_option("--dataset", eval.dataset_path, "Eval dataset (RAEEDS01)")->required();
  eval_cmd->add_option("--spec", eval.spec_path, "Model spec (default: the one stored in the database)");
  eval_cmd->add_option("--baseline", eval.baseline, "none, entropy or full")->capture_default_str();
  eval_cmd->add_option("--entropy-threshold", eval.entropy_threshold, "Entropy baseline threshold (nats)")
      ->capture_default_str();
  eval_cmd->add_option("--format", eval_format, "table or records")->capture_default_str();
  eval_cmd->add_option("--out", eval_out, "Write the report here instead of stdout");
  eval_policy.attach(eval_cmd);

  raee::AblateOptions ablate;
  PolicyFlags ablate_policy;
  std::string ablate_format = "table";
  std::string ablate_out;
  auto* ablate_cmd = app.add_subcommand("ablate", "Sweep k, tau or db_fraction");
  ablate_cmd->add_option("--db", ablate.db_path, "Database file")->required();
  ablate_cmd->add_option("--dataset", ablate.dataset_path, "Eval dataset (RAEEDS01)")->required();
  ablate_cmd->add_option("--spec", ablate.spec_path, "Model spec (default: the one stored in the database)");
  ablate_cmd->add_option("--knob", ablate.knob, "k, tau or db_fraction")->required();
  ablate_cmd->add_option("--values", ablate.values, "Comma-separated knob values")->required();
  ablate_cmd->add_option("--seed", ablate.seed, "Seed for db_fraction sampling")->capture_default_str();
  ablate_cmd->add_option("--format", ablate_format, "table or records")->capture_default_str();
  ablate_cmd->add_option("--out", ablate_out, "Write the table here instead of stdout");
  ablate_policy.attach(ablate_cmd);

  raee::SimgenOptions simgen;
  auto* simgen_cmd = app.add_subcommand("simgen", "Generate seeded train/eval datasets");
  simgen_cmd->add_option("--spec", simgen.spec_path, "Synthetic model spec file")->required();
  simgen_cmd->add_option("--n-train", simgen.n_train, "Training examples")->required();
  simgen_cmd->add_option("--n-eval", simgen.n_eval, "Eval examples")->required();
  simgen_cmd->add_option("--seed", simgen.seed, "Dataset seed")->capture_default_str();
  simgen_cmd->add_option("--out", simgen.out_prefix, "Output prefix (writes PREFIX.train.ds, PREFIX.eval.ds)")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(raee::ErrorKind::kUsage);
  }

  if (*build_cmd) return raee::cmd_build(build, std::cout, std::cerr);
  if (*simgen_cmd) return raee::cmd_simgen(simgen, std::cout, std::cerr);

  if (*eval_cmd) {
    std::unique_ptr<OutputSink> sink;
    const int rc = raee::run_command(std::cerr, [&] {
      eval.cfg = eval_policy.resolve();
      eval.format = raee::parse_format(eval_format);
      sink = std::make_unique<OutputSink>(eval_out);
    });
    return rc != 0 ? rc : raee::cmd_eval(eval, sink->stream(), std::cerr);
  }
  if (*ablate_cmd) {
    std::unique_ptr<OutputSink> sink;
    const int rc = raee::run_command(std::cerr, [&] {
      ablate.cfg = ablate_policy.resolve();
      ablate.format = raee::parse_format(ablate_format);
      sink = std::make_unique<OutputSink>(ablate_out);
    });
    return rc != 0 ? rc : raee::cmd_ablate(ablate, sink->stream(), std::cerr);
  }
  return static_cast<int>(raee::ErrorKind::kUsage);
}
