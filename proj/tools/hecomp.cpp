#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "hecomp/error.hpp"
#include "hecomp/harness.hpp"

namespace fs = std::filesystem;
using namespace hecomp;

namespace {

struct Options {
  std::string root = "runs";
  std::string config;
  int seeds = 5;
  int jobs = 1;
  float lambda = 0.1f;
  std::uint64_t seed = 0;
  std::string out;
  std::string checkpoint;
  std::string block;
};

RunConfig base_config(const Options& o) {
  RunConfig base = default_run_config();
  if (!o.config.empty()) base = load_run_config(o.config, base);
  return base;
}

// Single-run subcommands take their seeds from --seed.
RunConfig single_config(const Options& o) {
  RunConfig cfg = base_config(o);
  cfg.set_seed(o.seed);
  return cfg;
}

void print_analysis(const ReportResult& r, const std::string& root, Block b) {
  std::cout << "report written to " << root << '/' << block_name(b) << "/report";
  if (r.partial) std::cout << " (PARTIAL: not every run has completed)";
  std::cout << '\n';
}

ReportResult report_block(const Options& o, Block b) {
  const RunConfig base = base_config(o);
  const ExperimentPlan plan = make_plan(b, base, o.seeds, o.root, o.lambda);
  std::vector<RunRecord> baseline;
  if (b == Block::Rq2) baseline = load_records(make_plan(Block::Rq1c, base, o.seeds, o.root));
  ReportResult r = report(plan, load_records(plan), baseline);
  print_analysis(r, o.root, b);
  return r;
}

int run_block(const Options& o, Block b) {
  const ExperimentPlan plan = make_plan(b, base_config(o), o.seeds, o.root, o.lambda);
  const RunSummary s = run_experiment(plan, o.jobs, &std::cerr);
  std::cout << block_name(b) << ": " << s.records.size() << " complete, " << s.skipped << " resumed, "
            << s.failures.size() << " failed\n";
  return s.failures.empty() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Homomorphism-error experiments on a compositional grammar"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--root", o.root, "Output root for experiment blocks")->capture_default_str();
  app.add_option("--config", o.config, "JSON run config overriding the defaults")->check(CLI::ExistingFile);
  app.add_option("--seeds", o.seeds, "Seeds per cell")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--jobs", o.jobs, "Concurrent runs")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--lambda", o.lambda, "Regularizer weight for rq2")->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "Write train/val/OOD datasets and the vocabulary");
  gen->add_option("--out", o.out, "Output directory")->required();
  gen->add_option("--seed", o.seed, "Run seed")->capture_default_str();

  auto* tr = app.add_subcommand("train", "Train one model");
  tr->add_option("--out", o.out, "Output directory")->required();
  tr->add_option("--seed", o.seed, "Run seed")->capture_default_str();

  auto* pr = app.add_subcommand("probe", "Fit homomorphism probes on a checkpoint");
  pr->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  pr->add_option("--out", o.out, "Output directory")->required();
  pr->add_option("--seed", o.seed, "Run seed the checkpoint was trained with")->capture_default_str();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the OOD suite");
  ev->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", o.out, "Output directory")->required();

  auto* run = app.add_subcommand("run", "Run (or resume) every seed of an experiment block");
  run->add_option("--block", o.block, "rq1a, rq1b, rq1c or rq2")->required();

  auto* rep = app.add_subcommand("report", "Aggregate a block into CSV, JSON and SVG outputs");
  rep->add_option("--block", o.block, "rq1a, rq1b, rq1c or rq2")->required();

  auto* all = app.add_subcommand("all", "Run and report every block");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const RunConfig cfg = single_config(o);
      const Dataset data = build_run_data(cfg);
      write_dataset_files(data, o.out);
      save_run_config(o.out + "/config.json", cfg);
      std::cout << data.train.size() << " train, " << data.val.size() << " val examples in " << o.out << '\n';
    } else if (*tr) {
      const RunConfig cfg = single_config(o);
      fs::create_directories(o.out);
      save_run_config(o.out + "/config.json", cfg);
      RunRecord rec;
      train_run(cfg, build_run_data(cfg), o.out, &rec);
      std::cout << "best val loss " << rec.history.best_val_loss << " at epoch " << rec.history.best_epoch + 1
                << "; checkpoint " << rec.checkpoint << '\n';
      for (const auto& w : rec.warnings) std::cerr << "warning: " << w << '\n';
    } else if (*pr) {
      RunConfig cfg = single_config(o);
      const ModelParams params = load_model(o.checkpoint);
      cfg.model = params.config;
      fs::create_directories(o.out);
      const HEReport r = probe_run(cfg, params, build_run_data(cfg), o.out);
      std::cout << he_report_json(r) << '\n';
    } else if (*ev) {
      fs::create_directories(o.out);
      const OodResult r = eval_run(load_model(o.checkpoint), o.out);
      std::cout << "OOD exact match " << r.mean_exact_match << ", token accuracy " << r.mean_token_accuracy << '\n';
    } else if (*run) {
      return run_block(o, parse_block(o.block));
    } else if (*rep) {
      report_block(o, parse_block(o.block));
    } else if (*all) {
      int status = 0;
      for (Block b : {Block::Rq1a, Block::Rq1b, Block::Rq1c, Block::Rq2}) status |= run_block(o, b);
      for (Block b : {Block::Rq1a, Block::Rq1b, Block::Rq1c, Block::Rq2}) report_block(o, b);
      return status;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
