#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hecomp/evalstats.hpp"
#include "hecomp/grammar.hpp"
#include "hecomp/hereg.hpp"
#include "hecomp/model.hpp"
#include "hecomp/probes.hpp"
#include "hecomp/trainer.hpp"

namespace hecomp {

using json = nlohmann::ordered_json;

// Everything needed to reproduce one training run.
struct RunConfig {
  DatasetSpec dataset;
  ModelConfig model;
  TrainConfig train;
  bool regularize = false;
  RegConfig reg;
  ProbeConfig probe;

  // Derives the dataset, init, training and probe seeds from one run seed.
  void set_seed(std::uint64_t run_seed);
  std::uint64_t init_seed = 0;
};

RunConfig default_run_config();
json to_json(const RunConfig& c);
// Fields missing from `j` keep their value from `base`; unknown keys throw
// ConfigError.
RunConfig run_config_from_json(const json& j, const RunConfig& base);
RunConfig load_run_config(const std::string& path, const RunConfig& base);
void save_run_config(const std::string& path, const RunConfig& c);

enum class Block { Rq1a, Rq1b, Rq1c, Rq2 };
const char* block_name(Block b);
Block parse_block(const std::string& s);

struct Cell {
  std::string id;         // directory name under the block
  double x = 0.0;         // grid coordinate (layers, primitives or noise)
  std::string seed_key;   // seeds are derived from this, shared by paired cells
  std::string partner;    // rq2: "rq1c/<cell>" baseline partner
  RunConfig config;
};

struct ExperimentPlan {
  Block block = Block::Rq1a;
  std::vector<Cell> cells;
  int seeds = 5;
  std::string root;
};

// Grid for a block on top of `base`. For rq2, `lambda` sets the regularizer
// weight and is part of the cell id.
ExperimentPlan make_plan(Block block, const RunConfig& base, int seeds, const std::string& root,
                         float lambda = 0.1f);

std::uint64_t run_seed(const std::string& seed_key, int seed_index);

// The OOD suite shared by every run.
const OodSuite& shared_ood_suite();

struct RunRecord {
  std::string block, cell;
  double x = 0.0;
  int seed = 0;
  std::uint64_t run_seed = 0;
  std::uint64_t dataset_hash = 0;
  std::string checkpoint;
  TrainHistory history;
  OodResult ood;
  HEReport he;
  double wall_clock = 0.0;
  double cpu_seconds = 0.0;
  std::vector<std::string> warnings;
};

json record_to_json(const RunRecord& r);
RunRecord record_from_json(const json& j);

// Single-run steps, each persisting into `dir`.
Dataset build_run_data(const RunConfig& cfg);
ModelParams train_run(const RunConfig& cfg, const Dataset& data, const std::string& dir, RunRecord* rec = nullptr);
HEReport probe_run(const RunConfig& cfg, const ModelParams& params, const Dataset& data, const std::string& dir);
OodResult eval_run(const ModelParams& params, const std::string& dir);
void write_dataset_files(const Dataset& data, const std::string& dir);

// Whole pipeline for one (cell, seed); writes metrics.json into the run dir.
RunRecord execute_run(const ExperimentPlan& plan, const Cell& cell, int seed_index);

std::string run_dir(const ExperimentPlan& plan, const Cell& cell, int seed_index);

struct ManifestEntry {
  std::string cell;
  int seed = 0;
  std::string status;  // "ok" or "failed"
  double wall_clock = 0.0;
  double cpu_seconds = 0.0;  // CPU time of the worker thread
  std::string error;
};

std::vector<ManifestEntry> read_manifest(const std::string& path);
// Appends by rewriting into a temporary file and renaming it over the old one.
void append_manifest(const std::string& path, const ManifestEntry& e);

struct RunSummary {
  std::vector<RunRecord> records;  // completed runs, in plan order
  std::vector<ManifestEntry> failures;
  int skipped = 0;  // already complete before this call
};

// Runs every missing (cell, seed) of the plan with up to `jobs` concurrent
// runs. Failed runs are recorded and the rest proceed.
RunSummary run_experiment(const ExperimentPlan& plan, int jobs = 1, std::ostream* log = nullptr);

// Completed records of the plan, read back from the run directories.
std::vector<RunRecord> load_records(const ExperimentPlan& plan);

// Per-run scalar metrics in summary.csv form.
std::vector<MetricRecord> record_metrics(const RunRecord& r);

struct ReportResult {
  json analysis;
  bool partial = false;
};

// Writes summary.csv, aggregate.csv, analysis.json and figure CSV/SVG files
// to <root>/<block>/report. rq2 also needs the rq1c baseline records.
ReportResult report(const ExperimentPlan& plan, const std::vector<RunRecord>& records,
                    const std::vector<RunRecord>& baseline = {});

}  // namespace hecomp
