#include "hecomp/harness.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <sys/resource.h>

#include "hecomp/error.hpp"
#include "hecomp/plot.hpp"
#include "hecomp/rng.hpp"

namespace fs = std::filesystem;

namespace hecomp {

namespace {

template <typename F>
void read_object(const json& j, const std::string& where, F&& on_key) {
  if (!j.is_object()) throw ConfigError("'" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool known;
    try {
      known = on_key(key, value);
    } catch (const json::exception& e) {
      throw ConfigError("bad value for '" + where + "." + key + "': " + e.what());
    }
    if (!known) throw ConfigError("unknown key '" + key + "' in '" + where + "'");
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StructuralError("cannot write " + path);
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StructuralError("cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string fmt_number(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

double thread_cpu_seconds() {
  rusage u{};
  getrusage(RUSAGE_THREAD, &u);
  return u.ru_utime.tv_sec + u.ru_stime.tv_sec + 1e-6 * (u.ru_utime.tv_usec + u.ru_stime.tv_usec);
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace

void RunConfig::set_seed(std::uint64_t s) {
  dataset.seed = derive_seed(s, "data");
  init_seed = derive_seed(s, "init");
  train.seed = derive_seed(s, "train");
  probe.seed = derive_seed(s, "probe");
}

RunConfig default_run_config() {
  RunConfig c;
  c.model.vocab_size = VocabSpec::standard().size();
  return c;
}

json to_json(const RunConfig& c) {
  json j;
  j["dataset"] = {{"max_primitives", c.dataset.max_primitives},
                  {"num_noise", c.dataset.num_noise},
                  {"modifier_probability", c.dataset.modifier_probability},
                  {"train_size_cap", c.dataset.train_size_cap},
                  {"val_fraction", c.dataset.val_fraction},
                  {"seed", c.dataset.seed}};
  j["model"] = {{"d_model", c.model.d_model},   {"n_heads", c.model.n_heads},
                {"d_ff", c.model.d_ff},         {"n_layers", c.model.n_layers},
                {"vocab_size", c.model.vocab_size}, {"max_len", c.model.max_len}};
  j["init_seed"] = c.init_seed;
  j["train"] = {{"lr", c.train.lr},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"eps", c.train.eps},
                {"batch_size", c.train.batch_size},
                {"max_epochs", c.train.max_epochs},
                {"early_stop_patience", c.train.early_stop_patience},
                {"early_stop_min_delta", c.train.early_stop_min_delta},
                {"seed", c.train.seed}};
  j["reg"] = {{"enabled", c.regularize},
              {"lambda", c.reg.lambda},
              {"reg_layers", c.reg.reg_layers},
              {"he_batch_size", c.reg.he_batch_size},
              {"mlp_hidden", c.reg.mlp_hidden}};
  j["probe"] = {{"ridge", c.probe.ridge},
                {"mlp_hidden", c.probe.mlp_hidden},
                {"mlp_steps", c.probe.mlp_steps},
                {"mlp_lr", c.probe.mlp_lr},
                {"mlp_patience", c.probe.mlp_patience},
                {"folds", c.probe.folds},
                {"unary_modifier", c.probe.unary_modifier},
                {"max_triples", c.probe.max_triples},
                {"seed", c.probe.seed}};
  return j;
}

RunConfig run_config_from_json(const json& j, const RunConfig& base) {
  RunConfig c = base;
  read_object(j, "config", [&](const std::string& key, const json& v) {
    if (key == "dataset") {
      read_object(v, "dataset", [&](const std::string& k, const json& x) {
        auto& d = c.dataset;
        if (k == "max_primitives") d.max_primitives = x.get<int>();
        else if (k == "num_noise") d.num_noise = x.get<int>();
        else if (k == "modifier_probability") d.modifier_probability = x.get<double>();
        else if (k == "train_size_cap") d.train_size_cap = x.get<int>();
        else if (k == "val_fraction") d.val_fraction = x.get<double>();
        else if (k == "seed") d.seed = x.get<std::uint64_t>();
        else return false;
        return true;
      });
    } else if (key == "model") {
      read_object(v, "model", [&](const std::string& k, const json& x) {
        auto& m = c.model;
        if (k == "d_model") m.d_model = x.get<int>();
        else if (k == "n_heads") m.n_heads = x.get<int>();
        else if (k == "d_ff") m.d_ff = x.get<int>();
        else if (k == "n_layers") m.n_layers = x.get<int>();
        else if (k == "vocab_size") m.vocab_size = x.get<int>();
        else if (k == "max_len") m.max_len = x.get<int>();
        else return false;
        return true;
      });
    } else if (key == "init_seed") {
      c.init_seed = v.get<std::uint64_t>();
    } else if (key == "train") {
      read_object(v, "train", [&](const std::string& k, const json& x) {
        auto& t = c.train;
        if (k == "lr") t.lr = x.get<float>();
        else if (k == "beta1") t.beta1 = x.get<float>();
        else if (k == "beta2") t.beta2 = x.get<float>();
        else if (k == "eps") t.eps = x.get<float>();
        else if (k == "batch_size") t.batch_size = x.get<int>();
        else if (k == "max_epochs") t.max_epochs = x.get<int>();
        else if (k == "early_stop_patience") t.early_stop_patience = x.get<int>();
        else if (k == "early_stop_min_delta") t.early_stop_min_delta = x.get<double>();
        else if (k == "seed") t.seed = x.get<std::uint64_t>();
        else return false;
        return true;
      });
    } else if (key == "reg") {
      read_object(v, "reg", [&](const std::string& k, const json& x) {
        auto& r = c.reg;
        if (k == "enabled") c.regularize = x.get<bool>();
        else if (k == "lambda") r.lambda = x.get<float>();
        else if (k == "reg_layers") r.reg_layers = x.get<std::vector<int>>();
        else if (k == "he_batch_size") r.he_batch_size = x.get<int>();
        else if (k == "mlp_hidden") r.mlp_hidden = x.get<int>();
        else return false;
        return true;
      });
    } else if (key == "probe") {
      read_object(v, "probe", [&](const std::string& k, const json& x) {
        auto& p = c.probe;
        if (k == "ridge") p.ridge = x.get<double>();
        else if (k == "mlp_hidden") p.mlp_hidden = x.get<int>();
        else if (k == "mlp_steps") p.mlp_steps = x.get<int>();
        else if (k == "mlp_lr") p.mlp_lr = x.get<float>();
        else if (k == "mlp_patience") p.mlp_patience = x.get<int>();
        else if (k == "folds") p.folds = x.get<int>();
        else if (k == "unary_modifier") p.unary_modifier = x.get<bool>();
        else if (k == "max_triples") p.max_triples = x.get<int>();
        else if (k == "seed") p.seed = x.get<std::uint64_t>();
        else return false;
        return true;
      });
    } else {
      return false;
    }
    return true;
  });
  const VocabSpec vocab = VocabSpec::standard();
  if (c.model.vocab_size != vocab.size()) {
    throw ConfigError("model.vocab_size must be " + std::to_string(vocab.size()));
  }
  c.dataset.validate(vocab);
  c.model.validate();
  c.train.validate();
  c.probe.validate();
  if (c.regularize) c.reg.validate(c.model.n_layers);
  return c;
}

RunConfig load_run_config(const std::string& path, const RunConfig& base) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  }
  return run_config_from_json(j, base);
}

void save_run_config(const std::string& path, const RunConfig& c) { write_text(path, to_json(c).dump(2) + "\n"); }

const char* block_name(Block b) {
  switch (b) {
    case Block::Rq1a: return "rq1a";
    case Block::Rq1b: return "rq1b";
    case Block::Rq1c: return "rq1c";
    case Block::Rq2: return "rq2";
  }
  return "?";
}

Block parse_block(const std::string& s) {
  for (Block b : {Block::Rq1a, Block::Rq1b, Block::Rq1c, Block::Rq2}) {
    if (s == block_name(b)) return b;
  }
  throw ConfigError("unknown block '" + s + "' (expected rq1a, rq1b, rq1c or rq2)");
}

std::uint64_t run_seed(const std::string& seed_key, int seed_index) {
  return derive_seed(fnv1a(seed_key), "seed" + std::to_string(seed_index));
}

ExperimentPlan make_plan(Block block, const RunConfig& base, int seeds, const std::string& root, float lambda) {
  if (seeds < 1) throw ConfigError("--seeds must be >= 1");
  ExperimentPlan plan;
  plan.block = block;
  plan.seeds = seeds;
  plan.root = root;
  auto add = [&](std::string id, double x, std::string seed_key, RunConfig cfg) {
    plan.cells.push_back({std::move(id), x, std::move(seed_key), "", std::move(cfg)});
  };
  RunConfig c = base;
  c.regularize = false;
  switch (block) {
    case Block::Rq1a:
      for (int l = 1; l <= 10; ++l) {
        RunConfig k = c;
        k.dataset.max_primitives = 2;
        k.dataset.num_noise = 0;
        k.model.n_layers = l;
        add("L" + std::to_string(l), l, "rq1a/L" + std::to_string(l), k);
      }
      break;
    case Block::Rq1b:
      for (int p = 1; p <= 4; ++p) {
        RunConfig k = c;
        k.dataset.max_primitives = p;
        k.dataset.num_noise = 0;
        k.model.n_layers = 4;
        add("P" + std::to_string(p), p, "rq1b/P" + std::to_string(p), k);
      }
      break;
    case Block::Rq1c:
    case Block::Rq2:
      for (int n = 0; n <= 15; ++n) {
        RunConfig k = c;
        k.dataset.max_primitives = 2;
        k.dataset.num_noise = n;
        k.model.n_layers = 4;
        const std::string base_id = "N" + std::to_string(n);
        if (block == Block::Rq1c) {
          add(base_id, n, "rq1c/" + base_id, k);
        } else {
          k.regularize = true;
          k.reg.lambda = lambda;
          k.reg.validate(k.model.n_layers);
          add(base_id + "-lam" + fmt_number(lambda), n, "rq1c/" + base_id, k);
          plan.cells.back().partner = base_id;
        }
      }
      break;
  }
  return plan;
}

const OodSuite& shared_ood_suite() {
  static const OodSuite suite = [] {
    Rng rng(derive_seed(0, "ood-suite"));
    return build_ood_suite(VocabSpec::standard(), rng);
  }();
  return suite;
}

json record_to_json(const RunRecord& r) {
  json j;
  j["block"] = r.block;
  j["cell"] = r.cell;
  j["x"] = r.x;
  j["seed"] = r.seed;
  j["run_seed"] = r.run_seed;
  j["dataset_hash"] = hex64(r.dataset_hash);
  j["checkpoint"] = r.checkpoint;
  j["train"] = {{"train_loss", r.history.train_loss},
                {"val_loss", r.history.val_loss},
                {"best_epoch", r.history.best_epoch},
                {"best_val_loss", r.history.best_val_loss},
                {"stopped_early", r.history.stopped_early}};
  json ood;
  json em = json::object(), ta = json::object();
  for (const auto& [k, v] : r.ood.exact_match) em[std::to_string(k)] = v;
  for (const auto& [k, v] : r.ood.token_accuracy) ta[std::to_string(k)] = v;
  ood["exact_match"] = em;
  ood["token_accuracy"] = ta;
  ood["mean_exact_match"] = r.ood.mean_exact_match;
  ood["mean_token_accuracy"] = r.ood.mean_token_accuracy;
  j["ood"] = ood;
  j["he"] = json::parse(he_report_json(r.he));
  j["warnings"] = r.warnings;
  return j;
}

RunRecord record_from_json(const json& j) {
  RunRecord r;
  r.block = j.at("block").get<std::string>();
  r.cell = j.at("cell").get<std::string>();
  r.x = j.at("x").get<double>();
  r.seed = j.at("seed").get<int>();
  r.run_seed = j.at("run_seed").get<std::uint64_t>();
  r.dataset_hash = std::stoull(j.at("dataset_hash").get<std::string>(), nullptr, 16);
  r.checkpoint = j.at("checkpoint").get<std::string>();
  const json& t = j.at("train");
  r.history.train_loss = t.at("train_loss").get<std::vector<double>>();
  r.history.val_loss = t.at("val_loss").get<std::vector<double>>();
  r.history.best_epoch = t.at("best_epoch").get<int>();
  r.history.best_val_loss = t.at("best_val_loss").get<double>();
  r.history.stopped_early = t.at("stopped_early").get<bool>();
  const json& o = j.at("ood");
  for (const auto& [k, v] : o.at("exact_match").items()) r.ood.exact_match[std::stoi(k)] = v.get<double>();
  for (const auto& [k, v] : o.at("token_accuracy").items()) r.ood.token_accuracy[std::stoi(k)] = v.get<double>();
  r.ood.mean_exact_match = o.at("mean_exact_match").get<double>();
  r.ood.mean_token_accuracy = o.at("mean_token_accuracy").get<double>();
  const json& he = j.at("he");
  auto opt = [](const json& v) -> std::optional<double> {
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
  };
  for (const auto& [layer, kinds] : he.at("layers").items()) {
    for (const auto& [kind, s] : kinds.items()) {
      FamilyScores f;
      f.linear = opt(s.at("linear"));
      f.bilinear = opt(s.at("bilinear"));
      f.mlp = opt(s.at("mlp"));
      f.mean = opt(s.at("mean"));
      f.triples = s.at("triples").get<int>();
      r.he.layers[std::stoi(layer)][kind == "modifier" ? TripleKind::Modifier : TripleKind::Sequence] = f;
    }
  }
  r.he.he_mod_mean = opt(he.at("he_mod_mean"));
  r.he.he_seq_mean = opt(he.at("he_seq_mean"));
  r.he.diagnostics = he.at("diagnostics").get<std::vector<std::string>>();
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  return r;
}

Dataset build_run_data(const RunConfig& cfg) { return build_dataset(cfg.dataset, VocabSpec::standard()); }

void write_dataset_files(const Dataset& data, const std::string& dir) {
  fs::create_directories(dir);
  const VocabSpec vocab = VocabSpec::standard();
  {
    std::ofstream out(dir + "/train.jsonl");
    write_examples_jsonl(out, data.train, vocab);
  }
  {
    std::ofstream out(dir + "/val.jsonl");
    write_examples_jsonl(out, data.val, vocab);
  }
  {
    std::ofstream out(dir + "/vocab.json");
    write_vocab_json(out, vocab);
  }
  std::ofstream out(dir + "/ood.jsonl");
  for (const auto& [k, examples] : shared_ood_suite().by_k) write_examples_jsonl(out, examples, vocab);
}

ModelParams train_run(const RunConfig& cfg, const Dataset& data, const std::string& dir, RunRecord* rec) {
  fs::create_directories(dir);
  const ModelParams init = init_params(cfg.model, cfg.init_seed);
  ModelParams params;
  TrainHistory history;
  if (cfg.regularize) {
    RegTrainResult r = train_regularized(init, data, cfg.train, cfg.reg, VocabSpec::standard());
    write_reg_history_csv(dir + "/reg_history.csv", r.reg);
    params = std::move(r.params);
    history = std::move(r.history);
    if (rec) rec->warnings = r.warnings;
  } else {
    TrainResult r = train(init, data, cfg.train);
    params = std::move(r.params);
    history = std::move(r.history);
  }
  write_history_csv(dir + "/history.csv", history);
  save_model(dir + "/model.bin", params);
  if (rec) {
    rec->history = history;
    rec->checkpoint = dir + "/model.bin";
  }
  return params;
}

HEReport probe_run(const RunConfig& cfg, const ModelParams& params, const Dataset& data, const std::string& dir) {
  HEReport r = compute_he_report(params, data.train, VocabSpec::standard(), cfg.probe);
  write_text(dir + "/he_report.json", he_report_json(r) + "\n");
  return r;
}

OodResult eval_run(const ModelParams& params, const std::string& dir) {
  OodResult r = evaluate_ood(params, shared_ood_suite());
  RunRecord tmp;
  tmp.ood = r;
  write_text(dir + "/ood.json", record_to_json(tmp)["ood"].dump(2) + "\n");
  return r;
}

std::string run_dir(const ExperimentPlan& plan, const Cell& cell, int seed_index) {
  return plan.root + "/" + block_name(plan.block) + "/" + cell.id + "/" + std::to_string(seed_index);
}

RunRecord execute_run(const ExperimentPlan& plan, const Cell& cell, int seed_index) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string dir = run_dir(plan, cell, seed_index);
  fs::create_directories(dir);
  RunConfig cfg = cell.config;
  RunRecord rec;
  rec.block = block_name(plan.block);
  rec.cell = cell.id;
  rec.x = cell.x;
  rec.seed = seed_index;
  rec.run_seed = run_seed(cell.seed_key, seed_index);
  cfg.set_seed(rec.run_seed);
  save_run_config(dir + "/config.json", cfg);

  const Dataset data = build_run_data(cfg);
  rec.dataset_hash = dataset_hash(data);
  write_text(dir + "/dataset_hash.txt", hex64(rec.dataset_hash) + "\n");
  const ModelParams params = train_run(cfg, data, dir, &rec);
  rec.he = probe_run(cfg, params, data, dir);
  rec.ood = eval_run(params, dir);
  write_text(dir + "/metrics.json", record_to_json(rec).dump(2) + "\n");
  rec.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::vector<ManifestEntry> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      out.push_back({j.at("cell").get<std::string>(), j.at("seed").get<int>(), j.at("status").get<std::string>(),
                     j.value("wall_clock", 0.0), j.value("cpu_seconds", 0.0), j.value("error", std::string())});
    } catch (const json::exception&) {
      // A torn line cannot occur with rename-based appends; skip it if a
      // hand-edited manifest contains one.
    }
  }
  return out;
}

void append_manifest(const std::string& path, const ManifestEntry& e) {
  std::string existing;
  if (fs::exists(path)) existing = read_text(path);
  json j{{"cell", e.cell}, {"seed", e.seed}, {"status", e.status}, {"wall_clock", e.wall_clock},
         {"cpu_seconds", e.cpu_seconds}};
  if (!e.error.empty()) j["error"] = e.error;
  const std::string tmp = path + ".tmp";
  write_text(tmp, existing + j.dump() + "\n");
  fs::rename(tmp, path);
}

namespace {

std::string manifest_path(const ExperimentPlan& plan) {
  return plan.root + "/" + block_name(plan.block) + "/manifest.jsonl";
}

// Latest manifest status per (cell, seed).
std::map<std::pair<std::string, int>, ManifestEntry> manifest_state(const ExperimentPlan& plan) {
  std::map<std::pair<std::string, int>, ManifestEntry> m;
  for (auto& e : read_manifest(manifest_path(plan))) m[{e.cell, e.seed}] = e;
  return m;
}

bool is_complete(const ExperimentPlan& plan, const Cell& cell, int seed,
                 const std::map<std::pair<std::string, int>, ManifestEntry>& state) {
  const auto it = state.find({cell.id, seed});
  return it != state.end() && it->second.status == "ok" && fs::exists(run_dir(plan, cell, seed) + "/metrics.json");
}

}  // namespace

RunSummary run_experiment(const ExperimentPlan& plan, int jobs, std::ostream* log) {
  if (jobs < 1) throw ConfigError("--jobs must be >= 1");
  fs::create_directories(plan.root + "/" + block_name(plan.block));
  const auto state = manifest_state(plan);
  struct Task {
    std::size_t cell;
    int seed;
  };
  std::vector<Task> todo;
  RunSummary summary;
  for (std::size_t c = 0; c < plan.cells.size(); ++c) {
    for (int s = 0; s < plan.seeds; ++s) {
      if (is_complete(plan, plan.cells[c], s, state)) {
        ++summary.skipped;
      } else {
        todo.push_back({c, s});
      }
    }
  }
  shared_ood_suite();  // built once before the workers start

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < todo.size(); i = next++) {
      const Cell& cell = plan.cells[todo[i].cell];
      const int seed = todo[i].seed;
      ManifestEntry entry{cell.id, seed, "ok", 0.0, 0.0, ""};
      const auto t0 = std::chrono::steady_clock::now();
      const double c0 = thread_cpu_seconds();
      try {
        execute_run(plan, cell, seed);
      } catch (const std::exception& e) {
        entry.status = "failed";
        entry.error = e.what();
      }
      entry.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      entry.cpu_seconds = thread_cpu_seconds() - c0;
      std::lock_guard<std::mutex> lock(mu);
      append_manifest(manifest_path(plan), entry);
      if (entry.status != "ok") summary.failures.push_back(entry);
      if (log) {
        *log << block_name(plan.block) << '/' << cell.id << '/' << seed << ' ' << entry.status << ' '
             << std::fixed << std::setprecision(1) << entry.wall_clock << 's';
        if (!entry.error.empty()) *log << " (" << entry.error << ')';
        *log << std::endl;
      }
    }
  };
  const int n = std::min<int>(jobs, static_cast<int>(std::max<std::size_t>(todo.size(), 1)));
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  }
  summary.records = load_records(plan);
  return summary;
}

std::vector<RunRecord> load_records(const ExperimentPlan& plan) {
  const auto state = manifest_state(plan);
  std::vector<RunRecord> out;
  for (const auto& cell : plan.cells) {
    for (int s = 0; s < plan.seeds; ++s) {
      if (!is_complete(plan, cell, s, state)) continue;
      RunRecord r = record_from_json(json::parse(read_text(run_dir(plan, cell, s) + "/metrics.json")));
      r.wall_clock = state.at({cell.id, s}).wall_clock;
      r.cpu_seconds = state.at({cell.id, s}).cpu_seconds;
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::vector<MetricRecord> record_metrics(const RunRecord& r) {
  std::vector<MetricRecord> m;
  auto add = [&](const std::string& name, double v) { m.push_back({r.cell, r.seed, name, v}); };
  add("ood_exact_match", r.ood.mean_exact_match);
  add("ood_token_accuracy", r.ood.mean_token_accuracy);
  if (r.he.he_mod_mean) add("he_mod", *r.he.he_mod_mean);
  if (r.he.he_seq_mean) add("he_seq", *r.he.he_seq_mean);
  add("best_val_loss", r.history.best_val_loss);
  add("best_epoch", r.history.best_epoch + 1);
  add("epochs", static_cast<double>(r.history.val_loss.size()));
  for (const auto& [layer, kinds] : r.he.layers) {
    for (const auto& [kind, s] : kinds) {
      if (s.mean) add(std::string(kind == TripleKind::Modifier ? "he_mod" : "he_seq") + "_layer" + std::to_string(layer), *s.mean);
    }
  }
  for (const auto& [k, v] : r.ood.exact_match) add("ood_exact_match_k" + std::to_string(k), v);
  for (const auto& [k, v] : r.ood.token_accuracy) add("ood_token_accuracy_k" + std::to_string(k), v);
  return m;
}

namespace {

struct Point {
  double x;
  std::vector<double> values;  // one per seed
  double mean() const { return std::accumulate(values.begin(), values.end(), 0.0) / values.size(); }
  double std() const {
    if (values.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    const double m = mean();
    double ss = 0.0;
    for (double v : values) ss += (v - m) * (v - m);
    return std::sqrt(ss / (values.size() - 1));
  }
};

// Per-cell seed values of one metric, in cell order.
std::vector<Point> collect(const std::vector<RunRecord>& records, const std::string& metric) {
  std::vector<Point> pts;
  std::map<std::string, std::size_t> index;
  for (const auto& r : records) {
    for (const auto& m : record_metrics(r)) {
      if (m.metric != metric) continue;
      auto [it, fresh] = index.try_emplace(r.cell, pts.size());
      if (fresh) pts.push_back({r.x, {}});
      pts[it->second].values.push_back(m.value);
    }
  }
  std::stable_sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.x < b.x; });
  return pts;
}

void write_figure_csv(const std::string& path, const std::vector<std::pair<std::string, std::vector<Point>>>& series) {
  std::ofstream out(path);
  if (!out) throw StructuralError("cannot write " + path);
  out << "x,y,series,mean,std\n";
  out.precision(12);
  for (const auto& [name, pts] : series) {
    for (const auto& p : pts) {
      for (double v : p.values) out << p.x << ',' << v << ',' << name << ',' << p.mean() << ',' << p.std() << '\n';
    }
  }
}

Series to_series(const std::string& name, const std::vector<Point>& pts) {
  Series s{name, {}, {}, {}};
  for (const auto& p : pts) {
    s.x.push_back(p.x);
    s.y.push_back(p.mean());
    s.err.push_back(p.std());
  }
  return s;
}

void line_figure(const std::string& dir, const std::string& stem, const std::string& title, const std::string& xlabel,
                 const std::vector<RunRecord>& records) {
  const std::vector<std::string> he_metrics{"he_mod", "he_seq"};
  const std::vector<std::string> acc_metrics{"ood_exact_match", "ood_token_accuracy"};
  std::vector<std::pair<std::string, std::vector<Point>>> all;
  std::vector<Series> he_series, acc_series;
  for (const auto& m : he_metrics) {
    all.emplace_back(m, collect(records, m));
    he_series.push_back(to_series(m, all.back().second));
  }
  for (const auto& m : acc_metrics) {
    all.emplace_back(m, collect(records, m));
    acc_series.push_back(to_series(m, all.back().second));
  }
  write_figure_csv(dir + "/" + stem + ".csv", all);
  write_text(dir + "/" + stem + "_he.svg", line_plot_svg({title + ": homomorphism error", xlabel, "HE (MSE)"}, he_series));
  write_text(dir + "/" + stem + "_ood.svg", line_plot_svg({title + ": OOD accuracy", xlabel, "accuracy"}, acc_series));
}

json ttest_json(const TTestResult& t) {
  return {{"t", std::isfinite(t.t) ? json(t.t) : json(t.t > 0 ? "inf" : "-inf")},
          {"df", t.df},
          {"p", t.p},
          {"mean_diff", t.mean_diff}};
}

double range_of(const std::vector<Point>& pts) {
  if (pts.empty()) return 0.0;
  double lo = pts[0].mean(), hi = lo;
  for (const auto& p : pts) {
    lo = std::min(lo, p.mean());
    hi = std::max(hi, p.mean());
  }
  return hi - lo;
}

}  // namespace

ReportResult report(const ExperimentPlan& plan, const std::vector<RunRecord>& records,
                    const std::vector<RunRecord>& baseline) {
  if (records.empty()) {
    throw StatisticalError(std::string("no completed runs for block ") + block_name(plan.block));
  }
  const std::string dir = plan.root + "/" + block_name(plan.block) + "/report";
  fs::create_directories(dir);
  ReportResult result;
  json& a = result.analysis;
  a["block"] = block_name(plan.block);
  a["runs"] = records.size();
  a["expected_runs"] = plan.cells.size() * plan.seeds;
  result.partial = records.size() < plan.cells.size() * static_cast<std::size_t>(plan.seeds);

  std::vector<MetricRecord> metrics;
  for (const auto& r : records) {
    auto m = record_metrics(r);
    metrics.insert(metrics.end(), m.begin(), m.end());
  }
  {
    std::ofstream out(dir + "/summary.csv");
    write_summary_csv(out, metrics);
  }
  {
    std::ofstream out(dir + "/aggregate.csv");
    const auto rows = aggregate_seeds(metrics);
    write_aggregate_csv(out, rows);
  }
  {
    std::ofstream out(dir + "/timing.csv");
    out << "cell,seed,wall_clock,cpu_seconds\n";
    for (const auto& r : records) out << r.cell << ',' << r.seed << ',' << r.wall_clock << ',' << r.cpu_seconds << '\n';
  }

  switch (plan.block) {
    case Block::Rq1a:
      line_figure(dir, "fig1_rq1a", "RQ1a", "layers", records);
      break;
    case Block::Rq1b:
      line_figure(dir, "fig2_rq1b", "RQ1b", "max primitives", records);
      break;
    case Block::Rq1c: {
      line_figure(dir, "fig3_rq1c", "RQ1c", "noise tokens", records);
      const auto he = collect(records, "he_mod");
      const auto seq = collect(records, "he_seq");
      std::vector<double> noise, he_mean;
      for (const auto& p : he) {
        noise.push_back(p.x);
        he_mean.push_back(p.mean());
      }
      a["he_mod_range"] = range_of(he);
      a["he_seq_range"] = range_of(seq);
      json spear;
      if (he.size() >= 2) spear["noise_vs_he_mod"] = spearman(noise, he_mean);
      json regs;
      std::vector<std::pair<std::string, std::vector<Point>>> fig4;
      std::vector<Series> scatter, curves;
      for (const std::string metric : {"ood_exact_match", "ood_token_accuracy"}) {
        const auto acc = collect(records, metric);
        std::vector<double> acc_mean, acc_x, he_x;
        for (const auto& p : acc) acc_mean.push_back(p.mean());
        if (acc.size() != he.size()) {
          result.partial = true;
          continue;
        }
        if (he.size() >= 2) spear["noise_vs_" + metric] = spearman(noise, acc_mean);
        std::vector<Point> pts;
        Series s{metric, he_mean, acc_mean, {}};
        for (std::size_t i = 0; i < acc.size(); ++i) pts.push_back({he_mean[i], acc[i].values});
        fig4.emplace_back(metric, pts);
        scatter.push_back(s);
        json per_degree;
        for (int degree = 1; degree <= 3; ++degree) {
          try {
            const PolyFit f = polyfit_r2(he_mean, acc_mean, degree);
            per_degree[std::to_string(degree)] = {{"coefficients", f.coefficients}, {"r2", f.r2}};
            if (degree == 2) {
              Series c{metric + " fit (deg 2)", {}, {}, {}};
              const double lo = *std::min_element(he_mean.begin(), he_mean.end());
              const double hi = *std::max_element(he_mean.begin(), he_mean.end());
              for (int i = 0; i <= 40; ++i) {
                const double x = lo + (hi - lo) * i / 40.0;
                c.x.push_back(x);
                c.y.push_back(f.coefficients[0] + f.coefficients[1] * x + f.coefficients[2] * x * x);
              }
              curves.push_back(c);
            }
          } catch (const StatisticalError& e) {
            per_degree[std::to_string(degree)] = {{"error", e.what()}};
          }
        }
        regs[metric] = per_degree;
      }
      a["spearman"] = spear;
      a["regression"] = regs;
      write_figure_csv(dir + "/fig4_rq1c_regression.csv", fig4);
      write_text(dir + "/fig4_rq1c_regression.svg",
                 scatter_plot_svg({"RQ1c: OOD accuracy vs modifier HE", "mean modifier HE", "mean OOD accuracy"},
                                  scatter, curves));
      break;
    }
    case Block::Rq2: {
      std::map<std::pair<std::string, int>, const RunRecord*> base_index;
      for (const auto& b : baseline) base_index[{b.cell, b.seed}] = &b;
      std::map<std::string, std::string> partner;
      for (const auto& c : plan.cells) partner[c.id] = c.partner;
      struct Pair {
        const RunRecord* base;
        const RunRecord* reg;
      };
      std::vector<Pair> pairs;
      json missing = json::array();
      for (const auto& r : records) {
        const auto it = base_index.find({partner[r.cell], r.seed});
        if (it == base_index.end()) {
          missing.push_back(r.cell + "/" + std::to_string(r.seed));
          continue;
        }
        pairs.push_back({it->second, &r});
      }
      if (!missing.empty()) result.partial = true;
      a["pairs"] = pairs.size();
      a["missing_baselines"] = missing;
      auto value = [](const RunRecord& r, const std::string& m) {
        if (m == "he_mod") return r.he.he_mod_mean.value_or(std::nan(""));
        if (m == "he_seq") return r.he.he_seq_mean.value_or(std::nan(""));
        if (m == "ood_exact_match") return r.ood.mean_exact_match;
        return r.ood.mean_token_accuracy;
      };
      // Per-seed averages over noise levels, then paired across seeds.
      json tests;
      std::vector<std::pair<std::string, std::vector<Point>>> fig5;
      std::vector<BoxGroup> boxes;
      const std::vector<std::string> names{"he_mod", "he_seq", "ood_exact_match", "ood_token_accuracy"};
      for (const auto& m : names) {
        std::map<int, std::pair<double, int>> bsum, rsum;
        for (const auto& p : pairs) {
          bsum[p.reg->seed].first += value(*p.base, m);
          bsum[p.reg->seed].second++;
          rsum[p.reg->seed].first += value(*p.reg, m);
          rsum[p.reg->seed].second++;
        }
        std::vector<double> bv, rv;
        std::vector<Point> bpts, rpts;
        for (const auto& [seed, s] : bsum) {
          bv.push_back(s.first / s.second);
          rv.push_back(rsum[seed].first / rsum[seed].second);
          bpts.push_back({double(seed), {bv.back()}});
          rpts.push_back({double(seed), {rv.back()}});
        }
        fig5.emplace_back("baseline_" + m, bpts);
        fig5.emplace_back("regularized_" + m, rpts);
        if (m == "he_mod" || m == "he_seq") {
          boxes.push_back({"baseline " + m, bv});
          boxes.push_back({"regularized " + m, rv});
        }
        json t;
        t["baseline_mean"] = bv.empty() ? 0.0 : std::accumulate(bv.begin(), bv.end(), 0.0) / bv.size();
        t["regularized_mean"] = rv.empty() ? 0.0 : std::accumulate(rv.begin(), rv.end(), 0.0) / rv.size();
        try {
          t["regularized_minus_baseline"] = ttest_json(paired_t_test(rv, bv));
        } catch (const StatisticalError& e) {
          t["regularized_minus_baseline"] = {{"error", e.what()}};
        }
        tests[m] = t;
      }
      a["t_tests"] = tests;
      // Series carry the per-seed value as y; mean/std are over seeds.
      {
        std::ofstream out(dir + "/fig5_rq2_box.csv");
        out << "x,y,series,mean,std\n";
        out.precision(12);
        for (const auto& [name, pts] : fig5) {
          Point all{0, {}};
          for (const auto& p : pts) all.values.push_back(p.values[0]);
          for (const auto& p : pts) {
            out << p.x << ',' << p.values[0] << ',' << name << ',' << all.mean() << ',' << all.std() << '\n';
          }
        }
      }
      write_text(dir + "/fig5_rq2_box.svg",
                 box_plot_svg({"RQ2: per-seed HE averaged over noise", "", "HE (MSE)"}, boxes));
      std::vector<Arrow> arrows;
      {
        std::ofstream out(dir + "/fig6_rq2_arrows.csv");
        out << "seed,noise,base_he_mod,base_ood_exact_match,base_ood_token_accuracy,reg_he_mod,reg_ood_exact_match,"
               "reg_ood_token_accuracy\n";
        out.precision(12);
        std::map<int, std::array<double, 5>> per_seed;
        for (const auto& p : pairs) {
          out << p.reg->seed << ',' << p.reg->x << ',' << value(*p.base, "he_mod") << ','
              << p.base->ood.mean_exact_match << ',' << p.base->ood.mean_token_accuracy << ','
              << value(*p.reg, "he_mod") << ',' << p.reg->ood.mean_exact_match << ','
              << p.reg->ood.mean_token_accuracy << '\n';
          arrows.push_back({value(*p.base, "he_mod"), p.base->ood.mean_token_accuracy, value(*p.reg, "he_mod"),
                            p.reg->ood.mean_token_accuracy, false});
          auto& s = per_seed[p.reg->seed];
          s[0] += arrows.back().x0, s[1] += arrows.back().y0, s[2] += arrows.back().x1, s[3] += arrows.back().y1;
          s[4] += 1;
        }
        for (const auto& [seed, s] : per_seed) {
          arrows.push_back({s[0] / s[4], s[1] / s[4], s[2] / s[4], s[3] / s[4], true});
          out << seed << ",mean," << s[0] / s[4] << ",," << s[1] / s[4] << ',' << s[2] / s[4] << ",," << s[3] / s[4]
              << '\n';
        }
      }
      write_text(dir + "/fig6_rq2_arrows.svg",
                 arrow_plot_svg({"RQ2: baseline to regularized", "modifier HE", "OOD token accuracy"}, arrows));
      break;
    }
  }
  a["partial"] = result.partial;
  write_text(dir + "/analysis.json", a.dump(2) + "\n");
  return result;
}

}  // namespace hecomp
