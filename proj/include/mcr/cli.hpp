// mcr/cli.hpp — command-line driver.
//
// Four subcommands over the library: `pretrain` runs the training loop and
// streams metrics/checkpoints to disk, `probe` evaluates a checkpoint on the
// toy downstream tasks and exports the layer-weight analysis, `gradcheck`
// verifies every registered op against finite differences, and
// `export-curves` merges metrics JSONL files into one plotting-friendly CSV.
//
// Exit codes are part of the interface:
//   0  success
//   1  unexpected failure (I/O, corrupt data)
//   2  invalid configuration or invocation (message names the offender)
//   3  training aborted on a non-finite loss
//   4  checkpoint format/version mismatch
//   5  malformed metrics JSONL line (message names file and line)
//
// Every subcommand is deterministic: re-running with identical inputs
// rewrites identical bytes (timestamps are opt-in via train.log_wall_ms).
// The run_cli entry point takes explicit streams so tests can drive the full
// surface in-process.

#pragma once

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mcr/checkpoint.hpp"
#include "mcr/config.hpp"
#include "mcr/data.hpp"
#include "mcr/gradcheck.hpp"
#include "mcr/model.hpp"
#include "mcr/probe.hpp"
#include "mcr/tensor.hpp"
#include "mcr/trainer.hpp"
#include "mcr/util.hpp"

namespace mcr {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitInvalidConfig = 2;
constexpr int kExitTrainAbort = 3;
constexpr int kExitCheckpointVersion = 4;
constexpr int kExitMalformedMetrics = 5;

constexpr double kGradcheckThreshold = 1e-4;

namespace detail {

// Shortest-exact is not needed for the CSV; 17 significant digits always
// parse back to the identical double.
inline std::string csv_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline Config load_config_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    fail_invalid("config: ", path.string(), " does not exist");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail_invalid("config: ", path.string(), " is not valid JSON: ", e.what());
  }
  return Config::from_json(j);
}

inline std::filesystem::path checkpoint_name(std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%06" PRIu64 ".bin", step);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

struct PretrainOptions {
  std::filesystem::path config_path;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out_dir = ".";
  std::optional<std::filesystem::path> resume;
};

// Runs the trainer to total_updates, appending one metrics line per update
// and saving a checkpoint every save_every steps plus a final one.  The
// metrics file opens with a config-echo line; resuming into the same
// directory appends, so an interrupted-and-resumed run reproduces the
// uninterrupted file byte for byte.
inline int cmd_pretrain(const PretrainOptions& opt, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  if (opt.resume && (opt.mode || opt.seed || !opt.config_path.empty()))
    fail_invalid("pretrain: --resume replays the checkpoint's own config; it cannot be "
                 "combined with --config, --mode, or --seed");
  if (!opt.resume && opt.config_path.empty())
    fail_invalid("pretrain: --config is required unless resuming");

  Trainer<float> trainer = [&] {
    if (opt.resume) return Trainer<float>::resume(*opt.resume);
    Config cfg = detail::load_config_file(opt.config_path);
    if (opt.mode)
      cfg.train.mode = *opt.mode == "mcr" ? McrMode::kMcr : McrMode::kBaseline;
    if (opt.seed) cfg.train.seed = *opt.seed;
    cfg.validate();
    return Trainer<float>(cfg);
  }();

  const Config& cfg = trainer.config();
  fs::create_directories(opt.out_dir);
  const fs::path metrics_path = opt.out_dir / "metrics.jsonl";
  const bool fresh =
      !opt.resume || !fs::exists(metrics_path) || fs::file_size(metrics_path) == 0;
  std::ofstream metrics(metrics_path,
                        std::ios::binary | (opt.resume ? std::ios::app : std::ios::trunc));
  if (!metrics) fail_runtime("pretrain: cannot open ", metrics_path.string());
  if (fresh)
    metrics << nlohmann::json{{"config", cfg.to_json()}}.dump() << '\n' << std::flush;

  while (trainer.global_step() < cfg.train.total_updates) {
    const MetricsRecord rec = trainer.step();
    if (rec.step % cfg.train.log_every == 0)
      metrics << metrics_to_jsonl(rec) << '\n' << std::flush;
    if (cfg.train.save_every > 0 && rec.step % cfg.train.save_every == 0 &&
        rec.step < cfg.train.total_updates)
      trainer.save(opt.out_dir / detail::checkpoint_name(rec.step));
  }
  trainer.save(opt.out_dir / "ckpt_final.bin");
  out << "pretrain: " << trainer.global_step() << " updates (" << to_string(cfg.train.mode)
      << ", seed " << cfg.train.seed << "), metrics at " << metrics_path.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

struct ProbeOptions {
  std::filesystem::path checkpoint;
  std::string task = "all";  // utterance-classification | frame-labeling | all
  std::optional<std::filesystem::path> config_path;  // probe-settings override
  std::filesystem::path out_dir = ".";
};

// Loads a checkpoint (which rebuilds its labeled synthetic corpus) and runs
// the frozen-upstream probe on the requested toy tasks.  Writes per-task
// metrics JSONL, accuracy JSON, and the weight-analysis export.  An optional
// --config file overrides only the probe settings; the model and data always
// come from the checkpoint's embedded config so the upstream matches its
// arrays.
inline int cmd_probe(const ProbeOptions& opt, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  if (!fs::exists(opt.checkpoint))
    fail_invalid("probe: checkpoint ", opt.checkpoint.string(), " does not exist");

  Trainer<float> trainer = Trainer<float>::resume(opt.checkpoint);
  Config cfg = trainer.config();
  if (opt.config_path) cfg.probe = detail::load_config_file(*opt.config_path).probe;
  if (cfg.data.kind != DataKind::kSynthetic)
    fail_invalid("probe: toy tasks need the synthetic corpus (labels); the checkpoint "
                 "was trained on a wav-dir source");

  std::vector<std::pair<ProbeTaskKind, std::size_t>> tasks;
  const std::size_t n_tone_classes = cfg.data.synthetic.f0_bands.size();
  if (opt.task == "all" || opt.task == to_string(ProbeTaskKind::kUtteranceClass))
    tasks.emplace_back(ProbeTaskKind::kUtteranceClass, n_tone_classes);
  if (opt.task == "all" || opt.task == to_string(ProbeTaskKind::kFrameLabel))
    tasks.emplace_back(ProbeTaskKind::kFrameLabel, 2);
  if (tasks.empty())
    fail_invalid("probe: unknown task '", opt.task, "' (expected utterance-classification, "
                 "frame-labeling, or all)");

  const std::vector<Clip<float>>& corpus = trainer.corpus();

  fs::create_directories(opt.out_dir);
  std::vector<std::pair<std::string, LayerWeights<float>>> weights;
  nlohmann::json accuracy = nlohmann::json::object();
  for (const auto& [kind, n_classes] : tasks) {
    const ProbeResult<float> res =
        probe_train(trainer.model().params, cfg.model, kind, corpus, n_classes, cfg.probe);
    const std::string name = to_string(kind);

    const fs::path mpath = opt.out_dir / ("probe_metrics_" + name + ".jsonl");
    std::ofstream metrics(mpath, std::ios::binary | std::ios::trunc);
    if (!metrics) fail_runtime("probe: cannot open ", mpath.string());
    metrics << nlohmann::json{{"config", cfg.to_json()}}.dump() << '\n';
    for (const MetricsRecord& rec : res.history) metrics << metrics_to_jsonl(rec) << '\n';

    weights.emplace_back(name, res.weights);
    accuracy[name] = res.accuracy;
    out << "probe: " << name << " held-out accuracy " << res.accuracy << '\n';
  }

  export_weight_analysis(weights, opt.out_dir / "weight_analysis.json");
  const nlohmann::json results{{"config", cfg.to_json()}, {"accuracy", accuracy}};
  const fs::path rpath = opt.out_dir / "probe_results.json";
  std::ofstream rfile(rpath, std::ios::binary | std::ios::trunc);
  if (!rfile) fail_runtime("probe: cannot open ", rpath.string());
  rfile << results.dump(2) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

// Finite-difference check of every registered op plus the full-model
// composites, in 64-bit.  Prints one table row per case; exit 0 iff every
// max relative error clears the threshold.  `sabotage_gelu` is a test-only
// negative control that flips the sign of the gelu backward — a correct
// harness must then fail and name gelu.
inline int cmd_gradcheck(std::ostream& out, bool sabotage_gelu = false) {
  std::vector<GradcheckCase> cases = gradcheck_registry();
  for (GradcheckCase& c : model_gradcheck_cases()) cases.push_back(std::move(c));
  if (sabotage_gelu) {
    for (GradcheckCase& c : cases) {
      if (c.name != "gelu") continue;
      c.build = [inner = c.build](const std::vector<TensorD>& x) {
        std::vector<TensorD> wrong;
        wrong.reserve(x.size());
        for (const TensorD& t : x)
          wrong.push_back(detail::unary_op(
              t, [](double v) { return v; }, [](double, double) { return -1.0; }));
        return inner(wrong);
      };
    }
  }

  const std::vector<GradcheckReport> reports = run_gradcheck(cases);
  bool all_pass = true;
  char row[128];
  std::snprintf(row, sizeof(row), "%-24s %8s %14s  %s", "op", "probes", "max_rel_err",
                "status");
  out << row << '\n';
  for (const GradcheckReport& r : reports) {
    const bool pass = r.max_rel_err < kGradcheckThreshold;
    all_pass = all_pass && pass;
    std::snprintf(row, sizeof(row), "%-24s %8zu %14.3e  %s", r.name.c_str(), r.probes,
                  r.max_rel_err, pass ? "PASS" : "FAIL");
    out << row << '\n';
  }
  out << (all_pass ? "gradcheck: all ops pass" : "gradcheck: FAILURES above") << '\n';
  return all_pass ? kExitOk : kExitFailure;
}

// ---------------------------------------------------------------------------
// export-curves
// ---------------------------------------------------------------------------

struct ExportCurvesOptions {
  std::vector<std::filesystem::path> inputs;
  std::filesystem::path out_dir = ".";
  std::optional<std::filesystem::path> out;  // overrides out_dir/curves.csv
};

// Merges metrics JSONL files into one CSV with a run_id column (the file
// stem), skipping each file's config-echo header line.  Values are printed
// with enough digits to parse back to the identical doubles.
inline int cmd_export_curves(const ExportCurvesOptions& opt, std::ostream& out,
                             std::ostream& err) {
  namespace fs = std::filesystem;
  std::vector<std::string> run_ids;
  for (const fs::path& p : opt.inputs) {
    std::string stem = p.stem().string();
    if (stem.find_first_of(",\"\n") != std::string::npos)
      fail_invalid("export-curves: run id '", stem, "' contains CSV delimiters");
    for (const std::string& seen : run_ids)
      if (seen == stem)
        fail_invalid("export-curves: two inputs share the run id '", stem,
                     "'; rename one file");
    run_ids.push_back(std::move(stem));
  }

  std::string csv = "step,run_id,L_pred1,L_pred2,L_mcr,L_total,\xcf\x84\n";
  for (std::size_t f = 0; f < opt.inputs.size(); ++f) {
    std::ifstream in(opt.inputs[f], std::ios::binary);
    if (!in) fail_runtime("export-curves: cannot open ", opt.inputs[f].string());
    std::string line;
    for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
      if (line.empty()) continue;
      const nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_object() && j.contains("config")) continue;  // header echo
      MetricsRecord rec;
      try {
        if (j.is_discarded()) throw std::runtime_error("not valid JSON");
        rec = metrics_from_json(j);
      } catch (const std::exception& e) {
        err << "export-curves: " << opt.inputs[f].string() << " line " << line_no
            << ": malformed metrics record (" << e.what() << ")\n";
        return kExitMalformedMetrics;
      }
      csv += std::to_string(rec.step);
      csv += ',';
      csv += run_ids[f];
      csv += ',';
      csv += detail::csv_double(rec.L_pred1);
      csv += ',';
      csv += detail::csv_double(rec.L_pred2);
      csv += ',';
      csv += detail::csv_double(rec.L_mcr);
      csv += ',';
      csv += detail::csv_double(rec.L_total);
      csv += ',';
      csv += detail::csv_double(rec.tau);
      csv += '\n';
    }
  }

  const fs::path out_path = opt.out ? *opt.out : opt.out_dir / "curves.csv";
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  write_text_file(out_path, csv);
  out << "export-curves: wrote " << out_path.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

// Validates MCR_THREADS (a worker-thread cap; this build executes fully
// sequentially, which the default of 1 makes explicit), parses the command
// line, and dispatches.  All semantic failures map onto the exit codes above.
inline int run_cli(int argc, const char* const* argv, std::ostream& out,
                   std::ostream& err) {
  if (const char* env = std::getenv("MCR_THREADS")) {
    const std::string v = env;
    const bool digits = !v.empty() && v.find_first_not_of("0123456789") == std::string::npos;
    if (!digits || v == "0" || v.size() > 6) {
      err << "MCR_THREADS must be a positive integer, got '" << v << "'\n";
      return kExitInvalidConfig;
    }
  }

  CLI::App app{"Self-distilled masked-prediction pre-training with model-level "
               "consistency, plus probing and analysis tools"};
  app.require_subcommand(1);

  PretrainOptions pre;
  std::string pre_mode;
  std::uint64_t pre_seed = 0;
  std::filesystem::path pre_resume;
  auto* pre_cmd = app.add_subcommand("pretrain", "Run the pre-training loop");
  pre_cmd->add_option("--config", pre.config_path, "Run configuration JSON");
  auto* mode_opt = pre_cmd->add_option("--mode", pre_mode, "Objective: mcr | baseline")
                       ->check(CLI::IsMember({"mcr", "baseline"}));
  auto* seed_opt = pre_cmd->add_option("--seed", pre_seed, "Overrides train.seed");
  pre_cmd->add_option("--out-dir", pre.out_dir, "Output directory (default .)");
  auto* resume_opt =
      pre_cmd->add_option("--resume", pre_resume, "Continue from a checkpoint");

  ProbeOptions prb;
  std::filesystem::path prb_config;
  auto* prb_cmd = app.add_subcommand("probe", "Frozen-upstream downstream evaluation");
  prb_cmd->add_option("checkpoint", prb.checkpoint, "Checkpoint to evaluate")->required();
  prb_cmd->add_option("--task", prb.task,
                      "utterance-classification | frame-labeling | all (default all)");
  auto* prb_cfg_opt = prb_cmd->add_option("--config", prb_config,
                                          "Config file whose probe settings override "
                                          "the checkpoint's");
  prb_cmd->add_option("--out-dir", prb.out_dir, "Output directory (default .)");

  auto* gc_cmd = app.add_subcommand("gradcheck",
                                    "Finite-difference check of every autodiff op");

  ExportCurvesOptions exp;
  std::filesystem::path exp_out;
  auto* exp_cmd = app.add_subcommand("export-curves", "Merge metrics JSONL into CSV");
  exp_cmd->add_option("inputs", exp.inputs, "Metrics JSONL files")->required();
  exp_cmd->add_option("--out-dir", exp.out_dir, "Output directory (default .)");
  auto* exp_out_opt =
      exp_cmd->add_option("--out", exp_out, "Output CSV path (default out-dir/curves.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n';
    return kExitInvalidConfig;
  }

  try {
    if (pre_cmd->parsed()) {
      if (*mode_opt) pre.mode = pre_mode;
      if (*seed_opt) pre.seed = pre_seed;
      if (*resume_opt) pre.resume = pre_resume;
      return cmd_pretrain(pre, out, err);
    }
    if (prb_cmd->parsed()) {
      if (*prb_cfg_opt) prb.config_path = prb_config;
      return cmd_probe(prb, out, err);
    }
    if (gc_cmd->parsed()) return cmd_gradcheck(out);
    if (exp_cmd->parsed()) {
      if (*exp_out_opt) exp.out = exp_out;
      return cmd_export_curves(exp, out, err);
    }
  } catch (const TrainAbortError& e) {
    err << e.what() << '\n';
    return kExitTrainAbort;
  } catch (const CheckpointVersionError& e) {
    err << e.what() << '\n';
    return kExitCheckpointVersion;
  } catch (const std::invalid_argument& e) {
    err << e.what() << '\n';
    return kExitInvalidConfig;
  } catch (const std::exception& e) {
    err << e.what() << '\n';
    return kExitFailure;
  }
  err << "no subcommand\n";
  return kExitInvalidConfig;
}

}  // namespace mcr
