// gaternet: train, evaluate and analyze gated CNNs.
//
//   gaternet train <config> --phase pretrain-backbone|pretrain-gater|joint
//                  [--resume <ckpt>] [--from-scratch] [--seed N]
//   gaternet eval <config> --ckpt <path> [--dump-gates <path>] [--seed N]
//   gaternet analyze --gatelog <path> --out <dir> [--pca-k K] [--bins B]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "gaternet/analyze.hpp"
#include "gaternet/checkpoint.hpp"
#include "gaternet/config.hpp"
#include "gaternet/errors.hpp"
#include "gaternet/io.hpp"
#include "gaternet/train.hpp"

namespace fs = std::filesystem;
using namespace gaternet;

namespace {

enum Exit : int {
  kOk = 0,
  kOther = 1,
  kUsage = 2,
  kConfig = 3,
  kIo = 4,
  kFormat = 5,
  kCheckpoint = 6,
  kShape = 7,
};

fs::path checkpoint_path(const RunConfig& cfg, Phase phase) {
  return cfg.output_dir / (std::string(to_string(phase)) + ".ckpt");
}

fs::path metrics_path(const RunConfig& cfg, Phase phase) {
  return cfg.output_dir / (std::string(to_string(phase)) + "_metrics.csv");
}

// Metric rows already on disk for epochs <= `upto`, so a resumed run keeps
// its history.
std::vector<std::string> previous_rows(const fs::path& path, std::size_t upto) {
  std::vector<std::string> rows;
  if (!fs::exists(path)) return rows;
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) <= upto) rows.push_back(line);
  }
  return rows;
}

std::string fmt_gate(double v) {
  if (std::isnan(v)) return "n/a";
  std::ostringstream out;
  out.precision(4);
  out << v;
  return out.str();
}

int cmd_train(const fs::path& config_path, const std::string& phase_name, const std::string& resume,
              bool from_scratch, std::optional<std::uint64_t> seed) {
  RunConfig cfg = load_run_config(config_path);
  if (seed) cfg.seed = *seed;
  const Phase phase = phase_from_string(phase_name);
  TrainConfig tc = cfg.train_config(phase);
  tc.from_scratch = from_scratch;

  const DatasetSplit data = load_datasets(cfg);
  Rng init(cfg.seed);
  GaterNet<float> model(cfg.model, init);

  std::optional<Checkpoint> resume_ck, backbone_ck, gater_ck;
  PhaseInputs in;
  in.train = &data.train;
  in.eval = &data.eval;
  if (!resume.empty()) {
    resume_ck = load_checkpoint(resume);
    in.resume = &*resume_ck;
  } else if (phase == Phase::joint && !from_scratch) {
    const fs::path bb = checkpoint_path(cfg, Phase::pretrain_backbone);
    const fs::path gt = checkpoint_path(cfg, Phase::pretrain_gater);
    if (!fs::exists(bb) || !fs::exists(gt)) {
      throw CheckpointError("joint phase needs " + bb.string() + " and " + gt.string() +
                            "; run the pretrain phases first or pass --from-scratch");
    }
    backbone_ck = load_checkpoint(bb);
    gater_ck = load_checkpoint(gt);
    in.backbone_init = &*backbone_ck;
    in.gater_init = &*gater_ck;
  }

  const fs::path ckpt_out = checkpoint_path(cfg, phase);
  const fs::path csv_out = metrics_path(cfg, phase);
  std::vector<std::string> rows = previous_rows(csv_out, resume_ck ? resume_ck->meta.epoch : 0);
  const auto t0 = std::chrono::steady_clock::now();
  in.on_epoch = [&](const EpochMetrics& m, const Checkpoint& ck) {
    save_checkpoint(ckpt_out, ck);
    rows.push_back(metrics_csv_row(m));
    std::string csv = metrics_csv_header() + "\n";
    for (const auto& r : rows) csv += r + "\n";
    atomic_write_file(csv_out, csv);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] epoch %zu/%zu  loss %.4f  train_acc %.4f  eval_acc %.4f  gates %s  lr %g  (%.1fs)\n",
                to_string(phase), m.epoch, tc.epochs, m.train_loss, m.train_acc, m.eval_acc,
                fmt_gate(m.mean_gate_activation).c_str(), m.lr, secs);
    std::fflush(stdout);
  };

  const PhaseResult result = run_phase(model, tc, in);
  if (result.metrics.empty()) {
    save_checkpoint(ckpt_out, result.checkpoint);
    std::printf("[%s] nothing to do: checkpoint already at epoch %zu\n", to_string(phase),
                result.checkpoint.meta.epoch);
  }
  std::printf("checkpoint: %s\nmetrics: %s\n", ckpt_out.c_str(), csv_out.c_str());
  return kOk;
}

int cmd_eval(const fs::path& config_path, const fs::path& ckpt_path, const std::string& dump_gates,
             std::optional<std::uint64_t> seed) {
  RunConfig cfg = load_run_config(config_path);
  if (seed) cfg.seed = *seed;
  const Checkpoint ck = load_checkpoint(ckpt_path);
  check_spec_hash(ck, cfg.model, ckpt_path.string());
  const Phase phase = phase_from_string(ck.meta.phase);

  Rng init(cfg.seed);
  GaterNet<float> model(cfg.model, init);
  restore_model(ck, model);
  const DatasetSplit data = load_datasets(cfg);
  const EvalResult r = evaluate(model, phase, data.eval, 256, !dump_gates.empty());
  std::printf("phase: %s\nepoch: %zu\neval_samples: %zu\naccuracy: %.6f\nmean_gate_activation: %s\n",
              ck.meta.phase.c_str(), ck.meta.epoch, data.eval.size(), r.accuracy,
              fmt_gate(r.mean_gate_activation).c_str());
  if (r.gate_log) {
    write_gate_log(dump_gates, *r.gate_log);
    std::printf("gatelog: %s (%zu x %zu)\n", dump_gates.c_str(), r.gate_log->num_samples,
                r.gate_log->num_gates);
  }
  return kOk;
}

int cmd_analyze(const fs::path& gatelog, const fs::path& out, std::size_t pca_k, std::size_t bins) {
  const GateLog log = read_gate_log(gatelog);
  AnalysisOptions opts;
  opts.pca_k = pca_k;
  opts.on_count_bins = bins;
  opts.fired_bins = bins;
  write_analysis(log, out, opts);
  const GateTaxonomy tax = classify_gates(log);
  std::printf("samples: %zu  gates: %zu\nalways_on: %zu  always_off: %zu  input_dependent: %zu\noutput: %s\n",
              log.num_samples, log.num_gates, tax.overall.always_on, tax.overall.always_off,
              tax.overall.input_dependent, out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GaterNet: gated CNN training and gate analytics"};
  app.require_subcommand(1);

  std::string config, phase, resume, ckpt, dump_gates, gatelog, out_dir;
  bool from_scratch = false;
  std::optional<std::uint64_t> seed;
  std::size_t pca_k = 2, bins = 100;

  auto* train = app.add_subcommand("train", "run one training phase");
  train->add_option("config", config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--phase", phase, "pretrain-backbone, pretrain-gater or joint")->required();
  train->add_option("--resume", resume, "continue from this checkpoint")->check(CLI::ExistingFile);
  train->add_flag("--from-scratch", from_scratch, "joint phase without pretrained checkpoints");
  train->add_option("--seed", seed, "override the config seed");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
  eval->add_option("config", config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  eval->add_option("--ckpt", ckpt, "checkpoint to evaluate")->required();
  eval->add_option("--dump-gates", dump_gates, "write the eval gate log here");
  eval->add_option("--seed", seed, "override the config seed");

  auto* analyze = app.add_subcommand("analyze", "gate taxonomy, histograms and usage vectors");
  analyze->add_option("--gatelog", gatelog, "gate log file")->required();
  analyze->add_option("--out", out_dir, "output directory")->required();
  analyze->add_option("--pca-k", pca_k, "PCA components for usage vectors")->check(CLI::PositiveNumber);
  analyze->add_option("--bins", bins, "histogram bins")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(config, phase, resume, from_scratch, seed);
    if (*eval) return cmd_eval(config, ckpt, dump_gates, seed);
    if (*analyze) return cmd_analyze(gatelog, out_dir, pca_k, bins);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kFormat;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kShape;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOther;
}
