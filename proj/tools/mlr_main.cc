// mlr: corpus generation, training, evaluation, batch rewriting and
// gradient checking.
//
// Exit codes: 0 success, 1 some input lines failed, 2 usage or config
// error, 3 training diverged, 4 gradient check failed.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mlr/checkpoint.h"
#include "mlr/corpus.h"
#include "mlr/evalkit.h"
#include "mlr/training.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitPartial = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitGradCheck = 4;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GenDataArgs {
  std::uint64_t seed = 0;
  int count = 0;
  std::string out;
};

int run_gen_data(const GenDataArgs& args) {
  if (args.count <= 0) throw UsageError("--count must be positive");
  const auto samples = mlr::generate_synthetic_corpus(args.seed, args.count);
  std::ofstream out(args.out, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write " + args.out);
  mlr::write_dataset(out, samples);
  out.flush();
  if (!out) throw UsageError("error writing " + args.out);
  std::cout << samples.size() << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string data;
  std::string config;
  std::string variant;
  std::string out_dir;
  std::string dev;
};

std::vector<mlr::DialogueSample> load_data(const std::string& path) {
  try {
    return mlr::load_dataset(path);
  } catch (const mlr::DatasetError& e) {
    throw UsageError(path + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw UsageError(e.what());
  }
}

int run_train(const TrainArgs& args) {
  mlr::TrainConfig config;
  try {
    config = mlr::TrainConfig::load(args.config);
    if (!args.variant.empty()) config.variant = mlr::parse_variant(args.variant);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const auto train_samples = load_data(args.data);
  std::vector<mlr::DialogueSample> dev_samples;
  if (!args.dev.empty()) dev_samples = load_data(args.dev);

  std::error_code ec;
  std::filesystem::create_directories(args.out_dir, ec);
  if (ec) throw UsageError("cannot create " + args.out_dir + ": " + ec.message());
  const auto dir = std::filesystem::path(args.out_dir);
  const std::string checkpoint_path = (dir / "model.ckpt").string();
  std::ofstream log((dir / "metrics.tsv").string(), std::ios::trunc);
  if (!log) throw UsageError("cannot write metrics log in " + args.out_dir);

  try {
    mlr::train(config, train_samples, dev_samples,
               [&](const mlr::EpochMetrics& metrics, const mlr::TrainedModel& model) {
                 mlr::save_checkpoint(model, checkpoint_path);
                 log << mlr::format_metrics(metrics) << '\n';
                 log.flush();
                 std::cerr << "epoch " << metrics.epoch << " L=" << metrics.loss.L
                           << " dev_EM=" << metrics.dev_em << '\n';
               });
  } catch (const mlr::DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    std::cerr << "last good checkpoint: "
              << (std::filesystem::exists(checkpoint_path) ? checkpoint_path
                                                           : "none")
              << '\n';
    return kExitDiverged;
  } catch (const mlr::ConfigError& e) {
    throw UsageError(e.what());
  }
  std::cout << checkpoint_path << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::vector<std::string> models;
  std::string data;
  std::string report;
  int limit = 0;
  std::uint64_t seed = 0;
};

int run_eval(const EvalArgs& args) {
  std::vector<mlr::TrainedModel> models;
  for (const auto& path : args.models) {
    try {
      models.push_back(mlr::load_checkpoint(path));
    } catch (const mlr::CheckpointError& e) {
      throw UsageError(path + ": " + e.what());
    }
  }
  auto samples = load_data(args.data);
  if (samples.empty()) throw UsageError(args.data + ": no samples");
  if (args.limit > 0 && static_cast<std::size_t>(args.limit) < samples.size()) {
    mlr::Rng rng(args.seed);
    rng.shuffle(samples.begin(), samples.end());
    samples.resize(args.limit);
  }
  std::vector<mlr::NamedModel> named;
  for (const auto& m : models) {
    named.push_back({mlr::variant_name(m.config.variant), &m});
  }
  const auto report = mlr::evaluate(named, samples);
  mlr::write_report(std::cout, report);
  if (!args.report.empty()) {
    std::ofstream out(args.report, std::ios::trunc);
    if (!out) throw UsageError("cannot write " + args.report);
    mlr::write_report(out, report);
  }
  return kExitOk;
}

struct RewriteArgs {
  std::string model;
  std::string input;
};

int run_rewrite(const RewriteArgs& args) {
  mlr::TrainedModel model;
  try {
    model = mlr::load_checkpoint(args.model);
  } catch (const mlr::CheckpointError& e) {
    throw UsageError(args.model + ": " + e.what());
  }
  std::ifstream file;
  std::istream* in = &std::cin;
  if (!args.input.empty() && args.input != "-") {
    file.open(args.input);
    if (!file) throw UsageError("cannot open " + args.input);
    in = &file;
  }
  const bool crf = mlr::uses_crf(model.config.variant);
  int failures = 0;
  int line_no = 0;
  std::string line;
  while (std::getline(*in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    // A trailing target field is ignored.
    const std::string context = line.substr(0, line.find('\t'));
    try {
      const auto result = model.rewrite(mlr::parse_context(context));
      std::string joined;
      for (const auto& tok : result.tokens) {
        if (!joined.empty()) joined += ' ';
        joined += tok;
      }
      std::cout << joined << '\t'
                << (crf ? mlr::label_string(result.labels) : std::string("NA"))
                << '\n';
    } catch (const std::invalid_argument& e) {
      std::cerr << "line " << line_no << ": " << e.what() << '\n';
      ++failures;
    }
  }
  return failures > 0 ? kExitPartial : kExitOk;
}

struct GradCheckArgs {
  std::uint64_t seed = 1;
  std::string fusion = "gold";
  bool corrupt = false;
};

int run_gradcheck(const GradCheckArgs& args) {
  mlr::Fusion fusion;
  try {
    fusion = mlr::parse_fusion(args.fusion);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  mlr::GradCheckOptions options;
  options.seed = args.seed;
  const auto report = mlr::joint_loss_gradcheck(
      args.seed, mlr::Variant::kCrfJoint, fusion, options, args.corrupt ? 2.0 : 1.0);
  std::printf("%-14s %8s %8s %12s %12s %14s %14s\n", "tensor", "coords", "failed",
              "max_rel", "max_abs", "analytic", "numeric");
  for (const auto& e : report.entries) {
    std::printf("%-14s %8zu %8zu %12.3e %12.3e %14.6e %14.6e\n", e.name.c_str(),
                e.coords_checked, e.coords_failed, e.max_rel_error, e.max_abs_error,
                e.analytic_at_worst, e.numeric_at_worst);
  }
  const auto& worst = report.worst();
  std::printf("worst: %s[%zu] rel %.3e (tolerance %.1e)\n", worst.name.c_str(),
              worst.worst_index, worst.max_rel_error, report.tolerance);
  std::printf("%s\n", report.pass ? "PASS" : "FAIL");
  return report.pass ? kExitOk : kExitGradCheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conversational query rewriting with a joint CRF labeler"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic dialogue corpus");
  gen_cmd->add_option("--seed", gen.seed)->required();
  gen_cmd->add_option("--count", gen.count)->required();
  gen_cmd->add_option("--out", gen.out)->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--data", tr.data)->required();
  train_cmd->add_option("--config", tr.config)->required();
  train_cmd->add_option("--variant", tr.variant, "seq2seq, crf_s or crf_j");
  train_cmd->add_option("--out-dir", tr.out_dir)->required();
  train_cmd->add_option("--dev", tr.dev, "Held-out set for per-epoch EM");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate checkpoints");
  eval_cmd->add_option("--model", ev.models)->required();
  eval_cmd->add_option("--data", ev.data)->required();
  eval_cmd->add_option("--report", ev.report);
  eval_cmd->add_option("--limit", ev.limit, "Evaluate a random subset of this size")
      ->check(CLI::NonNegativeNumber);
  eval_cmd->add_option("--seed", ev.seed, "Seed for the --limit subset");

  RewriteArgs rw;
  auto* rewrite_cmd = app.add_subcommand("rewrite", "Rewrite context lines");
  rewrite_cmd->add_option("--model", rw.model)->required();
  rewrite_cmd->add_option("--input", rw.input, "Input file (default: stdin)");

  GradCheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  gc_cmd->add_option("--seed", gc.seed);
  gc_cmd->add_option("--fusion", gc.fusion, "gold, viterbi or marginal");
  gc_cmd->add_flag("--corrupt-gradient", gc.corrupt,
                   "Double the analytic gradient (must fail)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*rewrite_cmd) return run_rewrite(rw);
    if (*gc_cmd) return run_gradcheck(gc);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
