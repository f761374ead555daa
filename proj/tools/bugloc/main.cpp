// Command line front end for the experiment pipeline. Every subcommand loads
// a manifest, optionally overrides its seed or artifact directory, and runs
// one stage (or all of them, or a cross-experiment comparison).

#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "bugloc/error.hpp"
#include "bugloc/eval.hpp"
#include "bugloc/experiment.hpp"

namespace {

struct StageCommand {
  CLI::App* app;
  std::string stage;  // empty means every stage
};

void print_outcomes(const std::vector<bugloc::StageOutcome>& outcomes) {
  for (const bugloc::StageOutcome& o : outcomes) {
    if (o.skipped)
      std::printf("%-10s up to date\n", o.stage.c_str());
    else
      std::printf("%-10s done in %.2fs\n", o.stage.c_str(), o.wall_seconds);
  }
}

void print_significance(const std::vector<bugloc::SignificanceResult>& rows) {
  std::printf("%-28s %10s %12s %12s %6s %7s\n", "pair", "U", "p",
              "alpha_corr", "sig", "method");
  for (const bugloc::SignificanceResult& r : rows) {
    const std::string pair = r.pair.first + " vs " + r.pair.second;
    std::printf("%-28s %10.4g %12.6g %12.6g %6s %7s\n", pair.c_str(),
                r.u_statistic, r.p_value, r.alpha_corrected,
                r.significant ? "yes" : "no", r.exact ? "exact" : "normal");
  }
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"manifest-driven bug localization experiments"};
  app.require_subcommand(1);

  std::string manifest_path;
  std::string artifact_dir;
  std::string run_stage;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--manifest", manifest_path, "experiment manifest file")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the manifest seed");
    sub->add_option("--artifact-dir", artifact_dir,
                    "override the manifest artifact directory");
  };

  std::vector<StageCommand> stage_commands;
  const std::pair<const char*, const char*> kStages[] = {
      {"mine", "mine"},           {"build", "build"},
      {"vocab", "vocab"},         {"pretrain", "pretrain"},
      {"train-head", "train_head"}, {"evaluate", "evaluate"},
      {"analyze", "analyze"}};
  for (const auto& [name, stage] : kStages) {
    CLI::App* sub =
        app.add_subcommand(name, std::string("run the ") + stage + " stage");
    add_common(sub);
    stage_commands.push_back({sub, stage});
  }
  CLI::App* run = app.add_subcommand("run", "run every stage in order");
  add_common(run);
  run->add_option("--stage", run_stage, "run only the named stage");

  std::vector<std::string> compare_paths;
  std::string metric = "mrr";
  std::string table_out;
  double alpha = 0.05;
  bool per_bug = false;
  CLI::App* compare = app.add_subcommand(
      "compare", "pairwise significance tests across experiments");
  compare->add_option("--manifest", compare_paths,
                      "manifest of a completed experiment (repeat per run)")
      ->required()
      ->check(CLI::ExistingFile);
  compare->add_option("--metric", metric, "ranking metric to test")
      ->check(CLI::IsMember({"mrr", "map"}));
  compare->add_flag("--per-bug", per_bug,
                    "test per-bug samples instead of per-project averages");
  compare->add_option("--alpha", alpha, "family-wise significance level");
  compare->add_option("--out", table_out,
                      "also write the table (.json or .csv by extension)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // bad flags are validation errors
  }

  try {
    if (compare->parsed()) {
      std::vector<bugloc::ExperimentManifest> manifests;
      for (const std::string& path : compare_paths)
        manifests.push_back(bugloc::load_experiment_manifest(path));
      const std::vector<bugloc::SignificanceResult> rows =
          bugloc::compare_experiments(manifests, metric, per_bug, alpha);
      print_significance(rows);
      if (!table_out.empty()) {
        if (ends_with(table_out, ".csv"))
          bugloc::save_significance_results_csv(rows, table_out);
        else
          bugloc::save_significance_results(rows, table_out);
      }
      return 0;
    }

    bugloc::ExperimentManifest manifest =
        bugloc::load_experiment_manifest(manifest_path);
    std::string only = run_stage;
    for (char& c : only)  // accept the subcommand spelling train-head too
      if (c == '-') c = '_';
    CLI::App* parsed = nullptr;
    for (const StageCommand& cmd : stage_commands)
      if (cmd.app->parsed()) {
        parsed = cmd.app;
        only = cmd.stage;
      }
    if (parsed == nullptr) parsed = run;
    if (parsed->count("--seed") > 0) manifest.seed = seed;
    if (!artifact_dir.empty()) manifest.artifact_dir = artifact_dir;
    print_outcomes(bugloc::run_experiment(manifest, only));
    return 0;
  } catch (const bugloc::ValidationError& e) {
    std::fprintf(stderr, "bugloc: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "bugloc: %s\n", e.what());
    return 2;
  }
}
