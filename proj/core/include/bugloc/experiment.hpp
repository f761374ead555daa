#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bugloc/corpus.hpp"
#include "bugloc/encoder.hpp"
#include "bugloc/eval.hpp"
#include "bugloc/localizer.hpp"
#include "bugloc/pretrain.hpp"

namespace bugloc {

/// Declarative description of one reproducible experiment: a stable id, a
/// global seed, an artifact directory and one config block per stage.
/// Stage-level seeds are never written in the file; each stage derives its
/// own from the global seed under a fixed label and echoes the effective
/// value into its run record.
struct ExperimentManifest {
  std::string experiment_id;
  std::uint64_t seed = 0;
  std::string artifact_dir;

  struct MineConfig {
    std::string issues_path;
    IssueKind issue_kind = IssueKind::jira;
    std::string commits_path;
  } mine;

  struct BuildConfig {
    int negatives_per_positive = 4;
    double test_fraction = 0.2;
    // evaluation candidates per bug, relevant files always included
    int candidate_pool = 10;
  } build;

  struct VocabConfig {
    int size = 512;
  } vocab;

  PretrainConfig pretrain;  // seed field is derived, not read from the file
  EncoderConfig encoder;    // vocab_size comes from the trained vocabulary

  struct TrainHeadConfig {
    HeadConfig head;  // seed field is derived, not read from the file
    int epochs = 10;
    int batch_size = 32;
    double learning_rate = 1e-3;
  } train_head;
};

/// Manifest file: a single JSON document. Unknown keys are rejected so
/// config typos fail loudly instead of silently using defaults.
ExperimentManifest load_experiment_manifest(const std::string& path);
void save_experiment_manifest(const ExperimentManifest& manifest,
                              const std::string& path);

/// The seven stages in dependency order.
const std::vector<std::string>& stage_names();

struct StageOutcome {
  std::string stage;
  bool skipped = false;  // completed earlier with identical config + inputs
  double wall_seconds = 0.0;
};

/// Execute one stage, or every stage in order when only_stage is empty.
/// Each stage writes its outputs under
/// <artifact_dir>/<experiment_id>/<stage>/<content-hash>.<ext> plus a
/// run.json recording the effective config, input hashes and outputs.
/// A stage is skipped when that record still matches; artifacts whose
/// bytes no longer match their recorded hash raise a stale-artifact error,
/// and absent inputs raise an error naming the stage and path.
std::vector<StageOutcome> run_experiment(const ExperimentManifest& manifest,
                                         const std::string& only_stage = "");

/// Path of a completed stage's output, resolved and verified through the
/// stage's run record.
std::string artifact_path(const ExperimentManifest& manifest,
                          const std::string& stage,
                          const std::string& logical_name);

/// Pairwise Mann-Whitney comparisons over a shared test split, with
/// bonferroni(alpha, #pairs) applied. metric is "mrr" or "map". Samples
/// are per-project metric values by default, or per-bug reciprocal ranks /
/// average precisions when per_bug is set. Every experiment must rank
/// exactly the same bugs.
std::vector<SignificanceResult> compare_experiments(
    const std::vector<ExperimentManifest>& manifests, const std::string& metric,
    bool per_bug = false, double alpha = 0.05);

}  // namespace bugloc
