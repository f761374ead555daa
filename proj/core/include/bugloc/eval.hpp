#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "bugloc/corpus.hpp"
#include "bugloc/localizer.hpp"
#include "bugloc/tokenize.hpp"

namespace bugloc {

/// Ranking quality broken out per project, plus a micro-average over every
/// bug (so `overall` is consistent with the per-project rows through the
/// bug counts).
struct MetricReport {
  struct ProjectMetrics {
    double mrr = 0.0;
    double map = 0.0;
    std::int64_t n_bugs = 0;
    bool operator==(const ProjectMetrics&) const = default;
  };
  std::map<std::string, ProjectMetrics> per_project;
  ProjectMetrics overall;
  bool operator==(const MetricReport&) const = default;
};

/// One pairwise Mann-Whitney comparison. `significant` is exactly
/// `p_value < alpha_corrected`; `exact` records whether the p-value came
/// from full enumeration or the normal approximation.
struct SignificanceResult {
  std::pair<std::string, std::string> pair;
  double u_statistic = 0.0;
  double p_value = 1.0;
  double alpha_corrected = 0.05;
  bool significant = false;
  bool exact = false;
};

/// Token-distribution divergence of each project against a reference
/// corpus, measured on the common support.
struct DivergenceReport {
  struct Entry {
    double kl_nats = 0.0;
    std::int64_t common_token_count = 0;
  };
  std::map<std::string, Entry> per_project;
};

/// Bugs every model localizes near the top versus bugs every model misses,
/// with the report-text statistics that separate the two groups. Empty
/// groups report zero statistics.
struct DifficultyReport {
  std::set<std::string> easy;  // first relevant at rank <= 7 for all models
  std::set<std::string> hard;  // first relevant after rank 10 for all models
  std::int64_t easy_median_desc_len = 0;
  std::int64_t hard_median_desc_len = 0;
  double easy_stack_fraction = 0.0;
  double hard_stack_fraction = 0.0;
};

/// 1-based rank of the first relevant path. Requires a non-empty relevant
/// set and that every relevant path appears in the ranking.
std::int64_t first_relevant_rank(const RankedResult& result);

/// 1 / first_relevant_rank.
double reciprocal_rank(const RankedResult& result);

/// Mean over relevant files of (relevant found at or above its rank / its
/// rank), i.e. average precision of one ranking.
double average_precision(const RankedResult& result);

/// Mean reciprocal rank / mean average precision over a non-empty batch.
double mrr(const std::vector<RankedResult>& results);
double mean_average_precision(const std::vector<RankedResult>& results);

/// Group results by the project prefix of bug_id ("project/bug") and build
/// the per-project table plus the micro-averaged overall row.
MetricReport metric_report(const std::vector<RankedResult>& results);

struct KlResult {
  double kl_nats = 0.0;
  std::int64_t common_token_count = 0;
};

/// KL(p || q) in nats after restricting both distributions to their common
/// tokens and renormalizing each side to sum 1. p is the evaluation
/// project, q the pre-training corpus. Disjoint supports are an error.
KlResult kl_divergence(const TokenDistribution& p, const TokenDistribution& q);

/// kl_divergence of every project distribution against the reference.
DivergenceReport divergence_report(
    const std::map<std::string, TokenDistribution>& per_project,
    const TokenDistribution& reference);

/// Two-sided Mann-Whitney U test with midrank ties. The p-value is exact
/// (enumeration over all labelings) when |a| + |b| <= 16, otherwise a
/// normal approximation with tie and continuity corrections.
SignificanceResult mann_whitney_u(const std::vector<double>& a,
                                  const std::vector<double>& b,
                                  const std::string& label_a = "a",
                                  const std::string& label_b = "b",
                                  double alpha_corrected = 0.05);

/// The two p-value backends, exposed so they can be compared directly.
/// The exact path enumerates all C(|a|+|b|, |a|) labelings and requires
/// |a| + |b| <= 16.
double mann_whitney_exact_p(const std::vector<double>& a,
                            const std::vector<double>& b);
double mann_whitney_normal_p(const std::vector<double>& a,
                             const std::vector<double>& b);

/// alpha / comparisons. comparisons must be >= 1, alpha in (0, 1].
double bonferroni(double alpha, int comparisons);

/// Fraction of non-newline characters that sit on Java stack-trace lines:
/// frames shaped `at pkg.Class.method(File.java:123)` plus `Caused by:`
/// lines. Empty text reports 0.
double stack_trace_fraction(const std::string& description);

/// Partition bugs into the easy/hard groups across models and attach the
/// description statistics. Every model must rank exactly the same bug ids,
/// and `bugs` must carry a record for each id (keyed as the rankings key
/// them). Medians of even-sized groups round down.
DifficultyReport difficulty_report(
    const std::map<std::string, std::vector<RankedResult>>& per_model_rankings,
    const std::map<std::string, BugRecord>& bugs);

/// Report files: a JSON document per report, plus comma-separated flat
/// exports of the tabular ones for plotting. All writers are
/// byte-deterministic for equal inputs.
void save_metric_report(const MetricReport& report, const std::string& path);
MetricReport load_metric_report(const std::string& path);
void save_metric_report_csv(const MetricReport& report,
                            const std::string& path);
void save_significance_results(const std::vector<SignificanceResult>& results,
                               const std::string& path);
void save_significance_results_csv(
    const std::vector<SignificanceResult>& results, const std::string& path);
void save_divergence_report(const DivergenceReport& report,
                            const std::string& path);
void save_divergence_report_csv(const DivergenceReport& report,
                                const std::string& path);
void save_difficulty_report(const DifficultyReport& report,
                            const std::string& path);

}  // namespace bugloc
