#include "bugloc/eval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <regex>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "bugloc/error.hpp"

namespace bugloc {

namespace {

using json = nlohmann::json;

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ofstream open_out(const char* op, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(std::string(op) + ": cannot open " + path);
  return f;
}

/// 1-based ranks of every relevant path, in ranking order. Validates that
/// the relevant set is non-empty and fully contained in the ranking.
std::vector<std::int64_t> relevant_ranks(const RankedResult& result) {
  if (result.relevant.empty())
    throw ValidationError("reciprocal_rank: bug " + result.bug_id +
                          " has no relevant file");
  std::vector<std::int64_t> ranks;
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < result.ranking.size(); ++i) {
    const std::string& path = result.ranking[i].first;
    if (result.relevant.count(path)) {
      ranks.push_back(static_cast<std::int64_t>(i) + 1);
      seen.insert(path);
    }
  }
  for (const auto& path : result.relevant)
    if (!seen.count(path))
      throw ValidationError("ranking for bug " + result.bug_id +
                            " is missing relevant path " + path);
  return ranks;
}

/// Midranks (1-based, ties averaged) of a then b pooled, plus the size of
/// every tie group for the variance correction.
std::vector<double> pooled_midranks(const std::vector<double>& a,
                                    const std::vector<double>& b,
                                    std::vector<std::int64_t>* tie_sizes) {
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  for (double v : pooled)
    if (!std::isfinite(v))
      throw ValidationError("mann_whitney_u: non-finite sample value");
  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return pooled[x] < pooled[y];
  });
  std::vector<double> ranks(pooled.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && pooled[order[j]] == pooled[order[i]]) ++j;
    const double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = mid;
    if (tie_sizes && j - i > 1)
      tie_sizes->push_back(static_cast<std::int64_t>(j - i));
    i = j;
  }
  return ranks;
}

double u_from_ranks(const std::vector<double>& ranks, std::size_t n) {
  double ra = 0.0;
  for (std::size_t i = 0; i < n; ++i) ra += ranks[i];
  return ra - 0.5 * static_cast<double>(n) * static_cast<double>(n + 1);
}

void check_groups(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty())
    throw ValidationError("mann_whitney_u: both groups must be non-empty");
}

json project_metrics_json(const MetricReport::ProjectMetrics& m) {
  return json{{"mrr", m.mrr}, {"map", m.map}, {"n_bugs", m.n_bugs}};
}

MetricReport::ProjectMetrics project_metrics_from_json(const json& j) {
  MetricReport::ProjectMetrics m;
  m.mrr = j.at("mrr").get<double>();
  m.map = j.at("map").get<double>();
  m.n_bugs = j.at("n_bugs").get<std::int64_t>();
  return m;
}

}  // namespace

std::int64_t first_relevant_rank(const RankedResult& result) {
  return relevant_ranks(result).front();
}

double reciprocal_rank(const RankedResult& result) {
  return 1.0 / static_cast<double>(first_relevant_rank(result));
}

double average_precision(const RankedResult& result) {
  const std::vector<std::int64_t> ranks = relevant_ranks(result);
  double sum = 0.0;
  for (std::size_t i = 0; i < ranks.size(); ++i)
    sum += static_cast<double>(i + 1) / static_cast<double>(ranks[i]);
  return sum / static_cast<double>(ranks.size());
}

double mrr(const std::vector<RankedResult>& results) {
  if (results.empty()) throw ValidationError("mrr: empty result list");
  double sum = 0.0;
  for (const auto& r : results) sum += reciprocal_rank(r);
  return sum / static_cast<double>(results.size());
}

double mean_average_precision(const std::vector<RankedResult>& results) {
  if (results.empty())
    throw ValidationError("mean_average_precision: empty result list");
  double sum = 0.0;
  for (const auto& r : results) sum += average_precision(r);
  return sum / static_cast<double>(results.size());
}

MetricReport metric_report(const std::vector<RankedResult>& results) {
  if (results.empty()) throw ValidationError("metric_report: empty result list");
  std::map<std::string, std::vector<RankedResult>> by_project;
  for (const auto& r : results) {
    const auto slash = r.bug_id.find('/');
    const std::string project =
        slash == std::string::npos ? r.bug_id : r.bug_id.substr(0, slash);
    by_project[project].push_back(r);
  }
  MetricReport report;
  for (const auto& [project, rs] : by_project)
    report.per_project[project] = {mrr(rs), mean_average_precision(rs),
                                   static_cast<std::int64_t>(rs.size())};
  report.overall = {mrr(results), mean_average_precision(results),
                    static_cast<std::int64_t>(results.size())};
  return report;
}

KlResult kl_divergence(const TokenDistribution& p, const TokenDistribution& q) {
  std::vector<std::pair<std::int64_t, std::int64_t>> common;
  double p_sum = 0.0, q_sum = 0.0;
  for (const auto& [token, pc] : p.counts) {
    if (pc <= 0) continue;
    const auto it = q.counts.find(token);
    if (it == q.counts.end() || it->second <= 0) continue;
    common.emplace_back(pc, it->second);
    p_sum += static_cast<double>(pc);
    q_sum += static_cast<double>(it->second);
  }
  if (common.empty())
    throw ValidationError("kl_divergence: distributions share no token");
  double kl = 0.0;
  for (const auto& [pc, qc] : common) {
    const double pp = static_cast<double>(pc) / p_sum;
    const double qq = static_cast<double>(qc) / q_sum;
    kl += pp * std::log(pp / qq);
  }
  if (kl < 0.0) kl = 0.0;  // round-off below zero is noise
  return {kl, static_cast<std::int64_t>(common.size())};
}

DivergenceReport divergence_report(
    const std::map<std::string, TokenDistribution>& per_project,
    const TokenDistribution& reference) {
  DivergenceReport report;
  for (const auto& [project, dist] : per_project) {
    try {
      const KlResult r = kl_divergence(dist, reference);
      report.per_project[project] = {r.kl_nats, r.common_token_count};
    } catch (const ValidationError& e) {
      throw ValidationError("divergence_report: project " + project + ": " +
                            e.what());
    }
  }
  return report;
}

double mann_whitney_exact_p(const std::vector<double>& a,
                            const std::vector<double>& b) {
  check_groups(a, b);
  const std::size_t n = a.size(), m = b.size(), total = n + m;
  if (total > 16)
    throw ValidationError("mann_whitney_exact_p: enumeration needs <= 16 samples");
  const std::vector<double> ranks = pooled_midranks(a, b, nullptr);
  const double mu = 0.5 * static_cast<double>(n) * static_cast<double>(m);
  const double dev = std::abs(u_from_ranks(ranks, n) - mu);
  std::int64_t hits = 0, labelings = 0;
  for (std::uint32_t mask = 0; mask < (std::uint32_t{1} << total); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) != n) continue;
    ++labelings;
    double ra = 0.0;
    for (std::size_t i = 0; i < total; ++i)
      if (mask & (std::uint32_t{1} << i)) ra += ranks[i];
    const double u = ra - 0.5 * static_cast<double>(n) * static_cast<double>(n + 1);
    if (std::abs(u - mu) >= dev - 1e-9) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labelings);
}

double mann_whitney_normal_p(const std::vector<double>& a,
                             const std::vector<double>& b) {
  check_groups(a, b);
  const double n = static_cast<double>(a.size());
  const double m = static_cast<double>(b.size());
  const double total = n + m;
  std::vector<std::int64_t> tie_sizes;
  const std::vector<double> ranks = pooled_midranks(a, b, &tie_sizes);
  const double u = u_from_ranks(ranks, a.size());
  double tie_term = 0.0;
  for (const std::int64_t t : tie_sizes) {
    const double td = static_cast<double>(t);
    tie_term += td * td * td - td;
  }
  const double variance =
      n * m / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));
  if (variance <= 0.0) return 1.0;  // every pooled value tied
  // continuity-corrected two-sided tail of the normal approximation
  const double z =
      std::max(0.0, (std::abs(u - 0.5 * n * m) - 0.5) / std::sqrt(variance));
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

SignificanceResult mann_whitney_u(const std::vector<double>& a,
                                  const std::vector<double>& b,
                                  const std::string& label_a,
                                  const std::string& label_b,
                                  double alpha_corrected) {
  check_groups(a, b);
  if (!(alpha_corrected > 0.0 && alpha_corrected <= 1.0))
    throw ValidationError("mann_whitney_u: alpha must lie in (0, 1]");
  SignificanceResult result;
  result.pair = {label_a, label_b};
  result.u_statistic = u_from_ranks(pooled_midranks(a, b, nullptr), a.size());
  result.exact = a.size() + b.size() <= 16;
  result.p_value =
      result.exact ? mann_whitney_exact_p(a, b) : mann_whitney_normal_p(a, b);
  result.alpha_corrected = alpha_corrected;
  result.significant = result.p_value < alpha_corrected;
  return result;
}

double bonferroni(double alpha, int comparisons) {
  if (comparisons < 1)
    throw ValidationError("bonferroni: comparisons must be >= 1");
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw ValidationError("bonferroni: alpha must lie in (0, 1]");
  return alpha / static_cast<double>(comparisons);
}

double stack_trace_fraction(const std::string& description) {
  static const std::regex frame(
      R"(^\s*at\s+[A-Za-z_$][A-Za-z0-9_$]*(\.[A-Za-z0-9_$<>]+)+\([A-Za-z0-9_$]+\.java:[0-9]+\)\s*$)");
  std::int64_t total = 0, trace = 0;
  std::size_t start = 0;
  while (start <= description.size()) {
    std::size_t end = description.find('\n', start);
    if (end == std::string::npos) end = description.size();
    const std::string line = description.substr(start, end - start);
    total += static_cast<std::int64_t>(line.size());
    const std::size_t first = line.find_first_not_of(" \t");
    const bool caused =
        first != std::string::npos && line.compare(first, 10, "Caused by:") == 0;
    if (caused || std::regex_match(line, frame))
      trace += static_cast<std::int64_t>(line.size());
    start = end + 1;
  }
  return total == 0 ? 0.0 : static_cast<double>(trace) / static_cast<double>(total);
}

DifficultyReport difficulty_report(
    const std::map<std::string, std::vector<RankedResult>>& per_model_rankings,
    const std::map<std::string, BugRecord>& bugs) {
  if (per_model_rankings.empty())
    throw ValidationError("difficulty_report: no models given");
  std::map<std::string, std::vector<std::int64_t>> ranks_by_bug;
  std::set<std::string> reference;
  bool first_model = true;
  for (const auto& [label, results] : per_model_rankings) {
    std::set<std::string> ids;
    for (const auto& r : results) {
      if (!ids.insert(r.bug_id).second)
        throw ValidationError("difficulty_report: model " + label +
                              " ranks bug " + r.bug_id + " twice");
      ranks_by_bug[r.bug_id].push_back(first_relevant_rank(r));
    }
    if (first_model) {
      reference = std::move(ids);
      first_model = false;
    } else if (ids != reference) {
      throw ValidationError("difficulty_report: model " + label +
                            " ranks a different bug set");
    }
  }
  for (const auto& id : reference)
    if (!bugs.count(id))
      throw ValidationError("difficulty_report: no bug record for " + id);

  DifficultyReport report;
  for (const auto& [id, ranks] : ranks_by_bug) {
    const bool easy = std::all_of(ranks.begin(), ranks.end(),
                                  [](std::int64_t r) { return r <= 7; });
    const bool hard = std::all_of(ranks.begin(), ranks.end(),
                                  [](std::int64_t r) { return r > 10; });
    if (easy) report.easy.insert(id);
    if (hard) report.hard.insert(id);
  }

  const auto group_stats = [&](const std::set<std::string>& group,
                               std::int64_t& median_out, double& fraction_out) {
    if (group.empty()) return;  // zero statistics stand
    std::vector<std::int64_t> lengths;
    double fraction_sum = 0.0;
    for (const auto& id : group) {
      const BugRecord& bug = bugs.at(id);
      lengths.push_back(static_cast<std::int64_t>(bug.description.size()));
      fraction_sum += stack_trace_fraction(bug.description);
    }
    std::sort(lengths.begin(), lengths.end());
    const std::size_t n = lengths.size();
    median_out = n % 2 == 1 ? lengths[n / 2]
                            : (lengths[n / 2 - 1] + lengths[n / 2]) / 2;
    fraction_out = fraction_sum / static_cast<double>(n);
  };
  group_stats(report.easy, report.easy_median_desc_len,
              report.easy_stack_fraction);
  group_stats(report.hard, report.hard_median_desc_len,
              report.hard_stack_fraction);
  return report;
}

void save_metric_report(const MetricReport& report, const std::string& path) {
  json per_project = json::object();
  for (const auto& [project, m] : report.per_project)
    per_project[project] = project_metrics_json(m);
  const json j{{"per_project", per_project},
               {"overall", project_metrics_json(report.overall)}};
  auto f = open_out("save_metric_report", path);
  f << j.dump(2) << '\n';
}

MetricReport load_metric_report(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_metric_report: cannot open " + path);
  json j;
  try {
    f >> j;
    MetricReport report;
    for (const auto& [project, m] : j.at("per_project").items())
      report.per_project[project] = project_metrics_from_json(m);
    report.overall = project_metrics_from_json(j.at("overall"));
    return report;
  } catch (const json::exception& e) {
    throw ValidationError("load_metric_report: " + path + ": " + e.what());
  }
}

void save_metric_report_csv(const MetricReport& report,
                            const std::string& path) {
  auto f = open_out("save_metric_report_csv", path);
  f << "project,mrr,map,n_bugs\n";
  for (const auto& [project, m] : report.per_project)
    f << project << ',' << fmt_double(m.mrr) << ',' << fmt_double(m.map) << ','
      << m.n_bugs << '\n';
  f << "overall," << fmt_double(report.overall.mrr) << ','
    << fmt_double(report.overall.map) << ',' << report.overall.n_bugs << '\n';
}

void save_significance_results(const std::vector<SignificanceResult>& results,
                               const std::string& path) {
  json arr = json::array();
  for (const auto& r : results)
    arr.push_back(json{{"pair", {r.pair.first, r.pair.second}},
                       {"u_statistic", r.u_statistic},
                       {"p_value", r.p_value},
                       {"alpha_corrected", r.alpha_corrected},
                       {"significant", r.significant},
                       {"exact", r.exact}});
  auto f = open_out("save_significance_results", path);
  f << arr.dump(2) << '\n';
}

void save_significance_results_csv(
    const std::vector<SignificanceResult>& results, const std::string& path) {
  auto f = open_out("save_significance_results_csv", path);
  f << "label_a,label_b,u_statistic,p_value,alpha_corrected,significant,exact\n";
  for (const auto& r : results)
    f << r.pair.first << ',' << r.pair.second << ','
      << fmt_double(r.u_statistic) << ',' << fmt_double(r.p_value) << ','
      << fmt_double(r.alpha_corrected) << ','
      << (r.significant ? "true" : "false") << ','
      << (r.exact ? "true" : "false") << '\n';
}

void save_divergence_report(const DivergenceReport& report,
                            const std::string& path) {
  json per_project = json::object();
  for (const auto& [project, e] : report.per_project)
    per_project[project] = json{{"kl_nats", e.kl_nats},
                                {"common_token_count", e.common_token_count}};
  const json j{{"per_project", per_project}};
  auto f = open_out("save_divergence_report", path);
  f << j.dump(2) << '\n';
}

void save_divergence_report_csv(const DivergenceReport& report,
                                const std::string& path) {
  auto f = open_out("save_divergence_report_csv", path);
  f << "project,kl_nats,common_token_count\n";
  for (const auto& [project, e] : report.per_project)
    f << project << ',' << fmt_double(e.kl_nats) << ',' << e.common_token_count
      << '\n';
}

void save_difficulty_report(const DifficultyReport& report,
                            const std::string& path) {
  const json j{{"easy", report.easy},
               {"hard", report.hard},
               {"easy_median_desc_len", report.easy_median_desc_len},
               {"hard_median_desc_len", report.hard_median_desc_len},
               {"easy_stack_fraction", report.easy_stack_fraction},
               {"hard_stack_fraction", report.hard_stack_fraction}};
  auto f = open_out("save_difficulty_report", path);
  f << j.dump(2) << '\n';
}

}  // namespace bugloc
