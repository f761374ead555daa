#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace bugloc {

/// A mined issue-tracker bug report.
struct BugRecord {
  std::string project_id;
  std::string bug_id;  // tracker key, e.g. "PROJ-123" or "#42"
  std::string title;
  std::string description;
  std::int64_t created_at = 0;  // seconds since the UTC epoch
  enum class Status { fixed, other } status = Status::other;
};

struct ChangedFile {
  std::string path;
  std::optional<std::string> pre_content;   // absent for file additions
  std::optional<std::string> post_content;  // absent for deletions
};

/// The natural-language side of an encoded pair: title plus description.
std::string bug_query_text(const BugRecord& bug);

struct CommitMeta {
  std::string commit_id;
  std::string message;
  std::vector<ChangedFile> changed_files;
  std::int64_t timestamp = 0;
};

/// A bug report linked to the commit that fixed it.
struct FixLink {
  BugRecord bug;
  CommitMeta commit;
  // character offsets [start, end) of the bug_id occurrence in the message
  std::pair<std::size_t, std::size_t> matched_span{0, 0};
  // the manual pull-request-attachment check is recorded, never automated
  bool attachment_verified = false;
};

/// One (bug report, candidate file) training pair.
struct LocalizationExample {
  BugRecord bug;
  std::string file_path;
  std::string file_content;  // pre-fix version
  int label = 0;             // 1 = changed by the fix, 0 = sampled negative
  // post-fix version when known; feeds the QA objective's diff targets
  std::optional<std::string> post_content;
};

struct DatasetManifest {
  std::string name;
  std::vector<std::string> projects;  // sorted, unique
  enum class Split { train, test } split = Split::train;
  std::vector<LocalizationExample> records;
  std::uint64_t seed = 0;
};

enum class IssueKind { jira, github };

/// Parse a line-delimited JSON issue export. JIRA lines carry
/// {project, key, title, description, status, created}; GitHub lines carry
/// {repo, number, title, body, state, created_at} and map to bug_id
/// "#<number>" with closed issues treated as fixed.
std::vector<BugRecord> parse_issue_export(const std::string& document,
                                          IssueKind kind);

/// Parse a line-delimited JSON commit export:
/// {sha, message, timestamp, files: [{path, pre, post}]}.
std::vector<CommitMeta> parse_commit_export(const std::string& document);

/// Parse "2024-05-17T13:45:09Z"-style UTC timestamps (optional fractional
/// seconds, optional +hh:mm offset) into epoch seconds.
std::int64_t parse_timestamp(const std::string& iso8601);

/// One FixLink per commit whose message contains bug.bug_id as a whole
/// token (delimited by non-identifier characters or string boundaries;
/// identifier characters are letters, digits and hyphens). Matching is
/// case-sensitive; only the first occurrence per message is recorded.
std::vector<FixLink> link_bug_to_commits(const BugRecord& bug,
                                         const std::vector<CommitMeta>& commits);

/// Drop links whose commit changed more than 10 files, then drop non-.java
/// files, then drop links left with no files.
std::vector<FixLink> filter_links(std::vector<FixLink> links);

/// Drop projects with fewer than 10 linked bug reports.
std::map<std::string, std::vector<BugRecord>> filter_projects(
    std::map<std::string, std::vector<BugRecord>> projects);

struct BuildResult {
  std::vector<LocalizationExample> examples;
  /// links whose commit offered fewer unchanged candidate files than the
  /// requested negatives (including none at all)
  int warning_count = 0;
};

/// One positive per changed file with pre-fix content plus
/// negatives_per_positive seeded negatives per positive, drawn without
/// replacement from the commit's unchanged candidate files.
BuildResult build_examples(
    const std::vector<FixLink>& links,
    const std::map<std::string, std::vector<std::pair<std::string, std::string>>>&
        candidate_files,
    int negatives_per_positive, std::uint64_t seed);

/// Chronological split by bug: the most recent test_fraction of bugs form
/// the test split; a bug's examples never straddle splits.
std::pair<DatasetManifest, DatasetManifest> split_dataset(
    const std::vector<LocalizationExample>& examples, double test_fraction);

/// Manifest file: one JSON header line {name, split, seed, count} followed
/// by one JSON line per example; UTF-8, LF line endings.
void save_manifest(const DatasetManifest& manifest, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

}  // namespace bugloc
