#include "bugloc/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bugloc/error.hpp"
#include "bugloc/rng.hpp"

namespace bugloc {

namespace {

using nlohmann::json;

std::vector<std::string> split_lines(const std::string& document) {
  std::vector<std::string> lines;
  std::string line;
  std::istringstream in(document);
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") != std::string::npos)
      lines.push_back(line);
  }
  return lines;
}

json parse_json_line(const std::string& line, const char* what,
                     std::size_t index) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw ValidationError(std::string(what) + " record " +
                          std::to_string(index) + ": " + e.what());
  }
}

const json& require_field(const json& j, const char* key, const char* what,
                          std::size_t index) {
  const auto it = j.find(key);
  if (it == j.end())
    throw ValidationError(std::string(what) + " record " +
                          std::to_string(index) + ": missing field '" + key +
                          "'");
  return *it;
}

std::string lower(std::string s) {
  for (char& c : s)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool is_ident_char(unsigned char c) {
  return std::isalnum(c) != 0 || c == '-';
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// days since 1970-01-01 for a proleptic Gregorian date
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

json bug_to_json(const BugRecord& bug) {
  return json{{"project", bug.project_id},
              {"key", bug.bug_id},
              {"title", bug.title},
              {"description", bug.description},
              {"created", bug.created_at},
              {"status",
               bug.status == BugRecord::Status::fixed ? "fixed" : "other"}};
}

BugRecord bug_from_json(const json& j, const char* what, std::size_t index) {
  BugRecord bug;
  bug.project_id = require_field(j, "project", what, index).get<std::string>();
  bug.bug_id = require_field(j, "key", what, index).get<std::string>();
  bug.title = require_field(j, "title", what, index).get<std::string>();
  bug.description =
      require_field(j, "description", what, index).get<std::string>();
  bug.created_at = require_field(j, "created", what, index).get<std::int64_t>();
  bug.status = require_field(j, "status", what, index).get<std::string>() ==
                       "fixed"
                   ? BugRecord::Status::fixed
                   : BugRecord::Status::other;
  return bug;
}

}  // namespace

std::string bug_query_text(const BugRecord& bug) {
  if (bug.description.empty()) return bug.title;
  return bug.title + "\n" + bug.description;
}

std::int64_t parse_timestamp(const std::string& iso8601) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  int consumed = 0;
  if (std::sscanf(iso8601.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d%n", &y, &mo, &d,
                  &h, &mi, &s, &consumed) != 6)
    throw ValidationError("malformed timestamp: " + iso8601);
  if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || s > 60)
    throw ValidationError("timestamp out of range: " + iso8601);
  std::size_t pos = static_cast<std::size_t>(consumed);
  // optional fractional seconds
  if (pos < iso8601.size() && iso8601[pos] == '.') {
    ++pos;
    while (pos < iso8601.size() &&
           std::isdigit(static_cast<unsigned char>(iso8601[pos])))
      ++pos;
  }
  std::int64_t offset = 0;
  if (pos < iso8601.size()) {
    const char c = iso8601[pos];
    if (c == 'Z') {
      ++pos;
    } else if (c == '+' || c == '-') {
      int oh = 0, om = 0;
      int n = 0;
      if (std::sscanf(iso8601.c_str() + pos + 1, "%2d:%2d%n", &oh, &om, &n) ==
              2 ||
          std::sscanf(iso8601.c_str() + pos + 1, "%2d%2d%n", &oh, &om, &n) ==
              2) {
        offset = (oh * 3600 + om * 60) * (c == '-' ? -1 : 1);
        pos += 1 + static_cast<std::size_t>(n);
      } else {
        throw ValidationError("malformed timestamp offset: " + iso8601);
      }
    }
  }
  if (pos != iso8601.size())
    throw ValidationError("trailing characters in timestamp: " + iso8601);
  return days_from_civil(y, static_cast<unsigned>(mo),
                         static_cast<unsigned>(d)) *
             86400 +
         h * 3600 + mi * 60 + s - offset;
}

std::vector<BugRecord> parse_issue_export(const std::string& document,
                                          IssueKind kind) {
  std::vector<BugRecord> bugs;
  std::set<std::pair<std::string, std::string>> seen;
  const auto lines = split_lines(document);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const json j = parse_json_line(lines[i], "issue", i);
    BugRecord bug;
    try {
      if (kind == IssueKind::jira) {
        bug.project_id = require_field(j, "project", "issue", i);
        bug.bug_id = require_field(j, "key", "issue", i);
        bug.title = require_field(j, "title", "issue", i);
        bug.description = require_field(j, "description", "issue", i);
        bug.status =
            lower(require_field(j, "status", "issue", i)) == "fixed"
                ? BugRecord::Status::fixed
                : BugRecord::Status::other;
        bug.created_at =
            parse_timestamp(require_field(j, "created", "issue", i));
      } else {
        bug.project_id = require_field(j, "repo", "issue", i);
        bug.bug_id =
            "#" + std::to_string(
                      require_field(j, "number", "issue", i).get<std::int64_t>());
        bug.title = require_field(j, "title", "issue", i);
        bug.description = require_field(j, "body", "issue", i);
        bug.status = lower(require_field(j, "state", "issue", i)) == "closed"
                         ? BugRecord::Status::fixed
                         : BugRecord::Status::other;
        bug.created_at =
            parse_timestamp(require_field(j, "created_at", "issue", i));
      }
    } catch (const json::exception& e) {
      throw ValidationError("issue record " + std::to_string(i) + ": " +
                            e.what());
    }
    if (bug.bug_id.empty() || bug.bug_id == "#")
      throw ValidationError("issue record " + std::to_string(i) +
                            ": empty bug id");
    if (!seen.emplace(bug.project_id, bug.bug_id).second)
      throw ValidationError("issue record " + std::to_string(i) +
                            ": duplicate bug id " + bug.bug_id +
                            " in project " + bug.project_id);
    bugs.push_back(std::move(bug));
  }
  return bugs;
}

std::vector<CommitMeta> parse_commit_export(const std::string& document) {
  std::vector<CommitMeta> commits;
  const auto lines = split_lines(document);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const json j = parse_json_line(lines[i], "commit", i);
    CommitMeta commit;
    try {
      commit.commit_id = require_field(j, "sha", "commit", i);
      commit.message = require_field(j, "message", "commit", i);
      commit.timestamp =
          parse_timestamp(require_field(j, "timestamp", "commit", i));
      for (const json& f : require_field(j, "files", "commit", i)) {
        ChangedFile file;
        file.path = require_field(f, "path", "commit", i);
        const json& pre = require_field(f, "pre", "commit", i);
        const json& post = require_field(f, "post", "commit", i);
        if (!pre.is_null()) file.pre_content = pre.get<std::string>();
        if (!post.is_null()) file.post_content = post.get<std::string>();
        commit.changed_files.push_back(std::move(file));
      }
    } catch (const json::exception& e) {
      throw ValidationError("commit record " + std::to_string(i) + ": " +
                            e.what());
    }
    if (commit.changed_files.empty())
      throw ValidationError("commit record " + std::to_string(i) +
                            ": no changed files");
    commits.push_back(std::move(commit));
  }
  return commits;
}

std::vector<FixLink> link_bug_to_commits(
    const BugRecord& bug, const std::vector<CommitMeta>& commits) {
  std::vector<FixLink> links;
  const std::string& id = bug.bug_id;
  if (id.empty()) return links;
  for (const CommitMeta& commit : commits) {
    const std::string& msg = commit.message;
    for (std::size_t pos = msg.find(id); pos != std::string::npos;
         pos = msg.find(id, pos + 1)) {
      const std::size_t end = pos + id.size();
      const bool left_ok =
          pos == 0 ||
          !is_ident_char(static_cast<unsigned char>(msg[pos - 1]));
      const bool right_ok =
          end == msg.size() ||
          !is_ident_char(static_cast<unsigned char>(msg[end]));
      if (left_ok && right_ok) {
        links.push_back(FixLink{bug, commit, {pos, end}, false});
        break;  // first occurrence only; one link per commit
      }
    }
  }
  return links;
}

std::vector<FixLink> filter_links(std::vector<FixLink> links) {
  std::vector<FixLink> kept;
  for (FixLink& link : links) {
    if (link.commit.changed_files.size() > 10) continue;
    auto& files = link.commit.changed_files;
    files.erase(std::remove_if(files.begin(), files.end(),
                               [](const ChangedFile& f) {
                                 return !ends_with(f.path, ".java");
                               }),
                files.end());
    if (files.empty()) continue;
    kept.push_back(std::move(link));
  }
  return kept;
}

std::map<std::string, std::vector<BugRecord>> filter_projects(
    std::map<std::string, std::vector<BugRecord>> projects) {
  for (auto it = projects.begin(); it != projects.end();) {
    if (it->second.size() < 10)
      it = projects.erase(it);
    else
      ++it;
  }
  return projects;
}

BuildResult build_examples(
    const std::vector<FixLink>& links,
    const std::map<std::string,
                   std::vector<std::pair<std::string, std::string>>>&
        candidate_files,
    int negatives_per_positive, std::uint64_t seed) {
  if (negatives_per_positive < 1)
    throw ValidationError("build_examples: negatives_per_positive must be >= 1");
  BuildResult result;
  for (const FixLink& link : links) {
    if (link.bug.status != BugRecord::Status::fixed)
      throw ValidationError("build_examples: bug " + link.bug.bug_id +
                            " is not fixed");
    std::set<std::string> changed_paths;
    std::size_t n_pos = 0;
    for (const ChangedFile& f : link.commit.changed_files) {
      changed_paths.insert(f.path);
      if (!f.pre_content || f.pre_content->empty()) continue;  // additions
      LocalizationExample ex;
      ex.bug = link.bug;
      ex.file_path = f.path;
      ex.file_content = *f.pre_content;
      ex.label = 1;
      ex.post_content = f.post_content;
      result.examples.push_back(std::move(ex));
      ++n_pos;
    }

    std::vector<std::pair<std::string, std::string>> pool;
    const auto it = candidate_files.find(link.commit.commit_id);
    if (it != candidate_files.end())
      for (const auto& [path, content] : it->second)
        if (!changed_paths.count(path) && !content.empty())
          pool.emplace_back(path, content);
    std::sort(pool.begin(), pool.end());

    const std::size_t want =
        static_cast<std::size_t>(negatives_per_positive) * n_pos;
    if (pool.size() < want) ++result.warning_count;
    const std::size_t take = std::min(want, pool.size());
    Rng rng(derive_seed(seed, link.bug.project_id + "/" + link.bug.bug_id +
                                  "@" + link.commit.commit_id));
    for (const std::size_t pick :
         rng.sample_without_replacement(pool.size(), take)) {
      LocalizationExample ex;
      ex.bug = link.bug;
      ex.file_path = pool[pick].first;
      ex.file_content = pool[pick].second;
      ex.label = 0;
      result.examples.push_back(std::move(ex));
    }
  }
  return result;
}

std::pair<DatasetManifest, DatasetManifest> split_dataset(
    const std::vector<LocalizationExample>& examples, double test_fraction) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ValidationError("split_dataset: test_fraction must be in (0,1)");
  struct Group {
    std::int64_t created_at;
    std::string project_id;
    std::string bug_id;
  };
  std::map<std::pair<std::string, std::string>, Group> groups;
  for (const auto& ex : examples)
    groups.emplace(std::make_pair(ex.bug.project_id, ex.bug.bug_id),
                   Group{ex.bug.created_at, ex.bug.project_id, ex.bug.bug_id});
  if (groups.size() < 2)
    throw ValidationError("split_dataset: need at least 2 distinct bugs");

  std::vector<Group> ordered;
  ordered.reserve(groups.size());
  for (const auto& [key, g] : groups) ordered.push_back(g);
  std::sort(ordered.begin(), ordered.end(), [](const Group& a, const Group& b) {
    if (a.created_at != b.created_at) return a.created_at < b.created_at;
    if (a.project_id != b.project_id) return a.project_id < b.project_id;
    return a.bug_id < b.bug_id;
  });

  const std::int64_t n = static_cast<std::int64_t>(ordered.size());
  const std::int64_t n_test = std::clamp(
      static_cast<std::int64_t>(std::llround(n * test_fraction)),
      static_cast<std::int64_t>(1), n - 1);

  std::set<std::pair<std::string, std::string>> test_keys;
  for (std::int64_t i = n - n_test; i < n; ++i)
    test_keys.emplace(ordered[static_cast<std::size_t>(i)].project_id,
                      ordered[static_cast<std::size_t>(i)].bug_id);

  DatasetManifest train, test;
  train.split = DatasetManifest::Split::train;
  test.split = DatasetManifest::Split::test;
  std::set<std::string> train_projects, test_projects;
  for (const auto& ex : examples) {
    const bool in_test =
        test_keys.count({ex.bug.project_id, ex.bug.bug_id}) > 0;
    (in_test ? test : train).records.push_back(ex);
    (in_test ? test_projects : train_projects).insert(ex.bug.project_id);
  }
  train.projects.assign(train_projects.begin(), train_projects.end());
  test.projects.assign(test_projects.begin(), test_projects.end());
  return {std::move(train), std::move(test)};
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write manifest: " + path);
  const json header{
      {"name", manifest.name},
      {"split",
       manifest.split == DatasetManifest::Split::train ? "train" : "test"},
      {"seed", manifest.seed},
      {"count", manifest.records.size()}};
  out << header.dump() << '\n';
  for (const auto& ex : manifest.records) {
    json j{{"bug", bug_to_json(ex.bug)},
           {"path", ex.file_path},
           {"content", ex.file_content},
           {"label", ex.label}};
    if (ex.post_content) j["post"] = *ex.post_content;
    out << j.dump() << '\n';
  }
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read manifest: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw ValidationError("manifest is empty: " + path);
  const json header = parse_json_line(line, "manifest header", 0);
  DatasetManifest manifest;
  try {
    manifest.name = require_field(header, "name", "manifest header", 0);
    manifest.seed =
        require_field(header, "seed", "manifest header", 0).get<std::uint64_t>();
    manifest.split =
        require_field(header, "split", "manifest header", 0) == "train"
            ? DatasetManifest::Split::train
            : DatasetManifest::Split::test;
  } catch (const json::exception& e) {
    throw ValidationError("manifest header: " + std::string(e.what()));
  }
  const std::size_t count =
      require_field(header, "count", "manifest header", 0).get<std::size_t>();

  std::set<std::string> projects;
  for (std::size_t i = 0; std::getline(in, line); ++i) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json j = parse_json_line(line, "manifest", i + 1);
    LocalizationExample ex;
    try {
      ex.bug = bug_from_json(require_field(j, "bug", "manifest", i + 1),
                             "manifest", i + 1);
      ex.file_path = require_field(j, "path", "manifest", i + 1);
      ex.file_content = require_field(j, "content", "manifest", i + 1);
      ex.label = require_field(j, "label", "manifest", i + 1).get<int>();
      if (j.contains("post")) ex.post_content = j["post"].get<std::string>();
    } catch (const json::exception& e) {
      throw ValidationError("manifest record " + std::to_string(i + 1) + ": " +
                            e.what());
    }
    projects.insert(ex.bug.project_id);
    manifest.records.push_back(std::move(ex));
  }
  if (manifest.records.size() != count)
    throw ValidationError("manifest record count mismatch: header says " +
                          std::to_string(count) + ", found " +
                          std::to_string(manifest.records.size()));
  manifest.projects.assign(projects.begin(), projects.end());
  return manifest;
}

}  // namespace bugloc
