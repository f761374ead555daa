#include "bugloc/synthetic.hpp"

#include <algorithm>

#include <cstdio>
#include <ctime>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bugloc/error.hpp"
#include "bugloc/rng.hpp"

namespace bugloc {

namespace {

constexpr int kSyllableCount = 64;

// two of these concatenated make one identifier
const char* const kSyllables[kSyllableCount] = {
    "ba", "be", "bi", "bo", "bu", "ca", "ce", "ci", "co", "cu", "da",
    "de", "di", "do", "du", "fa", "fe", "fi", "fo", "fu", "ga", "ge",
    "gi", "go", "gu", "ha", "he", "hi", "ho", "hu", "ja", "je", "ji",
    "jo", "ju", "ka", "ke", "ki", "ko", "ku", "la", "le", "li", "lo",
    "lu", "ma", "me", "mi", "mo", "mu", "na", "ne", "ni", "no", "nu",
    "pa", "pe", "pi", "po", "pu", "ra", "re", "ri", "ro"};

// every project draws its file identifiers from this one shared pool, so a
// compact vocabulary covers all of them; a stride spreads the picks over the
// whole syllable grid
constexpr int kMarkerPool = 416;

// prose words reuse the identifier generator at pool slots past the marker
// range, so reports and files share one surface form and nothing about a
// word's shape betrays whether it names code; the stride is coprime to the
// grid, which keeps the two ranges disjoint
constexpr int kProseCount = 40;
constexpr int kPreferredProse = 12;  // per-project slang subset
constexpr double kPreferredRate = 0.7;

std::string marker_word(std::size_t pool_index) {
  const std::size_t combo = pool_index * 157 % 4096;
  return std::string(kSyllables[combo / kSyllableCount]) +
         kSyllables[combo % kSyllableCount];
}

std::string prose_pool_word(std::size_t prose_index) {
  return marker_word(static_cast<std::size_t>(kMarkerPool) + prose_index);
}

std::string iso_utc(std::int64_t epoch_seconds) {
  const std::time_t t = static_cast<std::time_t>(epoch_seconds);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const std::string& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::string file_content(int file_index, const std::vector<std::string>& ids,
                         int repeats, int initial, int increment) {
  // the declaration block gives every identifier its first occurrence; each
  // further repeat adds one assignment per identifier; the fix bumps the
  // initial value, so pre and post differ even with a single occurrence
  std::string out = "class Widget" + std::to_string(file_index) + " {\n";
  for (const std::string& id : ids)
    out += "  int " + id + " = " + std::to_string(initial) + ";\n";
  for (int r = 1; r < repeats; ++r) {
    out += "  void pass" + std::to_string(r) + "() {\n";
    for (const std::string& id : ids)
      out += "    " + id + " += " + std::to_string(increment) + ";\n";
    out += "  }\n";
  }
  out += "}\n";
  return out;
}

}  // namespace

void write_synthetic_corpus(const SyntheticCorpusConfig& config,
                            const std::string& issues_path,
                            const std::string& commits_path) {
  if (config.projects < 1 || config.bugs_per_project < 1 ||
      config.files_per_project < 1)
    throw ValidationError(
        "synthetic corpus needs at least one project, bug and file");
  if (config.markers_per_file < 1 ||
      config.markers_per_bug > config.markers_per_file)
    throw ValidationError(
        "synthetic corpus descriptions cannot echo more identifiers than "
        "their file owns");
  if (config.markers_per_bug < 1 || config.prose_words_per_description < 0)
    throw ValidationError("synthetic corpus needs at least one marker per bug");
  if (config.marker_repeats_in_file < 1)
    throw ValidationError("synthetic corpus markers must occur at least once");
  const int markers_per_project =
      config.files_per_project * config.markers_per_file;
  if (markers_per_project > kMarkerPool)
    throw ValidationError("synthetic corpus marker demand exceeds the " +
                          std::to_string(kMarkerPool) + "-word pool");

  std::ofstream issues(issues_path, std::ios::binary);
  std::ofstream commits(commits_path, std::ios::binary);
  if (!issues.good() || !commits.good())
    throw Error("cannot open synthetic corpus outputs for writing");

  constexpr std::int64_t kBase = 1672531200;  // 2023-01-01T00:00:00Z
  for (int p = 0; p < config.projects; ++p) {
    char proj[16];
    std::snprintf(proj, sizeof(proj), "PRJ%02d", p);
    const std::string project = proj;
    Rng rng(derive_seed(config.seed, "project/" + project));

    // identifiers are disjoint across the files of a project, so only the
    // buggy file contains the identifiers a report mentions
    const std::vector<std::size_t> picks =
        rng.sample_without_replacement(kMarkerPool, markers_per_project);
    std::vector<std::vector<std::string>> file_ids(
        static_cast<std::size_t>(config.files_per_project));
    for (int f = 0; f < config.files_per_project; ++f)
      for (int k = 0; k < config.markers_per_file; ++k)
        file_ids[static_cast<std::size_t>(f)].push_back(
            marker_word(picks[static_cast<std::size_t>(
                f * config.markers_per_file + k)]));

    const std::vector<std::size_t> preferred =
        rng.sample_without_replacement(kProseCount, kPreferredProse);
    const auto prose_word = [&]() -> std::string {
      if (rng.uniform01() < kPreferredRate)
        return prose_pool_word(preferred[rng.below(kPreferredProse)]);
      return prose_pool_word(rng.below(kProseCount));
    };

    for (int b = 0; b < config.bugs_per_project; ++b) {
      const int f = b % config.files_per_project;
      const std::vector<std::string>& ids =
          file_ids[static_cast<std::size_t>(f)];

      // identifiers lead the description in declaration order: reports are
      // then position-aligned with the declaration block of their file,
      // which keeps the report/code correspondence learnable by position as
      // well as by content
      std::vector<std::size_t> slots = rng.sample_without_replacement(
          static_cast<std::size_t>(config.markers_per_file),
          static_cast<std::size_t>(config.markers_per_bug));
      std::sort(slots.begin(), slots.end());
      std::vector<std::string> words;
      for (const std::size_t k : slots) words.push_back(ids[k]);
      for (int k = 0; k < config.prose_words_per_description; ++k)
        words.push_back(prose_word());
      std::vector<std::string> title_words;
      for (int k = 0; k < 4; ++k) title_words.push_back(prose_word());

      const std::string key = project + "-" + std::to_string(b + 1);
      const std::int64_t created =
          kBase + 3600 * (static_cast<std::int64_t>(b) * config.projects + p);
      const nlohmann::json issue{{"project", project},
                                 {"key", key},
                                 {"title", join(title_words)},
                                 {"description", join(words)},
                                 {"status", "Fixed"},
                                 {"created", iso_utc(created)}};
      issues << issue.dump() << '\n';

      const std::string path =
          "src/" + project + "/Widget" + std::to_string(f) + ".java";
      const nlohmann::json commit{
          {"sha", project + "c" + std::to_string(b)},
          {"message", "Fix " + key + ": guard " + words.front()},
          {"timestamp", iso_utc(created + 1800)},
          {"files",
           nlohmann::json::array(
               {{{"path", path},
                 {"pre", file_content(f, ids, config.marker_repeats_in_file,
                                      0, 3)},
                 {"post", file_content(f, ids, config.marker_repeats_in_file,
                                       1, 4)}}})}};
      commits << commit.dump() << '\n';
    }
  }
  if (!issues.good() || !commits.good())
    throw Error("short write while emitting the synthetic corpus");
}

}  // namespace bugloc
