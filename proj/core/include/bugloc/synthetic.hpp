#pragma once

#include <cstdint>
#include <string>

namespace bugloc {

/// Knobs for the generated issue/commit exports. With the defaults, three of
/// every ten description tokens name identifiers that occur in the bug's
/// changed file; the rest is generic report prose drawn from a
/// project-biased distribution (each project prefers its own slang subset).
struct SyntheticCorpusConfig {
  int projects = 6;
  int bugs_per_project = 12;
  int files_per_project = 8;
  int markers_per_file = 8;  // identifiers owned by one file
  int markers_per_bug = 6;   // file identifiers echoed in the description
  int prose_words_per_description = 14;
  // keep this at 1 when the corpus feeds pre-training: if a file repeats its
  // identifiers, a masked identifier is recoverable from the file alone and
  // the encoder never learns to consult the report half of the pair
  int marker_repeats_in_file = 1;
  std::uint64_t seed = 7;
};

/// Writes a jira-style issue export and a matching commit export describing
/// `projects * bugs_per_project` fixed bugs. Bug i of a project touches file
/// (i mod files_per_project), so with enough bugs every file is hit by an
/// early bug; identifiers come from one corpus-wide word pool but are
/// disjoint across the files of a project, which makes report/code relevance
/// learnable (and transferable to later bugs) by construction. Bug
/// timestamps interleave across projects, which spreads a recency-based test
/// split evenly over all projects. The same configuration always produces
/// byte-identical exports.
void write_synthetic_corpus(const SyntheticCorpusConfig& config,
                            const std::string& issues_path,
                            const std::string& commits_path);

}  // namespace bugloc
