// Generates a linked synthetic issue/commit corpus plus a ready-to-run
// experiment manifest, so the whole pipeline can be exercised without any
// real tracker exports.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "bugloc/error.hpp"
#include "bugloc/experiment.hpp"
#include "bugloc/synthetic.hpp"

namespace fs = std::filesystem;

namespace {

bugloc::ExperimentManifest demo_manifest(const std::string& out_dir,
                                         int candidate_pool,
                                         std::uint64_t seed) {
  bugloc::ExperimentManifest m;
  m.experiment_id = "demo";
  m.seed = seed;
  m.artifact_dir = out_dir + "/artifacts";
  m.mine.issues_path = out_dir + "/issues.jsonl";
  m.mine.issue_kind = bugloc::IssueKind::jira;
  m.mine.commits_path = out_dir + "/commits.jsonl";
  m.build.negatives_per_positive = 2;
  m.build.test_fraction = 0.2;
  m.build.candidate_pool = candidate_pool;
  m.vocab.size = 512;
  m.pretrain.objective = bugloc::PretrainConfig::Objective::electra;
  m.pretrain.epochs = 4;
  m.pretrain.batch_size = 16;
  m.encoder.num_layers = 1;
  m.encoder.num_heads = 2;
  m.encoder.hidden_dim = 32;
  m.encoder.ffn_dim = 64;
  m.encoder.max_len = 96;
  m.train_head.head.conv_channels = {16, 16, 16};
  m.train_head.head.hidden_units = 16;
  m.train_head.epochs = 8;
  m.train_head.batch_size = 16;
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generate a synthetic linked bug corpus and demo manifest"};
  std::string out_dir;
  bugloc::SyntheticCorpusConfig corpus;
  app.add_option("--out-dir", out_dir, "directory for the generated corpus")
      ->required();
  app.add_option("--projects", corpus.projects, "number of projects");
  app.add_option("--bugs", corpus.bugs_per_project, "bugs per project");
  app.add_option("--files", corpus.files_per_project, "files per project");
  app.add_option("--file-markers", corpus.markers_per_file,
                 "identifiers owned by each file");
  app.add_option("--markers", corpus.markers_per_bug,
                 "file identifiers echoed per description");
  app.add_option("--prose", corpus.prose_words_per_description,
                 "generic words per description");
  app.add_option("--repeats", corpus.marker_repeats_in_file,
                 "occurrences of each identifier in its file");
  app.add_option("--seed", corpus.seed, "generation seed");
  CLI11_PARSE(app, argc, argv);

  try {
    fs::create_directories(out_dir);
    bugloc::write_synthetic_corpus(corpus, out_dir + "/issues.jsonl",
                                   out_dir + "/commits.jsonl");
    // keep the candidate pool satisfiable: files bound the per-project pool
    const int pool = std::min(8, corpus.files_per_project);
    bugloc::save_experiment_manifest(demo_manifest(out_dir, pool, corpus.seed),
                                     out_dir + "/manifest.json");
    std::printf("wrote %s/{issues.jsonl,commits.jsonl,manifest.json}\n",
                out_dir.c_str());
    return 0;
  } catch (const bugloc::ValidationError& e) {
    std::fprintf(stderr, "bugloc-mkcorpus: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "bugloc-mkcorpus: %s\n", e.what());
    return 2;
  }
}
