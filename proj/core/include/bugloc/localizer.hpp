#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "bugloc/corpus.hpp"
#include "bugloc/encoder.hpp"
#include "bugloc/params.hpp"
#include "bugloc/pretrain.hpp"
#include "bugloc/tensor.hpp"
#include "bugloc/tokenize.hpp"

namespace bugloc {

struct HeadConfig {
  std::vector<int> conv_channels{32, 32, 32};  // exactly three stages
  int kernel_size = 3;                         // odd, same padding
  int hidden_units = 16;
  std::uint64_t seed = 0;

  bool operator==(const HeadConfig&) const = default;
};

/// Three token-axis convolutions, a global max-pool, and a two-layer
/// perceptron ending in one logit.
struct HeadState {
  HeadConfig config;
  ParamStore params;
};

struct RankedResult {
  std::string bug_id;
  std::vector<std::pair<std::string, double>> ranking;  // path, score desc
  std::set<std::string> relevant;
};

HeadState init_head(const HeadConfig& config, int hidden_dim);

/// Match probability per batch row, strictly inside (0, 1). The encoded
/// batch must come from an encoder whose hidden size matches the head.
Tensor head_forward(const HeadState& head, const EncodedBatch& encoded);

/// Fits the head with binary cross entropy over (bug, file) pairs while the
/// encoder stays frozen; its parameters are read, never written.
std::pair<HeadState, TrainingLog> train_head(const EncoderState& encoder,
                                             const HeadConfig& head_config,
                                             const DatasetManifest& examples,
                                             const Vocabulary& vocab,
                                             int epochs = 10,
                                             int batch_size = 32,
                                             double learning_rate = 1e-3,
                                             std::uint64_t seed = 0);

/// Scores every candidate (path, content) pair for the bug and returns them
/// sorted by descending score, ties broken by ascending path.
RankedResult rank_files(
    const EncoderState& encoder, const HeadState& head, const BugRecord& bug,
    const std::vector<std::pair<std::string, std::string>>& candidates,
    const Vocabulary& vocab, std::set<std::string> relevant = {});

void save_head_checkpoint(const HeadState& head,
                          const std::filesystem::path& path);
HeadState load_head_checkpoint(const std::filesystem::path& path);

/// JSON-text lines: {"bug_id", "ranking": [{"path", "score"}], "relevant"}.
void save_ranked_results(const std::vector<RankedResult>& results,
                         const std::filesystem::path& path);
std::vector<RankedResult> load_ranked_results(
    const std::filesystem::path& path);

}  // namespace bugloc
