#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bugloc/corpus.hpp"
#include "bugloc/encoder.hpp"
#include "bugloc/params.hpp"
#include "bugloc/tensor.hpp"
#include "bugloc/tokenize.hpp"

namespace bugloc {

/// Which positions of a sequence are selected for masking and what happens to
/// each: replaced by MASK, replaced by a random token, or left in place.
struct MaskingPlan {
  enum class Action { mask, random, keep };
  std::vector<int> selected;               // sorted positions
  std::map<int, Action> action;            // one entry per selected position
  std::map<int, int> replacement;          // mask/random actions only
};

struct PretrainConfig {
  enum class Objective { mlm, electra, mlm_then_qa };
  Objective objective = Objective::mlm;
  double mask_rate = 0.15;
  double electra_disc_weight = 50.0;
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

/// Inclusive answer span, in absolute sequence positions strictly inside the
/// code segment: sep_index < start <= end < EOS position.
struct QaTarget {
  int start = 0;
  int end = 0;
};

struct TrainingLog {
  struct Step {
    std::int64_t step = 0;
    int epoch = 0;
    std::string objective;
    double loss = 0.0;
  };
  std::vector<Step> steps;
  std::vector<double> epoch_mean_loss;
};

/// Samples floor(mask_rate * maskable) non-special, non-PAD positions and
/// assigns 80% MASK / 10% random token / 10% keep by exact floor counts.
/// Throws ValidationError when nothing would be selected.
MaskingPlan make_masking_plan(const TokenSequence& seq, double mask_rate,
                              std::uint64_t seed, int vocab_size);

struct MlmResult {
  double loss = 0.0;
  std::map<std::string, Tensor> grads;
};

/// Masked-token cross entropy with a vocabulary projection tied to the token
/// embedding. Only selected positions contribute; an empty selection across
/// the whole batch is an error.
MlmResult mlm_loss(const EncoderState& state,
                   const std::vector<TokenSequence>& batch,
                   const std::vector<MaskingPlan>& plans);

struct ElectraResult {
  double gen_loss = 0.0;
  double disc_loss = 0.0;
  double combined = 0.0;
  std::map<std::string, Tensor> gen_grads;
  std::map<std::string, Tensor> disc_grads;
  std::map<std::string, Tensor> head_grads;
  // per sequence: the corrupted ids fed to the discriminator and the
  // original/replaced labels (1 = original) over every position
  std::vector<std::vector<int>> corrupted_ids;
  std::vector<std::vector<int>> labels;
  Tensor disc_logits;  // [batch, len]
};

/// One replaced-token-detection step: the generator fills masked positions,
/// replacements are sampled from its output distribution (no gradient flows
/// through the sample), and the discriminator classifies every non-PAD
/// position as original or replaced. combined = gen_loss + weight * disc_loss;
/// discriminator and head gradients carry the weight factor.
ElectraResult electra_step(const EncoderState& generator,
                           const EncoderState& discriminator,
                           const ParamStore& rtd_head,
                           const std::vector<TokenSequence>& batch,
                           const std::vector<MaskingPlan>& plans,
                           double disc_weight, std::uint64_t seed);

/// Initial parameters for the discriminator's binary position head.
ParamStore init_rtd_head(int hidden_dim, std::uint64_t seed);

/// Strips // and /* */ comments outside string and character literals,
/// preserving line structure.
std::string strip_comments(const std::string& code);

/// Builds a question-answering instance from a bug report and the two sides
/// of its fix: the answer is the span of the first diff hunk that removes or
/// replaces lines of the pre-fix code. Absent when the versions agree after
/// comment stripping or the hunk falls outside the encoded code segment.
std::optional<std::pair<TokenSequence, QaTarget>> qa_targets(
    const std::string& bug_text, const std::string& pre_code,
    const std::string& post_code, const Vocabulary& vocab, int max_len);

struct QaResult {
  double loss = 0.0;
  std::map<std::string, Tensor> grads;
  std::map<std::string, Tensor> head_grads;
};

/// Start- and end-position cross entropies over code-segment positions only;
/// the reported loss is the sum of the two classifier means.
QaResult qa_loss(const EncoderState& state, const ParamStore& qa_head,
                 const std::vector<TokenSequence>& batch,
                 const std::vector<QaTarget>& targets);

/// Initial parameters for the start/end span classifiers.
ParamStore init_qa_head(int hidden_dim, std::uint64_t seed);

/// Runs the configured objective over the dataset's positive pairs and
/// returns the pretrained encoder (for ELECTRA, the discriminator) and the
/// training log. `on_epoch_end`, when set, observes the encoder after every
/// epoch. Deterministic given the config seeds.
std::pair<EncoderState, TrainingLog> pretrain(
    const PretrainConfig& config, const EncoderConfig& encoder_config,
    const DatasetManifest& dataset, const Vocabulary& vocab,
    const std::function<void(int, const EncoderState&)>& on_epoch_end = {});

/// step,epoch,objective,loss rows as comma-separated text.
void save_training_log(const TrainingLog& log,
                       const std::filesystem::path& path);

/// Echoes the configuration as a JSON-text sidecar.
void save_pretrain_config(const PretrainConfig& config,
                          const std::filesystem::path& path);
PretrainConfig load_pretrain_config(const std::filesystem::path& path);

std::string objective_name(PretrainConfig::Objective objective);
PretrainConfig::Objective objective_from_name(const std::string& name);

}  // namespace bugloc
