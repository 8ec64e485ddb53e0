#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "funnel/model.hpp"

namespace funnel {

struct TrainConfig {
  int max_steps = 2000;
  Scalar max_lr = 3e-3;
  Scalar min_lr_fraction = 0.1;
  int warmup_steps = 100;
  int batch_size = 16;
  int eval_batch_size = 64;
  Scalar weight_decay = 0.01;
  uint64_t seed = 0;
  // scenario plumbing
  int pretrain_steps = 300;
  int pretrain_funnel_layer = 2;
  int eval_examples = 512;
  Scalar mask_prob = 0.15;  // masked-token pretraining corruption rate

  void validate() const;
};

// Linear warmup to max_lr, then cosine decay to max_lr * min_lr_fraction:
// lr(0) = 0, lr(warmup_steps) = max_lr, lr(max_steps) = max_lr * min_lr_fraction.
Scalar lr_at(const TrainConfig& tc, int step);

enum class TaskKind { Sentence, Token };

struct Batch {
  TokenIds tokens;
  SeqMask mask;
  std::vector<int> labels;  // sentence: one per row; token: one per position
};

// label = 1 iff more than half the tokens have id < vocab / 2
int sentence_label(const std::vector<int32_t>& tokens, int vocab);
// tag_i = 1 iff token_i == token_{i-1}; tag_0 = 0
std::vector<int> duplicate_tags(const std::vector<int32_t>& tokens);

// Uniform tokens over [0, vocab-1) — the top id is the reserved mask token.
Batch gen_sentence_batch(Rng& rng, int n, int seq, int vocab);
// Same stream, plus adjacent duplicates planted with probability 0.25 so the
// positive tag rate is trainable.
Batch gen_token_batch(Rng& rng, int n, int seq, int vocab);

uint64_t fnv1a64(std::string_view s);

// CoNLL column format: whitespace-separated columns, token first, tag last;
// blank lines split sentences; lines starting with -DOCSTART- are skipped.
struct ConllDataset {
  std::vector<std::vector<std::string>> tokens;
  std::vector<std::vector<int32_t>> token_ids;  // fnv1a64(token) % hash_buckets
  std::vector<std::vector<int>> tag_ids;        // first-seen order
  std::vector<std::string> tag_names;
  int hash_buckets = 0;
};

ConllDataset parse_conll(const std::string& path, int hash_buckets);

struct TaskSpec {
  TaskKind kind = TaskKind::Token;
  int seq = 16;
  bool from_file = false;  // CoNLL-backed token task
  ConllDataset data;

  const char* name() const {
    return from_file ? "conll" : (kind == TaskKind::Sentence ? "sentence" : "token");
  }
};

// Fresh training batch: synthetic tasks draw from the stream, file-backed
// tasks sample sentences (padded to the longest in the batch).
Batch next_batch(const TaskSpec& task, Rng& rng, int n, const ModelConfig& mc);
std::vector<Batch> make_eval_batches(const TaskSpec& task, Rng& rng, int n_examples,
                                     int batch_size, const ModelConfig& mc);

// Masked-token corruption: each valid position independently becomes the mask
// token with probability p; loss weight 1 there, 0 elsewhere. At least one
// position is always masked.
struct MlmBatch {
  TokenIds tokens;
  std::vector<int> labels;
  std::vector<Scalar> weights;
};
MlmBatch make_mlm(const Batch& batch, Rng& rng, int mask_token, Scalar p);

// Adam with decoupled weight decay. A step with zero gradients and zero
// weight decay leaves parameters bit-identical.
class AdamW {
 public:
  AdamW(Scalar beta1, Scalar beta2, Scalar eps, Scalar weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(ParamStore& params, Scalar lr);

 private:
  Scalar beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
  std::vector<Mat> m_, v_;
};

struct EvalResult {
  TaskKind kind = TaskKind::Sentence;
  Scalar accuracy = 0, precision = 0, recall = 0, f1 = 0;

  const char* metric_name() const {
    return kind == TaskKind::Sentence ? "accuracy" : "f1";
  }
  Scalar metric() const { return kind == TaskKind::Sentence ? accuracy : f1; }
};

// Sentence: accuracy. Token: binary F1 on tag 1 over valid positions
// (0 when precision + recall is 0), with precision/recall/accuracy reported.
EvalResult evaluate(const ModelState& state, const std::vector<Batch>& batches,
                    TaskKind kind);

enum class Scenario {
  FunnelAwarePretrainThenFinetune,
  NormalPretrainThenFunnelFinetune,
  InferenceOnlyFunnel,
};

const char* to_string(Scenario sc);
Scenario scenario_from_string(const std::string& name);  // usage_error on unknown

struct StepRecord {
  int step = 0;
  Scalar lr = 0;
  Scalar loss = 0;
};

// Supervised training on the task labels with state.funnel active.
void train_task(ModelState& state, const TaskSpec& task, const TrainConfig& tc,
                std::vector<StepRecord>* history);
// Masked-token pretraining for `steps` steps (warmup clipped to the phase).
void pretrain_mlm(ModelState& state, const TaskSpec& task, const TrainConfig& tc,
                  int steps, std::vector<StepRecord>* history);

struct ScenarioResult {
  ModelState state;
  std::vector<StepRecord> history;
  EvalResult eval;
};

// FunnelAwarePretrainThenFinetune: masked-token pretrain with the funnel at
// tc.pretrain_funnel_layer, then fine-tune with fc. NormalPretrainThen-
// FunnelFinetune: pretrain without funnel, fine-tune with fc. InferenceOnly-
// Funnel: train without funnel, evaluate with fc inserted unadapted.
ScenarioResult run_scenario(Scenario sc, const ModelConfig& mc, const FunnelConfig& fc,
                            const TrainConfig& tc, const TaskSpec& task);

}  // namespace funnel
