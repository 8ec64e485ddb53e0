#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "funnel/funnel_ops.hpp"
#include "funnel/tape.hpp"

namespace funnel {

// Learned-query attention pooling head for the sentence path.
struct PoolerConfig {
  int n_pool_heads = 4;
  int n_pool_layers = 1;
};

struct ModelConfig {
  int n_layers = 16;
  int d_model = 64;
  int n_heads = 4;
  int head_dim = 16;
  int d_ff = 256;
  int vocab_size = 64;
  int max_seq = 128;
  bool causal = false;
  Scalar rope_base = 10000.0;
  int n_classes = 2;  // sentence head
  int n_tags = 2;     // token head
  PoolerConfig pooler;

  void validate() const;
  // Top id is reserved as the mask token for masked-token pretraining;
  // data generators draw from [0, mask_token()).
  int mask_token() const { return vocab_size - 1; }
};

// Named parameters in a fixed registration order (which fixes both the
// initialization RNG stream and the checkpoint layout).
class ParamStore {
 public:
  NodeRef add(const std::string& name, Tensor3 v);
  const NodeRef& get(const std::string& name) const;  // config_error if absent
  const std::vector<std::pair<std::string, NodeRef>>& entries() const { return entries_; }
  int64_t total_size() const;
  void zero_grads();

 private:
  std::vector<std::pair<std::string, NodeRef>> entries_;
};

struct ModelState {
  ModelConfig config;
  FunnelConfig funnel;
  ParamStore params;

  // Reproducible: same seed and configs give bit-identical parameters.
  static ModelState init(const ModelConfig& mc, const FunnelConfig& fc, uint64_t seed);
};

// Documented closed form for the number of scalars init() registers.
int64_t param_count(const ModelConfig& mc);

struct ForwardResult {
  Var final;                   // residual stream after the last block, pooled length
  LayerCache cache;            // populated only when the funnel is active
  SeqMask mask;                // at pooled length
  std::vector<int> positions;  // original coordinates surviving pooling
  int pooled_len = 0;
  int full_len = 0;
};

// Embeds, runs the block stack, pooling hidden states / mask / positions at
// the configured funnel boundary and caching full-resolution layer outputs
// until that point. tape == nullptr runs pure inference.
ForwardResult forward(const ModelState& state, const TokenIds& tokens,
                      const SeqMask& mask, GradTape* tape);

// Token path: tile the pooled output back to full length, apply the
// configured recovery, then the token head. Full-length logits (B, S, n_tags).
Var forward_tokens(const ModelState& state, const TokenIds& tokens,
                   const SeqMask& mask, GradTape* tape);

// Sentence path: final norm, pooler block(s), learned-query attention over
// the (possibly pooled) sequence, linear classifier. No recovery.
// Logits (B, 1, n_classes).
Var forward_sentence(const ModelState& state, const TokenIds& tokens,
                     const SeqMask& mask, GradTape* tape);

// Masked-token prediction head at full length; recovery when configured,
// plain tiling when recovery_op is none. Logits (B, S, vocab).
Var forward_lm(const ModelState& state, const TokenIds& tokens,
               const SeqMask& mask, GradTape* tape);

// Reference residual stream with the funnel machinery structurally absent:
// the plain embed + blocks loop, sharing the same block helpers.
Var stack_no_funnel(const ModelState& state, const TokenIds& tokens,
                    const SeqMask& mask, GradTape* tape);

// Final norm + token classifier over a full-length stream.
Var token_head(const ModelState& state, const Var& h, GradTape* tape);

// Learned-query multi-head attention collapsing x (B,S,d) to one vector
// (B,1,d); masked positions get weight exactly 0.
Var attention_pool(const ModelState& state, const Var& x, const SeqMask& mask,
                   GradTape* tape);

// Versioned binary checkpoint (JSON header + raw little-endian doubles).
// save -> load round-trips bit-exactly.
void save_checkpoint(const ModelState& state, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace funnel
