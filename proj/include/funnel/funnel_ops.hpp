#pragma once

#include <string>
#include <utility>
#include <vector>

#include "funnel/tape.hpp"

namespace funnel {

// The six ways of rebuilding a full-length sequence from the tiled funnel
// output plus cached full-resolution layer activations. None means the model
// never leaves the pooled length (sentence path, or no funnel at all).
enum class RecoveryOp {
  None,
  SumFirst,    // tiled + first layer output
  SumLast,     // tiled + last pre-funnel layer output
  SumPrevMax,  // tiled + elementwise max over pre-funnel layer outputs
  SumPrevAvg,  // tiled + elementwise mean over pre-funnel layer outputs
  AvgLast,     // (tiled + last pre-funnel layer output) / 2
  MaxLast,     // elementwise max(tiled, last pre-funnel layer output)
};

const char* to_string(RecoveryOp op);
RecoveryOp recovery_from_string(const std::string& name);  // usage_error on unknown
const std::vector<RecoveryOp>& all_recovery_ops();         // the six, None excluded

// Where and how the stack pools. pool_factors has one entry per layer
// boundary: entry k pools the hidden states entering layer k, and entry
// n_layers pools the output of the whole stack. Factors are 1 (no-op) or 2
// (two-token max-pool), with at most one pooling point.
struct FunnelConfig {
  std::vector<int> pool_factors;  // length n_layers + 1
  RecoveryOp recovery_op = RecoveryOp::None;
  // Ablation switch: recovery sees a zeroed first-layer cache, so sum_first
  // degenerates to the pure tiled path.
  bool zero_first_cache = false;

  static FunnelConfig none(int n_layers);
  // Single two-token funnel at the given boundary (0 .. n_layers inclusive).
  static FunnelConfig single(int n_layers, int boundary, RecoveryOp op);

  void validate(int n_layers) const;
  bool any_pooling() const;
  // Boundary index of the single factor-2 entry, or -1 when all ones.
  int funnel_boundary() const;
};

// Full-resolution activations cached before the funnel point, consumed by
// recover(). With the funnel at boundary f, the cache covers layer outputs
// 0 .. f-1; at boundary 0 nothing precedes the funnel and every slot falls
// back to the embedding activations (pre_funnel_count stays 0).
struct LayerCache {
  Var first_full;
  Var last_full;
  Var running_max;
  Var running_avg;
  int pre_funnel_count = 0;
};

// Window-start positions that survive pooling: out[i] = positions[i*factor].
std::vector<int> pool_positions(const std::vector<int>& positions, int factor);

// Two-token max-pool over the sequence axis. Output length ceil(seq/factor);
// each output feature is the max over the *valid* positions of its window,
// tie-break on the first index. A window with no valid position yields an
// invalid output position filled with 0. factor 1 returns the inputs as-is.
std::pair<Var, SeqMask> max_pool_seq(const Var& x, const SeqMask& mask, int factor);
std::pair<Tensor3, SeqMask> max_pool_seq(const Tensor3& x, const SeqMask& mask, int factor);

// Repeat each position `factor` times, truncated to target_len.
// Requires ceil(target_len / factor) == seq of x.
Var tile_upsample(const Var& x, int factor, int target_len);
Tensor3 tile_upsample(const Tensor3& x, int factor, int target_len);

// Combine the tiled funnel output with the cache (shapes must match).
Var recover(const Var& tiled, const LayerCache& cache, RecoveryOp op);

}  // namespace funnel
