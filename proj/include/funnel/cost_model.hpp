#pragma once

#include <cstdint>
#include <vector>

#include "funnel/model.hpp"

namespace funnel {

// Analytic matmul FLOPs for one sequence (batch 1) through the sentence
// path. Convention: 2 flops per multiply-add, matmul family only —
// normalization, activations, softmax, pooling, and tiling count 0, so
// recovery_flops is identically 0 and is reported for visibility.
struct FlopsReport {
  std::vector<int64_t> per_layer;  // the n_layers stack blocks
  int64_t pooler_flops = 0;        // pooler block(s) + learned-query MHA + classifier
  int64_t recovery_flops = 0;
  int64_t total = 0;
  int64_t baseline_total = 0;  // same model, all pool factors 1
  double savings_ratio = 0.0;  // 1 - total / baseline_total
};

FlopsReport flops_estimate(const ModelConfig& mc, const FunnelConfig& fc, int seq);

struct LatencyStats {
  int n_warmup = 0;
  int n_reps = 0;
  double median_ms = 0.0;
  double p10_ms = 0.0;
  double p90_ms = 0.0;
  double savings_vs_baseline = 0.0;  // vs the all-ones config, same process
};

// Times the sentence-path forward on fixed random inputs, single-threaded.
// Requires n_reps >= 5. The all-ones baseline is measured in the same call,
// interleaved rep-by-rep with the funnel config so drift cancels.
LatencyStats wall_clock_profile(const ModelState& state, int seq, int batch,
                                int n_warmup, int n_reps);

}  // namespace funnel
