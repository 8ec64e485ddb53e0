#include "funnel/cost_model.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>

namespace funnel {

namespace {

// One block at sequence length L: Q,K,V,O projections, attention scores and
// value mix, gated MLP (gate, up, down).
int64_t block_flops(const ModelConfig& mc, int64_t L) {
  const int64_t d = mc.d_model, ff = mc.d_ff;
  return 8 * L * d * d + 4 * L * L * d + 6 * L * d * ff;
}

// Pooler blocks plus learned-query attention (k/v projections, scores with a
// one-position query, value mix) plus the sentence classifier.
int64_t pooler_flops_at(const ModelConfig& mc, int64_t L) {
  const int64_t d = mc.d_model;
  int64_t n = static_cast<int64_t>(mc.pooler.n_pool_layers) * block_flops(mc, L);
  n += 4 * L * d * d;                 // wk, wv
  n += 4 * L * d;                     // scores + mix
  n += 2 * d * mc.n_classes;          // classifier
  return n;
}

}  // namespace

FlopsReport flops_estimate(const ModelConfig& mc, const FunnelConfig& fc, int seq) {
  mc.validate();
  fc.validate(mc.n_layers);
  if (seq < 1 || seq > mc.max_seq) throw config_error("flops_estimate: bad seq");

  const int f = fc.funnel_boundary();
  const int64_t pooled = (seq + 1) / 2;

  FlopsReport r;
  r.per_layer.reserve(static_cast<size_t>(mc.n_layers));
  for (int k = 0; k < mc.n_layers; ++k) {
    const int64_t L = (f >= 0 && f <= k) ? pooled : seq;
    r.per_layer.push_back(block_flops(mc, L));
    r.total += r.per_layer.back();
    r.baseline_total += block_flops(mc, seq);
  }
  r.pooler_flops = pooler_flops_at(mc, f >= 0 ? pooled : seq);
  r.recovery_flops = 0;
  r.total += r.pooler_flops + r.recovery_flops;
  r.baseline_total += pooler_flops_at(mc, seq);
  r.savings_ratio = 1.0 - static_cast<double>(r.total) / static_cast<double>(r.baseline_total);
  return r;
}

LatencyStats wall_clock_profile(const ModelState& state, int seq, int batch,
                                int n_warmup, int n_reps) {
  if (n_reps < 5) throw usage_error("wall_clock_profile needs n_reps >= 5");
  if (n_warmup < 0) throw usage_error("wall_clock_profile: negative warmup");
  Eigen::setNbThreads(1);

  Rng rng(0x1a7e9c5u);
  TokenIds tokens(batch, seq);
  for (auto& id : tokens.ids)
    id = static_cast<int32_t>(rng.uniform_int(state.config.mask_token()));
  SeqMask mask = SeqMask::all_valid(batch, seq);

  auto timed = [&](const ModelState& st) {
    auto t0 = std::chrono::steady_clock::now();
    (void)forward_sentence(st, tokens, mask, nullptr);
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count();
  };
  auto quantile = [](const std::vector<double>& sorted, double q) {
    const auto idx = static_cast<size_t>(
        std::llround(q * static_cast<double>(sorted.size() - 1)));
    return sorted[idx];
  };

  ModelState baseline = state;  // parameters shared; only the funnel differs
  baseline.funnel = FunnelConfig::none(state.config.n_layers);

  // interleave the two configurations rep-by-rep so machine drift during the
  // run biases both medians equally instead of skewing the ratio
  std::vector<double> cfg, base;
  cfg.reserve(static_cast<size_t>(n_reps));
  base.reserve(static_cast<size_t>(n_reps));
  for (int i = 0; i < n_warmup; ++i) {
    (void)forward_sentence(state, tokens, mask, nullptr);
    (void)forward_sentence(baseline, tokens, mask, nullptr);
  }
  for (int i = 0; i < n_reps; ++i) {
    cfg.push_back(timed(state));
    base.push_back(timed(baseline));
  }
  std::sort(cfg.begin(), cfg.end());
  std::sort(base.begin(), base.end());

  LatencyStats s;
  s.n_warmup = n_warmup;
  s.n_reps = n_reps;
  s.median_ms = quantile(cfg, 0.5);
  s.p10_ms = quantile(cfg, 0.10);
  s.p90_ms = quantile(cfg, 0.90);
  s.savings_vs_baseline = 1.0 - s.median_ms / quantile(base, 0.5);
  return s;
}

}  // namespace funnel
