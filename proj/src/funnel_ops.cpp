#include "funnel/funnel_ops.hpp"

#include <algorithm>

namespace funnel {

using detail::any_grad;
using detail::pick_tape;
using detail::result;

const char* to_string(RecoveryOp op) {
  switch (op) {
    case RecoveryOp::None: return "none";
    case RecoveryOp::SumFirst: return "sum_first";
    case RecoveryOp::SumLast: return "sum_last";
    case RecoveryOp::SumPrevMax: return "sum_prev_max";
    case RecoveryOp::SumPrevAvg: return "sum_prev_avg";
    case RecoveryOp::AvgLast: return "avg_last";
    case RecoveryOp::MaxLast: return "max_last";
  }
  return "?";
}

RecoveryOp recovery_from_string(const std::string& name) {
  for (RecoveryOp op : all_recovery_ops())
    if (name == to_string(op)) return op;
  if (name == "none") return RecoveryOp::None;
  throw usage_error("unknown recovery op: " + name);
}

const std::vector<RecoveryOp>& all_recovery_ops() {
  static const std::vector<RecoveryOp> ops = {
      RecoveryOp::SumFirst, RecoveryOp::SumLast,  RecoveryOp::SumPrevMax,
      RecoveryOp::SumPrevAvg, RecoveryOp::AvgLast, RecoveryOp::MaxLast,
  };
  return ops;
}

FunnelConfig FunnelConfig::none(int n_layers) {
  FunnelConfig fc;
  fc.pool_factors.assign(static_cast<size_t>(n_layers) + 1, 1);
  return fc;
}

FunnelConfig FunnelConfig::single(int n_layers, int boundary, RecoveryOp op) {
  if (boundary < 0 || boundary > n_layers)
    throw config_error("funnel boundary out of range");
  FunnelConfig fc = none(n_layers);
  fc.pool_factors[static_cast<size_t>(boundary)] = 2;
  fc.recovery_op = op;
  return fc;
}

void FunnelConfig::validate(int n_layers) const {
  if (static_cast<int>(pool_factors.size()) != n_layers + 1)
    throw config_error("pool_factors must have n_layers + 1 entries");
  int pooling = 0;
  for (int f : pool_factors) {
    if (f != 1 && f != 2) throw config_error("pool factors must be 1 or 2");
    if (f == 2) ++pooling;
  }
  if (pooling > 1) throw config_error("at most one funnel point is supported");
}

bool FunnelConfig::any_pooling() const { return funnel_boundary() >= 0; }

int FunnelConfig::funnel_boundary() const {
  for (size_t i = 0; i < pool_factors.size(); ++i)
    if (pool_factors[i] > 1) return static_cast<int>(i);
  return -1;
}

std::vector<int> pool_positions(const std::vector<int>& positions, int factor) {
  if (factor == 1) return positions;
  if (factor != 2) throw config_error("pool factor must be 1 or 2");
  std::vector<int> out;
  out.reserve((positions.size() + 1) / 2);
  for (size_t i = 0; i < positions.size(); i += 2) out.push_back(positions[i]);
  return out;
}

std::pair<Var, SeqMask> max_pool_seq(const Var& x, const SeqMask& mask, int factor) {
  if (factor == 1) return {x, mask};
  if (factor != 2) throw config_error("pool factor must be 1 or 2");
  const Tensor3& xv = x.value();
  if (mask.batch != xv.batch || mask.seq != xv.seq)
    throw config_error("max_pool_seq: mask shape mismatch");

  const int out_seq = (xv.seq + 1) / 2;
  Tensor3 out(xv.batch, out_seq, xv.dim);
  SeqMask out_mask(xv.batch, out_seq, 0);
  // source row per output feature, -1 for all-invalid windows
  std::vector<int32_t> src(static_cast<size_t>(xv.batch) * out_seq * xv.dim, -1);

  for (int b = 0; b < xv.batch; ++b) {
    for (int os = 0; os < out_seq; ++os) {
      auto orow = out.row(b, os);
      int32_t* osrc = src.data() + (static_cast<size_t>(b) * out_seq + os) * xv.dim;
      bool any = false;
      for (int s = 2 * os; s < std::min(2 * os + 2, xv.seq); ++s) {
        if (!mask.is_valid(b, s)) continue;
        auto irow = xv.row(b, s);
        int32_t r = static_cast<int32_t>(b) * xv.seq + s;
        if (!any) {
          orow = irow;
          for (int d = 0; d < xv.dim; ++d) osrc[d] = r;
          any = true;
        } else {
          for (int d = 0; d < xv.dim; ++d) {
            if (irow(d) > orow(d)) {  // strict: ties keep the first index
              orow(d) = irow(d);
              osrc[d] = r;
            }
          }
        }
      }
      if (any) out_mask.set(b, os, true);
    }
  }

  GradTape* t = pick_tape({&x});
  bool rg = any_grad({&x});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto xn = x.node(), yn = y.node();
    t->record([xn, yn, src = std::move(src)] {
      yn->ensure_grad();
      xn->ensure_grad();
      const int dim = yn->value.dim;
      for (Eigen::Index r = 0; r < yn->grad.data.rows(); ++r) {
        const int32_t* rs = src.data() + static_cast<size_t>(r) * dim;
        for (int d = 0; d < dim; ++d)
          if (rs[d] >= 0) xn->grad.data(rs[d], d) += yn->grad.data(r, d);
      }
    });
  }
  return {y, out_mask};
}

std::pair<Tensor3, SeqMask> max_pool_seq(const Tensor3& x, const SeqMask& mask, int factor) {
  auto [y, m] = max_pool_seq(constant(x), mask, factor);
  return {y.value(), m};
}

Var tile_upsample(const Var& x, int factor, int target_len) {
  const Tensor3& xv = x.value();
  if (factor < 1 || target_len < 1) throw config_error("tile_upsample: bad arguments");
  if ((target_len + factor - 1) / factor != xv.seq)
    throw config_error("tile_upsample: target_len does not match pooled length");

  Tensor3 out(xv.batch, target_len, xv.dim);
  for (int b = 0; b < xv.batch; ++b)
    for (int s = 0; s < target_len; ++s) out.row(b, s) = xv.row(b, s / factor);

  GradTape* t = pick_tape({&x});
  bool rg = any_grad({&x});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto xn = x.node(), yn = y.node();
    t->record([xn, yn, factor, target_len] {
      yn->ensure_grad();
      xn->ensure_grad();
      const int B = xn->value.batch;
      for (int b = 0; b < B; ++b)
        for (int s = 0; s < target_len; ++s)
          xn->grad.row(b, s / factor) += yn->grad.row(b, s);
    });
  }
  return y;
}

Tensor3 tile_upsample(const Tensor3& x, int factor, int target_len) {
  return tile_upsample(constant(x), factor, target_len).value();
}

Var recover(const Var& tiled, const LayerCache& cache, RecoveryOp op) {
  switch (op) {
    case RecoveryOp::SumFirst: return add(tiled, cache.first_full);
    case RecoveryOp::SumLast: return add(tiled, cache.last_full);
    case RecoveryOp::SumPrevMax: return add(tiled, cache.running_max);
    case RecoveryOp::SumPrevAvg: return add(tiled, cache.running_avg);
    case RecoveryOp::AvgLast: return scale(add(tiled, cache.last_full), 0.5);
    case RecoveryOp::MaxLast: return emax(tiled, cache.last_full);
    case RecoveryOp::None: break;
  }
  throw usage_error("recover called with op none");
}

}  // namespace funnel
