#include "funnel/sweep.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace funnel {

namespace {

FunnelConfig grid_config(const ModelConfig& mc, int layer, RecoveryOp op) {
  // layer 0 = the before-everything boundary is reserved for "no funnel" in
  // accuracy sweeps; bench addresses boundary 0 directly via run_bench.
  if (layer == 0) return FunnelConfig::none(mc.n_layers);
  FunnelConfig fc = FunnelConfig::single(mc.n_layers, layer, op);
  return fc;
}

void check_grid(const ModelConfig& mc, const std::vector<int>& layers) {
  if (layers.empty()) throw usage_error("empty layer grid");
  for (int l : layers)
    if (l < 0 || l > mc.n_layers)
      throw usage_error("layer grid entry out of range: " + std::to_string(l));
}

RunRecord make_record(const SweepConfig& cfg, int layer, RecoveryOp op, uint64_t seed) {
  FunnelConfig fc = grid_config(cfg.mc, layer, op);
  TrainConfig tc = cfg.tc;
  tc.seed = seed;
  ScenarioResult res = run_scenario(cfg.scenario, cfg.mc, fc, tc, cfg.task);

  const int flops_seq = std::min(cfg.task.from_file ? cfg.mc.max_seq : cfg.task.seq,
                                 cfg.mc.max_seq);
  RunRecord rec;
  rec.scenario = to_string(cfg.scenario);
  rec.funnel_layer = layer;
  rec.recovery_op = to_string(op);
  rec.task = cfg.task.name();
  rec.seed = seed;
  rec.steps = tc.max_steps;
  rec.metric_name = res.eval.metric_name();
  rec.metric_value = res.eval.metric();
  rec.flops_savings = flops_estimate(cfg.mc, fc, flops_seq).savings_ratio;
  rec.latency_median_ms = 0.0;
  return rec;
}

}  // namespace

std::vector<RunRecord> sweep_funnel_layer(const SweepConfig& cfg) {
  check_grid(cfg.mc, cfg.layers);
  if (cfg.n_seeds < 1) throw usage_error("n_seeds must be positive");
  std::vector<RunRecord> runs;
  runs.reserve(cfg.layers.size() * static_cast<size_t>(cfg.n_seeds));
  for (int layer : cfg.layers)
    for (int s = 0; s < cfg.n_seeds; ++s)
      runs.push_back(make_record(cfg, layer, cfg.recovery, cfg.tc.seed + static_cast<uint64_t>(s)));
  return runs;
}

std::vector<RunRecord> sweep_recovery_op(const SweepConfig& cfg) {
  if (cfg.task.kind != TaskKind::Token)
    throw usage_error("recovery sweep requires a token-level task");
  check_grid(cfg.mc, cfg.layers);
  if (cfg.n_seeds < 1) throw usage_error("n_seeds must be positive");
  std::vector<RunRecord> runs;
  for (RecoveryOp op : all_recovery_ops())
    for (int layer : cfg.layers)
      for (int s = 0; s < cfg.n_seeds; ++s)
        runs.push_back(make_record(cfg, layer, op, cfg.tc.seed + static_cast<uint64_t>(s)));
  return runs;
}

std::vector<AggregateRow> aggregate(const std::vector<RunRecord>& runs) {
  std::vector<AggregateRow> rows;
  std::vector<std::vector<Scalar>> samples;
  for (const RunRecord& r : runs) {
    size_t slot = rows.size();
    for (size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].funnel_layer == r.funnel_layer && rows[i].recovery_op == r.recovery_op) {
        slot = i;
        break;
      }
    }
    if (slot == rows.size()) {
      AggregateRow a;
      a.funnel_layer = r.funnel_layer;
      a.recovery_op = r.recovery_op;
      a.task = r.task;
      a.metric_name = r.metric_name;
      a.flops_savings = r.flops_savings;
      rows.push_back(a);
      samples.emplace_back();
    }
    samples[slot].push_back(r.metric_value);
  }
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& xs = samples[i];
    const Scalar n = static_cast<Scalar>(xs.size());
    Scalar mean = 0;
    for (Scalar x : xs) mean += x;
    mean /= n;
    Scalar var = 0;
    for (Scalar x : xs) var += (x - mean) * (x - mean);
    rows[i].n_seeds = static_cast<int>(xs.size());
    rows[i].metric_mean = mean;
    rows[i].metric_std = xs.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  }
  return rows;
}

std::string recovery_report(const std::vector<AggregateRow>& agg) {
  // mean over the layer grid per op, preserving first appearance order
  std::vector<std::pair<std::string, std::pair<Scalar, int>>> per_op;
  for (const AggregateRow& a : agg) {
    bool found = false;
    for (auto& [op, acc] : per_op) {
      if (op == a.recovery_op) {
        acc.first += a.metric_mean;
        acc.second += 1;
        found = true;
      }
    }
    if (!found) per_op.push_back({a.recovery_op, {a.metric_mean, 1}});
  }

  std::ostringstream out;
  out << "recovery op grid means:\n";
  Scalar best = -1, avg_last = -1;
  std::string best_op;
  for (const auto& [op, acc] : per_op) {
    const Scalar mean = acc.first / static_cast<Scalar>(acc.second);
    out << "  " << op << " " << format_real(mean) << "\n";
    if (mean > best) {
      best = mean;
      best_op = op;
    }
    if (op == "avg_last") avg_last = mean;
  }
  if (avg_last >= 0 && best_op != "avg_last" && best > avg_last)
    out << "note: avg_last (" << format_real(avg_last) << ") is not the top op; " << best_op
        << " leads with " << format_real(best) << "\n";
  return out.str();
}

std::vector<BenchRow> run_bench(const BenchConfig& cfg) {
  check_grid(cfg.mc, cfg.layers);
  std::vector<BenchRow> rows;
  for (int layer : cfg.layers) {
    FunnelConfig fc = FunnelConfig::single(cfg.mc.n_layers, layer, cfg.recovery);
    ModelState state = ModelState::init(cfg.mc, fc, cfg.seed);
    FlopsReport fr = flops_estimate(cfg.mc, fc, cfg.seq);
    LatencyStats ls = wall_clock_profile(state, cfg.seq, cfg.batch, cfg.n_warmup, cfg.n_reps);

    BenchRow row;
    row.funnel_layer = layer;
    row.recovery_op = to_string(cfg.recovery);
    row.seq_len = cfg.seq;
    row.flops_total = fr.total;
    row.flops_savings = fr.savings_ratio;
    row.latency_median_ms = ls.median_ms;
    row.latency_savings = ls.savings_vs_baseline;
    rows.push_back(row);
  }
  return rows;
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw input_error("cannot write: " + path);
  return out;
}

}  // namespace

void write_runs_csv(const std::string& path, const std::vector<RunRecord>& runs) {
  auto out = open_out(path);
  out << "scenario,funnel_layer,recovery_op,task,seed,steps,metric_name,metric_value,"
         "flops_savings,latency_median_ms\n";
  for (const RunRecord& r : runs) {
    out << r.scenario << ',' << r.funnel_layer << ',' << r.recovery_op << ',' << r.task
        << ',' << r.seed << ',' << r.steps << ',' << r.metric_name << ','
        << format_real(r.metric_value) << ',' << format_real(r.flops_savings) << ','
        << format_real(r.latency_median_ms) << '\n';
  }
}

void write_aggregate_csv(const std::string& path, const std::vector<AggregateRow>& rows) {
  auto out = open_out(path);
  out << "funnel_layer,recovery_op,task,n_seeds,metric_name,metric_mean,metric_std,"
         "flops_savings\n";
  for (const AggregateRow& a : rows) {
    out << a.funnel_layer << ',' << a.recovery_op << ',' << a.task << ',' << a.n_seeds
        << ',' << a.metric_name << ',' << format_real(a.metric_mean) << ','
        << format_real(a.metric_std) << ',' << format_real(a.flops_savings) << '\n';
  }
}

void write_plot_csv(const std::string& path, const std::vector<AggregateRow>& rows) {
  auto out = open_out(path);
  out << "x,y_mean,y_lo,y_hi\n";
  for (const AggregateRow& a : rows) {
    out << a.funnel_layer << ',' << format_real(a.metric_mean) << ','
        << format_real(a.metric_mean - a.metric_std) << ','
        << format_real(a.metric_mean + a.metric_std) << '\n';
  }
}

void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
  auto out = open_out(path);
  out << "funnel_layer,recovery_op,seq_len,flops_total,flops_savings,latency_median_ms,"
         "latency_savings\n";
  for (const BenchRow& r : rows) {
    out << r.funnel_layer << ',' << r.recovery_op << ',' << r.seq_len << ',' << r.flops_total
        << ',' << format_real(r.flops_savings) << ',' << format_real(r.latency_median_ms)
        << ',' << format_real(r.latency_savings) << '\n';
  }
}

}  // namespace funnel
