#pragma once

#include <string>
#include <vector>

#include "funnel/cost_model.hpp"
#include "funnel/tasks.hpp"

namespace funnel {

// One sweep run. In accuracy sweeps funnel_layer 0 is the no-funnel baseline
// (the charts' x = 0 point); any other value pools at that layer boundary.
// latency_median_ms stays 0 in accuracy sweeps so their CSVs are seed-exact;
// latency belongs to the bench command.
struct RunRecord {
  std::string scenario;
  int funnel_layer = 0;
  std::string recovery_op;
  std::string task;
  uint64_t seed = 0;
  int steps = 0;
  std::string metric_name;
  Scalar metric_value = 0;
  Scalar flops_savings = 0;
  Scalar latency_median_ms = 0;
};

struct SweepConfig {
  ModelConfig mc;
  TrainConfig tc;
  Scenario scenario = Scenario::NormalPretrainThenFunnelFinetune;
  TaskSpec task;
  std::vector<int> layers;  // grid; accuracy sweeps read 0 as "no funnel"
  RecoveryOp recovery = RecoveryOp::AvgLast;
  int n_seeds = 5;
};

// Mean and sample standard deviation over seeds at one grid point.
struct AggregateRow {
  int funnel_layer = 0;
  std::string recovery_op;
  std::string task;
  int n_seeds = 0;
  std::string metric_name;
  Scalar metric_mean = 0;
  Scalar metric_std = 0;
  Scalar flops_savings = 0;
};

std::vector<RunRecord> sweep_funnel_layer(const SweepConfig& cfg);
// Cross product of the six recovery ops with the layer grid; token-level
// tasks only.
std::vector<RunRecord> sweep_recovery_op(const SweepConfig& cfg);

std::vector<AggregateRow> aggregate(const std::vector<RunRecord>& runs);

// Human-readable recovery comparison: per-op mean over the whole grid, with
// a note when avg_last is not on top (reported, never silently asserted).
std::string recovery_report(const std::vector<AggregateRow>& agg);

struct BenchRow {
  int funnel_layer = 0;  // boundary index; 0 pools before layer 0
  std::string recovery_op;
  int seq_len = 0;
  int64_t flops_total = 0;
  double flops_savings = 0;
  double latency_median_ms = 0;
  double latency_savings = 0;
};

struct BenchConfig {
  ModelConfig mc;
  RecoveryOp recovery = RecoveryOp::AvgLast;
  std::vector<int> layers;
  int seq = 128;
  int batch = 1;
  int n_warmup = 2;
  int n_reps = 9;
  uint64_t seed = 0;
};

std::vector<BenchRow> run_bench(const BenchConfig& cfg);

void write_runs_csv(const std::string& path, const std::vector<RunRecord>& runs);
void write_aggregate_csv(const std::string& path, const std::vector<AggregateRow>& rows);
// x = funnel layer, y = metric mean, band = mean +/- std.
void write_plot_csv(const std::string& path, const std::vector<AggregateRow>& rows);
void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows);

// Deterministic number formatting shared by every CSV writer.
std::string format_real(double v);

}  // namespace funnel
