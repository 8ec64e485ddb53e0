// Experiment runner: data generation, training, evaluation, the funnel-layer
// and recovery-op sweeps, the latency bench, and the analytic FLOPs table.
// Exit codes: 0 ok, 2 usage/config error, 3 input/file error, 4 internal.
#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "funnel/cost_model.hpp"
#include "funnel/model.hpp"
#include "funnel/sweep.hpp"
#include "funnel/tasks.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace funnel;

namespace {

struct Options {
  std::string config_path;
  std::string out_dir = "out";
  uint64_t seed = 0;
  int n_seeds = 5;
  std::vector<int> layers;
  std::string recovery = "avg_last";
  std::string scenario;  // empty = plain supervised training, no pretrain phase
  int steps = 0;         // 0 = keep config value
  std::string task_name = "token";
  std::string conll_path;
  std::string checkpoint;
  int seq = 0;   // 0 = task default / max_seq for bench
  int batch = 0;
  int n_examples = 1000;
  int n_reps = 9;
  int n_warmup = 2;

  ModelConfig mc;
  TrainConfig tc;
  int task_seq_sentence = 32;
  int task_seq_token = 16;
};

// Overlay config-file values onto the built-in defaults; CLI flags win later.
void load_config_file(Options& o) {
  if (o.config_path.empty()) return;
  std::ifstream in(o.config_path);
  if (!in) throw input_error("cannot open config: " + o.config_path);
  json j;
  try {
    j = json::parse(in, nullptr, true, true);  // allow comments
  } catch (const json::exception& e) {
    throw input_error(std::string("bad config: ") + e.what());
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    ModelConfig& mc = o.mc;
    mc.n_layers = m.value("n_layers", mc.n_layers);
    mc.d_model = m.value("d_model", mc.d_model);
    mc.n_heads = m.value("n_heads", mc.n_heads);
    mc.head_dim = m.value("head_dim", mc.head_dim);
    mc.d_ff = m.value("d_ff", mc.d_ff);
    mc.vocab_size = m.value("vocab_size", mc.vocab_size);
    mc.max_seq = m.value("max_seq", mc.max_seq);
    mc.causal = m.value("causal", mc.causal);
    mc.rope_base = m.value("rope_base", mc.rope_base);
    mc.n_classes = m.value("n_classes", mc.n_classes);
    mc.n_tags = m.value("n_tags", mc.n_tags);
    mc.pooler.n_pool_heads = m.value("n_pool_heads", mc.pooler.n_pool_heads);
    mc.pooler.n_pool_layers = m.value("n_pool_layers", mc.pooler.n_pool_layers);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    TrainConfig& tc = o.tc;
    tc.max_steps = t.value("max_steps", tc.max_steps);
    tc.max_lr = t.value("max_lr", tc.max_lr);
    tc.min_lr_fraction = t.value("min_lr_fraction", tc.min_lr_fraction);
    tc.warmup_steps = t.value("warmup_steps", tc.warmup_steps);
    tc.batch_size = t.value("batch_size", tc.batch_size);
    tc.eval_batch_size = t.value("eval_batch_size", tc.eval_batch_size);
    tc.weight_decay = t.value("weight_decay", tc.weight_decay);
    tc.seed = t.value("seed", tc.seed);
    tc.pretrain_steps = t.value("pretrain_steps", tc.pretrain_steps);
    tc.pretrain_funnel_layer = t.value("pretrain_funnel_layer", tc.pretrain_funnel_layer);
    tc.eval_examples = t.value("eval_examples", tc.eval_examples);
    tc.mask_prob = t.value("mask_prob", tc.mask_prob);
  }
  if (j.contains("task")) {
    const json& t = j["task"];
    o.task_name = t.value("kind", o.task_name);
    o.task_seq_sentence = t.value("sentence_seq", o.task_seq_sentence);
    o.task_seq_token = t.value("token_seq", o.task_seq_token);
    o.conll_path = t.value("conll_path", o.conll_path);
  }
}

TaskSpec make_task(Options& o) {
  TaskSpec task;
  if (o.task_name == "sentence") {
    task.kind = TaskKind::Sentence;
    task.seq = o.seq > 0 ? o.seq : o.task_seq_sentence;
  } else if (o.task_name == "token") {
    task.kind = TaskKind::Token;
    task.seq = o.seq > 0 ? o.seq : o.task_seq_token;
  } else if (o.task_name == "conll") {
    task.kind = TaskKind::Token;
    task.from_file = true;
    if (o.conll_path.empty()) throw usage_error("conll task needs --conll PATH");
    task.data = parse_conll(o.conll_path, o.mc.vocab_size - 1);
    task.seq = o.mc.max_seq;
    o.mc.n_tags = std::max<int>(2, static_cast<int>(task.data.tag_names.size()));
  } else {
    throw usage_error("unknown task: " + o.task_name + " (sentence|token|conll)");
  }
  if (task.seq > o.mc.max_seq) throw usage_error("task seq exceeds max_seq");
  return task;
}

std::vector<int> default_layers(const ModelConfig& mc) {
  std::vector<int> layers;
  for (int l = 0; l <= mc.n_layers; l += 2) layers.push_back(l);
  return layers;
}

void finish_options(Options& o) {
  o.tc.seed = o.seed;
  if (o.steps > 0) o.tc.max_steps = o.steps;
  if (o.batch > 0) o.tc.batch_size = o.batch;
  fs::create_directories(o.out_dir);
}

void require_grid(Options& o) {
  if (o.layers.empty()) o.layers = default_layers(o.mc);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw input_error("cannot write: " + path);
  out << text;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(Options& o) {
  finish_options(o);
  TaskSpec task = make_task(o);
  Rng rng(derive_seed(o.seed, 0xda7a));
  Batch b = next_batch(task, rng, o.n_examples, o.mc);

  std::ostringstream out;
  if (task.kind == TaskKind::Sentence) {
    for (int i = 0; i < b.tokens.batch; ++i) {
      for (int s = 0; s < b.tokens.seq; ++s) out << b.tokens.at(i, s) << ' ';
      out << "\t" << b.labels[static_cast<size_t>(i)] << "\n";
    }
  } else {
    for (int i = 0; i < b.tokens.batch; ++i) {
      for (int s = 0; s < b.tokens.seq; ++s) {
        if (!b.mask.is_valid(i, s)) continue;
        out << b.tokens.at(i, s) << ' '
            << b.labels[static_cast<size_t>(i) * b.tokens.seq + s] << "\n";
      }
      out << "\n";
    }
  }
  const std::string path = o.out_dir + "/" + task.name() + "_data.txt";
  write_text(path, out.str());
  std::cout << "wrote " << b.tokens.batch << " examples to " << path << "\n";
  return 0;
}

int cmd_train(Options& o) {
  finish_options(o);
  TaskSpec task = make_task(o);
  if (o.layers.size() > 1)
    throw usage_error("train takes a single --layers entry (the funnel layer, 0 = none)");
  FunnelConfig fc =
      o.layers.size() == 1 && o.layers[0] > 0
          ? FunnelConfig::single(o.mc.n_layers, o.layers[0], recovery_from_string(o.recovery))
          : FunnelConfig::none(o.mc.n_layers);

  ScenarioResult res;
  if (o.scenario.empty()) {
    res.state = ModelState::init(o.mc, fc, o.tc.seed);
    train_task(res.state, task, o.tc, &res.history);
    Rng eval_rng(derive_seed(o.tc.seed, 0xe7a1));
    res.eval = evaluate(res.state,
                        make_eval_batches(task, eval_rng, o.tc.eval_examples,
                                          o.tc.eval_batch_size, o.mc),
                        task.kind);
  } else {
    res = run_scenario(scenario_from_string(o.scenario), o.mc, fc, o.tc, task);
  }

  save_checkpoint(res.state, o.out_dir + "/model.ckpt");
  std::ostringstream hist;
  hist << "step,lr,loss\n";
  for (const StepRecord& s : res.history)
    hist << s.step << ',' << format_real(s.lr) << ',' << format_real(s.loss) << '\n';
  write_text(o.out_dir + "/train_history.csv", hist.str());

  std::ostringstream ev;
  ev << res.eval.metric_name() << "," << format_real(res.eval.metric()) << "\n";
  write_text(o.out_dir + "/eval.csv", ev.str());
  std::cout << res.eval.metric_name() << " = " << format_real(res.eval.metric()) << "\n";
  return 0;
}

int cmd_eval(Options& o) {
  finish_options(o);
  if (o.checkpoint.empty()) throw usage_error("eval needs --ckpt PATH");
  ModelState state = load_checkpoint(o.checkpoint);
  o.mc = state.config;
  TaskSpec task = make_task(o);
  Rng eval_rng(derive_seed(o.tc.seed, 0xe7a1));
  EvalResult ev = evaluate(state,
                           make_eval_batches(task, eval_rng, o.tc.eval_examples,
                                             o.tc.eval_batch_size, state.config),
                           task.kind);
  std::ostringstream out;
  out << ev.metric_name() << "," << format_real(ev.metric()) << "\n";
  write_text(o.out_dir + "/eval.csv", out.str());
  std::cout << ev.metric_name() << " = " << format_real(ev.metric()) << "\n";
  return 0;
}

SweepConfig make_sweep_config(Options& o) {
  require_grid(o);
  SweepConfig cfg;
  cfg.task = make_task(o);  // may adjust o.mc.n_tags for conll
  cfg.mc = o.mc;
  cfg.tc = o.tc;
  cfg.layers = o.layers;
  cfg.recovery = recovery_from_string(o.recovery);
  cfg.n_seeds = o.n_seeds;
  cfg.scenario = o.scenario.empty() ? Scenario::NormalPretrainThenFunnelFinetune
                                    : scenario_from_string(o.scenario);
  return cfg;
}

int cmd_sweep_funnel_layer(Options& o) {
  finish_options(o);
  SweepConfig cfg = make_sweep_config(o);
  std::vector<RunRecord> runs = sweep_funnel_layer(cfg);
  std::vector<AggregateRow> agg = aggregate(runs);
  write_runs_csv(o.out_dir + "/runs.csv", runs);
  write_aggregate_csv(o.out_dir + "/aggregate.csv", agg);
  write_plot_csv(o.out_dir + "/plot.csv", agg);
  for (const AggregateRow& a : agg)
    std::cout << "layer " << a.funnel_layer << ": " << a.metric_name << " "
              << format_real(a.metric_mean) << " +/- " << format_real(a.metric_std) << "\n";
  return 0;
}

int cmd_sweep_recovery_op(Options& o) {
  finish_options(o);
  SweepConfig cfg = make_sweep_config(o);
  std::vector<RunRecord> runs = sweep_recovery_op(cfg);
  std::vector<AggregateRow> agg = aggregate(runs);
  write_runs_csv(o.out_dir + "/runs.csv", runs);
  write_aggregate_csv(o.out_dir + "/aggregate.csv", agg);
  write_plot_csv(o.out_dir + "/plot.csv", agg);
  const std::string report = recovery_report(agg);
  write_text(o.out_dir + "/summary.txt", report);
  std::cout << report;
  return 0;
}

int cmd_bench(Options& o) {
  finish_options(o);
  require_grid(o);
  BenchConfig cfg;
  cfg.mc = o.mc;
  cfg.recovery = recovery_from_string(o.recovery);
  cfg.layers = o.layers;
  cfg.seq = o.seq > 0 ? o.seq : o.mc.max_seq;
  cfg.batch = o.batch > 0 ? o.batch : 1;
  cfg.n_warmup = o.n_warmup;
  cfg.n_reps = o.n_reps;
  cfg.seed = o.seed;
  std::vector<BenchRow> rows = run_bench(cfg);
  write_bench_csv(o.out_dir + "/bench.csv", rows);
  for (const BenchRow& r : rows)
    std::cout << "layer " << r.funnel_layer << ": flops_savings "
              << format_real(r.flops_savings) << ", latency " << format_real(r.latency_median_ms)
              << " ms, latency_savings " << format_real(r.latency_savings) << "\n";
  return 0;
}

int cmd_flops(Options& o) {
  finish_options(o);
  require_grid(o);
  const int seq = o.seq > 0 ? o.seq : o.mc.max_seq;
  RecoveryOp op = recovery_from_string(o.recovery);
  std::ostringstream out;
  out << "funnel_layer,recovery_op,seq_len,flops_total,flops_savings\n";
  for (int layer : o.layers) {
    FunnelConfig fc = FunnelConfig::single(o.mc.n_layers, layer, op);
    FlopsReport r = flops_estimate(o.mc, fc, seq);
    out << layer << ',' << to_string(op) << ',' << seq << ',' << r.total << ','
        << format_real(r.savings_ratio) << '\n';
  }
  write_text(o.out_dir + "/flops.csv", out.str());
  std::cout << out.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"funnel-transformer experiment runner"};
  app.require_subcommand(1);

  Options o;
  auto add_common = [&o](CLI::App* cmd) {
    cmd->add_option("--config", o.config_path, "JSON config file");
    cmd->add_option("--seed", o.seed, "base RNG seed");
    cmd->add_option("--seeds", o.n_seeds, "seeds per grid point");
    cmd->add_option("--out", o.out_dir, "output directory");
    cmd->add_option("--layers", o.layers, "funnel layer grid (comma separated)")
        ->delimiter(',');
    cmd->add_option("--recovery", o.recovery, "recovery op name");
    cmd->add_option("--scenario", o.scenario, "training scenario");
    cmd->add_option("--steps", o.steps, "fine-tuning steps");
    cmd->add_option("--task", o.task_name, "sentence|token|conll");
    cmd->add_option("--conll", o.conll_path, "CoNLL column-format file");
    cmd->add_option("--seq", o.seq, "sequence length");
    cmd->add_option("--batch", o.batch, "batch size");
    return cmd;
  };

  auto* gen = add_common(app.add_subcommand("gen-data", "write a synthetic dataset"));
  gen->add_option("--n", o.n_examples, "number of examples");
  auto* train = add_common(app.add_subcommand("train", "train one model"));
  auto* eval = add_common(app.add_subcommand("eval", "evaluate a checkpoint"));
  eval->add_option("--ckpt", o.checkpoint, "checkpoint path");
  auto* sfl = add_common(app.add_subcommand("sweep-funnel-layer", "accuracy vs funnel layer"));
  auto* sro = add_common(app.add_subcommand("sweep-recovery-op", "accuracy vs recovery op"));
  auto* bench = add_common(app.add_subcommand("bench", "latency and FLOPs vs funnel layer"));
  bench->add_option("--reps", o.n_reps, "timed repetitions");
  bench->add_option("--warmup", o.n_warmup, "warmup repetitions");
  auto* flops = add_common(app.add_subcommand("flops", "analytic FLOPs table"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    // Precedence: CLI flag > config file > default. Flags overlapping config
    // keys are restored after the overlay when they were actually passed.
    CLI::App* sub = app.get_subcommands().front();
    const std::string cli_task = o.task_name;
    const std::string cli_conll = o.conll_path;
    const uint64_t cli_seed = o.seed;
    load_config_file(o);
    if (sub->count("--task")) o.task_name = cli_task;
    if (sub->count("--conll")) o.conll_path = cli_conll;
    if (sub->count("--seed"))
      o.seed = cli_seed;
    else
      o.seed = o.tc.seed;
    if (app.got_subcommand(gen)) return cmd_gen_data(o);
    if (app.got_subcommand(train)) return cmd_train(o);
    if (app.got_subcommand(eval)) return cmd_eval(o);
    if (app.got_subcommand(sfl)) return cmd_sweep_funnel_layer(o);
    if (app.got_subcommand(sro)) return cmd_sweep_recovery_op(o);
    if (app.got_subcommand(bench)) return cmd_bench(o);
    if (app.got_subcommand(flops)) return cmd_flops(o);
    return 2;
  } catch (const usage_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const input_error& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 4;
  }
}
