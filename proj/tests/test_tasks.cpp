#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "funnel/tasks.hpp"

using namespace funnel;

namespace {

ModelConfig task_model() {
  ModelConfig mc;
  mc.n_layers = 2;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.head_dim = 8;
  mc.d_ff = 32;
  mc.vocab_size = 32;
  mc.max_seq = 16;
  mc.pooler.n_pool_heads = 2;
  mc.pooler.n_pool_layers = 1;
  return mc;
}

std::string fixture_path(const char* name) {
  return std::string(FIXTURE_DIR) + "/" + name;
}

}  // namespace

TEST_SUITE("tasks") {

TEST_CASE("sentence labels count the low half of the vocabulary") {
  CHECK(sentence_label({0, 0, 63, 63}, 64) == 0);  // exactly half is not a majority
  CHECK(sentence_label({1, 2, 3}, 64) == 1);
  CHECK(sentence_label({40, 50, 60}, 64) == 0);
  CHECK(sentence_label({31, 32, 31}, 64) == 1);
  CHECK(sentence_label({32, 31, 32}, 64) == 0);
}

TEST_CASE("duplicate tags mark repeats of the previous token") {
  CHECK(duplicate_tags({5, 5, 7}) == std::vector<int>{0, 1, 0});
  CHECK(duplicate_tags({1, 2, 3, 4}) == std::vector<int>{0, 0, 0, 0});
  CHECK(duplicate_tags({9, 9, 9}) == std::vector<int>{0, 1, 1});
  CHECK(duplicate_tags({}).empty());
}

TEST_CASE("sentence batches are balanced and never use the mask token") {
  Rng rng(51);
  Batch b = gen_sentence_batch(rng, 10000, 32, 64);
  double mean = 0;
  for (int lab : b.labels) mean += lab;
  mean /= static_cast<double>(b.labels.size());
  CHECK(mean > 0.4);
  CHECK(mean < 0.6);

  int32_t max_id = 0;
  for (int32_t id : b.tokens.ids) max_id = std::max(max_id, id);
  CHECK(max_id < 63);  // vocab - 1 is reserved

  for (int i = 0; i < 10000; ++i) {
    std::vector<int32_t> row(32);
    for (int s = 0; s < 32; ++s) row[static_cast<size_t>(s)] = b.tokens.at(i, s);
    REQUIRE(b.labels[static_cast<size_t>(i)] == sentence_label(row, 64));
  }
}

TEST_CASE("token batches tag the planted duplicates") {
  Rng rng(52);
  Batch b = gen_token_batch(rng, 2000, 16, 64);
  int64_t positives = 0;
  for (int i = 0; i < 2000; ++i) {
    std::vector<int32_t> row(16);
    for (int s = 0; s < 16; ++s) row[static_cast<size_t>(s)] = b.tokens.at(i, s);
    std::vector<int> tags = duplicate_tags(row);
    for (int s = 0; s < 16; ++s) {
      REQUIRE(b.labels[static_cast<size_t>(i) * 16 + s] == tags[static_cast<size_t>(s)]);
      positives += tags[static_cast<size_t>(s)];
    }
  }
  const double rate = static_cast<double>(positives) / (2000.0 * 16.0);
  CHECK(rate > 0.15);  // 0.25 planting on 15 of 16 positions, minus collisions
  CHECK(rate < 0.35);

  int32_t max_id = 0;
  for (int32_t id : b.tokens.ids) max_id = std::max(max_id, id);
  CHECK(max_id < 63);
}

TEST_CASE("generation is bit-exact under a fixed seed") {
  Rng a(53), b(53), c(54);
  Batch ba = gen_token_batch(a, 8, 8, 32);
  Batch bb = gen_token_batch(b, 8, 8, 32);
  Batch bc = gen_token_batch(c, 8, 8, 32);
  CHECK(ba.tokens.ids == bb.tokens.ids);
  CHECK(ba.labels == bb.labels);
  CHECK(ba.tokens.ids != bc.tokens.ids);
}

TEST_CASE("fnv1a64 matches the reference vectors") {
  CHECK(fnv1a64("") == 14695981039346656037ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("conll parsing: columns, docstart, sentence splits") {
  ConllDataset ds = parse_conll(fixture_path("tiny.conll"), 63);
  REQUIRE(ds.tokens.size() == 2);
  CHECK(ds.tokens[0] == std::vector<std::string>{"EU", "rejects", "German"});
  CHECK(ds.tokens[1] == std::vector<std::string>{"peace", "EU"});
  CHECK(ds.tag_names == std::vector<std::string>{"B-ORG", "O", "B-MISC"});
  CHECK(ds.tag_ids[0] == std::vector<int>{0, 1, 2});
  CHECK(ds.tag_ids[1] == std::vector<int>{1, 0});
  for (size_t sent = 0; sent < ds.tokens.size(); ++sent)
    for (size_t i = 0; i < ds.tokens[sent].size(); ++i)
      CHECK(ds.token_ids[sent][i] ==
            static_cast<int32_t>(fnv1a64(ds.tokens[sent][i]) % 63));
  CHECK(ds.token_ids[0][0] == ds.token_ids[1][1]);  // same surface form, same id
}

TEST_CASE("conll parsing rejects malformed rows and missing files") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "funnel_bad.conll").string();
  {
    std::ofstream out(path);
    out << "ok NNP O\n" << "broken\n";
  }
  CHECK_THROWS_WITH_AS((void)parse_conll(path, 16),
                       "line 2: expected token and tag columns", input_error);
  fs::remove(path);
  CHECK_THROWS_AS((void)parse_conll(path, 16), input_error);

  {
    std::ofstream out(path);
    out << "\n\n";
  }
  CHECK(parse_conll(path, 16).tokens.empty());
  fs::remove(path);
}

TEST_CASE("file-backed batches pad to the longest picked sentence") {
  TaskSpec task;
  task.kind = TaskKind::Token;
  task.from_file = true;
  task.data = parse_conll(fixture_path("tiny.conll"), 31);

  ModelConfig mc = task_model();
  Rng rng(55);
  Batch b = next_batch(task, rng, 6, mc);
  CHECK(b.tokens.batch == 6);
  CHECK(b.tokens.seq >= 2);
  CHECK(b.tokens.seq <= 3);
  for (int i = 0; i < 6; ++i) {
    int len = 0;
    for (int s = 0; s < b.tokens.seq; ++s) len += b.mask.is_valid(i, s) ? 1 : 0;
    REQUIRE((len == 2 || len == 3));
    const auto& want = task.data.token_ids[len == 3 ? 0 : 1];
    for (int s = 0; s < len; ++s) REQUIRE(b.tokens.at(i, s) == want[static_cast<size_t>(s)]);
    for (int s = len; s < b.tokens.seq; ++s) {
      CHECK(!b.mask.is_valid(i, s));
      CHECK(b.labels[static_cast<size_t>(i) * b.tokens.seq + s] == 0);
    }
  }
}

TEST_CASE("learning rate schedule endpoints and shape") {
  TrainConfig tc;
  tc.max_steps = 1000;
  tc.warmup_steps = 100;
  tc.max_lr = 3e-3;
  tc.min_lr_fraction = 0.1;
  CHECK(lr_at(tc, 0) == 0.0);
  CHECK(lr_at(tc, 50) == doctest::Approx(1.5e-3).epsilon(1e-12));
  CHECK(lr_at(tc, 100) == 3e-3);
  CHECK(lr_at(tc, 1000) == doctest::Approx(3e-4).epsilon(1e-9));
  CHECK(lr_at(tc, 101) < 3e-3);
  CHECK(lr_at(tc, 101) > lr_at(tc, 500));
  CHECK(lr_at(tc, 500) > lr_at(tc, 999));

  tc.warmup_steps = 0;
  CHECK(lr_at(tc, 0) == 3e-3);
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  tc.validate();
  tc.warmup_steps = tc.max_steps;
  CHECK_THROWS_AS(tc.validate(), config_error);
  tc = TrainConfig{};
  tc.mask_prob = 1.0;
  CHECK_THROWS_AS(tc.validate(), config_error);
  tc = TrainConfig{};
  tc.min_lr_fraction = 0.0;
  CHECK_THROWS_AS(tc.validate(), config_error);
}

TEST_CASE("masked-token corruption wiring") {
  Rng gen(56);
  Batch b = gen_token_batch(gen, 4, 8, 32);
  b.mask.set(2, 7, false);

  Rng mr(57);
  MlmBatch m = make_mlm(b, mr, 31, 0.5);
  int masked = 0;
  for (int i = 0; i < 4; ++i) {
    for (int s = 0; s < 8; ++s) {
      const size_t idx = static_cast<size_t>(i) * 8 + s;
      if (m.weights[idx] == 1.0) {
        ++masked;
        CHECK(b.mask.is_valid(i, s));
        CHECK(m.tokens.ids[idx] == 31);
        CHECK(m.labels[idx] == b.tokens.ids[idx]);
      } else {
        CHECK(m.weights[idx] == 0.0);
        CHECK(m.tokens.ids[idx] == b.tokens.ids[idx]);
      }
    }
  }
  CHECK(masked > 0);

  // a vanishing rate still masks at least one position
  Rng mr2(58);
  MlmBatch forced = make_mlm(b, mr2, 31, 1e-12);
  Scalar wsum = 0;
  for (Scalar w : forced.weights) wsum += w;
  CHECK(wsum == 1.0);
}

TEST_CASE("optimizer is a no-op on zero gradients without decay") {
  ModelConfig mc = task_model();
  ModelState st = ModelState::init(mc, FunnelConfig::none(mc.n_layers), 59);
  std::vector<Mat> before;
  for (const auto& [_, node] : st.params.entries()) before.push_back(node->value.data);

  AdamW opt(0.9, 0.999, 1e-8, 0.0);
  st.params.zero_grads();
  opt.step(st.params, 1e-3);
  for (size_t i = 0; i < before.size(); ++i)
    CHECK((st.params.entries()[i].second->value.data - before[i]).cwiseAbs().maxCoeff() == 0.0);

  // decoupled decay shrinks weights even with zero gradients
  AdamW decay(0.9, 0.999, 1e-8, 0.5);
  st.params.zero_grads();
  decay.step(st.params, 1e-2);
  for (size_t i = 0; i < before.size(); ++i) {
    Mat want = before[i].array() - 1e-2 * (0.5 * before[i].array());
    CHECK((st.params.entries()[i].second->value.data - want).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("evaluation agrees with an independent confusion-matrix oracle") {
  ModelConfig mc = task_model();
  ModelState st = ModelState::init(mc, FunnelConfig::none(mc.n_layers), 60);
  TaskSpec task;
  task.kind = TaskKind::Token;
  task.seq = 8;
  Rng rng(61);
  std::vector<Batch> batches = make_eval_batches(task, rng, 24, 10, mc);
  REQUIRE(batches.size() == 3);
  CHECK(batches[2].tokens.batch == 4);

  EvalResult got = evaluate(st, batches, TaskKind::Token);

  int64_t correct = 0, total = 0, tp = 0, fp = 0, fn = 0;
  for (const Batch& b : batches) {
    Tensor3 lv = forward_tokens(st, b.tokens, b.mask, nullptr).value();
    for (int i = 0; i < b.tokens.batch; ++i) {
      for (int s = 0; s < b.tokens.seq; ++s) {
        if (!b.mask.is_valid(i, s)) continue;
        Eigen::Index pred;
        lv.row(i, s).maxCoeff(&pred);
        const int truth = b.labels[static_cast<size_t>(i) * b.tokens.seq + s];
        correct += pred == truth;
        ++total;
        tp += pred == 1 && truth == 1;
        fp += pred == 1 && truth != 1;
        fn += pred != 1 && truth == 1;
      }
    }
  }
  const double prec = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
  const double rec = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
  CHECK(got.accuracy == doctest::Approx(double(correct) / double(total)).epsilon(1e-12));
  CHECK(got.precision == doctest::Approx(prec).epsilon(1e-12));
  CHECK(got.recall == doctest::Approx(rec).epsilon(1e-12));
  if (prec + rec > 0)
    CHECK(got.f1 == doctest::Approx(2 * prec * rec / (prec + rec)).epsilon(1e-12));
  else
    CHECK(got.f1 == 0.0);
  CHECK(got.metric() == got.f1);

  EvalResult sent = evaluate(st, {gen_sentence_batch(rng, 16, 8, mc.vocab_size)},
                             TaskKind::Sentence);
  CHECK(sent.metric_name() == std::string("accuracy"));
  CHECK(sent.accuracy >= 0.0);
  CHECK(sent.accuracy <= 1.0);
}

TEST_CASE("scenario names round-trip") {
  for (Scenario sc : {Scenario::FunnelAwarePretrainThenFinetune,
                      Scenario::NormalPretrainThenFunnelFinetune,
                      Scenario::InferenceOnlyFunnel})
    CHECK(scenario_from_string(to_string(sc)) == sc);
  CHECK_THROWS_AS((void)scenario_from_string("finetune_maybe"), usage_error);
}

TEST_CASE("short training run reduces the loss") {
  ModelConfig mc = task_model();
  ModelState st = ModelState::init(mc, FunnelConfig::none(mc.n_layers), 62);
  TaskSpec task;
  task.kind = TaskKind::Token;
  task.seq = 8;
  TrainConfig tc;
  tc.max_steps = 60;
  tc.warmup_steps = 10;
  tc.batch_size = 8;
  tc.seed = 62;

  std::vector<StepRecord> hist;
  train_task(st, task, tc, &hist);
  REQUIRE(static_cast<int>(hist.size()) == tc.max_steps);
  Scalar head = 0, tail = 0;
  for (int i = 0; i < 5; ++i) {
    head += hist[static_cast<size_t>(i)].loss;
    tail += hist[hist.size() - 1 - static_cast<size_t>(i)].loss;
  }
  CHECK(tail < head);
  CHECK(hist[10].lr == tc.max_lr);
}

TEST_CASE("scenarios wire the funnel through the right phases") {
  ModelConfig mc = task_model();
  FunnelConfig fc = FunnelConfig::single(mc.n_layers, 1, RecoveryOp::AvgLast);
  TaskSpec task;
  task.kind = TaskKind::Token;
  task.seq = 8;
  TrainConfig tc;
  tc.max_steps = 8;
  tc.warmup_steps = 2;
  tc.batch_size = 4;
  tc.pretrain_steps = 6;
  tc.pretrain_funnel_layer = 1;
  tc.eval_examples = 16;
  tc.eval_batch_size = 8;
  tc.seed = 63;

  ScenarioResult aware = run_scenario(Scenario::FunnelAwarePretrainThenFinetune, mc, fc, tc, task);
  CHECK(aware.history.size() == 14);
  CHECK(aware.state.funnel.pool_factors == fc.pool_factors);
  CHECK(aware.eval.f1 >= 0.0);
  CHECK(aware.eval.f1 <= 1.0);

  ScenarioResult inf = run_scenario(Scenario::InferenceOnlyFunnel, mc, fc, tc, task);
  CHECK(inf.history.size() == 8);
  CHECK(inf.state.funnel.pool_factors == fc.pool_factors);

  // bit-determinism across repeated runs of the same scenario
  ScenarioResult again = run_scenario(Scenario::InferenceOnlyFunnel, mc, fc, tc, task);
  CHECK(again.eval.f1 == inf.eval.f1);
  for (size_t i = 0; i < inf.state.params.entries().size(); ++i)
    CHECK((again.state.params.entries()[i].second->value.data -
           inf.state.params.entries()[i].second->value.data)
              .cwiseAbs()
              .maxCoeff() == 0.0);
}

}  // TEST_SUITE
