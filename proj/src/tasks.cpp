#include "funnel/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace funnel {

void TrainConfig::validate() const {
  if (max_steps < 1) throw config_error("max_steps must be positive");
  if (!(max_lr > 0)) throw config_error("max_lr must be positive");
  if (!(min_lr_fraction > 0) || min_lr_fraction > 1)
    throw config_error("min_lr_fraction must be in (0, 1]");
  if (warmup_steps < 0 || warmup_steps >= max_steps)
    throw config_error("warmup_steps must be below max_steps");
  if (batch_size < 1 || eval_batch_size < 1) throw config_error("batch sizes must be positive");
  if (weight_decay < 0) throw config_error("weight_decay must be >= 0");
  if (pretrain_steps < 0) throw config_error("pretrain_steps must be >= 0");
  if (eval_examples < 1) throw config_error("eval_examples must be positive");
  if (!(mask_prob > 0) || mask_prob >= 1) throw config_error("mask_prob must be in (0, 1)");
}

Scalar lr_at(const TrainConfig& tc, int step) {
  if (step <= tc.warmup_steps) {
    if (tc.warmup_steps == 0) return tc.max_lr;
    return tc.max_lr * static_cast<Scalar>(step) / static_cast<Scalar>(tc.warmup_steps);
  }
  const Scalar min_lr = tc.max_lr * tc.min_lr_fraction;
  const Scalar t = static_cast<Scalar>(step - tc.warmup_steps) /
                   static_cast<Scalar>(tc.max_steps - tc.warmup_steps);
  return min_lr + (tc.max_lr - min_lr) * 0.5 * (1.0 + std::cos(M_PI * std::min(t, 1.0)));
}

int sentence_label(const std::vector<int32_t>& tokens, int vocab) {
  int low = 0;
  for (int32_t t : tokens)
    if (t < vocab / 2) ++low;
  return 2 * low > static_cast<int>(tokens.size()) ? 1 : 0;
}

std::vector<int> duplicate_tags(const std::vector<int32_t>& tokens) {
  std::vector<int> tags(tokens.size(), 0);
  for (size_t i = 1; i < tokens.size(); ++i)
    tags[i] = tokens[i] == tokens[i - 1] ? 1 : 0;
  return tags;
}

Batch gen_sentence_batch(Rng& rng, int n, int seq, int vocab) {
  if (vocab < 4) throw config_error("sentence task needs vocab >= 4");
  Batch b;
  b.tokens = TokenIds(n, seq);
  b.mask = SeqMask::all_valid(n, seq);
  b.labels.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::vector<int32_t> row(static_cast<size_t>(seq));
    for (int s = 0; s < seq; ++s) {
      row[static_cast<size_t>(s)] = static_cast<int32_t>(rng.uniform_int(vocab - 1));
      b.tokens.at(i, s) = row[static_cast<size_t>(s)];
    }
    b.labels[static_cast<size_t>(i)] = sentence_label(row, vocab);
  }
  return b;
}

Batch gen_token_batch(Rng& rng, int n, int seq, int vocab) {
  if (seq < 2) throw config_error("token task needs seq >= 2");
  Batch b;
  b.tokens = TokenIds(n, seq);
  b.mask = SeqMask::all_valid(n, seq);
  b.labels.resize(static_cast<size_t>(n) * seq);
  for (int i = 0; i < n; ++i) {
    std::vector<int32_t> row(static_cast<size_t>(seq));
    for (int s = 0; s < seq; ++s) {
      int32_t t = static_cast<int32_t>(rng.uniform_int(vocab - 1));
      if (s > 0 && rng.bernoulli(0.25)) t = row[static_cast<size_t>(s - 1)];
      row[static_cast<size_t>(s)] = t;
      b.tokens.at(i, s) = t;
    }
    std::vector<int> tags = duplicate_tags(row);
    for (int s = 0; s < seq; ++s)
      b.labels[static_cast<size_t>(i) * seq + s] = tags[static_cast<size_t>(s)];
  }
  return b;
}

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

ConllDataset parse_conll(const std::string& path, int hash_buckets) {
  if (hash_buckets < 1) throw config_error("hash_buckets must be positive");
  std::ifstream in(path);
  if (!in) throw input_error("cannot open: " + path);

  ConllDataset ds;
  ds.hash_buckets = hash_buckets;
  std::vector<std::string> sent_tokens;
  std::vector<int> sent_tags;

  auto tag_id = [&ds](const std::string& tag) {
    for (size_t i = 0; i < ds.tag_names.size(); ++i)
      if (ds.tag_names[i] == tag) return static_cast<int>(i);
    ds.tag_names.push_back(tag);
    return static_cast<int>(ds.tag_names.size() - 1);
  };
  auto flush = [&] {
    if (sent_tokens.empty()) return;
    std::vector<int32_t> ids;
    ids.reserve(sent_tokens.size());
    for (const auto& t : sent_tokens)
      ids.push_back(static_cast<int32_t>(fnv1a64(t) % static_cast<uint64_t>(ds.hash_buckets)));
    ds.tokens.push_back(std::move(sent_tokens));
    ds.token_ids.push_back(std::move(ids));
    ds.tag_ids.push_back(std::move(sent_tags));
    sent_tokens.clear();
    sent_tags.clear();
  };

  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::vector<std::string> cols;
    std::string col;
    while (ss >> col) cols.push_back(col);
    if (cols.empty()) {
      flush();
      continue;
    }
    if (cols.front().rfind("-DOCSTART-", 0) == 0) continue;
    if (cols.size() < 2)
      throw input_error("line " + std::to_string(line_no) + ": expected token and tag columns");
    sent_tokens.push_back(cols.front());
    sent_tags.push_back(tag_id(cols.back()));
  }
  flush();
  return ds;
}

namespace {

Batch conll_batch(const ConllDataset& ds, const std::vector<size_t>& picks, int max_seq) {
  int seq = 2;
  for (size_t idx : picks)
    seq = std::max(seq, static_cast<int>(ds.token_ids[idx].size()));
  seq = std::min(seq, max_seq);

  const int n = static_cast<int>(picks.size());
  Batch b;
  b.tokens = TokenIds(n, seq);
  b.mask = SeqMask(n, seq, 0);
  b.labels.assign(static_cast<size_t>(n) * seq, 0);
  for (int i = 0; i < n; ++i) {
    const auto& ids = ds.token_ids[picks[static_cast<size_t>(i)]];
    const auto& tags = ds.tag_ids[picks[static_cast<size_t>(i)]];
    const int len = std::min(static_cast<int>(ids.size()), seq);
    for (int s = 0; s < len; ++s) {
      b.tokens.at(i, s) = ids[static_cast<size_t>(s)];
      b.labels[static_cast<size_t>(i) * seq + s] = tags[static_cast<size_t>(s)];
      b.mask.set(i, s, true);
    }
    if (len == 0) b.mask.set(i, 0, true);  // degenerate empty sentence
  }
  return b;
}

}  // namespace

Batch next_batch(const TaskSpec& task, Rng& rng, int n, const ModelConfig& mc) {
  if (task.from_file) {
    if (task.data.token_ids.empty()) throw input_error("conll dataset is empty");
    std::vector<size_t> picks(static_cast<size_t>(n));
    for (auto& p : picks)
      p = static_cast<size_t>(rng.uniform_int(static_cast<int>(task.data.token_ids.size())));
    return conll_batch(task.data, picks, mc.max_seq);
  }
  return task.kind == TaskKind::Sentence
             ? gen_sentence_batch(rng, n, task.seq, mc.vocab_size)
             : gen_token_batch(rng, n, task.seq, mc.vocab_size);
}

std::vector<Batch> make_eval_batches(const TaskSpec& task, Rng& rng, int n_examples,
                                     int batch_size, const ModelConfig& mc) {
  std::vector<Batch> out;
  int remaining = n_examples;
  while (remaining > 0) {
    const int n = std::min(batch_size, remaining);
    out.push_back(next_batch(task, rng, n, mc));
    remaining -= n;
  }
  return out;
}

MlmBatch make_mlm(const Batch& batch, Rng& rng, int mask_token, Scalar p) {
  MlmBatch m;
  m.tokens = batch.tokens;
  const size_t total = batch.tokens.ids.size();
  m.labels.assign(total, 0);
  m.weights.assign(total, 0.0);
  bool any = false;
  for (int b = 0; b < batch.tokens.batch; ++b) {
    for (int s = 0; s < batch.tokens.seq; ++s) {
      if (!batch.mask.is_valid(b, s)) continue;
      if (!rng.bernoulli(p)) continue;
      const size_t i = static_cast<size_t>(b) * batch.tokens.seq + s;
      m.labels[i] = batch.tokens.ids[i];
      m.weights[i] = 1.0;
      m.tokens.ids[i] = static_cast<int32_t>(mask_token);
      any = true;
    }
  }
  if (!any) {  // keep the loss well-defined
    for (int s = 0; s < batch.tokens.seq && !any; ++s) {
      if (!batch.mask.is_valid(0, s)) continue;
      const size_t i = static_cast<size_t>(s);
      m.labels[i] = batch.tokens.ids[i];
      m.weights[i] = 1.0;
      m.tokens.ids[i] = static_cast<int32_t>(mask_token);
      any = true;
    }
  }
  return m;
}

void AdamW::step(ParamStore& params, Scalar lr) {
  const auto& entries = params.entries();
  if (m_.empty()) {
    m_.reserve(entries.size());
    v_.reserve(entries.size());
    for (const auto& [_, node] : entries) {
      m_.push_back(Mat::Zero(node->value.data.rows(), node->value.data.cols()));
      v_.push_back(Mat::Zero(node->value.data.rows(), node->value.data.cols()));
    }
  }
  if (m_.size() != entries.size()) throw config_error("optimizer bound to a different model");

  ++t_;
  const Scalar bc1 = 1.0 - std::pow(beta1_, static_cast<Scalar>(t_));
  const Scalar bc2 = 1.0 - std::pow(beta2_, static_cast<Scalar>(t_));
  for (size_t i = 0; i < entries.size(); ++i) {
    auto& node = entries[i].second;
    node->ensure_grad();
    const Mat& g = node->grad.data;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    node->value.data.array() -=
        lr * ((m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_) +
              weight_decay_ * node->value.data.array());
  }
}

EvalResult evaluate(const ModelState& state, const std::vector<Batch>& batches,
                    TaskKind kind) {
  int64_t correct = 0, total = 0, tp = 0, fp = 0, fn = 0;
  for (const Batch& b : batches) {
    Var logits = kind == TaskKind::Sentence
                     ? forward_sentence(state, b.tokens, b.mask, nullptr)
                     : forward_tokens(state, b.tokens, b.mask, nullptr);
    const Tensor3& lv = logits.value();
    for (int i = 0; i < b.tokens.batch; ++i) {
      if (kind == TaskKind::Sentence) {
        Eigen::Index pred;
        lv.row(i, 0).maxCoeff(&pred);
        correct += pred == b.labels[static_cast<size_t>(i)] ? 1 : 0;
        ++total;
      } else {
        for (int s = 0; s < b.tokens.seq; ++s) {
          if (!b.mask.is_valid(i, s)) continue;
          Eigen::Index pred;
          lv.row(i, s).maxCoeff(&pred);
          const int truth = b.labels[static_cast<size_t>(i) * b.tokens.seq + s];
          correct += pred == truth ? 1 : 0;
          ++total;
          if (pred == 1 && truth == 1) ++tp;
          if (pred == 1 && truth != 1) ++fp;
          if (pred != 1 && truth == 1) ++fn;
        }
      }
    }
  }

  EvalResult r;
  r.kind = kind;
  r.accuracy = total > 0 ? static_cast<Scalar>(correct) / static_cast<Scalar>(total) : 0.0;
  if (kind == TaskKind::Token) {
    r.precision = tp + fp > 0 ? static_cast<Scalar>(tp) / static_cast<Scalar>(tp + fp) : 0.0;
    r.recall = tp + fn > 0 ? static_cast<Scalar>(tp) / static_cast<Scalar>(tp + fn) : 0.0;
    r.f1 = r.precision + r.recall > 0
               ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
               : 0.0;
  }
  return r;
}

const char* to_string(Scenario sc) {
  switch (sc) {
    case Scenario::FunnelAwarePretrainThenFinetune:
      return "funnel_aware_pretrain_then_finetune";
    case Scenario::NormalPretrainThenFunnelFinetune:
      return "normal_pretrain_then_funnel_finetune";
    case Scenario::InferenceOnlyFunnel:
      return "inference_only_funnel";
  }
  return "?";
}

Scenario scenario_from_string(const std::string& name) {
  for (Scenario sc : {Scenario::FunnelAwarePretrainThenFinetune,
                      Scenario::NormalPretrainThenFunnelFinetune,
                      Scenario::InferenceOnlyFunnel})
    if (name == to_string(sc)) return sc;
  throw usage_error("unknown scenario: " + name);
}

namespace {

void train_loop(ModelState& state, const TaskSpec& task, const TrainConfig& tc,
                bool mlm_objective, std::vector<StepRecord>* history, uint64_t data_salt) {
  tc.validate();
  Rng data_rng(derive_seed(tc.seed, data_salt));
  AdamW opt(0.9, 0.999, 1e-8, tc.weight_decay);
  for (int step = 0; step < tc.max_steps; ++step) {
    Batch batch = next_batch(task, data_rng, tc.batch_size, state.config);
    GradTape tape;
    Var loss;
    if (mlm_objective) {
      MlmBatch mb = make_mlm(batch, data_rng, state.config.mask_token(), tc.mask_prob);
      Var logits = forward_lm(state, mb.tokens, batch.mask, &tape);
      loss = softmax_xent(logits, mb.labels, mb.weights);
    } else if (task.kind == TaskKind::Sentence) {
      Var logits = forward_sentence(state, batch.tokens, batch.mask, &tape);
      loss = softmax_xent(logits, batch.labels, std::vector<Scalar>(batch.labels.size(), 1.0));
    } else {
      Var logits = forward_tokens(state, batch.tokens, batch.mask, &tape);
      std::vector<Scalar> weights(batch.labels.size(), 0.0);
      for (int i = 0; i < batch.tokens.batch; ++i)
        for (int s = 0; s < batch.tokens.seq; ++s)
          if (batch.mask.is_valid(i, s))
            weights[static_cast<size_t>(i) * batch.tokens.seq + s] = 1.0;
      loss = softmax_xent(logits, batch.labels, weights);
    }
    tape.backward(loss);
    const Scalar lr = lr_at(tc, step);
    opt.step(state.params, lr);
    state.params.zero_grads();
    if (history) history->push_back({step, lr, loss.value().data(0, 0)});
  }
}

}  // namespace

void train_task(ModelState& state, const TaskSpec& task, const TrainConfig& tc,
                std::vector<StepRecord>* history) {
  train_loop(state, task, tc, false, history, 0xf17e);
}

void pretrain_mlm(ModelState& state, const TaskSpec& task, const TrainConfig& tc,
                  int steps, std::vector<StepRecord>* history) {
  if (steps == 0) return;
  TrainConfig ptc = tc;
  ptc.max_steps = steps;
  ptc.warmup_steps = std::min(tc.warmup_steps, steps / 2);
  train_loop(state, task, ptc, true, history, 0x9de7);
}

ScenarioResult run_scenario(Scenario sc, const ModelConfig& mc, const FunnelConfig& fc,
                            const TrainConfig& tc, const TaskSpec& task) {
  mc.validate();
  fc.validate(mc.n_layers);
  tc.validate();

  ScenarioResult r;
  r.state = ModelState::init(mc, fc, tc.seed);
  switch (sc) {
    case Scenario::FunnelAwarePretrainThenFinetune:
      r.state.funnel =
          FunnelConfig::single(mc.n_layers, tc.pretrain_funnel_layer, fc.recovery_op);
      r.state.funnel.zero_first_cache = fc.zero_first_cache;
      pretrain_mlm(r.state, task, tc, tc.pretrain_steps, &r.history);
      r.state.funnel = fc;
      train_task(r.state, task, tc, &r.history);
      break;
    case Scenario::NormalPretrainThenFunnelFinetune:
      r.state.funnel = FunnelConfig::none(mc.n_layers);
      pretrain_mlm(r.state, task, tc, tc.pretrain_steps, &r.history);
      r.state.funnel = fc;
      train_task(r.state, task, tc, &r.history);
      break;
    case Scenario::InferenceOnlyFunnel:
      r.state.funnel = FunnelConfig::none(mc.n_layers);
      train_task(r.state, task, tc, &r.history);
      r.state.funnel = fc;
      break;
  }

  Rng eval_rng(derive_seed(tc.seed, 0xe7a1));
  std::vector<Batch> eval_set =
      make_eval_batches(task, eval_rng, tc.eval_examples, tc.eval_batch_size, mc);
  r.eval = evaluate(r.state, eval_set, task.kind);
  return r;
}

}  // namespace funnel
