#include "funnel/model.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace funnel {

using nlohmann::json;

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || head_dim < 1 || d_ff < 1)
    throw config_error("model dimensions must be positive");
  if (n_heads * head_dim != d_model)
    throw config_error("n_heads * head_dim must equal d_model");
  if (head_dim % 2 != 0) throw config_error("head_dim must be even for rotary pairs");
  if (vocab_size < 4) throw config_error("vocab_size must be at least 4");
  if (max_seq < 2) throw config_error("max_seq must be at least 2");
  if (n_classes < 2 || n_tags < 2) throw config_error("heads need at least 2 classes");
  if (pooler.n_pool_heads < 1 || d_model % pooler.n_pool_heads != 0)
    throw config_error("n_pool_heads must divide d_model");
  if (pooler.n_pool_layers < 0) throw config_error("n_pool_layers must be >= 0");
}

NodeRef ParamStore::add(const std::string& name, Tensor3 v) {
  for (const auto& [n, _] : entries_)
    if (n == name) throw config_error("duplicate parameter name: " + name);
  NodeRef node = make_node(std::move(v), true);
  entries_.emplace_back(name, node);
  return node;
}

const NodeRef& ParamStore::get(const std::string& name) const {
  for (const auto& [n, node] : entries_)
    if (n == name) return node;
  throw config_error("unknown parameter name: " + name);
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const auto& [_, node] : entries_) n += node->value.size();
  return n;
}

void ParamStore::zero_grads() {
  for (const auto& [_, node] : entries_)
    if (node->grad.same_shape(node->value)) node->grad.data.setZero();
}

namespace {

void init_block(ParamStore& ps, Rng& rng, const ModelConfig& mc, const std::string& prefix) {
  const int d = mc.d_model;
  ps.add(prefix + ".attn_norm.gain", Tensor3::constant(1, 1, d, 1.0));
  ps.add(prefix + ".attn.wq", random_normal(rng, 1, d, d, 0.02));
  ps.add(prefix + ".attn.wk", random_normal(rng, 1, d, d, 0.02));
  ps.add(prefix + ".attn.wv", random_normal(rng, 1, d, d, 0.02));
  ps.add(prefix + ".attn.wo", random_normal(rng, 1, d, d, 0.02));
  ps.add(prefix + ".mlp_norm.gain", Tensor3::constant(1, 1, d, 1.0));
  ps.add(prefix + ".mlp.w_gate", random_normal(rng, 1, d, mc.d_ff, 0.02));
  ps.add(prefix + ".mlp.w_up", random_normal(rng, 1, d, mc.d_ff, 0.02));
  ps.add(prefix + ".mlp.w_down", random_normal(rng, 1, mc.d_ff, d, 0.02));
}

Var pvar(const ModelState& st, GradTape* tape, const std::string& name) {
  const NodeRef& n = st.params.get(name);
  return tape ? tape->use(n) : Var(n, nullptr);
}

// Pre-norm attention + pre-norm gated MLP, both residual.
Var run_block(const ModelState& st, GradTape* tape, const std::string& prefix, Var h,
              const SeqMask& mask, const std::vector<int>& positions) {
  const ModelConfig& mc = st.config;
  const Scalar score_scale = 1.0 / std::sqrt(static_cast<Scalar>(mc.head_dim));

  Var a_in = rmsnorm(h, pvar(st, tape, prefix + ".attn_norm.gain"));
  Var q = rope_apply(matmul(a_in, pvar(st, tape, prefix + ".attn.wq")), positions,
                     mc.n_heads, mc.rope_base);
  Var k = rope_apply(matmul(a_in, pvar(st, tape, prefix + ".attn.wk")), positions,
                     mc.n_heads, mc.rope_base);
  Var v = matmul(a_in, pvar(st, tape, prefix + ".attn.wv"));
  Var scores = head_scores(q, k, mc.n_heads, score_scale);
  Var probs = mc.causal ? softmax_lastdim_causal(scores, mask, positions, positions)
                        : softmax_lastdim(scores, mask);
  Var mixed = head_mix(probs, v, mc.n_heads);
  h = add(h, matmul(mixed, pvar(st, tape, prefix + ".attn.wo")));

  Var m_in = rmsnorm(h, pvar(st, tape, prefix + ".mlp_norm.gain"));
  Var gate = gelu(matmul(m_in, pvar(st, tape, prefix + ".mlp.w_gate")));
  Var up = matmul(m_in, pvar(st, tape, prefix + ".mlp.w_up"));
  return add(h, matmul(mul(gate, up), pvar(st, tape, prefix + ".mlp.w_down")));
}

Var embed(const ModelState& st, GradTape* tape, const TokenIds& tokens) {
  Var e = gather_rows(pvar(st, tape, "embed.table"), tokens);
  return scale(e, std::sqrt(static_cast<Scalar>(st.config.d_model)));
}

std::vector<int> iota_positions(int seq) {
  std::vector<int> p(static_cast<size_t>(seq));
  std::iota(p.begin(), p.end(), 0);
  return p;
}

void check_inputs(const ModelState& st, const TokenIds& tokens, const SeqMask& mask) {
  st.config.validate();
  st.funnel.validate(st.config.n_layers);
  if (tokens.seq > st.config.max_seq) throw config_error("sequence longer than max_seq");
  if (tokens.batch != mask.batch || tokens.seq != mask.seq)
    throw config_error("token/mask shape mismatch");
  mask.check_nonempty();
}

}  // namespace

ModelState ModelState::init(const ModelConfig& mc, const FunnelConfig& fc, uint64_t seed) {
  mc.validate();
  fc.validate(mc.n_layers);
  ModelState st;
  st.config = mc;
  st.funnel = fc;
  Rng rng(seed);
  const int d = mc.d_model;

  st.params.add("embed.table", random_normal(rng, 1, mc.vocab_size, d, 0.02));
  for (int i = 0; i < mc.n_layers; ++i)
    init_block(st.params, rng, mc, "layers." + std::to_string(i));
  st.params.add("final_norm.gain", Tensor3::constant(1, 1, d, 1.0));
  st.params.add("lm_head.w", random_normal(rng, 1, d, mc.vocab_size, 0.02));
  st.params.add("lm_head.b", Tensor3::zeros(1, 1, mc.vocab_size));
  st.params.add("token_head.w", random_normal(rng, 1, d, mc.n_tags, 0.02));
  st.params.add("token_head.b", Tensor3::zeros(1, 1, mc.n_tags));
  for (int i = 0; i < mc.pooler.n_pool_layers; ++i)
    init_block(st.params, rng, mc, "pooler.blocks." + std::to_string(i));
  st.params.add("pooler.mha.query", random_normal(rng, 1, 1, d, 0.02));
  st.params.add("pooler.mha.wk", random_normal(rng, 1, d, d, 0.02));
  st.params.add("pooler.mha.wv", random_normal(rng, 1, d, d, 0.02));
  st.params.add("sent_head.w", random_normal(rng, 1, d, mc.n_classes, 0.02));
  st.params.add("sent_head.b", Tensor3::zeros(1, 1, mc.n_classes));
  return st;
}

int64_t param_count(const ModelConfig& mc) {
  const int64_t d = mc.d_model, ff = mc.d_ff, v = mc.vocab_size;
  // per block: two norm gains + four d x d attention mats + gated MLP
  const int64_t block = 2 * d + 4 * d * d + 3 * d * ff;
  int64_t n = v * d;                                   // embed.table
  n += mc.n_layers * block;                            // layers.*
  n += d;                                              // final_norm.gain
  n += d * v + v;                                      // lm head
  n += d * mc.n_tags + mc.n_tags;                      // token head
  n += static_cast<int64_t>(mc.pooler.n_pool_layers) * block;  // pooler blocks
  n += d + 2 * d * d;                                  // pooler query + k,v projections
  n += d * mc.n_classes + mc.n_classes;                // sentence head
  return n;
}

ForwardResult forward(const ModelState& state, const TokenIds& tokens,
                      const SeqMask& mask, GradTape* tape) {
  check_inputs(state, tokens, mask);
  const int f = state.funnel.funnel_boundary();

  ForwardResult r;
  r.full_len = tokens.seq;
  r.mask = mask;
  r.positions = iota_positions(tokens.seq);

  Var h = embed(state, tape, tokens);
  Var avg_sum;

  auto pool_here = [&](int boundary) {
    if (boundary != f) return;
    if (f == 0) {
      // nothing precedes the funnel; every cache slot falls back to the embedding
      r.cache.first_full = r.cache.last_full = h;
      r.cache.running_max = r.cache.running_avg = h;
      r.cache.pre_funnel_count = 0;
    } else {
      r.cache.running_avg = scale(avg_sum, 1.0 / static_cast<Scalar>(f));
    }
    if (state.funnel.zero_first_cache)
      r.cache.first_full = constant(Tensor3::zeros(h.value().batch, h.value().seq, h.value().dim));
    auto pooled = max_pool_seq(h, r.mask, 2);
    h = pooled.first;
    r.mask = pooled.second;
    r.positions = pool_positions(r.positions, 2);
  };

  pool_here(0);
  for (int k = 0; k < state.config.n_layers; ++k) {
    h = run_block(state, tape, "layers." + std::to_string(k), h, r.mask, r.positions);
    if (f > 0 && k < f) {
      if (k == 0) {
        r.cache.first_full = h;
        r.cache.running_max = h;
        avg_sum = h;
      } else {
        r.cache.running_max = emax(r.cache.running_max, h);
        avg_sum = add(avg_sum, h);
      }
      r.cache.last_full = h;
      r.cache.pre_funnel_count = k + 1;
    }
    pool_here(k + 1);
  }

  r.final = h;
  r.pooled_len = h.value().seq;
  return r;
}

Var stack_no_funnel(const ModelState& state, const TokenIds& tokens,
                    const SeqMask& mask, GradTape* tape) {
  check_inputs(state, tokens, mask);
  const std::vector<int> positions = iota_positions(tokens.seq);
  Var h = embed(state, tape, tokens);
  for (int k = 0; k < state.config.n_layers; ++k)
    h = run_block(state, tape, "layers." + std::to_string(k), h, mask, positions);
  return h;
}

Var token_head(const ModelState& state, const Var& h, GradTape* tape) {
  Var n = rmsnorm(h, pvar(state, tape, "final_norm.gain"));
  return add_bias(matmul(n, pvar(state, tape, "token_head.w")),
                  pvar(state, tape, "token_head.b"));
}

Var forward_tokens(const ModelState& state, const TokenIds& tokens,
                   const SeqMask& mask, GradTape* tape) {
  ForwardResult r = forward(state, tokens, mask, tape);
  Var h = r.final;
  if (state.funnel.any_pooling()) {
    if (state.funnel.recovery_op == RecoveryOp::None)
      throw config_error("token task requires recovery");
    Var tiled = tile_upsample(h, 2, r.full_len);
    h = recover(tiled, r.cache, state.funnel.recovery_op);
  }
  return token_head(state, h, tape);
}

Var forward_lm(const ModelState& state, const TokenIds& tokens,
               const SeqMask& mask, GradTape* tape) {
  ForwardResult r = forward(state, tokens, mask, tape);
  Var h = r.final;
  if (state.funnel.any_pooling()) {
    Var tiled = tile_upsample(h, 2, r.full_len);
    h = state.funnel.recovery_op == RecoveryOp::None
            ? tiled
            : recover(tiled, r.cache, state.funnel.recovery_op);
  }
  Var n = rmsnorm(h, pvar(state, tape, "final_norm.gain"));
  return add_bias(matmul(n, pvar(state, tape, "lm_head.w")),
                  pvar(state, tape, "lm_head.b"));
}

Var attention_pool(const ModelState& state, const Var& x, const SeqMask& mask,
                   GradTape* tape) {
  const int heads = state.config.pooler.n_pool_heads;
  const Scalar sc =
      1.0 / std::sqrt(static_cast<Scalar>(state.config.d_model / heads));
  Var q = broadcast_batch(pvar(state, tape, "pooler.mha.query"), x.value().batch);
  Var k = matmul(x, pvar(state, tape, "pooler.mha.wk"));
  Var v = matmul(x, pvar(state, tape, "pooler.mha.wv"));
  Var probs = softmax_lastdim(head_scores(q, k, heads, sc), mask);
  return head_mix(probs, v, heads);
}

Var forward_sentence(const ModelState& state, const TokenIds& tokens,
                     const SeqMask& mask, GradTape* tape) {
  ForwardResult r = forward(state, tokens, mask, tape);
  Var h = rmsnorm(r.final, pvar(state, tape, "final_norm.gain"));
  for (int i = 0; i < state.config.pooler.n_pool_layers; ++i)
    h = run_block(state, tape, "pooler.blocks." + std::to_string(i), h, r.mask, r.positions);
  Var vec = attention_pool(state, h, r.mask, tape);
  return add_bias(matmul(vec, pvar(state, tape, "sent_head.w")),
                  pvar(state, tape, "sent_head.b"));
}

// --------------------------------------------------------------------------
// Checkpoint: "FNL1" magic, u64 JSON header length, JSON header (configs +
// parameter names/shapes in order), then each parameter's doubles raw in
// row-major order, native little-endian.
// --------------------------------------------------------------------------

namespace {

json model_config_to_json(const ModelConfig& mc) {
  return json{{"n_layers", mc.n_layers},
              {"d_model", mc.d_model},
              {"n_heads", mc.n_heads},
              {"head_dim", mc.head_dim},
              {"d_ff", mc.d_ff},
              {"vocab_size", mc.vocab_size},
              {"max_seq", mc.max_seq},
              {"causal", mc.causal},
              {"rope_base", mc.rope_base},
              {"n_classes", mc.n_classes},
              {"n_tags", mc.n_tags},
              {"n_pool_heads", mc.pooler.n_pool_heads},
              {"n_pool_layers", mc.pooler.n_pool_layers}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig mc;
  j.at("n_layers").get_to(mc.n_layers);
  j.at("d_model").get_to(mc.d_model);
  j.at("n_heads").get_to(mc.n_heads);
  j.at("head_dim").get_to(mc.head_dim);
  j.at("d_ff").get_to(mc.d_ff);
  j.at("vocab_size").get_to(mc.vocab_size);
  j.at("max_seq").get_to(mc.max_seq);
  j.at("causal").get_to(mc.causal);
  j.at("rope_base").get_to(mc.rope_base);
  j.at("n_classes").get_to(mc.n_classes);
  j.at("n_tags").get_to(mc.n_tags);
  j.at("n_pool_heads").get_to(mc.pooler.n_pool_heads);
  j.at("n_pool_layers").get_to(mc.pooler.n_pool_layers);
  return mc;
}

json funnel_config_to_json(const FunnelConfig& fc) {
  return json{{"pool_factors", fc.pool_factors},
              {"recovery_op", to_string(fc.recovery_op)},
              {"zero_first_cache", fc.zero_first_cache}};
}

FunnelConfig funnel_config_from_json(const json& j) {
  FunnelConfig fc;
  j.at("pool_factors").get_to(fc.pool_factors);
  fc.recovery_op = recovery_from_string(j.at("recovery_op").get<std::string>());
  j.at("zero_first_cache").get_to(fc.zero_first_cache);
  return fc;
}

constexpr char kMagic[4] = {'F', 'N', 'L', '1'};

}  // namespace

void save_checkpoint(const ModelState& state, const std::string& path) {
  json params = json::array();
  for (const auto& [name, node] : state.params.entries()) {
    params.push_back(json{{"name", name},
                          {"batch", node->value.batch},
                          {"seq", node->value.seq},
                          {"dim", node->value.dim}});
  }
  json header{{"model", model_config_to_json(state.config)},
              {"funnel", funnel_config_to_json(state.funnel)},
              {"params", params}};
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw input_error("cannot write checkpoint: " + path);
  out.write(kMagic, 4);
  uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& [_, node] : state.params.entries()) {
    const Mat& m = node->value.data;
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(Scalar) * m.size()));
  }
  if (!out) throw input_error("short write on checkpoint: " + path);
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw input_error("not a checkpoint file: " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen == 0 || hlen > (1u << 20))
    throw input_error("corrupt checkpoint header: " + path);
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw input_error("truncated checkpoint header: " + path);

  json header;
  try {
    header = json::parse(htext);
  } catch (const json::exception& e) {
    throw input_error(std::string("bad checkpoint header: ") + e.what());
  }

  ModelState st;
  st.config = model_config_from_json(header.at("model"));
  st.funnel = funnel_config_from_json(header.at("funnel"));
  st.config.validate();
  st.funnel.validate(st.config.n_layers);

  for (const auto& p : header.at("params")) {
    Tensor3 t(p.at("batch").get<int>(), p.at("seq").get<int>(), p.at("dim").get<int>());
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(sizeof(Scalar) * t.data.size()));
    if (!in) throw input_error("truncated checkpoint data: " + path);
    st.params.add(p.at("name").get<std::string>(), std::move(t));
  }
  return st;
}

}  // namespace funnel
