#include "funnel/tape.hpp"

#include <cmath>
#include <limits>

namespace funnel {

namespace {

thread_local bool g_flops_active = false;
thread_local int64_t g_flops_count = 0;

using detail::any_grad;
using detail::pick_tape;
using detail::result;

void count_matmul(int64_t m, int64_t n, int64_t k) {
  if (g_flops_active) g_flops_count += 2 * m * n * k;
}

}  // namespace

void flops_counter_begin() {
  g_flops_active = true;
  g_flops_count = 0;
}

int64_t flops_counter_end() {
  g_flops_active = false;
  return g_flops_count;
}

void flops_counter_add(int64_t n) {
  if (g_flops_active) g_flops_count += n;
}

void GradTape::backward(const Var& loss) {
  if (consumed_) throw usage_error("backward already ran on this tape");
  if (ops_.empty()) throw usage_error("backward before forward");
  if (loss.empty() || loss.tape() != this)
    throw usage_error("loss was not computed on this tape");
  const Tensor3& lv = loss.value();
  if (lv.batch != 1 || lv.seq != 1 || lv.dim != 1)
    throw usage_error("loss must be a scalar");
  loss.node()->ensure_grad();
  loss.node()->grad.data(0, 0) = 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  consumed_ = true;
}

Var matmul(const Var& a, const Var& w) {
  const Tensor3& av = a.value();
  const Tensor3& wv = w.value();
  if (wv.batch != 1) throw config_error("matmul: rhs must have batch 1");
  if (av.dim != wv.seq) throw config_error("matmul: inner dimensions disagree");
  count_matmul(static_cast<int64_t>(av.batch) * av.seq, wv.dim, av.dim);

  Tensor3 out(av.batch, av.seq, wv.dim);
  out.data.noalias() = av.data * wv.data;

  GradTape* t = pick_tape({&a, &w});
  bool rg = any_grad({&a, &w});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto an = a.node(), wn = w.node(), yn = y.node();
    t->record([an, wn, yn] {
      yn->ensure_grad();
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad.data.noalias() += yn->grad.data * wn->value.data.transpose();
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        wn->grad.data.noalias() += an->value.data.transpose() * yn->grad.data;
      }
    });
  }
  return y;
}

Var add(const Var& a, const Var& b) {
  const Tensor3& av = a.value();
  const Tensor3& bv = b.value();
  if (!av.same_shape(bv)) throw config_error("add: shape mismatch");

  Tensor3 out = av;
  out.data += bv.data;

  GradTape* t = pick_tape({&a, &b});
  bool rg = any_grad({&a, &b});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    t->record([an, bn, yn] {
      yn->ensure_grad();
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad.data += yn->grad.data;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad.data += yn->grad.data;
      }
    });
  }
  return y;
}

Var mul(const Var& a, const Var& b) {
  const Tensor3& av = a.value();
  const Tensor3& bv = b.value();
  if (!av.same_shape(bv)) throw config_error("mul: shape mismatch");

  Tensor3 out = av;
  out.data.array() *= bv.data.array();

  GradTape* t = pick_tape({&a, &b});
  bool rg = any_grad({&a, &b});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    t->record([an, bn, yn] {
      yn->ensure_grad();
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad.data.array() += yn->grad.data.array() * bn->value.data.array();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad.data.array() += yn->grad.data.array() * an->value.data.array();
      }
    });
  }
  return y;
}

Var emax(const Var& a, const Var& b) {
  const Tensor3& av = a.value();
  const Tensor3& bv = b.value();
  if (!av.same_shape(bv)) throw config_error("emax: shape mismatch");

  Tensor3 out = av;
  out.data = av.data.cwiseMax(bv.data);

  GradTape* t = pick_tape({&a, &b});
  bool rg = any_grad({&a, &b});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    // ties route to a
    Mat win_a = (av.data.array() >= bv.data.array()).cast<Scalar>();
    auto an = a.node(), bn = b.node(), yn = y.node();
    t->record([an, bn, yn, win_a = std::move(win_a)] {
      yn->ensure_grad();
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad.data.array() += yn->grad.data.array() * win_a.array();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad.data.array() += yn->grad.data.array() * (1.0 - win_a.array());
      }
    });
  }
  return y;
}

Var scale(const Var& a, Scalar c) {
  Tensor3 out = a.value();
  out.data *= c;

  GradTape* t = pick_tape({&a});
  bool rg = any_grad({&a});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto an = a.node(), yn = y.node();
    t->record([an, yn, c] {
      yn->ensure_grad();
      an->ensure_grad();
      an->grad.data += c * yn->grad.data;
    });
  }
  return y;
}

Var add_bias(const Var& x, const Var& bias) {
  const Tensor3& xv = x.value();
  const Tensor3& bv = bias.value();
  if (bv.batch != 1 || bv.seq != 1 || bv.dim != xv.dim)
    throw config_error("add_bias: bias must be (1,1,dim)");

  Tensor3 out = xv;
  out.data.rowwise() += bv.data.row(0);

  GradTape* t = pick_tape({&x, &bias});
  bool rg = any_grad({&x, &bias});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto xn = x.node(), bn = bias.node(), yn = y.node();
    t->record([xn, bn, yn] {
      yn->ensure_grad();
      if (xn->requires_grad) {
        xn->ensure_grad();
        xn->grad.data += yn->grad.data;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad.data.row(0) += yn->grad.data.colwise().sum();
      }
    });
  }
  return y;
}

Var broadcast_batch(const Var& x, int b) {
  const Tensor3& xv = x.value();
  if (xv.batch != 1) throw config_error("broadcast_batch: input must have batch 1");
  if (b < 1) throw config_error("broadcast_batch: batch must be >= 1");

  Tensor3 out(b, xv.seq, xv.dim);
  out.data = xv.data.replicate(b, 1);

  GradTape* t = pick_tape({&x});
  bool rg = any_grad({&x});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto xn = x.node(), yn = y.node();
    t->record([xn, yn, b] {
      yn->ensure_grad();
      xn->ensure_grad();
      int s = xn->value.seq;
      for (int i = 0; i < b; ++i) xn->grad.data += yn->grad.data.middleRows(i * s, s);
    });
  }
  return y;
}

namespace {

// Shared softmax core; qpos/kpos == nullptr means no causal masking.
Var softmax_impl(const Var& x, const SeqMask& mask, const std::vector<int>* qpos,
                 const std::vector<int>* kpos) {
  const Tensor3& xv = x.value();
  if (mask.seq != xv.dim)
    throw config_error("softmax_lastdim: mask length must equal last dim");
  if (mask.batch < 1 || xv.batch % mask.batch != 0)
    throw config_error("softmax_lastdim: mask batch must divide input batch");
  if (qpos && (static_cast<int>(qpos->size()) != xv.seq ||
               static_cast<int>(kpos->size()) != xv.dim))
    throw config_error("softmax_lastdim: causal position lengths disagree");

  const int rep = xv.batch / mask.batch;
  Tensor3 out(xv.batch, xv.seq, xv.dim);
  for (int bi = 0; bi < xv.batch; ++bi) {
    const int mb = bi / rep;
    for (int si = 0; si < xv.seq; ++si) {
      const auto row = xv.row(bi, si);
      auto orow = out.row(bi, si);
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (int j = 0; j < xv.dim; ++j) {
        bool masked = !mask.is_valid(mb, j) || (qpos && (*kpos)[j] > (*qpos)[si]);
        if (!masked && row(j) > mx) mx = row(j);
      }
      if (mx == -std::numeric_limits<Scalar>::infinity())
        throw config_error("empty attention row");
      Scalar denom = 0;
      for (int j = 0; j < xv.dim; ++j) {
        bool masked = !mask.is_valid(mb, j) || (qpos && (*kpos)[j] > (*qpos)[si]);
        Scalar e = masked ? 0.0 : std::exp(row(j) - mx);
        orow(j) = e;
        denom += e;
      }
      orow /= denom;
    }
  }
  require_finite(out, "softmax_lastdim");

  GradTape* t = pick_tape({&x});
  bool rg = any_grad({&x});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    // masked outputs are exactly 0, so dx = y * (dy - sum(y*dy)) vanishes
    // there without consulting the mask again
    auto xn = x.node(), yn = y.node();
    t->record([xn, yn] {
      yn->ensure_grad();
      xn->ensure_grad();
      for (Eigen::Index r = 0; r < yn->value.data.rows(); ++r) {
        auto yrow = yn->value.data.row(r).array();
        auto grow = yn->grad.data.row(r).array();
        Scalar s = (yrow * grow).sum();
        xn->grad.data.row(r).array() += yrow * (grow - s);
      }
    });
  }
  return y;
}

}  // namespace

Var softmax_lastdim(const Var& x, const SeqMask& mask) {
  return softmax_impl(x, mask, nullptr, nullptr);
}

Var softmax_lastdim_causal(const Var& x, const SeqMask& mask,
                           const std::vector<int>& qpos, const std::vector<int>& kpos) {
  return softmax_impl(x, mask, &qpos, &kpos);
}

Var rmsnorm(const Var& x, const Var& gain, Scalar eps) {
  const Tensor3& xv = x.value();
  const Tensor3& gv = gain.value();
  if (gv.batch != 1 || gv.seq != 1 || gv.dim != xv.dim)
    throw config_error("rmsnorm: gain must be (1,1,dim)");

  const Eigen::Index rows = xv.data.rows();
  const Scalar d = static_cast<Scalar>(xv.dim);
  Eigen::VectorXd inv_r(rows);
  for (Eigen::Index r = 0; r < rows; ++r)
    inv_r(r) = 1.0 / std::sqrt(xv.data.row(r).squaredNorm() / d + eps);

  Tensor3 out(xv.batch, xv.seq, xv.dim);
  for (Eigen::Index r = 0; r < rows; ++r)
    out.data.row(r).array() = xv.data.row(r).array() * inv_r(r) * gv.data.row(0).array();
  require_finite(out, "rmsnorm");

  GradTape* t = pick_tape({&x, &gain});
  bool rg = any_grad({&x, &gain});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto xn = x.node(), gn = gain.node(), yn = y.node();
    t->record([xn, gn, yn, inv_r = std::move(inv_r), d] {
      yn->ensure_grad();
      for (Eigen::Index r = 0; r < yn->value.data.rows(); ++r) {
        auto gout = yn->grad.data.row(r).array();
        auto xrow = xn->value.data.row(r).array();
        Scalar ir = inv_r(r);
        if (xn->requires_grad) {
          xn->ensure_grad();
          // u = gout * gain; dx = (u - x * dot(u,x)/(d*r^2)) / r
          auto u = gout * gn->value.data.row(0).array();
          Scalar ux = (u * xrow).sum();
          xn->grad.data.row(r).array() += ir * (u - xrow * (ux * ir * ir / d));
        }
        if (gn->requires_grad) {
          gn->ensure_grad();
          gn->grad.data.row(0).array() += gout * xrow * ir;
        }
      }
    });
  }
  return y;
}

Var gelu(const Var& x) {
  static const Scalar kC = std::sqrt(2.0 / M_PI);
  static const Scalar kA = 0.044715;
  const Tensor3& xv = x.value();

  Tensor3 out(xv.batch, xv.seq, xv.dim);
  out.data.array() =
      0.5 * xv.data.array() *
      (1.0 + ((kC * (xv.data.array() + kA * xv.data.array().cube())).tanh()));

  GradTape* t = pick_tape({&x});
  bool rg = any_grad({&x});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto xn = x.node(), yn = y.node();
    t->record([xn, yn] {
      yn->ensure_grad();
      xn->ensure_grad();
      auto xa = xn->value.data.array();
      auto th = (kC * (xa + kA * xa.cube())).tanh();
      auto dgelu = 0.5 * (1.0 + th) +
                   0.5 * xa * (1.0 - th.square()) * kC * (1.0 + 3.0 * kA * xa.square());
      xn->grad.data.array() += yn->grad.data.array() * dgelu;
    });
  }
  return y;
}

Var rope_apply(const Var& x, const std::vector<int>& positions, int n_heads, Scalar base) {
  const Tensor3& xv = x.value();
  if (static_cast<int>(positions.size()) != xv.seq)
    throw config_error("rope_apply: positions length must equal seq");
  if (xv.dim % n_heads != 0) throw config_error("rope_apply: dim not divisible by heads");
  const int hd = xv.dim / n_heads;
  if (hd % 2 != 0) throw config_error("rope_apply: head dim must be even");

  // angle(s, p) = positions[s] * base^(-2p/hd), shared by every head
  const int pairs = hd / 2;
  Mat cs(xv.seq, pairs), sn(xv.seq, pairs);
  for (int s = 0; s < xv.seq; ++s) {
    for (int p = 0; p < pairs; ++p) {
      Scalar freq = std::pow(base, -2.0 * p / static_cast<Scalar>(hd));
      Scalar ang = static_cast<Scalar>(positions[s]) * freq;
      cs(s, p) = std::cos(ang);
      sn(s, p) = std::sin(ang);
    }
  }

  auto rotate = [&](const Mat& src, Mat& dst, bool inverse) {
    for (Eigen::Index r = 0; r < src.rows(); ++r) {
      int s = static_cast<int>(r % xv.seq);
      for (int h = 0; h < n_heads; ++h) {
        for (int p = 0; p < pairs; ++p) {
          int i0 = h * hd + 2 * p, i1 = i0 + 1;
          Scalar c = cs(s, p), sg = inverse ? -sn(s, p) : sn(s, p);
          Scalar a = src(r, i0), b = src(r, i1);
          dst(r, i0) = a * c - b * sg;
          dst(r, i1) = a * sg + b * c;
        }
      }
    }
  };

  Tensor3 out(xv.batch, xv.seq, xv.dim);
  rotate(xv.data, out.data, false);

  GradTape* t = pick_tape({&x});
  bool rg = any_grad({&x});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto xn = x.node(), yn = y.node();
    t->record([xn, yn, cs = std::move(cs), sn = std::move(sn), n_heads, hd, pairs] {
      yn->ensure_grad();
      xn->ensure_grad();
      const int seq = xn->value.seq;
      for (Eigen::Index r = 0; r < yn->grad.data.rows(); ++r) {
        int s = static_cast<int>(r % seq);
        for (int h = 0; h < n_heads; ++h) {
          for (int p = 0; p < pairs; ++p) {
            int i0 = h * hd + 2 * p, i1 = i0 + 1;
            Scalar c = cs(s, p), sg = sn(s, p);
            Scalar ga = yn->grad.data(r, i0), gb = yn->grad.data(r, i1);
            // transpose of the forward rotation
            xn->grad.data(r, i0) += ga * c + gb * sg;
            xn->grad.data(r, i1) += -ga * sg + gb * c;
          }
        }
      }
    });
  }
  return y;
}

Var head_scores(const Var& q, const Var& k, int n_heads, Scalar sc) {
  const Tensor3& qv = q.value();
  const Tensor3& kv = k.value();
  if (qv.batch != kv.batch || qv.dim != kv.dim)
    throw config_error("head_scores: batch/dim mismatch");
  if (qv.dim % n_heads != 0) throw config_error("head_scores: dim not divisible by heads");
  const int hd = qv.dim / n_heads;
  count_matmul(static_cast<int64_t>(qv.batch) * n_heads * qv.seq, kv.seq, hd);

  Tensor3 out(qv.batch * n_heads, qv.seq, kv.seq);
  for (int b = 0; b < qv.batch; ++b) {
    for (int h = 0; h < n_heads; ++h) {
      out.batch_block(b * n_heads + h).noalias() =
          sc * (qv.batch_block(b).middleCols(h * hd, hd) *
                kv.batch_block(b).middleCols(h * hd, hd).transpose());
    }
  }

  GradTape* t = pick_tape({&q, &k});
  bool rg = any_grad({&q, &k});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto qn = q.node(), kn = k.node(), yn = y.node();
    t->record([qn, kn, yn, n_heads, hd, sc] {
      yn->ensure_grad();
      const int B = qn->value.batch;
      for (int b = 0; b < B; ++b) {
        for (int h = 0; h < n_heads; ++h) {
          auto ds = yn->grad.batch_block(b * n_heads + h);
          if (qn->requires_grad) {
            qn->ensure_grad();
            qn->grad.batch_block(b).middleCols(h * hd, hd).noalias() +=
                sc * (ds * kn->value.batch_block(b).middleCols(h * hd, hd));
          }
          if (kn->requires_grad) {
            kn->ensure_grad();
            kn->grad.batch_block(b).middleCols(h * hd, hd).noalias() +=
                sc * (ds.transpose() * qn->value.batch_block(b).middleCols(h * hd, hd));
          }
        }
      }
    });
  }
  return y;
}

Var head_mix(const Var& probs, const Var& v, int n_heads) {
  const Tensor3& pv = probs.value();
  const Tensor3& vv = v.value();
  if (pv.batch != vv.batch * n_heads)
    throw config_error("head_mix: probs batch must be v batch * heads");
  if (pv.dim != vv.seq) throw config_error("head_mix: probs last dim must equal v seq");
  if (vv.dim % n_heads != 0) throw config_error("head_mix: dim not divisible by heads");
  const int hd = vv.dim / n_heads;
  count_matmul(static_cast<int64_t>(vv.batch) * n_heads * pv.seq, hd, vv.seq);

  Tensor3 out(vv.batch, pv.seq, vv.dim);
  for (int b = 0; b < vv.batch; ++b) {
    for (int h = 0; h < n_heads; ++h) {
      out.batch_block(b).middleCols(h * hd, hd).noalias() =
          pv.batch_block(b * n_heads + h) * vv.batch_block(b).middleCols(h * hd, hd);
    }
  }

  GradTape* t = pick_tape({&probs, &v});
  bool rg = any_grad({&probs, &v});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto pn = probs.node(), vn = v.node(), yn = y.node();
    t->record([pn, vn, yn, n_heads, hd] {
      yn->ensure_grad();
      const int B = vn->value.batch;
      for (int b = 0; b < B; ++b) {
        for (int h = 0; h < n_heads; ++h) {
          auto dout = yn->grad.batch_block(b).middleCols(h * hd, hd);
          if (pn->requires_grad) {
            pn->ensure_grad();
            pn->grad.batch_block(b * n_heads + h).noalias() +=
                dout * vn->value.batch_block(b).middleCols(h * hd, hd).transpose();
          }
          if (vn->requires_grad) {
            vn->ensure_grad();
            vn->grad.batch_block(b).middleCols(h * hd, hd).noalias() +=
                pn->value.batch_block(b * n_heads + h).transpose() * dout;
          }
        }
      }
    });
  }
  return y;
}

Var gather_rows(const Var& table, const TokenIds& ids) {
  const Tensor3& tv = table.value();
  if (tv.batch != 1) throw config_error("gather_rows: table must have batch 1");
  for (int32_t id : ids.ids)
    if (id < 0 || id >= tv.seq) throw input_error("token id out of range");

  Tensor3 out(ids.batch, ids.seq, tv.dim);
  for (int b = 0; b < ids.batch; ++b)
    for (int s = 0; s < ids.seq; ++s) out.row(b, s) = tv.data.row(ids.at(b, s));

  GradTape* t = pick_tape({&table});
  bool rg = any_grad({&table});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto tn = table.node(), yn = y.node();
    t->record([tn, yn, ids] {
      yn->ensure_grad();
      tn->ensure_grad();
      for (int b = 0; b < ids.batch; ++b)
        for (int s = 0; s < ids.seq; ++s)
          tn->grad.data.row(ids.at(b, s)) += yn->grad.row(b, s);
    });
  }
  return y;
}

Var softmax_xent(const Var& logits, const std::vector<int>& labels,
                 const std::vector<Scalar>& weights) {
  const Tensor3& lv = logits.value();
  const size_t n_rows = static_cast<size_t>(lv.batch) * lv.seq;
  if (labels.size() != n_rows || weights.size() != n_rows)
    throw config_error("softmax_xent: labels/weights must have batch*seq entries");

  Scalar wsum = 0;
  for (Scalar w : weights) wsum += w;
  if (!(wsum > 0)) throw config_error("softmax_xent: weight sum must be positive");

  Mat probs(lv.data.rows(), lv.data.cols());
  Scalar loss = 0;
  for (Eigen::Index r = 0; r < lv.data.rows(); ++r) {
    auto row = lv.data.row(r);
    Scalar mx = row.maxCoeff();
    probs.row(r) = (row.array() - mx).exp();
    Scalar denom = probs.row(r).sum();
    probs.row(r) /= denom;
    if (weights[r] != 0.0) {
      int yl = labels[r];
      if (yl < 0 || yl >= lv.dim) throw config_error("softmax_xent: label out of range");
      loss += weights[r] * (std::log(denom) + mx - row(yl));
    }
  }
  loss /= wsum;

  Tensor3 out(1, 1, 1);
  out.data(0, 0) = loss;
  require_finite(out, "softmax_xent");

  GradTape* t = pick_tape({&logits});
  bool rg = any_grad({&logits});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto ln = logits.node(), yn = y.node();
    t->record([ln, yn, probs = std::move(probs), labels, weights, wsum] {
      yn->ensure_grad();
      ln->ensure_grad();
      Scalar g0 = yn->grad.data(0, 0);
      for (Eigen::Index r = 0; r < ln->value.data.rows(); ++r) {
        if (weights[r] == 0.0) continue;
        Scalar c = g0 * weights[r] / wsum;
        ln->grad.data.row(r) += c * probs.row(r);
        ln->grad.data(r, labels[r]) -= c;
      }
    });
  }
  return y;
}

Var sum_all(const Var& x) {
  Tensor3 out(1, 1, 1);
  out.data(0, 0) = x.value().data.sum();

  GradTape* t = pick_tape({&x});
  bool rg = any_grad({&x});
  Var y = result(t, std::move(out), rg);
  if (t && rg) {
    auto xn = x.node(), yn = y.node();
    t->record([xn, yn] {
      yn->ensure_grad();
      xn->ensure_grad();
      xn->grad.data.array() += yn->grad.data(0, 0);
    });
  }
  return y;
}

}  // namespace funnel
