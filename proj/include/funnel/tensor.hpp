#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "funnel/common.hpp"

namespace funnel {

using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// batch x seq x dim activation array, stored row-major by (batch, seq, dim)
// as a (batch*seq) x dim matrix. Row b*seq + s holds position s of batch b.
struct Tensor3 {
  int batch = 0;
  int seq = 0;
  int dim = 0;
  Mat data;

  Tensor3() = default;
  Tensor3(int b, int s, int d) : batch(b), seq(s), dim(d), data(Mat::Zero(b * s, d)) {
    check_dims(b, s, d);
  }

  static Tensor3 zeros(int b, int s, int d) { return Tensor3(b, s, d); }

  static Tensor3 constant(int b, int s, int d, Scalar v) {
    Tensor3 t(b, s, d);
    t.data.setConstant(v);
    return t;
  }

  static Tensor3 from_matrix(int b, int s, int d, Mat m);

  Scalar& at(int b, int s, int d) { return data(b * seq + s, d); }
  Scalar at(int b, int s, int d) const { return data(b * seq + s, d); }

  auto row(int b, int s) { return data.row(b * seq + s); }
  auto row(int b, int s) const { return data.row(b * seq + s); }

  // all positions of one batch element, seq x dim
  auto batch_block(int b) { return data.middleRows(b * seq, seq); }
  auto batch_block(int b) const { return data.middleRows(b * seq, seq); }

  int64_t size() const { return static_cast<int64_t>(batch) * seq * dim; }

  bool same_shape(const Tensor3& o) const {
    return batch == o.batch && seq == o.seq && dim == o.dim;
  }

 private:
  static void check_dims(int b, int s, int d) {
    if (b < 1 || s < 1 || d < 1)
      throw config_error("Tensor3 dims must all be >= 1");
  }
};

// Per-position validity flags for one batch of sequences.
struct SeqMask {
  int batch = 0;
  int seq = 0;
  std::vector<uint8_t> valid;  // batch*seq entries

  SeqMask() = default;
  SeqMask(int b, int s, uint8_t fill) : batch(b), seq(s), valid(static_cast<size_t>(b) * s, fill) {}

  static SeqMask all_valid(int b, int s) { return SeqMask(b, s, 1); }

  bool is_valid(int b, int s) const { return valid[static_cast<size_t>(b) * seq + s] != 0; }
  void set(int b, int s, bool v) { valid[static_cast<size_t>(b) * seq + s] = v ? 1 : 0; }

  int valid_count(int b) const {
    int n = 0;
    for (int s = 0; s < seq; ++s) n += is_valid(b, s) ? 1 : 0;
    return n;
  }

  // every sequence must keep at least one valid position
  void check_nonempty() const {
    for (int b = 0; b < batch; ++b)
      if (valid_count(b) == 0) throw config_error("sequence mask has no valid position");
  }
};

// Token-id matrix, row-major by (batch, seq).
struct TokenIds {
  int batch = 0;
  int seq = 0;
  std::vector<int32_t> ids;

  TokenIds() = default;
  TokenIds(int b, int s) : batch(b), seq(s), ids(static_cast<size_t>(b) * s, 0) {}

  int32_t& at(int b, int s) { return ids[static_cast<size_t>(b) * seq + s]; }
  int32_t at(int b, int s) const { return ids[static_cast<size_t>(b) * seq + s]; }
};

bool all_finite(const Tensor3& t);
void require_finite(const Tensor3& t, const char* what);

Tensor3 random_normal(Rng& rng, int b, int s, int d, Scalar stddev);

}  // namespace funnel
