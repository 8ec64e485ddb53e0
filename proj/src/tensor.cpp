#include "funnel/tensor.hpp"

namespace funnel {

Tensor3 Tensor3::from_matrix(int b, int s, int d, Mat m) {
  if (m.rows() != static_cast<Eigen::Index>(b) * s || m.cols() != d)
    throw config_error("from_matrix: matrix shape does not match (batch*seq, dim)");
  Tensor3 t;
  t.batch = b;
  t.seq = s;
  t.dim = d;
  t.data = std::move(m);
  check_dims(b, s, d);
  return t;
}

bool all_finite(const Tensor3& t) {
  return t.data.allFinite();
}

void require_finite(const Tensor3& t, const char* what) {
  if (!all_finite(t)) throw config_error(std::string("non-finite values in ") + what);
}

Tensor3 random_normal(Rng& rng, int b, int s, int d, Scalar stddev) {
  Tensor3 t(b, s, d);
  for (Eigen::Index i = 0; i < t.data.rows(); ++i)
    for (Eigen::Index j = 0; j < t.data.cols(); ++j) t.data(i, j) = rng.normal(0.0, stddev);
  return t;
}

}  // namespace funnel
