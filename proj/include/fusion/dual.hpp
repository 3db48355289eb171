#pragma once

#include <cmath>
#include <type_traits>

#include <Eigen/Core>

namespace fusion {

/// Matrix with one forward-mode tangent. Running a hand-written backward pass
/// on DualMat values yields Hessian-vector products along the seeded tangent.
struct DualMat {
  Eigen::MatrixXd v;
  Eigen::MatrixXd d;

  DualMat() = default;
  DualMat(Eigen::MatrixXd value, Eigen::MatrixXd tangent) : v(std::move(value)), d(std::move(tangent)) {}
  explicit DualMat(Eigen::MatrixXd value) : v(std::move(value)), d(Eigen::MatrixXd::Zero(v.rows(), v.cols())) {}

  Eigen::Index rows() const { return v.rows(); }
  Eigen::Index cols() const { return v.cols(); }
};

/// Elementary ops shared by plain and dual matrices. Every function comes in
/// a MatrixXd and a DualMat flavour so model code can be written once.
namespace ad {

using Eigen::MatrixXd;

inline const MatrixXd& value(const MatrixXd& a) { return a; }
inline const MatrixXd& value(const DualMat& a) { return a.v; }

template <class M>
M lift(const MatrixXd& a);
template <>
inline MatrixXd lift<MatrixXd>(const MatrixXd& a) { return a; }
template <>
inline DualMat lift<DualMat>(const MatrixXd& a) { return DualMat(a); }

template <class M>
M zeros(Eigen::Index r, Eigen::Index c) {
  return lift<M>(MatrixXd::Zero(r, c));
}

inline MatrixXd add(const MatrixXd& a, const MatrixXd& b) { return a + b; }
inline DualMat add(const DualMat& a, const DualMat& b) { return {a.v + b.v, a.d + b.d}; }
inline MatrixXd sub(const MatrixXd& a, const MatrixXd& b) { return a - b; }
inline DualMat sub(const DualMat& a, const DualMat& b) { return {a.v - b.v, a.d - b.d}; }
inline MatrixXd scale(const MatrixXd& a, double s) { return a * s; }
inline DualMat scale(const DualMat& a, double s) { return {a.v * s, a.d * s}; }

inline void add_to(MatrixXd& a, const MatrixXd& b) { a += b; }
inline void add_to(DualMat& a, const DualMat& b) {
  a.v += b.v;
  a.d += b.d;
}

// a * b
inline MatrixXd mm(const MatrixXd& a, const MatrixXd& b) { return a * b; }
inline DualMat mm(const DualMat& a, const DualMat& b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
// a * b^T
inline MatrixXd mm_nt(const MatrixXd& a, const MatrixXd& b) { return a * b.transpose(); }
inline DualMat mm_nt(const DualMat& a, const DualMat& b) {
  return {a.v * b.v.transpose(), a.d * b.v.transpose() + a.v * b.d.transpose()};
}
// a^T * b
inline MatrixXd mm_tn(const MatrixXd& a, const MatrixXd& b) { return a.transpose() * b; }
inline DualMat mm_tn(const DualMat& a, const DualMat& b) {
  return {a.v.transpose() * b.v, a.d.transpose() * b.v + a.v.transpose() * b.d};
}

inline MatrixXd hadamard(const MatrixXd& a, const MatrixXd& b) { return a.cwiseProduct(b); }
inline DualMat hadamard(const DualMat& a, const DualMat& b) {
  return {a.v.cwiseProduct(b.v), a.d.cwiseProduct(b.v) + a.v.cwiseProduct(b.d)};
}

/// a + 1 * row, row is 1 x cols.
inline MatrixXd add_row(const MatrixXd& a, const MatrixXd& row) { return a.rowwise() + row.row(0); }
inline DualMat add_row(const DualMat& a, const DualMat& row) {
  return {a.v.rowwise() + row.v.row(0), a.d.rowwise() + row.d.row(0)};
}

/// Column sums as a 1 x cols row.
inline MatrixXd colsum(const MatrixXd& a) { return a.colwise().sum(); }
inline DualMat colsum(const DualMat& a) { return {a.v.colwise().sum(), a.d.colwise().sum()}; }

/// 1x1 value broadcast to r x c.
inline MatrixXd broadcast(const MatrixXd& s, Eigen::Index r, Eigen::Index c) { return MatrixXd::Constant(r, c, s(0, 0)); }
inline DualMat broadcast(const DualMat& s, Eigen::Index r, Eigen::Index c) {
  return {MatrixXd::Constant(r, c, s.v(0, 0)), MatrixXd::Constant(r, c, s.d(0, 0))};
}

inline MatrixXd tanh(const MatrixXd& a) { return a.array().tanh().matrix(); }
inline DualMat tanh(const DualMat& a) {
  MatrixXd t = a.v.array().tanh().matrix();
  MatrixXd d = ((1.0 - t.array().square()) * a.d.array()).matrix();
  return {std::move(t), std::move(d)};
}

/// Elementwise (1 - a^2), the tanh derivative expressed through its output.
inline MatrixXd one_minus_sq(const MatrixXd& a) { return (1.0 - a.array().square()).matrix(); }
inline DualMat one_minus_sq(const DualMat& a) {
  return {(1.0 - a.v.array().square()).matrix(), (-2.0 * a.v.array() * a.d.array()).matrix()};
}

/// Zero entries where `pre` (by value) is not positive.
inline MatrixXd relu_mask(const MatrixXd& a, const MatrixXd& pre) {
  return (pre.array() > 0.0).select(a, 0.0);
}
inline DualMat relu_mask(const DualMat& a, const MatrixXd& pre) {
  return {(pre.array() > 0.0).select(a.v, 0.0), (pre.array() > 0.0).select(a.d, 0.0)};
}
template <class M>
M relu(const M& a) {
  return relu_mask(a, value(a));
}

/// Row-wise softmax.
inline MatrixXd softmax_rows(const MatrixXd& a) {
  MatrixXd out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    out.row(i) = (a.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}
inline DualMat softmax_rows(const DualMat& a) {
  MatrixXd p = softmax_rows(a.v);
  MatrixXd d(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double mean_d = p.row(i).dot(a.d.row(i));
    d.row(i) = (p.row(i).array() * (a.d.row(i).array() - mean_d)).matrix();
  }
  return {std::move(p), std::move(d)};
}

/// Softmax over the entries of a column vector.
template <class M>
M softmax_col(const M& s) {
  if constexpr (std::is_same_v<M, MatrixXd>) {
    return softmax_rows(MatrixXd(s.transpose())).transpose();
  } else {
    DualMat r = softmax_rows(DualMat(s.v.transpose(), s.d.transpose()));
    return {r.v.transpose(), r.d.transpose()};
  }
}

inline MatrixXd transpose(const MatrixXd& a) { return a.transpose(); }
inline DualMat transpose(const DualMat& a) { return {a.v.transpose(), a.d.transpose()}; }

}  // namespace ad
}  // namespace fusion
