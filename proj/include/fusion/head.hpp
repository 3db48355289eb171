#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "fusion/dual.hpp"
#include "fusion/error.hpp"
#include "fusion/params.hpp"

namespace fusion {

/// How a support set is reduced before the CLN.
enum class Pooling { Attention, Mean, None };

/// psi = {rho, W} in matrix form. Biases are 1 x n rows. Works with plain
/// (MatrixXd) and tangent-carrying (DualMat) values.
template <class M>
struct HeadParams {
  M att_w;  // H x F
  M att_b;  // 1 x H
  M out_w;  // 1 x H
  M out_b;  // 1 x 1
  std::vector<M> cln_w;  // out x in
  std::vector<M> cln_b;  // 1 x out

  template <class Fn>
  void for_each(Fn&& fn) {
    fn(att_w);
    fn(att_b);
    fn(out_w);
    fn(out_b);
    for (std::size_t l = 0; l < cln_w.size(); ++l) {
      fn(cln_w[l]);
      fn(cln_b[l]);
    }
  }
  template <class Fn>
  void for_each(Fn&& fn) const {
    const_cast<HeadParams*>(this)->for_each([&](const M& m) { fn(m); });
  }
};

using Head = HeadParams<Eigen::MatrixXd>;

inline Head head_from(const ParameterBundle& p) {
  Head h;
  h.att_w = p.att_hidden.w;
  h.att_b = p.att_hidden.b.transpose();
  h.out_w = p.att_out.w;
  h.out_b = p.att_out.b.transpose();
  for (const auto& l : p.cln) {
    h.cln_w.push_back(l.w);
    h.cln_b.push_back(l.b.transpose());
  }
  return h;
}

inline void head_into(const Head& h, ParameterBundle& p) {
  p.att_hidden.w = h.att_w;
  p.att_hidden.b = h.att_b.transpose();
  p.att_out.w = h.out_w;
  p.att_out.b = h.out_b.transpose();
  if (h.cln_w.size() != p.cln.size()) throw ShapeError("CLN depth mismatch");
  for (std::size_t l = 0; l < p.cln.size(); ++l) {
    p.cln[l].w = h.cln_w[l];
    p.cln[l].b = h.cln_b[l].transpose();
  }
}

inline Head head_zeros_like(const Head& h) {
  Head z = h;
  z.for_each([](Eigen::MatrixXd& m) { m.setZero(); });
  return z;
}

/// a += s * b
inline void head_axpy(Head& a, double s, const Head& b) {
  std::vector<const Eigen::MatrixXd*> src;
  b.for_each([&](const Eigen::MatrixXd& m) { src.push_back(&m); });
  std::size_t i = 0;
  a.for_each([&](Eigen::MatrixXd& m) { m += s * *src[i++]; });
}

inline double head_dot(const Head& a, const Head& b) {
  std::vector<const Eigen::MatrixXd*> src;
  b.for_each([&](const Eigen::MatrixXd& m) { src.push_back(&m); });
  std::size_t i = 0;
  double acc = 0;
  a.for_each([&](const Eigen::MatrixXd& m) { acc += m.cwiseProduct(*src[i++]).sum(); });
  return acc;
}

inline HeadParams<DualMat> head_dual(const Head& value, const Head& tangent) {
  std::vector<const Eigen::MatrixXd*> v, t;
  value.for_each([&](const Eigen::MatrixXd& m) { v.push_back(&m); });
  tangent.for_each([&](const Eigen::MatrixXd& m) { t.push_back(&m); });
  HeadParams<DualMat> d;
  d.cln_w.resize(value.cln_w.size());
  d.cln_b.resize(value.cln_b.size());
  std::size_t i = 0;
  d.for_each([&](DualMat& m) {
    m = DualMat(*v[i], *t[i]);
    ++i;
  });
  return d;
}

inline Head head_tangent(const HeadParams<DualMat>& d) {
  Head h;
  h.cln_w.resize(d.cln_w.size());
  h.cln_b.resize(d.cln_b.size());
  std::vector<const DualMat*> src;
  d.for_each([&](const DualMat& m) { src.push_back(&m); });
  std::size_t i = 0;
  h.for_each([&](Eigen::MatrixXd& m) { m = src[i++]->d; });
  return h;
}

/// Per-example attention logits f_rho(R_k), n x 1.
template <class M>
M attention_logits(const HeadParams<M>& psi, const M& r, M* tanh_out = nullptr) {
  M a = ad::tanh(ad::add_row(ad::mm_nt(r, psi.att_w), psi.att_b));
  M s = ad::add_row(ad::mm_nt(a, psi.out_w), psi.out_b);
  if (tanh_out) *tanh_out = std::move(a);
  return s;
}

/// CLN logits for each row of x; `pre` receives every layer's pre-activation.
template <class M>
M cln_logits(const HeadParams<M>& psi, const M& x, std::vector<M>* inputs = nullptr, std::vector<M>* pre = nullptr) {
  M z = x;
  for (std::size_t l = 0; l < psi.cln_w.size(); ++l) {
    M p = ad::add_row(ad::mm_nt(z, psi.cln_w[l]), psi.cln_b[l]);
    if (inputs) inputs->push_back(z);
    if (pre) pre->push_back(p);
    z = (l + 1 < psi.cln_w.size()) ? ad::relu(p) : p;
  }
  return z;
}

template <class M>
struct HeadResult {
  double loss = 0.0;
  HeadParams<M> d_psi;
  M d_features;
};

/// Cross-entropy of the head on feature rows `r` and its gradient w.r.t. psi
/// and r. Pooled modes classify one meta-example against labels[0]; Pooling::None
/// classifies every row against labels[i]. The loss (mean over classified
/// rows) is multiplied by `weight`.
template <class M>
HeadResult<M> head_loss_and_grad(const HeadParams<M>& psi, const M& r, std::span<const int> labels, Pooling mode,
                                 double weight = 1.0) {
  const Eigen::Index n = r.rows();
  if (n < 1) throw EmptySetError("head evaluated on an empty feature batch");
  if (r.cols() != psi.att_w.cols()) throw ShapeError("feature width does not match the head");
  const std::size_t expected = mode == Pooling::None ? std::size_t(n) : 1;
  if (labels.size() != expected) throw ShapeError("label count does not match the pooling mode");

  M a, alpha, x;
  if (mode == Pooling::Attention) {
    alpha = ad::softmax_col(attention_logits(psi, r, &a));
    x = ad::mm_tn(alpha, r);
  } else if (mode == Pooling::Mean) {
    x = ad::scale(ad::colsum(r), 1.0 / double(n));
  } else {
    x = r;
  }

  std::vector<M> inputs, pre;
  M logits = cln_logits(psi, x, &inputs, &pre);
  M prob = ad::softmax_rows(logits);
  const Eigen::Index rows = logits.rows(), classes = logits.cols();
  HeadResult<M> out;
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(rows, classes);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const int y = labels[std::size_t(i)];
    if (y < 0 || y >= classes) throw ShapeError("label outside the CLN output range");
    onehot(i, y) = 1.0;
    out.loss -= std::log(std::max(ad::value(prob)(i, y), 1e-300));
  }
  out.loss *= weight / double(rows);

  M d = ad::scale(ad::sub(prob, ad::lift<M>(onehot)), weight / double(rows));
  const std::size_t depth = psi.cln_w.size();
  out.d_psi.cln_w.resize(depth);
  out.d_psi.cln_b.resize(depth);
  for (std::size_t l = depth; l-- > 0;) {
    out.d_psi.cln_w[l] = ad::mm_tn(d, inputs[l]);
    out.d_psi.cln_b[l] = ad::colsum(d);
    d = ad::mm(d, psi.cln_w[l]);
    if (l > 0) d = ad::relu_mask(d, ad::value(pre[l - 1]));
  }

  const Eigen::Index h = psi.att_w.rows();
  if (mode == Pooling::Attention) {
    out.d_features = ad::mm(alpha, d);
    M d_alpha = ad::mm_nt(r, d);
    M centered = ad::sub(d_alpha, ad::broadcast(ad::mm_tn(alpha, d_alpha), n, 1));
    M ds = ad::hadamard(alpha, centered);
    out.d_psi.out_w = ad::mm_tn(ds, a);
    out.d_psi.out_b = ad::colsum(ds);
    M dh = ad::hadamard(ad::mm(ds, psi.out_w), ad::one_minus_sq(a));
    out.d_psi.att_w = ad::mm_tn(dh, r);
    out.d_psi.att_b = ad::colsum(dh);
    ad::add_to(out.d_features, ad::mm(dh, psi.att_w));
  } else {
    out.d_psi.att_w = ad::zeros<M>(h, r.cols());
    out.d_psi.att_b = ad::zeros<M>(1, h);
    out.d_psi.out_w = ad::zeros<M>(1, h);
    out.d_psi.out_b = ad::zeros<M>(1, 1);
    if (mode == Pooling::Mean)
      out.d_features = ad::scale(ad::mm(ad::lift<M>(Eigen::MatrixXd::Ones(n, 1)), d), 1.0 / double(n));
    else
      out.d_features = d;
  }
  return out;
}

/// Hessian-vector products of the head loss along `v`: the psi-psi block
/// (H v) and the features-psi block (d/dR of <grad_psi, v>).
struct HeadHvp {
  Head psi;
  Eigen::MatrixXd features;
};

inline HeadHvp head_hvp(const Head& psi, const Eigen::MatrixXd& r, std::span<const int> labels, Pooling mode,
                        const Head& v, double weight = 1.0) {
  auto res = head_loss_and_grad<DualMat>(head_dual(psi, v), DualMat(r), labels, mode, weight);
  return {head_tangent(res.d_psi), res.d_features.d};
}

// ---------------------------------------------------------------------------
// Public forward helpers

struct MetaExample {
  Eigen::VectorXd me;
  Eigen::VectorXd alpha;
};

/// Softmax attention over the rows of `features` and their weighted sum.
inline MetaExample attention_pool(const Head& psi, const Eigen::MatrixXd& features) {
  if (features.rows() < 1) throw EmptySetError("attention over an empty feature batch");
  if (!features.allFinite()) throw ValidationError("non-finite features");
  Eigen::MatrixXd alpha = ad::softmax_col(attention_logits(psi, features));
  return {(alpha.transpose() * features).transpose(), alpha.col(0)};
}

inline MetaExample attention_pool(const ParameterBundle& p, const Eigen::MatrixXd& features) {
  return attention_pool(head_from(p), features);
}

inline MetaExample mean_pool(const Eigen::MatrixXd& features) {
  if (features.rows() < 1) throw EmptySetError("mean over an empty feature batch");
  const double k = double(features.rows());
  return {features.colwise().mean().transpose(), Eigen::VectorXd::Constant(features.rows(), 1.0 / k)};
}

inline Eigen::VectorXd cln_forward(const Head& psi, const Eigen::VectorXd& feature) {
  if (feature.size() != psi.cln_w.front().cols()) throw ShapeError("feature dimension does not match the CLN input");
  return cln_logits(psi, Eigen::MatrixXd(feature.transpose())).transpose();
}

inline Eigen::VectorXd cln_forward(const ParameterBundle& p, const Eigen::VectorXd& feature) {
  return cln_forward(head_from(p), feature);
}

/// Logits for each row of `features`.
inline Eigen::MatrixXd cln_forward_rows(const Head& psi, const Eigen::MatrixXd& features) {
  if (features.cols() != psi.cln_w.front().cols()) throw ShapeError("feature dimension does not match the CLN input");
  return cln_logits(psi, features);
}

}  // namespace fusion
