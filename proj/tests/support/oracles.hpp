#pragma once

// Reference implementations for tests. Plain loops over nested vectors, no
// shared code with the library beyond the parameter containers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "fusion/head.hpp"
#include "fusion/params.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major

inline Mat to_mat(const Eigen::MatrixXd& m) {
  Mat out(std::size_t(m.rows()), Vec(std::size_t(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[std::size_t(i)][std::size_t(j)] = m(i, j);
  return out;
}

inline Vec to_vec(const Eigen::MatrixXd& m) {
  Vec out;
  for (Eigen::Index i = 0; i < m.size(); ++i) out.push_back(m.data()[i]);
  return out;
}

inline Eigen::MatrixXd from_mat(const Mat& m) {
  Eigen::MatrixXd out(Eigen::Index(m.size()), m.empty() ? 0 : Eigen::Index(m[0].size()));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) out(Eigen::Index(i), Eigen::Index(j)) = m[i][j];
  return out;
}

/// Attention + CLN head in nested-vector form.
struct Head {
  Mat att_w;  // H x F
  Vec att_b;  // H
  Vec out_w;  // H
  double out_b = 0;
  std::vector<Mat> w;  // CLN layers, out x in
  std::vector<Vec> b;
};

inline Head from_head(const fusion::Head& h) {
  Head o;
  o.att_w = to_mat(h.att_w);
  o.att_b = to_vec(h.att_b);
  o.out_w = to_vec(h.out_w);
  o.out_b = h.out_b(0, 0);
  for (std::size_t l = 0; l < h.cln_w.size(); ++l) {
    o.w.push_back(to_mat(h.cln_w[l]));
    o.b.push_back(to_vec(h.cln_b[l]));
  }
  return o;
}

inline double max_abs_diff(const Head& a, const fusion::Head& h) {
  const Head b = from_head(h);
  double d = std::abs(a.out_b - b.out_b);
  auto vec = [&](const Vec& x, const Vec& y) {
    for (std::size_t i = 0; i < x.size(); ++i) d = std::max(d, std::abs(x[i] - y[i]));
  };
  auto mat = [&](const Mat& x, const Mat& y) {
    for (std::size_t i = 0; i < x.size(); ++i) vec(x[i], y[i]);
  };
  mat(a.att_w, b.att_w);
  vec(a.att_b, b.att_b);
  vec(a.out_w, b.out_w);
  for (std::size_t l = 0; l < a.w.size(); ++l) {
    mat(a.w[l], b.w[l]);
    vec(a.b[l], b.b[l]);
  }
  return d;
}

inline Vec softmax(const Vec& z) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : z) m = std::max(m, v);
  Vec p(z.size());
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - m);
  for (double& v : p) v /= s;
  return p;
}

struct Pooled {
  Vec me, alpha;
  Mat tanh_act;  // K x H
};

inline Pooled attention(const Head& h, const Mat& r) {
  Pooled p;
  Vec s;
  for (const auto& row : r) {
    Vec a(h.att_b.size());
    double logit = h.out_b;
    for (std::size_t j = 0; j < a.size(); ++j) {
      double pre = h.att_b[j];
      for (std::size_t f = 0; f < row.size(); ++f) pre += h.att_w[j][f] * row[f];
      a[j] = std::tanh(pre);
      logit += h.out_w[j] * a[j];
    }
    p.tanh_act.push_back(a);
    s.push_back(logit);
  }
  p.alpha = softmax(s);
  p.me.assign(r[0].size(), 0.0);
  for (std::size_t k = 0; k < r.size(); ++k)
    for (std::size_t f = 0; f < r[k].size(); ++f) p.me[f] += p.alpha[k] * r[k][f];
  return p;
}

inline Vec cln(const Head& h, const Vec& x, std::vector<Vec>* ins = nullptr, std::vector<Vec>* pres = nullptr) {
  Vec z = x;
  for (std::size_t l = 0; l < h.w.size(); ++l) {
    Vec pre(h.w[l].size());
    for (std::size_t i = 0; i < pre.size(); ++i) {
      pre[i] = h.b[l][i];
      for (std::size_t j = 0; j < z.size(); ++j) pre[i] += h.w[l][i][j] * z[j];
    }
    if (ins) ins->push_back(z);
    if (pres) pres->push_back(pre);
    z = pre;
    if (l + 1 < h.w.size())
      for (double& v : z) v = std::max(v, 0.0);
  }
  return z;
}

/// Cross-entropy gradient of the CLN at input x; applies `-lr * grad` to the
/// CLN in place and returns dLoss/dx (computed with the pre-step weights).
inline Vec cln_sgd(Head& h, const Vec& x, int label, double lr) {
  std::vector<Vec> ins, pres;
  Vec p = softmax(cln(h, x, &ins, &pres));
  Vec d = p;
  d[std::size_t(label)] -= 1.0;
  std::vector<Mat> gw(h.w.size());
  std::vector<Vec> gb(h.w.size());
  for (std::size_t l = h.w.size(); l-- > 0;) {
    gw[l] = Mat(h.w[l].size(), Vec(ins[l].size()));
    for (std::size_t i = 0; i < d.size(); ++i)
      for (std::size_t j = 0; j < ins[l].size(); ++j) gw[l][i][j] = d[i] * ins[l][j];
    gb[l] = d;
    Vec din(ins[l].size(), 0.0);
    for (std::size_t i = 0; i < d.size(); ++i)
      for (std::size_t j = 0; j < din.size(); ++j) din[j] += h.w[l][i][j] * d[i];
    if (l > 0)
      for (std::size_t j = 0; j < din.size(); ++j)
        if (!(pres[l - 1][j] > 0)) din[j] = 0;
    d = din;
  }
  for (std::size_t l = 0; l < h.w.size(); ++l)
    for (std::size_t i = 0; i < h.w[l].size(); ++i) {
      h.b[l][i] -= lr * gb[l][i];
      for (std::size_t j = 0; j < h.w[l][i].size(); ++j) h.w[l][i][j] -= lr * gw[l][i][j];
    }
  return d;
}

/// One SGD step of the whole head on the attention-pooled meta-example.
inline Head meml_step(Head h, const Mat& r, int label, double lr) {
  const Pooled p = attention(h, r);
  const Head before = h;
  const Vec dx = cln_sgd(h, p.me, label, lr);
  const std::size_t K = r.size(), H = h.att_b.size(), F = r[0].size();
  Vec dalpha(K, 0.0);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t f = 0; f < F; ++f) dalpha[k] += dx[f] * r[k][f];
  double mean = 0;
  for (std::size_t k = 0; k < K; ++k) mean += p.alpha[k] * dalpha[k];
  for (std::size_t k = 0; k < K; ++k) {
    const double ds = p.alpha[k] * (dalpha[k] - mean);
    h.out_b -= lr * ds;
    for (std::size_t j = 0; j < H; ++j) {
      const double a = p.tanh_act[k][j];
      h.out_w[j] -= lr * ds * a;
      const double dpre = ds * before.out_w[j] * (1 - a * a);
      h.att_b[j] -= lr * dpre;
      for (std::size_t f = 0; f < F; ++f) h.att_w[j][f] -= lr * dpre * r[k][f];
    }
  }
  return h;
}

/// One SGD step of the CLN per row, in order.
inline Head oml_steps(Head h, const Mat& r, int label, double lr) {
  for (const auto& row : r) cln_sgd(h, row, label, lr);
  return h;
}

/// Mean cross-entropy of the CLN on labelled rows.
inline double cln_loss(const Head& h, const Mat& r, const std::vector<int>& y) {
  double s = 0;
  for (std::size_t i = 0; i < r.size(); ++i) s -= std::log(softmax(cln(h, r[i]))[std::size_t(y[i])]);
  return s / double(r.size());
}

/// Direct-loop FEN forward of one image (channels-first pixels).
inline Vec fen(const fusion::ParameterBundle& p, const std::vector<double>& pixels) {
  const auto geo = p.arch.conv_geometry();
  Vec act = pixels;
  int c = p.arch.in_channels, hgt = p.arch.image_size, wid = p.arch.image_size;
  const int film_from = p.arch.film ? int(geo.size()) - p.arch.film_layers : int(geo.size());
  for (std::size_t l = 0; l < geo.size(); ++l) {
    const auto& g = geo[l];
    Vec out(std::size_t(g.out_c) * g.out_h * g.out_w, 0.0);
    Vec gamma(std::size_t(g.out_c), 1.0), beta(std::size_t(g.out_c), 0.0);
    if (int(l) >= film_from) {
      const auto& gen = p.film[l - std::size_t(film_from)];
      for (int o = 0; o < g.out_c; ++o) {
        double gv = gen.b(o), bv = gen.b(o + g.out_c);
        for (Eigen::Index z = 0; z < p.context.size(); ++z) {
          gv += gen.w(o, z) * p.context(z);
          bv += gen.w(o + g.out_c, z) * p.context(z);
        }
        gamma[std::size_t(o)] = gv;
        beta[std::size_t(o)] = bv;
      }
    }
    for (int o = 0; o < g.out_c; ++o)
      for (int oy = 0; oy < g.out_h; ++oy)
        for (int ox = 0; ox < g.out_w; ++ox) {
          double s = p.conv[l].b(o);
          for (int ky = 0; ky < g.kernel; ++ky)
            for (int kx = 0; kx < g.kernel; ++kx)
              for (int ci = 0; ci < c; ++ci) {
                const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= hgt || ix < 0 || ix >= wid) continue;
                s += p.conv[l].w(o, (ky * g.kernel + kx) * c + ci) * act[(std::size_t(ci) * hgt + iy) * wid + ix];
              }
          s = gamma[std::size_t(o)] * s + beta[std::size_t(o)];
          out[(std::size_t(o) * g.out_h + oy) * g.out_w + ox] = std::max(s, 0.0);
        }
    act = out;
    c = g.out_c;
    hgt = g.out_h;
    wid = g.out_w;
  }
  for (std::size_t l = 0; l < p.trunk.size(); ++l) {
    Vec z(std::size_t(p.trunk[l].w.rows()));
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = p.trunk[l].b(Eigen::Index(i));
      for (std::size_t j = 0; j < act.size(); ++j) z[i] += p.trunk[l].w(Eigen::Index(i), Eigen::Index(j)) * act[j];
      if (l + 1 < p.trunk.size()) z[i] = std::max(z[i], 0.0);
    }
    act = z;
  }
  return act;
}

/// Ridge least-squares probe on one-hot targets; returns training accuracy.
inline double linear_probe_accuracy(const Eigen::MatrixXd& x, const std::vector<int>& y, int classes, double ridge = 1e-3) {
  Eigen::MatrixXd xa(x.rows(), x.cols() + 1);
  xa << x, Eigen::VectorXd::Ones(x.rows());
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(x.rows(), classes);
  for (std::size_t i = 0; i < y.size(); ++i) t(Eigen::Index(i), y[i]) = 1.0;
  // Dual form: the probe is cheap even when pixels outnumber samples.
  Eigen::MatrixXd gram = xa * xa.transpose();
  gram.diagonal().array() += ridge;
  Eigen::MatrixXd scores = gram * gram.ldlt().solve(t);
  int hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index arg;
    scores.row(i).maxCoeff(&arg);
    hits += arg == y[std::size_t(i)];
  }
  return double(hits) / double(y.size());
}

/// Fraction of items matched under the best one-to-one cluster->label map
/// (exact, bitmask dynamic programme over labels; needs <= 20 labels).
inline double matched_agreement(const std::vector<int>& clusters, const std::vector<int>& labels, int k, int classes) {
  std::vector<std::vector<int>> count(std::size_t(k), std::vector<int>(std::size_t(classes), 0));
  for (std::size_t i = 0; i < clusters.size(); ++i) ++count[std::size_t(clusters[i])][std::size_t(labels[i])];
  const std::size_t states = std::size_t(1) << classes;
  std::vector<int> best(states, -1);
  best[0] = 0;
  for (int c = 0; c < k; ++c) {
    std::vector<int> next = best;  // cluster c may stay unmatched
    for (std::size_t s = 0; s < states; ++s) {
      if (best[s] < 0) continue;
      for (int l = 0; l < classes; ++l)
        if (!(s >> l & 1)) next[s | (std::size_t(1) << l)] = std::max(next[s | (std::size_t(1) << l)], best[s] + count[std::size_t(c)][std::size_t(l)]);
    }
    best = std::move(next);
  }
  return double(*std::max_element(best.begin(), best.end())) / double(clusters.size());
}

}  // namespace oracle
