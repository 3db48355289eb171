#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "fusion/error.hpp"
#include "fusion/image.hpp"
#include "fusion/params.hpp"

namespace fusion {

/// Images packed channels-first: rows are channels, column n*H*W + y*W + x.
struct ImageBatch {
  int count = 0;
  int height = 0;
  int width = 0;
  Eigen::MatrixXd data;

  int channels() const { return int(data.rows()); }
};

inline ImageBatch pack_images(std::span<const Image* const> images) {
  if (images.empty()) throw EmptySetError("empty image batch");
  const Image& first = *images.front();
  ImageBatch b{int(images.size()), first.height, first.width, Eigen::MatrixXd(first.channels, Eigen::Index(images.size()) * first.height * first.width)};
  const Eigen::Index hw = Eigen::Index(first.height) * first.width;
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& im = *images[n];
    if (!im.same_shape(first)) throw ShapeError("images in a batch differ in shape");
    for (int c = 0; c < im.channels; ++c)
      for (Eigen::Index p = 0; p < hw; ++p) {
        const double v = im.pixels[std::size_t(c * hw + p)];
        if (!std::isfinite(v)) throw ValidationError("non-finite pixel in FEN input");
        b.data(c, Eigen::Index(n) * hw + p) = v;
      }
  }
  return b;
}

inline ImageBatch pack_images(const std::vector<LabeledExample>& items) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(items.size());
  for (const auto& e : items) ptrs.push_back(&e.x);
  return pack_images(ptrs);
}

inline ImageBatch pack_images(const std::vector<Image>& items) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(items.size());
  for (const auto& e : items) ptrs.push_back(&e);
  return pack_images(ptrs);
}

/// Per-channel gamma and beta produced by one FiLM generator from context z.
struct FilmCoefficients {
  Eigen::VectorXd gamma, beta;
};

inline FilmCoefficients film_coefficients(const Linear& generator, const Eigen::VectorXd& z) {
  if (generator.w.cols() != z.size()) throw ShapeError("FiLM context has the wrong dimension");
  Eigen::VectorXd g = generator.w * z + generator.b;
  const Eigen::Index c = g.size() / 2;
  return {g.head(c), g.tail(c)};
}

/// gamma(z) * x + beta(z), per channel (rows of x).
inline Eigen::MatrixXd film_transform(const Eigen::MatrixXd& x, const FilmCoefficients& f) {
  if (f.gamma.size() != x.rows() || f.beta.size() != x.rows()) throw ShapeError("FiLM channel count does not match activation");
  Eigen::MatrixXd out = f.gamma.asDiagonal() * x;
  out.colwise() += f.beta;
  return out;
}

inline Eigen::MatrixXd film_transform(const Eigen::MatrixXd& x, const Eigen::VectorXd& z, const Linear& generator) {
  return film_transform(x, film_coefficients(generator, z));
}

namespace detail {

// Patch rows are ordered (ky * k + kx) * in_c + c, so each kernel tap copies
// one contiguous channel vector.
inline Eigen::MatrixXd im2col(const Eigen::MatrixXd& a, int n, const ConvGeometry& g) {
  const int k = g.kernel, cin = g.in_c;
  const Eigen::Index in_hw = Eigen::Index(g.in_h) * g.in_w;
  const Eigen::Index out_hw = Eigen::Index(g.out_h) * g.out_w;
  Eigen::MatrixXd col(Eigen::Index(cin) * k * k, n * out_hw);
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < g.out_h; ++oy)
      for (int ox = 0; ox < g.out_w; ++ox) {
        double* dst = col.col(b * out_hw + oy * g.out_w + ox).data();
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          for (int kx = 0; kx < k; ++kx, dst += cin) {
            const int ix = ox * g.stride - g.pad + kx;
            if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) {
              std::fill(dst, dst + cin, 0.0);
              continue;
            }
            const double* src = a.col(b * in_hw + iy * g.in_w + ix).data();
            std::copy(src, src + cin, dst);
          }
        }
      }
  return col;
}

inline Eigen::MatrixXd col2im(const Eigen::MatrixXd& col, int n, const ConvGeometry& g) {
  const int k = g.kernel, cin = g.in_c;
  const Eigen::Index in_hw = Eigen::Index(g.in_h) * g.in_w;
  const Eigen::Index out_hw = Eigen::Index(g.out_h) * g.out_w;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(cin, n * in_hw);
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < g.out_h; ++oy)
      for (int ox = 0; ox < g.out_w; ++ox) {
        const double* src = col.col(b * out_hw + oy * g.out_w + ox).data();
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          for (int kx = 0; kx < k; ++kx, src += cin) {
            const int ix = ox * g.stride - g.pad + kx;
            if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
            double* dst = a.col(b * in_hw + iy * g.in_w + ix).data();
            for (int c = 0; c < cin; ++c) dst[c] += src[c];
          }
        }
      }
  return a;
}

}  // namespace detail

/// Intermediate values kept by fen_forward for the backward pass.
struct FenCache {
  int count = 0;
  std::vector<ConvGeometry> geometry;
  std::vector<Eigen::MatrixXd> cols;      // im2col of each conv input
  std::vector<Eigen::MatrixXd> conv_pre;  // conv output before FiLM (FiLM layers only)
  std::vector<Eigen::MatrixXd> conv_out;  // after FiLM and ReLU
  std::vector<FilmCoefficients> film;     // indexed by conv layer; empty when unused
  std::vector<Eigen::MatrixXd> trunk_in;  // input of each trunk layer (features x N)
  std::vector<Eigen::MatrixXd> trunk_pre;
};

inline int film_start_layer(const ArchConfig& a) { return a.film ? int(a.conv_kernels.size()) - a.film_layers : int(a.conv_kernels.size()); }

/// Feature vectors R (one row per image). Deterministic given params and input.
inline Eigen::MatrixXd fen_forward(const ParameterBundle& p, const ImageBatch& x, FenCache* cache = nullptr) {
  const ArchConfig& a = p.arch;
  if (x.count < 1) throw EmptySetError("empty FEN batch");
  if (x.channels() != a.in_channels || x.height != a.image_size || x.width != a.image_size)
    throw ShapeError("FEN input shape does not match the architecture");
  if (!x.data.allFinite()) throw ValidationError("non-finite FEN input");
  const auto geometry = a.conv_geometry();
  const int film_from = film_start_layer(a);
  if (cache) {
    *cache = FenCache{};
    cache->count = x.count;
    cache->geometry = geometry;
    cache->film.resize(geometry.size());
    cache->cols.reserve(geometry.size());
    cache->conv_out.reserve(geometry.size());
    cache->conv_pre.reserve(geometry.size());
  }
  Eigen::MatrixXd act;
  const Eigen::MatrixXd* in = &x.data;
  for (std::size_t l = 0; l < geometry.size(); ++l) {
    Eigen::MatrixXd col = detail::im2col(*in, x.count, geometry[l]);
    Eigen::MatrixXd z = p.conv[l].w * col;
    z.colwise() += p.conv[l].b;
    if (int(l) >= film_from) {
      FilmCoefficients f = film_coefficients(p.film[l - std::size_t(film_from)], p.context);
      Eigen::MatrixXd pre = std::move(z);
      z = film_transform(pre, f);
      if (cache) {
        cache->film[l] = std::move(f);
        cache->conv_pre.push_back(std::move(pre));
      }
    } else if (cache) {
      cache->conv_pre.emplace_back();
    }
    z = z.cwiseMax(0.0);
    if (cache) {
      cache->cols.push_back(std::move(col));
      cache->conv_out.push_back(std::move(z));
      in = &cache->conv_out.back();
    } else {
      act = std::move(z);
      in = &act;
    }
  }
  const auto& last = geometry.back();
  const Eigen::Index hw = Eigen::Index(last.out_h) * last.out_w;
  Eigen::MatrixXd h(last.out_c * hw, x.count);
  for (int n = 0; n < x.count; ++n)
    for (int c = 0; c < last.out_c; ++c) h.col(n).segment(c * hw, hw) = in->row(c).segment(n * hw, hw).transpose();
  for (std::size_t l = 0; l < p.trunk.size(); ++l) {
    Eigen::MatrixXd z = p.trunk[l].w * h;
    z.colwise() += p.trunk[l].b;
    const bool hidden = l + 1 < p.trunk.size();
    Eigen::MatrixXd next = hidden ? Eigen::MatrixXd(z.cwiseMax(0.0)) : z;
    if (cache) {
      cache->trunk_in.push_back(std::move(h));
      cache->trunk_pre.push_back(std::move(z));
    }
    h = std::move(next);
  }
  return h.transpose();
}

inline Eigen::MatrixXd fen_forward(const ParameterBundle& p, const std::vector<LabeledExample>& items, FenCache* cache = nullptr) {
  return fen_forward(p, pack_images(items), cache);
}

/// Accumulates dLoss/d(theta, film, context) into `grad` given dLoss/dR.
inline void fen_backward(const ParameterBundle& p, const FenCache& cache, const Eigen::MatrixXd& d_features,
                         ParameterBundle& grad) {
  if (d_features.rows() != cache.count || d_features.cols() != p.arch.feature_dim)
    throw ShapeError("feature gradient does not match the cached batch");
  Eigen::MatrixXd dh = d_features.transpose();
  for (std::size_t l = p.trunk.size(); l-- > 0;) {
    if (l + 1 < p.trunk.size()) dh = (cache.trunk_pre[l].array() > 0.0).select(dh, 0.0);
    grad.trunk[l].w.noalias() += dh * cache.trunk_in[l].transpose();
    grad.trunk[l].b += dh.rowwise().sum();
    dh = p.trunk[l].w.transpose() * dh;
  }
  const auto& geometry = cache.geometry;
  const auto& last = geometry.back();
  const Eigen::Index hw = Eigen::Index(last.out_h) * last.out_w;
  Eigen::MatrixXd dact(last.out_c, cache.count * hw);
  for (int n = 0; n < cache.count; ++n)
    for (int c = 0; c < last.out_c; ++c) dact.row(c).segment(n * hw, hw) = dh.col(n).segment(c * hw, hw).transpose();

  const int film_from = film_start_layer(p.arch);
  for (std::size_t l = geometry.size(); l-- > 0;) {
    Eigen::MatrixXd dz = (cache.conv_out[l].array() > 0.0).select(dact, 0.0);
    if (int(l) >= film_from) {
      const auto& f = cache.film[l];
      Eigen::VectorXd dgamma = dz.cwiseProduct(cache.conv_pre[l]).rowwise().sum();
      Eigen::VectorXd dbeta = dz.rowwise().sum();
      Eigen::VectorXd dg(2 * dgamma.size());
      dg << dgamma, dbeta;
      Linear& gen = grad.film[l - std::size_t(film_from)];
      const Linear& gen_p = p.film[l - std::size_t(film_from)];
      gen.w.noalias() += dg * p.context.transpose();
      gen.b += dg;
      grad.context.noalias() += gen_p.w.transpose() * dg;
      dz = f.gamma.asDiagonal() * dz;
    }
    grad.conv[l].w.noalias() += dz * cache.cols[l].transpose();
    grad.conv[l].b += dz.rowwise().sum();
    if (l > 0) {
      Eigen::MatrixXd dcol = p.conv[l].w.transpose() * dz;
      dact = detail::col2im(dcol, cache.count, geometry[l]);
    }
  }
}

}  // namespace fusion
