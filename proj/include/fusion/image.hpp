#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fusion/error.hpp"
#include "fusion/random.hpp"

namespace fusion {

/// A single channels-first image with pixel values in [0,1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int c, int h, int w) : channels(c), height(h), width(w), pixels(std::size_t(c) * h * w, 0.0) {}

  std::size_t size() const { return pixels.size(); }
  double& at(int c, int y, int x) { return pixels[(std::size_t(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return pixels[(std::size_t(c) * height + y) * width + x]; }
  bool same_shape(const Image& o) const { return channels == o.channels && height == o.height && width == o.width; }
  bool operator==(const Image&) const = default;
};

struct LabeledExample {
  Image x;
  int y = 0;
  bool operator==(const LabeledExample&) const = default;
};

enum class Split { MetaTrain, MetaVal, MetaTest };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::MetaTrain: return "meta-train";
    case Split::MetaVal: return "meta-val";
    case Split::MetaTest: return "meta-test";
  }
  return "?";
}

/// N images of identical shape plus their true class labels. Labels are only
/// read by oracle modes and by evaluation.
struct Dataset {
  int channels = 1;
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<double> images;  // N*C*H*W, channels-first
  std::vector<int> labels;
  Split split = Split::MetaTrain;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return std::size_t(channels) * height * width; }

  std::span<const double> pixels(std::size_t i) const {
    return {images.data() + i * image_size(), image_size()};
  }

  Image image(std::size_t i) const {
    Image im(channels, height, width);
    auto p = pixels(i);
    std::copy(p.begin(), p.end(), im.pixels.begin());
    return im;
  }

  LabeledExample example(std::size_t i) const { return {image(i), labels[i]}; }

  std::vector<std::size_t> members_of(int cls) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) out.push_back(i);
    return out;
  }

  void validate() const {
    if (labels.empty()) throw EmptySetError("dataset is empty");
    if (channels < 1 || height < 1 || width < 1) throw ShapeError("dataset has a degenerate image shape");
    if (images.size() != labels.size() * image_size()) throw ShapeError("dataset image buffer does not match N*C*H*W");
    std::vector<int> counts(std::size_t(std::max(num_classes, 0)), 0);
    for (int y : labels) {
      if (y < 0 || y >= num_classes) throw ValidationError("dataset label out of range");
      ++counts[std::size_t(y)];
    }
    for (int c = 0; c < num_classes; ++c)
      if (counts[std::size_t(c)] < 2) throw ValidationError("class " + std::to_string(c) + " has fewer than 2 samples");
    for (double v : images)
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("pixel value outside [0,1]");
  }
};

/// Keep only the given classes (relabelled 0..n-1 in the order given).
inline Dataset select_classes(const Dataset& d, std::span<const int> classes, Split split) {
  Dataset out;
  out.channels = d.channels;
  out.height = d.height;
  out.width = d.width;
  out.num_classes = int(classes.size());
  out.split = split;
  for (std::size_t nc = 0; nc < classes.size(); ++nc) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d.labels[i] != classes[nc]) continue;
      auto p = d.pixels(i);
      out.images.insert(out.images.end(), p.begin(), p.end());
      out.labels.push_back(int(nc));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pixel-space transforms

inline double sample_bilinear(const Image& im, int c, double y, double x, double fill = 0.0) {
  if (y < -1.0 || x < -1.0 || y > im.height || x > im.width) return fill;
  const int y0 = int(std::floor(y));
  const int x0 = int(std::floor(x));
  const double fy = y - y0;
  const double fx = x - x0;
  auto px = [&](int yy, int xx) {
    if (yy < 0 || xx < 0 || yy >= im.height || xx >= im.width) return fill;
    return im.at(c, yy, xx);
  };
  return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
         fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
}

/// Bilinear resize of a sub-window [y0, y0+h) x [x0, x0+w) to out_h x out_w
/// (half-pixel centres, edge clamped).
inline Image resize_window(const Image& im, double y0, double x0, double h, double w, int out_h, int out_w) {
  Image out(im.channels, out_h, out_w);
  for (int c = 0; c < im.channels; ++c)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) {
        double sy = y0 + (y + 0.5) * h / out_h - 0.5;
        double sx = x0 + (x + 0.5) * w / out_w - 0.5;
        sy = std::clamp(sy, 0.0, double(im.height - 1));
        sx = std::clamp(sx, 0.0, double(im.width - 1));
        out.at(c, y, x) = sample_bilinear(im, c, sy, sx);
      }
  return out;
}

inline Image resize_bilinear(const Image& im, int out_h, int out_w) {
  if (im.height == out_h && im.width == out_w) return im;
  return resize_window(im, 0, 0, im.height, im.width, out_h, out_w);
}

/// RGB -> gray by channel mean, gray -> RGB by replication.
inline Image adapt_channels(const Image& im, int channels) {
  if (im.channels == channels) return im;
  Image out(channels, im.height, im.width);
  if (channels == 1) {
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) {
        double s = 0;
        for (int c = 0; c < im.channels; ++c) s += im.at(c, y, x);
        out.at(0, y, x) = s / im.channels;
      }
    return out;
  }
  if (im.channels == 1) {
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x) out.at(c, y, x) = im.at(0, y, x);
    return out;
  }
  throw ConfigError("no channel adaptation rule from " + std::to_string(im.channels) + " to " +
                    std::to_string(channels) + " channels");
}

/// Resize and channel-adapt a whole dataset to the given input shape.
inline Dataset adapt_dataset(const Dataset& d, int channels, int height, int width) {
  if (d.channels == channels && d.height == height && d.width == width) return d;
  Dataset out = d;
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.images.clear();
  out.images.reserve(d.size() * out.image_size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    Image im = resize_bilinear(adapt_channels(d.image(i), channels), height, width);
    for (double& v : im.pixels) v = std::clamp(v, 0.0, 1.0);
    out.images.insert(out.images.end(), im.pixels.begin(), im.pixels.end());
  }
  return out;
}

inline Dataset invert_contrast(const Dataset& d) {
  Dataset out = d;
  for (double& v : out.images) v = 1.0 - v;
  return out;
}

inline Image flip_horizontal(const Image& im) {
  Image out = im;
  for (int c = 0; c < im.channels; ++c)
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) out.at(c, y, x) = im.at(c, y, im.width - 1 - x);
  return out;
}

inline Image flip_vertical(const Image& im) {
  Image out = im;
  for (int c = 0; c < im.channels; ++c)
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) out.at(c, y, x) = im.at(c, im.height - 1 - y, x);
  return out;
}

/// Affine warp about the image centre: rotation (radians), isotropic scale,
/// shear (radians) and translation in pixels. Outside pixels are zero.
inline Image affine_warp(const Image& im, double rotation, double scale, double shear, double ty, double tx) {
  Image out(im.channels, im.height, im.width);
  const double cy = (im.height - 1) / 2.0;
  const double cx = (im.width - 1) / 2.0;
  // forward: [a b; c d] = scale * R(rot) * Shear(shear)
  const double cr = std::cos(rotation), sr = std::sin(rotation), sh = std::tan(shear);
  const double a = scale * cr, b = scale * (cr * sh - sr);
  const double c = scale * sr, d = scale * (sr * sh + cr);
  const double det = a * d - b * c;
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x) {
      const double u = x - cx - tx;
      const double v = y - cy - ty;
      const double sx = (d * u - b * v) / det + cx;
      const double sy = (-c * u + a * v) / det + cy;
      for (int ch = 0; ch < im.channels; ++ch) out.at(ch, y, x) = sample_bilinear(im, ch, sy, sx);
    }
  return out;
}

/// Square crop covering `area_fraction` of the image at (top, left), resized back.
inline Image crop_resize(const Image& im, double area_fraction, double top, double left) {
  const double side = std::sqrt(area_fraction);
  const double h = side * im.height, w = side * im.width;
  return resize_window(im, top, left, h, w, im.height, im.width);
}

namespace detail {

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  v = mx;
  const double delta = mx - mn;
  s = mx > 0 ? delta / mx : 0.0;
  if (delta <= 0) {
    h = 0;
    return;
  }
  if (mx == r)
    h = std::fmod((g - b) / delta, 6.0);
  else if (mx == g)
    h = (b - r) / delta + 2.0;
  else
    h = (r - g) / delta + 4.0;
  h /= 6.0;
  if (h < 0) h += 1.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int i = int(std::floor(hh)) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

}  // namespace detail

/// Brightness/contrast/saturation factors multiply; hue is an additive shift in
/// turns. Saturation and hue are no-ops on single-channel images.
inline Image color_jitter(const Image& im, double brightness, double contrast, double saturation, double hue) {
  Image out = im;
  for (double& v : out.pixels) v = std::clamp(v * brightness, 0.0, 1.0);
  double mean = 0;
  const std::size_t plane = std::size_t(im.height) * im.width;
  for (std::size_t i = 0; i < plane; ++i) {
    double g = 0;
    for (int c = 0; c < im.channels; ++c) g += out.pixels[c * plane + i];
    mean += g / im.channels;
  }
  mean /= double(plane);
  for (double& v : out.pixels) v = std::clamp(mean + contrast * (v - mean), 0.0, 1.0);
  if (im.channels == 3) {
    for (std::size_t i = 0; i < plane; ++i) {
      double r = out.pixels[i], g = out.pixels[plane + i], b = out.pixels[2 * plane + i];
      const double gray = (r + g + b) / 3.0;
      r = gray + saturation * (r - gray);
      g = gray + saturation * (g - gray);
      b = gray + saturation * (b - gray);
      double h, s, v;
      detail::rgb_to_hsv(std::clamp(r, 0.0, 1.0), std::clamp(g, 0.0, 1.0), std::clamp(b, 0.0, 1.0), h, s, v);
      h += hue;
      if (h < 0) h += 1.0;
      detail::hsv_to_rgb(h, s, v, r, g, b);
      out.pixels[i] = r;
      out.pixels[plane + i] = g;
      out.pixels[2 * plane + i] = b;
    }
  }
  return out;
}

}  // namespace fusion
