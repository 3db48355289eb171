#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fusion/error.hpp"
#include "fusion/image.hpp"
#include "fusion/random.hpp"

namespace fusion {

using MatrixRowF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// N x D embedding vectors, one row per dataset item.
struct EmbeddingSet {
  MatrixRowF vectors;
  std::string source_tag;

  Eigen::Index rows() const { return vectors.rows(); }
  Eigen::Index dim() const { return vectors.cols(); }

  void validate() const {
    if (vectors.rows() < 1 || vectors.cols() < 1) throw EmptySetError("embedding set is empty");
    if (!vectors.allFinite()) throw ValidationError("embedding set contains non-finite entries");
  }
};

// ---------------------------------------------------------------------------
// FUSEMB1 embedding files:
//   bytes 0..6 "FUSEMB1", byte 7 = 0x00, u32le N, u32le D, N*D f32le row-major.

inline constexpr std::array<char, 7> kEmbeddingMagic = {'F', 'U', 'S', 'E', 'M', 'B', '1'};
inline constexpr std::size_t kEmbeddingHeaderBytes = 16;

namespace detail {

inline void put_u32le(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace detail

inline std::vector<unsigned char> encode_embeddings(const EmbeddingSet& e) {
  e.validate();
  std::vector<unsigned char> out(kEmbeddingMagic.begin(), kEmbeddingMagic.end());
  out.push_back(0);
  detail::put_u32le(out, std::uint32_t(e.rows()));
  detail::put_u32le(out, std::uint32_t(e.dim()));
  out.reserve(out.size() + std::size_t(e.vectors.size()) * 4);
  for (Eigen::Index i = 0; i < e.vectors.size(); ++i)
    detail::put_u32le(out, std::bit_cast<std::uint32_t>(e.vectors.data()[i]));
  return out;
}

inline EmbeddingSet decode_embeddings(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 8 || !std::equal(kEmbeddingMagic.begin(), kEmbeddingMagic.end(), bytes.begin()) || bytes[7] != 0)
    throw FormatError("not an embedding file (bad magic)");
  if (bytes.size() < kEmbeddingHeaderBytes) throw CorruptionError("embedding header truncated");
  const std::uint32_t n = detail::get_u32le(bytes.data() + 8);
  const std::uint32_t d = detail::get_u32le(bytes.data() + 12);
  if (n == 0 || d == 0) throw EmptySetError("embedding file declares an empty matrix");
  const std::uint64_t payload = std::uint64_t(n) * d * 4;
  if (bytes.size() - kEmbeddingHeaderBytes != payload)
    throw CorruptionError("embedding payload is " + std::to_string(bytes.size() - kEmbeddingHeaderBytes) +
                          " bytes, header implies " + std::to_string(payload));
  EmbeddingSet e;
  e.vectors.resize(n, d);
  const unsigned char* p = bytes.data() + kEmbeddingHeaderBytes;
  for (std::uint64_t i = 0; i < std::uint64_t(n) * d; ++i)
    e.vectors.data()[i] = std::bit_cast<float>(detail::get_u32le(p + 4 * i));
  e.validate();
  return e;
}

inline void store_embeddings(const EmbeddingSet& e, const std::filesystem::path& path) {
  detail::write_file_bytes(path, encode_embeddings(e));
}

inline EmbeddingSet load_embeddings(const std::filesystem::path& path) {
  EmbeddingSet e = decode_embeddings(detail::read_file_bytes(path));
  e.source_tag = "file:" + path.string();
  return e;
}

// ---------------------------------------------------------------------------
// Synthetic glyphs: each class is a handful of random quadratic strokes; each
// sample re-renders the strokes under a small random similarity transform and
// control-point wobble, then adds Gaussian pixel noise.

struct GlyphStyle {
  double rotation_sd_deg = 8.0;
  double scale_jitter = 0.06;
  double translate_px = 1.5;
  double wobble = 0.03;
  double stroke_px = 1.4;
  double noise_sd = 0.05;
};

namespace detail {

struct Stroke {
  std::array<double, 6> ctrl;  // (x0,y0, x1,y1, x2,y2) in [-1,1]^2
};

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

inline void render_glyph(std::span<double> out, int size, const std::vector<Stroke>& strokes, Rng& rng,
                         const GlyphStyle& style) {
  const double rot = std::clamp(gaussian(rng, 0.0, style.rotation_sd_deg), -2.5 * style.rotation_sd_deg,
                                2.5 * style.rotation_sd_deg) *
                     std::numbers::pi / 180.0;
  const double scale = 1.0 + uniform(rng, -style.scale_jitter, style.scale_jitter);
  const double px_to_unit = 2.0 / size;
  const double tx = uniform(rng, -style.translate_px, style.translate_px) * px_to_unit;
  const double ty = uniform(rng, -style.translate_px, style.translate_px) * px_to_unit;
  const double cr = std::cos(rot), sr = std::sin(rot);

  constexpr int kSegments = 12;
  std::vector<std::array<double, 4>> segments;
  for (const auto& s : strokes) {
    std::array<double, 6> c = s.ctrl;
    for (double& v : c) v += gaussian(rng, 0.0, style.wobble);
    double prev_x = 0, prev_y = 0;
    for (int i = 0; i <= kSegments; ++i) {
      const double t = double(i) / kSegments;
      const double bx = (1 - t) * (1 - t) * c[0] + 2 * (1 - t) * t * c[2] + t * t * c[4];
      const double by = (1 - t) * (1 - t) * c[1] + 2 * (1 - t) * t * c[3] + t * t * c[5];
      const double x = scale * (cr * bx - sr * by) + tx;
      const double y = scale * (sr * bx + cr * by) + ty;
      if (i > 0) segments.push_back({prev_x, prev_y, x, y});
      prev_x = x;
      prev_y = y;
    }
  }
  const double half_width = 0.5 * style.stroke_px * px_to_unit;
  const double aa = px_to_unit;
  for (int yy = 0; yy < size; ++yy)
    for (int xx = 0; xx < size; ++xx) {
      const double u = (xx + 0.5) * px_to_unit - 1.0;
      const double v = (yy + 0.5) * px_to_unit - 1.0;
      double d = 1e9;
      for (const auto& sg : segments) d = std::min(d, segment_distance(u, v, sg[0], sg[1], sg[2], sg[3]));
      const double ink = std::clamp(1.0 - (d - half_width) / aa, 0.0, 1.0);
      const double noisy = ink + gaussian(rng, 0.0, style.noise_sd);
      out[std::size_t(yy) * size + xx] = std::clamp(noisy, 0.0, 1.0);
    }
}

}  // namespace detail

inline Dataset generate_synthetic_glyphs(int num_classes, int samples_per_class, int image_size, std::uint64_t seed,
                                         const GlyphStyle& style = {}) {
  if (num_classes < 2) throw ConfigError("synthetic glyphs need at least 2 classes");
  if (samples_per_class < 2) throw ConfigError("synthetic glyphs need at least 2 samples per class");
  if (image_size < 8) throw ConfigError("synthetic glyph image_size must be >= 8");

  Dataset d;
  d.channels = 1;
  d.height = d.width = image_size;
  d.num_classes = num_classes;
  d.images.assign(std::size_t(num_classes) * samples_per_class * image_size * image_size, 0.0);
  d.labels.reserve(std::size_t(num_classes) * samples_per_class);
  for (int c = 0; c < num_classes; ++c) {
    Rng proto = make_rng(seed, {0x61u, std::uint64_t(c)});
    const int n_strokes = 2 + int(uniform_index(proto, 3));
    std::vector<detail::Stroke> strokes(static_cast<std::size_t>(n_strokes));
    for (auto& s : strokes)
      for (double& v : s.ctrl) v = uniform(proto, -0.7, 0.7);
    for (int k = 0; k < samples_per_class; ++k) {
      Rng rng = make_rng(seed, {0x62u, std::uint64_t(c), std::uint64_t(k)});
      const std::size_t idx = std::size_t(c) * samples_per_class + k;
      std::span<double> out(d.images.data() + idx * d.image_size(), d.image_size());
      detail::render_glyph(out, image_size, strokes, rng, style);
      d.labels.push_back(c);
    }
  }
  return d;
}

/// Label-free stand-in for a learned embedding network: a fixed Gaussian
/// random projection of the raw pixels followed by per-column standardisation.
inline EmbeddingSet embed_dataset_baseline(const Dataset& dataset, int dim, std::uint64_t seed) {
  if (dim < 2) throw ConfigError("embedding dim must be >= 2");
  if (dataset.size() == 0) throw EmptySetError("cannot embed an empty dataset");
  const Eigen::Index n = Eigen::Index(dataset.size());
  const Eigen::Index in = Eigen::Index(dataset.image_size());
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(dataset.images.data(), n,
                                                                                            in);
  Rng rng = make_rng(seed, {0x65u});
  Eigen::MatrixXd proj(in, dim);
  for (Eigen::Index j = 0; j < dim; ++j)
    for (Eigen::Index i = 0; i < in; ++i) proj(i, j) = gaussian(rng) / std::sqrt(double(dim));
  Eigen::MatrixXd z = x * proj;
  for (Eigen::Index j = 0; j < dim; ++j) {
    const double mean = z.col(j).mean();
    z.col(j).array() -= mean;
    const double sd = std::sqrt(z.col(j).squaredNorm() / double(n));
    if (sd > 0) z.col(j) /= sd;
  }
  EmbeddingSet e;
  e.vectors = z.cast<float>();
  e.source_tag = "baseline-random-projection";
  return e;
}

// ---------------------------------------------------------------------------
// PNG image folders: <root>/<class-name>/*.png, classes sorted by name.

inline Image read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) throw FormatError("cannot read PNG " + path.string());
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw CorruptionError("corrupt PNG " + path.string());
  }
  const int ch = color ? 3 : 1;
  Image out(ch, int(img.height), int(img.width));
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < ch; ++c) out.at(c, y, x) = buf[(std::size_t(y) * out.width + x) * ch + c] / 255.0;
  return out;
}

inline void write_png(const Image& im, const std::filesystem::path& path) {
  if (im.channels != 1 && im.channels != 3) throw ShapeError("PNG output supports 1 or 3 channels");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(im.width);
  img.height = png_uint_32(im.height);
  img.format = im.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<unsigned char> buf(std::size_t(im.width) * im.height * im.channels);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < im.channels; ++c)
        buf[(std::size_t(y) * im.width + x) * im.channels + c] =
            static_cast<unsigned char>(std::lround(std::clamp(im.at(c, y, x), 0.0, 1.0) * 255.0));
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path.string());
}

/// Load a class-per-subdirectory PNG tree. Images are channel-adapted to the
/// first image's channel count and resized to `image_size` (or the first
/// image's size when 0).
inline Dataset load_image_folder(const std::filesystem::path& root, int image_size = 0, Split split = Split::MetaTrain) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset directory not found: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw EmptySetError("no class subdirectories under " + root.string());

  Dataset d;
  d.split = split;
  bool shaped = false;
  int cls = 0;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      auto ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return char(std::tolower(ch)); });
      if (entry.is_regular_file() && ext == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) continue;
    for (const auto& f : files) {
      Image im = read_png(f);
      if (!shaped) {
        d.channels = im.channels;
        d.height = image_size > 0 ? image_size : im.height;
        d.width = image_size > 0 ? image_size : im.width;
        shaped = true;
      }
      im = resize_bilinear(adapt_channels(im, d.channels), d.height, d.width);
      d.images.insert(d.images.end(), im.pixels.begin(), im.pixels.end());
      d.labels.push_back(cls);
    }
    ++cls;
  }
  d.num_classes = cls;
  d.validate();
  return d;
}

}  // namespace fusion
