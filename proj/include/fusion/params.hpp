#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "fusion/error.hpp"
#include "fusion/random.hpp"

namespace fusion {

/// Shape of one convolution layer after resolving the input geometry.
struct ConvGeometry {
  int in_c, out_c, kernel, stride, pad;
  int in_h, in_w, out_h, out_w;
};

struct ArchConfig {
  int in_channels = 1;
  int image_size = 28;
  int conv_width = 64;
  std::vector<int> conv_kernels = {3, 3, 3, 3, 3, 1};
  std::vector<int> conv_strides = {2, 1, 2, 1, 2, 1};
  std::vector<int> conv_padding = {1, 1, 1, 1, 1, 0};
  int trunk_hidden = 256;  // 0: a single trunk linear layer
  int feature_dim = 64;
  int attention_hidden = 0;  // 0: feature_dim / 2
  std::vector<int> cln_hidden = {256};
  int num_classes = 30;
  bool film = false;
  int film_layers = 2;
  int context_dim = 100;

  int attention_width() const { return attention_hidden > 0 ? attention_hidden : std::max(1, feature_dim / 2); }

  std::vector<ConvGeometry> conv_geometry() const {
    std::vector<ConvGeometry> g;
    int c = in_channels, h = image_size, w = image_size;
    for (std::size_t l = 0; l < conv_kernels.size(); ++l) {
      ConvGeometry cg{c, conv_width, conv_kernels[l], conv_strides[l], conv_padding[l], h, w, 0, 0};
      cg.out_h = (h + 2 * cg.pad - cg.kernel) / cg.stride + 1;
      cg.out_w = (w + 2 * cg.pad - cg.kernel) / cg.stride + 1;
      g.push_back(cg);
      c = cg.out_c;
      h = cg.out_h;
      w = cg.out_w;
    }
    return g;
  }

  int flat_dim() const {
    auto g = conv_geometry();
    return g.back().out_c * g.back().out_h * g.back().out_w;
  }

  void validate() const {
    if (in_channels < 1 || image_size < 1 || conv_width < 1) throw ConfigError("architecture sizes must be positive");
    if (conv_kernels.empty()) throw ConfigError("architecture needs at least one conv layer");
    if (conv_kernels.size() != conv_strides.size() || conv_kernels.size() != conv_padding.size())
      throw ConfigError("conv kernel/stride/padding lists differ in length");
    for (std::size_t l = 0; l < conv_kernels.size(); ++l)
      if (conv_kernels[l] < 1 || conv_strides[l] < 1 || conv_padding[l] < 0)
        throw ConfigError("invalid conv layer " + std::to_string(l));
    int h = image_size;
    for (std::size_t l = 0; l < conv_kernels.size(); ++l) {
      const int span = h + 2 * conv_padding[l] - conv_kernels[l];
      h = span < 0 ? 0 : span / conv_strides[l] + 1;
      if (h < 1) throw ConfigError("conv stack shrinks the input below 1x1 at layer " + std::to_string(l));
    }
    if (feature_dim < 1 || trunk_hidden < 0 || num_classes < 1) throw ConfigError("invalid feature/class sizes");
    for (int hdim : cln_hidden)
      if (hdim < 1) throw ConfigError("CLN hidden widths must be positive");
    if (film && (film_layers < 1 || film_layers > int(conv_kernels.size()) || context_dim < 1))
      throw ConfigError("invalid FiLM configuration");
  }
};

inline void to_json(nlohmann::json& j, const ArchConfig& a) {
  j = {{"in_channels", a.in_channels},   {"image_size", a.image_size},     {"conv_width", a.conv_width},
       {"conv_kernels", a.conv_kernels}, {"conv_strides", a.conv_strides}, {"conv_padding", a.conv_padding},
       {"trunk_hidden", a.trunk_hidden}, {"feature_dim", a.feature_dim},   {"attention_hidden", a.attention_hidden},
       {"cln_hidden", a.cln_hidden},     {"num_classes", a.num_classes},   {"film", a.film},
       {"film_layers", a.film_layers},   {"context_dim", a.context_dim}};
}

inline void from_json(const nlohmann::json& j, ArchConfig& a) {
  ArchConfig d;
  a.in_channels = j.value("in_channels", d.in_channels);
  a.image_size = j.value("image_size", d.image_size);
  a.conv_width = j.value("conv_width", d.conv_width);
  a.conv_kernels = j.value("conv_kernels", d.conv_kernels);
  a.conv_strides = j.value("conv_strides", d.conv_strides);
  a.conv_padding = j.value("conv_padding", d.conv_padding);
  a.trunk_hidden = j.value("trunk_hidden", d.trunk_hidden);
  a.feature_dim = j.value("feature_dim", d.feature_dim);
  a.attention_hidden = j.value("attention_hidden", d.attention_hidden);
  a.cln_hidden = j.value("cln_hidden", d.cln_hidden);
  a.num_classes = j.value("num_classes", d.num_classes);
  a.film = j.value("film", d.film);
  a.film_layers = j.value("film_layers", d.film_layers);
  a.context_dim = j.value("context_dim", d.context_dim);
}

struct Linear {
  Eigen::MatrixXd w;  // out x in
  Eigen::VectorXd b;
};

struct Conv {
  Eigen::MatrixXd w;  // out_c x (k * k * in_c), column index (ky*k + kx)*in_c + c
  Eigen::VectorXd b;
};

/// Parameter groups: theta (FEN), W (CLN), rho (attention), FiLM generator,
/// FiLM context vector.
enum class Group { Fen, Cln, Attention, Film, Context };

inline std::string_view to_string(Group g) {
  switch (g) {
    case Group::Fen: return "theta";
    case Group::Cln: return "W";
    case Group::Attention: return "rho";
    case Group::Film: return "film";
    case Group::Context: return "context";
  }
  return "?";
}

inline Group group_from_string(std::string_view s) {
  for (Group g : {Group::Fen, Group::Cln, Group::Attention, Group::Film, Group::Context})
    if (to_string(g) == s) return g;
  throw FormatError("unknown parameter group '" + std::string(s) + "'");
}

struct GroupMask {
  bool fen = false, cln = false, attention = false, film = false, context = false;
  bool contains(Group g) const {
    switch (g) {
      case Group::Fen: return fen;
      case Group::Cln: return cln;
      case Group::Attention: return attention;
      case Group::Film: return film;
      case Group::Context: return context;
    }
    return false;
  }
  /// psi = {W, rho}: adapted by the inner loop.
  static GroupMask psi() { return {false, true, true, false, false}; }
  /// phi = {theta, W, rho}: adapted by the outer loop.
  static GroupMask phi() { return {true, true, true, false, false}; }
  static GroupMask all() { return {true, true, true, true, true}; }
  static GroupMask only(Group g) {
    GroupMask m;
    m.fen = g == Group::Fen;
    m.cln = g == Group::Cln;
    m.attention = g == Group::Attention;
    m.film = g == Group::Film;
    m.context = g == Group::Context;
    return m;
  }
};

/// Named flat view of one parameter tensor.
template <class Scalar>
struct TensorView {
  std::string name;
  Group group;
  std::vector<int> shape;
  std::span<Scalar> values;
};

struct ParameterBundle {
  ArchConfig arch;
  std::vector<Conv> conv;
  std::vector<Linear> trunk;
  Linear att_hidden;  // H x F
  Linear att_out;     // 1 x H
  std::vector<Linear> cln;
  std::vector<Linear> film;  // per FiLM'd conv layer: (2*C) x context_dim
  Eigen::VectorXd context;

  template <class Self, class Fn>
  static void visit_impl(Self& self, Fn&& fn) {
    using S = std::conditional_t<std::is_const_v<Self>, const double, double>;
    auto mat = [&](std::string name, Group g, auto& m) {
      fn(TensorView<S>{std::move(name), g, {int(m.rows()), int(m.cols())}, std::span<S>(m.data(), std::size_t(m.size()))});
    };
    auto vec = [&](std::string name, Group g, auto& v) {
      fn(TensorView<S>{std::move(name), g, {int(v.size())}, std::span<S>(v.data(), std::size_t(v.size()))});
    };
    for (std::size_t l = 0; l < self.conv.size(); ++l) {
      mat("fen.conv" + std::to_string(l) + ".weight", Group::Fen, self.conv[l].w);
      vec("fen.conv" + std::to_string(l) + ".bias", Group::Fen, self.conv[l].b);
    }
    for (std::size_t l = 0; l < self.trunk.size(); ++l) {
      mat("fen.linear" + std::to_string(l) + ".weight", Group::Fen, self.trunk[l].w);
      vec("fen.linear" + std::to_string(l) + ".bias", Group::Fen, self.trunk[l].b);
    }
    mat("attention.hidden.weight", Group::Attention, self.att_hidden.w);
    vec("attention.hidden.bias", Group::Attention, self.att_hidden.b);
    mat("attention.out.weight", Group::Attention, self.att_out.w);
    vec("attention.out.bias", Group::Attention, self.att_out.b);
    for (std::size_t l = 0; l < self.cln.size(); ++l) {
      mat("cln.linear" + std::to_string(l) + ".weight", Group::Cln, self.cln[l].w);
      vec("cln.linear" + std::to_string(l) + ".bias", Group::Cln, self.cln[l].b);
    }
    for (std::size_t l = 0; l < self.film.size(); ++l) {
      mat("film.generator" + std::to_string(l) + ".weight", Group::Film, self.film[l].w);
      vec("film.generator" + std::to_string(l) + ".bias", Group::Film, self.film[l].b);
    }
    if (self.context.size() > 0) vec("film.context", Group::Context, self.context);
  }

  template <class Fn>
  void visit(Fn&& fn) {
    visit_impl(*this, std::forward<Fn>(fn));
  }
  template <class Fn>
  void visit(Fn&& fn) const {
    visit_impl(*this, std::forward<Fn>(fn));
  }

  std::vector<TensorView<double>> views() {
    std::vector<TensorView<double>> out;
    visit([&](TensorView<double> v) { out.push_back(std::move(v)); });
    return out;
  }
  std::vector<TensorView<const double>> views() const {
    std::vector<TensorView<const double>> out;
    visit([&](TensorView<const double> v) { out.push_back(std::move(v)); });
    return out;
  }

  std::size_t count(GroupMask mask = GroupMask::all()) const {
    std::size_t n = 0;
    visit([&](const TensorView<const double>& v) {
      if (mask.contains(v.group)) n += v.values.size();
    });
    return n;
  }

  /// Flattened values of the selected groups, in visit order.
  Eigen::VectorXd flatten(GroupMask mask = GroupMask::all()) const {
    Eigen::VectorXd out(Eigen::Index(count(mask)));
    Eigen::Index k = 0;
    visit([&](const TensorView<const double>& v) {
      if (!mask.contains(v.group)) return;
      for (double x : v.values) out[k++] = x;
    });
    return out;
  }

  void unflatten(const Eigen::VectorXd& flat, GroupMask mask = GroupMask::all()) {
    if (std::size_t(flat.size()) != count(mask)) throw ShapeError("flat parameter vector has the wrong length");
    Eigen::Index k = 0;
    visit([&](const TensorView<double>& v) {
      if (!mask.contains(v.group)) return;
      for (double& x : v.values) x = flat[k++];
    });
  }

  bool all_finite() const {
    bool ok = true;
    visit([&](const TensorView<const double>& v) {
      for (double x : v.values) ok = ok && std::isfinite(x);
    });
    return ok;
  }

  /// A copy with every value set to zero (gradient accumulator).
  ParameterBundle zeros_like() const {
    ParameterBundle z = *this;
    z.visit([](const TensorView<double>& v) { std::fill(v.values.begin(), v.values.end(), 0.0); });
    return z;
  }

  /// this += scale * other, restricted to the selected groups.
  void axpy(double scale, const ParameterBundle& other, GroupMask mask = GroupMask::all()) {
    auto dst = views();
    auto src = other.views();
    if (dst.size() != src.size()) throw ShapeError("parameter bundles differ in structure");
    for (std::size_t t = 0; t < dst.size(); ++t) {
      if (!mask.contains(dst[t].group)) continue;
      if (dst[t].values.size() != src[t].values.size()) throw ShapeError("tensor size mismatch in " + dst[t].name);
      for (std::size_t i = 0; i < dst[t].values.size(); ++i) dst[t].values[i] += scale * src[t].values[i];
    }
  }

  void scale(double s, GroupMask mask = GroupMask::all()) {
    visit([&](const TensorView<double>& v) {
      if (mask.contains(v.group))
        for (double& x : v.values) x *= s;
    });
  }

  /// FNV-1a over the raw bytes of the selected groups.
  std::uint64_t checksum(GroupMask mask) const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    visit([&](const TensorView<const double>& v) {
      if (!mask.contains(v.group)) return;
      for (double x : v.values) {
        auto bits = std::bit_cast<std::uint64_t>(x);
        for (int b = 0; b < 8; ++b) {
          h ^= (bits >> (8 * b)) & 0xffu;
          h *= 0x100000001b3ull;
        }
      }
    });
    return h;
  }

  bool bit_equal(const ParameterBundle& o, GroupMask mask = GroupMask::all()) const {
    auto a = views();
    auto b = o.views();
    if (a.size() != b.size()) return false;
    for (std::size_t t = 0; t < a.size(); ++t) {
      if (!mask.contains(a[t].group)) continue;
      if (a[t].values.size() != b[t].values.size()) return false;
      for (std::size_t i = 0; i < a[t].values.size(); ++i)
        if (std::bit_cast<std::uint64_t>(a[t].values[i]) != std::bit_cast<std::uint64_t>(b[t].values[i])) return false;
    }
    return true;
  }
};

// ---------------------------------------------------------------------------
// Initialisation

namespace detail {

inline Linear init_linear(int out, int in, double w_std, Rng& rng, double bias = 0.0) {
  Linear l;
  l.w.resize(out, in);
  for (Eigen::Index i = 0; i < l.w.size(); ++i) l.w.data()[i] = gaussian(rng, 0.0, w_std);
  l.b = Eigen::VectorXd::Constant(out, bias);
  return l;
}

}  // namespace detail

/// Fresh CLN layers (F -> hidden... -> outputs), He-normal weights, zero bias.
inline std::vector<Linear> init_cln(const ArchConfig& a, int outputs, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x434cu});
  std::vector<Linear> layers;
  int in = a.feature_dim;
  for (int h : a.cln_hidden) {
    layers.push_back(detail::init_linear(h, in, std::sqrt(2.0 / in), rng));
    in = h;
  }
  layers.push_back(detail::init_linear(outputs, in, std::sqrt(1.0 / in), rng));
  return layers;
}

inline ParameterBundle init_params(const ArchConfig& a, std::uint64_t seed) {
  a.validate();
  ParameterBundle p;
  p.arch = a;
  Rng fen = make_rng(seed, {0x46454eu});
  for (const auto& g : a.conv_geometry()) {
    const int fan_in = g.in_c * g.kernel * g.kernel;
    Conv c;
    c.w.resize(g.out_c, fan_in);
    for (Eigen::Index i = 0; i < c.w.size(); ++i) c.w.data()[i] = gaussian(fen, 0.0, std::sqrt(2.0 / fan_in));
    c.b = Eigen::VectorXd::Zero(g.out_c);
    p.conv.push_back(std::move(c));
  }
  const int flat = a.flat_dim();
  if (a.trunk_hidden > 0) {
    p.trunk.push_back(detail::init_linear(a.trunk_hidden, flat, std::sqrt(2.0 / flat), fen));
    p.trunk.push_back(detail::init_linear(a.feature_dim, a.trunk_hidden, std::sqrt(1.0 / a.trunk_hidden), fen));
  } else {
    p.trunk.push_back(detail::init_linear(a.feature_dim, flat, std::sqrt(1.0 / flat), fen));
  }
  Rng att = make_rng(seed, {0x415454u});
  const int h = a.attention_width();
  p.att_hidden = detail::init_linear(h, a.feature_dim, std::sqrt(1.0 / a.feature_dim), att);
  p.att_out = detail::init_linear(1, h, std::sqrt(1.0 / h), att);
  p.cln = init_cln(a, a.num_classes, derive_seed(seed, {0x57u}));
  if (a.film) {
    Rng film = make_rng(seed, {0x46494cu});
    for (int l = 0; l < a.film_layers; ++l) {
      Linear g = detail::init_linear(2 * a.conv_width, a.context_dim, 0.01, film);
      g.b.head(a.conv_width).setOnes();  // gamma(0) = 1, beta(0) = 0
      p.film.push_back(std::move(g));
    }
    p.context = Eigen::VectorXd::Zero(a.context_dim);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoints: "FUSCKPT1", u64le header length, JSON index, f32le payload.

inline constexpr std::string_view kCheckpointMagic = "FUSCKPT1";

inline void save_checkpoint(const ParameterBundle& p, const std::filesystem::path& path) {
  nlohmann::json index;
  index["format"] = "fusion-checkpoint";
  index["version"] = 1;
  index["arch"] = p.arch;
  index["tensors"] = nlohmann::json::array();
  std::vector<float> payload;
  p.visit([&](const TensorView<const double>& v) {
    index["tensors"].push_back({{"name", v.name},
                                {"group", std::string(to_string(v.group))},
                                {"shape", v.shape},
                                {"offset", payload.size() * sizeof(float)}});
    for (double x : v.values) payload.push_back(float(x));
  });
  const std::string header = index.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic.data(), std::streamsize(kCheckpointMagic.size()));
  const std::uint64_t len = header.size();
  for (int b = 0; b < 8; ++b) out.put(char((len >> (8 * b)) & 0xffu));
  out.write(header.data(), std::streamsize(header.size()));
  for (float f : payload) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) out.put(char((bits >> (8 * b)) & 0xffu));
  }
  if (!out) throw IoError("short write to checkpoint " + path.string());
}

inline ParameterBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (bytes.size() < 16 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
    throw FormatError("not a checkpoint file: " + path.string());
  std::uint64_t len = 0;
  for (int b = 0; b < 8; ++b) len |= std::uint64_t(bytes[8 + std::size_t(b)]) << (8 * b);
  if (16 + len > bytes.size()) throw CorruptionError("checkpoint header truncated");
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + std::ptrdiff_t(len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  ArchConfig arch = index.at("arch").get<ArchConfig>();
  ParameterBundle p = init_params(arch, 0);
  const std::size_t payload_start = 16 + len;
  const auto& entries = index.at("tensors");
  auto views = p.views();
  if (entries.size() != views.size()) throw CorruptionError("checkpoint tensor count does not match its architecture");
  for (std::size_t t = 0; t < views.size(); ++t) {
    const auto& e = entries[t];
    if (e.at("name").get<std::string>() != views[t].name || e.at("shape").get<std::vector<int>>() != views[t].shape)
      throw CorruptionError("checkpoint tensor " + e.at("name").get<std::string>() + " does not match architecture");
    const std::size_t off = payload_start + e.at("offset").get<std::size_t>();
    if (off + views[t].values.size() * 4 > bytes.size()) throw CorruptionError("checkpoint payload truncated");
    for (std::size_t i = 0; i < views[t].values.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= std::uint32_t(bytes[off + 4 * i + std::size_t(b)]) << (8 * b);
      views[t].values[i] = double(std::bit_cast<float>(bits));
    }
  }
  return p;
}

}  // namespace fusion
