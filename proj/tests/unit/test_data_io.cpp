#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>

#include "fusion/data_io.hpp"
#include "fusion/kmeans.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace fusion;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "fusion_unit" / name;
  fs::create_directories(dir);
  return dir;
}

EmbeddingSet random_embeddings(int n, int d, std::uint64_t seed) {
  EmbeddingSet e;
  e.vectors = MatrixRowF(n, d);
  Rng rng = make_rng(seed);
  for (Eigen::Index i = 0; i < e.vectors.size(); ++i) e.vectors.data()[i] = float(gaussian(rng));
  return e;
}

}  // namespace

TEST(Embeddings, RoundTripIsBitExact) {
  auto e = random_embeddings(3, 4, 1);
  auto path = scratch("emb") / "a.bin";
  store_embeddings(e, path);
  EXPECT_EQ(load_embeddings(path).vectors, e.vectors);
}

TEST(Embeddings, BadMagicIsFormatError) {
  auto path = scratch("emb") / "bogus.bin";
  std::vector<unsigned char> bytes = {'B', 'O', 'G', 'U', 'S', '1', '2', 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0};
  detail::write_file_bytes(path, bytes);
  EXPECT_THROW(load_embeddings(path), FormatError);
}

TEST(Embeddings, TruncatedPayloadIsCorruption) {
  auto bytes = encode_embeddings(random_embeddings(10, 8, 2));
  bytes.resize(bytes.size() - 200);
  EXPECT_THROW(decode_embeddings(bytes), CorruptionError);
}

TEST(Embeddings, EmptyHeaderIsEmptySet) {
  std::vector<unsigned char> bytes = {'F', 'U', 'S', 'E', 'M', 'B', '1', 0, 0, 0, 0, 0, 4, 0, 0, 0};
  EXPECT_THROW(decode_embeddings(bytes), EmptySetError);
}

TEST(Embeddings, OneByOneFileSize) {
  EmbeddingSet e;
  e.vectors = MatrixRowF::Zero(1, 1);
  auto path = scratch("emb") / "one.bin";
  store_embeddings(e, path);
  EXPECT_EQ(fs::file_size(path), kEmbeddingHeaderBytes + 4);
}

TEST(Embeddings, WritesAreByteIdentical) {
  auto e = random_embeddings(5, 3, 3);
  auto dir = scratch("emb");
  store_embeddings(e, dir / "x.bin");
  store_embeddings(e, dir / "y.bin");
  EXPECT_EQ(detail::read_file_bytes(dir / "x.bin"), detail::read_file_bytes(dir / "y.bin"));
}

TEST(Embeddings, NanRejectedBeforeWrite) {
  auto e = random_embeddings(2, 2, 4);
  e.vectors(1, 1) = std::numeric_limits<float>::quiet_NaN();
  auto path = scratch("emb") / "nan.bin";
  fs::remove(path);
  EXPECT_THROW(store_embeddings(e, path), ValidationError);
  EXPECT_FALSE(fs::exists(path));
}

TEST(Embeddings, UnwritablePathIsIoError) {
  EXPECT_THROW(store_embeddings(random_embeddings(1, 1, 5), "/nonexistent_dir/x/e.bin"), IoError);
}

TEST(Glyphs, Deterministic) {
  auto a = generate_synthetic_glyphs(30, 20, 28, 7);
  auto b = generate_synthetic_glyphs(30, 20, 28, 7);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
}

TEST(Glyphs, ShapeAndLabels) {
  auto d = generate_synthetic_glyphs(2, 2, 28, 0);
  EXPECT_EQ(d.size(), 4u);
  EXPECT_EQ(d.channels, 1);
  EXPECT_EQ(d.height, 28);
  EXPECT_EQ(d.images.size(), 4u * 28 * 28);
  EXPECT_EQ(d.labels, (std::vector<int>{0, 0, 1, 1}));
  EXPECT_NO_THROW(d.validate());
}

TEST(Glyphs, InvalidArgumentsAreConfigErrors) {
  EXPECT_THROW(generate_synthetic_glyphs(3, 3, 7, 0), ConfigError);
  EXPECT_THROW(generate_synthetic_glyphs(1, 3, 28, 0), ConfigError);
  EXPECT_THROW(generate_synthetic_glyphs(3, 1, 28, 0), ConfigError);
}

TEST(Glyphs, LinearProbeSeparatesClasses) {
  auto d = generate_synthetic_glyphs(10, 20, 28, 1);
  Eigen::MatrixXd x(Eigen::Index(d.size()), Eigen::Index(d.image_size()));
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto p = d.pixels(i);
    for (std::size_t j = 0; j < p.size(); ++j) x(Eigen::Index(i), Eigen::Index(j)) = p[j];
  }
  EXPECT_GE(oracle::linear_probe_accuracy(x, d.labels, 10), 0.9);
}

TEST(BaselineEmbedding, IdenticalImagesGiveIdenticalRows) {
  auto d = generate_synthetic_glyphs(3, 4, 16, 2);
  std::copy(d.pixels(0).begin(), d.pixels(0).end(), d.images.begin() + std::ptrdiff_t(d.image_size()));
  auto e = embed_dataset_baseline(d, 8, 3);
  EXPECT_EQ(e.vectors.row(0), e.vectors.row(1));
}

TEST(BaselineEmbedding, ColumnsStandardised) {
  auto e = embed_dataset_baseline(generate_synthetic_glyphs(5, 10, 16, 2), 12, 3);
  Eigen::MatrixXd v = e.vectors.cast<double>();
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    const double mean = v.col(j).mean();
    const double var = (v.col(j).array() - mean).square().mean();
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-5);  // float32 storage
  }
}

TEST(BaselineEmbedding, IgnoresLabels) {
  auto d = generate_synthetic_glyphs(4, 5, 16, 9);
  auto shuffled = d;
  Rng rng = make_rng(1);
  std::shuffle(shuffled.labels.begin(), shuffled.labels.end(), rng);
  EXPECT_EQ(embed_dataset_baseline(d, 8, 4).vectors, embed_dataset_baseline(shuffled, 8, 4).vectors);
}

TEST(BaselineEmbedding, DimTooSmall) {
  EXPECT_THROW(embed_dataset_baseline(generate_synthetic_glyphs(2, 2, 16, 0), 1, 0), ConfigError);
}

TEST(BaselineEmbedding, KMeansRecoversClassesAboveChance) {
  auto d = generate_synthetic_glyphs(10, 20, 28, 1);
  auto e = embed_dataset_baseline(d, 64, 3);
  auto a = kmeans_partition(e, 10, 5);
  const double agreement = oracle::matched_agreement(a.pseudo_labels, d.labels, 10, 10);
  // Chance reference: the same cluster sizes over randomly permuted items.
  double chance = 0;
  for (int s = 0; s < 10; ++s) {
    auto perm = a.pseudo_labels;
    Rng rng = make_rng(100 + s);
    std::shuffle(perm.begin(), perm.end(), rng);
    chance += oracle::matched_agreement(perm, d.labels, 10, 10) / 10;
  }
  EXPECT_GT(agreement, chance + 0.2) << "agreement " << agreement << " chance " << chance;
}

TEST(ImageFolder, LoadsPngClassTree) {
  auto root = scratch("folder");
  fs::remove_all(root);
  auto d = generate_synthetic_glyphs(2, 3, 12, 4);
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto dir = root / ("class_" + std::to_string(d.labels[i]));
    fs::create_directories(dir);
    write_png(d.image(i), dir / (std::to_string(i) + ".png"));
  }
  auto loaded = load_image_folder(root);
  EXPECT_EQ(loaded.size(), 6u);
  EXPECT_EQ(loaded.num_classes, 2);
  EXPECT_EQ(loaded.height, 12);
  for (std::size_t i = 0; i < d.images.size(); ++i) EXPECT_NEAR(loaded.images[i], d.images[i], 0.5 / 255 + 1e-12);
}
