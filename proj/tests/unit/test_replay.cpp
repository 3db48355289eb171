#include <gtest/gtest.h>

#include <cmath>

#include "fusion/replay.hpp"

using namespace fusion;

TEST(Reservoir, FillsInStreamOrder) {
  ReservoirBuffer<int> b(3, 1);
  for (int i = 0; i < 3; ++i) b.insert(i);
  EXPECT_EQ(b.items(), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(b.origins(), (std::vector<std::uint64_t>{0, 1, 2}));
  EXPECT_EQ(b.seen(), 3u);
  b.insert(3);
  EXPECT_EQ(b.size(), 3u);
  EXPECT_EQ(b.seen(), 4u);
}

TEST(Reservoir, ExplicitDrawReplacesOrDiscards) {
  ReservoirBuffer<int> b(2, 1);
  b.insert(10);
  b.insert(11);
  b.insert_with_draw(12, 1);
  EXPECT_EQ(b.items(), (std::vector<int>{10, 12}));
  EXPECT_EQ(b.origins(), (std::vector<std::uint64_t>{0, 2}));
  b.insert_with_draw(13, 3);
  EXPECT_EQ(b.items(), (std::vector<int>{10, 12}));
  EXPECT_EQ(b.seen(), 4u);
}

TEST(Reservoir, ZeroCapacityRejected) { EXPECT_THROW(ReservoirBuffer<int>(0, 1), ConfigError); }

TEST(Reservoir, InclusionUniformAcrossLongStream) {
  // Capacity 2 over a stream of 1000: every tenth of the stream should hold
  // a tenth of the kept items.
  const int trials = 4000;
  std::vector<double> decile(10, 0.0);
  for (int t = 0; t < trials; ++t) {
    ReservoirBuffer<int> b(2, std::uint64_t(t) + 7);
    for (int i = 0; i < 1000; ++i) b.insert(i);
    for (int v : b.items()) decile[std::size_t(v / 100)] += 1;
  }
  const double p = 0.1, n = 2.0 * trials;
  const double sd = std::sqrt(n * p * (1 - p));
  for (std::size_t d = 0; d < 10; ++d) EXPECT_NEAR(decile[d], n * p, 3 * sd) << "decile " << d;
}

TEST(Reservoir, BatchEdgeCases) {
  ReservoirBuffer<int> empty(4, 1);
  EXPECT_TRUE(empty.batch(0, 3).empty());
  EXPECT_THROW(empty.batch(1, 3), StateError);

  ReservoirBuffer<int> b(4, 1);
  b.insert(5);
  EXPECT_EQ(b.batch(3, 9), (std::vector<int>{5, 5, 5}));
  b.insert(6);
  EXPECT_EQ(b.batch(8, 9), b.batch(8, 9));
}

TEST(Reservoir, BatchDrawsUniformlyWithReplacement) {
  ReservoirBuffer<int> b(4, 2);
  for (int i = 0; i < 4; ++i) b.insert(i);
  const std::size_t n = 40000;
  std::vector<double> count(4, 0.0);
  for (int v : b.batch(n, 11)) count[std::size_t(v)] += 1;
  const double sd = std::sqrt(double(n) * 0.25 * 0.75);
  for (double c : count) EXPECT_NEAR(c, double(n) / 4, 4 * sd);
}

TEST(Reservoir, SameSeedSameStreamIdenticalBuffers) {
  ReservoirBuffer<int> a(5, 42), b(5, 42), c(5, 43);
  for (int i = 0; i < 200; ++i) {
    a.insert(i);
    b.insert(i);
    c.insert(i);
  }
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
}
