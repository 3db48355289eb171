#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "fusion/error.hpp"
#include "fusion/image.hpp"
#include "fusion/random.hpp"

namespace fusion {

inline constexpr std::size_t kDefaultReservoirCapacity = 500;

/// Fixed-capacity uniform sample over a stream (Algorithm R).
template <class T>
class ReservoirBuffer {
 public:
  explicit ReservoirBuffer(std::size_t capacity = kDefaultReservoirCapacity, std::uint64_t seed = 0)
      : capacity_(capacity), rng_(make_rng(seed, {0x5253u})) {
    if (capacity == 0) throw ConfigError("reservoir capacity must be positive");
  }

  void insert(T item) {
    if (seen_ < capacity_) {
      insert_with_draw(std::move(item), seen_);
      return;
    }
    insert_with_draw(std::move(item), uniform_index(rng_, std::size_t(seen_ + 1)));
  }

  /// Insert with an explicit draw j in [0, seen]: during the fill phase the
  /// item is appended, afterwards it replaces slot j when j < capacity.
  void insert_with_draw(T item, std::uint64_t draw) {
    const std::uint64_t stream_pos = seen_++;
    if (items_.size() < capacity_) {
      items_.push_back(std::move(item));
      origin_.push_back(stream_pos);
    } else if (draw < capacity_) {
      items_[draw] = std::move(item);
      origin_[draw] = stream_pos;
    }
  }

  /// n draws with replacement, deterministic given seed.
  std::vector<T> batch(std::size_t n, std::uint64_t seed) const {
    if (n == 0) return {};
    if (items_.empty()) throw StateError("sampling from an empty reservoir");
    Rng rng = make_rng(seed, {0x4254u});
    std::vector<T> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(items_[uniform_index(rng, items_.size())]);
    return out;
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::uint64_t seen() const { return seen_; }
  const std::vector<T>& items() const { return items_; }
  /// Stream position of the item in each slot.
  const std::vector<std::uint64_t>& origins() const { return origin_; }

  bool operator==(const ReservoirBuffer& o) const
    requires std::equality_comparable<T>
  {
    return capacity_ == o.capacity_ && seen_ == o.seen_ && items_ == o.items_ && origin_ == o.origin_ && rng_ == o.rng_;
  }

 private:
  std::size_t capacity_;
  std::uint64_t seen_ = 0;
  std::vector<T> items_;
  std::vector<std::uint64_t> origin_;
  Rng rng_;
};

/// slot,stream_index,label
inline void write_reservoir_csv(const ReservoirBuffer<LabeledExample>& b, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "slot,stream_index,label\n";
  for (std::size_t i = 0; i < b.size(); ++i) out << i << ',' << b.origins()[i] << ',' << b.items()[i].y << '\n';
}

}  // namespace fusion
