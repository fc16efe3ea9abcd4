#pragma once

// Key-value-age memory of complete shapes. Keys are unit feature vectors, values
// complete clouds, ages count updates since a slot was last matched or written.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pointpc/errors.hpp"
#include "pointpc/geometry.hpp"
#include "pointpc/io.hpp"

namespace pointpc::memory {

struct MemorySlot {
  std::vector<double> key;
  PointCloud value;
  std::uint32_t age = 0;

  bool operator==(const MemorySlot&) const = default;
};

enum class MatchKind { positive, negative };

struct UpdateOutcome {
  MatchKind kind;
  std::size_t slot;  // n0 for a positive match, n1 for a negative one

  bool operator==(const UpdateOutcome&) const = default;
};

struct QueryResult {
  std::vector<std::size_t> slots;
  std::vector<double> similarities;
  std::vector<PointCloud> priors;
};

inline std::vector<double> unit(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double n = std::sqrt(sq);
  if (!(n > 0.0)) throw DomainError("memory: zero feature vector");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

class MemoryBank {
 public:
  MemoryBank(std::size_t capacity, double delta, std::size_t top_k)
      : capacity_(capacity), delta_(delta), top_k_(top_k) {
    require(capacity >= 1, "MemoryBank: capacity must be positive");
    require(delta > 0.0, "MemoryBank: delta must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return slots_.size(); }
  bool empty() const { return slots_.empty(); }
  double delta() const { return delta_; }
  std::size_t top_k() const { return top_k_; }
  const std::vector<MemorySlot>& slots() const { return slots_; }
  const MemorySlot& slot(std::size_t i) const { return slots_.at(i); }

  /// Replaces the content with one slot per (cloud, feature) pair; the earliest
  /// pair is the oldest.
  void seed(std::span<const PointCloud> clouds, std::span<const std::vector<double>> features) {
    require(clouds.size() == features.size(), "MemoryBank::seed: clouds and features differ in count");
    require(clouds.size() <= capacity_, "MemoryBank::seed: " + std::to_string(clouds.size()) +
                                            " pairs exceed capacity " + std::to_string(capacity_));
    slots_.clear();
    for (std::size_t i = 0; i < clouds.size(); ++i) {
      require(!clouds[i].empty(), "MemoryBank::seed: empty value cloud");
      slots_.push_back({unit(features[i]), clouds[i], static_cast<std::uint32_t>(clouds.size() - 1 - i)});
    }
  }

  /// The k most similar slots by cosine similarity of keys, descending; ties go to
  /// the lower slot index.
  QueryResult query(std::span<const double> feature, std::size_t k) const {
    if (slots_.empty()) throw StateError("MemoryBank::query: bank is empty");
    require(k >= 1 && k <= slots_.size(), "MemoryBank::query: k=" + std::to_string(k) + " not in [1, " +
                                              std::to_string(slots_.size()) + "]");
    const std::vector<double> sims = similarities(feature);
    std::vector<std::size_t> order(slots_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return sims[a] > sims[b] || (sims[a] == sims[b] && a < b); });
    QueryResult out;
    for (std::size_t r = 0; r < k; ++r) {
      out.slots.push_back(order[r]);
      out.similarities.push_back(sims[order[r]]);
      out.priors.push_back(slots_[order[r]].value);
    }
    return out;
  }

  QueryResult query(std::span<const double> feature) const { return query(feature, top_k_); }

  /// One training-time update with the partial feature and its ground truth.
  UpdateOutcome update(std::span<const double> feature, const PointCloud& truth) {
    if (slots_.empty()) throw StateError("MemoryBank::update: bank is empty");
    require(!truth.empty(), "MemoryBank::update: empty ground truth");
    const std::vector<double> sims = similarities(feature);
    const std::size_t n0 = static_cast<std::size_t>(std::max_element(sims.begin(), sims.end()) - sims.begin());
    UpdateOutcome outcome{MatchKind::positive, n0};
    if (chamfer_l2(truth, slots_[n0].value) < delta_) {
      std::vector<double> merged(feature.begin(), feature.end());
      for (std::size_t i = 0; i < merged.size(); ++i) merged[i] += slots_[n0].key[i];
      slots_[n0].key = unit(merged);
    } else {
      std::size_t n1 = 0;
      for (std::size_t i = 1; i < slots_.size(); ++i) {
        if (slots_[i].age > slots_[n1].age) n1 = i;
      }
      slots_[n1].key = unit(feature);
      slots_[n1].value = truth;
      outcome = {MatchKind::negative, n1};
    }
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      slots_[i].age = i == outcome.slot ? 0 : slots_[i].age + 1;
    }
    return outcome;
  }

  std::vector<double> similarities(std::span<const double> feature) const {
    const std::vector<double> q = unit(feature);
    std::vector<double> sims(slots_.size());
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      require(slots_[i].key.size() == q.size(), "MemoryBank: feature length " + std::to_string(q.size()) +
                                                    " does not match key length " + std::to_string(slots_[i].key.size()));
      sims[i] = cosine_similarity(q, slots_[i].key);
    }
    return sims;
  }

  // Bank file: "PPCM", u16 version, u32 capacity, u32 slot count, then per slot
  // u32 key length + f64 key, u32 point count + f32 xyz, u32 age. Little-endian.
  static constexpr std::uint16_t kVersion = 1;

  std::vector<char> encode() const {
    io::ByteWriter w;
    w.bytes("PPCM");
    w.u16(kVersion);
    w.u32(static_cast<std::uint32_t>(capacity_));
    w.u32(static_cast<std::uint32_t>(slots_.size()));
    for (const auto& s : slots_) {
      w.u32(static_cast<std::uint32_t>(s.key.size()));
      for (double v : s.key) w.f64(v);
      w.u32(static_cast<std::uint32_t>(s.value.size()));
      for (const auto& p : s.value) {
        for (double c : p) w.f32(static_cast<float>(c));
      }
      w.u32(s.age);
    }
    return w.buffer();
  }

  static MemoryBank decode(std::vector<char> bytes, double delta, std::size_t top_k, const std::string& context) {
    io::ByteReader r(std::move(bytes), context);
    r.expect_magic("PPCM");
    const std::uint16_t version = r.u16();
    if (version != kVersion) r.fail("unsupported bank version " + std::to_string(version));
    const std::uint32_t capacity = r.u32();
    const std::uint32_t count = r.u32();
    if (capacity == 0 || count > capacity) r.fail("slot count " + std::to_string(count) + " exceeds capacity");
    MemoryBank bank(capacity, delta, top_k);
    for (std::uint32_t i = 0; i < count; ++i) {
      MemorySlot s;
      s.key.resize(r.u32());
      for (double& v : s.key) v = r.f64();
      const std::uint32_t points = r.u32();
      if (points == 0) r.fail("slot " + std::to_string(i) + " has an empty value cloud");
      if (r.remaining() < std::size_t{points} * 12) r.fail("truncated value cloud in slot " + std::to_string(i));
      s.value.points.resize(points);
      for (auto& p : s.value.points) {
        for (double& c : p) c = r.f32();
      }
      s.age = r.u32();
      bank.slots_.push_back(std::move(s));
    }
    if (!r.at_end()) r.fail("trailing bytes after last slot");
    return bank;
  }

  void save(const std::filesystem::path& path) const { io::write_file(path, encode()); }

  static MemoryBank load(const std::filesystem::path& path, double delta, std::size_t top_k) {
    return decode(io::read_file(path), delta, top_k, path.string());
  }

  bool operator==(const MemoryBank&) const = default;

 private:
  std::size_t capacity_;
  double delta_;
  std::size_t top_k_;
  std::vector<MemorySlot> slots_;
};

}  // namespace pointpc::memory
