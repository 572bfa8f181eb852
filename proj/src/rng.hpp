#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stark {

// SplitMix64 (Steele, Lea, Flood 2014). State advances by the golden-ratio
// increment 0x9E3779B97F4A7C15; output mixing uses the multipliers
// 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB with shifts 30, 27, 31.
// Every derived quantity (uniforms, normals, bounded ints) is computed from
// the raw 64-bit stream with integer arithmetic or IEEE basic operations so
// identical states give identical streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t state() const noexcept { return state_; }
  void set_state(std::uint64_t s) noexcept { state_ = s; }

  std::uint64_t next_u64() noexcept;

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), rejection sampled (no modulo bias). n > 0.
  std::uint64_t below(std::uint64_t n) noexcept;

  // Standard normal via Box-Muller; the second variate is cached.
  double normal() noexcept;

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a(std::span<const unsigned char> bytes,
                    std::uint64_t basis = 0xcbf29ce484222325ULL) noexcept;
std::uint64_t fnv1a(std::string_view text) noexcept;

// Named sub-seed: mixes the root seed with the FNV-1a hash of the name.
std::uint64_t derive_seed(std::uint64_t root, std::string_view name) noexcept;

// Records every named sub-seed handed out so a run can be replayed stage by stage.
class SeedLedger {
 public:
  explicit SeedLedger(std::uint64_t root = 0) : root_(root) {}

  std::uint64_t root() const noexcept { return root_; }
  std::uint64_t seed(const std::string& name);
  const std::map<std::string, std::uint64_t>& entries() const noexcept { return entries_; }

 private:
  std::uint64_t root_;
  std::map<std::string, std::uint64_t> entries_;
};

}  // namespace stark
