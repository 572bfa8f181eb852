#include "rng.hpp"

#include <cmath>
#include <numbers>

#include "error.hpp"

namespace stark {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::dimension: return "dimension";
    case ErrorCode::parameter: return "parameter";
    case ErrorCode::contract: return "contract";
    case ErrorCode::input: return "input";
    case ErrorCode::mask: return "mask";
    case ErrorCode::rewind: return "rewind";
    case ErrorCode::io: return "io";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::unreliable_check: return "unreliable-check";
    case ErrorCode::config: return "config";
    case ErrorCode::stage: return "stage";
  }
  return "unknown";
}

std::uint64_t Rng::next_u64() noexcept {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) noexcept {
  // Reject the incomplete top block of the 64-bit range.
  const std::uint64_t limit = n * (~std::uint64_t{0} / n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t basis) noexcept {
  std::uint64_t h = basis;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view text) noexcept {
  return fnv1a(std::span<const unsigned char>(
      reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view name) noexcept {
  Rng mixer(root ^ fnv1a(name));
  mixer.next_u64();
  return mixer.next_u64();
}

std::uint64_t SeedLedger::seed(const std::string& name) {
  const std::uint64_t s = derive_seed(root_, name);
  entries_[name] = s;
  return s;
}

}  // namespace stark
