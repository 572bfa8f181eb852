#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include <gtest/gtest.h>

#include "encoder.hpp"
#include "error.hpp"
#include "rng.hpp"
#include "tasks.hpp"

namespace stark::test {

// Runs f and reports whether it threw a stark::Error with the given code.
inline ::testing::AssertionResult throws_code(ErrorCode code, const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    if (e.code() == code) return ::testing::AssertionSuccess();
    return ::testing::AssertionFailure() << "wrong error code: " << e.what();
  }
  return ::testing::AssertionFailure() << "no error thrown";
}

inline ModelDims tiny_dims(std::size_t layers = 2, std::size_t d = 8) {
  ModelDims dims;
  dims.vocab = 16;
  dims.max_len = 12;
  dims.d_model = d;
  dims.heads = 2;
  dims.head_dim = d / 2;
  dims.ffn_dim = 2 * d;
  dims.layers = layers;
  dims.classes = 2;
  return dims;
}

inline ModelParams tiny_model(std::uint64_t seed = 1, std::size_t layers = 2, std::size_t d = 8) {
  Rng rng(seed);
  return init_model(tiny_dims(layers, d), rng);
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

// Random [CLS]-prefixed sequences over the model's vocabulary.
inline std::vector<TokenSeq> random_sequences(std::size_t n, const ModelParams& p, Rng& rng,
                                              std::size_t min_len = 2) {
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = min_len + rng.below(p.max_len() - min_len + 1);
    TokenSeq s{Vocab::kCls};
    while (s.size() < len) s.push_back(static_cast<std::uint32_t>(Vocab::kReserved + rng.below(p.vocab() - Vocab::kReserved)));
    out.push_back(std::move(s));
  }
  return out;
}

inline Dataset random_dataset(std::size_t n, const ModelParams& p, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.task.classes = p.classes();
  d.task.max_len = p.max_len();
  for (auto& s : random_sequences(n, p, rng)) {
    d.examples.push_back({s, static_cast<int>(rng.below(p.classes()))});
  }
  return d;
}

}  // namespace stark::test
