#include <gtest/gtest.h>

#include "encoder.hpp"
#include "helpers.hpp"

using namespace stark;
using namespace stark::test;

namespace {

UnitId head(std::size_t l, std::size_t i) { return UnitId{l, UnitKind::head, {}, i}; }
UnitId neuron(std::size_t l, std::size_t i) { return UnitId{l, UnitKind::neuron, {}, i}; }

SparsityMask mask_of(std::vector<UnitId> units) {
  SparsityMask m;
  std::sort(units.begin(), units.end());
  m.removed = std::move(units);
  return m;
}

Tensor layer_input(std::size_t rows, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor({rows, d}, rng);
}

}  // namespace

TEST(AttnHead, SinglePositionIsValueProjection) {
  const ModelParams p = tiny_model(1);
  Graph g;
  const BoundModel m = bind(g, p, GateSet::ones(p));
  const Tensor x = layer_input(1, p.d_model(), 2);
  const std::vector<std::size_t> offsets{0, 1};
  const Tensor out = attn_head(g.constant(x), m.layers[0].heads[0], offsets).value();
  const Tensor ref = matmul(g.constant(x), m.layers[0].heads[0].wv).value();
  EXPECT_LT(max_abs_diff(out, ref), 1e-14);
}

TEST(AttnHead, ZeroValueWeightsGiveZero) {
  ModelParams p = tiny_model(1);
  p.layers[0].heads[0].wv.fill(0.0);
  Graph g;
  const BoundModel m = bind(g, p, GateSet::ones(p));
  const std::vector<std::size_t> offsets{0, 4};
  const Tensor out = attn_head(g.constant(layer_input(4, p.d_model(), 3)), m.layers[0].heads[0], offsets).value();
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(AttnHead, ZeroQueriesGiveUniformAttention) {
  ModelParams p = tiny_model(1);
  p.layers[0].heads[0].wq.fill(0.0);
  Graph g;
  const BoundModel m = bind(g, p, GateSet::ones(p));
  const Tensor x = layer_input(5, p.d_model(), 4);
  const std::vector<std::size_t> offsets{0, 5};
  const Tensor out = attn_head(g.constant(x), m.layers[0].heads[0], offsets).value();
  const Tensor v = matmul(g.constant(x), m.layers[0].heads[0].wv).value();
  for (std::size_t c = 0; c < v.cols(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < 5; ++r) mean += v.at(r, c) / 5.0;
    for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(out.at(r, c), mean, 1e-13);
  }
}

TEST(MhaGated, AllOnesMatchesUngated) {
  const ModelParams p = tiny_model(5);
  Graph g;
  const BoundModel m = bind(g, p, GateSet::ones(p));
  Var x = g.constant(layer_input(6, p.d_model(), 6));
  const std::vector<std::size_t> offsets{0, 2, 6};
  EXPECT_TRUE(mha_gated(x, m.layers[1], offsets, true).value().bit_equal(
      mha_gated(x, m.layers[1], offsets, false).value()));
}

TEST(MhaGated, AllZeroGivesZero) {
  const ModelParams p = tiny_model(5);
  GateSet gates = GateSet::ones(p);
  gates.xi[0].fill(0.0);
  Graph g;
  const BoundModel m = bind(g, p, gates);
  const std::vector<std::size_t> offsets{0, 3};
  const Tensor out = mha_gated(g.constant(layer_input(3, p.d_model(), 7)), m.layers[0], offsets).value();
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(MhaGated, ZeroGateSubtractsThatHead) {
  const ModelParams p = tiny_model(8);
  GateSet gates = GateSet::ones(p);
  gates.xi[0][1] = 0.0;
  Graph g;
  const BoundModel full = bind(g, p, GateSet::ones(p));
  const BoundModel gated = bind(g, p, gates);
  Var x = g.constant(layer_input(4, p.d_model(), 9));
  const std::vector<std::size_t> offsets{0, 4};
  const Tensor all = mha_gated(x, full.layers[0], offsets).value();
  const Tensor without = mha_gated(x, gated.layers[0], offsets).value();
  const auto& h = full.layers[0].heads[1];
  const Tensor contrib = matmul(attn_head(x, h, offsets), h.wo).value();
  Tensor expect = all;
  for (std::size_t i = 0; i < expect.size(); ++i) expect[i] -= contrib[i];
  EXPECT_LT(max_abs_diff(without, expect), 1e-10);
}

TEST(FfnGated, OnesZerosAndSingleDeletion) {
  const ModelParams p = tiny_model(10);
  const Tensor x = layer_input(3, p.d_model(), 11);
  Graph g;
  const auto& lp = p.layers[0];
  Var w1 = g.constant(lp.w1), w2 = g.constant(lp.w2), xv = g.constant(x);
  const Tensor plain = ffn_gated(xv, w1, w2, Var{}).value();
  EXPECT_TRUE(ffn_gated(xv, w1, w2, g.constant(Tensor::filled({lp.ffn_dim()}, 1.0))).value().bit_equal(plain));
  for (double v : ffn_gated(xv, w1, w2, g.constant(Tensor::filled({lp.ffn_dim()}, 0.0))).value().data()) {
    EXPECT_EQ(v, 0.0);
  }
  const std::size_t j = 3;
  Tensor nu = Tensor::filled({lp.ffn_dim()}, 1.0);
  nu[j] = 0.0;
  const Tensor gated = ffn_gated(xv, w1, w2, g.constant(nu)).value();
  const ModelParams c = compact(p, mask_of({neuron(0, j)}));
  const Tensor deleted = ffn_gated(xv, g.constant(c.layers[0].w1), g.constant(c.layers[0].w2), Var{}).value();
  EXPECT_LT(max_abs_diff(gated, deleted), 1e-10);
}

TEST(Encoder, OnesGatesReproducePlainModelBitForBit) {
  const ModelParams p = tiny_model(12);
  Rng rng(13);
  const auto seqs = random_sequences(5, p, rng);
  const Batch b = make_batch(seqs, p);
  Graph g;
  const BoundModel m = bind(g, p, GateSet::ones(p));
  ForwardOptions plain;
  plain.use_gates = false;
  EXPECT_TRUE(encoder_forward(m, b).value().bit_equal(encoder_forward(m, b, plain).value()));
}

TEST(Encoder, IdenticalInputsIdenticalLogits) {
  const ModelParams p = tiny_model(14);
  const TokenSeq s{Vocab::kCls, 5, 6, 7, Vocab::kSep};
  EXPECT_TRUE(encoder_forward(s, p, GateSet::ones(p)).bit_equal(encoder_forward(s, p, GateSet::ones(p))));
}

TEST(Encoder, BatchedEqualsPerSequence) {
  const ModelParams p = tiny_model(15);
  Rng rng(16);
  const auto seqs = random_sequences(9, p, rng);
  const GateSet ones = GateSet::ones(p);
  const Tensor all = predict_logits(p, ones, seqs, 4);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const Tensor one = encoder_forward(seqs[i], p, ones);
    for (std::size_t c = 0; c < p.classes(); ++c) EXPECT_NEAR(all.at(i, c), one[c], 1e-12);
  }
}

TEST(Encoder, BinaryGatesMatchCompactedModel) {
  const ModelParams p = tiny_model(17, 3);
  Rng rng(18);
  // A random structured mask, then 100 random inputs through both forms.
  std::vector<UnitId> removed;
  for (const auto kind : {UnitKind::head, UnitKind::neuron}) {
    for (const UnitId& u : enumerate_units(p, kind)) {
      if (rng.uniform() < 0.4) removed.push_back(u);
    }
  }
  const SparsityMask mask = mask_of(removed);
  const ModelParams c = compact(p, mask);
  const auto seqs = random_sequences(100, p, rng);
  const Tensor masked = predict_logits(p, gates_with_mask(p, mask), seqs);
  const Tensor compacted = predict_logits(c, GateSet::ones(c), seqs);
  EXPECT_LT(max_abs_diff(masked, compacted), 1e-10);
}

TEST(Encoder, LayerWithoutHeadsPassesResidualOnly) {
  const ModelParams p = tiny_model(19, 1);
  std::vector<UnitId> all = enumerate_units(p, UnitKind::head);
  const ModelParams c = compact(p, mask_of(all));
  EXPECT_EQ(c.layers[0].heads.size(), 0u);
  const TokenSeq s{Vocab::kCls, 6, 7};
  GateSet zero = GateSet::ones(p);
  zero.xi[0].fill(0.0);
  EXPECT_LT(max_abs_diff(encoder_forward(s, c, GateSet::ones(c)), encoder_forward(s, p, zero)), 1e-10);
}

TEST(Encoder, OutOfVocabularyTokenRejected) {
  const ModelParams p = tiny_model(20);
  const TokenSeq s{Vocab::kCls, static_cast<std::uint32_t>(p.vocab())};
  EXPECT_THROW(encoder_forward(s, p, GateSet::ones(p)), Error);
}

TEST(DropLayers, KeepAllEqualsTeacher) {
  const ModelParams p = tiny_model(21, 3);
  const ModelParams s = drop_layers(p, 3);
  std::vector<std::pair<std::string, Tensor>> a, b;
  p.for_each_tensor([&](const std::string& n, const Tensor& t) { a.emplace_back(n, t); });
  s.for_each_tensor([&](const std::string& n, const Tensor& t) { b.emplace_back(n, t); });
  EXPECT_EQ(a, b);
}

TEST(DropLayers, SixToTwoKeepsLayersTwoAndFive) {
  // ceil(j * L / k) - 1 for j = 1..k
  const std::size_t L = 6, k = 2;
  std::vector<std::size_t> oracle;
  for (std::size_t j = 1; j <= k; ++j) oracle.push_back(static_cast<std::size_t>(std::ceil(double(j * L) / k)) - 1);
  EXPECT_EQ(kept_layer_indices(L, k), oracle);
  EXPECT_EQ(kept_layer_indices(L, k), (std::vector<std::size_t>{2, 5}));
  const ModelParams p = tiny_model(22, 6);
  const ModelParams s = drop_layers(p, 2);
  ASSERT_EQ(s.layer_count(), 2u);
  EXPECT_EQ(s.layers[0].w1, p.layers[2].w1);
  EXPECT_EQ(s.layers[1].w1, p.layers[5].w1);
}

TEST(DropLayers, ZeroOrTooManyRejected) {
  EXPECT_TRUE(throws_code(ErrorCode::parameter, [] { kept_layer_indices(6, 0); }));
  EXPECT_TRUE(throws_code(ErrorCode::parameter, [] { kept_layer_indices(6, 7); }));
}

TEST(Compact, EmptyMaskLeavesParamsUnchanged) {
  const ModelParams p = tiny_model(23);
  const ModelParams c = compact(p, SparsityMask{});
  std::vector<std::pair<std::string, Tensor>> a, b;
  p.for_each_tensor([&](const std::string& n, const Tensor& t) { a.emplace_back(n, t); });
  c.for_each_tensor([&](const std::string& n, const Tensor& t) { b.emplace_back(n, t); });
  EXPECT_EQ(a, b);
}

TEST(Compact, OneHeadRemovedDecrementsThatLayer) {
  const ModelParams p = tiny_model(24);
  const ModelParams c = compact(p, mask_of({head(1, 0)}));
  EXPECT_EQ(c.layers[0].heads.size(), p.layers[0].heads.size());
  EXPECT_EQ(c.layers[1].heads.size(), p.layers[1].heads.size() - 1);
  EXPECT_EQ(c.layers[1].heads[0].wq, p.layers[1].heads[1].wq);
}

TEST(Compact, MissingUnitIsMaskError) {
  const ModelParams p = tiny_model(25);
  EXPECT_TRUE(throws_code(ErrorCode::mask, [&] { compact(p, mask_of({head(0, 9)})); }));
  EXPECT_TRUE(throws_code(ErrorCode::mask, [&] { compact(p, mask_of({neuron(5, 0)})); }));
}

TEST(Gates, MaskRoundTrip) {
  const ModelParams p = tiny_model(26);
  const SparsityMask m = mask_of({head(0, 1), neuron(1, 3), neuron(0, 0)});
  const GateSet g = gates_with_mask(p, m);
  EXPECT_TRUE(g.binary());
  EXPECT_FALSE(g.all_ones());
  EXPECT_EQ(mask_from_gates(g).removed, m.removed);
}

TEST(Unstructured, ZeroesNamedParameters) {
  const ModelParams p = tiny_model(27);
  SparsityMask m;
  m.kind = MaskKind::unstructured;
  m.removed = {UnitId{0, UnitKind::parameter, "head.1.wk", 3}, UnitId{1, UnitKind::parameter, "w2", 0}};
  const ModelParams z = apply_unstructured(p, m);
  EXPECT_EQ(z.layers[0].heads[1].wk[3], 0.0);
  EXPECT_EQ(z.layers[1].w2[0], 0.0);
  EXPECT_EQ(z.layers[0].heads[1].wk[2], p.layers[0].heads[1].wk[2]);
  m.removed = {UnitId{0, UnitKind::parameter, "w9", 0}};
  EXPECT_TRUE(throws_code(ErrorCode::mask, [&] { apply_unstructured(p, m); }));
}

TEST(Units, EnumerationCounts) {
  const ModelParams p = tiny_model(28, 3);
  EXPECT_EQ(enumerate_units(p, UnitKind::head).size(), p.head_count());
  EXPECT_EQ(enumerate_units(p, UnitKind::neuron).size(), p.neuron_count());
  EXPECT_EQ(p.head_count(), 6u);
  std::size_t params = 0;
  for (std::size_t l = 0; l < p.layer_count(); ++l) {
    p.for_each_prunable(l, [&](const std::string&, const Tensor& t) { params += t.size(); });
  }
  EXPECT_EQ(enumerate_units(p, UnitKind::parameter).size(), params);
}

TEST(Model, InitIsDeterministicAndValid) {
  const ModelParams a = tiny_model(29), b = tiny_model(29);
  EXPECT_EQ(a.tok_emb, b.tok_emb);
  EXPECT_NO_THROW(validate(a));
  ModelParams broken = a;
  broken.layers[0].w2 = Tensor({3, 3});
  EXPECT_THROW(validate(broken), Error);
}
