#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"
#include "units.hpp"

namespace stark {

struct ModelDims {
  std::size_t vocab = 64;
  std::size_t max_len = 64;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 128;
  std::size_t layers = 6;
  std::size_t classes = 2;
};

struct HeadParams {
  Tensor wq;  // d x d_A
  Tensor wk;  // d x d_A
  Tensor wv;  // d x d_A
  Tensor wo;  // d_A x d
};

struct LayerParams {
  std::vector<HeadParams> heads;
  Tensor w1;  // d x d_I
  Tensor w2;  // d_I x d
  Tensor ln1_gain, ln1_bias;  // around the attention block
  Tensor ln2_gain, ln2_bias;  // around the feed-forward block

  std::size_t ffn_dim() const { return w1.cols(); }
};

// Post-norm transformer encoder classifier. Heads and FFN widths may differ
// per layer after compaction.
struct ModelParams {
  Tensor tok_emb;  // vocab x d
  Tensor pos_emb;  // max_len x d
  std::vector<LayerParams> layers;
  Tensor cls_w;  // d x K
  Tensor cls_b;  // K

  std::size_t vocab() const { return tok_emb.rows(); }
  std::size_t max_len() const { return pos_emb.rows(); }
  std::size_t d_model() const { return tok_emb.cols(); }
  std::size_t classes() const { return cls_b.size(); }
  std::size_t layer_count() const { return layers.size(); }
  std::size_t head_count() const;
  std::size_t neuron_count() const;

  // Visits every tensor with its checkpoint name, in a fixed order.
  template <typename F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }

  // The encoder weight matrices that unstructured pruning may zero, named
  // relative to their layer ("head.1.wv", "w2", ...).
  template <typename F>
  void for_each_prunable(std::size_t layer, F&& f) const {
    const LayerParams& lp = layers[layer];
    for (std::size_t h = 0; h < lp.heads.size(); ++h) {
      const std::string p = "head." + std::to_string(h) + ".";
      f(p + "wq", lp.heads[h].wq);
      f(p + "wk", lp.heads[h].wk);
      f(p + "wv", lp.heads[h].wv);
      f(p + "wo", lp.heads[h].wo);
    }
    f(std::string("w1"), lp.w1);
    f(std::string("w2"), lp.w2);
  }

  Tensor* find_prunable(std::size_t layer, const std::string& name);

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f(std::string("tok_emb"), self.tok_emb);
    f(std::string("pos_emb"), self.pos_emb);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& lp = self.layers[l];
      const std::string p = "layer." + std::to_string(l) + ".";
      for (std::size_t h = 0; h < lp.heads.size(); ++h) {
        const std::string hp = p + "head." + std::to_string(h) + ".";
        f(hp + "wq", lp.heads[h].wq);
        f(hp + "wk", lp.heads[h].wk);
        f(hp + "wv", lp.heads[h].wv);
        f(hp + "wo", lp.heads[h].wo);
      }
      f(p + "w1", lp.w1);
      f(p + "w2", lp.w2);
      f(p + "ln1.gain", lp.ln1_gain);
      f(p + "ln1.bias", lp.ln1_bias);
      f(p + "ln2.gain", lp.ln2_gain);
      f(p + "ln2.bias", lp.ln2_bias);
    }
    f(std::string("cls.w"), self.cls_w);
    f(std::string("cls.b"), self.cls_b);
  }
};

// Sensitivity-recording gates: one scalar per head (xi) and per FFN neuron (nu).
struct GateSet {
  std::vector<Tensor> xi;  // per layer, length = heads in that layer
  std::vector<Tensor> nu;  // per layer, length = ffn width of that layer

  static GateSet ones(const ModelParams& params);
  bool all_ones() const;
  bool binary() const;
  bool matches(const ModelParams& params) const;
};

ModelParams init_model(const ModelDims& dims, Rng& rng);
void validate(const ModelParams& params);

using TokenSeq = std::vector<std::uint32_t>;

// A ragged batch: sequences concatenated row-wise, offsets delimit them.
struct Batch {
  std::vector<std::size_t> ids;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> first_rows;  // row of each sequence's first token

  std::size_t size() const { return first_rows.size(); }
};

Batch make_batch(std::span<const TokenSeq* const> seqs, const ModelParams& params);
Batch make_batch(std::span<const TokenSeq> seqs, const ModelParams& params);

struct BoundHead {
  Var wq, wk, wv, wo;
};

struct BoundLayer {
  std::vector<BoundHead> heads;
  Var w1, w2, ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  Var xi, nu;
};

// Graph leaves for one model. Parameters and gates may independently be
// differentiable.
struct BoundModel {
  Var tok_emb, pos_emb, cls_w, cls_b;
  std::vector<BoundLayer> layers;
  std::size_t d_model = 0;

  // Leaves in ModelParams::for_each_tensor order.
  std::vector<Var> param_leaves;
};

struct BindOptions {
  bool params_grad = false;
  bool gates_grad = false;
};

BoundModel bind(Graph& g, const ModelParams& params, const GateSet& gates, BindOptions opts = {});

struct ForwardOptions {
  double dropout = 0.0;
  Rng* rng = nullptr;
  // false evaluates the plain MHA/FFN formulation, ignoring the gates.
  bool use_gates = true;
};

// Single scaled dot-product attention head over the segments of x.
Var attn_head(Var x, const BoundHead& head, std::span<const std::size_t> offsets);
// sum_i xi[i] * Attn_i(x) Wo_i; a zero tensor when the layer has no heads.
Var mha_gated(Var x, const BoundLayer& layer, std::span<const std::size_t> offsets,
              bool use_gates = true);
// GELU(x W1) diag(nu) W2; GELU(x W1) W2 when nu is not valid.
Var ffn_gated(Var x, Var w1, Var w2, Var nu);

// Batched logits [B x K].
Var encoder_forward(const BoundModel& model, const Batch& batch, const ForwardOptions& opts = {});

// Logits [K] of one sequence.
Tensor encoder_forward(const TokenSeq& tokens, const ModelParams& params, const GateSet& gates);

// Logits [N x K] for many sequences, evaluated in index-ordered chunks.
Tensor predict_logits(const ModelParams& params, const GateSet& gates,
                      std::span<const TokenSeq> seqs, std::size_t chunk = 64);

// Keeps layers ceil(j L / k) - 1 for j = 1..k; embeddings and classifier copied.
ModelParams drop_layers(const ModelParams& teacher, std::size_t k);
std::vector<std::size_t> kept_layer_indices(std::size_t layers, std::size_t k);

// Deletes masked heads (their Wq/Wk/Wv/Wo) and neurons (W1 columns, W2 rows).
ModelParams compact(const ModelParams& params, const SparsityMask& mask);

// Gate assignment realising a structured mask: removed units get 0.
GateSet gates_with_mask(const ModelParams& params, const SparsityMask& mask);
SparsityMask mask_from_gates(const GateSet& gates);

// Zeroes the parameters named by an unstructured mask.
ModelParams apply_unstructured(const ModelParams& params, const SparsityMask& mask);

// Every unit of the given kind, in (layer, tensor, index) order.
std::vector<UnitId> enumerate_units(const ModelParams& params, UnitKind kind);

}  // namespace stark
