#include "encoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "error.hpp"

namespace stark {

std::size_t ModelParams::head_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.heads.size();
  return n;
}

std::size_t ModelParams::neuron_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.ffn_dim();
  return n;
}

Tensor* ModelParams::find_prunable(std::size_t layer, const std::string& name) {
  if (layer >= layers.size()) return nullptr;
  LayerParams& lp = layers[layer];
  if (name == "w1") return &lp.w1;
  if (name == "w2") return &lp.w2;
  if (name.rfind("head.", 0) != 0) return nullptr;
  const std::size_t dot = name.find('.', 5);
  if (dot == std::string::npos) return nullptr;
  std::size_t h = 0;
  try {
    h = std::stoul(name.substr(5, dot - 5));
  } catch (const std::exception&) {
    return nullptr;
  }
  if (h >= lp.heads.size()) return nullptr;
  const std::string w = name.substr(dot + 1);
  if (w == "wq") return &lp.heads[h].wq;
  if (w == "wk") return &lp.heads[h].wk;
  if (w == "wv") return &lp.heads[h].wv;
  if (w == "wo") return &lp.heads[h].wo;
  return nullptr;
}

// ---- gates ------------------------------------------------------------------

GateSet GateSet::ones(const ModelParams& params) {
  GateSet g;
  for (const auto& l : params.layers) {
    g.xi.push_back(Tensor::filled({l.heads.size()}, 1.0));
    g.nu.push_back(Tensor::filled({l.ffn_dim()}, 1.0));
  }
  return g;
}

bool GateSet::all_ones() const {
  auto ones = [](const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return v == 1.0; });
  };
  return std::all_of(xi.begin(), xi.end(), ones) && std::all_of(nu.begin(), nu.end(), ones);
}

bool GateSet::binary() const {
  auto bin = [](const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(),
                       [](double v) { return v == 0.0 || v == 1.0; });
  };
  return std::all_of(xi.begin(), xi.end(), bin) && std::all_of(nu.begin(), nu.end(), bin);
}

bool GateSet::matches(const ModelParams& params) const {
  if (xi.size() != params.layers.size() || nu.size() != params.layers.size()) return false;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    if (xi[l].size() != params.layers[l].heads.size()) return false;
    if (nu[l].size() != params.layers[l].ffn_dim()) return false;
  }
  return true;
}

// ---- init / validation ------------------------------------------------------

namespace {

Tensor randn(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

}  // namespace

ModelParams init_model(const ModelDims& dims, Rng& rng) {
  if (dims.vocab == 0 || dims.max_len == 0 || dims.d_model == 0 || dims.head_dim == 0 ||
      dims.classes < 2) {
    fail(ErrorCode::parameter, "model dimensions must be positive (classes >= 2)");
  }
  const std::size_t d = dims.d_model;
  const double in_d = 1.0 / std::sqrt(static_cast<double>(d));
  ModelParams p;
  p.tok_emb = randn({dims.vocab, d}, 1.0, rng);
  p.pos_emb = randn({dims.max_len, d}, 1.0, rng);
  const double in_o = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(1, dims.heads * dims.head_dim)));
  const double in_ffn = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(1, dims.ffn_dim)));
  for (std::size_t l = 0; l < dims.layers; ++l) {
    LayerParams lp;
    for (std::size_t h = 0; h < dims.heads; ++h) {
      HeadParams hp;
      hp.wq = randn({d, dims.head_dim}, in_d, rng);
      hp.wk = randn({d, dims.head_dim}, in_d, rng);
      hp.wv = randn({d, dims.head_dim}, in_d, rng);
      hp.wo = randn({dims.head_dim, d}, in_o, rng);
      lp.heads.push_back(std::move(hp));
    }
    lp.w1 = randn({d, dims.ffn_dim}, in_d, rng);
    lp.w2 = randn({dims.ffn_dim, d}, in_ffn, rng);
    lp.ln1_gain = Tensor::filled({d}, 1.0);
    lp.ln1_bias = Tensor({d});
    lp.ln2_gain = Tensor::filled({d}, 1.0);
    lp.ln2_bias = Tensor({d});
    p.layers.push_back(std::move(lp));
  }
  p.cls_w = randn({d, dims.classes}, in_d, rng);
  p.cls_b = Tensor({dims.classes});
  return p;
}

void validate(const ModelParams& p) {
  const std::size_t d = p.d_model();
  auto expect = [](const Tensor& t, Shape s, const std::string& what) {
    if (t.shape() != s) fail(ErrorCode::dimension, "inconsistent shape for " + what);
  };
  if (p.tok_emb.rank() != 2 || d == 0) fail(ErrorCode::dimension, "token embedding must be a matrix");
  expect(p.pos_emb, {p.pos_emb.rows(), d}, "pos_emb");
  if (p.cls_w.rank() != 2 || p.cls_w.shape()[0] != d) fail(ErrorCode::dimension, "inconsistent shape for cls.w");
  expect(p.cls_b, {p.cls_w.shape()[1]}, "cls.b");
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const LayerParams& lp = p.layers[l];
    const std::string tag = "layer " + std::to_string(l);
    std::size_t da = 0;
    for (const auto& h : lp.heads) {
      if (h.wq.rank() != 2) fail(ErrorCode::dimension, tag + ": head weights must be matrices");
      if (da == 0) da = h.wq.cols();
      expect(h.wq, {d, da}, tag + " wq");
      expect(h.wk, {d, da}, tag + " wk");
      expect(h.wv, {d, da}, tag + " wv");
      expect(h.wo, {da, d}, tag + " wo");
    }
    if (lp.w1.rank() != 2 || lp.w1.shape()[0] != d) fail(ErrorCode::dimension, tag + ": inconsistent w1");
    expect(lp.w2, {lp.w1.cols(), d}, tag + " w2");
    expect(lp.ln1_gain, {d}, tag + " ln1.gain");
    expect(lp.ln1_bias, {d}, tag + " ln1.bias");
    expect(lp.ln2_gain, {d}, tag + " ln2.gain");
    expect(lp.ln2_bias, {d}, tag + " ln2.bias");
  }
}

// ---- batching / binding -----------------------------------------------------

Batch make_batch(std::span<const TokenSeq* const> seqs, const ModelParams& params) {
  Batch b;
  const std::size_t vocab = params.vocab();
  const std::size_t max_len = params.max_len();
  for (const TokenSeq* s : seqs) {
    if (s->empty()) fail(ErrorCode::input, "empty token sequence");
    if (s->size() > max_len) {
      fail(ErrorCode::input, "sequence length " + std::to_string(s->size()) +
                                 " exceeds maximum " + std::to_string(max_len));
    }
    b.first_rows.push_back(b.ids.size());
    for (std::size_t i = 0; i < s->size(); ++i) {
      const std::uint32_t id = (*s)[i];
      if (id >= vocab) fail(ErrorCode::input, "token id " + std::to_string(id) + " outside vocabulary");
      b.ids.push_back(id);
      b.positions.push_back(i);
    }
    b.offsets.push_back(b.ids.size());
  }
  return b;
}

Batch make_batch(std::span<const TokenSeq> seqs, const ModelParams& params) {
  std::vector<const TokenSeq*> ptrs;
  ptrs.reserve(seqs.size());
  for (const auto& s : seqs) ptrs.push_back(&s);
  return make_batch(std::span<const TokenSeq* const>(ptrs), params);
}

BoundModel bind(Graph& g, const ModelParams& params, const GateSet& gates, BindOptions opts) {
  if (!gates.matches(params)) fail(ErrorCode::contract, "gate set does not match model layout");
  BoundModel m;
  m.d_model = params.d_model();
  auto leaf = [&](const Tensor& t) {
    Var v = opts.params_grad ? g.variable(t) : g.constant(t);
    m.param_leaves.push_back(v);
    return v;
  };
  // Same order as ModelParams::for_each_tensor.
  m.tok_emb = leaf(params.tok_emb);
  m.pos_emb = leaf(params.pos_emb);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const LayerParams& lp = params.layers[l];
    BoundLayer bl;
    for (const auto& h : lp.heads) {
      BoundHead bh;
      bh.wq = leaf(h.wq);
      bh.wk = leaf(h.wk);
      bh.wv = leaf(h.wv);
      bh.wo = leaf(h.wo);
      bl.heads.push_back(bh);
    }
    bl.w1 = leaf(lp.w1);
    bl.w2 = leaf(lp.w2);
    bl.ln1_gain = leaf(lp.ln1_gain);
    bl.ln1_bias = leaf(lp.ln1_bias);
    bl.ln2_gain = leaf(lp.ln2_gain);
    bl.ln2_bias = leaf(lp.ln2_bias);
    bl.xi = opts.gates_grad ? g.variable(gates.xi[l]) : g.constant(gates.xi[l]);
    bl.nu = opts.gates_grad ? g.variable(gates.nu[l]) : g.constant(gates.nu[l]);
    m.layers.push_back(std::move(bl));
  }
  m.cls_w = leaf(params.cls_w);
  m.cls_b = leaf(params.cls_b);
  return m;
}

// ---- forward ----------------------------------------------------------------

Var attn_head(Var x, const BoundHead& head, std::span<const std::size_t> offsets) {
  return attention(matmul(x, head.wq), matmul(x, head.wk), matmul(x, head.wv), offsets);
}

Var mha_gated(Var x, const BoundLayer& layer, std::span<const std::size_t> offsets,
              bool use_gates) {
  Graph& g = x.graph();
  if (layer.heads.empty()) return g.constant(Tensor(x.shape()));
  Var total;
  for (std::size_t i = 0; i < layer.heads.size(); ++i) {
    const BoundHead& h = layer.heads[i];
    Var o = matmul(attn_head(x, h, offsets), h.wo);
    if (use_gates) o = gate_scale(o, layer.xi, i);
    total = total.valid() ? add(total, o) : o;
  }
  return total;
}

Var ffn_gated(Var x, Var w1, Var w2, Var nu) {
  if (w1.value().cols() == 0) return x.graph().constant(Tensor(x.shape()));
  Var hidden = gelu(matmul(x, w1));
  if (nu.valid()) hidden = mul_cols(hidden, nu);
  return matmul(hidden, w2);
}

Var encoder_forward(const BoundModel& m, const Batch& batch, const ForwardOptions& opts) {
  Var x = add(gather_rows(m.tok_emb, batch.ids), gather_rows(m.pos_emb, batch.positions));
  for (const BoundLayer& layer : m.layers) {
    Var attn = dropout(mha_gated(x, layer, batch.offsets, opts.use_gates), opts.dropout, opts.rng);
    x = layer_norm(add(x, attn), layer.ln1_gain, layer.ln1_bias);
    Var ffn = dropout(ffn_gated(x, layer.w1, layer.w2, opts.use_gates ? layer.nu : Var{}),
                      opts.dropout, opts.rng);
    x = layer_norm(add(x, ffn), layer.ln2_gain, layer.ln2_bias);
  }
  Var pooled = gather_rows(x, batch.first_rows);
  return add_row(matmul(pooled, m.cls_w), m.cls_b);
}

Tensor encoder_forward(const TokenSeq& tokens, const ModelParams& params, const GateSet& gates) {
  Graph g(false);
  BoundModel m = bind(g, params, gates);
  const TokenSeq* one = &tokens;
  Batch b = make_batch(std::span<const TokenSeq* const>(&one, 1), params);
  Tensor out = encoder_forward(m, b).value();
  return Tensor({params.classes()}, std::move(out.storage()));
}

Tensor predict_logits(const ModelParams& params, const GateSet& gates,
                      std::span<const TokenSeq> seqs, std::size_t chunk) {
  const std::size_t k = params.classes();
  Tensor out({seqs.size(), k});
  chunk = std::max<std::size_t>(1, chunk);
  for (std::size_t start = 0; start < seqs.size(); start += chunk) {
    const std::size_t n = std::min(chunk, seqs.size() - start);
    Graph g(false);
    BoundModel m = bind(g, params, gates);
    Batch b = make_batch(seqs.subspan(start, n), params);
    const Tensor& z = encoder_forward(m, b).value();
    std::copy(z.data().begin(), z.data().end(), out.data().begin() + start * k);
  }
  return out;
}

// ---- structural edits ---------------------------------------------------------

std::vector<std::size_t> kept_layer_indices(std::size_t layers, std::size_t k) {
  if (k == 0 || k > layers) {
    fail(ErrorCode::parameter, "drop-layers: kept layer count must lie in [1, " + std::to_string(layers) + "]");
  }
  std::vector<std::size_t> keep;
  for (std::size_t j = 1; j <= k; ++j) keep.push_back((j * layers + k - 1) / k - 1);
  return keep;
}

ModelParams drop_layers(const ModelParams& teacher, std::size_t k) {
  ModelParams s;
  s.tok_emb = teacher.tok_emb;
  s.pos_emb = teacher.pos_emb;
  s.cls_w = teacher.cls_w;
  s.cls_b = teacher.cls_b;
  for (std::size_t idx : kept_layer_indices(teacher.layer_count(), k)) {
    s.layers.push_back(teacher.layers[idx]);
  }
  return s;
}

namespace {

void check_structured_unit(const ModelParams& params, const UnitId& u) {
  if (u.layer >= params.layer_count()) {
    fail(ErrorCode::mask, "mask references missing layer " + std::to_string(u.layer));
  }
  const LayerParams& lp = params.layers[u.layer];
  if (u.kind == UnitKind::head && u.index >= lp.heads.size()) {
    fail(ErrorCode::mask, "mask references missing unit " + to_string(u));
  }
  if (u.kind == UnitKind::neuron && u.index >= lp.ffn_dim()) {
    fail(ErrorCode::mask, "mask references missing unit " + to_string(u));
  }
  if (u.kind == UnitKind::parameter) {
    fail(ErrorCode::mask, "structured operation given parameter unit " + to_string(u));
  }
}

}  // namespace

ModelParams compact(const ModelParams& params, const SparsityMask& mask) {
  for (const UnitId& u : mask.removed) check_structured_unit(params, u);
  ModelParams out;
  out.tok_emb = params.tok_emb;
  out.pos_emb = params.pos_emb;
  out.cls_w = params.cls_w;
  out.cls_b = params.cls_b;
  const std::size_t d = params.d_model();
  for (std::size_t l = 0; l < params.layer_count(); ++l) {
    const LayerParams& lp = params.layers[l];
    LayerParams nl;
    nl.ln1_gain = lp.ln1_gain;
    nl.ln1_bias = lp.ln1_bias;
    nl.ln2_gain = lp.ln2_gain;
    nl.ln2_bias = lp.ln2_bias;
    for (std::size_t h = 0; h < lp.heads.size(); ++h) {
      if (!mask.contains(UnitId{l, UnitKind::head, {}, h})) nl.heads.push_back(lp.heads[h]);
    }
    std::vector<std::size_t> keep;
    for (std::size_t j = 0; j < lp.ffn_dim(); ++j) {
      if (!mask.contains(UnitId{l, UnitKind::neuron, {}, j})) keep.push_back(j);
    }
    nl.w1 = Tensor({d, keep.size()});
    nl.w2 = Tensor({keep.size(), d});
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < keep.size(); ++c) nl.w1.at(r, c) = lp.w1.at(r, keep[c]);
    for (std::size_t c = 0; c < keep.size(); ++c)
      for (std::size_t r = 0; r < d; ++r) nl.w2.at(c, r) = lp.w2.at(keep[c], r);
    out.layers.push_back(std::move(nl));
  }
  return out;
}

GateSet gates_with_mask(const ModelParams& params, const SparsityMask& mask) {
  GateSet g = GateSet::ones(params);
  for (const UnitId& u : mask.removed) {
    check_structured_unit(params, u);
    if (u.kind == UnitKind::head) g.xi[u.layer][u.index] = 0.0;
    else g.nu[u.layer][u.index] = 0.0;
  }
  return g;
}

SparsityMask mask_from_gates(const GateSet& gates) {
  if (!gates.binary()) fail(ErrorCode::contract, "mask_from_gates: gates are not binary");
  SparsityMask m;
  m.kind = MaskKind::structured;
  for (std::size_t l = 0; l < gates.xi.size(); ++l) {
    for (std::size_t i = 0; i < gates.xi[l].size(); ++i)
      if (gates.xi[l][i] == 0.0) m.removed.push_back(UnitId{l, UnitKind::head, {}, i});
  }
  for (std::size_t l = 0; l < gates.nu.size(); ++l) {
    for (std::size_t i = 0; i < gates.nu[l].size(); ++i)
      if (gates.nu[l][i] == 0.0) m.removed.push_back(UnitId{l, UnitKind::neuron, {}, i});
  }
  std::sort(m.removed.begin(), m.removed.end());
  return m;
}

ModelParams apply_unstructured(const ModelParams& params, const SparsityMask& mask) {
  ModelParams out = params;
  for (const UnitId& u : mask.removed) {
    if (u.kind != UnitKind::parameter) {
      fail(ErrorCode::mask, "unstructured mask holds non-parameter unit " + to_string(u));
    }
    Tensor* t = out.find_prunable(u.layer, u.tensor);
    if (t == nullptr || u.index >= t->size()) {
      fail(ErrorCode::mask, "mask references missing parameter " + to_string(u));
    }
    (*t)[u.index] = 0.0;
  }
  return out;
}

std::vector<UnitId> enumerate_units(const ModelParams& params, UnitKind kind) {
  std::vector<UnitId> units;
  for (std::size_t l = 0; l < params.layer_count(); ++l) {
    const LayerParams& lp = params.layers[l];
    if (kind == UnitKind::head) {
      for (std::size_t h = 0; h < lp.heads.size(); ++h) units.push_back({l, kind, {}, h});
    } else if (kind == UnitKind::neuron) {
      for (std::size_t j = 0; j < lp.ffn_dim(); ++j) units.push_back({l, kind, {}, j});
    } else {
      params.for_each_prunable(l, [&](const std::string& name, const Tensor& t) {
        for (std::size_t i = 0; i < t.size(); ++i) units.push_back({l, kind, name, i});
      });
    }
  }
  std::sort(units.begin(), units.end());
  return units;
}

}  // namespace stark
