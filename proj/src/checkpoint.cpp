#include "checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "error.hpp"
#include "rng.hpp"

namespace stark {

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

Checkpoint make_checkpoint(const ModelParams& params, const GateSet* gates, std::uint64_t rng_state,
                           std::uint64_t config_digest) {
  Checkpoint c;
  params.for_each_tensor([&](const std::string& name, const Tensor& t) { c.tensors.emplace_back(name, t); });
  if (gates != nullptr) {
    if (!gates->matches(params)) fail(ErrorCode::contract, "checkpoint gates do not match the model");
    for (std::size_t l = 0; l < gates->xi.size(); ++l) {
      c.tensors.emplace_back("layer." + std::to_string(l) + ".xi", gates->xi[l]);
      c.tensors.emplace_back("layer." + std::to_string(l) + ".nu", gates->nu[l]);
    }
  }
  c.rng_state = rng_state;
  c.config_digest = config_digest;
  return c;
}

namespace {

constexpr char kMagic[4] = {'S', 'T', 'R', 'K'};
constexpr const char* kRngRecord = "__rng_state";
constexpr const char* kDigestRecord = "__config_digest";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_record_header(std::string& out, const std::string& name, std::uint8_t dtype, const Shape& shape) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  out.push_back(static_cast<char>(dtype));
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) put_u64(out, d);
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}

  bool done() const { return pos_ == b_.size(); }

  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) fail(ErrorCode::io, "checkpoint is truncated");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(b_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_++])) << (8 * i);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("__", 0) == 0) fail(ErrorCode::contract, "tensor names may not start with '__'");
    put_record_header(out, name, 0, t.shape());
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_u64(out, bits);
    }
  }
  put_record_header(out, kRngRecord, 1, {1});
  put_u64(out, ckpt.rng_state);
  put_record_header(out, kDigestRecord, 1, {1});
  put_u64(out, ckpt.config_digest);
  return out;
}

Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorCode::io, "not a checkpoint (bad magic)");
  }
  Reader r(bytes);
  r.str(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorCode::io, "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  bool have_rng = false, have_digest = false;
  while (!r.done()) {
    const std::string name = r.str(r.u32());
    const std::uint8_t dtype = r.u8();
    const std::uint32_t rank = r.u32();
    if (rank > 8) fail(ErrorCode::io, "checkpoint record '" + name + "' has implausible rank");
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = r.u64();
      count *= d;
    }
    r.need(count * 8);
    if (dtype == 1) {
      if (count != 1) fail(ErrorCode::io, "integer record '" + name + "' must hold one value");
      const std::uint64_t v = r.u64();
      if (name == kRngRecord) {
        c.rng_state = v;
        have_rng = true;
      } else if (name == kDigestRecord) {
        c.config_digest = v;
        have_digest = true;
      } else {
        fail(ErrorCode::io, "unknown integer record '" + name + "'");
      }
    } else if (dtype == 0) {
      std::vector<double> data(count);
      for (double& v : data) {
        const std::uint64_t bits = r.u64();
        std::memcpy(&v, &bits, 8);
      }
      c.tensors.emplace_back(name, Tensor(std::move(shape), std::move(data)));
    } else {
      fail(ErrorCode::io, "unknown dtype tag in record '" + name + "'");
    }
  }
  if (!have_rng || !have_digest) fail(ErrorCode::io, "checkpoint lacks rng state or config digest");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot write checkpoint '" + path + "'");
  const std::string bytes = serialize(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io, "failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::input, "cannot read checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

std::uint64_t checkpoint_hash(const Checkpoint& ckpt) { return fnv1a(serialize(ckpt)); }

namespace {

const Tensor& need_tensor(const Checkpoint& c, const std::string& name) {
  const Tensor* t = c.find(name);
  if (t == nullptr) fail(ErrorCode::io, "checkpoint lacks tensor '" + name + "'");
  return *t;
}

}  // namespace

ModelParams params_from_checkpoint(const Checkpoint& c) {
  ModelParams p;
  p.tok_emb = need_tensor(c, "tok_emb");
  p.pos_emb = need_tensor(c, "pos_emb");
  p.cls_w = need_tensor(c, "cls.w");
  p.cls_b = need_tensor(c, "cls.b");
  std::size_t layers = 0;
  while (c.find("layer." + std::to_string(layers) + ".w1") != nullptr) ++layers;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string pre = "layer." + std::to_string(l) + ".";
    LayerParams lp;
    for (std::size_t h = 0; c.find(pre + "head." + std::to_string(h) + ".wq") != nullptr; ++h) {
      const std::string hp = pre + "head." + std::to_string(h) + ".";
      lp.heads.push_back({need_tensor(c, hp + "wq"), need_tensor(c, hp + "wk"), need_tensor(c, hp + "wv"),
                          need_tensor(c, hp + "wo")});
    }
    lp.w1 = need_tensor(c, pre + "w1");
    lp.w2 = need_tensor(c, pre + "w2");
    lp.ln1_gain = need_tensor(c, pre + "ln1.gain");
    lp.ln1_bias = need_tensor(c, pre + "ln1.bias");
    lp.ln2_gain = need_tensor(c, pre + "ln2.gain");
    lp.ln2_bias = need_tensor(c, pre + "ln2.bias");
    p.layers.push_back(std::move(lp));
  }
  try {
    validate(p);
  } catch (const Error& e) {
    fail(ErrorCode::io, std::string("checkpoint holds an inconsistent model: ") + e.what());
  }
  return p;
}

std::optional<GateSet> gates_from_checkpoint(const Checkpoint& c, const ModelParams& params) {
  if (c.find("layer.0.xi") == nullptr) return std::nullopt;
  GateSet g;
  for (std::size_t l = 0; l < params.layer_count(); ++l) {
    g.xi.push_back(need_tensor(c, "layer." + std::to_string(l) + ".xi"));
    g.nu.push_back(need_tensor(c, "layer." + std::to_string(l) + ".nu"));
  }
  if (!g.matches(params)) fail(ErrorCode::io, "checkpoint gates do not match its model");
  return g;
}

}  // namespace stark
