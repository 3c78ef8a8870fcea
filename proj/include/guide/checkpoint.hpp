#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "guide/linalg.hpp"

namespace guide {

struct ModelConfig {
  std::size_t model_dim = 0;    // d
  std::size_t num_layers = 0;   // n
  std::size_t num_heads = 0;    // h
  std::size_t head_dim = 0;     // l
  std::size_t ffn_dim = 0;      // f
  std::size_t vocab_size = 0;   // m
  std::size_t context_len = 0;  // L

  // Throws InvalidInput unless every field is positive and d = h * l.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

std::string to_string(const ModelConfig& cfg);

// Per-block parameters. Q/K/V are d x (h*l) with head-major columns: columns
// [i*l, (i+1)*l) belong to head i. Vectors are stored as 1 x n matrices.
template <typename T>
struct BlockParams {
  BasicMatrix<T> norm1;  // 1 x d, scale of the pre-attention RMS norm
  BasicMatrix<T> wq, wk, wv;
  BasicMatrix<T> wo;     // (h*l) x d
  BasicMatrix<T> norm2;  // 1 x d, scale of the pre-MLP RMS norm
  BasicMatrix<T> w1;     // d x f
  BasicMatrix<T> b1;     // 1 x f
  BasicMatrix<T> w2;     // f x d
  BasicMatrix<T> b2;     // 1 x d
};

template <typename T>
struct Weights {
  BasicMatrix<T> embed;       // m x d
  BasicMatrix<T> pos;         // L x d
  std::vector<BlockParams<T>> blocks;
  BasicMatrix<T> final_norm;  // 1 x d
  BasicMatrix<T> unembed;     // d x m

  // Zero-filled weights with the shapes implied by cfg; norm scales are 1.
  static Weights shaped(const ModelConfig& cfg);

  // Visits every tensor in canonical (file) order with its fixed name.
  template <typename Fn>
  void for_each(Fn&& fn);
  template <typename Fn>
  void for_each(Fn&& fn) const;

  template <typename U>
  Weights<U> cast() const;
};

// Canonical tensor names: "embed", "pos", "block.{i}.wq", ..., "final_norm", "unembed".
std::vector<std::string> tensor_names(const ModelConfig& cfg);
// (rows, cols) of each tensor in canonical order.
std::vector<std::pair<std::size_t, std::size_t>> tensor_shapes(const ModelConfig& cfg);

struct Checkpoint {
  ModelConfig config;
  Weights<float> weights;
  std::uint64_t step = 0;
  std::string tokenizer_fingerprint;

  // Throws CorruptCheckpoint when a tensor shape contradicts config or a value is non-finite.
  void validate() const;
  bool operator==(const Checkpoint&) const;
};

// Binary layout: "GUIDECK1", u64 header length, UTF-8 key=value header, zero
// padding to 64 bytes, then little-endian tensor payloads at 64-byte aligned
// absolute offsets in header order.
void save(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);

// Serialized bytes of a checkpoint; save() writes exactly these.
std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

// Truncated normal (cut at 2 std) with std d^-1/2 for embeddings and
// projections and f^-1/2 for w2; biases 0; norm scales 1.
Checkpoint random_init(const ModelConfig& cfg, std::uint64_t seed);

// Draws one tensor with the random_init scheme. Used by the initializers for
// tensors that are not derived from a teacher.
void fill_truncated_normal(MatrixF& tensor, double stddev, std::uint64_t seed);

// Stable 64-bit content hash (FNV-1a over the serialized bytes).
std::uint64_t content_hash(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------

template <typename T>
template <typename Fn>
void Weights<T>::for_each(Fn&& fn) {
  fn(std::string("embed"), embed);
  fn(std::string("pos"), pos);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block." + std::to_string(i) + ".";
    auto& b = blocks[i];
    fn(p + "norm1", b.norm1);
    fn(p + "wq", b.wq);
    fn(p + "wk", b.wk);
    fn(p + "wv", b.wv);
    fn(p + "wo", b.wo);
    fn(p + "norm2", b.norm2);
    fn(p + "w1", b.w1);
    fn(p + "b1", b.b1);
    fn(p + "w2", b.w2);
    fn(p + "b2", b.b2);
  }
  fn(std::string("final_norm"), final_norm);
  fn(std::string("unembed"), unembed);
}

template <typename T>
template <typename Fn>
void Weights<T>::for_each(Fn&& fn) const {
  const_cast<Weights<T>*>(this)->for_each(
      [&](const std::string& name, BasicMatrix<T>& t) { fn(name, static_cast<const BasicMatrix<T>&>(t)); });
}

template <typename T>
template <typename U>
Weights<U> Weights<T>::cast() const {
  Weights<U> out;
  out.embed = embed.template cast<U>();
  out.pos = pos.template cast<U>();
  out.blocks.resize(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& s = blocks[i];
    auto& d = out.blocks[i];
    d.norm1 = s.norm1.template cast<U>();
    d.wq = s.wq.template cast<U>();
    d.wk = s.wk.template cast<U>();
    d.wv = s.wv.template cast<U>();
    d.wo = s.wo.template cast<U>();
    d.norm2 = s.norm2.template cast<U>();
    d.w1 = s.w1.template cast<U>();
    d.b1 = s.b1.template cast<U>();
    d.w2 = s.w2.template cast<U>();
    d.b2 = s.b2.template cast<U>();
  }
  out.final_norm = final_norm.template cast<U>();
  out.unembed = unembed.template cast<U>();
  return out;
}

template <typename T>
Weights<T> Weights<T>::shaped(const ModelConfig& cfg) {
  const std::size_t d = cfg.model_dim, hl = cfg.num_heads * cfg.head_dim, f = cfg.ffn_dim;
  Weights w;
  w.embed = BasicMatrix<T>(cfg.vocab_size, d);
  w.pos = BasicMatrix<T>(cfg.context_len, d);
  w.blocks.resize(cfg.num_layers);
  for (auto& b : w.blocks) {
    b.norm1 = BasicMatrix<T>(1, d, T{1});
    b.wq = BasicMatrix<T>(d, hl);
    b.wk = BasicMatrix<T>(d, hl);
    b.wv = BasicMatrix<T>(d, hl);
    b.wo = BasicMatrix<T>(hl, d);
    b.norm2 = BasicMatrix<T>(1, d, T{1});
    b.w1 = BasicMatrix<T>(d, f);
    b.b1 = BasicMatrix<T>(1, f);
    b.w2 = BasicMatrix<T>(f, d);
    b.b2 = BasicMatrix<T>(1, d);
  }
  w.final_norm = BasicMatrix<T>(1, d, T{1});
  w.unembed = BasicMatrix<T>(d, cfg.vocab_size);
  return w;
}

}  // namespace guide
