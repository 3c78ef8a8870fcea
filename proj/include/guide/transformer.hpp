#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "guide/checkpoint.hpp"

namespace guide {

// B x L_cur token ids, row-major.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;

  std::int32_t at(std::size_t b, std::size_t t) const { return ids[b * length + t]; }
  bool operator==(const TokenBatch&) const = default;
};

// Throws ShapeError unless every id is < vocab_size and 1 <= length <= context_len.
void validate_batch(const ModelConfig& cfg, const TokenBatch& batch);

// Activations of one forward pass. Row r of every (B*L_cur)-row matrix is
// token t = r % L_cur of sequence b = r / L_cur. Per-block attention scores
// are stacked as (B*h*L_cur) x L_cur: row ((b*h + head)*L_cur + t).
template <typename T>
struct ForwardTrace {
  BasicMatrix<T> input_embeddings;                 // X, (B*L) x d
  std::vector<BasicMatrix<T>> queries;             // per block, (B*L) x (h*l)
  std::vector<BasicMatrix<T>> keys;
  std::vector<BasicMatrix<T>> values;
  std::vector<BasicMatrix<T>> attention;           // per block, (B*h*L) x L
  std::vector<BasicMatrix<T>> block_outputs;       // per block, pre-residual MLP output
  BasicMatrix<T> final_hidden;                     // residual stream after the last block
  BasicMatrix<T> logits;                           // (B*L) x m
};

// Pre-norm decoder: per block, A = causal softmax(Q K^T / sqrt(l)) on
// RMS-normed input, O = concat(A V) W^O, B = gelu(norm(O) W1 + b1) W2 + b2,
// and the block output B is added to the block input. Without capture_trace
// only logits are filled.
template <typename T>
ForwardTrace<T> forward(const ModelConfig& cfg, const Weights<T>& weights, const TokenBatch& batch,
                        bool capture_trace = false);

ForwardTrace<float> forward(const Checkpoint& ckpt, const TokenBatch& batch, bool capture_trace = false);

template <typename T>
struct LossResult {
  double total = 0.0;    // pred + alpha * distill
  double pred = 0.0;     // mean next-token cross-entropy
  double distill = 0.0;  // mean cross-entropy of student against teacher distributions
  Weights<T> grads;      // d total / d weights
};

// Both losses average over positions 0..L_cur-2 of every sequence (the
// positions that have a next token). Teacher logits, when given, are
// (B*L_cur) x m and are treated as constants.
template <typename T>
LossResult<T> loss_and_grads(const ModelConfig& cfg, const Weights<T>& weights, const TokenBatch& batch,
                             const BasicMatrix<T>* teacher_logits = nullptr, double alpha = 0.0);

// Loss-only helpers on logits. When dlogits is non-null, scale * dloss/dlogits
// is accumulated into it.
template <typename T>
double next_token_loss(const BasicMatrix<T>& logits, const TokenBatch& batch, BasicMatrix<T>* dlogits = nullptr,
                       double scale = 1.0);
template <typename T>
double distill_loss(const BasicMatrix<T>& student_logits, const BasicMatrix<T>& teacher_logits,
                    const TokenBatch& batch, BasicMatrix<T>* dlogits = nullptr, double scale = 1.0);

inline constexpr double kRmsNormEps = 1e-6;

double gelu(double x);

}  // namespace guide
