#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "guide/transformer.hpp"

namespace guide {

// Byte-level tokenizer. Ids 0..2 are PAD, BOS, EOS; byte b maps to b + 3.
// An optional vocab file appends multi-byte tokens (one per line) after the
// 256 byte ids; encoding then takes the longest match at each position.
class Tokenizer {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBos = 1;
  static constexpr std::int32_t kEos = 2;
  static constexpr std::int32_t kByteOffset = 3;
  static constexpr std::size_t kByteVocab = 259;

  Tokenizer() = default;
  static Tokenizer from_vocab_file(const std::filesystem::path& path);
  static Tokenizer with_extra_tokens(std::vector<std::string> tokens);

  std::size_t vocab_size() const { return kByteVocab + extra_.size(); }

  // BOS followed by the document's tokens. Throws InvalidInput on invalid UTF-8.
  std::vector<std::int32_t> encode(std::string_view text) const;
  // Special ids are dropped. Throws InvalidInput for ids outside the vocabulary.
  std::string decode(const std::vector<std::int32_t>& ids) const;

  // Stored in checkpoint headers so teacher and student can be matched.
  std::string fingerprint() const;

 private:
  std::vector<std::string> extra_;
  std::size_t max_extra_len_ = 0;
};

bool is_valid_utf8(std::string_view text);

// Token stream of one or more text files. Within a file, a line consisting of
// a single form feed separates documents; every document starts with BOS.
std::vector<std::int32_t> tokenize_files(const std::vector<std::filesystem::path>& paths, const Tokenizer& tok);

struct WindowRange {
  std::size_t begin = 0;  // first window
  std::size_t end = 0;    // one past the last window
};

// Deterministic stream of B x L batches over contiguous, non-overlapping
// L-token windows of a packed token stream. Shuffled streams visit a seeded
// permutation of their windows each epoch; the permutation for epoch e uses a
// seed derived from (seed, e).
class BatchStream {
 public:
  BatchStream(std::shared_ptr<const std::vector<std::int32_t>> tokens, std::size_t context_len,
              std::size_t batch_size, std::uint64_t seed, bool shuffle = true);
  BatchStream(std::shared_ptr<const std::vector<std::int32_t>> tokens, std::size_t context_len,
              std::size_t batch_size, std::uint64_t seed, WindowRange windows, bool shuffle);

  TokenBatch next_batch();

  std::size_t context_len() const { return context_len_; }
  std::size_t batch_size() const { return batch_size_; }
  std::size_t num_windows() const { return windows_.end - windows_.begin; }
  std::size_t epoch() const { return epoch_; }
  std::uint64_t seed() const { return seed_; }
  // Index of the window the next batch row will read, in epoch order.
  std::size_t window_at(std::size_t position_in_epoch) const;

 private:
  void start_epoch();

  std::shared_ptr<const std::vector<std::int32_t>> tokens_;
  std::size_t context_len_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  WindowRange windows_;
  bool shuffle_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

struct DataSplit {
  BatchStream train;
  BatchStream eval;
};

// The last 5% of windows (at least one) form an unshuffled held-out stream;
// the rest are shuffled with `seed`.
DataSplit split_train_eval(std::shared_ptr<const std::vector<std::int32_t>> tokens, std::size_t context_len,
                           std::size_t batch_size, std::uint64_t seed);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace guide
