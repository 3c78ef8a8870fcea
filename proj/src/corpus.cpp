#include "guide/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

namespace guide {

namespace {

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed for " + path.string());
  return ss.str();
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed ^ (stream * 0xd1342543de82ef95ULL);
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

bool is_valid_utf8(std::string_view text) {
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > n) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(text[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    // Reject overlong forms, surrogates and out-of-range code points.
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000)) return false;
    if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += len;
  }
  return true;
}

Tokenizer Tokenizer::with_extra_tokens(std::vector<std::string> tokens) {
  Tokenizer tok;
  std::set<std::string> seen;
  for (auto& t : tokens) {
    if (t.size() < 2 || !seen.insert(t).second) continue;
    tok.max_extra_len_ = std::max(tok.max_extra_len_, t.size());
    tok.extra_.push_back(std::move(t));
  }
  return tok;
}

Tokenizer Tokenizer::from_vocab_file(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) tokens.push_back(line);
  }
  return with_extra_tokens(std::move(tokens));
}

std::vector<std::int32_t> Tokenizer::encode(std::string_view text) const {
  if (!is_valid_utf8(text)) throw InvalidInput("tokenize: input is not valid UTF-8");
  std::vector<std::int32_t> ids;
  ids.reserve(text.size() + 1);
  ids.push_back(kBos);
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t best_len = 0;
    std::size_t best_id = 0;
    for (std::size_t k = 0; k < extra_.size(); ++k) {
      const auto& t = extra_[k];
      if (t.size() > best_len && text.substr(i, t.size()) == t) {
        best_len = t.size();
        best_id = kByteVocab + k;
      }
    }
    if (best_len > 0) {
      ids.push_back(static_cast<std::int32_t>(best_id));
      i += best_len;
    } else {
      ids.push_back(static_cast<std::int32_t>(static_cast<unsigned char>(text[i])) + kByteOffset);
      ++i;
    }
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<std::int32_t>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) {
      throw InvalidInput("detokenize: id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(vocab_size()));
    }
    if (id < kByteOffset) continue;
    if (static_cast<std::size_t>(id) < kByteVocab) {
      out.push_back(static_cast<char>(id - kByteOffset));
    } else {
      out += extra_[static_cast<std::size_t>(id) - kByteVocab];
    }
  }
  return out;
}

std::string Tokenizer::fingerprint() const {
  if (extra_.empty()) return "bytes-259";
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : extra_) h = fnv1a(t + '\n', h);
  std::ostringstream os;
  os << "bytes+" << extra_.size() << "-" << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::vector<std::int32_t> tokenize_files(const std::vector<std::filesystem::path>& paths, const Tokenizer& tok) {
  std::vector<std::int32_t> tokens;
  for (const auto& path : paths) {
    const std::string text = read_file(path);
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t sep = text.find("\n\f\n", start);
      std::size_t end = sep == std::string::npos ? text.size() : sep + 1;
      const std::string_view doc(text.data() + start, end - start);
      if (!doc.empty() || start == 0) {
        const auto ids = tok.encode(doc);
        tokens.insert(tokens.end(), ids.begin(), ids.end());
      }
      if (sep == std::string::npos) break;
      start = sep + 3;
    }
  }
  return tokens;
}

BatchStream::BatchStream(std::shared_ptr<const std::vector<std::int32_t>> tokens, std::size_t context_len,
                         std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : BatchStream(tokens, context_len, batch_size, seed,
                  WindowRange{0, context_len ? (tokens ? tokens->size() : 0) / context_len : 0}, shuffle) {}

BatchStream::BatchStream(std::shared_ptr<const std::vector<std::int32_t>> tokens, std::size_t context_len,
                         std::size_t batch_size, std::uint64_t seed, WindowRange windows, bool shuffle)
    : tokens_(std::move(tokens)),
      context_len_(context_len),
      batch_size_(batch_size),
      seed_(seed),
      windows_(windows),
      shuffle_(shuffle) {
  if (context_len_ == 0 || batch_size_ == 0) throw InvalidInput("batch stream: context length and batch size must be positive");
  if (!tokens_ || windows_.end <= windows_.begin) {
    throw InvalidInput("batch stream: corpus has no complete " + std::to_string(context_len_) + "-token window");
  }
  if (windows_.end * context_len_ > tokens_->size()) throw InvalidInput("batch stream: window range exceeds corpus");
  start_epoch();
}

void BatchStream::start_epoch() {
  const std::size_t n = num_windows();
  order_.resize(n);
  for (std::size_t i = 0; i < n; ++i) order_[i] = windows_.begin + i;
  if (shuffle_) {
    // Fisher-Yates with an explicit draw so the order does not depend on the
    // standard library's shuffle implementation.
    std::mt19937_64 rng(derive_seed(seed_, epoch_));
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(order_[i - 1], order_[j]);
    }
  }
  cursor_ = 0;
}

std::size_t BatchStream::window_at(std::size_t position_in_epoch) const { return order_.at(position_in_epoch); }

TokenBatch BatchStream::next_batch() {
  TokenBatch batch;
  batch.batch = batch_size_;
  batch.length = context_len_;
  batch.ids.reserve(batch_size_ * context_len_);
  for (std::size_t b = 0; b < batch_size_; ++b) {
    if (cursor_ == order_.size()) {
      ++epoch_;
      start_epoch();
    }
    const std::size_t w = order_[cursor_++];
    const auto first = tokens_->begin() + static_cast<std::ptrdiff_t>(w * context_len_);
    batch.ids.insert(batch.ids.end(), first, first + static_cast<std::ptrdiff_t>(context_len_));
  }
  return batch;
}

DataSplit split_train_eval(std::shared_ptr<const std::vector<std::int32_t>> tokens, std::size_t context_len,
                           std::size_t batch_size, std::uint64_t seed) {
  if (context_len == 0) throw InvalidInput("context length must be positive");
  const std::size_t windows = tokens ? tokens->size() / context_len : 0;
  if (windows < 2) throw InvalidInput("corpus needs at least two windows to hold out an eval shard");
  const std::size_t held_out = std::max<std::size_t>(1, windows / 20);
  const std::size_t cut = windows - held_out;
  return {BatchStream(tokens, context_len, batch_size, seed, WindowRange{0, cut}, true),
          BatchStream(tokens, context_len, batch_size, seed, WindowRange{cut, windows}, false)};
}

}  // namespace guide
