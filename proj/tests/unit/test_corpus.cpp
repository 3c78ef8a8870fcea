#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "guide/corpus.hpp"
#include "guide/errors.hpp"

using namespace guide;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& name, const std::string& body) {
  const fs::path dir = fs::temp_directory_path() / "guide_corpus_test";
  fs::create_directories(dir);
  const fs::path p = dir / name;
  std::ofstream(p, std::ios::binary) << body;
  return p;
}

std::shared_ptr<const std::vector<std::int32_t>> iota_tokens(std::size_t n) {
  auto v = std::make_shared<std::vector<std::int32_t>>(n);
  std::iota(v->begin(), v->end(), 0);
  return v;
}

}  // namespace

TEST_CASE("byte tokenizer ids and roundtrip") {
  Tokenizer tok;
  CHECK(tok.vocab_size() == 259);
  CHECK(tok.fingerprint() == "bytes-259");
  const auto ids = tok.encode("Ab\n");
  CHECK(ids == std::vector<std::int32_t>{1, 'A' + 3, 'b' + 3, '\n' + 3});
  CHECK(tok.decode(ids) == "Ab\n");
  const std::string utf = "na\xc3\xafve \xe2\x82\xac \xf0\x9f\x99\x82";
  CHECK(tok.decode(tok.encode(utf)) == utf);
  CHECK(tok.encode("") == std::vector<std::int32_t>{Tokenizer::kBos});
  CHECK(tok.decode({0, 1, 2, 'x' + 3}) == "x");
  CHECK_THROWS_AS(tok.decode({259}), InvalidInput);
  CHECK_THROWS_AS(tok.decode({-1}), InvalidInput);
}

TEST_CASE("invalid UTF-8 is rejected") {
  Tokenizer tok;
  for (const char* bad : {"\xff", "\xc3", "\xc0\x80", "\xed\xa0\x80", "\xf4\x90\x80\x80", "a\x80"})
    CHECK_THROWS_AS(tok.encode(bad), InvalidInput);
  CHECK(is_valid_utf8("plain ascii"));
  CHECK(is_valid_utf8("\xf4\x8f\xbf\xbf"));
}

TEST_CASE("vocab file tokens use the longest match") {
  const auto path = write_temp("vocab.txt", "th\nthe\r\nthe\n\nx\n");
  const Tokenizer tok = Tokenizer::from_vocab_file(path);
  // Duplicates and single bytes are ignored.
  CHECK(tok.vocab_size() == 261);
  const auto ids = tok.encode("the th t");
  CHECK(ids == std::vector<std::int32_t>{1, 260, ' ' + 3, 259, ' ' + 3, 't' + 3});
  CHECK(tok.decode(ids) == "the th t");
  CHECK(tok.fingerprint() != Tokenizer().fingerprint());
  CHECK(tok.fingerprint() == Tokenizer::with_extra_tokens({"th", "the"}).fingerprint());
  CHECK(tok.fingerprint() != Tokenizer::with_extra_tokens({"the", "th"}).fingerprint());
  CHECK_THROWS_AS(Tokenizer::from_vocab_file("/nonexistent/vocab.txt"), IoError);
}

TEST_CASE("documents are split on form-feed lines and each starts with BOS") {
  const auto path = write_temp("docs.txt", "one\n\f\ntwo\n\f\nthree");
  const auto ids = tokenize_files({path}, Tokenizer());
  const std::vector<std::int32_t> expect = {1, 'o' + 3, 'n' + 3, 'e' + 3, '\n' + 3, 1, 't' + 3, 'w' + 3, 'o' + 3,
                                            '\n' + 3, 1, 't' + 3, 'h' + 3, 'r' + 3, 'e' + 3, 'e' + 3};
  CHECK(ids == expect);
  // Files concatenate.
  const auto both = tokenize_files({path, path}, Tokenizer());
  CHECK(both.size() == 2 * ids.size());
  CHECK_THROWS_AS(tokenize_files({"/nonexistent/corpus.txt"}, Tokenizer()), IoError);
}

TEST_CASE("one epoch of batches covers every window exactly once") {
  const std::size_t L = 4, B = 3, windows = 12;
  BatchStream s(iota_tokens(windows * L + 3), L, B, 7);
  CHECK(s.num_windows() == windows);
  std::multiset<std::int32_t> seen;
  for (std::size_t i = 0; i < windows / B; ++i) {
    const TokenBatch b = s.next_batch();
    REQUIRE(b.batch == B);
    REQUIRE(b.length == L);
    for (std::size_t r = 0; r < B; ++r) {
      CHECK(b.at(r, 0) % static_cast<std::int32_t>(L) == 0);
      for (std::size_t t = 1; t < L; ++t) CHECK(b.at(r, t) == b.at(r, t - 1) + 1);
    }
    seen.insert(b.ids.begin(), b.ids.end());
  }
  CHECK(seen.size() == windows * L);
  CHECK(std::set<std::int32_t>(seen.begin(), seen.end()).size() == windows * L);
  CHECK(*seen.rbegin() == static_cast<std::int32_t>(windows * L - 1));  // trailing partial window unused
  CHECK(s.epoch() == 0);
  s.next_batch();
  CHECK(s.epoch() == 1);
}

TEST_CASE("batch order is a function of the seed") {
  const auto toks = iota_tokens(1000 * 8);
  BatchStream a(toks, 8, 4, 1), b(toks, 8, 4, 1), c(toks, 8, 4, 2);
  bool differs = false;
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next_batch(), y = b.next_batch(), z = c.next_batch();
    CHECK(x == y);
    differs |= !(x == z);
  }
  CHECK(differs);

  // Later epochs use a different permutation.
  BatchStream e(toks, 8, 1, 3);
  std::vector<std::size_t> first;
  for (std::size_t i = 0; i < 1000; ++i) first.push_back(e.window_at(i));
  for (std::size_t i = 0; i < 1000; ++i) e.next_batch();
  e.next_batch();
  std::vector<std::size_t> second;
  for (std::size_t i = 0; i < 1000; ++i) second.push_back(e.window_at(i));
  CHECK(first != second);
  std::sort(second.begin(), second.end());
  for (std::size_t i = 0; i < 1000; ++i) CHECK(second[i] == i);

  // Unshuffled streams read windows in order.
  BatchStream u(toks, 8, 2, 9, false);
  CHECK(u.next_batch().ids.front() == 0);
  CHECK(u.next_batch().ids.front() == 16);
}

TEST_CASE("held-out split takes the last 5% of windows") {
  const auto toks = iota_tokens(100 * 4);
  auto split = split_train_eval(toks, 4, 5, 1);
  CHECK(split.train.num_windows() == 95);
  CHECK(split.eval.num_windows() == 5);
  const auto eb = split.eval.next_batch();
  CHECK(eb.ids.front() == 95 * 4);
  // No training window touches the held-out range.
  for (int i = 0; i < 19; ++i)
    for (auto id : split.train.next_batch().ids) CHECK(id < 95 * 4);

  auto small = split_train_eval(iota_tokens(3 * 4), 4, 1, 1);
  CHECK(small.eval.num_windows() == 1);
  CHECK(small.train.num_windows() == 2);
  CHECK_THROWS_AS(split_train_eval(iota_tokens(7), 4, 1, 1), InvalidInput);
  CHECK_THROWS_AS(BatchStream(iota_tokens(3), 4, 1, 1), InvalidInput);
  CHECK_THROWS_AS(BatchStream(iota_tokens(8), 4, 0, 1), InvalidInput);
}

TEST_CASE("derived seeds are distinct") {
  std::set<std::uint64_t> s;
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (std::uint64_t stream = 0; stream < 20; ++stream) s.insert(derive_seed(seed, stream));
  CHECK(s.size() == 400);
  CHECK(derive_seed(5, 6) == derive_seed(5, 6));
}
