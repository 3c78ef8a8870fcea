#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "guide/selection.hpp"

using namespace guide;

namespace {

// Exhaustive oracle: among all strictly increasing m-subsets of [0, n), the
// one whose entries are closest (summed |deviation|) to k(n-1)/(m-1), ties
// broken towards the lexicographically smaller subset. Deviations are scaled
// by (m-1) so everything stays in integers.
IndexList brute_force(std::size_t m, std::size_t n) {
  if (m == 1) return {0};
  IndexList best, cur;
  std::size_t best_cost = ~std::size_t{0};
  const auto target = [&](std::size_t k) { return k * (n - 1); };
  auto rec = [&](auto&& self, std::size_t start) -> void {
    if (cur.size() == m) {
      std::size_t cost = 0;
      for (std::size_t k = 0; k < m; ++k) {
        const std::size_t scaled = cur[k] * (m - 1);
        cost += scaled > target(k) ? scaled - target(k) : target(k) - scaled;
      }
      if (cost < best_cost) {
        best_cost = cost;
        best = cur;
      }
      return;
    }
    for (std::size_t i = start; i < n; ++i) {
      cur.push_back(i);
      self(self, i + 1);
      cur.pop_back();
    }
  };
  rec(rec, 0);
  return best;
}

template <typename T>
NdTensor<T> iota_tensor(std::vector<std::size_t> shape) {
  NdTensor<T> t{shape, {}};
  t.data.resize(t.size());
  std::iota(t.data.begin(), t.data.end(), T{0});
  return t;
}

}  // namespace

TEST_CASE("evenly_spaced_indices examples") {
  CHECK(evenly_spaced_indices(5, 5) == IndexList{0, 1, 2, 3, 4});
  CHECK(evenly_spaced_indices(3, 5) == IndexList{0, 2, 4});
  CHECK(evenly_spaced_indices(3, 4) == IndexList{0, 1, 3});  // 1.5 rounds down
  CHECK(evenly_spaced_indices(3, 6) == IndexList{0, 2, 5});  // 2.5 rounds down
  CHECK(evenly_spaced_indices(2, 4) == IndexList{0, 3});
  CHECK(evenly_spaced_indices(1, 7) == IndexList{0});
  CHECK(evenly_spaced_indices(1, 1) == IndexList{0});
}

TEST_CASE("evenly_spaced_indices rejects bad counts") {
  CHECK_THROWS_AS(evenly_spaced_indices(0, 4), InvalidInput);
  CHECK_THROWS_AS(evenly_spaced_indices(5, 4), InvalidInput);
}

TEST_CASE("evenly_spaced_indices agrees with the brute-force oracle") {
  for (std::size_t n = 1; n <= 11; ++n)
    for (std::size_t m = 1; m <= n; ++m) {
      CAPTURE(m);
      CAPTURE(n);
      CHECK(evenly_spaced_indices(m, n) == brute_force(m, n));
    }
}

TEST_CASE("property: endpoints, length, strictly increasing") {
  for (std::size_t n = 2; n <= 300; n += 7)
    for (std::size_t m = 2; m <= n; m += 1 + n / 13) {
      const auto idx = evenly_spaced_indices(m, n);
      REQUIRE(idx.size() == m);
      CHECK(idx.front() == 0);
      CHECK(idx.back() == n - 1);
      CHECK(std::adjacent_find(idx.begin(), idx.end(), std::greater_equal<>()) == idx.end());
    }
  // Large sizes stay exact (no floating-point drift).
  const auto big = evenly_spaced_indices(4097, 1u << 20);
  CHECK(big[2048] == ((1u << 20) - 1) / 2);  // 524287.5 rounds down
}

TEST_CASE("uniform_select on matrices") {
  MatrixF m(4, 4);
  for (std::size_t i = 0; i < 16; ++i) m[i] = static_cast<float>(i);
  CHECK(uniform_select(m, 4, 4) == m);
  const MatrixF s = uniform_select(m, 2, 2);
  REQUIRE(s.rows() == 2);
  CHECK(s(0, 0) == m(0, 0));
  CHECK(s(0, 1) == m(0, 3));
  CHECK(s(1, 0) == m(3, 0));
  CHECK(s(1, 1) == m(3, 3));
  CHECK_THROWS_AS(uniform_select(m, 5, 2), InvalidInput);
}

TEST_CASE("uniform_select on a 3-axis tensor follows H x D_h x D") {
  const auto t = iota_tensor<double>({4, 4, 6});
  const auto s = uniform_select(t, {2, 2, 3});
  REQUIRE(s.shape == std::vector<std::size_t>{2, 2, 3});
  const IndexList H{0, 3}, Dh{0, 3}, D{0, 2, 5};
  std::size_t k = 0;
  for (auto h : H)
    for (auto l : Dh)
      for (auto d : D) CHECK(s.data[k++] == static_cast<double>((h * 4 + l) * 6 + d));
  CHECK(uniform_select(t, {4, 4, 6}) == t);
  CHECK_THROWS_AS(uniform_select(t, {2, 5, 3}), InvalidInput);
  CHECK_THROWS_AS(uniform_select(t, {2, 2}), InvalidInput);
}

TEST_CASE("property: uniform_select commutes with transposition") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t r = 1 + rng() % 12, c = 1 + rng() % 12;
    const std::size_t tr = 1 + rng() % r, tc = 1 + rng() % c;
    Matrix m(r, c);
    for (auto& v : m.values()) v = static_cast<double>(rng() % 1000);
    CHECK(transpose(uniform_select(m, tr, tc)) == uniform_select(transpose(m), tc, tr));
  }
}

TEST_CASE("gather_nd validates indices") {
  const auto t = iota_tensor<float>({3, 4});
  CHECK(gather_nd(t, {{0, 2}, {1, 3}}).data == std::vector<float>{1, 3, 9, 11});
  CHECK_THROWS_AS(gather_nd(t, {{0, 3}, {0}}), ShapeError);
  CHECK_THROWS_AS(gather_nd(t, {{1, 1}, {0}}), ShapeError);
}

TEST_CASE("select_layers strategies") {
  using P = std::vector<std::pair<std::size_t, std::size_t>>;
  CHECK(select_layers(LayerStrategy::EmbedOnly, 4, 8).mapping.empty());
  CHECK(select_layers(LayerStrategy::TopK, 4, 8, 1).mapping == P{{0, 0}});
  CHECK(select_layers(LayerStrategy::TopK, 23, 36, 1).mapping == P{{0, 0}});
  CHECK(select_layers(LayerStrategy::TopPlusLast, 23, 36).mapping == P{{0, 0}, {22, 35}});
  CHECK(select_layers(LayerStrategy::FirstN, 4, 8).mapping == P{{0, 0}, {1, 1}, {2, 2}, {3, 3}});
  CHECK(select_layers(LayerStrategy::TopK, 4, 8, 2).mapping == P{{0, 0}, {3, 7}});
  CHECK(select_layers(LayerStrategy::TopK, 4, 8, 3).mapping == P{{0, 0}, {1, 3}, {3, 7}});

  CHECK_THROWS_AS(select_layers(LayerStrategy::TopK, 4, 8, 5), InvalidInput);
  CHECK_THROWS_AS(select_layers(LayerStrategy::TopK, 4, 8, 0), InvalidInput);
  CHECK_THROWS_AS(select_layers(LayerStrategy::FirstN, 9, 8), InvalidInput);
  CHECK_THROWS_AS(select_layers(LayerStrategy::TopPlusLast, 1, 8), InvalidInput);
}

TEST_CASE("property: layer mappings are distinct and in range") {
  for (std::size_t nt = 1; nt <= 12; ++nt)
    for (std::size_t ns = 1; ns <= nt; ++ns)
      for (std::size_t k = 1; k <= ns; ++k) {
        const auto sel = select_layers(LayerStrategy::TopK, ns, nt, k);
        REQUIRE(sel.mapping.size() == k);
        CHECK(sel.mapping.front() == std::make_pair(std::size_t{0}, std::size_t{0}));
        for (std::size_t i = 1; i < k; ++i) {
          CHECK(sel.mapping[i].first > sel.mapping[i - 1].first);
          CHECK(sel.mapping[i].second > sel.mapping[i - 1].second);
        }
        CHECK(sel.mapping.back().first < ns);
        CHECK(sel.mapping.back().second < nt);
      }
  CHECK(to_string(LayerStrategy::TopPlusLast) == "top+last");
}
