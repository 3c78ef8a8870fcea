#include <doctest.h>

#include <cmath>
#include <random>

#include "guide/errors.hpp"
#include "guide/initializers.hpp"
#include "guide/transformer.hpp"
#include "unit/helpers.hpp"

using namespace guide;

namespace {

const ModelConfig kTeacher{8, 4, 2, 4, 16, 11, 6};
const ModelConfig kStudent{4, 2, 1, 4, 8, 11, 6};

Matrix to_d(const MatrixF& m) { return m.cast<double>(); }

TokenBatch batch_for(const ModelConfig& cfg, std::uint64_t seed, std::size_t b = 3) {
  std::mt19937_64 rng(seed);
  TokenBatch out{b, cfg.context_len, {}};
  for (std::size_t i = 0; i < b * cfg.context_len; ++i)
    out.ids.push_back(static_cast<std::int32_t>(rng() % cfg.vocab_size));
  return out;
}

// Teacher with non-trivial norm scales and biases so nothing is accidentally 1 or 0.
Checkpoint noisy_teacher(const ModelConfig& cfg, std::uint64_t seed) {
  Checkpoint t = random_init(cfg, seed);
  std::mt19937_64 rng(seed ^ 0x5eed);
  std::uniform_real_distribution<float> u(0.5f, 1.5f), b(-0.1f, 0.1f);
  for (auto& blk : t.weights.blocks) {
    for (auto& v : blk.norm1.values()) v = u(rng);
    for (auto& v : blk.norm2.values()) v = u(rng);
    for (auto& v : blk.b1.values()) v = b(rng);
    for (auto& v : blk.b2.values()) v = b(rng);
  }
  for (auto& v : t.weights.final_norm.values()) v = u(rng);
  return t;
}

bool same(const MatrixF& a, const MatrixF& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && max_abs_diff(a, b) == 0.0;
}

}  // namespace

TEST_CASE("guide with identical dimensions reproduces the first block's attention") {
  // An orthogonal square M is a rotation; the RMS norm commutes with it and
  // the folded norm scale undoes the teacher's, so Q, K, V and A match.
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Checkpoint teacher = noisy_teacher(kTeacher, seed);
    const auto r = guide_init(teacher, kTeacher, select_layers(LayerStrategy::TopK, 4, 4, 1), seed + 100);
    const TokenBatch batch = batch_for(kTeacher, seed);
    const auto ft = forward(teacher, batch, true);
    const auto fs = forward(r.student, batch, true);
    CHECK(max_abs_diff(ft.queries[0], fs.queries[0]) < 1e-4);
    CHECK(max_abs_diff(ft.keys[0], fs.keys[0]) < 1e-4);
    CHECK(max_abs_diff(ft.values[0], fs.values[0]) < 1e-4);
    CHECK(max_abs_diff(ft.attention[0], fs.attention[0]) < 1e-4);
  }
}

TEST_CASE("projection columns are orthonormal and ordered by singular value") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Checkpoint teacher = random_init(kTeacher, seed);
    for (std::size_t ds : {1, 3, 4, 8}) {
      const auto p = pca_projection(teacher, ds);
      REQUIRE(p.m.rows() == 8);
      REQUIRE(p.m.cols() == ds);
      CHECK(testutil::max_offdiag_identity_error(p.m) < 1e-6);
      REQUIRE(p.singular_values.size() == 8);
      for (std::size_t i = 1; i < p.singular_values.size(); ++i)
        CHECK(p.singular_values[i - 1] >= p.singular_values[i]);
    }
  }
}

TEST_CASE("projection spans the stacked table: PCA energy matches the eigen oracle") {
  const Checkpoint teacher = random_init(kTeacher, 7);
  const Matrix stacked = vstack(to_d(teacher.weights.embed), to_d(teacher.weights.pos));
  const auto eig = sym_eig(testutil::gram_t(stacked));
  const auto p = pca_projection(teacher, 3);
  // ||X M||_F^2 is the sum of the top 3 eigenvalues of X^T X.
  const double energy = std::pow(frobenius_norm(testutil::naive_matmul(stacked, p.m)), 2);
  CHECK(energy == doctest::Approx(eig.eigenvalues[0] + eig.eigenvalues[1] + eig.eigenvalues[2]).epsilon(1e-9));
}

TEST_CASE("a low-rank teacher embedding is reconstructed exactly") {
  const std::size_t r = 3;
  Checkpoint teacher = random_init(kTeacher, 3);
  const Matrix basis = testutil::random_matrix(r, 8, 11);
  teacher.weights.embed = testutil::naive_matmul(testutil::random_matrix(11, r, 12), basis).cast<float>();
  teacher.weights.pos = testutil::naive_matmul(testutil::random_matrix(6, r, 13), basis).cast<float>();
  const auto out = guide_init(teacher, kStudent, select_layers(LayerStrategy::TopK, 2, 4, 1), 5);
  const auto p = pca_projection(teacher, kStudent.model_dim);
  const Matrix rebuilt = testutil::naive_matmul(to_d(out.student.weights.embed), transpose(p.m));
  const Matrix et = to_d(teacher.weights.embed);
  CHECK(max_abs_diff(rebuilt, et) <= 1e-6 * frobenius_norm(et));
  for (double v : out.report.residual_spectrum) CHECK(v < 1e-5);
}

TEST_CASE("guide report for a deeper teacher") {
  const Checkpoint teacher = noisy_teacher(kTeacher, 21);
  const auto r = guide_init(teacher, kStudent, select_layers(LayerStrategy::TopK, 2, 4, 1), 9);
  const auto& rep = r.report;
  CHECK(rep.method == "guide");
  const auto names = tensor_names(kStudent);
  REQUIRE(rep.tensors.size() == names.size());
  for (std::size_t i = 0; i < names.size(); ++i) CHECK(rep.tensors[i].tensor == names[i]);

  CHECK(rep.find("embed").origin == Origin::Teacher);
  CHECK(rep.find("pos").origin == Origin::Teacher);
  for (const char* t : {"wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"})
    CHECK(rep.find(std::string("block.0.") + t).origin == Origin::Teacher);
  for (const char* t : {"wq", "wk", "wv", "wo", "w1", "w2"})
    CHECK(rep.find(std::string("block.1.") + t).origin == Origin::Random);
  CHECK(rep.find("block.1.norm1").origin == Origin::Constant);
  CHECK(rep.find("block.1.b1").origin == Origin::Constant);
  CHECK(rep.find("unembed").origin == Origin::Random);
  CHECK(rep.residual_spectrum.size() == 4);
  CHECK(rep.indices.model == IndexList{0, 2, 5, 7});
  CHECK(rep.indices.heads == IndexList{0});
  CHECK(rep.indices.ffn == IndexList{0, 2, 4, 6, 9, 11, 13, 15});
  CHECK(rep.to_text().find("block.0.wq") != std::string::npos);
  r.student.validate();

  // The student's first block norm is folded into Q/K/V, the random tensors
  // are the same draws random_init would make.
  CHECK(same(r.student.weights.blocks[0].norm1, MatrixF(1, 4, 1.0f)));
  const Checkpoint rnd = random_init(kStudent, 9);
  CHECK(same(r.student.weights.blocks[1].wq, rnd.weights.blocks[1].wq));
  CHECK(same(r.student.weights.unembed, rnd.weights.unembed));
}

TEST_CASE("guide: first block is projected, later mapped blocks are uniformly selected") {
  const Checkpoint teacher = noisy_teacher(kTeacher, 4);
  const auto r = guide_init(teacher, kStudent, select_layers(LayerStrategy::TopPlusLast, 2, 4), 1);
  const auto& ix = r.report.indices;
  const auto& src = teacher.weights.blocks[3];
  const auto& dst = r.student.weights.blocks[1];
  // Q columns are head-major; with one of two heads and l unchanged, the
  // selected columns are those of head 0.
  IndexList qcols;
  for (auto h : ix.heads)
    for (auto c : ix.head_dim) qcols.push_back(h * 4 + c);
  CHECK(same(dst.wq, gather(gather(src.wq, Axis::Rows, ix.model), Axis::Cols, qcols)));
  CHECK(same(dst.wo, gather(gather(src.wo, Axis::Rows, qcols), Axis::Cols, ix.model)));
  CHECK(same(dst.w1, gather(gather(src.w1, Axis::Rows, ix.model), Axis::Cols, ix.ffn)));
  CHECK(same(dst.b2, gather(src.b2, Axis::Cols, ix.model)));
  CHECK(r.report.find("block.1.w2").origin == Origin::Teacher);

  // Block 0 Q is M^T diag(norm1 * sqrt(d_T/d_S)) W gathered to the student heads.
  const auto p = pca_projection(teacher, 4);
  Matrix scaled = to_d(teacher.weights.blocks[0].wq);
  const double gain = std::sqrt(8.0 / 4.0);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) scaled(i, j) *= teacher.weights.blocks[0].norm1(0, i) * gain;
  const Matrix expect = gather(testutil::naive_matmul(transpose(p.m), scaled), Axis::Cols, qcols);
  CHECK(max_abs_diff(to_d(r.student.weights.blocks[0].wq), expect) < 1e-5);

  GuideOptions plain;
  plain.rescale_norm = false;
  const auto r2 = guide_init(teacher, kStudent, select_layers(LayerStrategy::TopPlusLast, 2, 4), 1, plain);
  CHECK(max_abs_diff(to_d(r2.student.weights.blocks[0].wq), expect) > 1e-3);
  const Matrix ratio_src = to_d(r.student.weights.blocks[0].wq);
  CHECK(to_d(r2.student.weights.blocks[0].wq)(1, 1) * gain == doctest::Approx(ratio_src(1, 1)).epsilon(1e-5));
}

TEST_CASE("embed-only guide transfers only the tables") {
  const Checkpoint teacher = random_init(kTeacher, 2);
  const auto r = guide_init(teacher, kStudent, select_layers(LayerStrategy::EmbedOnly, 2, 4), 3);
  CHECK(r.report.find("embed").origin == Origin::Teacher);
  CHECK(r.report.find("block.0.wq").origin == Origin::Random);
  const Checkpoint rnd = random_init(kStudent, 3);
  CHECK(same(r.student.weights.blocks[0].wq, rnd.weights.blocks[0].wq));
}

TEST_CASE("low-rank embedding: worked example") {
  const ModelConfig t{2, 1, 1, 2, 4, 2, 2};
  const ModelConfig s{1, 1, 1, 1, 4, 2, 2};
  Checkpoint teacher = random_init(t, 1);
  teacher.weights.embed = MatrixF(2, 2, {2.0f, 0.0f, 0.0f, 1.0f});
  const auto r = lowrank_embed_init(teacher, s, 4);
  CHECK(std::abs(r.student.weights.embed(0, 0)) == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(std::abs(r.student.weights.embed(1, 0)) < 1e-6);
  CHECK(gram_objective(to_d(r.student.weights.embed), to_d(teacher.weights.embed)) ==
        doctest::Approx(1.0).epsilon(1e-6));
  CHECK(r.report.find("embed").origin == Origin::Teacher);
  CHECK(r.report.find("pos").origin == Origin::Random);
}

TEST_CASE("low-rank embedding at full width reproduces the Gram matrix") {
  const Checkpoint teacher = random_init(kTeacher, 8);
  ModelConfig s = kTeacher;
  const auto r = lowrank_embed_init(teacher, s, 1);
  const Matrix es = to_d(r.student.weights.embed), et = to_d(teacher.weights.embed);
  const Matrix gs = testutil::naive_matmul(es, transpose(es)), gt = testutil::naive_matmul(et, transpose(et));
  CHECK(max_abs_diff(gs, gt) <= 1e-6 * frobenius_norm(gt));
}

TEST_CASE("low-rank embedding attains the Eckart-Young optimum") {
  ModelConfig t{8, 1, 2, 4, 16, 50, 4};
  ModelConfig s{4, 1, 1, 4, 8, 50, 4};
  const Checkpoint teacher = random_init(t, 31);
  const Matrix et = to_d(teacher.weights.embed);
  const auto eig = sym_eig(testutil::naive_matmul(et, transpose(et)));
  double tail = 0.0;
  for (std::size_t i = 4; i < eig.eigenvalues.size(); ++i) tail += eig.eigenvalues[i] * eig.eigenvalues[i];

  const auto r = lowrank_embed_init(teacher, s, 2);
  const double best = gram_objective(to_d(r.student.weights.embed), et);
  CHECK(best == doctest::Approx(std::sqrt(tail)).epsilon(1e-5));

  const auto uni = uniform_init(teacher, s, select_layers(LayerStrategy::EmbedOnly, 1, 1), 2);
  CHECK(best < gram_objective(to_d(uni.student.weights.embed), et));
  const double scale = frobenius_norm(et) / std::sqrt(50.0 * 4.0);
  for (std::uint64_t seed = 0; seed < 100; ++seed)
    CHECK(best <= gram_objective(testutil::random_matrix(50, 4, 1000 + seed, scale), et));
}

TEST_CASE("gram objective matches the direct m x m computation") {
  const Matrix a = testutil::random_matrix(30, 3, 1), b = testutil::random_matrix(30, 5, 2);
  const Matrix d = testutil::naive_matmul(a, transpose(a));
  const Matrix e = testutil::naive_matmul(b, transpose(b));
  double s = 0.0;
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t j = 0; j < 30; ++j) s += (d(i, j) - e(i, j)) * (d(i, j) - e(i, j));
  CHECK(gram_objective(a, b) == doctest::Approx(std::sqrt(s)).epsilon(1e-10));
  CHECK(gram_objective(b, b) < 1e-6);
  CHECK_THROWS_AS(gram_objective(a, testutil::random_matrix(29, 5, 3)), ShapeError);
}

TEST_CASE("uniform selection with identical configs copies the teacher") {
  const Checkpoint teacher = noisy_teacher(kTeacher, 5);
  UniformOptions head;
  head.include_head = true;
  const auto r = uniform_init(teacher, kTeacher, select_layers(LayerStrategy::FirstN, 4, 4), 77, head);
  CHECK(r.student.weights.embed == teacher.weights.embed);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& a = r.student.weights.blocks[i];
    const auto& b = teacher.weights.blocks[i];
    CHECK((a.wq == b.wq && a.wk == b.wk && a.wv == b.wv && a.wo == b.wo && a.w1 == b.w1 && a.w2 == b.w2 &&
           a.b1 == b.b1 && a.b2 == b.b2 && a.norm1 == b.norm1 && a.norm2 == b.norm2));
  }
  CHECK(r.student.weights.unembed == teacher.weights.unembed);
  const TokenBatch batch = batch_for(kTeacher, 1);
  CHECK(forward(teacher, batch).logits == forward(r.student, batch).logits);

  // By default the head is left to random_init, like every other initializer.
  const auto plain = uniform_init(teacher, kTeacher, select_layers(LayerStrategy::FirstN, 4, 4), 77);
  CHECK(plain.student.weights.unembed == random_init(kTeacher, 77).weights.unembed);
  CHECK(plain.report.find("unembed").origin == Origin::Random);
  CHECK(plain.report.find("final_norm").origin == Origin::Constant);
  CHECK(plain.student.weights.blocks[3].w1 == teacher.weights.blocks[3].w1);
}

TEST_CASE("uniform selection examples") {
  // FirstN on 4 of 8 layers takes teacher blocks 0..3.
  ModelConfig deep = kTeacher;
  deep.num_layers = 8;
  ModelConfig half = kTeacher;
  const Checkpoint teacher = noisy_teacher(deep, 6);
  const auto r = uniform_init(teacher, half, select_layers(LayerStrategy::FirstN, 4, 8), 1);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.student.weights.blocks[i].w1 == teacher.weights.blocks[i].w1);

  // A 5 x 6 embedding cut to 3 columns keeps columns 0, 2, 5.
  const ModelConfig t{6, 1, 2, 3, 4, 5, 2};
  const ModelConfig s{3, 1, 1, 3, 4, 5, 2};
  Checkpoint small = random_init(t, 2);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 6; ++j) small.weights.embed(i, j) = static_cast<float>(10 * i + j);
  const auto u = uniform_init(small, s, select_layers(LayerStrategy::EmbedOnly, 1, 1), 1);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(u.student.weights.embed(i, 0) == 10.0f * i);
    CHECK(u.student.weights.embed(i, 1) == 10.0f * i + 2);
    CHECK(u.student.weights.embed(i, 2) == 10.0f * i + 5);
  }
}

TEST_CASE("incompatible configurations are rejected with the violated inequality") {
  const Checkpoint teacher = random_init(kStudent, 1);
  try {
    guide_init(teacher, ModelConfig{8, 2, 2, 4, 8, 11, 6}, select_layers(LayerStrategy::TopK, 2, 2, 1), 1);
    FAIL("expected ConfigMismatch");
  } catch (const ConfigMismatch& e) {
    CHECK(std::string(e.what()).find("d_S <= d_T violated: 8 > 4") != std::string::npos);
  }
  CHECK_THROWS_AS(check_transfer_compatible(kTeacher, ModelConfig{4, 2, 1, 4, 8, 12, 6}), ConfigMismatch);
  CHECK_THROWS_AS(check_transfer_compatible(kTeacher, ModelConfig{4, 2, 1, 4, 8, 11, 7}), ConfigMismatch);
  CHECK_THROWS_AS(check_transfer_compatible(kTeacher, ModelConfig{4, 5, 1, 4, 8, 11, 6}), ConfigMismatch);
  CHECK_THROWS_AS(check_transfer_compatible(kTeacher, ModelConfig{4, 2, 1, 4, 32, 11, 6}), ConfigMismatch);
  CHECK_NOTHROW(check_transfer_compatible(kTeacher, kStudent));
  // A layer mapping that does not fit the configs.
  const Checkpoint big = random_init(kTeacher, 1);
  CHECK_THROWS_AS(guide_init(big, kStudent, select_layers(LayerStrategy::TopK, 4, 4, 2), 1), ConfigMismatch);
  CHECK_THROWS_AS(uniform_init(big, kStudent, select_layers(LayerStrategy::FirstN, 4, 4), 1), ConfigMismatch);
}

TEST_CASE("initializers are deterministic and produce valid checkpoints") {
  const Checkpoint teacher = noisy_teacher(kTeacher, 12);
  const auto layers = select_layers(LayerStrategy::TopK, 2, 4, 2);
  const auto g1 = guide_init(teacher, kStudent, layers, 3), g2 = guide_init(teacher, kStudent, layers, 3);
  CHECK(content_hash(g1.student) == content_hash(g2.student));
  CHECK(content_hash(g1.student) != content_hash(guide_init(teacher, kStudent, layers, 4).student));
  const auto u1 = uniform_init(teacher, kStudent, layers, 3), u2 = uniform_init(teacher, kStudent, layers, 3);
  CHECK(content_hash(u1.student) == content_hash(u2.student));
  const auto l1 = lowrank_embed_init(teacher, kStudent, 3), l2 = lowrank_embed_init(teacher, kStudent, 3);
  CHECK(content_hash(l1.student) == content_hash(l2.student));
  const auto r1 = random_init_with_report(kStudent, 3);
  CHECK(r1.student == random_init(kStudent, 3));
  for (const auto* c : {&g1.student, &u1.student, &l1.student, &r1.student}) {
    CHECK_NOTHROW(c->validate());
    CHECK(c->config == kStudent);
    CHECK(c->step == 0);
  }
  CHECK(g1.student.tokenizer_fingerprint == teacher.tokenizer_fingerprint);
}
