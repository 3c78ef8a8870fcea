#include "guide/transformer.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace guide {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<Mat<T>> mv(BasicMatrix<T>& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

template <typename T>
Eigen::Map<const Mat<T>> mv(const BasicMatrix<T>& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <typename T>
T gelu_t(T x) {
  const T inner = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x);
  return static_cast<T>(0.5) * x * (T{1} + std::tanh(inner));
}

template <typename T>
Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> flat(BasicMatrix<T>& m) {
  return {m.data(), static_cast<Eigen::Index>(m.size())};
}

template <typename T>
Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> flat(const BasicMatrix<T>& m) {
  return {m.data(), static_cast<Eigen::Index>(m.size())};
}

// Row-wise RMS norm: y = x / sqrt(mean(x^2) + eps) * scale.
template <typename T>
struct NormCache {
  BasicMatrix<T> xhat;
  std::vector<T> rinv;
};

template <typename T>
BasicMatrix<T> rms_norm(const BasicMatrix<T>& x, const BasicMatrix<T>& scale, NormCache<T>& cache) {
  const std::size_t rows = x.rows(), d = x.cols();
  cache.xhat = BasicMatrix<T>(rows, d);
  cache.rinv.resize(rows);
  BasicMatrix<T> y(rows, d);
  const auto X = mv(x);
  auto Xh = mv(cache.xhat);
  auto Y = mv(y);
  const auto s = mv(scale).row(0).array();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto i = static_cast<Eigen::Index>(r);
    const double ms = static_cast<double>(X.row(i).squaredNorm()) / static_cast<double>(d);
    const T rinv = static_cast<T>(1.0 / std::sqrt(ms + kRmsNormEps));
    cache.rinv[r] = rinv;
    Xh.row(i) = X.row(i) * rinv;
    Y.row(i).array() = Xh.row(i).array() * s;
  }
  return y;
}

// Accumulates d scale into dscale and returns dx.
template <typename T>
BasicMatrix<T> rms_norm_backward(const BasicMatrix<T>& dy, const BasicMatrix<T>& scale, const NormCache<T>& cache,
                                 BasicMatrix<T>& dscale) {
  const std::size_t rows = dy.rows(), d = dy.cols();
  BasicMatrix<T> dx(rows, d);
  const auto dY = mv(dy);
  const auto Xh = mv(cache.xhat);
  auto dX = mv(dx);
  const auto s = mv(scale).row(0).array();
  mv(dscale).row(0).array() += (dY.array() * Xh.array()).colwise().sum();
  Eigen::Array<T, 1, Eigen::Dynamic> dxhat(static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < rows; ++r) {
    const auto i = static_cast<Eigen::Index>(r);
    dxhat = dY.row(i).array() * s;
    const T mean = (dxhat * Xh.row(i).array()).sum() / static_cast<T>(d);
    dX.row(i).array() = cache.rinv[r] * (dxhat - Xh.row(i).array() * mean);
  }
  return dx;
}

template <typename T>
struct BlockCache {
  NormCache<T> norm1;
  BasicMatrix<T> a;  // normed block input
  BasicMatrix<T> q, k, v;
  BasicMatrix<T> attn;
  BasicMatrix<T> hcat;
  BasicMatrix<T> o;
  NormCache<T> norm2;
  BasicMatrix<T> c;
  BasicMatrix<T> u;
  BasicMatrix<T> tanh_inner;  // tanh term of the GELU, reused by backward
  BasicMatrix<T> act;
  BasicMatrix<T> out;
};

template <typename T>
void gelu_forward(BlockCache<T>& bc) {
  const T c = static_cast<T>(kGeluC), a = static_cast<T>(kGeluA);
  bc.tanh_inner = BasicMatrix<T>(bc.u.rows(), bc.u.cols());
  bc.act = BasicMatrix<T>(bc.u.rows(), bc.u.cols());
  const auto u = flat(bc.u);
  auto th = flat(bc.tanh_inner);
  th = (c * (u + a * u.cube())).tanh();
  flat(bc.act) = static_cast<T>(0.5) * u * (T{1} + th);
}

// du *= gelu'(u)
template <typename T>
void gelu_backward(const BlockCache<T>& bc, BasicMatrix<T>& du) {
  const T c = static_cast<T>(kGeluC), a3 = static_cast<T>(3.0 * kGeluA);
  const auto u = flat(bc.u);
  const auto th = flat(bc.tanh_inner);
  flat(du) *= static_cast<T>(0.5) * (T{1} + th) +
              static_cast<T>(0.5) * u * (T{1} - th.square()) * c * (T{1} + a3 * u.square());
}

template <typename T>
struct Cache {
  BasicMatrix<T> x0;
  std::vector<BlockCache<T>> blocks;
  BasicMatrix<T> x_final;
  NormCache<T> norm_final;
  BasicMatrix<T> h_final;
  BasicMatrix<T> logits;
};

void check_shape(const char* what, std::size_t r, std::size_t c, std::size_t er, std::size_t ec) {
  if (r != er || c != ec) {
    throw ShapeError(std::string(what) + " is " + std::to_string(r) + "x" + std::to_string(c) + ", expected " +
                     std::to_string(er) + "x" + std::to_string(ec));
  }
}

template <typename T>
void check_weights(const ModelConfig& cfg, const Weights<T>& w) {
  if (w.blocks.size() != cfg.num_layers) {
    throw ShapeError("weights have " + std::to_string(w.blocks.size()) + " blocks, config says " +
                     std::to_string(cfg.num_layers));
  }
  const auto shapes = tensor_shapes(cfg);
  std::size_t i = 0;
  w.for_each([&](const std::string& name, const BasicMatrix<T>& t) {
    check_shape(name.c_str(), t.rows(), t.cols(), shapes[i].first, shapes[i].second);
    ++i;
  });
}

template <typename T>
void attention_forward(const ModelConfig& cfg, std::size_t batch, std::size_t len, BlockCache<T>& bc) {
  const std::size_t h = cfg.num_heads, l = cfg.head_dim;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(l)));
  bc.attn = BasicMatrix<T>(batch * h * len, len);
  bc.hcat = BasicMatrix<T>(batch * len, h * l);
  auto Q = mv(bc.q);
  auto K = mv(bc.k);
  auto V = mv(bc.v);
  auto Hc = mv(bc.hcat);
  auto At = mv(bc.attn);
  const auto L = static_cast<Eigen::Index>(len);
  const auto lh = static_cast<Eigen::Index>(l);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b * len);
    for (std::size_t head = 0; head < h; ++head) {
      const auto c0 = static_cast<Eigen::Index>(head * l);
      auto A = At.block(static_cast<Eigen::Index>((b * h + head) * len), 0, L, L);
      A.noalias() = Q.block(r0, c0, L, lh) * K.block(r0, c0, L, lh).transpose();
      A *= scale;
      for (Eigen::Index t = 0; t + 1 < L; ++t) A.row(t).tail(L - t - 1).setConstant(-std::numeric_limits<T>::infinity());
      A.array().colwise() -= A.rowwise().maxCoeff().array();
      A = A.array().exp();
      A.array().colwise() /= A.rowwise().sum().array();
      Hc.block(r0, c0, L, lh).noalias() = A * V.block(r0, c0, L, lh);
    }
  }
}

template <typename T>
void attention_backward(const ModelConfig& cfg, std::size_t batch, std::size_t len, const BlockCache<T>& bc,
                        const BasicMatrix<T>& dhcat, BasicMatrix<T>& dq, BasicMatrix<T>& dk, BasicMatrix<T>& dv) {
  const std::size_t h = cfg.num_heads, l = cfg.head_dim;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(l)));
  const auto L = static_cast<Eigen::Index>(len);
  const auto lh = static_cast<Eigen::Index>(l);
  auto Q = mv(bc.q);
  auto K = mv(bc.k);
  auto V = mv(bc.v);
  auto At = mv(bc.attn);
  auto dH = mv(dhcat);
  auto dQ = mv(dq);
  auto dK = mv(dk);
  auto dV = mv(dv);
  Mat<T> dA(L, L);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b * len);
    for (std::size_t head = 0; head < h; ++head) {
      const auto c0 = static_cast<Eigen::Index>(head * l);
      const auto A = At.block(static_cast<Eigen::Index>((b * h + head) * len), 0, L, L);
      const auto dHh = dH.block(r0, c0, L, lh);
      dA.noalias() = dHh * V.block(r0, c0, L, lh).transpose();
      dV.block(r0, c0, L, lh).noalias() = A.transpose() * dHh;
      // Softmax backward; masked entries have A = 0 and stay 0.
      dA.array() = A.array() * (dA.array().colwise() - (A.array() * dA.array()).rowwise().sum()) * scale;
      dQ.block(r0, c0, L, lh).noalias() = dA * K.block(r0, c0, L, lh);
      dK.block(r0, c0, L, lh).noalias() = dA.transpose() * Q.block(r0, c0, L, lh);
    }
  }
}

template <typename T>
void add_bias(BasicMatrix<T>& x, const BasicMatrix<T>& bias) {
  mv(x).rowwise() += mv(bias).row(0);
}

template <typename T>
void add_colsum(BasicMatrix<T>& acc, const BasicMatrix<T>& x) {
  mv(acc).row(0) += mv(x).colwise().sum();
}

template <typename T>
Cache<T> run_forward(const ModelConfig& cfg, const Weights<T>& w, const TokenBatch& batch) {
  cfg.validate();
  validate_batch(cfg, batch);
  check_weights(cfg, w);
  const std::size_t B = batch.batch, L = batch.length, d = cfg.model_dim;
  const std::size_t rows = B * L;

  Cache<T> cache;
  cache.x0 = BasicMatrix<T>(rows, d);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < L; ++t) {
      auto xr = cache.x0.row(b * L + t);
      const auto er = w.embed.row(static_cast<std::size_t>(batch.at(b, t)));
      const auto pr = w.pos.row(t);
      for (std::size_t j = 0; j < d; ++j) xr[j] = er[j] + pr[j];
    }
  }

  BasicMatrix<T> x = cache.x0;
  cache.blocks.resize(cfg.num_layers);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const auto& bw = w.blocks[i];
    auto& bc = cache.blocks[i];
    bc.a = rms_norm(x, bw.norm1, bc.norm1);
    bc.q = BasicMatrix<T>(rows, bw.wq.cols());
    bc.k = BasicMatrix<T>(rows, bw.wk.cols());
    bc.v = BasicMatrix<T>(rows, bw.wv.cols());
    mv(bc.q).noalias() = mv(bc.a) * mv(bw.wq);
    mv(bc.k).noalias() = mv(bc.a) * mv(bw.wk);
    mv(bc.v).noalias() = mv(bc.a) * mv(bw.wv);
    attention_forward(cfg, B, L, bc);
    bc.o = BasicMatrix<T>(rows, d);
    mv(bc.o).noalias() = mv(bc.hcat) * mv(bw.wo);
    bc.c = rms_norm(bc.o, bw.norm2, bc.norm2);
    bc.u = BasicMatrix<T>(rows, cfg.ffn_dim);
    mv(bc.u).noalias() = mv(bc.c) * mv(bw.w1);
    add_bias(bc.u, bw.b1);
    gelu_forward(bc);
    bc.out = BasicMatrix<T>(rows, d);
    mv(bc.out).noalias() = mv(bc.act) * mv(bw.w2);
    add_bias(bc.out, bw.b2);
    flat(x) += flat(bc.out);
  }
  cache.x_final = std::move(x);
  cache.h_final = rms_norm(cache.x_final, w.final_norm, cache.norm_final);
  cache.logits = BasicMatrix<T>(rows, cfg.vocab_size);
  mv(cache.logits).noalias() = mv(cache.h_final) * mv(w.unembed);
  return cache;
}

template <typename T>
using RowArray = Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>>;

template <typename T>
RowArray<T> row_array(std::span<const T> row) {
  return {row.data(), static_cast<Eigen::Index>(row.size())};
}

// log-sum-exp of a row, max-subtracted.
template <typename T>
double log_sum_exp(std::span<const T> row) {
  const auto r = row_array(row);
  const T mx = r.maxCoeff();
  return static_cast<double>(mx) + std::log(static_cast<double>((r - mx).exp().sum()));
}

std::size_t predicted_positions(const TokenBatch& batch) {
  if (batch.length < 2) throw InvalidInput("loss needs sequences of at least two tokens");
  return batch.batch * (batch.length - 1);
}

}  // namespace

void validate_batch(const ModelConfig& cfg, const TokenBatch& batch) {
  if (batch.batch == 0 || batch.length == 0) throw ShapeError("empty token batch");
  if (batch.length > cfg.context_len) {
    throw ShapeError("batch length " + std::to_string(batch.length) + " exceeds context length " +
                     std::to_string(cfg.context_len));
  }
  if (batch.ids.size() != batch.batch * batch.length) throw ShapeError("token batch size mismatch");
  for (auto id : batch.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw ShapeError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(cfg.vocab_size));
    }
  }
}

double gelu(double x) { return gelu_t(x); }

template <typename T>
ForwardTrace<T> forward(const ModelConfig& cfg, const Weights<T>& weights, const TokenBatch& batch,
                        bool capture_trace) {
  Cache<T> cache = run_forward(cfg, weights, batch);
  ForwardTrace<T> trace;
  trace.logits = std::move(cache.logits);
  if (!capture_trace) return trace;
  trace.input_embeddings = std::move(cache.x0);
  for (auto& bc : cache.blocks) {
    trace.queries.push_back(std::move(bc.q));
    trace.keys.push_back(std::move(bc.k));
    trace.values.push_back(std::move(bc.v));
    trace.attention.push_back(std::move(bc.attn));
    trace.block_outputs.push_back(std::move(bc.out));
  }
  trace.final_hidden = std::move(cache.x_final);
  return trace;
}

ForwardTrace<float> forward(const Checkpoint& ckpt, const TokenBatch& batch, bool capture_trace) {
  return forward(ckpt.config, ckpt.weights, batch, capture_trace);
}

template <typename T>
double next_token_loss(const BasicMatrix<T>& logits, const TokenBatch& batch, BasicMatrix<T>* dlogits,
                       double scale) {
  const std::size_t count = predicted_positions(batch);
  if (logits.rows() != batch.batch * batch.length) throw ShapeError("logits rows do not match batch");
  const std::size_t m = logits.cols();
  if (dlogits) check_shape("dlogits", dlogits->rows(), dlogits->cols(), logits.rows(), m);
  double total = 0.0;
  const double g = scale / static_cast<double>(count);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t + 1 < batch.length; ++t) {
      const std::size_t r = b * batch.length + t;
      const auto row = logits.row(r);
      const auto target = static_cast<std::size_t>(batch.at(b, t + 1));
      const double lse = log_sum_exp(row);
      total += lse - static_cast<double>(row[target]);
      if (dlogits) {
        auto dr = dlogits->row(r);
        Eigen::Map<Eigen::Array<T, 1, Eigen::Dynamic>>(dr.data(), static_cast<Eigen::Index>(m)) +=
            static_cast<T>(g) * (row_array(row) - static_cast<T>(lse)).exp();
        dr[target] -= static_cast<T>(g);
      }
    }
  }
  return total / static_cast<double>(count);
}

template <typename T>
double distill_loss(const BasicMatrix<T>& student_logits, const BasicMatrix<T>& teacher_logits,
                    const TokenBatch& batch, BasicMatrix<T>* dlogits, double scale) {
  const std::size_t count = predicted_positions(batch);
  check_shape("teacher logits", teacher_logits.rows(), teacher_logits.cols(), student_logits.rows(),
              student_logits.cols());
  if (student_logits.rows() != batch.batch * batch.length) throw ShapeError("logits rows do not match batch");
  const std::size_t m = student_logits.cols();
  if (dlogits) check_shape("dlogits", dlogits->rows(), dlogits->cols(), student_logits.rows(), m);
  double total = 0.0;
  const double g = scale / static_cast<double>(count);
  Eigen::Array<T, 1, Eigen::Dynamic> pt(static_cast<Eigen::Index>(m));
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t + 1 < batch.length; ++t) {
      const std::size_t r = b * batch.length + t;
      const auto srow = student_logits.row(r);
      const auto trow = teacher_logits.row(r);
      const double slse = log_sum_exp(srow);
      const double tlse = log_sum_exp(trow);
      pt = (row_array(trow) - static_cast<T>(tlse)).exp();
      total -= static_cast<double>((pt * (row_array(srow) - static_cast<T>(slse))).sum());
      if (dlogits) {
        auto dr = dlogits->row(r);
        Eigen::Map<Eigen::Array<T, 1, Eigen::Dynamic>>(dr.data(), static_cast<Eigen::Index>(m)) +=
            static_cast<T>(g) * ((row_array(srow) - static_cast<T>(slse)).exp() - pt);
      }
    }
  }
  return total / static_cast<double>(count);
}

template <typename T>
LossResult<T> loss_and_grads(const ModelConfig& cfg, const Weights<T>& w, const TokenBatch& batch,
                             const BasicMatrix<T>* teacher_logits, double alpha) {
  Cache<T> cache = run_forward(cfg, w, batch);
  const std::size_t B = batch.batch, L = batch.length, d = cfg.model_dim;
  const std::size_t rows = B * L;

  LossResult<T> result;
  BasicMatrix<T> dlogits(rows, cfg.vocab_size);
  result.pred = next_token_loss(cache.logits, batch, &dlogits, 1.0);
  if (teacher_logits) {
    result.distill = distill_loss(cache.logits, *teacher_logits, batch, &dlogits, alpha);
  }
  result.total = result.pred + alpha * result.distill;

  auto& g = result.grads;
  g = Weights<T>::shaped(cfg);
  g.for_each([](const std::string&, BasicMatrix<T>& t) { t.fill(T{0}); });

  mv(g.unembed).noalias() = mv(cache.h_final).transpose() * mv(dlogits);
  BasicMatrix<T> dh(rows, d);
  mv(dh).noalias() = mv(dlogits) * mv(w.unembed).transpose();
  BasicMatrix<T> dx = rms_norm_backward(dh, w.final_norm, cache.norm_final, g.final_norm);

  for (std::size_t ii = cfg.num_layers; ii-- > 0;) {
    const auto& bw = w.blocks[ii];
    auto& bg = g.blocks[ii];
    auto& bc = cache.blocks[ii];
    // dx is the gradient w.r.t. the block output; the residual passes it through unchanged.
    mv(bg.w2).noalias() += mv(bc.act).transpose() * mv(dx);
    add_colsum(bg.b2, dx);
    BasicMatrix<T> du(rows, cfg.ffn_dim);
    mv(du).noalias() = mv(dx) * mv(bw.w2).transpose();
    gelu_backward(bc, du);
    mv(bg.w1).noalias() += mv(bc.c).transpose() * mv(du);
    add_colsum(bg.b1, du);
    BasicMatrix<T> dc(rows, d);
    mv(dc).noalias() = mv(du) * mv(bw.w1).transpose();
    BasicMatrix<T> d_o = rms_norm_backward(dc, bw.norm2, bc.norm2, bg.norm2);
    mv(bg.wo).noalias() += mv(bc.hcat).transpose() * mv(d_o);
    BasicMatrix<T> dhcat(rows, bw.wo.rows());
    mv(dhcat).noalias() = mv(d_o) * mv(bw.wo).transpose();

    BasicMatrix<T> dq(rows, bw.wq.cols()), dk(rows, bw.wk.cols()), dv(rows, bw.wv.cols());
    attention_backward(cfg, B, L, bc, dhcat, dq, dk, dv);
    mv(bg.wq).noalias() += mv(bc.a).transpose() * mv(dq);
    mv(bg.wk).noalias() += mv(bc.a).transpose() * mv(dk);
    mv(bg.wv).noalias() += mv(bc.a).transpose() * mv(dv);
    BasicMatrix<T> da(rows, d);
    mv(da).noalias() = mv(dq) * mv(bw.wq).transpose();
    mv(da).noalias() += mv(dk) * mv(bw.wk).transpose();
    mv(da).noalias() += mv(dv) * mv(bw.wv).transpose();
    BasicMatrix<T> dx_in = rms_norm_backward(da, bw.norm1, bc.norm1, bg.norm1);
    flat(dx) += flat(dx_in);
  }

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < L; ++t) {
      const auto dr = dx.row(b * L + t);
      auto er = g.embed.row(static_cast<std::size_t>(batch.at(b, t)));
      auto pr = g.pos.row(t);
      for (std::size_t j = 0; j < d; ++j) {
        er[j] += dr[j];
        pr[j] += dr[j];
      }
    }
  }
  return result;
}

#define GUIDE_INSTANTIATE(T)                                                                                   \
  template ForwardTrace<T> forward(const ModelConfig&, const Weights<T>&, const TokenBatch&, bool);           \
  template LossResult<T> loss_and_grads(const ModelConfig&, const Weights<T>&, const TokenBatch&,             \
                                        const BasicMatrix<T>*, double);                                       \
  template double next_token_loss(const BasicMatrix<T>&, const TokenBatch&, BasicMatrix<T>*, double);         \
  template double distill_loss(const BasicMatrix<T>&, const BasicMatrix<T>&, const TokenBatch&, BasicMatrix<T>*, \
                               double);

GUIDE_INSTANTIATE(float)
GUIDE_INSTANTIATE(double)

#undef GUIDE_INSTANTIATE

}  // namespace guide
