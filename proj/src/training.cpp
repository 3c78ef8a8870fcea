#include "guide/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>

#include "guide/transformer.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace guide {

namespace {

// Activations are freed and reallocated every step. By default glibc hands
// large blocks back to the kernel, so each step pays for fresh page faults;
// keeping them on the heap is several times faster for the model sizes here.
void keep_heap_resident() {
#ifdef __GLIBC__
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  });
#endif
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Decoupled-weight-decay Adam over a Weights<float> parameter set. Decay
// applies to matrices only; biases and norm scales are exempt.
class AdamW {
 public:
  AdamW(const Weights<float>& shape, const TrainConfig& cfg) : cfg_(cfg) {
    shape.for_each([&](const std::string&, const MatrixF& t) {
      m_.emplace_back(t.rows(), t.cols());
      v_.emplace_back(t.rows(), t.cols());
      decay_.push_back(t.rows() > 1);
    });
  }

  void step(Weights<float>& w, const Weights<float>& g, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    std::vector<const MatrixF*> grads;
    g.for_each([&](const std::string&, const MatrixF& t) { grads.push_back(&t); });
    std::size_t i = 0;
    w.for_each([&](const std::string&, MatrixF& p) {
      auto& m = m_[i];
      auto& v = v_[i];
      const MatrixF& gr = *grads[i];
      const auto wd = static_cast<float>(decay_[i] ? lr * cfg_.weight_decay : 0.0);
      const auto step_size = static_cast<float>(lr / bc1);
      const auto inv_bc2 = static_cast<float>(1.0 / bc2);
      const auto eps = static_cast<float>(cfg_.eps);
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = b1 * m[j] + (1.0f - b1) * gr[j];
        v[j] = b2 * v[j] + (1.0f - b2) * gr[j] * gr[j];
        p[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps) + wd * p[j];
      }
      ++i;
    });
  }

 private:
  const TrainConfig& cfg_;
  std::vector<MatrixF> m_, v_;
  std::vector<bool> decay_;
  std::size_t t_ = 0;
};

// Scales gradients to the clip norm; returns true when clipping happened.
bool clip_gradients(Weights<float>& g, double max_norm) {
  double sq = 0.0;
  g.for_each([&](const std::string&, const MatrixF& t) {
    for (float x : t.values()) sq += static_cast<double>(x) * static_cast<double>(x);
  });
  const double norm = std::sqrt(sq);
  if (!(norm > max_norm)) return false;
  const auto scale = static_cast<float>(max_norm / norm);
  g.for_each([&](const std::string&, MatrixF& t) {
    for (float& x : t.values()) x *= scale;
  });
  return true;
}

struct StepLoss {
  double total, pred, distill;
};

StepLoss forward_loss(const Checkpoint& student, const Checkpoint* teacher, double alpha, const TokenBatch& batch) {
  const auto logits = forward(student, batch).logits;
  StepLoss out{0.0, next_token_loss(logits, batch), 0.0};
  if (teacher && alpha != 0.0) out.distill = distill_loss(logits, forward(*teacher, batch).logits, batch);
  out.total = out.pred + alpha * out.distill;
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (steps < 1) throw InvalidInput("train: steps must be at least 1");
  if (eval_every < 1) throw InvalidInput("train: eval_every must be at least 1");
  if (eval_batches < 1) throw InvalidInput("train: eval_batches must be at least 1");
  if (distill_alpha && (*distill_alpha < 0.0 || *distill_alpha > 1.0)) {
    throw InvalidInput("train: distill alpha must be in [0, 1]");
  }
  if (lr < 0.0) throw InvalidInput("train: learning rate must be non-negative");
}

std::size_t TrainConfig::warmup() const {
  return warmup_steps ? *warmup_steps : steps / 20;
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  const std::size_t warm = cfg.warmup();
  if (step < warm) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double floor = cfg.lr * cfg.min_lr_ratio;
  const std::size_t span = cfg.steps > warm + 1 ? cfg.steps - warm - 1 : 1;
  const double progress = std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(span));
  return floor + (cfg.lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::string MetricLog::to_csv() const {
  std::ostringstream os;
  os << "step,train_loss,eval_loss,eval_ppl,clip_events\n";
  for (const auto& r : records) {
    os << r.step << "," << fmt(r.train_loss) << "," << fmt(r.eval_loss) << "," << fmt(r.eval_ppl) << ","
       << r.clip_events << "\n";
  }
  return os.str();
}

MetricLog MetricLog::from_csv(const std::string& text) {
  MetricLog log;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("step,train_loss,eval_loss,eval_ppl,clip_events", 0) != 0) {
    throw InvalidInput("metric log: unexpected CSV header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw InvalidInput("metric log: malformed row '" + line + "'");
    MetricRecord r;
    try {
      r.step = std::stoull(cells[0]);
      r.train_loss = std::stod(cells[1]);
      r.eval_loss = std::stod(cells[2]);
      r.eval_ppl = std::stod(cells[3]);
      r.clip_events = std::stoull(cells[4]);
    } catch (const std::exception&) {
      throw InvalidInput("metric log: malformed row '" + line + "'");
    }
    r.train_pred = r.train_loss;
    if (!log.records.empty() && r.step <= log.records.back().step) {
      throw InvalidInput("metric log: steps must increase");
    }
    log.records.push_back(r);
  }
  if (!log.records.empty()) log.clip_events = log.records.back().clip_events;
  return log;
}

void MetricLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << to_csv();
  if (!out) throw IoError("write failed for " + path.string());
}

MetricLog MetricLog::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_csv(ss.str());
}

std::string MetricLog::summary_line(const std::string& label) const {
  std::ostringstream os;
  os << "summary run=" << label;
  if (!records.empty()) {
    const auto& r = records.back();
    os << " final_step=" << r.step << " final_eval_loss=" << fmt(r.eval_loss) << " final_eval_ppl=" << fmt(r.eval_ppl)
       << " step0_eval_ppl=" << fmt(records.front().eval_ppl);
  }
  os << " alpha=" << (alpha ? fmt(*alpha) : std::string("none")) << " clip_events=" << clip_events;
  return os.str();
}

EvalResult evaluate(const Checkpoint& ckpt, BatchStream data, std::size_t num_batches) {
  if (num_batches == 0) throw InvalidInput("evaluate: num_batches must be positive");
  keep_heap_resident();
  double total = 0.0;
  for (std::size_t i = 0; i < num_batches; ++i) {
    const TokenBatch batch = data.next_batch();
    total += next_token_loss(forward(ckpt, batch).logits, batch);
  }
  const double nll = total / static_cast<double>(num_batches);
  return {nll, std::exp(nll)};
}

TrainResult train(const Checkpoint& student, const Checkpoint* teacher, BatchStream data, const BatchStream& eval_data,
                  const TrainConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  student.validate();
  keep_heap_resident();
  if (cfg.distill_alpha && !teacher) throw InvalidInput("train: distillation requires a teacher checkpoint");
  if (teacher) {
    if (teacher->config.vocab_size != student.config.vocab_size ||
        teacher->config.context_len != student.config.context_len) {
      throw ConfigMismatch("train: teacher and student must share vocabulary and context length");
    }
    if (teacher->tokenizer_fingerprint != student.tokenizer_fingerprint) {
      throw ConfigMismatch("train: teacher tokenizer '" + teacher->tokenizer_fingerprint + "' differs from student '" +
                           student.tokenizer_fingerprint + "'");
    }
  }
  if (data.context_len() > student.config.context_len) {
    throw ConfigMismatch("train: data windows are longer than the model context");
  }
  const double alpha = cfg.distill_alpha.value_or(0.0);
  // With alpha = 0 the teacher contributes nothing; skipping it keeps the
  // trajectory bitwise equal to a run without a teacher.
  const Checkpoint* active_teacher = alpha != 0.0 ? teacher : nullptr;

  TrainResult result{student, {}};
  Checkpoint& ckpt = result.checkpoint;
  MetricLog& log = result.log;
  log.alpha = cfg.distill_alpha;
  AdamW opt(ckpt.weights, cfg);

  auto record = [&](std::size_t step, StepLoss window) {
    const EvalResult ev = evaluate(ckpt, eval_data, cfg.eval_batches);
    MetricRecord r{step, window.total, window.pred, window.distill, ev.nll, ev.perplexity, log.clip_events};
    log.records.push_back(r);
    if (progress) progress(r);
  };

  {
    BatchStream peek = data;
    record(0, forward_loss(ckpt, active_teacher, alpha, peek.next_batch()));
  }

  StepLoss window{0.0, 0.0, 0.0};
  std::size_t window_steps = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const TokenBatch batch = data.next_batch();
    MatrixF teacher_logits;
    if (active_teacher) teacher_logits = forward(*active_teacher, batch).logits;
    LossResult<float> lg = loss_and_grads(ckpt.config, ckpt.weights, batch,
                                          active_teacher ? &teacher_logits : nullptr, alpha);
    if (!std::isfinite(lg.total)) {
      throw DivergenceError("train: non-finite loss at step " + std::to_string(step + 1), static_cast<long>(step + 1));
    }
    if (clip_gradients(lg.grads, cfg.clip_norm)) ++log.clip_events;
    opt.step(ckpt.weights, lg.grads, learning_rate(cfg, step));
    ++ckpt.step;

    window.total += lg.total;
    window.pred += lg.pred;
    window.distill += lg.distill;
    ++window_steps;
    const std::size_t done = step + 1;
    if (done % cfg.eval_every == 0 || done == cfg.steps) {
      const double n = static_cast<double>(window_steps);
      record(done, {window.total / n, window.pred / n, window.distill / n});
      window = {0.0, 0.0, 0.0};
      window_steps = 0;
    }
  }
  return result;
}

double gap_reduction(double student_ppl, double baseline_ppl, double teacher_ppl) {
  const double gap = baseline_ppl - teacher_ppl;
  if (!(gap > 0.0) || !std::isfinite(gap)) {
    throw InvalidInput("gap_reduction: baseline perplexity must exceed teacher perplexity");
  }
  return 100.0 * (baseline_ppl - student_ppl) / gap;
}

}  // namespace guide
