#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "guide/checkpoint.hpp"
#include "guide/corpus.hpp"

namespace guide {

struct TrainConfig {
  std::size_t steps = 1000;
  double lr = 3e-3;                 // peak learning rate
  std::optional<std::size_t> warmup_steps;  // default: 5% of steps
  double min_lr_ratio = 0.1;        // cosine floor as a fraction of the peak
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::optional<double> distill_alpha;  // requires a teacher
  std::size_t eval_every = 100;
  std::size_t eval_batches = 8;

  void validate() const;
  std::size_t warmup() const;
};

// Linear warmup to the peak, then cosine decay to min_lr_ratio * peak at the last step.
double learning_rate(const TrainConfig& cfg, std::size_t step);

struct MetricRecord {
  std::size_t step = 0;
  double train_loss = 0.0;     // mean total loss over steps since the previous record
  double train_pred = 0.0;     // same window, next-token part
  double train_distill = 0.0;  // same window, distillation part
  double eval_loss = 0.0;
  double eval_ppl = 0.0;
  std::size_t clip_events = 0;  // cumulative

  bool operator==(const MetricRecord&) const = default;
};

struct MetricLog {
  std::vector<MetricRecord> records;
  std::optional<double> alpha;
  std::size_t clip_events = 0;

  bool operator==(const MetricLog&) const = default;

  // step,train_loss,eval_loss,eval_ppl,clip_events
  std::string to_csv() const;
  static MetricLog from_csv(const std::string& text);
  void write_csv(const std::filesystem::path& path) const;
  static MetricLog read_csv(const std::filesystem::path& path);
  std::string summary_line(const std::string& label) const;
};

struct EvalResult {
  double nll = 0.0;
  double perplexity = 0.0;
};

// Mean next-token NLL over every predicted position of `num_batches` batches
// drawn from a copy of `data`; perplexity = exp(nll).
EvalResult evaluate(const Checkpoint& ckpt, BatchStream data, std::size_t num_batches);

struct TrainResult {
  Checkpoint checkpoint;
  MetricLog log;
};

using ProgressFn = std::function<void(const MetricRecord&)>;

// Runs cfg.steps AdamW updates. With a teacher and a non-zero alpha the loss
// is L_pred + alpha * L_distill against the frozen teacher's logits. A record
// is logged at step 0, every eval_every steps and at the last step. Throws
// DivergenceError on a non-finite loss.
TrainResult train(const Checkpoint& student, const Checkpoint* teacher, BatchStream data, const BatchStream& eval_data,
                  const TrainConfig& cfg, const ProgressFn& progress = {});

// 100 * (baseline - student) / (baseline - teacher).
double gap_reduction(double student_ppl, double baseline_ppl, double teacher_ppl);

}  // namespace guide
