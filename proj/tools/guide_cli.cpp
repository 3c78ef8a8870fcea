// guide: initialize, train, evaluate and compare small transformer students.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "guide/initializers.hpp"
#include "guide/training.hpp"

namespace {

using namespace guide;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

struct ModelFlags {
  std::string preset;
  std::optional<std::size_t> model_dim, num_layers, num_heads, head_dim, ffn_dim, context_len;

  void add(CLI::App& app) {
    app.add_option("--preset", preset, "desk-teacher, desk-student or tiny")
        ->check(CLI::IsMember({"desk-teacher", "desk-student", "tiny"}));
    app.add_option("--model-dim", model_dim, "hidden size d");
    app.add_option("--num-layers", num_layers, "number of blocks n");
    app.add_option("--num-heads", num_heads, "attention heads h");
    app.add_option("--head-dim", head_dim, "per-head dimension");
    app.add_option("--ffn-dim", ffn_dim, "MLP hidden size f");
    app.add_option("--context-len", context_len, "maximum sequence length L");
  }

  ModelConfig resolve(std::size_t vocab) const {
    ModelConfig c{64, 4, 4, 16, 256, vocab, 64};
    if (preset == "desk-teacher") c = {128, 8, 8, 16, 512, vocab, 64};
    if (preset == "tiny") c = {8, 2, 2, 4, 16, vocab, 16};
    if (model_dim) c.model_dim = *model_dim;
    if (num_layers) c.num_layers = *num_layers;
    if (num_heads) c.num_heads = *num_heads;
    if (head_dim) c.head_dim = *head_dim;
    if (ffn_dim) c.ffn_dim = *ffn_dim;
    if (context_len) c.context_len = *context_len;
    c.validate();
    return c;
  }
};

struct DataFlags {
  std::vector<std::string> corpus;
  std::string vocab_file;
  std::size_t batch_size = 8;
  std::uint64_t data_seed = 0;

  void add(CLI::App& app, bool required) {
    auto* c = app.add_option("--corpus", corpus, "text files; a form-feed line separates documents");
    if (required) c->required();
    app.add_option("--vocab-file", vocab_file, "extra multi-byte tokens, one per line");
    app.add_option("--batch-size", batch_size, "sequences per batch")->check(CLI::PositiveNumber);
    app.add_option("--data-seed", data_seed, "shuffle seed for the training stream");
  }

  Tokenizer tokenizer() const { return vocab_file.empty() ? Tokenizer() : Tokenizer::from_vocab_file(vocab_file); }

  DataSplit split(const Tokenizer& tok, std::size_t context_len) const {
    std::vector<std::filesystem::path> paths(corpus.begin(), corpus.end());
    auto tokens = std::make_shared<const std::vector<std::int32_t>>(tokenize_files(paths, tok));
    return split_train_eval(tokens, context_len, batch_size, data_seed);
  }
};

LayerSelection parse_layers(const std::string& name, std::size_t k, const ModelConfig& student,
                            const ModelConfig& teacher) {
  const std::size_t ns = student.num_layers, nt = teacher.num_layers;
  if (name == "embed-only") return select_layers(LayerStrategy::EmbedOnly, ns, nt);
  if (name == "top") return select_layers(LayerStrategy::TopK, ns, nt, 1);
  if (name == "k-even") return select_layers(LayerStrategy::TopK, ns, nt, k);
  if (name == "top+last") return select_layers(LayerStrategy::TopPlusLast, ns, nt);
  if (name == "first-n") return select_layers(LayerStrategy::FirstN, ns, nt);
  throw InvalidInput("unknown layer strategy '" + name + "'");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------

struct InitCmd {
  std::string method = "guide";
  std::string teacher;
  std::string layers = "top";
  std::size_t k = 1;
  std::uint64_t seed = 0;
  std::string out;
  std::string vocab_file;
  bool no_rescale = false;
  bool with_head = false;
  ModelFlags model;

  void add(CLI::App& app) {
    app.add_option("--method", method, "random, guide, uniform or lowrank-embed")
        ->check(CLI::IsMember({"random", "guide", "uniform", "lowrank-embed"}));
    app.add_option("--teacher", teacher, "teacher checkpoint (all methods but random)");
    app.add_option("--layers", layers, "embed-only, top, top+last, k-even or first-n")
        ->check(CLI::IsMember({"embed-only", "top", "top+last", "k-even", "first-n"}));
    app.add_option("--k", k, "layer count for k-even");
    app.add_option("--seed", seed, "seed for randomly initialized tensors");
    app.add_option("-o,--out", out, "student checkpoint path")->required();
    app.add_option("--vocab-file", vocab_file, "tokenizer vocabulary (random init without a teacher)");
    app.add_flag("--no-rescale", no_rescale, "do not rescale the first transferred block by sqrt(d_T/d_S)");
    app.add_flag("--with-head", with_head, "uniform: also select final_norm and the output head");
    model.add(app);
  }

  int run() const {
    InitResult result;
    if (method == "random") {
      const Tokenizer tok = vocab_file.empty() ? Tokenizer() : Tokenizer::from_vocab_file(vocab_file);
      std::optional<Checkpoint> t;
      if (!teacher.empty()) t = load(teacher);
      result = random_init_with_report(model.resolve(t ? t->config.vocab_size : tok.vocab_size()), seed);
      result.student.tokenizer_fingerprint = t ? t->tokenizer_fingerprint : tok.fingerprint();
    } else {
      if (teacher.empty()) throw InvalidInput("--method " + method + " needs --teacher");
      const Checkpoint t = load(teacher);
      ModelConfig cfg = model.resolve(t.config.vocab_size);
      if (!model.context_len) cfg.context_len = t.config.context_len;
      if (method == "guide") {
        GuideOptions opt;
        opt.rescale_norm = !no_rescale;
        result = guide_init(t, cfg, parse_layers(layers, k, cfg, t.config), seed, opt);
      } else if (method == "uniform") {
        UniformOptions opt;
        opt.include_head = with_head;
        result = uniform_init(t, cfg, parse_layers(layers, k, cfg, t.config), seed, opt);
      } else {
        result = lowrank_embed_init(t, cfg, seed);
      }
    }
    save(result.student, out);
    write_text(out + ".report.txt", result.report.to_text());
    std::cout << "wrote " << out << " (" << to_string(result.student.config) << ")\n";
    return kExitOk;
  }
};

struct TrainCmd {
  std::string student, teacher, out, log, label;
  bool distill = false;
  double alpha = 0.5;
  TrainConfig cfg;
  std::size_t warmup = 0;
  DataFlags data;
  bool quiet = false;

  void add(CLI::App& app) {
    app.add_option("--student", student, "initial student checkpoint")->required();
    app.add_option("--teacher", teacher, "frozen teacher for distillation");
    app.add_flag("--distill", distill, "add alpha * L_distill against the teacher");
    app.add_option("--alpha", alpha, "distillation weight")->check(CLI::Range(0.0, 1.0));
    app.add_option("--steps", cfg.steps, "optimizer steps")->check(CLI::PositiveNumber);
    app.add_option("--lr", cfg.lr, "peak learning rate");
    app.add_option("--warmup", warmup, "warmup steps (default 5% of steps)");
    app.add_option("--weight-decay", cfg.weight_decay);
    app.add_option("--clip", cfg.clip_norm, "global gradient norm limit");
    app.add_option("--eval-every", cfg.eval_every)->check(CLI::PositiveNumber);
    app.add_option("--eval-batches", cfg.eval_batches)->check(CLI::PositiveNumber);
    app.add_option("-o,--out", out, "final checkpoint path")->required();
    app.add_option("--log", log, "metric CSV path (default <out>.csv)");
    app.add_option("--label", label, "run name for the summary line");
    app.add_flag("-q,--quiet", quiet, "only print the summary line");
    data.add(app, true);
  }

  int run() {
    const Checkpoint s = load(student);
    std::optional<Checkpoint> t;
    if (!teacher.empty()) t = load(teacher);
    if (distill && !t) throw InvalidInput("--distill needs --teacher");
    if (distill) cfg.distill_alpha = alpha;
    if (warmup) cfg.warmup_steps = warmup;
    const Tokenizer tok = data.tokenizer();
    if (tok.fingerprint() != s.tokenizer_fingerprint) {
      throw ConfigMismatch("corpus tokenizer '" + tok.fingerprint() + "' differs from checkpoint tokenizer '" +
                           s.tokenizer_fingerprint + "'");
    }
    DataSplit split = data.split(tok, s.config.context_len);
    ProgressFn progress;
    if (!quiet) {
      progress = [](const MetricRecord& r) {
        std::cerr << "step " << r.step << " train_loss " << fmt(r.train_loss) << " eval_ppl " << fmt(r.eval_ppl, 3)
                  << " clips " << r.clip_events << "\n";
      };
    }
    const TrainResult res = train(s, t ? &*t : nullptr, split.train, split.eval, cfg, progress);
    save(res.checkpoint, out);
    res.log.write_csv(log.empty() ? out + ".csv" : log);
    std::cout << res.log.summary_line(label.empty() ? std::filesystem::path(out).stem().string() : label) << "\n";
    return kExitOk;
  }
};

struct EvalCmd {
  std::string checkpoint;
  std::size_t batches = 8;
  DataFlags data;

  void add(CLI::App& app) {
    app.add_option("checkpoint", checkpoint, "checkpoint to evaluate")->required();
    app.add_option("--batches", batches, "held-out batches to average")->check(CLI::PositiveNumber);
    data.add(app, true);
  }

  int run() const {
    const Checkpoint c = load(checkpoint);
    const Tokenizer tok = data.tokenizer();
    if (tok.fingerprint() != c.tokenizer_fingerprint) {
      throw ConfigMismatch("corpus tokenizer '" + tok.fingerprint() + "' differs from checkpoint tokenizer '" +
                           c.tokenizer_fingerprint + "'");
    }
    const EvalResult r = evaluate(c, data.split(tok, c.config.context_len).eval, batches);
    char buf[128];
    std::snprintf(buf, sizeof buf, "nll=%.6f perplexity=%.6f", r.nll, r.perplexity);
    std::cout << buf << "\n";
    return kExitOk;
  }
};

struct CompareCmd {
  std::vector<std::string> runs;
  std::string baseline = "random";
  std::string teacher_log;
  std::optional<double> teacher_ppl;
  std::string curves;

  void add(CLI::App& app) {
    app.add_option("--run", runs, "label=metrics.csv; repeat a label to average seeds")->required();
    app.add_option("--baseline", baseline, "label of the baseline row for gap reduction");
    app.add_option("--teacher-log", teacher_log, "teacher metric CSV (final eval perplexity)");
    app.add_option("--teacher-ppl", teacher_ppl, "teacher perplexity, instead of --teacher-log");
    app.add_option("--curves", curves, "write mean eval perplexity per step and run to this CSV");
  }

  int run() const {
    std::vector<std::string> order;
    std::map<std::string, std::vector<MetricLog>> logs;
    for (const auto& r : runs) {
      const auto eq = r.find('=');
      if (eq == std::string::npos || eq == 0) throw InvalidInput("--run expects label=path, got '" + r + "'");
      const std::string label = r.substr(0, eq);
      if (!logs.count(label)) order.push_back(label);
      logs[label].push_back(MetricLog::read_csv(r.substr(eq + 1)));
      if (logs[label].back().records.empty()) throw InvalidInput("empty metric log for " + label);
    }
    auto mean_final = [&](const std::string& label) {
      double s = 0.0;
      for (const auto& l : logs.at(label)) s += l.records.back().eval_ppl;
      return s / static_cast<double>(logs.at(label).size());
    };
    std::optional<double> tppl = teacher_ppl;
    if (!teacher_log.empty()) {
      const MetricLog tl = MetricLog::read_csv(teacher_log);
      if (tl.records.empty()) throw InvalidInput("empty teacher log");
      tppl = tl.records.back().eval_ppl;
    }
    const bool have_gap = tppl && logs.count(baseline);
    const double base = have_gap ? mean_final(baseline) : 0.0;

    std::cout << std::left << std::setw(20) << "run" << std::right << std::setw(6) << "seeds" << std::setw(14)
              << "step0_ppl" << std::setw(14) << "final_ppl" << std::setw(16) << "gap_reduction" << "\n";
    for (const auto& label : order) {
      double s0 = 0.0;
      for (const auto& l : logs.at(label)) s0 += l.records.front().eval_ppl;
      s0 /= static_cast<double>(logs.at(label).size());
      const double fin = mean_final(label);
      std::cout << std::left << std::setw(20) << label << std::right << std::setw(6) << logs.at(label).size()
                << std::setw(14) << fmt(s0, 3) << std::setw(14) << fmt(fin, 3) << std::setw(16)
                << (have_gap ? fmt(gap_reduction(fin, base, *tppl), 2) + "%" : std::string("-")) << "\n";
    }
    if (tppl) std::cout << "teacher final_ppl " << fmt(*tppl, 3) << "\n";

    if (!curves.empty()) {
      std::ostringstream os;
      os << "step";
      for (const auto& label : order) os << "," << label;
      os << "\n";
      const auto& ref = logs.at(order.front()).front().records;
      for (std::size_t i = 0; i < ref.size(); ++i) {
        os << ref[i].step;
        for (const auto& label : order) {
          double s = 0.0;
          std::size_t n = 0;
          for (const auto& l : logs.at(label)) {
            if (i < l.records.size() && l.records[i].step == ref[i].step) {
              s += l.records[i].eval_ppl;
              ++n;
            }
          }
          os << ",";
          if (n) os << std::setprecision(10) << s / static_cast<double>(n);
        }
        os << "\n";
      }
      write_text(curves, os.str());
    }
    return kExitOk;
  }
};

struct InspectCmd {
  std::string checkpoint;

  void add(CLI::App& app) { app.add_option("checkpoint", checkpoint, "checkpoint to describe")->required(); }

  int run() const {
    const Checkpoint c = load(checkpoint);
    std::cout << "config " << to_string(c.config) << "\n"
              << "step " << c.step << "\n"
              << "tokenizer " << c.tokenizer_fingerprint << "\n";
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(content_hash(c)));
    std::cout << "content_hash " << hash << "\n";
    std::size_t params = 0;
    c.weights.for_each([&](const std::string& name, const MatrixF& t) {
      params += t.size();
      double sq = 0.0;
      for (float v : t.values()) sq += static_cast<double>(v) * v;
      std::cout << std::left << std::setw(18) << name << std::right << std::setw(6) << t.rows() << " x "
                << std::left << std::setw(6) << t.cols() << " rms " << fmt(std::sqrt(sq / static_cast<double>(t.size())), 5)
                << "\n";
    });
    std::cout << "parameters " << params << "\n";
    return kExitOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GUIDE: teacher-guided initialization of small transformer students"};
  app.set_config("--config", "", "key=value file; command-line flags take precedence");
  app.require_subcommand(1);

  InitCmd init;
  TrainCmd train_cmd;
  EvalCmd eval;
  CompareCmd compare;
  InspectCmd inspect;
  init.add(*app.add_subcommand("init", "create a student checkpoint and init report"));
  train_cmd.add(*app.add_subcommand("train", "train a checkpoint, optionally distilling from a teacher"));
  eval.add(*app.add_subcommand("eval", "held-out perplexity of a checkpoint"));
  compare.add(*app.add_subcommand("compare", "perplexity and gap-reduction table over metric logs"));
  inspect.add(*app.add_subcommand("inspect", "print checkpoint header and tensor shapes"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (app.got_subcommand("init")) return init.run();
    if (app.got_subcommand("train")) return train_cmd.run();
    if (app.got_subcommand("eval")) return eval.run();
    if (app.got_subcommand("compare")) return compare.run();
    if (app.got_subcommand("inspect")) return inspect.run();
  } catch (const NumericalFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
