#include "guide/initializers.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <tuple>

namespace guide {

namespace {

std::string join(const IndexList& idx) {
  std::ostringstream os;
  os << "[";
  const std::size_t shown = idx.size() <= 8 ? idx.size() : 4;
  for (std::size_t i = 0; i < shown; ++i) os << (i ? "," : "") << idx[i];
  if (shown < idx.size()) os << ",...," << idx.back() << "] (" << idx.size() << ")";
  else os << "]";
  return os.str();
}

// Column (or row) indices of a head-major (h*l) axis restricted to heads H and
// per-head dims D_h, in student order.
IndexList head_major_indices(const IndexList& heads, const IndexList& head_dims, std::size_t teacher_head_dim) {
  IndexList out;
  out.reserve(heads.size() * head_dims.size());
  for (auto h : heads) {
    for (auto j : head_dims) out.push_back(h * teacher_head_dim + j);
  }
  return out;
}

MatrixF to_float(const Matrix& m) { return m.cast<float>(); }
Matrix to_double(const MatrixF& m) { return m.cast<double>(); }

// Tracks provenance so every student tensor is accounted for exactly once.
class ReportBuilder {
 public:
  ReportBuilder(std::string method, const ModelConfig& student) : report_{} {
    report_.method = std::move(method);
    for (const auto& name : tensor_names(student)) {
      const auto dot = name.rfind('.');
      const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
      const bool constant = leaf == "norm1" || leaf == "norm2" || leaf == "final_norm" || leaf == "b1" || leaf == "b2";
      entries_[name] = {name, constant ? Origin::Constant : Origin::Random,
                        constant ? (leaf.find("norm") != std::string::npos ? "ones" : "zeros") : "random_init"};
      order_.push_back(name);
    }
  }

  void teacher(const std::string& tensor, std::string detail) {
    auto it = entries_.find(tensor);
    if (it == entries_.end()) throw InvalidInput("report: unknown tensor " + tensor);
    it->second.origin = Origin::Teacher;
    it->second.detail = std::move(detail);
  }

  InitReport& report() { return report_; }

  InitReport finish() {
    for (const auto& name : order_) report_.tensors.push_back(entries_.at(name));
    return std::move(report_);
  }

 private:
  InitReport report_;
  std::map<std::string, TensorProvenance> entries_;
  std::vector<std::string> order_;
};

void check_layers(const LayerSelection& layers, const ModelConfig& teacher, const ModelConfig& student) {
  std::vector<bool> seen_s(student.num_layers, false), seen_t(teacher.num_layers, false);
  for (auto [s, t] : layers.mapping) {
    if (s >= student.num_layers || t >= teacher.num_layers) {
      throw ConfigMismatch("layer pair (" + std::to_string(s) + ", " + std::to_string(t) + ") out of range");
    }
    if (seen_s[s] || seen_t[t]) throw ConfigMismatch("layer mapping repeats a layer");
    seen_s[s] = seen_t[t] = true;
  }
}

// Uniform selection of a whole block. Scales of the teacher's norms are
// selected like any other per-feature tensor.
void select_block(const BlockParams<float>& src, BlockParams<float>& dst, const IndexSelection& ix,
                  const ModelConfig& teacher, ReportBuilder& rb, std::size_t s, std::size_t t) {
  const IndexList qkv = head_major_indices(ix.heads, ix.head_dim, teacher.head_dim);
  const std::string sp = "block." + std::to_string(s) + ".";
  const std::string tp = "teacher block." + std::to_string(t) + ".";
  dst.norm1 = gather(src.norm1, Axis::Cols, ix.model);
  rb.teacher(sp + "norm1", tp + "norm1[D]");
  for (auto [w, d, name] : {std::tuple{&src.wq, &dst.wq, "wq"}, std::tuple{&src.wk, &dst.wk, "wk"},
                            std::tuple{&src.wv, &dst.wv, "wv"}}) {
    *d = gather(gather(*w, Axis::Rows, ix.model), Axis::Cols, qkv);
    rb.teacher(sp + name, tp + name + "[D, (H, D_h)]");
  }
  dst.wo = gather(gather(src.wo, Axis::Rows, qkv), Axis::Cols, ix.model);
  rb.teacher(sp + "wo", tp + "wo[(H, D_h), D]");
  dst.norm2 = gather(src.norm2, Axis::Cols, ix.model);
  rb.teacher(sp + "norm2", tp + "norm2[D]");
  dst.w1 = gather(gather(src.w1, Axis::Rows, ix.model), Axis::Cols, ix.ffn);
  rb.teacher(sp + "w1", tp + "w1[D, F]");
  dst.b1 = gather(src.b1, Axis::Cols, ix.ffn);
  rb.teacher(sp + "b1", tp + "b1[F]");
  dst.w2 = gather(gather(src.w2, Axis::Rows, ix.ffn), Axis::Cols, ix.model);
  rb.teacher(sp + "w2", tp + "w2[F, D]");
  dst.b2 = gather(src.b2, Axis::Cols, ix.model);
  rb.teacher(sp + "b2", tp + "b2[D]");
}

Checkpoint student_base(const Checkpoint& teacher, const ModelConfig& student_config, std::uint64_t seed) {
  Checkpoint ckpt = random_init(student_config, seed);
  ckpt.tokenizer_fingerprint = teacher.tokenizer_fingerprint;
  return ckpt;
}

}  // namespace

std::string to_string(Origin o) {
  switch (o) {
    case Origin::Teacher:
      return "teacher";
    case Origin::Random:
      return "random";
    case Origin::Constant:
      return "constant";
  }
  return "unknown";
}

const TensorProvenance& InitReport::find(const std::string& tensor) const {
  for (const auto& t : tensors) {
    if (t.tensor == tensor) return t;
  }
  throw InvalidInput("no provenance for tensor " + tensor);
}

std::string InitReport::to_text() const {
  std::ostringstream os;
  os << "method: " << method << "\n";
  os << "layer strategy: " << to_string(layers.strategy);
  if (layers.strategy == LayerStrategy::TopK) os << " (k=" << layers.k << ")";
  os << "\nlayer mapping (student <- teacher):";
  if (layers.mapping.empty()) os << " none";
  for (auto [s, t] : layers.mapping) os << " " << s << "<-" << t;
  os << "\n";
  if (!indices.model.empty()) {
    os << "D   = " << join(indices.model) << "\n"
       << "D_h = " << join(indices.head_dim) << "\n"
       << "H   = " << join(indices.heads) << "\n"
       << "F   = " << join(indices.ffn) << "\n";
  }
  if (!residual_spectrum.empty()) {
    double energy = 0.0;
    for (double s : residual_spectrum) energy += s * s;
    os << "discarded singular values: " << residual_spectrum.size() << " (energy " << energy << ", largest "
       << residual_spectrum.front() << ")\n";
  }
  os << "tensors:\n";
  for (const auto& t : tensors) os << "  " << t.tensor << ": " << to_string(t.origin) << " (" << t.detail << ")\n";
  return os.str();
}

void check_transfer_compatible(const ModelConfig& teacher, const ModelConfig& student) {
  teacher.validate();
  student.validate();
  auto require = [](std::size_t s, std::size_t t, const char* name) {
    if (s > t) {
      throw ConfigMismatch(std::string(name) + "_S <= " + name + "_T violated: " + std::to_string(s) + " > " +
                           std::to_string(t));
    }
  };
  require(student.model_dim, teacher.model_dim, "d");
  require(student.num_heads, teacher.num_heads, "h");
  require(student.head_dim, teacher.head_dim, "l");
  require(student.ffn_dim, teacher.ffn_dim, "f");
  require(student.num_layers, teacher.num_layers, "n");
  if (student.vocab_size != teacher.vocab_size) {
    throw ConfigMismatch("vocabulary sizes differ: " + std::to_string(student.vocab_size) + " vs " +
                         std::to_string(teacher.vocab_size));
  }
  if (student.context_len != teacher.context_len) {
    throw ConfigMismatch("context lengths differ: " + std::to_string(student.context_len) + " vs " +
                         std::to_string(teacher.context_len));
  }
}

IndexSelection make_index_selection(const ModelConfig& teacher, const ModelConfig& student) {
  return {evenly_spaced_indices(student.model_dim, teacher.model_dim),
          evenly_spaced_indices(student.head_dim, teacher.head_dim),
          evenly_spaced_indices(student.num_heads, teacher.num_heads),
          evenly_spaced_indices(student.ffn_dim, teacher.ffn_dim)};
}

ProjectionMatrix pca_projection(const Checkpoint& teacher, std::size_t student_dim) {
  const Matrix stacked = vstack(to_double(teacher.weights.embed), to_double(teacher.weights.pos));
  SvdResult f = svd(stacked);
  if (student_dim > f.v.cols()) {
    throw ConfigMismatch("stacked embedding table has rank budget " + std::to_string(f.v.cols()) + " < d_S = " +
                         std::to_string(student_dim));
  }
  return {slice_cols(f.v, 0, student_dim), std::move(f.singular_values)};
}

InitResult guide_init(const Checkpoint& teacher, const ModelConfig& student_config, const LayerSelection& layers,
                      std::uint64_t seed, const GuideOptions& options) {
  const ModelConfig& tc = teacher.config;
  check_transfer_compatible(tc, student_config);
  check_layers(layers, tc, student_config);
  const std::size_t ds = student_config.model_dim;

  Checkpoint student = student_base(teacher, student_config, seed);
  ReportBuilder rb("guide", student_config);
  rb.report().layers = layers;
  rb.report().indices = make_index_selection(tc, student_config);
  const IndexSelection& ix = rb.report().indices;

  const ProjectionMatrix proj = pca_projection(teacher, ds);
  const Matrix& m = proj.m;
  rb.report().residual_spectrum.assign(proj.singular_values.begin() + static_cast<std::ptrdiff_t>(ds),
                                       proj.singular_values.end());

  student.weights.embed = to_float(matmul(to_double(teacher.weights.embed), m));
  rb.teacher("embed", "E_T * M");
  student.weights.pos = to_float(matmul(to_double(teacher.weights.pos), m));
  rb.teacher("pos", "P_T * M");

  for (auto [s, t] : layers.mapping) {
    const auto& src = teacher.weights.blocks[t];
    auto& dst = student.weights.blocks[s];
    if (s != 0) {
      select_block(src, dst, ix, tc, rb, s, t);
      continue;
    }
    // The first block reads the PCA-compressed embeddings: absorb M^T into
    // Q/K/V. The teacher's pre-attention norm scale cannot be expressed in the
    // PCA basis, so it is folded into the projections and the student scale
    // stays 1.
    const std::string tp = "teacher block." + std::to_string(t) + ".";
    const IndexList qkv = head_major_indices(ix.heads, ix.head_dim, tc.head_dim);
    const double gain = options.rescale_norm ? std::sqrt(static_cast<double>(tc.model_dim) / static_cast<double>(ds))
                                             : 1.0;
    Matrix mt_scaled = transpose(m);
    for (std::size_t r = 0; r < mt_scaled.rows(); ++r) {
      for (std::size_t c = 0; c < mt_scaled.cols(); ++c) mt_scaled(r, c) *= gain * src.norm1[c];
    }
    for (auto [w, d, name] : {std::tuple{&src.wq, &dst.wq, "wq"}, std::tuple{&src.wk, &dst.wk, "wk"},
                              std::tuple{&src.wv, &dst.wv, "wv"}}) {
      *d = to_float(gather(matmul(mt_scaled, to_double(*w)), Axis::Cols, qkv));
      rb.teacher("block.0." + std::string(name), "M^T diag(norm1) " + tp + name + "[:, (H, D_h)]");
    }
    dst.norm1 = MatrixF(1, ds, 1.0f);
    rb.teacher("block.0.norm1", "ones; " + tp + "norm1 folded into Q/K/V");
    dst.wo = gather(gather(src.wo, Axis::Rows, qkv), Axis::Cols, ix.model);
    rb.teacher("block.0.wo", tp + "wo reshaped (h, l, d)[H, D_h, D]");
    dst.norm2 = gather(src.norm2, Axis::Cols, ix.model);
    rb.teacher("block.0.norm2", tp + "norm2[D]");
    dst.w1 = gather(gather(src.w1, Axis::Rows, ix.model), Axis::Cols, ix.ffn);
    rb.teacher("block.0.w1", tp + "w1[D, F]");
    dst.b1 = gather(src.b1, Axis::Cols, ix.ffn);
    rb.teacher("block.0.b1", tp + "b1[F]");
    dst.w2 = gather(gather(src.w2, Axis::Rows, ix.ffn), Axis::Cols, ix.model);
    rb.teacher("block.0.w2", tp + "w2[F, D]");
    dst.b2 = gather(src.b2, Axis::Cols, ix.model);
    rb.teacher("block.0.b2", tp + "b2[D]");
  }
  student.validate();
  return {std::move(student), rb.finish()};
}

InitResult lowrank_embed_init(const Checkpoint& teacher, const ModelConfig& student_config, std::uint64_t seed) {
  check_transfer_compatible(teacher.config, student_config);
  const std::size_t ds = student_config.model_dim;
  Checkpoint student = student_base(teacher, student_config, seed);
  ReportBuilder rb("lowrank-embed", student_config);
  rb.report().layers = select_layers(LayerStrategy::EmbedOnly, student_config.num_layers, teacher.config.num_layers);

  // Eigenpairs of E_T E_T^T via the SVD of E_T: lambda_i = sigma_i^2 and the
  // eigenvectors are the left singular vectors.
  const SvdResult f = svd(to_double(teacher.weights.embed));
  if (ds > f.singular_values.size()) {
    throw ConfigMismatch("embedding table rank budget " + std::to_string(f.singular_values.size()) +
                         " < d_S = " + std::to_string(ds));
  }
  MatrixF embed(teacher.config.vocab_size, ds);
  for (std::size_t r = 0; r < embed.rows(); ++r) {
    for (std::size_t k = 0; k < ds; ++k) embed(r, k) = static_cast<float>(f.u(r, k) * f.singular_values[k]);
  }
  student.weights.embed = std::move(embed);
  rb.teacher("embed", "U_{d_S} Lambda_{d_S}^{1/2} of E_T E_T^T");
  rb.report().residual_spectrum.assign(f.singular_values.begin() + static_cast<std::ptrdiff_t>(ds),
                                       f.singular_values.end());
  student.validate();
  return {std::move(student), rb.finish()};
}

InitResult uniform_init(const Checkpoint& teacher, const ModelConfig& student_config, const LayerSelection& layers,
                        std::uint64_t seed, const UniformOptions& options) {
  const ModelConfig& tc = teacher.config;
  check_transfer_compatible(tc, student_config);
  check_layers(layers, tc, student_config);
  Checkpoint student = student_base(teacher, student_config, seed);
  ReportBuilder rb("uniform", student_config);
  rb.report().layers = layers;
  rb.report().indices = make_index_selection(tc, student_config);
  const IndexSelection& ix = rb.report().indices;

  student.weights.embed = gather(teacher.weights.embed, Axis::Cols, ix.model);
  rb.teacher("embed", "E_T[:, D]");
  student.weights.pos = gather(teacher.weights.pos, Axis::Cols, ix.model);
  rb.teacher("pos", "P_T[:, D]");
  for (auto [s, t] : layers.mapping) {
    select_block(teacher.weights.blocks[t], student.weights.blocks[s], ix, tc, rb, s, t);
  }
  if (options.include_head) {
    student.weights.final_norm = gather(teacher.weights.final_norm, Axis::Cols, ix.model);
    rb.teacher("final_norm", "teacher final_norm[D]");
    student.weights.unembed = gather(teacher.weights.unembed, Axis::Rows, ix.model);
    rb.teacher("unembed", "teacher unembed[D, :]");
  }
  student.validate();
  return {std::move(student), rb.finish()};
}

InitResult random_init_with_report(const ModelConfig& student_config, std::uint64_t seed) {
  Checkpoint student = random_init(student_config, seed);
  ReportBuilder rb("random", student_config);
  rb.report().layers.strategy = LayerStrategy::EmbedOnly;
  return {std::move(student), rb.finish()};
}

double gram_objective(const Matrix& student_embed, const Matrix& teacher_embed) {
  if (student_embed.rows() != teacher_embed.rows()) throw ShapeError("gram_objective: row counts differ");
  // ||A A^T - B B^T||_F^2 = ||A^T A||_F^2 + ||B^T B||_F^2 - 2 ||A^T B||_F^2
  const Matrix at = transpose(student_embed), bt = transpose(teacher_embed);
  auto sq = [](const Matrix& m) {
    double s = 0.0;
    for (double x : m.values()) s += x * x;
    return s;
  };
  const double v = sq(matmul(at, student_embed)) + sq(matmul(bt, teacher_embed)) - 2.0 * sq(matmul(at, teacher_embed));
  return std::sqrt(std::max(v, 0.0));
}

}  // namespace guide
