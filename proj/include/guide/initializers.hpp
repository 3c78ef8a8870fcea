#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "guide/checkpoint.hpp"
#include "guide/selection.hpp"

namespace guide {

// d_T x d_S matrix of the top right-singular vectors of the stacked teacher
// embedding and positional tables.
struct ProjectionMatrix {
  Matrix m;
  std::vector<double> singular_values;  // full spectrum of the stacked table
};

ProjectionMatrix pca_projection(const Checkpoint& teacher, std::size_t student_dim);

enum class Origin { Teacher, Random, Constant };

struct TensorProvenance {
  std::string tensor;
  Origin origin = Origin::Random;
  std::string detail;
};

struct InitReport {
  std::string method;
  LayerSelection layers;
  IndexSelection indices;
  std::vector<TensorProvenance> tensors;  // one entry per student tensor, file order
  std::vector<double> residual_spectrum;  // singular values dropped by the d_S truncation

  const TensorProvenance& find(const std::string& tensor) const;
  std::string to_text() const;
};

struct InitResult {
  Checkpoint student;
  InitReport report;
};

// Throws ConfigMismatch naming the first violated inequality (d, h, l, f, n)
// or a vocabulary/context mismatch.
void check_transfer_compatible(const ModelConfig& teacher, const ModelConfig& student);

IndexSelection make_index_selection(const ModelConfig& teacher, const ModelConfig& student);

struct GuideOptions {
  // Multiply the first transferred block's Q/K/V by sqrt(d_T / d_S) so the
  // RMS-normed PCA input has the teacher's per-row norm.
  bool rescale_norm = true;
};

// PCA-bridged transfer of the embedding, positional table and the block
// paired with student layer 0; remaining mapped blocks by uniform selection;
// everything else (including the output head) drawn as in random_init(seed).
InitResult guide_init(const Checkpoint& teacher, const ModelConfig& student_config, const LayerSelection& layers,
                      std::uint64_t seed, const GuideOptions& options = {});

// E_S = U_{d_S} diag(sigma_{1..d_S}) from the SVD of E_T, i.e. the top
// eigenpairs of E_T E_T^T scaled by sqrt(lambda). All other tensors random.
InitResult lowrank_embed_init(const Checkpoint& teacher, const ModelConfig& student_config, std::uint64_t seed);

struct UniformOptions {
  // Also select final_norm and the output head. With identical configs and
  // all layers mapped the student is then an exact copy of the teacher.
  bool include_head = false;
};

// Uniform selection of the embedding, positional table and mapped blocks;
// unmapped blocks and (by default) the output head random.
InitResult uniform_init(const Checkpoint& teacher, const ModelConfig& student_config, const LayerSelection& layers,
                        std::uint64_t seed, const UniformOptions& options = {});

// random_init wrapped with a report, so every method produces the same artifacts.
InitResult random_init_with_report(const ModelConfig& student_config, std::uint64_t seed);

// ||E E^T - E_T E_T^T||_F, computed through d x d products only.
double gram_objective(const Matrix& student_embed, const Matrix& teacher_embed);

std::string to_string(Origin o);

}  // namespace guide
