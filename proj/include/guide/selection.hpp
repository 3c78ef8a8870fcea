#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "guide/linalg.hpp"

namespace guide {

using IndexList = std::vector<std::size_t>;

// `count` indices spread evenly over [0, source - 1]: round(k * (source - 1) /
// (count - 1)) for k = 0..count-1, with exact halves rounded down. count == 1
// yields {0}. Throws InvalidInput when count < 1 or count > source.
IndexList evenly_spaced_indices(std::size_t count, std::size_t source);

// Index sets for slicing teacher tensors down to student shapes.
struct IndexSelection {
  IndexList model;     // D:   d_S of d_T
  IndexList head_dim;  // D_h: l_S of l_T
  IndexList heads;     // H:   h_S of h_T
  IndexList ffn;       // F:   f_S of f_T
};

// Minimal N-d row-major tensor used for multi-axis selection.
template <typename T>
struct NdTensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  std::size_t size() const;
  bool operator==(const NdTensor&) const = default;
};

// Gathers `indices[axis]` along every axis. Indices must be strictly increasing and in range.
template <typename T>
NdTensor<T> gather_nd(const NdTensor<T>& tensor, const std::vector<IndexList>& indices);

// Uniform selection: gathers evenly_spaced_indices(target[i], source[i]) along every axis.
template <typename T>
NdTensor<T> uniform_select(const NdTensor<T>& tensor, const std::vector<std::size_t>& target_shape);

// Matrix form of uniform_select.
template <typename T>
BasicMatrix<T> uniform_select(const BasicMatrix<T>& m, std::size_t rows, std::size_t cols);

enum class LayerStrategy { EmbedOnly, TopK, TopPlusLast, FirstN };

struct LayerSelection {
  LayerStrategy strategy = LayerStrategy::EmbedOnly;
  std::size_t k = 0;  // TopK only
  std::vector<std::pair<std::size_t, std::size_t>> mapping;  // (student layer, teacher layer)
};

// EmbedOnly -> {}; TopK(k) -> k student layers spread from layer 0, each paired
// with the teacher layer at the same fraction of depth (pair 0 is always
// (0, 0)); TopPlusLast -> {(0, 0), (n_S-1, n_T-1)}; FirstN -> {(i, i)}.
LayerSelection select_layers(LayerStrategy strategy, std::size_t student_layers, std::size_t teacher_layers,
                             std::size_t k = 1);

std::string to_string(LayerStrategy s);

}  // namespace guide
