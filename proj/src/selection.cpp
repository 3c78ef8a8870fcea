#include "guide/selection.hpp"

#include <functional>
#include <numeric>

namespace guide {

IndexList evenly_spaced_indices(std::size_t count, std::size_t source) {
  if (count < 1) throw InvalidInput("evenly_spaced_indices: count must be at least 1");
  if (count > source) {
    throw InvalidInput("evenly_spaced_indices: cannot pick " + std::to_string(count) + " of " +
                       std::to_string(source));
  }
  if (count == 1) return {0};
  // Exact rational rounding: k*(source-1)/(count-1) with halves rounded down.
  const std::size_t den = count - 1;
  IndexList out(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t num = k * (source - 1);
    const std::size_t q = num / den;
    const std::size_t rem = num % den;
    out[k] = 2 * rem > den ? q + 1 : q;
  }
  return out;
}

template <typename T>
std::size_t NdTensor<T>::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
NdTensor<T> gather_nd(const NdTensor<T>& tensor, const std::vector<IndexList>& indices) {
  const std::size_t rank = tensor.shape.size();
  if (indices.size() != rank) throw ShapeError("gather_nd: one index list per axis is required");
  if (tensor.data.size() != tensor.size()) throw ShapeError("gather_nd: data does not match shape");
  NdTensor<T> out;
  out.shape.resize(rank);
  for (std::size_t a = 0; a < rank; ++a) {
    const auto& idx = indices[a];
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= tensor.shape[a]) throw ShapeError("gather_nd: index out of bounds on axis " + std::to_string(a));
      if (i > 0 && idx[i] <= idx[i - 1]) throw ShapeError("gather_nd: indices must be strictly increasing");
    }
    out.shape[a] = idx.size();
  }
  out.data.resize(out.size());
  if (out.data.empty()) return out;

  std::vector<std::size_t> strides(rank, 1);
  for (std::size_t a = rank; a-- > 1;) strides[a - 1] = strides[a] * tensor.shape[a];
  std::vector<std::size_t> pos(rank, 0);
  for (std::size_t flat = 0; flat < out.data.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t a = 0; a < rank; ++a) src += indices[a][pos[a]] * strides[a];
    out.data[flat] = tensor.data[src];
    for (std::size_t a = rank; a-- > 0;) {
      if (++pos[a] < out.shape[a]) break;
      pos[a] = 0;
    }
  }
  return out;
}

template <typename T>
NdTensor<T> uniform_select(const NdTensor<T>& tensor, const std::vector<std::size_t>& target_shape) {
  if (target_shape.size() != tensor.shape.size()) {
    throw InvalidInput("uniform_select: target rank differs from tensor rank");
  }
  std::vector<IndexList> indices;
  for (std::size_t a = 0; a < target_shape.size(); ++a) {
    if (target_shape[a] > tensor.shape[a]) {
      throw InvalidInput("uniform_select: target dim " + std::to_string(target_shape[a]) + " exceeds source dim " +
                         std::to_string(tensor.shape[a]) + " on axis " + std::to_string(a));
    }
    indices.push_back(evenly_spaced_indices(target_shape[a], tensor.shape[a]));
  }
  return gather_nd(tensor, indices);
}

template <typename T>
BasicMatrix<T> uniform_select(const BasicMatrix<T>& m, std::size_t rows, std::size_t cols) {
  if (rows > m.rows() || cols > m.cols()) {
    throw InvalidInput("uniform_select: target " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " exceeds source " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  const auto r = evenly_spaced_indices(rows, m.rows());
  const auto c = evenly_spaced_indices(cols, m.cols());
  return gather(gather(m, Axis::Rows, r), Axis::Cols, c);
}

LayerSelection select_layers(LayerStrategy strategy, std::size_t student_layers, std::size_t teacher_layers,
                             std::size_t k) {
  if (student_layers == 0 || teacher_layers == 0) throw InvalidInput("select_layers: layer counts must be positive");
  if (student_layers > teacher_layers) {
    throw InvalidInput("select_layers: student has more layers (" + std::to_string(student_layers) +
                       ") than teacher (" + std::to_string(teacher_layers) + ")");
  }
  LayerSelection sel;
  sel.strategy = strategy;
  switch (strategy) {
    case LayerStrategy::EmbedOnly:
      break;
    case LayerStrategy::TopK: {
      if (k < 1 || k > student_layers) {
        throw InvalidInput("select_layers: k=" + std::to_string(k) + " must be in [1, " +
                           std::to_string(student_layers) + "]");
      }
      sel.k = k;
      const auto s = evenly_spaced_indices(k, student_layers);
      const auto t = evenly_spaced_indices(k, teacher_layers);
      for (std::size_t i = 0; i < k; ++i) sel.mapping.emplace_back(s[i], t[i]);
      break;
    }
    case LayerStrategy::TopPlusLast:
      if (student_layers < 2) throw InvalidInput("select_layers: top+last needs at least two student layers");
      sel.mapping = {{0, 0}, {student_layers - 1, teacher_layers - 1}};
      break;
    case LayerStrategy::FirstN:
      for (std::size_t i = 0; i < student_layers; ++i) sel.mapping.emplace_back(i, i);
      break;
  }
  return sel;
}

std::string to_string(LayerStrategy s) {
  switch (s) {
    case LayerStrategy::EmbedOnly:
      return "embed-only";
    case LayerStrategy::TopK:
      return "k-even";
    case LayerStrategy::TopPlusLast:
      return "top+last";
    case LayerStrategy::FirstN:
      return "first-n";
  }
  return "unknown";
}

template struct NdTensor<float>;
template struct NdTensor<double>;
template NdTensor<float> gather_nd(const NdTensor<float>&, const std::vector<IndexList>&);
template NdTensor<double> gather_nd(const NdTensor<double>&, const std::vector<IndexList>&);
template NdTensor<float> uniform_select(const NdTensor<float>&, const std::vector<std::size_t>&);
template NdTensor<double> uniform_select(const NdTensor<double>&, const std::vector<std::size_t>&);
template BasicMatrix<float> uniform_select(const BasicMatrix<float>&, std::size_t, std::size_t);
template BasicMatrix<double> uniform_select(const BasicMatrix<double>&, std::size_t, std::size_t);

}  // namespace guide
