#include "guide/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace guide {

namespace {

constexpr char kMagic[8] = {'G', 'U', 'I', 'D', 'E', 'C', 'K', '1'};
constexpr std::size_t kAlign = 64;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as native little-endian floats");

std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
  return splitmix64(seed ^ fnv1a(reinterpret_cast<const std::uint8_t*>(name.data()), name.size()));
}

struct TensorRecord {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
};

std::size_t parse_size(const std::string& s, const std::string& what) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw CorruptCheckpoint("bad integer for " + what + ": '" + s + "'");
  }
  return v;
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void ModelConfig::validate() const {
  if (model_dim == 0 || num_layers == 0 || num_heads == 0 || head_dim == 0 || ffn_dim == 0 ||
      vocab_size == 0 || context_len == 0) {
    throw InvalidInput("model config fields must be positive: " + to_string(*this));
  }
  if (model_dim != num_heads * head_dim) {
    throw InvalidInput("model_dim must equal num_heads * head_dim: " + to_string(*this));
  }
}

std::string to_string(const ModelConfig& c) {
  std::ostringstream os;
  os << "d=" << c.model_dim << " n=" << c.num_layers << " h=" << c.num_heads << " l=" << c.head_dim
     << " f=" << c.ffn_dim << " m=" << c.vocab_size << " L=" << c.context_len;
  return os.str();
}

std::vector<std::string> tensor_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  Weights<float> w;
  w.blocks.resize(cfg.num_layers);
  w.for_each([&](const std::string& name, MatrixF&) { names.push_back(name); });
  return names;
}

std::vector<std::pair<std::size_t, std::size_t>> tensor_shapes(const ModelConfig& cfg) {
  const std::size_t d = cfg.model_dim, hl = cfg.num_heads * cfg.head_dim, f = cfg.ffn_dim;
  std::vector<std::pair<std::size_t, std::size_t>> s{{cfg.vocab_size, d}, {cfg.context_len, d}};
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    s.insert(s.end(), {{1, d}, {d, hl}, {d, hl}, {d, hl}, {hl, d}, {1, d}, {d, f}, {1, f}, {f, d}, {1, d}});
  }
  s.insert(s.end(), {{1, d}, {d, cfg.vocab_size}});
  return s;
}

void Checkpoint::validate() const {
  try {
    config.validate();
  } catch (const InvalidInput& e) {
    throw CorruptCheckpoint(e.what());
  }
  if (weights.blocks.size() != config.num_layers) {
    throw CorruptCheckpoint("checkpoint has " + std::to_string(weights.blocks.size()) +
                            " blocks, config says " + std::to_string(config.num_layers));
  }
  const auto shapes = tensor_shapes(config);
  std::size_t i = 0;
  weights.for_each([&](const std::string& name, const MatrixF& t) {
    const auto [r, c] = shapes[i++];
    if (t.rows() != r || t.cols() != c) {
      throw CorruptCheckpoint("tensor " + name + " has shape " + std::to_string(t.rows()) + "x" +
                              std::to_string(t.cols()) + ", config implies " + std::to_string(r) +
                              "x" + std::to_string(c));
    }
    if (!all_finite(t)) throw CorruptCheckpoint("tensor " + name + " contains NaN or Inf");
  });
}

bool Checkpoint::operator==(const Checkpoint& other) const {
  if (!(config == other.config) || step != other.step ||
      tokenizer_fingerprint != other.tokenizer_fingerprint) {
    return false;
  }
  std::vector<const MatrixF*> mine, theirs;
  weights.for_each([&](const std::string&, const MatrixF& t) { mine.push_back(&t); });
  other.weights.for_each([&](const std::string&, const MatrixF& t) { theirs.push_back(&t); });
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    const auto& a = *mine[i];
    const auto& b = *theirs[i];
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    // Bitwise comparison: -0.0 vs 0.0 counts as a difference.
    if (std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  ckpt.validate();
  const auto& c = ckpt.config;

  // Offsets depend on the header length, which depends on the offsets'
  // digit counts; iterate until the layout is stable.
  std::vector<TensorRecord> records;
  ckpt.weights.for_each([&](const std::string& name, const MatrixF& t) {
    records.push_back({name, t.rows(), t.cols(), 0});
  });

  std::string header;
  std::size_t data_start = 0;
  for (int iter = 0; iter < 8; ++iter) {
    std::ostringstream os;
    os << "model_dim=" << c.model_dim << "\n"
       << "num_layers=" << c.num_layers << "\n"
       << "num_heads=" << c.num_heads << "\n"
       << "head_dim=" << c.head_dim << "\n"
       << "ffn_dim=" << c.ffn_dim << "\n"
       << "vocab_size=" << c.vocab_size << "\n"
       << "context_len=" << c.context_len << "\n"
       << "step=" << ckpt.step << "\n"
       << "tokenizer=" << ckpt.tokenizer_fingerprint << "\n";
    for (const auto& r : records) {
      os << "tensor=" << r.name << " f32 " << r.rows << "x" << r.cols << " " << r.offset << "\n";
    }
    std::string candidate = os.str();
    const std::size_t start = align_up(sizeof(kMagic) + 8 + candidate.size());
    std::size_t offset = start;
    bool changed = start != data_start;
    for (auto& r : records) {
      if (r.offset != offset) changed = true;
      r.offset = offset;
      offset = align_up(offset + r.rows * r.cols * sizeof(float));
    }
    header = std::move(candidate);
    data_start = start;
    if (!changed) break;
  }

  std::vector<std::uint8_t> out(kMagic, kMagic + sizeof(kMagic));
  put_u64(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  std::size_t i = 0;
  ckpt.weights.for_each([&](const std::string&, const MatrixF& t) {
    const auto& r = records[i++];
    out.resize(r.offset, 0);
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
    out.insert(out.end(), p, p + t.size() * sizeof(float));
  });
  return out;
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CorruptCheckpoint("bad magic");
  }
  const std::uint64_t header_len = get_u64(bytes.data() + sizeof(kMagic));
  const std::size_t header_start = sizeof(kMagic) + 8;
  if (header_len > bytes.size() - header_start) throw CorruptCheckpoint("truncated header");
  const std::string header(reinterpret_cast<const char*>(bytes.data() + header_start), header_len);

  Checkpoint ckpt;
  std::vector<TensorRecord> records;
  std::istringstream is(header);
  std::string line;
  std::map<std::string, std::string> kv;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CorruptCheckpoint("malformed header line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "tensor") {
      std::istringstream ts(value);
      std::string name, dtype, shape, offset;
      if (!(ts >> name >> dtype >> shape >> offset)) {
        throw CorruptCheckpoint("malformed tensor record: " + value);
      }
      if (dtype != "f32") throw CorruptCheckpoint("unsupported dtype " + dtype + " for " + name);
      const auto x = shape.find('x');
      if (x == std::string::npos) throw CorruptCheckpoint("malformed shape " + shape);
      records.push_back({name, parse_size(shape.substr(0, x), name), parse_size(shape.substr(x + 1), name),
                         parse_size(offset, name)});
    } else {
      kv[key] = value;
    }
  }

  auto field = [&](const char* key) -> std::size_t {
    auto it = kv.find(key);
    if (it == kv.end()) throw CorruptCheckpoint(std::string("header is missing ") + key);
    return parse_size(it->second, key);
  };
  auto& c = ckpt.config;
  c.model_dim = field("model_dim");
  c.num_layers = field("num_layers");
  c.num_heads = field("num_heads");
  c.head_dim = field("head_dim");
  c.ffn_dim = field("ffn_dim");
  c.vocab_size = field("vocab_size");
  c.context_len = field("context_len");
  ckpt.step = field("step");
  ckpt.tokenizer_fingerprint = kv.count("tokenizer") ? kv["tokenizer"] : "";
  try {
    c.validate();
  } catch (const InvalidInput& e) {
    throw CorruptCheckpoint(e.what());
  }
  // Bound the declared sizes by the file length before allocating anything.
  if (c.num_layers > records.size()) throw CorruptCheckpoint("layer count exceeds tensor records");
  std::size_t declared = 0;
  for (const auto& [r, cc] : tensor_shapes(c)) {
    if (cc != 0 && r > bytes.size() / cc) throw CorruptCheckpoint("declared shapes exceed the file size");
    declared += r * cc;
    if (declared > bytes.size() / sizeof(float)) throw CorruptCheckpoint("declared shapes exceed the file size");
  }

  ckpt.weights = Weights<float>::shaped(c);
  std::size_t i = 0;
  std::size_t end_of_data = align_up(header_start + header_len);
  ckpt.weights.for_each([&](const std::string& name, MatrixF& t) {
    if (i >= records.size()) throw CorruptCheckpoint("missing tensor record for " + name);
    const auto& r = records[i++];
    if (r.name != name) throw CorruptCheckpoint("expected tensor " + name + ", found " + r.name);
    if (r.rows != t.rows() || r.cols != t.cols()) {
      throw CorruptCheckpoint("tensor " + name + " declared " + std::to_string(r.rows) + "x" +
                              std::to_string(r.cols) + ", config implies " + std::to_string(t.rows()) +
                              "x" + std::to_string(t.cols()));
    }
    const std::size_t nbytes = t.size() * sizeof(float);
    if (r.offset % kAlign != 0 || r.offset < end_of_data) {
      throw CorruptCheckpoint("tensor " + name + " has a misplaced offset");
    }
    if (r.offset > bytes.size() || nbytes > bytes.size() - r.offset) {
      throw CorruptCheckpoint("truncated payload for tensor " + name);
    }
    std::memcpy(t.data(), bytes.data() + r.offset, nbytes);
    end_of_data = r.offset + nbytes;
  });
  if (i != records.size()) throw CorruptCheckpoint("unexpected extra tensor records");
  if (end_of_data != bytes.size()) throw CorruptCheckpoint("trailing bytes after last tensor");
  ckpt.validate();
  return ckpt;
}

void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return deserialize(bytes);
}

void fill_truncated_normal(MatrixF& tensor, double stddev, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (float& x : tensor.values()) {
    double z;
    do {
      z = normal(rng);
    } while (std::abs(z) > 2.0);
    x = static_cast<float>(z * stddev);
  }
}

Checkpoint random_init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.weights = Weights<float>::shaped(cfg);
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(cfg.model_dim));
  const double w2_std = 1.0 / std::sqrt(static_cast<double>(cfg.ffn_dim));
  ckpt.weights.for_each([&](const std::string& name, MatrixF& t) {
    const auto dot = name.rfind('.');
    const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
    if (leaf == "b1" || leaf == "b2" || leaf == "norm1" || leaf == "norm2" || leaf == "final_norm") {
      return;  // shaped() already set biases to 0 and scales to 1
    }
    fill_truncated_normal(t, leaf == "w2" ? w2_std : proj_std, name_seed(seed, name));
  });
  return ckpt;
}

std::uint64_t content_hash(const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  return fnv1a(bytes.data(), bytes.size());
}

}  // namespace guide
