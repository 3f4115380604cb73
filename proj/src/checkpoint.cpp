#include "tupe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

namespace tupe {

namespace {

constexpr char kMagic[4] = {'T', 'U', 'P', 'E'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out_.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
    }
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  bool done() const { return pos_ == in_.size(); }
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::kTruncated,
                            std::string("checkpoint truncated while reading ") + what);
    }
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  const std::string meta = nlohmann::json{{"config", to_json(ckpt.config)}, {"step", ckpt.step}}.dump();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta.data(), meta.size());
  for (const CheckpointTensor& t : ckpt.tensors) {
    if (shape_numel(t.shape) != t.values.size()) {
      throw CheckpointError(CheckpointError::Kind::kShape,
                            "tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                                " values for shape " + shape_str(t.shape));
    }
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t dim : t.shape) w.le<std::uint64_t>(dim);
    for (double v : t.values) {
      if (t.dtype == DType::kF64) {
        w.le<std::uint64_t>(std::bit_cast<std::uint64_t>(v));
      } else {
        w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  return w.take();
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::kVersion, "not a checkpoint: bad magic bytes");
  }
  r.str(4, "magic");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::kVersion,
                          "unsupported checkpoint version " + std::to_string(version) +
                              " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto meta_len = r.le<std::uint32_t>("config length");
  const std::string meta = r.str(meta_len, "config block");
  Checkpoint ckpt;
  try {
    const nlohmann::json j = nlohmann::json::parse(meta);
    ckpt.config = model_config_from_json(j.at("config"));
    ckpt.step = j.at("step").get<std::uint64_t>();
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointError::Kind::kFormat,
                          std::string("malformed checkpoint config: ") + e.what());
  }
  while (!r.done()) {
    CheckpointTensor t;
    const auto name_len = r.le<std::uint32_t>("tensor name length");
    t.name = r.str(name_len, "tensor name");
    const auto dtype = r.le<std::uint8_t>("dtype");
    if (dtype > 1) {
      throw CheckpointError(CheckpointError::Kind::kFormat,
                            "tensor '" + t.name + "' has unknown dtype " + std::to_string(dtype));
    }
    t.dtype = static_cast<DType>(dtype);
    const auto rank = r.le<std::uint32_t>("rank");
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      t.shape.push_back(static_cast<std::size_t>(r.le<std::uint64_t>("dims")));
      count *= t.shape.back();
    }
    const std::size_t width = t.dtype == DType::kF64 ? 8 : 4;
    r.need(count * width, "tensor payload");
    t.values.resize(count);
    for (double& v : t.values) {
      v = t.dtype == DType::kF64 ? std::bit_cast<double>(r.le<std::uint64_t>("payload"))
                                 : static_cast<double>(std::bit_cast<float>(r.le<std::uint32_t>("payload")));
    }
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kIo, "cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

Checkpoint make_checkpoint(const ModelParams& params, const ModelConfig& config,
                           std::uint64_t step) {
  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.step = step;
  for (const NamedParameter& np : params.named()) {
    ckpt.tensors.push_back({np.name, DType::kF64, np.tensor.shape(),
                            std::vector<double>(np.tensor.data().begin(), np.tensor.data().end())});
  }
  return ckpt;
}

ModelParams params_from_checkpoint(const Checkpoint& ckpt) {
  ModelConfig shape_only = ckpt.config;
  shape_only.init_std = 0.0;
  ModelParams params = init_params(shape_only);
  std::unordered_map<std::string, Tensor> slots;
  for (const NamedParameter& np : params.named()) slots.emplace(np.name, np.tensor);
  for (const CheckpointTensor& t : ckpt.tensors) {
    auto it = slots.find(t.name);
    if (it == slots.end()) {
      throw CheckpointError(CheckpointError::Kind::kUnknownName,
                            "checkpoint tensor '" + t.name + "' is not a parameter of variant " +
                                std::string(variant_name(ckpt.config.variant)));
    }
    if (it->second.shape() != t.shape) {
      throw CheckpointError(CheckpointError::Kind::kShape,
                            "checkpoint tensor '" + t.name + "' has shape " + shape_str(t.shape) +
                                ", expected " + shape_str(it->second.shape()));
    }
    std::span<double> dst = it->second.mutable_data();
    std::copy(t.values.begin(), t.values.end(), dst.begin());
    slots.erase(it);
  }
  if (!slots.empty()) {
    throw CheckpointError(CheckpointError::Kind::kMissingName,
                          "checkpoint lacks parameter '" + slots.begin()->first + "'");
  }
  return params;
}

void save_checkpoint(const ModelParams& params, const ModelConfig& config, std::uint64_t step,
                     const std::filesystem::path& path) {
  write_checkpoint(make_checkpoint(params, config, step), path);
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  Checkpoint ckpt = read_checkpoint(path);
  LoadedModel m;
  m.params = params_from_checkpoint(ckpt);
  m.config = ckpt.config;
  m.step = ckpt.step;
  return m;
}

}  // namespace tupe
