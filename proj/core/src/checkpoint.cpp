// Checkpoint file layout (all integers little-endian):
//   "SSLECKPT"                 8-byte magic
//   u32 format_version
//   u64 header_length, header  JSON metadata
//   u64 tensor_count
//   per tensor: u32 name_len, name, u8 kind (0 trainable, 1 buffer),
//               u32 rank, u64 dims[rank], f64 values[numel]
#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "sslecho/error.hpp"
#include "sslecho/model.hpp"

namespace sslecho {
namespace {

constexpr char kMagic[8] = {'S', 'S', 'L', 'E', 'C', 'K', 'P', 'T'};

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

void put_f64(std::string& out, double value) { put_le(out, std::bit_cast<std::uint64_t>(value)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint64_t offset() const { return pos_; }

  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw ParseError(std::string("checkpoint truncated while reading ") + what, pos_);
    }
  }

  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

nlohmann::json config_to_json(const BackboneConfig& c) {
  return {{"input_size", c.input_size},
          {"channels", c.channels},
          {"stem_width", c.stem_width},
          {"widths", c.widths},
          {"blocks_per_stage", c.blocks_per_stage},
          {"num_classes", c.num_classes},
          {"aux_classes", c.aux_classes},
          {"normalization", to_string(c.normalization)},
          {"seed", c.seed}};
}

BackboneConfig config_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.input_size = j.at("input_size").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.stem_width = j.at("stem_width").get<std::size_t>();
  c.widths = j.at("widths").get<std::vector<std::size_t>>();
  c.blocks_per_stage = j.at("blocks_per_stage").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.aux_classes = j.at("aux_classes").get<std::size_t>();
  c.normalization = normalization_from_string(j.at("normalization").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

void put_tensor(std::string& out, const std::string& name, std::uint8_t kind, const Tensor& t) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_le<std::uint8_t>(out, kind);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_le<std::uint64_t>(out, d);
  for (Scalar v : t.data()) put_f64(out, static_cast<double>(v));
}

}  // namespace

std::string serialize_checkpoint(const ModelCheckpoint& ckpt) {
  nlohmann::json header = {{"format_version", kCheckpointVersion},
                           {"config", config_to_json(ckpt.config)},
                           {"task", to_string(ckpt.task)},
                           {"epoch", ckpt.epoch},
                           {"validation_balanced_accuracy", ckpt.validation_balanced_accuracy},
                           {"run_id", ckpt.run_id}};
  const std::string header_text = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  put_le<std::uint64_t>(out, ckpt.params.trainable.size() + ckpt.params.buffers.size());
  for (const auto& [name, t] : ckpt.params.trainable) put_tensor(out, name, 0, t);
  for (const auto& [name, t] : ckpt.params.buffers) put_tensor(out, name, 1, t);
  return out;
}

ModelCheckpoint deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.str(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic))) {
    throw ParseError("not a checkpoint file (bad magic)", 0);
  }
  const auto version = in.le<std::uint32_t>("format version");
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) +
                       " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = in.le<std::uint64_t>("header length");
  const std::uint64_t header_offset = in.offset();
  const std::string header_text = in.str(header_len, "header");

  ModelCheckpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(header_text);
    if (header.at("format_version").get<std::uint32_t>() != kCheckpointVersion) {
      throw VersionError("checkpoint header version disagrees with file version");
    }
    ckpt.config = config_from_json(header.at("config"));
    ckpt.task = task_from_string(header.at("task").get<std::string>());
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.validation_balanced_accuracy = header.at("validation_balanced_accuracy").get<double>();
    ckpt.run_id = header.at("run_id").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad checkpoint header: ") + e.what(), header_offset);
  } catch (const ConfigError& e) {
    throw ParseError(std::string("bad checkpoint header: ") + e.what(), header_offset);
  }

  const auto count = in.le<std::uint64_t>("tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t start = in.offset();
    const auto name_len = in.le<std::uint32_t>("tensor name length");
    std::string name = in.str(name_len, "tensor name");
    const auto kind = in.le<std::uint8_t>("tensor kind");
    if (kind > 1) throw ParseError("unknown tensor kind for '" + name + "'", start);
    const auto rank = in.le<std::uint32_t>("tensor rank");
    if (rank == 0 || rank > 8) throw ParseError("bad rank for '" + name + "'", start);
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = in.le<std::uint64_t>("tensor dims");
      if (d == 0 || d > (1ULL << 32)) throw ParseError("bad dimension for '" + name + "'", start);
      numel *= d;
    }
    in.need(numel * 8, "tensor values");
    std::vector<Scalar> values(numel);
    for (auto& v : values) v = static_cast<Scalar>(in.f64("tensor values"));
    auto& map = kind == 0 ? ckpt.params.trainable : ckpt.params.buffers;
    if (!map.emplace(name, Tensor::from(shape, std::move(values), kind == 0)).second) {
      throw ParseError("duplicate tensor '" + name + "'", start);
    }
  }
  if (!in.done()) throw ParseError("trailing bytes after last tensor", in.offset());

  // Parameter names and shapes must be exactly those the config implies.
  const ParameterMap expected = build_backbone(ckpt.config);
  auto check = [&](const std::map<std::string, Tensor>& want, const std::map<std::string, Tensor>& got,
                   const char* kind) {
    if (want.size() != got.size()) {
      throw ParseError(std::string("checkpoint ") + kind + " count does not match its config", in.offset());
    }
    for (const auto& [name, t] : want) {
      auto it = got.find(name);
      if (it == got.end() || it->second.shape() != t.shape()) {
        throw ParseError(std::string("checkpoint ") + kind + " '" + name + "' missing or misshapen",
                         in.offset());
      }
    }
  };
  check(expected.trainable, ckpt.params.trainable, "parameter");
  check(expected.buffers, ckpt.params.buffers, "buffer");
  return ckpt;
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return deserialize_checkpoint(buffer.str());
}

}  // namespace sslecho
