#pragma once

// Binary checkpoint archive, little-endian:
//
//   "MSDUCKPT" | u32 version | u32 n + n bytes JSON header
//   | u32 dtype bytes (4 or 8)
//   | u32 count, then per array: u16 name length, name, u8 rank, u64 dims,
//     raw values                                  (parameters)
//   | same again                                  (momentum buffers, may be 0)
//   | u32 CRC-32 of every preceding byte
//
// The JSON header carries the model config, the number of completed epochs
// and the training seed. Loading rebuilds the model from that config and
// rejects any array whose name or shape does not match it.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "msdu/errors.hpp"
#include "msdu/model.hpp"
#include "msdu/network.hpp"

namespace msdu {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"in_channels", c.in_channels},
          {"num_classes", c.num_classes},
          {"input_size", c.input_size},
          {"extractor_rates", c.extractor_rates},
          {"extractor_strides", c.extractor_strides},
          {"extractor_channels", c.extractor_channels},
          {"stage_channels", c.stage_channels},
          {"bottleneck_channels", c.bottleneck_channels},
          {"variant", std::string(to_string(c.variant))}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.in_channels = j.at("in_channels").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.input_size = j.at("input_size").get<int>();
    c.extractor_rates = j.at("extractor_rates").get<std::array<int, kStages>>();
    c.extractor_strides = j.at("extractor_strides").get<std::array<int, kStages>>();
    c.extractor_channels = j.at("extractor_channels").get<int>();
    c.stage_channels = j.at("stage_channels").get<std::array<int, kStages>>();
    c.bottleneck_channels = j.at("bottleneck_channels").get<int>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed model config: ") + e.what());
  }
  return c;
}

template <typename T>
struct Checkpoint {
  ParameterizedModel<T> model;
  std::optional<ParameterStore<T>> momentum;
  int epoch = 0;
  std::uint64_t seed = 0;
};

namespace detail {

class ByteWriter {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(V));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const char* data, std::size_t n) : data_(data), n_(n) {}
  template <typename V>
  V get() {
    V v;
    get_bytes(&v, sizeof(V));
    return v;
  }
  void get_bytes(void* dst, std::size_t n) {
    if (pos_ + n > n_) throw CheckpointError("checkpoint is truncated");
    std::memcpy(dst, data_ + pos_, n);
    pos_ += n;
  }
  std::string get_string(std::size_t n) {
    std::string s(n, '\0');
    get_bytes(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == n_; }

 private:
  const char* data_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

template <typename T>
void write_arrays(ByteWriter& w, const ParameterStore<T>* store) {
  w.put<std::uint32_t>(store ? static_cast<std::uint32_t>(store->size()) : 0u);
  if (!store) return;
  for (const auto& p : *store) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.name.size()));
    w.put_bytes(p.name.data(), p.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) w.put<std::uint64_t>(d);
    w.put_bytes(p.value.data(), p.value.size() * sizeof(T));
  }
}

template <typename Stored, typename T>
void read_values(ByteReader& r, Tensor<T>& dst) {
  std::vector<Stored> raw(dst.size());
  r.get_bytes(raw.data(), raw.size() * sizeof(Stored));
  for (std::size_t i = 0; i < raw.size(); ++i) dst[i] = static_cast<T>(raw[i]);
}

// Fills `store` (already laid out from the config) from the archive.
template <typename T>
void read_arrays(ByteReader& r, std::uint32_t dtype, std::uint32_t count, ParameterStore<T>& store,
                 const char* what) {
  if (count != store.size()) {
    throw CheckpointError(std::string(what) + ": archive holds " + std::to_string(count) +
                          " arrays, config expects " + std::to_string(store.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.get_string(r.get<std::uint16_t>());
    if (!store.contains(name)) {
      throw CheckpointError(std::string(what) + ": unexpected array '" + name + "'");
    }
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    Tensor<T>& dst = store.at(name);
    if (shape != dst.shape()) {
      throw CheckpointError(std::string(what) + ": array '" + name + "' has shape " +
                            shape_string(shape) + ", config expects " + shape_string(dst.shape()));
    }
    if (dtype == 4) read_values<float>(r, dst);
    else read_values<double>(r, dst);
  }
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterizedModel<T>& model,
                     const ParameterStore<T>* momentum, int epoch, std::uint64_t seed) {
  detail::ByteWriter w;
  w.put_bytes("MSDUCKPT", 8);
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string header =
      nlohmann::json{{"config", config_to_json(model.config())}, {"epoch", epoch}, {"seed", seed}}.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(header.size()));
  w.put_bytes(header.data(), header.size());
  w.put<std::uint32_t>(sizeof(T));
  detail::write_arrays(w, &model.parameters());
  detail::write_arrays(w, momentum);
  auto& bytes = w.bytes();
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
  w.put<std::uint32_t>(crc);

  // Written beside the target and renamed into place.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + path.string() + ": " + ec.message());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 + sizeof(std::uint32_t) || std::memcmp(bytes.data(), "MSDUCKPT", 8) != 0) {
    throw CheckpointError("not a checkpoint archive: " + path.string());
  }
  const std::size_t body = bytes.size() - sizeof(std::uint32_t);
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + body, sizeof(stored_crc));
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(body)));
  if (crc != stored_crc) throw CheckpointError("checksum mismatch, checkpoint is corrupted: " + path.string());

  detail::ByteReader r(bytes.data() + 8, body - 8);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.get_string(r.get<std::uint32_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
  const ModelConfig config = config_from_json(header.value("config", nlohmann::json::object()));
  ParameterizedModel<T> model = [&] {
    try {
      return build_model<T>(config);
    } catch (const ConfigError& e) {
      throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
    }
  }();
  const auto dtype = r.get<std::uint32_t>();
  if (dtype != 4 && dtype != 8) throw CheckpointError("unsupported dtype size " + std::to_string(dtype));
  detail::read_arrays(r, dtype, r.get<std::uint32_t>(), model.parameters(), "parameters");

  Checkpoint<T> ck{std::move(model), std::nullopt, header.value("epoch", 0),
                   header.value("seed", std::uint64_t{0})};
  if (const auto n = r.get<std::uint32_t>(); n > 0) {
    ParameterStore<T> m = ck.model.parameters().zeros_like();
    detail::read_arrays(r, dtype, n, m, "momentum");
    ck.momentum = std::move(m);
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return ck;
}

}  // namespace msdu
