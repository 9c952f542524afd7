#include "cle/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace cle {

namespace {

constexpr char kMagic[8] = {'C', 'L', 'E', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint64_t get_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

std::vector<uint8_t> tensor_bytes(const Tensor& t) {
  std::vector<uint8_t> out;
  out.reserve(t.size() * 4);
  for (float f : t.values()) {
    uint32_t bits = 0;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(bits >> (8 * i)));
  }
  return out;
}

}  // namespace

uint64_t fnv1a(const void* data, size_t size) {
  const auto* p = static_cast<const uint8_t*>(data);
  uint64_t h = 1469598103934665603ULL;
  for (size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw ConfigError("checkpoint has no tensor '" + name + "'");
}

nlohmann::json Checkpoint::manifest() const {
  nlohmann::json m;
  m["format"] = 1;
  m["kind"] = kind;
  m["config"] = config;
  m["seed"] = seed;
  m["step"] = step;
  nlohmann::json list = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const auto bytes = tensor_bytes(t);
    list.push_back({{"name", name},
                    {"shape", t.shape()},
                    {"offset", offset},
                    {"fnv1a", fnv1a(bytes.data(), bytes.size())}});
    offset += bytes.size();
  }
  m["tensors"] = list;
  return m;
}

std::vector<uint8_t> Checkpoint::encode() const {
  const std::string text = manifest_text();
  std::vector<uint8_t> out(kMagic, kMagic + 8);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : tensors) {
    const auto bytes = tensor_bytes(t);
    out.insert(out.end(), bytes.begin(), bytes.end());
  }
  return out;
}

Checkpoint Checkpoint::decode(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw DecodeError("not a checkpoint file (bad magic)");
  }
  const uint64_t len = get_u64(bytes.data() + 8);
  if (len > bytes.size() - 16) throw DecodeError("checkpoint manifest truncated");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  if (m.value("format", 0) != 1) throw DecodeError("unsupported checkpoint format");
  Checkpoint ck;
  ck.kind = m.at("kind").get<std::string>();
  ck.config = m.at("config");
  ck.seed = m.at("seed").get<uint64_t>();
  ck.step = m.at("step").get<int64_t>();
  const size_t payload = 16 + len;
  for (const auto& entry : m.at("tensors")) {
    const auto shape = entry.at("shape").get<std::vector<int>>();
    const size_t count = Tensor::element_count(shape);
    const size_t begin = payload + entry.at("offset").get<uint64_t>();
    if (begin + count * 4 > bytes.size()) {
      throw DecodeError("checkpoint payload truncated at tensor " + entry.at("name").get<std::string>());
    }
    if (fnv1a(bytes.data() + begin, count * 4) != entry.at("fnv1a").get<uint64_t>()) {
      throw DecodeError("checksum mismatch for tensor " + entry.at("name").get<std::string>());
    }
    std::vector<float> data(count);
    for (size_t i = 0; i < count; ++i) {
      uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<uint32_t>(bytes[begin + i * 4 + b]) << (8 * b);
      std::memcpy(&data[i], &bits, 4);
    }
    ck.tensors.emplace_back(entry.at("name").get<std::string>(), Tensor(shape, std::move(data)));
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file_bytes(path, encode()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return decode(read_file_bytes(path)); }

nlohmann::json layers_to_json(const std::vector<LayerSpec>& layers) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& l : layers) {
    arr.push_back({{"kind", to_string(l.kind)},
                   {"kernel", l.kernel},
                   {"stride", l.stride},
                   {"padding", l.padding},
                   {"in", l.in_channels},
                   {"out", l.out_channels}});
  }
  return arr;
}

std::vector<LayerSpec> layers_from_json(const nlohmann::json& j) {
  std::vector<LayerSpec> layers;
  for (const auto& e : j) {
    LayerSpec l;
    l.kind = layer_kind_from_string(e.at("kind").get<std::string>());
    l.kernel = e.at("kernel").get<int>();
    l.stride = e.at("stride").get<int>();
    l.padding = e.at("padding").get<int>();
    l.in_channels = e.at("in").get<int>();
    l.out_channels = e.at("out").get<int>();
    layers.push_back(l);
  }
  return layers;
}

void add_network(Checkpoint& ckpt, const std::string& prefix, const Network& net) {
  ckpt.config["networks"][prefix] = layers_to_json(net.layers());
  const auto names = net.param_names();
  for (size_t i = 0; i < names.size(); ++i) ckpt.tensors.emplace_back(prefix + "." + names[i], net.params()[i]);
}

Network read_network(const Checkpoint& ckpt, const std::string& prefix) {
  if (!ckpt.config.contains("networks") || !ckpt.config["networks"].contains(prefix)) {
    throw ConfigError("checkpoint has no network '" + prefix + "'");
  }
  Network net(layers_from_json(ckpt.config["networks"][prefix]));
  const auto names = net.param_names();
  for (size_t i = 0; i < names.size(); ++i) {
    const Tensor& t = ckpt.tensor(prefix + "." + names[i]);
    if (t.shape() != net.params()[i].shape()) {
      throw ConfigError("tensor " + prefix + "." + names[i] + " has shape " + shape_to_string(t.shape()) +
                        ", layer expects " + shape_to_string(net.params()[i].shape()));
    }
    net.params()[i] = t;
  }
  return net;
}

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace cle
