#pragma once

// Encoder checkpoint container.
//
//   bytes 0..7   magic "CLAECKPT"
//   u32          format_version (currently 1)
//   u64 + bytes  JSON header {format_version, seed, bn_eps, encoder{...}}
//   u32          array count
//   per array:   u32 name length, name, u64 element count, f64 elements
//
// All integers and floats are little-endian. Array names:
//   layers.<i>.weight, layers.<i>.bias
//   bn.<i>.gamma, bn.<i>.beta
//   bn.<i>.<clean|adv>.running_mean, .running_var, .momentum
//   head.weight, head.bias               (only with a projection head)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "clae/config.hpp"
#include "clae/encoder.hpp"
#include "clae/errors.hpp"

namespace clae {

inline constexpr char kCheckpointMagic[8] = {'C', 'L', 'A', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}
  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw SchemaError("checkpoint is truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

using NamedArrays = std::vector<std::pair<std::string, const std::vector<double>*>>;

inline NamedArrays checkpoint_arrays(const EncoderState& s, std::vector<std::vector<double>>& scratch) {
  NamedArrays out;
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i);
    out.emplace_back(p + ".weight", &s.layers[i].weight.values());
    out.emplace_back(p + ".bias", &s.layers[i].bias.values());
  }
  scratch.reserve(2 * s.norms.size());
  for (std::size_t i = 0; i < s.norms.size(); ++i) {
    const std::string p = "bn." + std::to_string(i);
    const BatchNormState& n = s.norms[i];
    out.emplace_back(p + ".gamma", &n.gamma.values());
    out.emplace_back(p + ".beta", &n.beta.values());
    for (Branch b : {Branch::clean, Branch::adversarial}) {
      const std::string q = p + "." + to_string(b);
      out.emplace_back(q + ".running_mean", &n.stats(b).running_mean);
      out.emplace_back(q + ".running_var", &n.stats(b).running_var);
      scratch.push_back({n.stats(b).momentum});
      out.emplace_back(q + ".momentum", &scratch.back());
    }
  }
  if (s.head) {
    out.emplace_back("head.weight", &s.head->weight.values());
    out.emplace_back("head.bias", &s.head->bias.values());
  }
  return out;
}

}  // namespace detail

inline std::string serialize_checkpoint(const EncoderState& state) {
  const double eps = state.norms.empty() ? 1e-5 : state.norms.front().eps;
  const Json header{{"format_version", kCheckpointVersion},
                    {"seed", state.seed},
                    {"bn_eps", eps},
                    {"encoder", to_json(state.config)}};
  const std::string header_text = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, header_text.size());
  out += header_text;
  std::vector<std::vector<double>> scratch;
  const auto arrays = detail::checkpoint_arrays(state, scratch);
  detail::put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, values] : arrays) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u64(out, values->size());
    for (double v : *values) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline EncoderState deserialize_checkpoint(const std::string& bytes) {
  detail::ByteReader in(bytes);
  if (in.take(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
    throw SchemaError("not a checkpoint (bad magic)");
  const auto version = static_cast<std::uint32_t>(in.uint(4));
  if (version != kCheckpointVersion)
    throw SchemaError("unsupported checkpoint format_version " + std::to_string(version) +
                      " (expected " + std::to_string(kCheckpointVersion) + ")");
  const std::size_t header_len = in.uint(8);
  Json header;
  EncoderConfig config;
  try {
    header = Json::parse(in.take(header_len));
    config = encoder_config_from_json(header.at("encoder"), "checkpoint.encoder");
    config.validate();
  } catch (const SchemaError&) {
    throw;
  } catch (const std::exception& e) {
    throw SchemaError(std::string("bad checkpoint header: ") + e.what());
  }
  EncoderState state = init_encoder(config, header.value("seed", std::uint64_t{0}));
  const double eps = header.value("bn_eps", 1e-5);
  for (auto& n : state.norms) n.eps = eps;

  std::map<std::string, std::vector<double>> loaded;
  const std::size_t count = in.uint(4);
  for (std::size_t a = 0; a < count; ++a) {
    const std::string name = in.take(in.uint(4));
    const std::size_t n = in.uint(8);
    std::vector<double> values(n);
    for (double& v : values) v = std::bit_cast<double>(in.uint(8));
    loaded[name] = std::move(values);
  }
  if (!in.done()) throw SchemaError("trailing bytes after checkpoint arrays");

  auto fill = [&loaded](const std::string& name, std::vector<double>& dst) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw SchemaError("checkpoint is missing array " + name);
    if (it->second.size() != dst.size())
      throw SchemaError("checkpoint array " + name + " has " + std::to_string(it->second.size()) +
                        " values, expected " + std::to_string(dst.size()));
    dst = it->second;
    loaded.erase(it);
  };
  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i);
    fill(p + ".weight", state.layers[i].weight.values());
    fill(p + ".bias", state.layers[i].bias.values());
  }
  for (std::size_t i = 0; i < state.norms.size(); ++i) {
    const std::string p = "bn." + std::to_string(i);
    BatchNormState& n = state.norms[i];
    fill(p + ".gamma", n.gamma.values());
    fill(p + ".beta", n.beta.values());
    for (Branch b : {Branch::clean, Branch::adversarial}) {
      const std::string q = p + "." + to_string(b);
      fill(q + ".running_mean", n.stats(b).running_mean);
      fill(q + ".running_var", n.stats(b).running_var);
      std::vector<double> m(1);
      fill(q + ".momentum", m);
      n.stats(b).momentum = m[0];
    }
  }
  if (state.head) {
    fill("head.weight", state.head->weight.values());
    fill("head.bias", state.head->bias.values());
  }
  if (!loaded.empty()) throw SchemaError("checkpoint has unexpected array " + loaded.begin()->first);
  return state;
}

inline void save_checkpoint(const std::filesystem::path& path, const EncoderState& state) {
  const std::string bytes = serialize_checkpoint(state);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("short write to checkpoint " + path.string());
}

inline EncoderState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace clae
