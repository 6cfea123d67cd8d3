#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "json.hpp"
#include "ncml/errors.hpp"
#include "ncml/io.hpp"
#include "ncml/model.hpp"
#include "ncml/sde.hpp"

// Checkpoint container: "NCML" magic, u32 format version, u32 header length,
// JSON header (arch, Fourier frequencies, SDE, training step, seed, declared
// parameter blocks), the parameters as little-endian f32 in declared order,
// and a trailing CRC32 over everything before it. Parameters are stored at
// 32-bit precision; a load-save cycle is byte-stable.

namespace ncml {

// the three load failures are distinct so callers can map them to distinct
// exit codes and messages
struct CheckpointMagicError : IoError {
  explicit CheckpointMagicError(const std::string& msg) : IoError(msg) {}
};
struct CheckpointVersionError : IoError {
  explicit CheckpointVersionError(const std::string& msg) : IoError(msg) {}
};
struct CheckpointCrcError : IoError {
  explicit CheckpointCrcError(const std::string& msg) : IoError(msg) {}
};
struct CheckpointArchError : ConfigError {
  explicit CheckpointArchError(const std::string& msg) : ConfigError(msg) {}
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// reflected CRC-32, polynomial 0xEDB88320 ("123456789" -> 0xCBF43926)
inline std::uint32_t crc32(const void* data, size_t len) {
  static const std::vector<std::uint32_t> table = [] {
    std::vector<std::uint32_t> t(256);
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint32_t crc = 0xFFFFFFFFu;
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

struct Checkpoint {
  DensityModel model;
  SdeSpec sde;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline nlohmann::json arch_json(const ModelArch& a) {
  return {{"extents", a.dims.extents},
          {"bit_depth", a.bit_depth},
          {"hidden_layers", a.hidden_layers},
          {"hidden_width", a.hidden_width},
          {"mixture_k", a.mixture_k},
          {"fourier_dim", a.fourier_dim},
          {"class_count", a.class_count},
          {"log_scale_min", a.log_scale_min},
          {"time_scale", a.time_scale},
          {"init_seed", a.init_seed}};
}

inline ModelArch arch_from_json(const nlohmann::json& j) {
  ModelArch a;
  a.dims = GridDims{j.at("extents").get<std::vector<std::uint32_t>>()};
  a.bit_depth = j.at("bit_depth").get<int>();
  a.hidden_layers = j.at("hidden_layers").get<int>();
  a.hidden_width = j.at("hidden_width").get<int>();
  a.mixture_k = j.at("mixture_k").get<int>();
  a.fourier_dim = j.at("fourier_dim").get<int>();
  a.class_count = j.at("class_count").get<int>();
  a.log_scale_min = j.at("log_scale_min").get<double>();
  a.time_scale = j.at("time_scale").get<double>();
  a.init_seed = j.at("init_seed").get<std::uint64_t>();
  return a;
}

inline nlohmann::json sde_json(const SdeSpec& s) {
  return {{"kind", to_string(s.kind)},     {"sigma_min", s.sigma_min},
          {"sigma_max", s.sigma_max},      {"beta_min", s.beta_min},
          {"beta_max", s.beta_max},        {"horizon", s.horizon},
          {"data_scale", s.data_scale}};
}

inline SdeSpec sde_from_json(const nlohmann::json& j) {
  SdeSpec s;
  s.kind = parse_sde_kind(j.at("kind").get<std::string>());
  s.sigma_min = j.at("sigma_min").get<double>();
  s.sigma_max = j.at("sigma_max").get<double>();
  s.beta_min = j.at("beta_min").get<double>();
  s.beta_max = j.at("beta_max").get<double>();
  s.horizon = j.at("horizon").get<double>();
  s.data_scale = j.at("data_scale").get<double>();
  return s;
}

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32_le(const std::string& bytes, size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const DensityModel& model, const SdeSpec& sde,
                                     std::int64_t step, std::uint64_t seed) {
  nlohmann::json header;
  header["arch"] = detail::arch_json(model.arch());
  header["fourier_frequencies"] = model.fourier_frequencies();
  header["sde"] = detail::sde_json(sde);
  header["step"] = step;
  header["seed"] = seed;
  nlohmann::json blocks = nlohmann::json::array();
  const auto& names = model.parameter_names();
  const auto& params = model.parameters();
  for (size_t i = 0; i < params.size(); ++i)
    blocks.push_back({{"name", names[i]}, {"shape", params[i].shape()}});
  header["params"] = std::move(blocks);
  std::string hbytes = header.dump();

  std::string out = "NCML";
  detail::put_u32_le(out, kCheckpointVersion);
  detail::put_u32_le(out, static_cast<std::uint32_t>(hbytes.size()));
  out += hbytes;
  for (const auto& p : params)
    for (std::int64_t i = 0; i < p.size(); ++i) {
      float f = static_cast<float>(p[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_u32_le(out, bits);
    }
  detail::put_u32_le(out, crc32(out.data(), out.size()));
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "NCML") != 0)
    throw CheckpointMagicError("not a checkpoint: bad magic");
  if (bytes.size() < 16)
    throw CheckpointCrcError("checkpoint truncated before the header");
  std::uint32_t version = detail::get_u32_le(bytes, 4);
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint format version " + std::to_string(version) +
                                 ", expected " + std::to_string(kCheckpointVersion));
  std::uint32_t header_len = detail::get_u32_le(bytes, 8);
  if (bytes.size() < 12 + static_cast<size_t>(header_len) + 4)
    throw CheckpointCrcError("checkpoint truncated inside the header");
  std::uint32_t stored = detail::get_u32_le(bytes, bytes.size() - 4);
  if (crc32(bytes.data(), bytes.size() - 4) != stored)
    throw CheckpointCrcError("checkpoint CRC mismatch");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  try {
    ModelArch arch = detail::arch_from_json(header.at("arch"));
    ck.model = DensityModel::init(arch);
    ck.model.set_fourier_frequencies(
        header.at("fourier_frequencies").get<std::vector<double>>());
    ck.sde = detail::sde_from_json(header.at("sde"));
    ck.step = header.at("step").get<std::int64_t>();
    ck.seed = header.at("seed").get<std::uint64_t>();

    const auto& blocks = header.at("params");
    const auto& names = ck.model.parameter_names();
    auto& params = ck.model.parameters();
    if (blocks.size() != params.size())
      throw CheckpointArchError("checkpoint declares " + std::to_string(blocks.size()) +
                                " parameter blocks, the architecture has " +
                                std::to_string(params.size()));
    std::int64_t total = 0;
    for (size_t i = 0; i < params.size(); ++i) {
      if (blocks[i].at("name").get<std::string>() != names[i] ||
          blocks[i].at("shape").get<std::vector<int>>() != params[i].shape())
        throw CheckpointArchError("checkpoint block '" +
                                  blocks[i].at("name").get<std::string>() +
                                  "' does not match the declared architecture");
      total += params[i].size();
    }
    size_t body = bytes.size() - 4 - (12 + static_cast<size_t>(header_len));
    if (body != static_cast<size_t>(total) * 4)
      throw CheckpointArchError("checkpoint payload holds " + std::to_string(body / 4) +
                                " floats, the architecture needs " + std::to_string(total));
    size_t pos = 12 + header_len;
    for (auto& p : params)
      for (std::int64_t i = 0; i < p.size(); ++i) {
        std::uint32_t raw = detail::get_u32_le(bytes, pos);
        pos += 4;
        float f;
        std::memcpy(&f, &raw, 4);
        p[i] = static_cast<double>(f);
      }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header is missing fields: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const DensityModel& model,
                            const SdeSpec& sde, std::int64_t step, std::uint64_t seed) {
  atomic_write_file(path, encode_checkpoint(model, sde, step, seed));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace ncml
