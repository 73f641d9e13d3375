#pragma once

// Sample containers and the "CFDS v1" dataset file format:
//   line 1: JSON header {version, K, M, N, P, noise_power, count, dtype, ordering}
//   payload (little-endian): per sample, D as K*M bytes, then h as K*M*N (re, im) float64 pairs,
//   k-major then m then n.

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellfree/scenario.hpp"

namespace cellfree {

static_assert(std::endian::native == std::endian::little, "CFDS payload is written in native little-endian order");

struct Sample {
  Association assoc;
  Tensor h;  // K x M x N
};

struct Dataset {
  std::size_t K = 0, M = 0, N = 0;
  double power_budget = 1.0;
  double noise_power = 1.0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

/// Draws `count` independent samples; sample i depends only on (seed, i).
inline Dataset generate_dataset(const GeometryConfig& cfg, std::size_t count, std::uint64_t seed) {
  Dataset ds;
  ds.K = cfg.K;
  ds.M = cfg.M;
  ds.N = cfg.N;
  ds.power_budget = cfg.power_budget;
  ds.noise_power = noise_power(cfg.power_budget, cfg.edge_snr_db, cfg.disc_radius);
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = stream_rng(seed, i);
    Scenario sc = make_scenario(cfg, rng);
    ChannelSet ch = sample_channel(sc, rng);
    ds.samples.push_back({std::move(sc.assoc), std::move(ch.h)});
  }
  return ds;
}

/// First `n` samples of `ds`.
inline Dataset head(const Dataset& ds, std::size_t n) {
  Dataset out = ds;
  out.samples.resize(std::min(n, ds.size()));
  return out;
}

namespace detail {

inline std::string cfds_header(const Dataset& ds) {
  nlohmann::ordered_json hdr;
  hdr["version"] = 1;
  hdr["K"] = ds.K;
  hdr["M"] = ds.M;
  hdr["N"] = ds.N;
  hdr["P"] = ds.power_budget;
  hdr["noise_power"] = ds.noise_power;
  hdr["count"] = ds.size();
  hdr["dtype"] = "c128";
  hdr["ordering"] = "k-major then m then n";
  return hdr.dump();
}

}  // namespace detail

inline std::string serialize_cfds(const Dataset& ds) {
  std::string out = detail::cfds_header(ds);
  out.push_back('\n');
  const std::size_t km = ds.K * ds.M;
  out.reserve(out.size() + ds.size() * (km + km * ds.N * 16));
  for (const auto& s : ds.samples) {
    if (s.assoc.ues() != ds.K || s.assoc.aps() != ds.M || s.h.shape() != Shape{ds.K, ds.M, ds.N})
      throw std::invalid_argument("serialize_cfds: sample shape does not match dataset header");
    for (auto d : s.assoc.raw()) out.push_back(static_cast<char>(d));
    for (const auto& z : s.h.data()) {
      const double parts[2] = {z.real(), z.imag()};
      out.append(reinterpret_cast<const char*>(parts), sizeof(parts));
    }
  }
  return out;
}

inline Dataset deserialize_cfds(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw std::runtime_error("CFDS: missing header line");
  const auto hdr = nlohmann::json::parse(bytes.substr(0, nl));
  if (hdr.at("version").get<int>() != 1 || hdr.at("dtype").get<std::string>() != "c128")
    throw std::runtime_error("CFDS: unsupported version or dtype");
  Dataset ds;
  ds.K = hdr.at("K").get<std::size_t>();
  ds.M = hdr.at("M").get<std::size_t>();
  ds.N = hdr.at("N").get<std::size_t>();
  ds.power_budget = hdr.at("P").get<double>();
  ds.noise_power = hdr.at("noise_power").get<double>();
  const auto count = hdr.at("count").get<std::size_t>();
  const std::size_t km = ds.K * ds.M, kmn = km * ds.N;
  const std::size_t per_sample = km + kmn * 16;
  if (bytes.size() - nl - 1 != count * per_sample) throw std::runtime_error("CFDS: payload size mismatch");
  const char* p = bytes.data() + nl + 1;
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::uint8_t> d(p, p + km);
    p += km;
    Tensor h({ds.K, ds.M, ds.N});
    for (std::size_t j = 0; j < kmn; ++j) {
      double parts[2];
      std::memcpy(parts, p, sizeof(parts));
      p += sizeof(parts);
      h[j] = cplx(parts[0], parts[1]);
    }
    ds.samples.push_back({Association(ds.K, ds.M, std::move(d)), std::move(h)});
  }
  return ds;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes via a temporary file and rename so readers never see partial output.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void save_cfds(const std::filesystem::path& path, const Dataset& ds) {
  write_file_atomic(path, serialize_cfds(ds));
}

inline Dataset load_cfds(const std::filesystem::path& path) { return deserialize_cfds(read_file(path)); }

/// Hex SHA-256 of `bytes`.
inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

/// Content digest of a dataset (SHA-256 of its CFDS serialization).
inline std::string dataset_digest(const Dataset& ds) { return sha256_hex(serialize_cfds(ds)); }

}  // namespace cellfree
