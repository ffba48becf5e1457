#pragma once

// Parameter files: 8-byte magic, u64 little-endian header length, a JSON
// header listing every tensor, then the tensors as little-endian f64 in
// header order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "json.hpp"
#include "soft/model.hpp"

namespace soft {

inline constexpr char kParamMagic[8] = {'S', 'O', 'F', 'T', 'P', 'R', 'M', '1'};
inline constexpr int kParamVersion = 1;

namespace io_detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw ConfigError("load_parameters: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_f64(std::ostream& os, double x) { put_u64(os, std::bit_cast<std::uint64_t>(x)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

inline nlohmann::json describe(const ClassifierConfig& c) {
  const BlockConfig& b = c.block;
  return {{"d", b.d},
          {"heads", b.heads},
          {"grid", {b.grid.h, b.grid.w}},
          {"sampling", to_string(b.sampling)},
          {"kernel", b.kernel},
          {"m", b.m},
          {"normalized", b.normalized},
          {"ffn_expansion", b.ffn_expansion},
          {"classes", c.classes}};
}

}  // namespace io_detail

inline void save_parameters(std::ostream& os, ToyClassifier& model) {
  nlohmann::json header;
  header["format"] = "soft-params";
  header["version"] = kParamVersion;
  header["dtype"] = "f64-le";
  header["config"] = io_detail::describe(model.config());
  auto params = model.parameters();
  for (auto& [name, p] : params) header["tensors"].push_back({{"name", name}, {"shape", {p->value.rows(), p->value.cols()}}});
  const std::string text = header.dump();
  os.write(kParamMagic, sizeof kParamMagic);
  io_detail::put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (auto& entry : params)
    for (double x : entry.second->value.flat()) io_detail::put_f64(os, x);
  if (!os) throw ConfigError("save_parameters: write failed");
}

// The model must already have the architecture recorded in the file.
inline void load_parameters(std::istream& is, ToyClassifier& model) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kParamMagic, 8) != 0)
    throw ConfigError("load_parameters: not a parameter file");
  const std::uint64_t len = io_detail::get_u64(is);
  if (len > (1u << 24)) throw ConfigError("load_parameters: header too large");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw ConfigError("load_parameters: truncated header");
  nlohmann::json header = nlohmann::json::parse(text, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "soft-params")
    throw ConfigError("load_parameters: malformed header");
  if (header.value("version", 0) != kParamVersion) throw ConfigError("load_parameters: unsupported version");
  if (header["config"] != io_detail::describe(model.config()))
    throw ConfigError("load_parameters: architecture mismatch: file has " + header["config"].dump());
  auto params = model.parameters();
  const auto& tensors = header["tensors"];
  if (!tensors.is_array() || tensors.size() != params.size())
    throw ConfigError("load_parameters: tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& v = params[i].second->value;
    if (tensors[i]["name"] != params[i].first ||
        tensors[i]["shape"] != nlohmann::json({v.rows(), v.cols()}))
      throw ShapeError("load_parameters: tensor " + params[i].first + " does not match file entry " +
                       tensors[i].dump());
  }
  for (auto& entry : params) {
    Matrix loaded(entry.second->value.rows(), entry.second->value.cols());
    for (double& x : loaded.flat()) x = io_detail::get_f64(is);
    entry.second->value = std::move(loaded);
  }
}

inline void save_parameters(const std::string& path, ToyClassifier& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("save_parameters: cannot open " + path);
  save_parameters(os, model);
}

inline void load_parameters(const std::string& path, ToyClassifier& model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("load_parameters: cannot open " + path);
  load_parameters(is, model);
}

}  // namespace soft
