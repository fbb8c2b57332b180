#pragma once

// JSON tensor documents: {"shape": [...], "data": [...]} with data flat or
// nested, or {"shape": [...], "data_b64": "..."} holding little-endian
// 64-bit reals. Model initializers use the same layout.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "json.hpp"
#include "siglass/error.hpp"
#include "siglass/tensor.hpp"

namespace siglass {

using Json = nlohmann::json;

namespace detail {

inline constexpr std::string_view kBase64Alphabet =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(const std::uint8_t* bytes, std::size_t n) {
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (std::size_t i = 0; i < n; i += 3) {
    std::uint32_t chunk = std::uint32_t(bytes[i]) << 16;
    if (i + 1 < n) chunk |= std::uint32_t(bytes[i + 1]) << 8;
    if (i + 2 < n) chunk |= std::uint32_t(bytes[i + 2]);
    out.push_back(kBase64Alphabet[(chunk >> 18) & 63]);
    out.push_back(kBase64Alphabet[(chunk >> 12) & 63]);
    out.push_back(i + 1 < n ? kBase64Alphabet[(chunk >> 6) & 63] : '=');
    out.push_back(i + 2 < n ? kBase64Alphabet[chunk & 63] : '=');
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(std::string_view text) {
  std::array<int, 256> table{};
  table.fill(-1);
  for (std::size_t i = 0; i < kBase64Alphabet.size(); ++i)
    table[static_cast<unsigned char>(kBase64Alphabet[i])] = static_cast<int>(i);
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=' || c == '\n' || c == '\r' || c == ' ') continue;
    const int v = table[static_cast<unsigned char>(c)];
    if (v < 0) throw Error(ErrorKind::MalformedDocument, "invalid base64 character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

inline void flatten_numbers(const Json& j, std::vector<double>& out) {
  if (j.is_array()) {
    for (const auto& e : j) flatten_numbers(e, out);
  } else if (j.is_number()) {
    out.push_back(j.get<double>());
  } else {
    throw Error(ErrorKind::MalformedDocument, "tensor data must contain only numbers");
  }
}

}  // namespace detail

inline std::string encode_f64_base64(const std::vector<double>& values) {
  std::vector<std::uint8_t> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int k = 0; k < 8; ++k) bytes[i * 8 + k] = static_cast<std::uint8_t>(bits >> (8 * k));
  }
  return detail::base64_encode(bytes.data(), bytes.size());
}

inline std::vector<double> decode_f64_base64(std::string_view text) {
  const auto bytes = detail::base64_decode(text);
  if (bytes.size() % 8 != 0)
    throw Error(ErrorKind::MalformedDocument, "data_b64 length is not a multiple of 8 bytes");
  std::vector<double> values(bytes.size() / 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= std::uint64_t(bytes[i * 8 + k]) << (8 * k);
    values[i] = std::bit_cast<double>(bits);
  }
  return values;
}

inline Shape parse_shape(const Json& j) {
  if (!j.is_array()) throw Error(ErrorKind::MalformedDocument, "shape must be an array");
  Shape shape;
  for (const auto& d : j) {
    if (!d.is_number_integer() || d.get<std::int64_t>() <= 0)
      throw Error(ErrorKind::MalformedDocument, "shape dims must be positive integers");
    shape.push_back(d.get<std::int64_t>());
  }
  return shape;
}

inline Tensor tensor_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("shape"))
    throw Error(ErrorKind::MalformedDocument, "tensor object requires a shape");
  Shape shape = parse_shape(j.at("shape"));
  std::vector<double> data;
  if (j.contains("data_b64")) {
    data = decode_f64_base64(j.at("data_b64").get<std::string>());
  } else if (j.contains("data")) {
    detail::flatten_numbers(j.at("data"), data);
  } else {
    throw Error(ErrorKind::MalformedDocument, "tensor object requires data or data_b64");
  }
  if (static_cast<std::int64_t>(data.size()) != numel(shape))
    throw Error(ErrorKind::MalformedDocument, "tensor data length " + std::to_string(data.size()) +
                                                  " does not match shape " + shape_string(shape));
  return Tensor(std::move(shape), std::move(data));
}

inline Json tensor_to_json(const Tensor& t, bool base64 = false) {
  Json j;
  j["shape"] = t.shape;
  if (base64)
    j["data_b64"] = encode_f64_base64(t.data);
  else
    j["data"] = t.data;
  return j;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path, {path});
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path, {path});
  out << text;
}

inline Json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorKind::MalformedDocument, what + ": " + e.what());
  }
}

inline Tensor read_tensor_file(const std::string& path) {
  return tensor_from_json(parse_json_text(read_text_file(path), path));
}

inline void write_tensor_file(const std::string& path, const Tensor& t, bool base64 = false) {
  write_text_file(path, tensor_to_json(t, base64).dump());
}

}  // namespace siglass
