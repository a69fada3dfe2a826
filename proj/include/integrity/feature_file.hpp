#pragma once

// PLAF feature files: "PLAF", u8 version (1), u32 LE dim, u64 LE count, then
// count*dim IEEE-754 float32 LE values, row-major.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "integrity/error.hpp"
#include "integrity/feature_matrix.hpp"

namespace integrity {

inline constexpr std::array<char, 4> kPlafMagic{'P', 'L', 'A', 'F'};
inline constexpr std::uint8_t kPlafVersion = 1;
inline constexpr std::size_t kPlafHeaderSize = 4 + 1 + 4 + 8;

namespace detail {

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<unsigned char>((value >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const unsigned char* p) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(p[i]) << (8 * i);
  return value;
}

}  // namespace detail

/// Serializes a matrix; values are narrowed to float32.
inline std::vector<unsigned char> encode_feature_matrix(const FeatureMatrix& m) {
  std::vector<unsigned char> out;
  out.reserve(kPlafHeaderSize + m.rows() * m.dim() * 4);
  out.insert(out.end(), kPlafMagic.begin(), kPlafMagic.end());
  out.push_back(kPlafVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.dim()));
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
  const RowMatrix& data = m.data();
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    const auto f = static_cast<float>(data.data()[i]);
    if (!std::isfinite(f)) throw Error(ErrorCode::NonFiniteValue, "value does not fit a finite float32");
    detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline FeatureMatrix decode_feature_matrix(const std::vector<unsigned char>& bytes, const std::string& origin = "") {
  const std::string where = origin.empty() ? std::string("feature file") : origin;
  if (bytes.size() < 4 || !std::equal(kPlafMagic.begin(), kPlafMagic.end(), bytes.begin(),
                                      [](char a, unsigned char b) { return static_cast<unsigned char>(a) == b; }))
    throw Error(ErrorCode::BadMagic, where + ": not a PLAF file");
  if (bytes.size() < 5) throw Error(ErrorCode::TruncatedPayload, where + ": header cut short");
  if (bytes[4] != kPlafVersion)
    throw Error(ErrorCode::VersionUnsupported, where + ": version " + std::to_string(bytes[4]) + " is not supported");
  if (bytes.size() < kPlafHeaderSize) throw Error(ErrorCode::TruncatedPayload, where + ": header cut short");
  const auto dim = detail::get_le<std::uint32_t>(bytes.data() + 5);
  const auto count = detail::get_le<std::uint64_t>(bytes.data() + 9);
  if (dim == 0) throw Error(ErrorCode::InvalidArgument, where + ": dim must be positive");
  const std::size_t payload = bytes.size() - kPlafHeaderSize;
  // guard the multiplication against absurd headers
  if (count > payload / 4 / dim || payload != count * dim * 4)
    throw Error(ErrorCode::TruncatedPayload, where + ": header declares " + std::to_string(count) + "x" +
                                                 std::to_string(dim) + " values, payload holds " +
                                                 std::to_string(payload) + " bytes");
  RowMatrix data(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
  const unsigned char* p = bytes.data() + kPlafHeaderSize;
  for (Eigen::Index i = 0; i < data.size(); ++i, p += 4) {
    const float f = std::bit_cast<float>(detail::get_le<std::uint32_t>(p));
    if (!std::isfinite(f)) throw Error(ErrorCode::NonFiniteValue, where + ": value " + std::to_string(i) + " is not finite");
    data.data()[i] = f;
  }
  if (count == 0) return FeatureMatrix(dim);
  return FeatureMatrix(std::move(data));
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline FeatureMatrix read_feature_file(const std::filesystem::path& path) {
  return decode_feature_matrix(read_bytes(path), path.string());
}

inline void write_feature_file(const std::filesystem::path& path, const FeatureMatrix& m) {
  const auto bytes = encode_feature_matrix(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

/// CSV import: first line `dim=<d>`, then one comma-separated row per line.
inline FeatureMatrix read_feature_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("dim=", 0) != 0)
    throw Error(ErrorCode::BadMagic, path.string() + ": first line must be dim=<d>");
  std::size_t dim = 0;
  try {
    dim = std::stoul(line.substr(4));
  } catch (const std::exception&) {
    throw Error(ErrorCode::BadMagic, path.string() + ": unreadable dim header");
  }
  if (dim == 0) throw Error(ErrorCode::InvalidArgument, path.string() + ": dim must be positive");
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw Error(ErrorCode::InvalidArgument, path.string() + ":" + std::to_string(line_no) + ": bad number '" + cell + "'");
      }
      if (!std::isfinite(row.back()))
        throw Error(ErrorCode::NonFiniteValue, path.string() + ":" + std::to_string(line_no) + ": non-finite value");
    }
    if (row.size() != dim)
      throw Error(ErrorCode::DimensionMismatch, path.string() + ":" + std::to_string(line_no) + ": expected " +
                                                    std::to_string(dim) + " values, got " + std::to_string(row.size()));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) return FeatureMatrix(dim);
  return FeatureMatrix::from_rows(rows);
}

}  // namespace integrity
