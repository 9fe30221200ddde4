#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "staflow/common.hpp"

namespace staflow {

/// Formats a value with enough digits to round-trip bit-exactly through
/// decimal text.
template <typename T>
std::string format_exact(T v) {
  char buf[64];
  if constexpr (sizeof(T) == sizeof(float)) {
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  } else {
    std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(v));
  }
  return buf;
}

/// Writes a row-major matrix as CSV; `header` (when non-empty) becomes the
/// first line.
template <typename T>
void write_matrix_csv(const std::filesystem::path& path,
                      const std::vector<T>& data, std::size_t rows,
                      std::size_t cols,
                      const std::vector<std::string>& header = {}) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  if (!header.empty()) {
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (j) out << ',';
      out << header[j];
    }
    out << '\n';
  }
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      if (j) out << ',';
      out << format_exact(data[i * cols + j]);
    }
    out << '\n';
  }
  if (!out) throw DataError("write failure on " + path.string());
}

struct CsvMatrix {
  std::vector<std::string> header;  // empty if the first row was numeric
  std::vector<double> data;         // row-major
  std::size_t rows = 0;
  std::size_t cols = 0;
};

/// Reads a CSV of numbers, treating a non-numeric first row as a header.
/// Ragged rows abort with the offending file/line.
inline CsvMatrix read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  CsvMatrix out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.push_back("");

    bool numeric = true;
    std::vector<double> row;
    row.reserve(fields.size());
    for (const auto& f : fields) {
      double v = 0;
      const char* begin = f.data();
      const char* end = begin + f.size();
      while (begin < end && (*begin == ' ' || *begin == '\t')) ++begin;
      auto [ptr, ec] = std::from_chars(begin, end, v);
      if (ec != std::errc{} || ptr != end) {
        numeric = false;
        break;
      }
      row.push_back(v);
    }
    if (!numeric) {
      if (out.rows == 0 && out.header.empty() && out.data.empty()) {
        out.header = fields;
        continue;
      }
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": non-numeric value in data row");
    }
    if (out.cols == 0) {
      out.cols = row.size();
    } else if (row.size() != out.cols) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": ragged row, expected " + std::to_string(out.cols) +
                      " fields but got " + std::to_string(row.size()));
    }
    out.data.insert(out.data.end(), row.begin(), row.end());
    ++out.rows;
  }
  return out;
}

}  // namespace staflow
