#pragma once

// CSV matrices (comma separated, no header, one row per line) and shortest
// round-trip number formatting.

#include "vcee/core.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>

namespace vcee {

class ParseError : public Error {
public:
  ParseError(const std::string& file, int line, const std::string& what)
      : Error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

private:
  int line_;
};

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline double parse_double(const std::string& field, const std::string& file, int line) {
  const std::string t = trim(field);
  if (t.empty()) throw ParseError(file, line, "empty field");
  double value = 0.0;
  const char* begin = t.data();
  const char* end = t.data() + t.size();
  if (*begin == '+') ++begin;
  const auto res = std::from_chars(begin, end, value);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ParseError(file, line, "not a number: '" + t + "'");
  }
  return value;
}

} // namespace detail

/// Parse CSV text; `name` is used in error messages.
inline Matrix parse_csv(std::istream& in, const std::string& name = "<csv>") {
  std::vector<std::vector<double>> rows;
  std::string text;
  int line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (detail::trim(text).empty()) continue;
    std::vector<double> row;
    std::stringstream ss(text);
    std::string field;
    while (std::getline(ss, field, ',')) row.push_back(detail::parse_double(field, name, line));
    if (!text.empty() && detail::trim(text).back() == ',') {
      throw ParseError(name, line, "trailing comma");
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw ParseError(name, line, "expected " + std::to_string(rows.front().size()) +
                                       " fields, found " + std::to_string(row.size()));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError(name, line, "no data");
  Matrix M(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return M;
}

inline Matrix read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return parse_csv(in, path);
}

/// A column or row vector stored as CSV.
inline Vector read_csv_vector(const std::string& path) {
  const Matrix M = read_csv(path);
  if (M.cols() == 1) return M.col(0);
  if (M.rows() == 1) return M.row(0).transpose();
  throw DimensionMismatch(path + ": expected a single row or column, got " +
                          std::to_string(M.rows()) + "x" + std::to_string(M.cols()));
}

inline void write_csv(std::ostream& out, const Matrix& M) {
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    for (Eigen::Index j = 0; j < M.cols(); ++j) {
      if (j) out << ',';
      out << format_double(M(i, j));
    }
    out << '\n';
  }
}

} // namespace vcee
