#pragma once

// Row-major observation table plus CSV I/O. One row per observation, no
// header by default; values are written with 17 significant digits so a
// write/read round trip is exact.

#include <cstdio>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "evb/matrix.hpp"

namespace evb {

struct Dataset {
  Vec values;  // row-major, n_rows x n_cols
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  bool centered = false;

  Dataset() = default;
  Dataset(std::size_t rows, std::size_t cols)
      : values(rows * cols, 0.0), n_rows(rows), n_cols(cols) {}

  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(values.data() + i * n_cols, n_cols);
  }
  double& at(std::size_t i, std::size_t j) { return values[i * n_cols + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * n_cols + j]; }

  Vec column_means() const {
    Vec mu(n_cols, 0.0);
    for (std::size_t i = 0; i < n_rows; ++i)
      for (std::size_t j = 0; j < n_cols; ++j) mu[j] += at(i, j);
    for (double& m : mu) m /= static_cast<double>(n_rows);
    return mu;
  }

  void center() {
    const Vec mu = column_means();
    for (std::size_t i = 0; i < n_rows; ++i)
      for (std::size_t j = 0; j < n_cols; ++j) at(i, j) -= mu[j];
    centered = true;
  }
};

inline Dataset read_csv(const std::string& path, bool has_header = false) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_csv: cannot open " + path);
  std::string line;
  std::vector<Vec> rows;
  bool first = true;
  while (std::getline(in, line)) {
    if (first && has_header) {
      first = false;
      continue;
    }
    first = false;
    if (line.empty()) continue;
    Vec row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t pos = 0;
        const double v = std::stod(cell, &pos);
        row.push_back(v);
      } catch (const std::exception&) {
        throw std::runtime_error("read_csv: malformed value '" + cell + "' in " + path);
      }
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw std::runtime_error("read_csv: ragged rows in " + path);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("read_csv: no data rows in " + path);
  Dataset ds(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < ds.n_rows; ++i)
    for (std::size_t j = 0; j < ds.n_cols; ++j) ds.at(i, j) = rows[i][j];
  if (!all_finite(ds.values)) throw std::runtime_error("read_csv: non-finite value in " + path);
  return ds;
}

inline void write_csv(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_csv: cannot open " + path);
  char buf[40];
  for (std::size_t i = 0; i < ds.n_rows; ++i) {
    for (std::size_t j = 0; j < ds.n_cols; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", ds.at(i, j));
      out << buf;
      if (j + 1 < ds.n_cols) out << ',';
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write_csv: write failed for " + path);
}

}  // namespace evb
