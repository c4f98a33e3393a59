#include "tdciv/panel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "tdciv/errors.hpp"

namespace tdciv {

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

double parse_double(const std::string& cell, std::size_t line_no, std::size_t col_no) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw ParseError("panel: line " + std::to_string(line_no) + ", column " +
                     std::to_string(col_no + 1) + ": cannot parse '" + cell + "' as a number");
  if (std::isnan(v) || std::isinf(v))
    throw ParseError("panel: line " + std::to_string(line_no) + ", column " +
                     std::to_string(col_no + 1) + ": non-finite value '" + cell + "'");
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void PanelDataset::validate() const {
  if (n == 0 || horizon == 0) throw ContractError("panel: empty dataset");
  auto check_len = [&](const std::vector<double>& v, std::size_t want, const char* name) {
    if (v.size() != want)
      throw ContractError("panel: " + std::string(name) + " has " + std::to_string(v.size()) +
                          " entries, expected " + std::to_string(want));
  };
  check_len(x, n * horizon * dim_x, "x");
  check_len(w, n * horizon, "w");
  check_len(y, n * horizon, "y");
  if (has_u()) check_len(u, n * horizon * dim_u, "u");
  if (has_s()) check_len(s, n * horizon, "s_true");
  if (has_z()) check_len(z, n * horizon * dim_z, "z");
  for (double v : w)
    if (v != 0.0 && v != 1.0)
      throw ContractError("panel: treatment entry " + std::to_string(v) + " is not binary");
  for (const auto* vec : {&x, &w, &y, &u, &s, &z})
    for (double v : *vec)
      if (!std::isfinite(v)) throw ContractError("panel: non-finite entry");
}

void write_panel(const PanelDataset& data, const std::string& path) {
  data.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("panel: cannot open '" + path + "' for writing");

  if (data.true_ace) out << "# true_ace=" << format_g17(*data.true_ace) << "\n";
  out << "sample,t";
  for (std::size_t j = 0; j < data.dim_x; ++j) out << ",x_" << j;
  out << ",w,y";
  if (data.has_u())
    for (std::size_t j = 0; j < data.dim_u; ++j) out << ",u_" << j;
  if (data.has_s()) out << ",s_true";
  if (data.has_z())
    for (std::size_t j = 0; j < data.dim_z; ++j) out << ",z_" << j;
  out << "\n";

  for (std::size_t i = 0; i < data.n; ++i) {
    for (std::size_t t = 1; t <= data.horizon; ++t) {
      out << i << "," << t;
      for (std::size_t j = 0; j < data.dim_x; ++j) out << "," << format_g17(data.x_at(i, t, j));
      out << "," << (data.w_at(i, t) == 1.0 ? "1" : "0");
      out << "," << format_g17(data.y_at(i, t));
      if (data.has_u())
        for (std::size_t j = 0; j < data.dim_u; ++j) out << "," << format_g17(data.u_at(i, t, j));
      if (data.has_s()) out << "," << format_g17(data.s_at(i, t));
      if (data.has_z())
        for (std::size_t j = 0; j < data.dim_z; ++j) out << "," << format_g17(data.z_at(i, t, j));
      out << "\n";
    }
  }
  if (!out) throw Error("panel: write to '" + path + "' failed");
}

PanelDataset read_panel(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("panel: cannot open '" + path + "'");

  PanelDataset data;
  std::string line;
  std::size_t line_no = 0;

  // Optional '#' metadata preamble.
  std::string header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line[0] == '#') {
      const auto eq = line.find("true_ace=");
      if (eq != std::string::npos)
        data.true_ace = parse_double(line.substr(eq + 9), line_no, 0);
      continue;
    }
    header = line;
    break;
  }
  if (header.empty()) throw ParseError("panel: missing header row");

  const std::vector<std::string> cols = split_csv(header);
  std::size_t idx = 0;
  auto expect = [&](const std::string& name) {
    if (idx >= cols.size() || cols[idx] != name)
      throw ParseError("panel: line " + std::to_string(line_no) + ": expected header column '" +
                       name + "' at position " + std::to_string(idx + 1) +
                       (idx < cols.size() ? ", found '" + cols[idx] + "'" : ", found end of row"));
    ++idx;
  };
  auto count_prefixed = [&](const std::string& prefix) {
    std::size_t k = 0;
    while (idx < cols.size() && cols[idx] == prefix + std::to_string(k)) {
      ++idx;
      ++k;
    }
    return k;
  };

  expect("sample");
  expect("t");
  data.dim_x = count_prefixed("x_");
  if (data.dim_x == 0)
    throw ParseError("panel: header has no x_0 column (line " + std::to_string(line_no) + ")");
  expect("w");
  expect("y");
  data.dim_u = count_prefixed("u_");
  bool has_s_col = false;
  if (idx < cols.size() && cols[idx] == "s_true") {
    has_s_col = true;
    ++idx;
  }
  data.dim_z = count_prefixed("z_");
  if (idx != cols.size())
    throw ParseError("panel: unrecognized header column '" + cols[idx] + "' at position " +
                     std::to_string(idx + 1));

  const std::size_t n_cols = cols.size();
  struct Row {
    long sample;
    long t;
    std::vector<double> vals;
  };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_csv(line);
    if (cells.size() != n_cols)
      throw ParseError("panel: line " + std::to_string(line_no) + ": has " +
                       std::to_string(cells.size()) + " cells, header has " +
                       std::to_string(n_cols));
    Row r;
    r.sample = static_cast<long>(parse_double(cells[0], line_no, 0));
    r.t = static_cast<long>(parse_double(cells[1], line_no, 1));
    r.vals.reserve(n_cols - 2);
    for (std::size_t c = 2; c < n_cols; ++c) r.vals.push_back(parse_double(cells[c], line_no, c));
    const double wv = r.vals[data.dim_x];
    if (wv != 0.0 && wv != 1.0)
      throw ParseError("panel: line " + std::to_string(line_no) + ": treatment value '" +
                       cells[2 + data.dim_x] + "' is not 0/1");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ParseError("panel: no data rows");

  // Rows must arrive sorted by (sample, t) with t = 1..T and samples 0..n-1.
  if (rows[0].sample != 0 || rows[0].t != 1)
    throw ParseError("panel: first row must be sample 0, t 1");
  long T = 0;
  for (const Row& r : rows) {
    if (r.sample != 0) break;
    T = std::max(T, r.t);
  }
  if (rows.size() % static_cast<std::size_t>(T) != 0)
    throw ParseError("panel: row count " + std::to_string(rows.size()) +
                     " is not a multiple of horizon " + std::to_string(T));
  const std::size_t n = rows.size() / static_cast<std::size_t>(T);
  for (std::size_t i = 0; i < n; ++i)
    for (long t = 1; t <= T; ++t) {
      const Row& r = rows[i * T + (t - 1)];
      if (r.sample != static_cast<long>(i) || r.t != t)
        throw ParseError("panel: row " + std::to_string(i * T + t + 1) +
                         ": expected (sample,t) = (" + std::to_string(i) + "," +
                         std::to_string(t) + "), found (" + std::to_string(r.sample) + "," +
                         std::to_string(r.t) + ")");
    }

  data.n = n;
  data.horizon = static_cast<std::size_t>(T);
  data.x.resize(n * data.horizon * data.dim_x);
  data.w.resize(n * data.horizon);
  data.y.resize(n * data.horizon);
  if (data.dim_u) data.u.resize(n * data.horizon * data.dim_u);
  if (has_s_col) data.s.resize(n * data.horizon);
  if (data.dim_z) data.z.resize(n * data.horizon * data.dim_z);

  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 1; t <= data.horizon; ++t) {
      const std::vector<double>& v = rows[i * data.horizon + (t - 1)].vals;
      std::size_t c = 0;
      for (std::size_t j = 0; j < data.dim_x; ++j) data.x_at(i, t, j) = v[c++];
      data.w_at(i, t) = v[c++];
      data.y_at(i, t) = v[c++];
      for (std::size_t j = 0; j < data.dim_u; ++j) data.u_at(i, t, j) = v[c++];
      if (has_s_col) data.s_at(i, t) = v[c++];
      for (std::size_t j = 0; j < data.dim_z; ++j) data.z_at(i, t, j) = v[c++];
    }
  data.validate();
  return data;
}

}  // namespace tdciv
