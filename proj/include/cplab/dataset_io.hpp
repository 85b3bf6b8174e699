#pragma once

#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "cplab/dataset.hpp"
#include "cplab/io.hpp"

namespace cplab {

enum class FileFormat { csv, binary };

inline FileFormat parse_format(const std::string& s) {
  if (s == "csv") return FileFormat::csv;
  if (s == "binary") return FileFormat::binary;
  throw std::invalid_argument("unknown file format: " + s);
}

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double_field(const std::string& field, std::size_t row,
                                 std::size_t col) {
  double v = 0.0;
  const char* b = field.data();
  const char* e = b + field.size();
  const auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc{} || res.ptr != e) {
    throw std::invalid_argument("csv: row " + std::to_string(row) + ", column " +
                                std::to_string(col) + ": not a number: '" +
                                field + "'");
  }
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

inline int infer_classes(DomainTag domain, std::size_t cols,
                         const std::vector<int>& labels, int requested) {
  if (requested > 0) return requested;
  if (domain == DomainTag::probability || domain == DomainTag::logit) {
    return static_cast<int>(cols);
  }
  int top = 0;
  for (const int l : labels) top = std::max(top, l);
  return top + 1;
}

}  // namespace detail

// CSV matrix format: header "x0,...,x{d-1},label", one example per row.
inline void save_dataset_csv(const Dataset& ds, const std::string& path) {
  std::string out;
  out.reserve(ds.rows * (ds.cols + 1) * 20);
  for (std::size_t j = 0; j < ds.cols; ++j) {
    out += "x" + std::to_string(j) + ",";
  }
  out += "label\n";
  for (std::size_t i = 0; i < ds.rows; ++i) {
    const auto r = ds.row(i);
    for (std::size_t j = 0; j < ds.cols; ++j) {
      out += detail::format_double(r[j]);
      out += ',';
    }
    out += std::to_string(ds.labels[i]);
    out += '\n';
  }
  write_file_atomic(path, out);
}

inline Dataset load_dataset_csv(const std::string& path, DomainTag domain,
                                int n_classes = 0) {
  const std::string text = read_file(path);
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(std::move(line));
    start = nl + 1;
  }
  if (lines.empty()) throw std::invalid_argument("csv: " + path + ": empty file");

  const auto header = detail::split_csv_line(lines[0]);
  if (header.size() < 2 || header.back() != "label") {
    throw std::invalid_argument("csv: " + path +
                                ": malformed header, expected 'x0,...,label'");
  }
  const std::size_t cols = header.size() - 1;
  for (std::size_t j = 0; j < cols; ++j) {
    if (header[j] != "x" + std::to_string(j)) {
      throw std::invalid_argument("csv: " + path + ": malformed header, column " +
                                  std::to_string(j) + " is '" + header[j] +
                                  "', expected 'x" + std::to_string(j) + "'");
    }
  }

  const std::size_t rows = lines.size() - 1;
  std::vector<double> values;
  values.reserve(rows * cols);
  std::vector<int> labels;
  labels.reserve(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto fields = detail::split_csv_line(lines[i + 1]);
    if (fields.size() != cols + 1) {
      throw std::invalid_argument("csv: row " + std::to_string(i) + ": expected " +
                                  std::to_string(cols + 1) + " fields, found " +
                                  std::to_string(fields.size()));
    }
    for (std::size_t j = 0; j < cols; ++j) {
      values.push_back(detail::parse_double_field(fields[j], i, j));
    }
    int label = 0;
    const char* b = fields[cols].data();
    const char* e = b + fields[cols].size();
    const auto res = std::from_chars(b, e, label);
    if (res.ec != std::errc{} || res.ptr != e || label < 0) {
      throw std::invalid_argument("csv: row " + std::to_string(i) +
                                  ": bad label '" + fields[cols] + "'");
    }
    labels.push_back(label);
  }
  const int classes = detail::infer_classes(domain, cols, labels, n_classes);
  return make_dataset(std::move(values), rows, cols, std::move(labels), classes,
                      domain);
}

// Companion label file: foo.cpmx <-> foo.cplb.
inline std::string companion_label_path(const std::string& matrix_path) {
  const std::string ext = ".cpmx";
  if (matrix_path.size() > ext.size() &&
      matrix_path.compare(matrix_path.size() - ext.size(), ext.size(), ext) == 0) {
    return matrix_path.substr(0, matrix_path.size() - ext.size()) + ".cplb";
  }
  return matrix_path + ".cplb";
}

// Binary matrix format: magic "CPMX", u32 version=1, u32 rows, u32 cols,
// u8 dtype (0 = f32 LE, 1 = f64 LE), then row-major values. Labels go to the
// companion file: magic "CPLB", u32 count, u32 class indices.
inline void save_dataset_binary(const Dataset& ds, const std::string& matrix_path) {
  static_assert(std::endian::native == std::endian::little,
                "binary writer assumes a little-endian host");
  std::string out;
  out.reserve(17 + ds.values.size() * 8);
  out += "CPMX";
  detail::put_u32_le(out, 1);
  detail::put_u32_le(out, static_cast<std::uint32_t>(ds.rows));
  detail::put_u32_le(out, static_cast<std::uint32_t>(ds.cols));
  out.push_back(static_cast<char>(1));  // f64
  for (const double v : ds.values) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof(bits));
    detail::put_u64_le(out, bits);
  }
  write_file_atomic(matrix_path, out);

  std::string lbl;
  lbl.reserve(8 + ds.labels.size() * 4);
  lbl += "CPLB";
  detail::put_u32_le(lbl, static_cast<std::uint32_t>(ds.labels.size()));
  for (const int l : ds.labels) {
    detail::put_u32_le(lbl, static_cast<std::uint32_t>(l));
  }
  write_file_atomic(companion_label_path(matrix_path), lbl);
}

inline Dataset load_dataset_binary(const std::string& matrix_path, DomainTag domain,
                                   int n_classes = 0) {
  const std::string data = read_file(matrix_path);
  detail::ByteReader r{data, 0, matrix_path};
  r.need(4);
  if (data.compare(0, 4, "CPMX") != 0) {
    throw std::invalid_argument(matrix_path + ": not a CPMX matrix file");
  }
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != 1) {
    throw std::invalid_argument(matrix_path + ": unsupported CPMX version " +
                                std::to_string(version));
  }
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  const std::uint8_t dtype = r.u8();
  if (dtype > 1) {
    throw std::invalid_argument(matrix_path + ": unknown dtype " + std::to_string(dtype));
  }
  const std::size_t count = static_cast<std::size_t>(rows) * cols;
  std::vector<double> values(count);
  if (dtype == 1) {
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint64_t bits = r.u64();
      double v = 0.0;
      std::memcpy(&v, &bits, sizeof(v));
      values[i] = v;
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint32_t bits = r.u32();
      float v = 0.0f;
      std::memcpy(&v, &bits, sizeof(v));
      values[i] = static_cast<double>(v);  // 32-bit inputs are up-converted
    }
  }

  const std::string label_path = companion_label_path(matrix_path);
  const std::string ldata = read_file(label_path);
  detail::ByteReader lr{ldata, 0, label_path};
  lr.need(4);
  if (ldata.compare(0, 4, "CPLB") != 0) {
    throw std::invalid_argument(label_path + ": not a CPLB label file");
  }
  lr.pos = 4;
  const std::uint32_t n_labels = lr.u32();
  if (n_labels != rows) {
    throw std::invalid_argument(label_path + ": " + std::to_string(n_labels) +
                                " labels for " + std::to_string(rows) + " rows");
  }
  std::vector<int> labels(n_labels);
  for (std::uint32_t i = 0; i < n_labels; ++i) {
    labels[i] = static_cast<int>(lr.u32());
  }
  const int classes = detail::infer_classes(domain, cols, labels, n_classes);
  return make_dataset(std::move(values), rows, cols, std::move(labels), classes,
                      domain);
}

inline Dataset load_dataset(const std::string& path, FileFormat format,
                            DomainTag domain, int n_classes = 0) {
  return format == FileFormat::csv ? load_dataset_csv(path, domain, n_classes)
                                   : load_dataset_binary(path, domain, n_classes);
}

inline void save_dataset(const Dataset& ds, const std::string& path, FileFormat format) {
  if (format == FileFormat::csv) {
    save_dataset_csv(ds, path);
  } else {
    save_dataset_binary(ds, path);
  }
}

}  // namespace cplab
