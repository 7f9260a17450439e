#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lvt/tensor.hpp"

namespace lvt::io {

// Binary tensor dump. Layout: magic bytes ("LTNSR1" for f64 payloads,
// "LTNSR1f" for f32), u32 little-endian rank, rank u64 little-endian
// extents, then the row-major payload. f64 dumps round-trip bit-exactly.
void save_tensor(const std::string& path, const Tensor& t);
void save_tensor_f32(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Shortest round-trip decimal form of a double; parsing it recovers the
// exact bits, which keeps CSV output stable across identical runs.
std::string format_double(double v);

// FNV-1a over bytes; used to fingerprint canonical config echoes.
std::uint64_t fnv1a64(const std::string& s);

// Minimal CSV emitter. Comment lines (prefixed '#') carry the resolved
// config echo; the header is written once before the first row.
class CsvWriter {
 public:
  CsvWriter(std::string path, std::string header);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  void comment(const std::string& line);
  void row(const std::vector<std::string>& cells);
  void flush();

 private:
  struct Impl;
  Impl* impl_;
};

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace lvt::io
