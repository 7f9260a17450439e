#include "lvt/tensor_io.hpp"

#include <charconv>
#include <cstring>
#include <fstream>

#include "lvt/error.hpp"

namespace lvt::io {

namespace {

void put_u32_le(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  f.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64_le(std::ofstream& f, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  f.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32_le(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64_le(std::ifstream& f) {
  unsigned char b[8];
  f.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void save_impl(const std::string& path, const Tensor& t, bool f32) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(f32 ? "LTNSR1f" : "LTNSR1", f32 ? 7 : 6);
  put_u32_le(f, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_u64_le(f, static_cast<std::uint64_t>(e));
  if (f32) {
    for (double v : t.values()) {
      const float x = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &x, 4);
      put_u32_le(f, bits);
    }
  } else {
    for (double v : t.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_u64_le(f, bits);
    }
  }
  if (!f) throw IoError("short write: " + path);
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) {
  save_impl(path, t, false);
}

void save_tensor_f32(const std::string& path, const Tensor& t) {
  save_impl(path, t, true);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  char magic[6];
  f.read(magic, 6);
  if (!f || std::memcmp(magic, "LTNSR1", 6) != 0)
    throw IoError("bad magic in " + path);
  // The rank that follows is at most 8, so its first little-endian byte can
  // never be 'f'; a peeked 'f' must be the f32 magic suffix.
  bool f32 = false;
  if (f.peek() == 'f') {
    f.get();
    f32 = true;
  }
  const std::uint32_t rank = get_u32_le(f);
  if (!f || rank == 0 || rank > 8)
    throw IoError("implausible rank " + std::to_string(rank) + " in " + path);
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::int64_t>(get_u64_le(f));
  const std::int64_t n = shape_numel(shape);
  std::vector<double> data(static_cast<std::size_t>(n));
  if (f32) {
    for (auto& v : data) {
      const std::uint32_t bits = get_u32_le(f);
      float x;
      std::memcpy(&x, &bits, 4);
      v = static_cast<double>(x);
    }
  } else {
    for (auto& v : data) {
      const std::uint64_t bits = get_u64_le(f);
      std::memcpy(&v, &bits, 8);
    }
  }
  if (!f) throw IoError("truncated payload in " + path);
  return Tensor::from_data(std::move(shape), std::move(data));
}

std::string format_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

struct CsvWriter::Impl {
  std::ofstream file;
  std::string header;
  bool header_written = false;
};

CsvWriter::CsvWriter(std::string path, std::string header)
    : impl_(new Impl) {
  impl_->file.open(path, std::ios::trunc);
  if (!impl_->file) {
    delete impl_;
    throw IoError("cannot open for writing: " + path);
  }
  impl_->header = std::move(header);
}

CsvWriter::~CsvWriter() {
  flush();
  delete impl_;
}

void CsvWriter::comment(const std::string& line) {
  if (impl_->header_written)
    throw UsageError("CSV comments must precede the header");
  impl_->file << "# " << line << "\n";
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (!impl_->header_written) {
    impl_->file << impl_->header << "\n";
    impl_->header_written = true;
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) impl_->file << ",";
    impl_->file << cells[i];
  }
  impl_->file << "\n";
}

void CsvWriter::flush() {
  if (!impl_->header_written) {
    impl_->file << impl_->header << "\n";
    impl_->header_written = true;
  }
  impl_->file.flush();
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::string s((std::istreambuf_iterator<char>(f)),
                std::istreambuf_iterator<char>());
  return s;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << content;
  if (!f) throw IoError("short write: " + path);
}

}  // namespace lvt::io
