// saasr/tensor_io.h
//
// Flat binary tensor storage used by checkpoints and feature files. Values
// are written as a raw little-endian stream (the build targets x86-64, which
// is little-endian, so writes are memcpy) with a plain-text sidecar manifest
// of one line per tensor: `name shape dtype offset`, shape as `d0xd1x...`,
// dtype `f32` or `f64`, offset in bytes into the stream.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "saasr/common.h"

namespace saasr {

struct TensorEntry {
  std::vector<int> shape;
  std::string dtype;  // "f32" or "f64"
  std::uint64_t offset = 0;
  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
};

class TensorWriter {
 public:
  void add_f32(const std::string& name, const std::vector<int>& shape, const float* data);
  void add_f64(const std::string& name, const std::vector<int>& shape, const double* data);

  // Writes the value stream and the manifest. Directories must exist.
  void save(const std::string& bin_path, const std::string& manifest_path) const;

 private:
  void add_raw(const std::string& name, const std::vector<int>& shape, const char* bytes,
               std::size_t nbytes, const char* dtype);
  std::vector<char> stream_;
  std::vector<std::pair<std::string, TensorEntry>> entries_;
};

class TensorReader {
 public:
  static TensorReader open(const std::string& bin_path, const std::string& manifest_path);

  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  const TensorEntry& entry(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }

  // Reads regardless of stored dtype, converting if needed.
  std::vector<float> read_f32(const std::string& name) const;
  std::vector<double> read_f64(const std::string& name) const;

 private:
  std::vector<char> stream_;
  std::map<std::string, TensorEntry> entries_;
  std::vector<std::string> order_;
};

}  // namespace saasr
