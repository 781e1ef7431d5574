// saasr/tensor_io.cc

#include "saasr/tensor_io.h"

#include <cstring>
#include <fstream>
#include <sstream>

namespace saasr {

namespace {

std::string shape_to_str(const std::vector<int>& shape) {
  std::string out;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out;
}

std::vector<int> parse_shape(const std::string& s) {
  std::vector<int> shape;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    SAASR_REQUIRE(!part.empty(), ConfigError, "malformed shape field '", s, "'");
    shape.push_back(std::stoi(part));
    SAASR_REQUIRE(shape.back() > 0, ConfigError, "non-positive dimension in shape '", s, "'");
  }
  SAASR_REQUIRE(!shape.empty(), ConfigError, "empty shape field");
  return shape;
}

}  // namespace

void TensorWriter::add_raw(const std::string& name, const std::vector<int>& shape,
                           const char* bytes, std::size_t nbytes, const char* dtype) {
  SAASR_REQUIRE(!name.empty() && name.find(' ') == std::string::npos &&
                    name.find('\n') == std::string::npos,
                ConfigError, "tensor name '", name, "' must be non-empty without whitespace");
  for (const auto& [existing, _] : entries_)
    SAASR_REQUIRE(existing != name, ConfigError, "duplicate tensor name '", name, "'");
  TensorEntry e;
  e.shape = shape;
  e.dtype = dtype;
  e.offset = stream_.size();
  entries_.emplace_back(name, e);
  stream_.insert(stream_.end(), bytes, bytes + nbytes);
}

void TensorWriter::add_f32(const std::string& name, const std::vector<int>& shape,
                           const float* data) {
  TensorEntry probe;
  probe.shape = shape;
  add_raw(name, shape, reinterpret_cast<const char*>(data),
          static_cast<std::size_t>(probe.numel()) * sizeof(float), "f32");
}

void TensorWriter::add_f64(const std::string& name, const std::vector<int>& shape,
                           const double* data) {
  TensorEntry probe;
  probe.shape = shape;
  add_raw(name, shape, reinterpret_cast<const char*>(data),
          static_cast<std::size_t>(probe.numel()) * sizeof(double), "f64");
}

void TensorWriter::save(const std::string& bin_path, const std::string& manifest_path) const {
  {
    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    SAASR_REQUIRE(bin.good(), Error, "cannot open '", bin_path, "' for writing");
    bin.write(stream_.data(), static_cast<std::streamsize>(stream_.size()));
    SAASR_REQUIRE(bin.good(), Error, "short write to '", bin_path, "'");
  }
  std::ofstream man(manifest_path, std::ios::trunc);
  SAASR_REQUIRE(man.good(), Error, "cannot open '", manifest_path, "' for writing");
  for (const auto& [name, e] : entries_)
    man << name << " " << shape_to_str(e.shape) << " " << e.dtype << " " << e.offset << "\n";
  SAASR_REQUIRE(man.good(), Error, "short write to '", manifest_path, "'");
}

TensorReader TensorReader::open(const std::string& bin_path, const std::string& manifest_path) {
  TensorReader r;
  {
    std::ifstream bin(bin_path, std::ios::binary);
    SAASR_REQUIRE(bin.good(), Error, "cannot open '", bin_path, "'");
    bin.seekg(0, std::ios::end);
    const auto size = bin.tellg();
    bin.seekg(0);
    r.stream_.resize(static_cast<size_t>(size));
    bin.read(r.stream_.data(), size);
    SAASR_REQUIRE(bin.good(), Error, "short read from '", bin_path, "'");
  }
  std::ifstream man(manifest_path);
  SAASR_REQUIRE(man.good(), Error, "cannot open '", manifest_path, "'");
  std::string line;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string name, shape_s, dtype;
    std::uint64_t offset = 0;
    SAASR_REQUIRE(static_cast<bool>(ss >> name >> shape_s >> dtype >> offset), ConfigError,
                  "malformed manifest line '", line, "'");
    SAASR_REQUIRE(dtype == "f32" || dtype == "f64", ConfigError, "unknown dtype '", dtype,
                  "' in manifest line '", line, "'");
    TensorEntry e;
    e.shape = parse_shape(shape_s);
    e.dtype = dtype;
    e.offset = offset;
    const std::size_t width = dtype == "f32" ? sizeof(float) : sizeof(double);
    SAASR_REQUIRE(e.offset + static_cast<std::uint64_t>(e.numel()) * width <= r.stream_.size(),
                  ConfigError, "tensor '", name, "' extends past end of '", bin_path, "'");
    SAASR_REQUIRE(r.entries_.emplace(name, e).second, ConfigError,
                  "duplicate tensor '", name, "' in manifest");
    r.order_.push_back(name);
  }
  return r;
}

const TensorEntry& TensorReader::entry(const std::string& name) const {
  auto it = entries_.find(name);
  SAASR_REQUIRE(it != entries_.end(), IndexError, "no tensor named '", name, "'");
  return it->second;
}

std::vector<float> TensorReader::read_f32(const std::string& name) const {
  const auto& e = entry(name);
  const auto n = static_cast<size_t>(e.numel());
  std::vector<float> out(n);
  if (e.dtype == "f32") {
    std::memcpy(out.data(), stream_.data() + e.offset, n * sizeof(float));
  } else {
    std::vector<double> tmp(n);
    std::memcpy(tmp.data(), stream_.data() + e.offset, n * sizeof(double));
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<float>(tmp[i]);
  }
  return out;
}

std::vector<double> TensorReader::read_f64(const std::string& name) const {
  const auto& e = entry(name);
  const auto n = static_cast<size_t>(e.numel());
  std::vector<double> out(n);
  if (e.dtype == "f64") {
    std::memcpy(out.data(), stream_.data() + e.offset, n * sizeof(double));
  } else {
    std::vector<float> tmp(n);
    std::memcpy(tmp.data(), stream_.data() + e.offset, n * sizeof(float));
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<double>(tmp[i]);
  }
  return out;
}

}  // namespace saasr
