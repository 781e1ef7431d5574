// tests/io_test.cc

#include <cstdio>
#include <vector>

#include "doctest.h"
#include "saasr/rng.h"
#include "saasr/tensor_io.h"

TEST_CASE("tensor archive round trip preserves values and shapes") {
  saasr::Rng rng(123);
  std::vector<float> a(12);
  for (auto& x : a) x = static_cast<float>(rng.normal());
  std::vector<double> b(5);
  for (auto& x : b) x = rng.normal();

  saasr::TensorWriter w;
  w.add_f32("enc.w", {3, 4}, a.data());
  w.add_f64("head.bias", {5}, b.data());
  w.save("io_test.bin", "io_test.manifest");

  auto r = saasr::TensorReader::open("io_test.bin", "io_test.manifest");
  REQUIRE(r.has("enc.w"));
  REQUIRE(r.has("head.bias"));
  CHECK_FALSE(r.has("missing"));
  CHECK(r.names() == std::vector<std::string>{"enc.w", "head.bias"});

  CHECK(r.entry("enc.w").shape == std::vector<int>{3, 4});
  CHECK(r.entry("enc.w").dtype == "f32");
  CHECK(r.entry("head.bias").dtype == "f64");

  auto a_back = r.read_f32("enc.w");
  REQUIRE(a_back.size() == a.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a_back[i] == a[i]);

  auto b_back = r.read_f64("head.bias");
  REQUIRE(b_back.size() == b.size());
  for (size_t i = 0; i < b.size(); ++i) CHECK(b_back[i] == b[i]);

  // Cross-dtype reads convert.
  auto b_f32 = r.read_f32("head.bias");
  for (size_t i = 0; i < b.size(); ++i) CHECK(b_f32[i] == static_cast<float>(b[i]));

  std::remove("io_test.bin");
  std::remove("io_test.manifest");
}

TEST_CASE("manifest offsets are byte positions in declaration order") {
  std::vector<float> x(4, 1.0f), y(2, 2.0f);
  saasr::TensorWriter w;
  w.add_f32("x", {4}, x.data());
  w.add_f32("y", {2}, y.data());
  w.save("io_test2.bin", "io_test2.manifest");
  auto r = saasr::TensorReader::open("io_test2.bin", "io_test2.manifest");
  CHECK(r.entry("x").offset == 0);
  CHECK(r.entry("y").offset == 4 * sizeof(float));
  std::remove("io_test2.bin");
  std::remove("io_test2.manifest");
}

TEST_CASE("writer rejects duplicate and malformed names") {
  std::vector<float> x(1, 0.0f);
  saasr::TensorWriter w;
  w.add_f32("a", {1}, x.data());
  CHECK_THROWS_AS(w.add_f32("a", {1}, x.data()), saasr::ConfigError);
  CHECK_THROWS_AS(w.add_f32("bad name", {1}, x.data()), saasr::ConfigError);
  CHECK_THROWS_AS(w.add_f32("", {1}, x.data()), saasr::ConfigError);
}

TEST_CASE("reader rejects truncated streams") {
  std::vector<float> x(4, 1.0f);
  saasr::TensorWriter w;
  w.add_f32("x", {4}, x.data());
  w.save("io_test3.bin", "io_test3.manifest");
  // Rewrite the manifest to claim more data than the stream holds.
  {
    std::FILE* f = std::fopen("io_test3.manifest", "w");
    std::fputs("x 4x4 f64 0\n", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS((void)saasr::TensorReader::open("io_test3.bin", "io_test3.manifest"),
                  saasr::ConfigError);
  std::remove("io_test3.bin");
  std::remove("io_test3.manifest");
}
