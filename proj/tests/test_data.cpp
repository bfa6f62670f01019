#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "rgrid/data.hpp"
#include "rgrid/error.hpp"

using namespace rgrid;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("rgrid_data_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> record(unsigned char label, std::uint32_t seed) {
  std::vector<unsigned char> r(kCifarRecordBytes);
  r[0] = label;
  std::mt19937 rng(seed);
  for (std::size_t i = 1; i < r.size(); ++i) r[i] = static_cast<unsigned char>(rng() & 0xff);
  return r;
}

std::string message_of(const fs::path& p) {
  const fs::path paths[] = {p};
  try {
    read_cifar10(paths);
  } catch (const IngestionError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("single CIFAR record") {
  TempDir dir;
  std::vector<unsigned char> r = record(7, 1);
  r[1] = 255;
  r[2] = 0;
  r[1 + 1024] = 128;  // first green pixel
  write_bytes(dir.path / "one.bin", r);
  const fs::path paths[] = {dir.path / "one.bin"};
  const LabeledImageSet set = read_cifar10(paths);
  REQUIRE(set.size() == 1);
  CHECK(set.labels[0] == 7);
  CHECK(set.classes == 10);
  CHECK(set.image_size() == 3072);
  CHECK(set.pixels[0] == 1.0);
  CHECK(set.pixels[1] == 0.0);
  CHECK(set.pixels[1024] == 128.0 / 255.0);
  for (std::size_t i = 0; i < 3072; ++i) CHECK(set.pixels[i] == r[i + 1] / 255.0);
}

TEST_CASE("record order is preserved across records and files") {
  TempDir dir;
  std::vector<unsigned char> a = record(3, 2), b = record(9, 3), c = record(0, 4);
  std::vector<unsigned char> ab = a;
  ab.insert(ab.end(), b.begin(), b.end());
  write_bytes(dir.path / "ab.bin", ab);
  write_bytes(dir.path / "c.bin", c);
  const fs::path paths[] = {dir.path / "ab.bin", dir.path / "c.bin"};
  const LabeledImageSet set = read_cifar10(paths);
  REQUIRE(set.size() == 3);
  CHECK(set.labels == std::vector<int>{3, 9, 0});
  CHECK(set.image(1)[5] == b[6] / 255.0);
  CHECK(set.image(2)[3071] == c[3072] / 255.0);
}

TEST_CASE("malformed CIFAR files") {
  TempDir dir;
  SUBCASE("3072-byte file is truncated at offset 0") {
    std::vector<unsigned char> r = record(1, 5);
    r.pop_back();
    write_bytes(dir.path / "short.bin", r);
    const std::string msg = message_of(dir.path / "short.bin");
    CHECK(msg.find("truncated") != std::string::npos);
    CHECK(msg.find("offset 0") != std::string::npos);
  }
  SUBCASE("a partial second record names its offset") {
    std::vector<unsigned char> r = record(1, 6), tail = record(2, 7);
    r.insert(r.end(), tail.begin(), tail.begin() + 100);
    write_bytes(dir.path / "partial.bin", r);
    CHECK(message_of(dir.path / "partial.bin").find("offset 3073") != std::string::npos);
  }
  SUBCASE("label above 9") {
    std::vector<unsigned char> r = record(2, 8), bad = record(10, 9);
    r.insert(r.end(), bad.begin(), bad.end());
    write_bytes(dir.path / "label.bin", r);
    const std::string msg = message_of(dir.path / "label.bin");
    CHECK(msg.find("label byte 10") != std::string::npos);
    CHECK(msg.find("offset 3073") != std::string::npos);
  }
  SUBCASE("missing file") {
    CHECK(!message_of(dir.path / "absent.bin").empty());
  }
}

TEST_CASE("CIFAR writer round trip is bit exact") {
  TempDir dir;
  std::vector<unsigned char> bytes;
  for (std::uint32_t i = 0; i < 4; ++i) {
    auto r = record(static_cast<unsigned char>(i * 2 + 1), 20 + i);
    bytes.insert(bytes.end(), r.begin(), r.end());
  }
  write_bytes(dir.path / "src.bin", bytes);
  const fs::path src[] = {dir.path / "src.bin"};
  const LabeledImageSet set = read_cifar10(src);
  write_cifar10(set, dir.path / "copy.bin");

  std::ifstream in(dir.path / "copy.bin", std::ios::binary);
  const std::vector<unsigned char> copy((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(copy == bytes);

  const fs::path again[] = {dir.path / "copy.bin"};
  const LabeledImageSet reread = read_cifar10(again);
  CHECK(reread.labels == set.labels);
  CHECK(reread.pixels == set.pixels);
}

TEST_CASE("synthetic dataset") {
  SyntheticFreqSpec spec;
  spec.count = 64;
  spec.seed = 17;
  const LabeledImageSet a = synth_freq_dataset(spec), b = synth_freq_dataset(spec);
  CHECK(a.size() == 64);
  CHECK(a.classes == 2);
  CHECK(a.pixels == b.pixels);
  CHECK(a.labels == b.labels);
  for (double p : a.pixels) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
  spec.seed = 18;
  CHECK(synth_freq_dataset(spec).pixels != a.pixels);

  spec.seed = 0;
  spec.noise_std = 5.0;
  for (double p : synth_freq_dataset(spec).pixels) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }

  spec.low_freq_index = 8;
  CHECK_THROWS_AS(synth_freq_dataset(spec), ConfigError);
}

TEST_CASE("noiseless synthetic data is separable by nearest centroid") {
  SyntheticFreqSpec spec;
  spec.noise_std = 0.0;
  spec.count = 40;
  const LabeledImageSet set = synth_freq_dataset(spec);
  const std::size_t n = set.image_size();
  std::vector<double> centroid[2] = {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  std::size_t counts[2] = {0, 0};
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto img = set.image(i);
    for (std::size_t k = 0; k < n; ++k) centroid[set.labels[i]][k] += img[k];
    ++counts[set.labels[i]];
  }
  REQUIRE(counts[0] > 0);
  REQUIRE(counts[1] > 0);
  for (int c = 0; c < 2; ++c)
    for (double& v : centroid[c]) v /= static_cast<double>(counts[c]);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto img = set.image(i);
    double d[2] = {0.0, 0.0};
    for (int c = 0; c < 2; ++c)
      for (std::size_t k = 0; k < n; ++k) d[c] += (img[k] - centroid[c][k]) * (img[k] - centroid[c][k]);
    correct += (d[1] < d[0] ? 1 : 0) == set.labels[i];
  }
  CHECK(correct == set.size());
}

TEST_CASE("batch, head and channel statistics") {
  LabeledImageSet set;
  set.classes = 2;
  set.channels = 2;
  set.height = 1;
  set.width = 2;
  set.pixels = {0.0, 1.0, 0.5, 0.5, 1.0, 1.0, 0.25, 0.75};
  set.labels = {0, 1};
  const std::size_t idx[] = {1, 0};
  const Tensor b = set.batch(idx);
  CHECK(b.shape() == Shape{2, 2, 1, 2});
  CHECK(b.at(0) == 1.0);
  CHECK(b.at(4) == 0.0);
  CHECK(set.batch_labels(idx) == std::vector<int>{1, 0});
  const std::size_t bad[] = {2};
  CHECK_THROWS_AS(set.batch(bad), UsageError);

  const ChannelStats s = channel_statistics(set);
  CHECK(s.mean[0] == doctest::Approx(0.75));
  CHECK(s.mean[1] == doctest::Approx(0.5));
  CHECK(s.stddev[0] == doctest::Approx(std::sqrt((0.5625 + 0.0625 + 0.0625 + 0.0625) / 4.0)));
  CHECK(s.stddev[1] == doctest::Approx(std::sqrt(0.0625 * 2 / 4.0)));

  CHECK(set.head(1).size() == 1);
  CHECK(set.head(1).pixels.size() == 4);
  CHECK(set.head(9).size() == 2);
}
