#include "rgrid/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

#include "rgrid/error.hpp"

namespace rgrid {

Tensor LabeledImageSet::batch(std::span<const std::size_t> indices) const {
  const std::size_t n = image_size();
  std::vector<double> out;
  out.reserve(indices.size() * n);
  for (std::size_t i : indices) {
    if (i >= size()) throw UsageError("sample index " + std::to_string(i) + " out of range");
    auto img = image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return Tensor::from_data({indices.size(), channels, height, width}, std::move(out));
}

std::vector<int> LabeledImageSet::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

LabeledImageSet LabeledImageSet::head(std::size_t n) const {
  LabeledImageSet out = *this;
  n = std::min(n, size());
  out.labels.resize(n);
  out.pixels.resize(n * image_size());
  return out;
}

ChannelStats channel_statistics(const LabeledImageSet& set) {
  ChannelStats stats{std::vector<double>(set.channels, 0.0), std::vector<double>(set.channels, 0.0)};
  const std::size_t plane = set.height * set.width;
  const double count = static_cast<double>(set.size() * plane);
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto img = set.image(i);
    for (std::size_t c = 0; c < set.channels; ++c)
      for (std::size_t p = 0; p < plane; ++p) stats.mean[c] += img[c * plane + p];
  }
  for (double& m : stats.mean) m /= count;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto img = set.image(i);
    for (std::size_t c = 0; c < set.channels; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const double d = img[c * plane + p] - stats.mean[c];
        stats.stddev[c] += d * d;
      }
  }
  for (double& s : stats.stddev) s = std::sqrt(s / count);
  return stats;
}

LabeledImageSet read_cifar10(std::span<const std::filesystem::path> paths) {
  LabeledImageSet set;
  set.name = "cifar10";
  set.classes = 10;
  set.channels = 3;
  set.height = 32;
  set.width = 32;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open dataset file " + path.string());
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t whole = bytes.size() / kCifarRecordBytes;
    if (bytes.size() % kCifarRecordBytes) {
      throw IngestionError(path.string() + ": truncated record at byte offset " +
                           std::to_string(whole * kCifarRecordBytes) + " (file length " +
                           std::to_string(bytes.size()) + " is not a multiple of 3073)");
    }
    for (std::size_t r = 0; r < whole; ++r) {
      const std::size_t offset = r * kCifarRecordBytes;
      const unsigned label = bytes[offset];
      if (label > 9) {
        throw IngestionError(path.string() + ": label byte " + std::to_string(label) + " at byte offset " +
                             std::to_string(offset) + " is above 9");
      }
      set.labels.push_back(static_cast<int>(label));
      for (std::size_t p = 1; p < kCifarRecordBytes; ++p) set.pixels.push_back(bytes[offset + p] / 255.0);
    }
  }
  return set;
}

void write_cifar10(const LabeledImageSet& set, const std::filesystem::path& path) {
  if (set.channels != 3 || set.height != 32 || set.width != 32) {
    throw UsageError("write_cifar10 needs 3x32x32 images");
  }
  std::vector<char> bytes;
  bytes.reserve(set.size() * kCifarRecordBytes);
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.labels[i] < 0 || set.labels[i] > 9) throw UsageError("write_cifar10: label outside [0, 9]");
    bytes.push_back(static_cast<char>(set.labels[i]));
    for (double v : set.image(i)) {
      const long q = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
      bytes.push_back(static_cast<char>(static_cast<unsigned char>(q)));
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

LabeledImageSet synth_freq_dataset(const SyntheticFreqSpec& spec) {
  if (spec.side == 0 || spec.channels == 0) throw ConfigError("synthetic dataset needs positive side and channels");
  if (spec.low_freq_index >= spec.side || spec.high_freq_index >= spec.side) {
    throw ConfigError("synthetic frequency indices must be below the image side");
  }
  if (spec.noise_std < 0.0) throw ConfigError("synthetic noise_std must be non-negative");
  LabeledImageSet set;
  set.name = "synthetic-freq";
  set.classes = 2;
  set.channels = spec.channels;
  set.height = spec.side;
  set.width = spec.side;

  const std::size_t plane = spec.side * spec.side;
  auto pattern = [&](std::size_t freq) {
    std::vector<double> p(plane);
    for (std::size_t a = 0; a < spec.side; ++a)
      for (std::size_t b = 0; b < spec.side; ++b) {
        const double phase = 2.0 * std::numbers::pi * static_cast<double>(freq * (a + b)) / static_cast<double>(spec.side);
        p[a * spec.side + b] = 0.5 + spec.amplitude * std::cos(phase);
      }
    return p;
  };
  const std::vector<double> patterns[2] = {pattern(spec.low_freq_index), pattern(spec.high_freq_index)};

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  set.pixels.reserve(spec.count * spec.channels * plane);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const int label = static_cast<int>(i % 2);
    set.labels.push_back(label);
    for (std::size_t c = 0; c < spec.channels; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const double n = spec.noise_std > 0.0 ? spec.noise_std * noise(rng) : 0.0;
        set.pixels.push_back(std::clamp(patterns[label][p] + n, 0.0, 1.0));
      }
  }
  return set;
}

}  // namespace rgrid
