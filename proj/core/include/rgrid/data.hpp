#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rgrid/tensor.hpp"

namespace rgrid {

/// Images stored channel-major (C x H x W per image), pixels in [0, 1].
struct LabeledImageSet {
  std::string name;
  std::size_t classes = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const double> image(std::size_t i) const {
    return std::span<const double>(pixels).subspan(i * image_size(), image_size());
  }

  /// [n, C, H, W] tensor of the selected images, in the given order.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  /// First `n` samples (or all, when n exceeds the size).
  LabeledImageSet head(std::size_t n) const;
};

/// Per-channel mean and (population) standard deviation.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};
ChannelStats channel_statistics(const LabeledImageSet& set);

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// Reads CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes
/// (1024 R, 1024 G, 1024 B, row-major). Pixels are scaled by 1/255.
/// Throws IngestionError on truncation or a label byte above 9.
LabeledImageSet read_cifar10(std::span<const std::filesystem::path> paths);

/// Inverse of read_cifar10 for a 3x32x32 set whose pixels are multiples of 1/255.
void write_cifar10(const LabeledImageSet& set, const std::filesystem::path& path);

/// Two-class images: class 0 carries a cosine at (low, low), class 1 at
/// (high, high); both ride on 0.5 grey plus Gaussian noise, clipped to [0, 1].
struct SyntheticFreqSpec {
  std::size_t side = 8;
  std::size_t channels = 3;
  std::size_t low_freq_index = 1;
  std::size_t high_freq_index = 3;
  double amplitude = 0.25;
  double noise_std = 0.1;
  std::size_t count = 512;
  std::uint64_t seed = 0;
};

LabeledImageSet synth_freq_dataset(const SyntheticFreqSpec& spec);

}  // namespace rgrid
