#pragma once

#include <cstdint>
#include <memory>
#include <string_view>
#include <vector>

#include "rgrid/layers.hpp"
#include "rgrid/structure.hpp"
#include "rgrid/tensor.hpp"

namespace rgrid {

/// Fixed per-channel (x - mean) / stddev applied as the first op of the
/// model, so attacks keep operating in raw [0, 1] pixel units.
struct InputNormalization {
  std::vector<double> mean;
  std::vector<double> stddev;
  bool identity() const { return mean.empty(); }
};

struct ForwardTrace {
  Tensor embedding;                   // Z0 in its natural layout
  std::vector<Tensor> block_outputs;  // [B, N, d] after every mixer block
  std::vector<Tensor> attention;      // [groups, heads, T, T] per attention call
};

/// An instantiated architecture. Construction order (and so parameter names
/// and initial values) is a pure function of (spec, seed).
class Model {
 public:
  Model(StructureSpec spec, std::uint64_t seed);
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Deep copy with independent parameter storage.
  Model clone() const;

  const StructureSpec& spec() const;
  std::uint64_t seed() const;

  /// images [B, C, H, W] -> logits [B, K]
  Tensor forward(const Tensor& images, ForwardTrace* trace = nullptr) const;
  /// Z0: [B, N, d] for Ori/Conv embeddings, [B, d, H/P, W/P] for PConv.
  Tensor embed(const Tensor& images) const;
  /// Argmax class per image, evaluated without recording a tape.
  std::vector<int> predict(const Tensor& images) const;

  std::vector<NamedTensor>& parameters();
  const std::vector<NamedTensor>& parameters() const;
  Tensor parameter(std::string_view name) const;
  std::size_t parameter_count() const;
  void zero_grad();

  void set_input_normalization(InputNormalization norm);
  const InputNormalization& input_normalization() const;

 private:
  struct Impl;
  Model(StructureSpec spec, std::uint64_t seed, bool randomize);
  std::unique_ptr<Impl> impl_;
};

}  // namespace rgrid
