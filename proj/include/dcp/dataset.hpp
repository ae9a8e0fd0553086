#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcp/tensor.hpp"

namespace dcp {

struct Normalization {
  std::vector<double> mean;  // per input channel
  std::vector<double> stddev;
  bool applied = false;
};

/// Train and test splits of an image classification set.
struct Dataset {
  std::string name;
  std::size_t classes = 0;
  Tensor train_images;  // [N, c, h, w]
  std::vector<int> train_labels;
  Tensor test_images;
  std::vector<int> test_labels;
  Normalization normalization;

  std::size_t channels() const { return train_images.dim(1); }
  std::size_t height() const { return train_images.dim(2); }
  std::size_t width() const { return train_images.dim(3); }
  /// Throws InputError on out-of-range labels or split shape mismatch.
  void validate() const;
};

/// Writes the DCPD container: magic, u32 version, u64 header length, JSON
/// header, float32 images (train then test), u16 labels (train then test).
void save_dataset(const Dataset& ds, const std::string& path);
/// Throws FormatError on bad magic, version, checksum, shape or labels.
Dataset load_dataset(const std::string& path);

struct SynthOptions {
  std::size_t classes = 10;
  std::size_t n_train = 5000;
  std::size_t n_test = 1000;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  /// Scale of the fixed class blob pattern; larger is easier.
  double separability = 0.6;
  /// Amplitude of the class texture, which has random phase per image.
  double texture = 0.3;
  double noise = 1.5;
  std::uint64_t seed = 1;
};

/// Class-conditional images: a fixed blob layout per class (scaled by
/// separability, jittered by a pixel or two), a class-specific grating with
/// random phase, class-independent distractor blobs and Gaussian noise.
/// Pixels are rounded to float32 so in-memory and on-disk sets agree.
Dataset synth_classification(const SynthOptions& options);

/// Per-channel mean/std of the training split.
Normalization compute_normalization(const Dataset& ds);
/// Normalizes both splits in place with the training statistics.
/// Throws ContractError if the set is already normalized.
void normalize(Dataset& ds);

/// N_s distinct indices drawn uniformly from [0, n), in draw order.
std::vector<std::size_t> sample_subset(std::size_t n, std::size_t n_s, std::uint64_t seed);

/// Mirrors every image of the batch entries flagged in `flip` left-right.
void flip_horizontal(Tensor& images, const std::vector<std::uint8_t>& flip);

}  // namespace dcp
