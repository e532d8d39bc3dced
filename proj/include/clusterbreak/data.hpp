#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "clusterbreak/tensor.hpp"

namespace clusterbreak::data {

struct SampleShape {
  int channels = 1;
  int height = 1;
  int width = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  Shape batch_shape(int batch) const { return {batch, channels, height, width}; }
  bool operator==(const SampleShape&) const = default;
};

SampleShape sample_shape_of(const Tensor& images);

/// Throws invalid-parameter unless every value is finite and inside [0, 1].
void check_pixel_range(const Tensor& pixels);

/// A batch of images in (b, c, h, w) layout with the dataset indices they came from.
struct ImageBatch {
  Tensor pixels;
  std::vector<int> ids;

  int size() const { return pixels.empty() ? 0 : pixels.dim(0); }
  SampleShape sample_shape() const { return sample_shape_of(pixels); }
};

/// Unlabelled image collection. Everything that trains or attacks a model
/// receives this type, never a Dataset, so ground truth cannot leak in.
class ImageSet {
 public:
  ImageSet() = default;
  explicit ImageSet(Tensor images);

  const Tensor& pixels() const { return images_; }
  int size() const { return images_.empty() ? 0 : images_.dim(0); }
  SampleShape sample_shape() const { return sample_shape_of(images_); }

  ImageBatch batch(std::span<const int> ids) const;
  ImageBatch all() const;
  ImageSet subset(std::span<const int> ids) const;

 private:
  Tensor images_;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(Tensor images, std::vector<int> labels, int k_true, std::vector<std::string> class_names = {});

  const ImageSet& images() const { return images_; }
  /// Ground truth. Evaluation only.
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  int n() const { return images_.size(); }
  int k_true() const { return k_true_; }
  SampleShape sample_shape() const { return images_.sample_shape(); }

  Dataset subset(std::span<const int> indices) const;

 private:
  ImageSet images_;
  std::vector<int> labels_;
  int k_true_ = 0;
  std::vector<std::string> class_names_;
};

struct SyntheticSpec {
  int n_per_class = 100;
  int k_true = 4;
  int channels = 1;
  int height = 12;
  int width = 12;
  /// Distance between class means measured in units of the per-pixel noise
  /// standard deviation.
  double class_separation = 5.0;
  std::uint64_t seed = 0;
  double noise_std = 0.1;
};

/// Each class is a smooth low-frequency template (templates are mutually
/// orthonormal) added to mid-grey, plus bounded uniform noise, clipped to [0, 1].
Dataset make_synthetic_image_dataset(const SyntheticSpec& spec);

/// One subdirectory per class, classes indexed in lexicographic order.
/// Reads PNG and binary/ASCII PGM/PPM; images are resized bilinearly.
Dataset load_image_folder(const std::filesystem::path& root, int height, int width, int channels = 0);

/// Binary blob: magic "CBDS", u32 version, i32 n, c, h, w, k_true, float32
/// pixels (row-major), int32 labels.
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& path);

/// Index partition for one epoch. Sizes are batch_size except possibly the last.
std::vector<std::vector<int>> batch_indices(int n, int batch_size, bool shuffle, std::uint64_t seed);
std::vector<ImageBatch> batches(const ImageSet& images, int batch_size, bool shuffle, std::uint64_t seed);

/// Random (train, held-out) split; `holdout_fraction` of samples go to the second part.
std::pair<Dataset, Dataset> split(const Dataset& dataset, double holdout_fraction, std::uint64_t seed);

/// Deterministic child seed for sub-components.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

}  // namespace clusterbreak::data
