#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mexit/tensor.hpp"

namespace mexit {

/// Image batch (N x C x H x W, values in [0,1]) with optional labels.
struct Dataset {
  Tensorf images;
  std::vector<Index> labels;  // empty for unlabelled data
  Index num_classes = 0;

  Index size() const { return images.empty() ? 0 : images.dim(0); }
  bool has_labels() const { return !labels.empty(); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

  Dataset subset(const std::vector<Index>& indices) const;
  Dataset without_labels() const {
    Dataset d = *this;
    d.labels.clear();
    return d;
  }
};

/// Concatenate datasets with identical sample shapes.
Dataset concat(const std::vector<Dataset>& parts);

/// Class-popularity profile of one user.
struct UserDistribution {
  std::vector<double> probs;
  Index center = 0;
  double sigma = 1.0;
  std::uint64_t seed = 0;
};

/// Gaussian popularity over the class ring: p_c ~ exp(-d(c, mu)^2 / (2 sigma^2))
/// with d the circular index distance and mu uniform over classes.
UserDistribution gen_user_distribution(Index num_classes, double sigma, std::uint64_t seed);

/// Same profile around a given center class.
UserDistribution user_distribution_at(Index num_classes, double sigma, Index center);

/// Draw n samples: class from `dist`, then a uniform image of that class,
/// both with replacement. Returns the global indices used in `indices`.
Dataset sample_user_dataset(const Dataset& global, const UserDistribution& dist, Index n, std::uint64_t seed,
                            std::vector<Index>* indices = nullptr);

struct UserSplit {
  UserDistribution distribution;
  Dataset train;
  Dataset test;
  std::vector<Index> train_indices;  // into the global dataset
  std::vector<Index> test_indices;
};

/// Disjoint per-user datasets drawn without replacement from `global`, each
/// following its own Gaussian class popularity; `test_per_user` of every
/// user's samples are held out.
std::vector<UserSplit> partition_users(const Dataset& global, Index n_users, Index samples_per_user,
                                       Index test_per_user, double sigma, std::uint64_t seed);

/// Seeded split into (train, calibration) with `fraction` going to calibration.
std::pair<Dataset, Dataset> split_calibration(const Dataset& data, double fraction, std::uint64_t seed,
                                              std::vector<Index>* train_idx = nullptr,
                                              std::vector<Index>* calib_idx = nullptr);

/// Class-templated Gaussian-blob images. Each class owns a fixed arrangement
/// of blobs; samples jitter blob positions and amplitudes and add pixel noise.
struct SyntheticSpec {
  Index num_classes = 10;
  Shape sample_shape{1, 28, 28};
  Index blobs_per_class = 3;
  double blob_sigma = 2.0;      // pixels
  double position_jitter = 1.75;  // pixels, std-dev
  double amplitude_jitter = 0.25;
  double pixel_noise = 0.3;
  Index distractor_blobs = 3;   // randomly placed blobs per image
  std::uint64_t task_seed = 7;  // fixes the class templates
};

/// `n` samples with labels drawn from `class_probs` (uniform when empty).
Dataset generate_synthetic(const SyntheticSpec& spec, Index n, std::uint64_t seed,
                           const std::vector<double>& class_probs = {});

/// IDX files (big-endian extents, u8 payload). Images with one channel are
/// written as N x H x W (magic 0x00000803), otherwise N x C x H x W (0x00000804).
void save_idx_images(const Tensorf& images, const std::string& path);
void save_idx_labels(const std::vector<Index>& labels, const std::string& path);
Tensorf load_idx_images(const std::string& path);
std::vector<Index> load_idx_labels(const std::string& path);

/// `<prefix>-images.idx` and `<prefix>-labels.idx`.
void save_dataset(const Dataset& data, const std::string& prefix);
Dataset load_dataset(const std::string& prefix, Index num_classes = 0);
Dataset load_dataset(const std::string& images_path, const std::string& labels_path, Index num_classes);

/// Plain key=value manifest describing per-user splits.
void write_manifest(const std::vector<UserSplit>& users, const std::string& path);

}  // namespace mexit
