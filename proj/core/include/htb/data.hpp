#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <vector>

#include "htb/image.hpp"
#include "htb/poison_types.hpp"

namespace htb::data {

inline constexpr int kCifarSide = 32;
inline constexpr int kCifarChannels = 3;
inline constexpr std::size_t kCifarRecordBytes = 1 + 32 * 32 * 3;

// Reads a CIFAR-10 binary batch and keeps records whose label is requested.
// Throws FormatError on bad length, CorruptRecordError on labels above 9.
std::vector<ImageTensor> load_cifar_binary(const std::filesystem::path& path,
                                           const std::set<int>& categories);

// Loads data_batch_1..5.bin and test_batch.bin from a directory, in that order.
std::vector<ImageTensor> load_cifar_directory(const std::filesystem::path& dir,
                                              const std::set<int>& categories);

// Inverse of load_cifar_binary; pixels are rounded to the nearest byte.
void write_cifar_binary(const std::filesystem::path& path, std::span<const ImageTensor> images);

// Colored-shape images (32x32x3), one geometry family per class. Background,
// shape color, position and size vary per image.
std::vector<ImageTensor> generate_synthetic_dataset(int num_classes, int per_class,
                                                    std::uint64_t seed);

struct SplitSizes {
  std::size_t n_gen = 0;
  std::size_t n_finetune = 0;
  std::size_t n_test = 0;

  friend bool operator==(const SplitSizes&, const SplitSizes&) = default;
};

struct DatasetSplit {
  std::vector<ImageTensor> poison_gen;
  std::vector<ImageTensor> finetune;
  std::vector<ImageTensor> test;
  std::vector<ImageTensor> rest;  // everything not assigned to the three sets
  std::vector<std::size_t> gen_ids, finetune_ids, test_ids, rest_ids;
  int category = -1;
  std::uint64_t seed = 0;
};

// One shuffled permutation sliced contiguously into (gen, finetune, test, rest).
DatasetSplit make_split(std::span<const ImageTensor> images, SplitSizes sizes,
                        std::uint64_t seed, int category = -1);

std::vector<ImageTensor> filter_by_label(std::span<const ImageTensor> images, int label);

struct PairSpec {
  int source_category = 0;
  int target_category = 1;
  int trigger_id = 0;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const PairSpec&, const PairSpec&) = default;
};

inline constexpr int kPoisonFormatVersion = 1;

// Writes `<stem>.bin` (float32 little-endian, C-order, shape [2, n, H, W, C]:
// poisons then anchors) and `<stem>.manifest.json`.
void save_poison_batch(const PoisonBatch& batch, const std::filesystem::path& stem);

// Throws IncompatibilityError on a version mismatch and FormatError on a
// short or oversized blob. Never returns a partial batch.
PoisonBatch load_poison_batch(const std::filesystem::path& stem);

std::filesystem::path poison_blob_path(const std::filesystem::path& stem);
std::filesystem::path poison_manifest_path(const std::filesystem::path& stem);

}  // namespace htb::data
