#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "htb/image.hpp"
#include "htb/nnet.hpp"
#include "htb/rng.hpp"

namespace htb::fixture {

inline ImageTensor random_image(Rng& rng, int h = 32, int w = 32, int c = 3, int label = -1) {
  ImageTensor img(h, w, c, 0.0f, label);
  for (float& v : img.pixels) v = static_cast<float>(rng.uniform(0.0, 255.0));
  return img;
}

inline std::vector<ImageTensor> random_images(std::size_t n, std::uint64_t seed, int label = -1) {
  Rng rng(seed);
  std::vector<ImageTensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_image(rng, 32, 32, 3, label));
  return out;
}

inline nnet::Architecture tiny_arch(int num_classes = 2) {
  nnet::Architecture a;
  a.conv_channels = {4, 6, 8, 8};
  a.fc_width = 16;
  a.num_classes = num_classes;
  return a;
}

// Fresh per-test scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("htb_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace htb::fixture
