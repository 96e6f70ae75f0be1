#include "htb/trigger.hpp"

#include <algorithm>
#include <cmath>

#include "htb/error.hpp"
#include "htb/io.hpp"

namespace htb::trigger {

ImageTensor bilinear_resize(const ImageTensor& src, int out_h, int out_w) {
  if (src.empty()) throw SizeError("bilinear_resize: empty source");
  if (out_h <= 0 || out_w <= 0) throw SizeError("bilinear_resize: output dims must be positive");
  ImageTensor out(out_h, out_w, src.channels, 0.0f, src.label);
  const float scale_y = static_cast<float>(src.height) / static_cast<float>(out_h);
  const float scale_x = static_cast<float>(src.width) / static_cast<float>(out_w);
  for (int y = 0; y < out_h; ++y) {
    const float sy = std::clamp((static_cast<float>(y) + 0.5f) * scale_y - 0.5f, 0.0f,
                                static_cast<float>(src.height - 1));
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, src.height - 1);
    const float wy = sy - static_cast<float>(y0);
    for (int x = 0; x < out_w; ++x) {
      const float sx = std::clamp((static_cast<float>(x) + 0.5f) * scale_x - 0.5f, 0.0f,
                                  static_cast<float>(src.width - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, src.width - 1);
      const float wx = sx - static_cast<float>(x0);
      for (int c = 0; c < src.channels; ++c) {
        // a + (b - a) * w keeps constant regions exact.
        const float a = src.at(y0, x0, c), b = src.at(y0, x1, c);
        const float d = src.at(y1, x0, c), e = src.at(y1, x1, c);
        const float top = a + (b - a) * wx;
        const float bot = d + (e - d) * wx;
        out.at(y, x, c) = top + (bot - top) * wy;
      }
    }
  }
  return out;
}

Trigger generate_trigger(int patch_size, std::uint64_t seed, int trigger_id, int channels) {
  if (patch_size < kBaseGridSide)
    throw SizeError("trigger patch size must be at least " + std::to_string(kBaseGridSide));
  if (channels < 1) throw SizeError("trigger needs at least one channel");
  Trigger t;
  t.trigger_id = trigger_id;
  t.seed = seed;
  t.base_grid = ImageTensor(kBaseGridSide, kBaseGridSide, channels);
  Rng rng(seed);
  for (float& v : t.base_grid.pixels) v = static_cast<float>(rng.uniform(0.0, 255.0));
  t.patch = bilinear_resize(t.base_grid, patch_size, patch_size);
  return t;
}

void check_placement(const ImageDims& dims, const MaskPlacement& place) {
  const int p = place.patch_size;
  if (p <= 0 || place.top < 0 || place.left < 0 || place.top + p > dims.height ||
      place.left + p > dims.width)
    throw PlacementError("placement (" + std::to_string(place.top) + "," +
                         std::to_string(place.left) + ") size " + std::to_string(p) +
                         " does not fit a " + std::to_string(dims.height) + "x" +
                         std::to_string(dims.width) + " image");
}

ImageTensor apply_trigger(const ImageTensor& image, const Trigger& trig, const MaskPlacement& place) {
  check_placement(dims_of(image), place);
  if (trig.patch.height != place.patch_size || trig.patch.width != place.patch_size)
    throw PlacementError("placement patch size does not match trigger");
  if (trig.patch.channels != image.channels) throw SizeError("trigger/image channel mismatch");
  ImageTensor out = image;
  for (int y = 0; y < place.patch_size; ++y)
    for (int x = 0; x < place.patch_size; ++x)
      for (int c = 0; c < image.channels; ++c)
        out.at(place.top + y, place.left + x, c) = trig.patch.at(y, x, c);
  return out;
}

MaskPlacement random_placement(const ImageDims& dims, int patch_size, Rng& rng) {
  if (patch_size <= 0 || patch_size > std::min(dims.height, dims.width))
    throw SizeError("patch size " + std::to_string(patch_size) + " exceeds image");
  MaskPlacement m;
  m.patch_size = patch_size;
  m.top = static_cast<int>(rng.uniform_int(0, dims.height - patch_size));
  m.left = static_cast<int>(rng.uniform_int(0, dims.width - patch_size));
  return m;
}

MaskPlacement corner_placement(const ImageDims& dims, int patch_size) {
  if (patch_size <= 0 || patch_size > std::min(dims.height, dims.width))
    throw SizeError("patch size " + std::to_string(patch_size) + " exceeds image");
  return {dims.height - patch_size, dims.width - patch_size, patch_size};
}

void export_trigger(const Trigger& trig, const std::filesystem::path& stem) {
  io::write_png(std::filesystem::path(stem.string() + ".png"), trig.patch);
  io::json j;
  j["trigger_id"] = trig.trigger_id;
  j["seed"] = trig.seed;
  j["patch_size"] = trig.patch_size();
  io::json grid = io::json::array();
  for (int y = 0; y < trig.base_grid.height; ++y) {
    io::json row = io::json::array();
    for (int x = 0; x < trig.base_grid.width; ++x) {
      io::json px = io::json::array();
      for (int c = 0; c < trig.base_grid.channels; ++c) px.push_back(trig.base_grid.at(y, x, c));
      row.push_back(px);
    }
    grid.push_back(row);
  }
  j["base_grid"] = grid;
  io::write_json(std::filesystem::path(stem.string() + ".json"), j);
}

}  // namespace htb::trigger
