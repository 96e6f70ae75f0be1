#pragma once

#include <cstdint>
#include <filesystem>

#include "htb/image.hpp"
#include "htb/rng.hpp"

namespace htb::trigger {

inline constexpr int kBaseGridSide = 4;

struct Trigger {
  ImageTensor patch;      // P x P x C
  ImageTensor base_grid;  // 4 x 4 x C colors the patch was upsampled from
  int trigger_id = 0;
  std::uint64_t seed = 0;

  int patch_size() const noexcept { return patch.height; }
};

// Binary-mask support: rows [top, top+P), columns [left, left+P).
struct MaskPlacement {
  int top = 0;
  int left = 0;
  int patch_size = 0;

  friend bool operator==(const MaskPlacement&, const MaskPlacement&) = default;
};

// Half-pixel-centred bilinear resize (align_corners = false) with edge clamping:
//   src = (dst + 0.5) * (src_len / dst_len) - 0.5, clamped to [0, src_len - 1].
ImageTensor bilinear_resize(const ImageTensor& src, int out_h, int out_w);

// base_grid ~ U[0,255] per channel from `seed`, upsampled to P x P.
Trigger generate_trigger(int patch_size, std::uint64_t seed, int trigger_id = 0, int channels = 3);

// s * (1 - m) + p * m. Throws PlacementError when the window leaves the image.
ImageTensor apply_trigger(const ImageTensor& image, const Trigger& trig, const MaskPlacement& place);

void check_placement(const ImageDims& dims, const MaskPlacement& place);

MaskPlacement random_placement(const ImageDims& dims, int patch_size, Rng& rng);

// Bottom-right anchored: (H - P, W - P).
MaskPlacement corner_placement(const ImageDims& dims, int patch_size);

// Writes `<stem>.png` and `<stem>.json` {trigger_id, seed, patch_size, base_grid}.
void export_trigger(const Trigger& trig, const std::filesystem::path& stem);

}  // namespace htb::trigger
