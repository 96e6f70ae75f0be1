#include "htb/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "htb/error.hpp"
#include "htb/io.hpp"
#include "htb/rng.hpp"

namespace htb::data {

namespace fs = std::filesystem;
using io::json;

// ---------------------------------------------------------------- CIFAR-10

std::vector<ImageTensor> load_cifar_binary(const fs::path& path, const std::set<int>& categories) {
  const auto bytes = io::read_bytes(path);
  if (bytes.size() % kCifarRecordBytes != 0)
    throw FormatError(path.string() + ": length " + std::to_string(bytes.size()) +
                      " is not a multiple of " + std::to_string(kCifarRecordBytes));
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  constexpr int plane = kCifarSide * kCifarSide;
  std::vector<ImageTensor> out;
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    const int label = rec[0];
    if (label > 9)
      throw CorruptRecordError(path.string() + ": record " + std::to_string(r) + " has label " +
                               std::to_string(label));
    if (!categories.contains(label)) continue;
    ImageTensor img(kCifarSide, kCifarSide, kCifarChannels, 0.0f, label);
    for (int c = 0; c < kCifarChannels; ++c)
      for (int p = 0; p < plane; ++p)
        img.pixels[static_cast<std::size_t>(p) * kCifarChannels + c] = rec[1 + c * plane + p];
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<ImageTensor> load_cifar_directory(const fs::path& dir, const std::set<int>& categories) {
  std::vector<ImageTensor> out;
  for (const char* name : {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                           "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"}) {
    auto part = load_cifar_binary(dir / name, categories);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

void write_cifar_binary(const fs::path& path, std::span<const ImageTensor> images) {
  constexpr int plane = kCifarSide * kCifarSide;
  std::vector<std::uint8_t> bytes;
  bytes.reserve(images.size() * kCifarRecordBytes);
  for (const auto& img : images) {
    if (img.height != kCifarSide || img.width != kCifarSide || img.channels != kCifarChannels)
      throw SizeError("CIFAR records are 32x32x3");
    if (img.label < 0 || img.label > 255) throw ValidationError("CIFAR label must fit in a byte");
    bytes.push_back(static_cast<std::uint8_t>(img.label));
    for (int c = 0; c < kCifarChannels; ++c)
      for (int p = 0; p < plane; ++p) {
        const float v = img.pixels[static_cast<std::size_t>(p) * kCifarChannels + c];
        bytes.push_back(static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5f), 0.0f, 255.0f)));
      }
  }
  io::write_bytes(path, bytes);
}

// ------------------------------------------------------- synthetic shapes

namespace {

constexpr int kShapeFamilies = 10;

// Membership test for a shape centred at the origin with radius r.
bool inside_shape(int family, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (family) {
    case 0:  // disk
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::max(ax, ay) <= 0.8 * r;
    case 2:  // upward triangle
      return dy <= 0.7 * r && dy >= -r + 2.0 * ax * 0.95;
    case 3:  // plus
      return (ax <= r && ay <= 0.28 * r) || (ay <= r && ax <= 0.28 * r);
    case 4: {  // ring
      const double d = std::sqrt(dx * dx + dy * dy);
      return std::abs(d - 0.72 * r) <= 0.25 * r;
    }
    case 5:  // horizontal stripes
      return ax <= r && ay <= r && std::fmod(dy + r + 100.0 * r, 0.66 * r) < 0.33 * r;
    case 6:  // vertical stripes
      return ax <= r && ay <= r && std::fmod(dx + r + 100.0 * r, 0.66 * r) < 0.33 * r;
    case 7:  // diamond
      return ax + ay <= r;
    case 8:  // X
      return std::max(ax, ay) <= r && std::min(std::abs(dx - dy), std::abs(dx + dy)) <= 0.4 * r;
    default: {  // two dots
      const double rr = 0.42 * r;
      const double l = dx + 0.55 * r, q = dx - 0.55 * r;
      return l * l + dy * dy <= rr * rr || q * q + dy * dy <= rr * rr;
    }
  }
}

ImageTensor render_shape(int cls, Rng& rng) {
  constexpr int S = kCifarSide;
  ImageTensor img(S, S, 3, 0.0f, cls);
  const int family = cls % kShapeFamilies;
  // Classes beyond the ten families reuse a geometry at a different scale band.
  const int band = cls / kShapeFamilies;
  std::array<double, 3> bg{}, grad_x{}, grad_y{}, fg{};
  for (int c = 0; c < 3; ++c) {
    bg[c] = rng.uniform(10.0, 110.0);
    grad_x[c] = rng.uniform(-1.2, 1.2);
    grad_y[c] = rng.uniform(-1.2, 1.2);
    fg[c] = rng.uniform(130.0, 250.0);
  }
  const double base_r = band % 2 == 0 ? rng.uniform(6.5, 9.5) : rng.uniform(4.0, 5.5);
  const double cx = rng.uniform(11.0, 21.0), cy = rng.uniform(11.0, 21.0);
  constexpr int ss = 3;  // supersampling per axis
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const double px = x + (sx + 0.5) / ss, py = y + (sy + 0.5) / ss;
          hits += inside_shape(family, px - cx, py - cy, base_r) ? 1 : 0;
        }
      const double alpha = static_cast<double>(hits) / (ss * ss);
      for (int c = 0; c < 3; ++c) {
        const double back = bg[c] + grad_x[c] * (x - S / 2.0) + grad_y[c] * (y - S / 2.0);
        const double v = (1.0 - alpha) * back + alpha * fg[c] + rng.normal() * 6.0;
        img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 255.0));
      }
    }
  return img;
}

}  // namespace

std::vector<ImageTensor> generate_synthetic_dataset(int num_classes, int per_class, std::uint64_t seed) {
  if (num_classes < 2) throw ValidationError("synthetic dataset needs at least 2 classes");
  if (per_class < 1) throw ValidationError("synthetic dataset needs at least 1 image per class");
  std::vector<ImageTensor> out;
  out.reserve(static_cast<std::size_t>(num_classes) * per_class);
  for (int cls = 0; cls < num_classes; ++cls) {
    Rng rng(derive_seed(seed, "synthetic-class-" + std::to_string(cls)));
    for (int i = 0; i < per_class; ++i) out.push_back(render_shape(cls, rng));
  }
  return out;
}

// ------------------------------------------------------------------ splits

DatasetSplit make_split(std::span<const ImageTensor> images, SplitSizes sizes, std::uint64_t seed,
                        int category) {
  const std::size_t need = sizes.n_gen + sizes.n_finetune + sizes.n_test;
  if (need > images.size())
    throw SizeError("split needs " + std::to_string(need) + " images, have " +
                    std::to_string(images.size()));
  std::vector<std::size_t> perm(images.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(perm.begin(), perm.end());

  DatasetSplit split;
  split.category = category;
  split.seed = seed;
  auto take = [&](std::size_t begin, std::size_t end, std::vector<ImageTensor>& dst,
                  std::vector<std::size_t>& ids) {
    for (std::size_t i = begin; i < end; ++i) {
      ids.push_back(perm[i]);
      dst.push_back(images[perm[i]]);
    }
  };
  std::size_t cursor = 0;
  take(cursor, cursor + sizes.n_gen, split.poison_gen, split.gen_ids);
  cursor += sizes.n_gen;
  take(cursor, cursor + sizes.n_finetune, split.finetune, split.finetune_ids);
  cursor += sizes.n_finetune;
  take(cursor, cursor + sizes.n_test, split.test, split.test_ids);
  cursor += sizes.n_test;
  take(cursor, images.size(), split.rest, split.rest_ids);
  return split;
}

std::vector<ImageTensor> filter_by_label(std::span<const ImageTensor> images, int label) {
  std::vector<ImageTensor> out;
  for (const auto& img : images)
    if (img.label == label) out.push_back(img);
  return out;
}

void PairSpec::validate() const {
  if (source_category < 0 || target_category < 0) throw ValidationError("negative category id");
  if (source_category == target_category)
    throw ValidationError("source and target categories must differ");
  if (trigger_id < 0) throw ValidationError("negative trigger id");
}

// ---------------------------------------------------------- poison archive

fs::path poison_blob_path(const fs::path& stem) { return fs::path(stem.string() + ".bin"); }
fs::path poison_manifest_path(const fs::path& stem) { return fs::path(stem.string() + ".manifest.json"); }

namespace {

json config_to_json(const PoisonConfig& c) {
  return {{"epsilon", c.epsilon},
          {"batch_size", c.batch_size},
          {"iterations", c.iterations},
          {"lr0", c.lr0},
          {"decay", c.decay},
          {"decay_every", c.decay_every},
          {"embedding_layer", c.embedding_layer},
          {"placement_mode", to_string(c.placement_mode)},
          {"n_generate", c.n_generate},
          {"n_select", c.n_select},
          {"step_mode", to_string(c.step_mode)},
          {"assign_mode", to_string(c.assign_mode)},
          {"early_stop_loss", c.early_stop_loss},
          {"seed", c.seed}};
}

PoisonConfig config_from_json(const json& j) {
  PoisonConfig c;
  c.epsilon = j.at("epsilon").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.iterations = j.at("iterations").get<int>();
  c.lr0 = j.at("lr0").get<double>();
  c.decay = j.at("decay").get<double>();
  c.decay_every = j.at("decay_every").get<int>();
  c.embedding_layer = j.at("embedding_layer").get<std::string>();
  c.placement_mode = parse_placement_mode(j.at("placement_mode").get<std::string>());
  c.n_generate = j.at("n_generate").get<int>();
  c.n_select = j.at("n_select").get<int>();
  c.step_mode = parse_step_mode(j.at("step_mode").get<std::string>());
  c.assign_mode = parse_assign_mode(j.at("assign_mode").get<std::string>());
  c.early_stop_loss = j.at("early_stop_loss").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_poison_batch(const PoisonBatch& batch, const fs::path& stem) {
  const std::size_t n = batch.size();
  if (batch.anchors.size() != n || batch.losses.size() != n)
    throw ValidationError("poison batch has inconsistent lengths");
  ImageDims d{};
  if (n > 0) d = dims_of(batch.poisons.front());
  std::vector<std::uint8_t> blob;
  blob.reserve(2 * n * d.height * d.width * d.channels * 4);
  for (const auto* group : {&batch.poisons, &batch.anchors})
    for (const auto& img : *group) {
      if (img.height != d.height || img.width != d.width || img.channels != d.channels)
        throw SizeError("poison batch images differ in shape");
      io::append_f32le(blob, img.pixels);
    }
  io::write_bytes(poison_blob_path(stem), blob);

  json m;
  m["format_version"] = kPoisonFormatVersion;
  m["shape"] = {2, n, d.height, d.width, d.channels};
  m["epsilon"] = batch.config.epsilon;
  m["trigger_id"] = batch.trigger_id;
  m["seed"] = batch.config.seed;
  m["iterations"] = batch.config.iterations;
  m["final_losses"] = batch.losses;
  m["source_category"] = batch.source_category;
  m["target_category"] = batch.target_category;
  m["config"] = config_to_json(batch.config);
  m["anchor_ids"] = batch.anchor_ids;
  m["loss_trace"] = batch.loss_trace;
  m["loss_trace_sum"] = batch.loss_trace_sum;
  m["lr_trace"] = batch.lr_trace;
  std::vector<int> labels;
  for (const auto& img : batch.poisons) labels.push_back(img.label);
  m["poison_labels"] = labels;
  std::vector<int> anchor_labels;
  for (const auto& img : batch.anchors) anchor_labels.push_back(img.label);
  m["anchor_labels"] = anchor_labels;
  io::write_json(poison_manifest_path(stem), m);
}

PoisonBatch load_poison_batch(const fs::path& stem) {
  const json m = io::read_json(poison_manifest_path(stem));
  try {
    const int version = m.at("format_version").get<int>();
    if (version != kPoisonFormatVersion)
      throw IncompatibilityError("poison archive version " + std::to_string(version) +
                                 ", expected " + std::to_string(kPoisonFormatVersion));
    const auto shape = m.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 5 || shape[0] != 2) throw FormatError("poison archive shape must be [2,n,H,W,C]");
    const std::size_t n = shape[1];
    const std::size_t per = shape[2] * shape[3] * shape[4];
    const auto bytes = io::read_bytes(poison_blob_path(stem));
    if (bytes.size() != 2 * n * per * 4)
      throw FormatError("poison blob " + poison_blob_path(stem).string() + " has " +
                        std::to_string(bytes.size()) + " bytes, expected " +
                        std::to_string(2 * n * per * 4));
    const auto values = io::decode_f32le(bytes);

    PoisonBatch b;
    b.config = config_from_json(m.at("config"));
    b.config.epsilon = m.at("epsilon").get<double>();
    b.config.seed = m.at("seed").get<std::uint64_t>();
    b.config.iterations = m.at("iterations").get<int>();
    b.trigger_id = m.at("trigger_id").get<int>();
    b.source_category = m.at("source_category").get<int>();
    b.target_category = m.at("target_category").get<int>();
    b.losses = m.at("final_losses").get<std::vector<double>>();
    b.anchor_ids = m.at("anchor_ids").get<std::vector<int>>();
    b.loss_trace = m.at("loss_trace").get<std::vector<double>>();
    b.loss_trace_sum = m.at("loss_trace_sum").get<std::vector<double>>();
    b.lr_trace = m.at("lr_trace").get<std::vector<double>>();
    const auto labels = m.at("poison_labels").get<std::vector<int>>();
    const auto anchor_labels = m.at("anchor_labels").get<std::vector<int>>();
    if (b.losses.size() != n || labels.size() != n || anchor_labels.size() != n)
      throw FormatError("poison manifest lists disagree with shape");
    const int h = static_cast<int>(shape[2]), w = static_cast<int>(shape[3]),
              c = static_cast<int>(shape[4]);
    for (std::size_t g = 0; g < 2; ++g)
      for (std::size_t i = 0; i < n; ++i) {
        ImageTensor img(h, w, c, 0.0f, g == 0 ? labels[i] : anchor_labels[i]);
        const auto off = static_cast<std::ptrdiff_t>((g * n + i) * per);
        std::copy(values.begin() + off, values.begin() + off + static_cast<std::ptrdiff_t>(per),
                  img.pixels.begin());
        (g == 0 ? b.poisons : b.anchors).push_back(std::move(img));
      }
    return b;
  } catch (const json::exception& e) {
    throw FormatError("poison manifest " + poison_manifest_path(stem).string() + ": " + e.what());
  }
}

}  // namespace htb::data
