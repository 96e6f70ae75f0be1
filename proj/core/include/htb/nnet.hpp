#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "htb/image.hpp"

namespace htb::nnet {

// The victim CNN, a reduced AlexNet for 32x32 inputs:
//
//   input  C x 32 x 32
//   conv1  5x5 s1 pad 2, ReLU, 2x2 maxpool -> c1 x 16 x 16
//   conv2  5x5 s1 pad 2, ReLU, 2x2 maxpool -> c2 x 8 x 8
//   conv3  3x3 s1 pad 1, ReLU              -> c3 x 8 x 8
//   conv4  3x3 s1 pad 1, ReLU, 2x2 maxpool -> c4 x 4 x 4
//   fc1    ReLU                            -> fc_width
//   fc2    logits                          -> num_classes
//
// Default widths are (64, 192, 384, 256) and fc_width 512.
enum class Layer : int { conv1 = 0, conv2, conv3, conv4, fc1, fc2 };
inline constexpr int kNumLayers = 6;
inline constexpr int kNumConv = 4;

std::string_view layer_name(Layer layer);
// Throws LayerError for unknown names.
Layer parse_layer(std::string_view name);
std::set<Layer> parse_layer_set(std::string_view csv);
std::string format_layer_set(const std::set<Layer>& layers);

struct Architecture {
  int input_height = 32;
  int input_width = 32;
  int input_channels = 3;
  std::array<int, kNumConv> conv_channels{64, 192, 384, 256};
  int fc_width = 512;
  int num_classes = 10;

  static constexpr std::array<int, kNumConv> kKernel{5, 5, 3, 3};
  static constexpr std::array<bool, kNumConv> kPool{true, true, false, true};

  void validate() const;
  // {C, H, W} for conv layers, {D} for fully-connected ones.
  std::vector<int> output_shape(Layer layer) const;
  int feature_dim(Layer layer) const;
  // Rows and columns of the layer's weight matrix (columns = C_in*k*k for conv).
  std::pair<int, int> weight_shape(Layer layer) const;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

nlohmann::json to_json(const Architecture& a);
Architecture architecture_from_json(const nlohmann::json& j);

// Per-channel statistics on the 8-bit scale, applied before conv1.
struct Normalization {
  std::vector<float> mean;
  std::vector<float> stddev;

  friend bool operator==(const Normalization&, const Normalization&) = default;
};

struct LayerParams {
  std::vector<float> weight;  // row-major [out, in]
  std::vector<float> bias;    // [out]

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct ModelBundle {
  Architecture arch;
  Normalization norm;
  std::array<LayerParams, kNumLayers> params;
  Layer embedding_layer = Layer::fc1;
  std::uint64_t seed = 0;
  nlohmann::json provenance = nlohmann::json::object();

  const LayerParams& layer(Layer l) const { return params[static_cast<int>(l)]; }
  LayerParams& layer(Layer l) { return params[static_cast<int>(l)]; }
};

// Deterministic He-uniform initialization; identity normalization (mean 0, std 1)
// until pretraining calibrates it.
ModelBundle build_model(const Architecture& arch, std::uint64_t seed);
ModelBundle build_model(int num_classes, std::uint64_t seed);

// Re-draws one layer's weights from scratch using `seed`.
void reinitialize_layer(ModelBundle& model, Layer layer, std::uint64_t seed);

// Thread count for inference. Training is always serial.
struct ExecPolicy {
  int threads = 1;
  int chunk = 64;  // images per forward pass
};

using FeatureMatrix = Eigen::MatrixXf;  // one row per image

// Flattened (CHW order) activation of every image at `layer`.
FeatureMatrix features(const ModelBundle& model, std::span<const ImageTensor> images, Layer layer,
                       const ExecPolicy& exec = {});

struct Prediction {
  std::vector<int> labels;
  FeatureMatrix logits;
};

// argmax of logits; ties go to the smaller class id.
Prediction predict(const ModelBundle& model, std::span<const ImageTensor> images,
                   const ExecPolicy& exec = {});
double accuracy(const ModelBundle& model, std::span<const ImageTensor> images,
                const ExecPolicy& exec = {});
int argmax_row(const Eigen::Ref<const Eigen::RowVectorXf>& logits);

enum class Precision { f32, f64 };

// Scalar loss of a feature matrix (one row per image). Must write dloss/dfeatures
// into `grad` (already sized like `features`) and return the loss.
using FeatureLoss = std::function<double(const Eigen::MatrixXd& features, Eigen::MatrixXd& grad)>;

struct GradientResult {
  double loss = 0.0;
  Eigen::MatrixXd features;
  std::vector<ImageTensor> gradient;  // dloss/dpixel, same shapes as the inputs
};

// Holds converted weights so repeated gradient evaluations skip the setup.
class FeatureExtractor {
 public:
  FeatureExtractor(const ModelBundle& model, Precision precision = Precision::f32);
  ~FeatureExtractor();
  FeatureExtractor(FeatureExtractor&&) noexcept;
  FeatureExtractor& operator=(FeatureExtractor&&) noexcept;

  FeatureMatrix features(std::span<const ImageTensor> images, Layer layer,
                         const ExecPolicy& exec = {}) const;
  // Throws NumericError when the loss is not finite.
  GradientResult input_gradient(const FeatureLoss& loss, std::span<const ImageTensor> images,
                                Layer layer) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

GradientResult input_gradient(const ModelBundle& model, const FeatureLoss& loss,
                              std::span<const ImageTensor> images, Layer layer,
                              Precision precision = Precision::f32);

struct TrainConfig {
  int epochs = 200;
  double learning_rate = 0.001;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct FinetuneConfig {
  std::set<Layer> trainable_layers{Layer::fc2};
  int num_outputs = 2;  // width of the re-initialized head
  int epochs = 30;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
  TrainConfig train_config() const;
  friend bool operator==(const FinetuneConfig&, const FinetuneConfig&) = default;
};

struct TrainResult {
  ModelBundle model;
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
};

// Full-network SGD with momentum and weight decay on softmax cross-entropy.
// Normalization statistics are recomputed from `train_set`. Labels must lie in
// [0, num_classes). Throws TrainingError on a non-finite loss.
TrainResult pretrain(const ModelBundle& model, std::span<const ImageTensor> train_set,
                     const TrainConfig& config);

// Re-initializes the trainable layers from scratch and trains only them; all other
// layers are returned bit-identical. Resizes fc2 to cfg.num_outputs.
TrainResult finetune(const ModelBundle& model, std::span<const ImageTensor> train_set,
                     const FinetuneConfig& config);

// Checkpoint layout:
//   bytes 0..7   magic "HTBCKPT1"
//   bytes 8..15  header length L, uint64 little-endian
//   next L bytes UTF-8 JSON {format_version, architecture, normalization, seed,
//                embedding_layer, provenance, tensors:[{name, shape, offset, count}]}
//   rest         float32 little-endian tensor data in header order;
//                offsets count floats from the start of this section
void save_checkpoint(const ModelBundle& model, const std::filesystem::path& path);
ModelBundle load_checkpoint(const std::filesystem::path& path);

bool same_weights(const LayerParams& a, const LayerParams& b);

}  // namespace htb::nnet
