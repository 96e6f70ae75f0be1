#include "htb/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <thread>

#include "htb/error.hpp"
#include "htb/io.hpp"
#include "htb/rng.hpp"

namespace htb::nnet {

using nlohmann::json;

// ------------------------------------------------------------- layer names

namespace {
constexpr std::array<std::string_view, kNumLayers> kLayerNames{"conv1", "conv2", "conv3",
                                                               "conv4", "fc1",   "fc2"};
constexpr int idx(Layer l) { return static_cast<int>(l); }
constexpr bool is_conv(int l) { return l < kNumConv; }
}  // namespace

std::string_view layer_name(Layer layer) { return kLayerNames.at(static_cast<std::size_t>(idx(layer))); }

Layer parse_layer(std::string_view name) {
  for (int i = 0; i < kNumLayers; ++i)
    if (kLayerNames[static_cast<std::size_t>(i)] == name) return static_cast<Layer>(i);
  throw LayerError("unknown layer '" + std::string(name) + "'");
}

std::set<Layer> parse_layer_set(std::string_view csv) {
  std::set<Layer> out;
  std::string item;
  std::stringstream ss{std::string(csv)};
  while (std::getline(ss, item, ',')) {
    std::erase_if(item, [](char ch) { return std::isspace(static_cast<unsigned char>(ch)); });
    if (!item.empty()) out.insert(parse_layer(item));
  }
  return out;
}

std::string format_layer_set(const std::set<Layer>& layers) {
  std::string out;
  for (Layer l : layers) {
    if (!out.empty()) out += ",";
    out += layer_name(l);
  }
  return out;
}

// ------------------------------------------------------------ architecture

void Architecture::validate() const {
  if (num_classes < 2) throw ValidationError("model needs at least 2 classes");
  if (input_channels < 1) throw ValidationError("model needs at least one input channel");
  if (input_height <= 0 || input_width <= 0 || input_height % 8 != 0 || input_width % 8 != 0)
    throw ValidationError("input height and width must be positive multiples of 8");
  for (int c : conv_channels)
    if (c < 1) throw ValidationError("conv widths must be positive");
  if (fc_width < 1) throw ValidationError("fc width must be positive");
}

std::vector<int> Architecture::output_shape(Layer layer) const {
  int h = input_height, w = input_width;
  for (int i = 0; i < kNumConv; ++i) {
    if (kPool[static_cast<std::size_t>(i)]) {
      h /= 2;
      w /= 2;
    }
    if (i == idx(layer)) return {conv_channels[static_cast<std::size_t>(i)], h, w};
  }
  return {layer == Layer::fc1 ? fc_width : num_classes};
}

int Architecture::feature_dim(Layer layer) const {
  const auto s = output_shape(layer);
  return std::accumulate(s.begin(), s.end(), 1, std::multiplies<>());
}

std::pair<int, int> Architecture::weight_shape(Layer layer) const {
  const int l = idx(layer);
  if (is_conv(l)) {
    const int cin = l == 0 ? input_channels : conv_channels[static_cast<std::size_t>(l - 1)];
    const int k = kKernel[static_cast<std::size_t>(l)];
    return {conv_channels[static_cast<std::size_t>(l)], cin * k * k};
  }
  if (layer == Layer::fc1) return {fc_width, feature_dim(Layer::conv4)};
  return {num_classes, fc_width};
}

json to_json(const Architecture& a) {
  return {{"input", {a.input_height, a.input_width, a.input_channels}},
          {"conv_channels", a.conv_channels},
          {"fc_width", a.fc_width},
          {"num_classes", a.num_classes},
          {"kernels", Architecture::kKernel},
          {"pool", Architecture::kPool}};
}

Architecture architecture_from_json(const json& j) {
  Architecture a;
  const auto in = j.at("input").get<std::vector<int>>();
  if (in.size() != 3) throw FormatError("architecture input must have 3 entries");
  a.input_height = in[0];
  a.input_width = in[1];
  a.input_channels = in[2];
  a.conv_channels = j.at("conv_channels").get<std::array<int, kNumConv>>();
  a.fc_width = j.at("fc_width").get<int>();
  a.num_classes = j.at("num_classes").get<int>();
  a.validate();
  return a;
}

// ---------------------------------------------------------- initialization

void reinitialize_layer(ModelBundle& model, Layer layer, std::uint64_t seed) {
  const auto [rows, cols] = model.arch.weight_shape(layer);
  auto& p = model.layer(layer);
  p.weight.assign(static_cast<std::size_t>(rows) * cols, 0.0f);
  p.bias.assign(static_cast<std::size_t>(rows), 0.0f);
  // He-uniform for ReLU layers, LeCun-uniform for the logit layer.
  const double gain = layer == Layer::fc2 ? 3.0 : 6.0;
  const double bound = std::sqrt(gain / cols);
  Rng rng(derive_seed(seed, std::string("init-") + std::string(layer_name(layer))));
  for (float& w : p.weight) w = static_cast<float>(rng.uniform(-bound, bound));
}

ModelBundle build_model(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  ModelBundle m;
  m.arch = arch;
  m.seed = seed;
  m.norm.mean.assign(static_cast<std::size_t>(arch.input_channels), 0.0f);
  m.norm.stddev.assign(static_cast<std::size_t>(arch.input_channels), 1.0f);
  for (int l = 0; l < kNumLayers; ++l) reinitialize_layer(m, static_cast<Layer>(l), seed);
  m.provenance = {{"built_seed", seed}, {"stages", json::array()}};
  return m;
}

ModelBundle build_model(int num_classes, std::uint64_t seed) {
  Architecture a;
  a.num_classes = num_classes;
  return build_model(a, seed);
}

bool same_weights(const LayerParams& a, const LayerParams& b) {
  return a.weight.size() == b.weight.size() && a.bias.size() == b.bias.size() &&
         std::memcmp(a.weight.data(), b.weight.data(), a.weight.size() * sizeof(float)) == 0 &&
         std::memcmp(a.bias.data(), b.bias.data(), a.bias.size() * sizeof(float)) == 0;
}

// ------------------------------------------------------------------ engine
//
// Conv activations are column-major [N*H*W, C]: each channel is a contiguous
// run over (image, row, col). FC activations are [N, D].

namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ConvGeom {
  int cin, cout, k, pad, h, w, oh, ow;
  bool pool;
};

template <class T>
struct Cache {
  int n = 0;
  int start = 0;
  Mat<T> in_start;
  Mat<T> flat;  // conv4 output reshaped to [N, D] for fc1
  std::array<Mat<T>, kNumConv> act;  // post-ReLU, pre-pool (pooled layers only)
  std::array<std::vector<int>, kNumConv> argmax;
  std::array<Mat<T>, kNumLayers> out;
};

template <class T>
struct Grads {
  std::array<Mat<T>, kNumLayers> dwt;
  std::array<Vec<T>, kNumLayers> db;
  std::array<bool, kNumLayers> want{};
};

template <class T>
void im2col(const Mat<T>& x, const ConvGeom& g, int n, Mat<T>& cols) {
  const int hw = g.h * g.w;
  cols.resize(static_cast<Eigen::Index>(n) * hw, g.cin * g.k * g.k);
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const int r = (c * g.k + ky) * g.k + kx;
        T* dst = cols.col(r).data();
        const T* src = x.col(c).data();
        const int dx = kx - g.pad;
        const int x_lo = std::max(0, -dx), x_hi = std::min(g.w, g.w - dx);
        for (int i = 0; i < n; ++i)
          for (int y = 0; y < g.h; ++y) {
            const int sy = y + ky - g.pad;
            T* d = dst + static_cast<std::ptrdiff_t>(i) * hw + y * g.w;
            if (sy < 0 || sy >= g.h) {
              std::fill(d, d + g.w, T(0));
              continue;
            }
            const T* s = src + static_cast<std::ptrdiff_t>(i) * hw + sy * g.w + dx;
            std::fill(d, d + x_lo, T(0));
            std::copy(s + x_lo, s + x_hi, d + x_lo);
            std::fill(d + x_hi, d + g.w, T(0));
          }
      }
}

template <class T>
void col2im(const Mat<T>& cols, const ConvGeom& g, int n, Mat<T>& x) {
  const int hw = g.h * g.w;
  x.setZero(static_cast<Eigen::Index>(n) * hw, g.cin);
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const int r = (c * g.k + ky) * g.k + kx;
        const T* src = cols.col(r).data();
        T* dst = x.col(c).data();
        const int dx = kx - g.pad;
        const int x_lo = std::max(0, -dx), x_hi = std::min(g.w, g.w - dx);
        for (int i = 0; i < n; ++i)
          for (int y = 0; y < g.h; ++y) {
            const int sy = y + ky - g.pad;
            if (sy < 0 || sy >= g.h) continue;
            const T* s = src + static_cast<std::ptrdiff_t>(i) * hw + y * g.w;
            T* d = dst + static_cast<std::ptrdiff_t>(i) * hw + sy * g.w + dx;
            for (int xx = x_lo; xx < x_hi; ++xx) d[xx] += s[xx];
          }
      }
}

template <class T>
void maxpool(const Mat<T>& a, const ConvGeom& g, int n, Mat<T>& out, std::vector<int>& arg) {
  const int hw = g.h * g.w, ohw = g.oh * g.ow;
  out.resize(static_cast<Eigen::Index>(n) * ohw, g.cout);
  arg.resize(static_cast<std::size_t>(out.size()));
  for (int c = 0; c < g.cout; ++c) {
    const T* src = a.col(c).data();
    T* dst = out.col(c).data();
    int* am = arg.data() + static_cast<std::ptrdiff_t>(c) * out.rows();
    for (int i = 0; i < n; ++i)
      for (int oy = 0; oy < g.oh; ++oy)
        for (int ox = 0; ox < g.ow; ++ox) {
          int best = i * hw + (2 * oy) * g.w + 2 * ox;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int r = i * hw + (2 * oy + dy) * g.w + 2 * ox + dx;
              if (src[r] > src[best]) best = r;
            }
          const int o = i * ohw + oy * g.ow + ox;
          dst[o] = src[best];
          am[o] = best;
        }
  }
}

template <class T>
class Engine {
 public:
  Engine(const Architecture& arch, const std::array<LayerParams, kNumLayers>& params,
         const Normalization& norm)
      : arch_(arch) {
    arch.validate();
    int h = arch.input_height, w = arch.input_width, cin = arch.input_channels;
    for (int l = 0; l < kNumConv; ++l) {
      ConvGeom& g = geom_[static_cast<std::size_t>(l)];
      g.cin = cin;
      g.cout = arch.conv_channels[static_cast<std::size_t>(l)];
      g.k = Architecture::kKernel[static_cast<std::size_t>(l)];
      g.pad = g.k / 2;
      g.h = h;
      g.w = w;
      g.pool = Architecture::kPool[static_cast<std::size_t>(l)];
      g.oh = g.pool ? h / 2 : h;
      g.ow = g.pool ? w / 2 : w;
      cin = g.cout;
      h = g.oh;
      w = g.ow;
    }
    for (int l = 0; l < kNumLayers; ++l) {
      const auto [rows, cols] = arch.weight_shape(static_cast<Layer>(l));
      const auto& p = params[static_cast<std::size_t>(l)];
      if (p.weight.size() != static_cast<std::size_t>(rows) * cols ||
          p.bias.size() != static_cast<std::size_t>(rows))
        throw ValidationError("layer " + std::string(kLayerNames[static_cast<std::size_t>(l)]) +
                              " parameters do not match the architecture");
      // Row-major [out, in] storage is column-major [in, out].
      wt_[static_cast<std::size_t>(l)] =
          Eigen::Map<const Mat<float>>(p.weight.data(), cols, rows).template cast<T>();
      b_[static_cast<std::size_t>(l)] =
          Eigen::Map<const Vec<float>>(p.bias.data(), rows).template cast<T>();
    }
    if (norm.mean.size() != static_cast<std::size_t>(arch.input_channels) ||
        norm.stddev.size() != norm.mean.size())
      throw ValidationError("normalization does not match input channels");
    for (std::size_t c = 0; c < norm.mean.size(); ++c) {
      mean_.push_back(static_cast<T>(norm.mean[c]));
      inv_std_.push_back(T(1) / static_cast<T>(norm.stddev[c]));
    }
  }

  const Architecture& arch() const { return arch_; }
  Mat<T>& wt(int l) { return wt_[static_cast<std::size_t>(l)]; }
  Vec<T>& b(int l) { return b_[static_cast<std::size_t>(l)]; }
  const Mat<T>& wt(int l) const { return wt_[static_cast<std::size_t>(l)]; }
  const ConvGeom& geom(int l) const { return geom_[static_cast<std::size_t>(l)]; }

  int rows_per_image(int l) const {
    return is_conv(l) ? geom(l).h * geom(l).w : 1;
  }

  void to_input(std::span<const ImageTensor> imgs, Mat<T>& x) const {
    const int h = arch_.input_height, w = arch_.input_width, ch = arch_.input_channels;
    const int hw = h * w;
    x.resize(static_cast<Eigen::Index>(imgs.size()) * hw, ch);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      const auto& img = imgs[i];
      if (img.height != h || img.width != w || img.channels != ch)
        throw SizeError("image shape does not match model input");
      for (int p = 0; p < hw; ++p)
        for (int c = 0; c < ch; ++c)
          x(static_cast<Eigen::Index>(i) * hw + p, c) =
              (static_cast<T>(img.pixels[static_cast<std::size_t>(p) * ch + c]) - mean_[c]) *
              inv_std_[c];
    }
  }

  const Mat<T>& input_of(const Cache<T>& c, int l) const {
    if (l == c.start) return c.in_start;
    if (l == idx(Layer::fc1)) return c.flat;
    return c.out[static_cast<std::size_t>(l - 1)];
  }

  void forward(Cache<T>& c, int stop) const {
    Mat<T> cols;
    for (int l = c.start; l <= stop; ++l) {
      auto& out = c.out[static_cast<std::size_t>(l)];
      if (is_conv(l)) {
        const ConvGeom& g = geom(l);
        im2col(input_of(c, l), g, c.n, cols);
        Mat<T> z = cols * wt(l);
        z.rowwise() += b_[static_cast<std::size_t>(l)].transpose();
        z = z.cwiseMax(T(0));
        if (g.pool) {
          c.act[static_cast<std::size_t>(l)] = std::move(z);
          maxpool(c.act[static_cast<std::size_t>(l)], g, c.n, out,
                  c.argmax[static_cast<std::size_t>(l)]);
        } else {
          out = std::move(z);
        }
        if (l == idx(Layer::conv4)) c.flat = to_rows(l, out, c.n);
      } else {
        out = input_of(c, l) * wt(l);
        out.rowwise() += b_[static_cast<std::size_t>(l)].transpose();
        if (l == idx(Layer::fc1)) out = out.cwiseMax(T(0));
      }
    }
  }

  // Layer output -> [N, D] with CHW flattening for conv layers.
  Mat<T> to_rows(int l, const Mat<T>& out, int n) const {
    if (!is_conv(l)) return out;
    const ConvGeom& g = geom(l);
    const int ohw = g.oh * g.ow;
    Mat<T> r(n, g.cout * ohw);
    for (int c = 0; c < g.cout; ++c)
      for (int i = 0; i < n; ++i)
        for (int p = 0; p < ohw; ++p) r(i, c * ohw + p) = out(i * ohw + p, c);
    return r;
  }

  Mat<T> from_rows(int l, const Mat<T>& r) const {
    if (!is_conv(l)) return r;
    const ConvGeom& g = geom(l);
    const int ohw = g.oh * g.ow;
    const auto n = static_cast<int>(r.rows());
    Mat<T> out(static_cast<Eigen::Index>(n) * ohw, g.cout);
    for (int c = 0; c < g.cout; ++c)
      for (int i = 0; i < n; ++i)
        for (int p = 0; p < ohw; ++p) out(i * ohw + p, c) = r(i, c * ohw + p);
    return out;
  }

  // Backpropagates `d` (gradient w.r.t. the output of layer `top`) down to layer
  // `bottom`. Fills requested parameter gradients and, if asked, the gradient
  // with respect to the input of `bottom`.
  void backward(const Cache<T>& c, int top, Mat<T> d, int bottom, Grads<T>* grads,
                Mat<T>* dinput) const {
    Mat<T> cols, dz;
    for (int l = top; l >= bottom; --l) {
      const auto ul = static_cast<std::size_t>(l);
      const Mat<T>& in = input_of(c, l);
      const bool need_din = l > bottom || dinput != nullptr;
      if (!is_conv(l)) {
        if (l == idx(Layer::fc1))
          dz = d.cwiseProduct((c.out[ul].array() > T(0)).matrix().template cast<T>());
        else
          dz = std::move(d);
        if (grads && grads->want[ul]) {
          grads->dwt[ul].noalias() = in.transpose() * dz;
          grads->db[ul] = dz.colwise().sum().transpose();
        }
        if (need_din) {
          Mat<T> din = dz * wt(l).transpose();
          d = (l == idx(Layer::fc1) && l != c.start) ? from_rows(idx(Layer::conv4), din)
                                                     : std::move(din);
        }
        continue;
      }
      const ConvGeom& g = geom(l);
      if (g.pool) {
        const Mat<T>& act = c.act[ul];
        dz.setZero(act.rows(), act.cols());
        const auto& am = c.argmax[ul];
        for (Eigen::Index ch = 0; ch < d.cols(); ++ch)
          for (Eigen::Index o = 0; o < d.rows(); ++o) {
            const int r = am[static_cast<std::size_t>(ch * d.rows() + o)];
            if (act(r, ch) > T(0)) dz(r, ch) += d(o, ch);
          }
      } else {
        dz = d.cwiseProduct((c.out[ul].array() > T(0)).matrix().template cast<T>());
      }
      if (grads && grads->want[ul]) {
        im2col(in, g, c.n, cols);
        grads->dwt[ul].noalias() = cols.transpose() * dz;
        grads->db[ul] = dz.colwise().sum().transpose();
      }
      if (need_din) {
        Mat<T> dcols = dz * wt(l).transpose();
        col2im(dcols, g, c.n, d);
      }
    }
    if (dinput) *dinput = std::move(d);
  }

  // Per-pixel gradient images from an input-space gradient.
  std::vector<ImageTensor> to_images(const Mat<T>& dx, int n) const {
    const int h = arch_.input_height, w = arch_.input_width, ch = arch_.input_channels;
    const int hw = h * w;
    std::vector<ImageTensor> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      ImageTensor g(h, w, ch);
      for (int p = 0; p < hw; ++p)
        for (int c = 0; c < ch; ++c)
          g.pixels[static_cast<std::size_t>(p) * ch + c] =
              static_cast<float>(dx(static_cast<Eigen::Index>(i) * hw + p, c) * inv_std_[c]);
      out.push_back(std::move(g));
    }
    return out;
  }

  void store(std::array<LayerParams, kNumLayers>& params, int l) const {
    auto& p = params[static_cast<std::size_t>(l)];
    const Mat<float> w = wt(l).template cast<float>();
    std::copy(w.data(), w.data() + w.size(), p.weight.begin());
    const Vec<float> bb = b_[static_cast<std::size_t>(l)].template cast<float>();
    std::copy(bb.data(), bb.data() + bb.size(), p.bias.begin());
  }

 private:
  Architecture arch_;
  std::array<ConvGeom, kNumConv> geom_{};
  std::array<Mat<T>, kNumLayers> wt_;
  std::array<Vec<T>, kNumLayers> b_;
  std::vector<T> mean_, inv_std_;
};

template <class T>
Mat<T> forward_rows(const Engine<T>& eng, std::span<const ImageTensor> imgs, int layer) {
  Cache<T> c;
  c.n = static_cast<int>(imgs.size());
  c.start = 0;
  eng.to_input(imgs, c.in_start);
  eng.forward(c, layer);
  return eng.to_rows(layer, c.out[static_cast<std::size_t>(layer)], c.n);
}

template <class T>
FeatureMatrix chunked_features(const Engine<T>& eng, std::span<const ImageTensor> images, Layer layer,
                               const ExecPolicy& exec) {
  const int l = idx(layer);
  const int dim = eng.arch().feature_dim(layer);
  FeatureMatrix out(static_cast<Eigen::Index>(images.size()), dim);
  const std::size_t chunk = static_cast<std::size_t>(std::max(1, exec.chunk));
  const std::size_t n_chunks = (images.size() + chunk - 1) / chunk;
  auto run = [&](std::size_t k) {
    const std::size_t lo = k * chunk, hi = std::min(images.size(), lo + chunk);
    const Mat<T> r = forward_rows(eng, images.subspan(lo, hi - lo), l);
    out.middleRows(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(hi - lo)) =
        r.template cast<float>();
  };
  const int threads = std::max(1, std::min<int>(exec.threads, static_cast<int>(n_chunks)));
  if (threads == 1) {
    for (std::size_t k = 0; k < n_chunks; ++k) run(k);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        try {
          for (std::size_t k = static_cast<std::size_t>(t); k < n_chunks;
               k += static_cast<std::size_t>(threads))
            run(k);
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return out;
}

template <class T>
GradientResult gradient_impl(const Engine<T>& eng, const FeatureLoss& loss,
                             std::span<const ImageTensor> images, Layer layer) {
  const int l = idx(layer);
  Cache<T> c;
  c.n = static_cast<int>(images.size());
  c.start = 0;
  eng.to_input(images, c.in_start);
  eng.forward(c, l);
  GradientResult res;
  res.features = eng.to_rows(l, c.out[static_cast<std::size_t>(l)], c.n).template cast<double>();
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(res.features.rows(), res.features.cols());
  res.loss = loss(res.features, g);
  if (!std::isfinite(res.loss)) throw NumericError("non-finite feature loss", 0);
  if (g.rows() != res.features.rows() || g.cols() != res.features.cols())
    throw ValidationError("feature loss gradient has the wrong shape");
  Mat<T> dx;
  eng.backward(c, l, eng.from_rows(l, g.cast<T>()), 0, nullptr, &dx);
  res.gradient = eng.to_images(dx, c.n);
  return res;
}

}  // namespace

// -------------------------------------------------------- FeatureExtractor

struct FeatureExtractor::Impl {
  std::unique_ptr<Engine<float>> f32;
  std::unique_ptr<Engine<double>> f64;
};

FeatureExtractor::FeatureExtractor(const ModelBundle& model, Precision precision)
    : impl_(std::make_unique<Impl>()) {
  if (precision == Precision::f32)
    impl_->f32 = std::make_unique<Engine<float>>(model.arch, model.params, model.norm);
  else
    impl_->f64 = std::make_unique<Engine<double>>(model.arch, model.params, model.norm);
}

FeatureExtractor::~FeatureExtractor() = default;
FeatureExtractor::FeatureExtractor(FeatureExtractor&&) noexcept = default;
FeatureExtractor& FeatureExtractor::operator=(FeatureExtractor&&) noexcept = default;

FeatureMatrix FeatureExtractor::features(std::span<const ImageTensor> images, Layer layer,
                                         const ExecPolicy& exec) const {
  if (impl_->f32) return chunked_features(*impl_->f32, images, layer, exec);
  return chunked_features(*impl_->f64, images, layer, exec);
}

GradientResult FeatureExtractor::input_gradient(const FeatureLoss& loss,
                                                std::span<const ImageTensor> images,
                                                Layer layer) const {
  if (images.empty()) throw ValidationError("input_gradient on an empty batch");
  if (impl_->f32) return gradient_impl(*impl_->f32, loss, images, layer);
  return gradient_impl(*impl_->f64, loss, images, layer);
}

FeatureMatrix features(const ModelBundle& model, std::span<const ImageTensor> images, Layer layer,
                       const ExecPolicy& exec) {
  return FeatureExtractor(model).features(images, layer, exec);
}

GradientResult input_gradient(const ModelBundle& model, const FeatureLoss& loss,
                              std::span<const ImageTensor> images, Layer layer,
                              Precision precision) {
  return FeatureExtractor(model, precision).input_gradient(loss, images, layer);
}

int argmax_row(const Eigen::Ref<const Eigen::RowVectorXf>& logits) {
  int best = 0;
  for (Eigen::Index j = 1; j < logits.size(); ++j)
    if (logits(j) > logits(best)) best = static_cast<int>(j);
  return best;
}

Prediction predict(const ModelBundle& model, std::span<const ImageTensor> images,
                   const ExecPolicy& exec) {
  Prediction p;
  p.logits = features(model, images, Layer::fc2, exec);
  p.labels.resize(images.size());
  for (Eigen::Index i = 0; i < p.logits.rows(); ++i)
    p.labels[static_cast<std::size_t>(i)] = argmax_row(p.logits.row(i));
  return p;
}

double accuracy(const ModelBundle& model, std::span<const ImageTensor> images,
                const ExecPolicy& exec) {
  if (images.empty()) return 0.0;
  const auto p = predict(model, images, exec);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < images.size(); ++i) hit += p.labels[i] == images[i].label ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(images.size());
}

// ---------------------------------------------------------------- training

void TrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ValidationError("momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ValidationError("weight decay must be non-negative");
  if (batch_size < 1) throw ValidationError("batch size must be positive");
}

void FinetuneConfig::validate() const {
  if (trainable_layers.empty()) throw ValidationError("finetune needs at least one trainable layer");
  if (num_outputs < 2) throw ValidationError("finetune head needs at least 2 outputs");
  train_config().validate();
}

TrainConfig FinetuneConfig::train_config() const {
  return {epochs, learning_rate, momentum, weight_decay, batch_size, seed};
}

namespace {

// Rows [i*rpi, (i+1)*rpi) of every column, for each selected image i.
Mat<float> gather_images(const Mat<float>& all, int rows_per_image, std::span<const std::size_t> ids) {
  Mat<float> out(static_cast<Eigen::Index>(ids.size()) * rows_per_image, all.cols());
  for (Eigen::Index c = 0; c < all.cols(); ++c)
    for (std::size_t k = 0; k < ids.size(); ++k)
      out.col(c).segment(static_cast<Eigen::Index>(k) * rows_per_image, rows_per_image) =
          all.col(c).segment(static_cast<Eigen::Index>(ids[k]) * rows_per_image, rows_per_image);
  return out;
}

Normalization channel_stats(std::span<const ImageTensor> images, int channels) {
  std::vector<double> sum(static_cast<std::size_t>(channels), 0.0), sq(sum);
  std::size_t count = 0;
  for (const auto& img : images) {
    for (std::size_t p = 0; p < img.pixels.size(); ++p) {
      const double v = img.pixels[p];
      sum[p % static_cast<std::size_t>(channels)] += v;
      sq[p % static_cast<std::size_t>(channels)] += v * v;
    }
    count += img.pixels.size() / static_cast<std::size_t>(channels);
  }
  Normalization n;
  for (int c = 0; c < channels; ++c) {
    const double m = sum[static_cast<std::size_t>(c)] / static_cast<double>(count);
    const double var = std::max(0.0, sq[static_cast<std::size_t>(c)] / static_cast<double>(count) - m * m);
    n.mean.push_back(static_cast<float>(m));
    n.stddev.push_back(static_cast<float>(std::max(std::sqrt(var), 1e-3)));
  }
  return n;
}

// Mean softmax cross-entropy; writes dloss/dlogits into `d`.
double softmax_xent(const Mat<float>& logits, std::span<const int> labels, Mat<float>& d,
                    std::size_t* hits) {
  const auto n = logits.rows();
  d.resize(n, logits.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const float mx = logits.row(i).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) z += std::exp(static_cast<double>(logits(i, j) - mx));
    const int y = labels[static_cast<std::size_t>(i)];
    loss += std::log(z) - static_cast<double>(logits(i, y) - mx);
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const double p = std::exp(static_cast<double>(logits(i, j) - mx)) / z;
      d(i, j) = static_cast<float>((p - (j == y ? 1.0 : 0.0)) / static_cast<double>(n));
    }
    if (hits && argmax_row(logits.row(i)) == y) ++*hits;
  }
  return loss / static_cast<double>(n);
}

TrainResult train_layers(ModelBundle model, std::span<const ImageTensor> train_set,
                         const TrainConfig& cfg, const std::set<Layer>& trainable,
                         const std::string& stage) {
  cfg.validate();
  if (train_set.empty()) throw ValidationError(stage + ": empty training set");
  for (const auto& img : train_set)
    if (img.label < 0 || img.label >= model.arch.num_classes)
      throw ValidationError(stage + ": label " + std::to_string(img.label) + " outside [0, " +
                            std::to_string(model.arch.num_classes) + ")");

  TrainResult res;
  Engine<float> eng(model.arch, model.params, model.norm);
  const int start = idx(*trainable.begin());
  const std::size_t n = train_set.size();
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = train_set[i].label;

  // The frozen prefix is deterministic, so its output is computed once.
  Mat<float> prefix;
  if (start > 0) {
    const int prev = start - 1;
    std::vector<Mat<float>> parts;
    const std::size_t chunk = 64;
    Eigen::Index rows = 0;
    for (std::size_t lo = 0; lo < n; lo += chunk) {
      const std::size_t hi = std::min(n, lo + chunk);
      Cache<float> c;
      c.n = static_cast<int>(hi - lo);
      eng.to_input(train_set.subspan(lo, hi - lo), c.in_start);
      eng.forward(c, prev);
      parts.push_back(start == idx(Layer::fc1) ? c.flat : c.out[static_cast<std::size_t>(prev)]);
      rows += parts.back().rows();
    }
    prefix.resize(rows, parts.front().cols());
    const int rpi = eng.rows_per_image(start);
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const std::size_t lo = k * chunk;
      const auto cnt = parts[k].rows() / rpi;
      for (Eigen::Index c = 0; c < prefix.cols(); ++c)
        for (Eigen::Index i = 0; i < cnt; ++i)
          prefix.col(c).segment((static_cast<Eigen::Index>(lo) + i) * rpi, rpi) =
              parts[k].col(c).segment(i * rpi, rpi);
    }
  }

  Grads<float> grads;
  std::array<Mat<float>, kNumLayers> vel_w;
  std::array<Vec<float>, kNumLayers> vel_b;
  for (Layer l : trainable) {
    const auto ul = static_cast<std::size_t>(idx(l));
    grads.want[ul] = true;
    vel_w[ul] = Mat<float>::Zero(eng.wt(idx(l)).rows(), eng.wt(idx(l)).cols());
    vel_b[ul] = Vec<float>::Zero(eng.b(idx(l)).size());
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(cfg.seed, stage + "-shuffle"));
  const auto lr = static_cast<float>(cfg.learning_rate);
  const auto mom = static_cast<float>(cfg.momentum);
  const auto wd = static_cast<float>(cfg.weight_decay);
  const int top = idx(Layer::fc2);
  std::vector<ImageTensor> batch_imgs;
  std::vector<int> batch_labels;
  Mat<float> dlogits;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t lo = 0; lo < n; lo += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> ids(order.data() + lo, hi - lo);
      Cache<float> c;
      c.n = static_cast<int>(ids.size());
      c.start = start;
      if (start == 0) {
        batch_imgs.clear();
        for (auto i : ids) batch_imgs.push_back(train_set[i]);
        eng.to_input(batch_imgs, c.in_start);
      } else {
        c.in_start = gather_images(prefix, eng.rows_per_image(start), ids);
        if (start == idx(Layer::fc1)) c.flat = c.in_start;
      }
      eng.forward(c, top);
      batch_labels.clear();
      for (auto i : ids) batch_labels.push_back(labels[i]);
      const double loss = softmax_xent(c.out[static_cast<std::size_t>(top)], batch_labels, dlogits, nullptr);
      if (!std::isfinite(loss)) throw TrainingError(stage + ": non-finite loss", epoch);
      loss_sum += loss * static_cast<double>(ids.size());
      eng.backward(c, top, dlogits, start, &grads, nullptr);
      for (Layer l : trainable) {
        const int li = idx(l);
        const auto ul = static_cast<std::size_t>(li);
        vel_w[ul] = mom * vel_w[ul] + grads.dwt[ul] + wd * eng.wt(li);
        vel_b[ul] = mom * vel_b[ul] + grads.db[ul];
        eng.wt(li) -= lr * vel_w[ul];
        eng.b(li) -= lr * vel_b[ul];
      }
    }
    const double epoch_loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(epoch_loss)) throw TrainingError(stage + ": non-finite loss", epoch);
    res.epoch_loss.push_back(epoch_loss);
  }
  for (Layer l : trainable) eng.store(model.params, idx(l));

  // Post-training accuracy with the final weights.
  std::size_t hits = 0;
  for (std::size_t lo = 0; lo < n; lo += 64) {
    const std::size_t hi = std::min(n, lo + 64);
    const Mat<float> logits = forward_rows(eng, train_set.subspan(lo, hi - lo), top);
    for (std::size_t i = lo; i < hi; ++i)
      hits += argmax_row(logits.row(static_cast<Eigen::Index>(i - lo))) == labels[i] ? 1 : 0;
  }
  res.train_accuracy = static_cast<double>(hits) / static_cast<double>(n);
  model.provenance["stages"].push_back({{"stage", stage},
                                        {"epochs", cfg.epochs},
                                        {"learning_rate", cfg.learning_rate},
                                        {"momentum", cfg.momentum},
                                        {"weight_decay", cfg.weight_decay},
                                        {"batch_size", cfg.batch_size},
                                        {"seed", cfg.seed},
                                        {"trainable", format_layer_set(trainable)},
                                        {"n_train", n},
                                        {"train_accuracy", res.train_accuracy}});
  res.model = std::move(model);
  return res;
}

}  // namespace

TrainResult pretrain(const ModelBundle& model, std::span<const ImageTensor> train_set,
                     const TrainConfig& config) {
  config.validate();
  if (train_set.empty()) throw ValidationError("pretrain: empty training set");
  std::set<int> classes;
  for (const auto& img : train_set) classes.insert(img.label);
  if (classes.size() < 2) throw ValidationError("pretrain: training set needs at least 2 classes");
  ModelBundle m = model;
  m.norm = channel_stats(train_set, m.arch.input_channels);
  std::set<Layer> all;
  for (int l = 0; l < kNumLayers; ++l) all.insert(static_cast<Layer>(l));
  return train_layers(std::move(m), train_set, config, all, "pretrain");
}

TrainResult finetune(const ModelBundle& model, std::span<const ImageTensor> train_set,
                     const FinetuneConfig& config) {
  config.validate();
  if (train_set.empty()) throw ValidationError("finetune: empty training set");
  ModelBundle m = model;
  if (config.num_outputs != m.arch.num_classes) {
    if (!config.trainable_layers.contains(Layer::fc2))
      throw ValidationError("finetune: changing the head width requires fc2 to be trainable");
    m.arch.num_classes = config.num_outputs;
  }
  for (Layer l : config.trainable_layers) reinitialize_layer(m, l, derive_seed(config.seed, "finetune"));
  return train_layers(std::move(m), train_set, config.train_config(), config.trainable_layers,
                      "finetune");
}

// -------------------------------------------------------------- checkpoint

namespace {
constexpr char kMagic[8] = {'H', 'T', 'B', 'C', 'K', 'P', 'T', '1'};
constexpr int kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const ModelBundle& model, const std::filesystem::path& path) {
  json header;
  header["format_version"] = kCheckpointVersion;
  header["architecture"] = to_json(model.arch);
  header["normalization"] = {{"mean", model.norm.mean}, {"stddev", model.norm.stddev}};
  header["seed"] = model.seed;
  header["embedding_layer"] = layer_name(model.embedding_layer);
  header["provenance"] = model.provenance;
  json tensors = json::array();
  std::vector<std::uint8_t> data;
  std::size_t offset = 0;
  for (int l = 0; l < kNumLayers; ++l) {
    const auto [rows, cols] = model.arch.weight_shape(static_cast<Layer>(l));
    const auto& p = model.params[static_cast<std::size_t>(l)];
    const std::string name(kLayerNames[static_cast<std::size_t>(l)]);
    std::vector<int> wshape{rows, cols};
    if (is_conv(l)) {
      const int k = Architecture::kKernel[static_cast<std::size_t>(l)];
      wshape = {rows, cols / (k * k), k, k};
    }
    tensors.push_back({{"name", name + ".weight"}, {"shape", wshape}, {"offset", offset}, {"count", p.weight.size()}});
    io::append_f32le(data, p.weight);
    offset += p.weight.size();
    tensors.push_back({{"name", name + ".bias"}, {"shape", {rows}}, {"offset", offset}, {"count", p.bias.size()}});
    io::append_f32le(data, p.bias);
    offset += p.bias.size();
  }
  header["tensors"] = tensors;
  const std::string h = header.dump();
  std::vector<std::uint8_t> bytes(kMagic, kMagic + 8);
  const std::uint64_t len = h.size();
  for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<std::uint8_t>(len >> (8 * b)));
  bytes.insert(bytes.end(), h.begin(), h.end());
  bytes.insert(bytes.end(), data.begin(), data.end());
  io::write_bytes(path, bytes);
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_bytes(path);
  if (bytes.size() < 16 || !std::equal(kMagic, kMagic + 8, bytes.begin()))
    throw FormatError(path.string() + ": not a checkpoint");
  std::uint64_t len = 0;
  for (int b = 0; b < 8; ++b) len |= static_cast<std::uint64_t>(bytes[8 + static_cast<std::size_t>(b)]) << (8 * b);
  if (16 + len > bytes.size()) throw FormatError(path.string() + ": truncated header");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  try {
    if (header.at("format_version").get<int>() != kCheckpointVersion)
      throw IncompatibilityError(path.string() + ": unsupported checkpoint version");
    ModelBundle m;
    m.arch = architecture_from_json(header.at("architecture"));
    m.norm.mean = header.at("normalization").at("mean").get<std::vector<float>>();
    m.norm.stddev = header.at("normalization").at("stddev").get<std::vector<float>>();
    m.seed = header.at("seed").get<std::uint64_t>();
    m.embedding_layer = parse_layer(header.at("embedding_layer").get<std::string>());
    m.provenance = header.at("provenance");
    const std::span<const std::uint8_t> payload(bytes.data() + 16 + len, bytes.size() - 16 - len);
    const auto values = io::decode_f32le(payload);
    for (const auto& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto dot = name.find('.');
      const Layer l = parse_layer(name.substr(0, dot));
      const auto off = t.at("offset").get<std::size_t>();
      const auto cnt = t.at("count").get<std::size_t>();
      if (off + cnt > values.size()) throw FormatError(path.string() + ": truncated tensor " + name);
      std::vector<float> v(values.begin() + static_cast<std::ptrdiff_t>(off),
                           values.begin() + static_cast<std::ptrdiff_t>(off + cnt));
      (name.substr(dot + 1) == "weight" ? m.layer(l).weight : m.layer(l).bias) = std::move(v);
    }
    for (int l = 0; l < kNumLayers; ++l) {
      const auto [rows, cols] = m.arch.weight_shape(static_cast<Layer>(l));
      if (m.params[static_cast<std::size_t>(l)].weight.size() != static_cast<std::size_t>(rows) * cols ||
          m.params[static_cast<std::size_t>(l)].bias.size() != static_cast<std::size_t>(rows))
        throw FormatError(path.string() + ": tensor shapes do not match architecture");
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace htb::nnet
