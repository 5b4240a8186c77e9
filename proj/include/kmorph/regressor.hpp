#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kmorph/render.hpp"
#include "kmorph/rng.hpp"

namespace kmorph {

// 5 conv stages (3x3, stride 1, zero-pad 1, ReLU) each followed by a 2x2
// max pool (stride 2, trailing odd row/column dropped), then one linear
// output layer.
struct NetworkSpec {
  int input_width = 64, input_height = 48;
  std::array<int, 5> channels = {2, 4, 6, 8, 10};
  int output_dim = 0;

  bool operator==(const NetworkSpec&) const = default;
};

namespace detail {

struct LayerShape {
  int c, h, w;  // post-pool
  int conv_h, conv_w;
};

struct NetLayout {
  std::array<LayerShape, 5> layers;
  std::array<std::size_t, 5> conv_w_off, conv_b_off;
  std::size_t fc_w_off = 0, fc_b_off = 0;
  int fc_in = 0;
  std::size_t total = 0;

  static NetLayout make(const NetworkSpec& spec) {
    if (spec.output_dim <= 0) throw std::invalid_argument("network: output_dim must be set");
    NetLayout L;
    int h = spec.input_height, w = spec.input_width, cin = 1;
    std::size_t off = 0;
    for (int l = 0; l < 5; ++l) {
      int cout = spec.channels[l];
      L.conv_w_off[l] = off;
      off += std::size_t(cout) * cin * 9;
      L.conv_b_off[l] = off;
      off += cout;
      L.layers[l].conv_h = h;
      L.layers[l].conv_w = w;
      h /= 2;
      w /= 2;
      if (h < 1 || w < 1) throw std::invalid_argument("network: input too small for 5 pools");
      L.layers[l] = {cout, h, w, L.layers[l].conv_h, L.layers[l].conv_w};
      cin = cout;
    }
    L.fc_in = L.layers[4].c * L.layers[4].h * L.layers[4].w;
    L.fc_w_off = off;
    off += std::size_t(spec.output_dim) * L.fc_in;
    L.fc_b_off = off;
    off += spec.output_dim;
    L.total = off;
    return L;
  }
};

}  // namespace detail

struct NetworkWeights {
  NetworkSpec spec;
  std::vector<double> params;  // conv kernels+biases per layer, then fc
  std::uint64_t init_seed = 0;

  std::size_t param_count() const { return params.size(); }
};

inline NetworkWeights init_weights(const NetworkSpec& spec, std::uint64_t seed) {
  auto layout = detail::NetLayout::make(spec);
  NetworkWeights w;
  w.spec = spec;
  w.init_seed = seed;
  w.params.assign(layout.total, 0.0);
  Rng rng(seed);
  int cin = 1;
  for (int l = 0; l < 5; ++l) {
    int cout = spec.channels[l];
    double scale = std::sqrt(2.0 / (cin * 9.0));  // He, fan-in
    for (std::size_t i = 0; i < std::size_t(cout) * cin * 9; ++i)
      w.params[layout.conv_w_off[l] + i] = scale * rng.gaussian();
    cin = cout;
  }
  double scale = std::sqrt(2.0 / layout.fc_in);
  for (std::size_t i = 0; i < std::size_t(spec.output_dim) * layout.fc_in; ++i)
    w.params[layout.fc_w_off + i] = scale * rng.gaussian();
  return w;
}

namespace detail {

struct ForwardCache {
  // per layer: post-ReLU conv map, pooled map, argmax (flat index into conv map)
  std::array<std::vector<double>, 5> relu;
  std::array<std::vector<double>, 5> pool;
  std::array<std::vector<int>, 5> arg;
  Eigen::VectorXd out;
};

inline void forward_impl(const DepthImage& d, const NetworkWeights& w, const NetLayout& L,
                         ForwardCache& cache) {
  const NetworkSpec& spec = w.spec;
  if (d.width != spec.input_width || d.height != spec.input_height)
    throw std::invalid_argument("forward: input resolution does not match network spec");

  const std::vector<double>* in = &d.values;
  int cin = 1;
  for (int l = 0; l < 5; ++l) {
    const LayerShape& s = L.layers[l];
    int ch = s.conv_h, cw = s.conv_w;
    auto& relu = cache.relu[l];
    relu.assign(std::size_t(s.c) * ch * cw, 0.0);
    const double* W = w.params.data() + L.conv_w_off[l];
    const double* B = w.params.data() + L.conv_b_off[l];
    for (int co = 0; co < s.c; ++co) {
      double* outp = relu.data() + std::size_t(co) * ch * cw;
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) outp[y * cw + x] = B[co];
      for (int ci = 0; ci < cin; ++ci) {
        const double* inp = in->data() + std::size_t(ci) * ch * cw;
        const double* k = W + (std::size_t(co) * cin + ci) * 9;
        for (int y = 0; y < ch; ++y) {
          for (int dy = 0; dy < 3; ++dy) {
            int yy = y + dy - 1;
            if (yy < 0 || yy >= ch) continue;
            const double* row = inp + yy * cw;
            double* orow = outp + y * cw;
            const double* kr = k + dy * 3;
            for (int x = 0; x < cw; ++x) {
              double acc = 0.0;
              if (x > 0) acc += kr[0] * row[x - 1];
              acc += kr[1] * row[x];
              if (x + 1 < cw) acc += kr[2] * row[x + 1];
              orow[x] += acc;
            }
          }
        }
      }
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) {
          double& v = outp[y * cw + x];
          if (v < 0.0) v = 0.0;
        }
    }
    // 2x2 max pool, first-index tie-break
    auto& pool = cache.pool[l];
    auto& arg = cache.arg[l];
    pool.assign(std::size_t(s.c) * s.h * s.w, 0.0);
    arg.assign(pool.size(), 0);
    for (int c = 0; c < s.c; ++c) {
      const double* cm = relu.data() + std::size_t(c) * ch * cw;
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          int best = (2 * y) * cw + 2 * x;
          double bv = cm[best];
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              int i = (2 * y + dy) * cw + (2 * x + dx);
              if (cm[i] > bv) {
                bv = cm[i];
                best = i;
              }
            }
          std::size_t o = std::size_t(c) * s.h * s.w + std::size_t(y) * s.w + x;
          pool[o] = bv;
          arg[o] = best;
        }
    }
    in = &pool;
    cin = s.c;
  }

  cache.out.resize(spec.output_dim);
  const double* FW = w.params.data() + L.fc_w_off;
  const double* FB = w.params.data() + L.fc_b_off;
  const auto& flat = cache.pool[4];
  for (int o = 0; o < spec.output_dim; ++o) {
    double acc = FB[o];
    const double* row = FW + std::size_t(o) * L.fc_in;
    for (int i = 0; i < L.fc_in; ++i) acc += row[i] * flat[i];
    cache.out[o] = acc;
  }
}

// backward for one sample; dout = dL/d(output); accumulates into grad
inline void backward_impl(const DepthImage& d, const NetworkWeights& w, const NetLayout& L,
                          const ForwardCache& cache, const Eigen::VectorXd& dout,
                          std::vector<double>& grad) {
  const NetworkSpec& spec = w.spec;
  double* gFW = grad.data() + L.fc_w_off;
  double* gFB = grad.data() + L.fc_b_off;
  const double* FW = w.params.data() + L.fc_w_off;
  const auto& flat = cache.pool[4];
  std::vector<double> dpool(flat.size(), 0.0);
  for (int o = 0; o < spec.output_dim; ++o) {
    double g = dout[o];
    gFB[o] += g;
    double* grow = gFW + std::size_t(o) * L.fc_in;
    const double* row = FW + std::size_t(o) * L.fc_in;
    for (int i = 0; i < L.fc_in; ++i) {
      grow[i] += g * flat[i];
      dpool[i] += g * row[i];
    }
  }

  for (int l = 4; l >= 0; --l) {
    const LayerShape& s = L.layers[l];
    int ch = s.conv_h, cw = s.conv_w;
    int cin = l == 0 ? 1 : spec.channels[l - 1];
    // pool backward: route to argmax, then ReLU mask
    std::vector<double> dconv(std::size_t(s.c) * ch * cw, 0.0);
    for (int c = 0; c < s.c; ++c) {
      const double* cm = cache.relu[l].data() + std::size_t(c) * ch * cw;
      double* dm = dconv.data() + std::size_t(c) * ch * cw;
      for (std::size_t i = 0; i < std::size_t(s.h) * s.w; ++i) {
        std::size_t o = std::size_t(c) * s.h * s.w + i;
        int a = cache.arg[l][o];
        if (cm[a] > 0.0) dm[a] += dpool[o];
      }
    }
    const std::vector<double>& input = l == 0 ? d.values : cache.pool[l - 1];
    double* gW = grad.data() + L.conv_w_off[l];
    double* gB = grad.data() + L.conv_b_off[l];
    const double* W = w.params.data() + L.conv_w_off[l];
    std::vector<double> dinput;
    if (l > 0) dinput.assign(input.size(), 0.0);
    for (int co = 0; co < s.c; ++co) {
      const double* dm = dconv.data() + std::size_t(co) * ch * cw;
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) gB[co] += dm[y * cw + x];
      for (int ci = 0; ci < cin; ++ci) {
        const double* inp = input.data() + std::size_t(ci) * ch * cw;
        double* gk = gW + (std::size_t(co) * cin + ci) * 9;
        const double* k = W + (std::size_t(co) * cin + ci) * 9;
        double* dip = l > 0 ? dinput.data() + std::size_t(ci) * ch * cw : nullptr;
        for (int y = 0; y < ch; ++y)
          for (int dy = 0; dy < 3; ++dy) {
            int yy = y + dy - 1;
            if (yy < 0 || yy >= ch) continue;
            const double* irow = inp + yy * cw;
            const double* drow = dm + y * cw;
            double* dirow = dip ? dip + yy * cw : nullptr;
            for (int dx = 0; dx < 3; ++dx) {
              int off = dx - 1;
              int x0 = std::max(0, -off), x1 = std::min(cw, cw - off);
              double kv = k[dy * 3 + dx];
              double acc = 0.0;
              for (int x = x0; x < x1; ++x) {
                acc += drow[x] * irow[x + off];
                if (dirow) dirow[x + off] += drow[x] * kv;
              }
              gk[dy * 3 + dx] += acc;
            }
          }
      }
    }
    if (l > 0) dpool = std::move(dinput);
  }
}

}  // namespace detail

inline Eigen::VectorXd forward(const DepthImage& d, const NetworkWeights& w) {
  auto layout = detail::NetLayout::make(w.spec);
  detail::ForwardCache cache;
  detail::forward_impl(d, w, layout, cache);
  return cache.out;
}

struct TrainSample {
  const DepthImage* depth = nullptr;
  Eigen::VectorXd label;
};

// mean over the batch of the squared Euclidean error over all components
inline double loss(const std::vector<TrainSample>& batch, const NetworkWeights& w) {
  if (batch.empty()) throw std::invalid_argument("loss: empty batch");
  auto layout = detail::NetLayout::make(w.spec);
  detail::ForwardCache cache;
  double acc = 0.0;
  for (const auto& s : batch) {
    detail::forward_impl(*s.depth, w, layout, cache);
    acc += (cache.out - s.label).squaredNorm();
  }
  return acc / double(batch.size());
}

inline std::vector<double> gradients(const std::vector<TrainSample>& batch,
                                     const NetworkWeights& w, double* loss_out = nullptr) {
  if (batch.empty()) throw std::invalid_argument("gradients: empty batch");
  auto layout = detail::NetLayout::make(w.spec);
  detail::ForwardCache cache;
  std::vector<double> grad(w.params.size(), 0.0);
  double acc = 0.0;
  for (const auto& s : batch) {
    detail::forward_impl(*s.depth, w, layout, cache);
    Eigen::VectorXd diff = cache.out - s.label;
    acc += diff.squaredNorm();
    Eigen::VectorXd dout = (2.0 / double(batch.size())) * diff;
    detail::backward_impl(*s.depth, w, layout, cache, dout, grad);
  }
  if (loss_out) *loss_out = acc / double(batch.size());
  return grad;
}

struct TrainConfig {
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int batch_size = 64;
  int epochs = 20;
  std::uint64_t seed = 1;
  double validation_fraction = 0.1;
};

struct AdamState {
  std::vector<double> m, v;
  long t = 0;

  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(NetworkWeights& w, const std::vector<double>& grad, AdamState& state,
                      const TrainConfig& cfg) {
  if (grad.size() != w.params.size() || state.m.size() != w.params.size())
    throw std::invalid_argument("adam_step: shape mismatch");
  for (double g : grad)
    if (!std::isfinite(g))
      throw std::runtime_error("adam_step: non-finite gradient at step " +
                               std::to_string(state.t + 1));
  ++state.t;
  double bc1 = 1.0 - std::pow(cfg.adam_beta1, double(state.t));
  double bc2 = 1.0 - std::pow(cfg.adam_beta2, double(state.t));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * grad[i];
    state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
    double mhat = state.m[i] / bc1;
    double vhat = state.v[i] / bc2;
    w.params[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_epsilon);
  }
}

using EpochCallback = std::function<void(int epoch, double train_loss, double val_loss)>;

// Mini-batch ADAM from the given initial weights. Returns the weights with
// the lowest validation loss seen. Deterministic for a fixed config seed.
inline NetworkWeights train(const std::vector<TrainSample>& samples, NetworkWeights weights,
                            const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  if (samples.empty()) throw std::invalid_argument("train: empty dataset");
  if (!(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0))
    throw std::invalid_argument("train: validation_fraction must be in (0, 1)");

  std::vector<int> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(Rng::derive(cfg.seed, 0x5A17));
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[split_rng.index(i)]);
  std::size_t n_val = std::max<std::size_t>(1, std::size_t(samples.size() * cfg.validation_fraction));
  if (n_val >= samples.size()) n_val = samples.size() - 1;
  std::vector<TrainSample> val, tr;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_val ? val : tr).push_back(samples[order[i]]);
  if (tr.empty()) tr = val;
  if (val.empty()) val = tr;  // single-sample datasets

  AdamState state(weights.params.size());
  NetworkWeights best = weights;
  double best_val = std::numeric_limits<double>::infinity();
  Rng shuffle_rng(Rng::derive(cfg.seed, 0xBA7C4));
  std::vector<int> idx(tr.size());
  std::iota(idx.begin(), idx.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[shuffle_rng.index(i)]);
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
      std::vector<TrainSample> batch;
      for (std::size_t i = start; i < std::min(idx.size(), start + cfg.batch_size); ++i)
        batch.push_back(tr[idx[i]]);
      double bl = 0.0;
      auto grad = gradients(batch, weights, &bl);
      adam_step(weights, grad, state, cfg);
      epoch_loss += bl;
      ++n_batches;
    }
    epoch_loss /= double(n_batches);
    if (!std::isfinite(epoch_loss))
      throw std::runtime_error("train: loss diverged at epoch " + std::to_string(epoch));
    double val_loss = loss(val, weights);
    if (val_loss < best_val) {
      best_val = val_loss;
      best = weights;
    }
    if (on_epoch) on_epoch(epoch, epoch_loss, val_loss);
  }
  return best;
}

// ---- weights file (versioned, little-endian) ----

namespace detail {
inline constexpr char kWeightsMagic[4] = {'K', 'M', 'W', 'T'};
inline constexpr std::uint32_t kWeightsVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
void read_pod(std::istream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
}
}  // namespace detail

inline void save_weights(const NetworkWeights& w, const std::string& path,
                         const std::string& metadata = "") {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write weights file " + path);
  out.write(detail::kWeightsMagic, 4);
  detail::write_pod(out, detail::kWeightsVersion);
  detail::write_pod(out, std::int32_t(w.spec.input_width));
  detail::write_pod(out, std::int32_t(w.spec.input_height));
  for (int c : w.spec.channels) detail::write_pod(out, std::int32_t(c));
  detail::write_pod(out, std::int32_t(w.spec.output_dim));
  detail::write_pod(out, w.init_seed);
  detail::write_pod(out, std::uint32_t(metadata.size()));
  out.write(metadata.data(), metadata.size());
  detail::write_pod(out, std::uint64_t(w.params.size()));
  out.write(reinterpret_cast<const char*>(w.params.data()), w.params.size() * sizeof(double));
}

inline NetworkWeights load_weights(const std::string& path, std::string* metadata = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open weights file " + path);
  char magic[4];
  in.read(magic, 4);
  std::uint32_t version = 0;
  detail::read_pod(in, version);
  if (std::memcmp(magic, detail::kWeightsMagic, 4) != 0 || version != detail::kWeightsVersion)
    throw std::runtime_error("not a weights file (or unsupported version): " + path);
  NetworkWeights w;
  std::int32_t iw, ih, od;
  detail::read_pod(in, iw);
  detail::read_pod(in, ih);
  for (int l = 0; l < 5; ++l) {
    std::int32_t c;
    detail::read_pod(in, c);
    w.spec.channels[l] = c;
  }
  detail::read_pod(in, od);
  w.spec.input_width = iw;
  w.spec.input_height = ih;
  w.spec.output_dim = od;
  detail::read_pod(in, w.init_seed);
  std::uint32_t meta_len = 0;
  detail::read_pod(in, meta_len);
  std::string meta(meta_len, '\0');
  in.read(meta.data(), meta_len);
  if (metadata) *metadata = meta;
  std::uint64_t n = 0;
  detail::read_pod(in, n);
  w.params.assign(n, 0.0);
  in.read(reinterpret_cast<char*>(w.params.data()), n * sizeof(double));
  if (!in) throw std::runtime_error("truncated weights file " + path);
  return w;
}

}  // namespace kmorph
