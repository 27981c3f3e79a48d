#pragma once

// Two toy density-map estimators: a three-branch multi-column network
// (stride 4) and a single-column network ending in dilated convolutions
// (stride 8), plus a seeded SGD trainer for the half mean squared map error.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pap/density.hpp"
#include "pap/io.hpp"
#include "pap/tensor.hpp"

namespace pap {

enum class Family { multi_column, single_column };

inline std::string to_string(Family f) { return f == Family::multi_column ? "multi_column" : "single_column"; }

inline Family family_from_string(const std::string& s) {
  if (s == "multi_column" || s == "multi") return Family::multi_column;
  if (s == "single_column" || s == "single") return Family::single_column;
  throw std::invalid_argument("unknown model family: " + s);
}

struct ModelSpec {
  Family family = Family::multi_column;
  std::size_t in_channels = 1;
  // multi_column: 3 widths per branch (9); single_column: 4 plain + 3 dilated (7).
  std::vector<std::size_t> widths;
  std::size_t output_stride = 4;
  std::uint64_t seed = 0;
  // Weights start uniform in +-sqrt(init_gain / fan_in).
  double init_gain = 6.0;

  static ModelSpec multi_column(std::uint64_t seed = 0, std::size_t in_channels = 1) {
    return {Family::multi_column, in_channels, {8, 16, 8, 10, 20, 10, 12, 24, 12}, 4, seed, 1.0};
  }
  static ModelSpec single_column(std::uint64_t seed = 0, std::size_t in_channels = 1) {
    return {Family::single_column, in_channels, {16, 32, 32, 48, 32, 32, 16}, 8, seed, 6.0};
  }

  nlohmann::json to_json() const {
    return {{"family", to_string(family)}, {"in_channels", in_channels}, {"widths", widths},
            {"output_stride", output_stride}, {"seed", seed}, {"init_gain", init_gain}};
  }
  static ModelSpec from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.family = family_from_string(j.at("family").get<std::string>());
    s.in_channels = j.value("in_channels", std::size_t{1});
    s.widths = j.at("widths").get<std::vector<std::size_t>>();
    s.output_stride = j.at("output_stride").get<std::size_t>();
    s.seed = j.value("seed", std::uint64_t{0});
    s.init_gain = j.value("init_gain", 6.0);
    return s;
  }
};

struct ConvLayer {
  std::string name;
  std::size_t in = 0, out = 0, kernel = 3, dilation = 1;
};

// Layer table for a spec. Branch kernel sizes follow the classic
// {9,7,5} / {7,5,3} / {5,3,3} multi-column layout.
inline std::vector<ConvLayer> layer_table(const ModelSpec& s) {
  std::vector<ConvLayer> L;
  if (s.family == Family::multi_column) {
    if (s.widths.size() != 9) throw std::invalid_argument("multi_column spec needs 9 widths");
    if (s.output_stride != 4) throw std::invalid_argument("multi_column output_stride must be 4");
    const std::size_t ks[3][3] = {{9, 7, 5}, {7, 5, 3}, {5, 3, 3}};
    const char* br[3] = {"a", "b", "c"};
    std::size_t fused = 0;
    for (int b = 0; b < 3; ++b) {
      std::size_t in = s.in_channels;
      for (int l = 0; l < 3; ++l) {
        const std::size_t out = s.widths[static_cast<std::size_t>(3 * b + l)];
        L.push_back({std::string(br[b]) + std::to_string(l + 1), in, out, ks[b][l], 1});
        in = out;
      }
      fused += in;
    }
    L.push_back({"head", fused, 1, 1, 1});
  } else {
    if (s.widths.size() != 7) throw std::invalid_argument("single_column spec needs 7 widths");
    if (s.output_stride != 8) throw std::invalid_argument("single_column output_stride must be 8");
    std::size_t in = s.in_channels;
    for (int l = 0; l < 7; ++l) {
      const bool dilated = l >= 4;
      const std::string name = dilated ? "d" + std::to_string(l - 3) : "c" + std::to_string(l + 1);
      L.push_back({name, in, s.widths[static_cast<std::size_t>(l)], 3, dilated ? 2u : 1u});
      in = s.widths[static_cast<std::size_t>(l)];
    }
    L.push_back({"head", in, 1, 1, 1});
  }
  return L;
}

// Activations captured during a forward pass, keyed by layer name. The
// activation feeding the density head is also stored as "features".
template <class T>
using Taps = std::map<std::string, Tensor<T>>;

inline constexpr const char* kDefaultAttentionLayer = "features";

template <class T>
class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)), layers_(layer_table(spec_)) {
    std::mt19937_64 rng(spec_.seed);
    for (const auto& l : layers_) {
      const double fan_in = static_cast<double>(l.in * l.kernel * l.kernel);
      const T bound = static_cast<T>(std::sqrt(spec_.init_gain / fan_in));
      params_.emplace_back(l.name + ".w", Tensor<T>::uniform({l.out, l.in, l.kernel, l.kernel}, -bound, bound, rng));
      // The density head's bias starts non-negative so its ReLU is live at init.
      const T lo = l.name == "head" ? T(0) : -bound;
      params_.emplace_back(l.name + ".b", Tensor<T>::uniform({l.out}, lo, bound, rng));
    }
    for (auto& [n, p] : params_) p.set_requires_grad(true);
  }

  const ModelSpec& spec() const { return spec_; }
  std::size_t output_stride() const { return spec_.output_stride; }
  NamedTensors<T>& parameters() { return params_; }
  const NamedTensors<T>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += p.size();
    return n;
  }

  void set_requires_grad(bool on) {
    for (auto& [n, p] : params_) p.set_requires_grad(on);
  }

  void zero_head() {
    for (auto& [n, p] : params_)
      if (n.rfind("head.", 0) == 0) std::fill(p.data().begin(), p.data().end(), T(0));
  }

  std::vector<std::string> layer_names() const {
    std::vector<std::string> names;
    for (const auto& l : layers_) names.push_back(l.name);
    names.emplace_back(kDefaultAttentionLayer);
    return names;
  }

  Tensor<T> forward(const Tensor<T>& x, Taps<T>* taps = nullptr) const {
    if (x.rank() != 4 || x.dim(1) != spec_.in_channels)
      throw ShapeError("model input must be [N," + std::to_string(spec_.in_channels) + ",H,W], got " +
                       to_string(x.shape()));
    const std::size_t s = spec_.output_stride;
    if (x.dim(2) % s != 0 || x.dim(3) % s != 0)
      throw ShapeError("input " + to_string(x.shape()) + " not divisible by output stride " + std::to_string(s));

    std::size_t li = 0;
    auto conv = [&](const Tensor<T>& h) {
      const auto& l = layers_[li];
      auto y = conv2d(h, params_[2 * li].second, params_[2 * li + 1].second, l.dilation);
      ++li;
      return y;
    };
    auto tap = [&](const std::string& name, const Tensor<T>& t) {
      if (taps != nullptr) (*taps)[name] = t;
    };

    Tensor<T> features;
    if (spec_.family == Family::multi_column) {
      std::vector<Tensor<T>> branches;
      for (int b = 0; b < 3; ++b) {
        Tensor<T> h = x;
        for (int l = 0; l < 3; ++l) {
          const std::string name = layers_[li].name;
          h = relu(conv(h));
          tap(name, h);
          if (l < 2) h = maxpool2(h);
        }
        branches.push_back(h);
      }
      features = concat_channels(branches);
    } else {
      Tensor<T> h = x;
      for (int l = 0; l < 7; ++l) {
        const std::string name = layers_[li].name;
        h = relu(conv(h));
        tap(name, h);
        if (l < 3) h = maxpool2(h);
      }
      features = h;
    }
    tap(kDefaultAttentionLayer, features);
    auto out = relu(conv(features));
    tap("head", out);
    return out;
  }

  T count(const Tensor<T>& x) const {
    auto out = forward(x);
    T c = 0;
    for (T v : out.data()) c += v;
    return c;
  }

  // Deep copy whose parameters do not require gradients; safe to share
  // read-only across attack and evaluation workers.
  Model frozen() const {
    Model m = cast<T>();
    m.set_requires_grad(false);
    return m;
  }

  template <class U>
  Model<U> cast() const {
    Model<U> m(spec_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto src = params_[i].second.data();
      auto dst = m.parameters()[i].second.data();
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<U>(src[k]);
    }
    return m;
  }

  void load_parameters(const NamedTensors<T>& saved) {
    if (saved.size() != params_.size()) throw IoError("checkpoint has wrong parameter count");
    for (std::size_t i = 0; i < saved.size(); ++i) {
      if (saved[i].first != params_[i].first || saved[i].second.shape() != params_[i].second.shape())
        throw IoError("checkpoint parameter mismatch at " + saved[i].first);
      auto src = saved[i].second.data();
      std::copy(src.begin(), src.end(), params_[i].second.data().begin());
    }
  }

 private:
  ModelSpec spec_;
  std::vector<ConvLayer> layers_;
  NamedTensors<T> params_;
};

// Checkpoint: PAPW1 weights at path, spec JSON at path + ".json".
template <class T>
void save_model(const std::filesystem::path& path, const Model<T>& m, const nlohmann::json& extra = {}) {
  save_weights(path, m.parameters());
  nlohmann::json side = m.spec().to_json();
  for (auto it = extra.begin(); it != extra.end(); ++it) side[it.key()] = it.value();
  io::write_file(path.string() + ".json", side.dump(2) + "\n");
}

template <class T>
Model<T> load_model(const std::filesystem::path& path) {
  const auto side = nlohmann::json::parse(io::read_file(path.string() + ".json"));
  Model<T> m(ModelSpec::from_json(side));
  m.load_parameters(load_weights<T>(path));
  return m;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 100;
  double learning_rate = 1e-4;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  std::size_t batch_size = 1;

  void validate() const {
    if (!(learning_rate >= 0)) throw std::invalid_argument("learning_rate must be non-negative");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  }
  nlohmann::json to_json() const {
    return {{"epochs", epochs}, {"learning_rate", learning_rate}, {"momentum", momentum},
            {"seed", seed}, {"batch_size", batch_size}};
  }
};

// Half summed squared map error divided by batch size; differentiable.
template <class T>
Tensor<T> map_loss(const Tensor<T>& pred, const Tensor<T>& target, std::size_t batch) {
  auto diff = sub(pred, target);
  return scale(reduce_sum(mul(diff, diff)), T(0.5) / static_cast<T>(batch));
}

struct TrainResult {
  std::vector<double> epoch_loss;  // mean per-sample loss of each epoch
  double seconds = 0;
};

template <class T>
class Sgd {
 public:
  Sgd(NamedTensors<T>& params, double lr, double momentum) : params_(params), lr_(lr), mu_(momentum) {
    for (auto& [n, p] : params_) velocity_.emplace_back(p.size(), T(0));
  }
  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto v = std::span<T>(velocity_[i]);
      auto w = p.data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        v[k] = static_cast<T>(mu_) * v[k] + g[k];
        w[k] -= static_cast<T>(lr_) * v[k];
      }
      p.zero_grad();
    }
  }

 private:
  NamedTensors<T>& params_;
  double lr_, mu_;
  std::vector<std::vector<T>> velocity_;
};

template <class T>
void check_target_resolution(const Model<T>& model, const Sample<T>& s) {
  const std::size_t st = model.output_stride();
  if (s.target.height * st != s.image.dim(2) || s.target.width * st != s.image.dim(3))
    throw ShapeError("ground truth not at model output resolution");
}

// Per-sample loss callback lets adversarial training mix clean and
// adversarial terms; it must return the scalar loss under the active tape.
template <class T, class LossFn>
TrainResult train_with(Model<T>& model, std::size_t n_samples, const TrainConfig& cfg, LossFn&& loss_fn) {
  cfg.validate();
  if (n_samples == 0) throw std::invalid_argument("empty training set");
  const auto t0 = std::chrono::steady_clock::now();
  model.set_requires_grad(true);
  Sgd<T> opt(model.parameters(), cfg.learning_rate, cfg.momentum);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(n_samples);
  TrainResult res;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t b0 = 0; b0 < n_samples; b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(n_samples, b0 + cfg.batch_size);
      for (std::size_t i = b0; i < b1; ++i) {
        TapeScope<T> scope;
        auto loss = loss_fn(order[i], epoch, b1 - b0);
        const double lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv))
          throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", sample " +
                             std::to_string(order[i]));
        total += lv * static_cast<double>(b1 - b0);
        backward(loss);
      }
      if (cfg.learning_rate > 0) opt.step();
      else
        for (auto& [n, p] : model.parameters()) p.zero_grad();
    }
    res.epoch_loss.push_back(total / static_cast<double>(n_samples));
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

template <class T>
TrainResult train(Model<T>& model, const std::vector<Sample<T>>& data, const TrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("empty training set");
  for (const auto& s : data) check_target_resolution(model, s);
  std::vector<Tensor<T>> targets;
  for (const auto& s : data) targets.push_back(s.target.template to_tensor<T>());
  return train_with(model, data.size(), cfg, [&](std::size_t i, std::size_t, std::size_t batch) {
    return map_loss(model.forward(data[i].image), targets[i], batch);
  });
}

}  // namespace pap
