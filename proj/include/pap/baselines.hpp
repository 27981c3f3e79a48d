#pragma once

// Transfer-attack baselines for patches (momentum, Nesterov and
// translation-invariant iterative sign methods, ensemble average count) and
// full-image PGD under an L-infinity budget.

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pap/attack.hpp"
#include "pap/models.hpp"
#include "pap/tensor.hpp"

namespace pap {

template <class T>
struct MomentumState {
  std::vector<T> g;
  double mu = 1.0;

  MomentumState() = default;
  MomentumState(std::size_t n, double decay) : g(n, T(0)), mu(decay) {
    if (!(decay >= 0)) throw std::invalid_argument("momentum decay must be >= 0");
  }
  void reset() { std::fill(g.begin(), g.end(), T(0)); }
};

template <class T>
T sign_of(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

// g <- mu * g + grad / ||grad||_1 (zero contribution when the norm is 0).
template <class T>
void accumulate_momentum(MomentumState<T>& state, std::span<const T> grad) {
  if (state.g.size() != grad.size()) throw ShapeError("momentum state does not match gradient size");
  T l1 = T(0);
  for (T v : grad) l1 += std::abs(v);
  const T mu = static_cast<T>(state.mu);
  for (std::size_t i = 0; i < grad.size(); ++i) state.g[i] = mu * state.g[i] + (l1 > T(0) ? grad[i] / l1 : T(0));
}

template <class T>
void sign_step(Tensor<T>& delta, const MomentumState<T>& state, T alpha, Direction dir) {
  const T s = dir == Direction::increase ? T(1) : T(-1);
  auto d = delta.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::clamp(d[i] + s * alpha * sign_of(state.g[i]), T(0), T(1));
}

// One momentum iterative step: accumulate, then delta <- clip(delta + alpha sign(g)).
template <class T>
void migm_step(Tensor<T>& delta, std::span<const T> grad, MomentumState<T>& state, T alpha,
               Direction dir = Direction::increase) {
  accumulate_momentum(state, grad);
  sign_step(delta, state, alpha, dir);
}

// Lookahead point delta + alpha * mu * g used by the Nesterov variant.
template <class T>
Tensor<T> nesterov_lookahead(const Tensor<T>& delta, const MomentumState<T>& state, T alpha,
                             Direction dir = Direction::increase) {
  const T s = dir == Direction::increase ? T(1) : T(-1);
  Tensor<T> ahead = delta.detach();
  auto a = ahead.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * alpha * static_cast<T>(state.mu) * state.g[i];
  return ahead;
}

// Nesterov step: the gradient comes from grad_at(lookahead). An optional
// smoothing hook runs on that gradient before accumulation (TI variant).
template <class T>
void nigm_step(Tensor<T>& delta, MomentumState<T>& state, T alpha,
               const std::function<std::vector<T>(const Tensor<T>&)>& grad_at, Direction dir = Direction::increase,
               const std::function<std::vector<T>(std::vector<T>)>& smooth = {}) {
  auto g = grad_at(nesterov_lookahead(delta, state, alpha, dir));
  if (smooth) g = smooth(std::move(g));
  accumulate_momentum(state, std::span<const T>(g));
  sign_step(delta, state, alpha, dir);
}

// Normalised 2-D Gaussian, size x size.
inline std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
  if (size % 2 == 0) throw std::invalid_argument("translation-invariant kernel size must be odd");
  if (!(sigma > 0)) throw std::invalid_argument("kernel sigma must be positive");
  std::vector<double> k(size * size);
  const double c = static_cast<double>(size / 2);
  double z = 0;
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double dy = static_cast<double>(i) - c, dx = static_cast<double>(j) - c;
      z += k[i * size + j] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
    }
  for (auto& v : k) v /= z;
  return k;
}

// Convolves each channel of a [C,P,P]-shaped gradient with the Gaussian
// (zero padding, same size).
template <class T>
std::vector<T> ti_smooth(std::span<const T> grad, std::size_t channels, std::size_t height, std::size_t width,
                         std::size_t kernel_size = 15, double sigma = 3.0) {
  if (grad.size() != channels * height * width) throw ShapeError("ti_smooth: gradient size mismatch");
  const auto k = gaussian_kernel(kernel_size, sigma);
  const long r = static_cast<long>(kernel_size / 2);
  std::vector<T> out(grad.size(), T(0));
  for (std::size_t c = 0; c < channels; ++c)
    for (long i = 0; i < static_cast<long>(height); ++i)
      for (long j = 0; j < static_cast<long>(width); ++j) {
        double acc = 0;
        for (long di = -r; di <= r; ++di) {
          const long si = i + di;
          if (si < 0 || si >= static_cast<long>(height)) continue;
          for (long dj = -r; dj <= r; ++dj) {
            const long sj = j + dj;
            if (sj < 0 || sj >= static_cast<long>(width)) continue;
            acc += k[static_cast<std::size_t>((di + r) * static_cast<long>(kernel_size) + (dj + r))] *
                   static_cast<double>(grad[(c * height + static_cast<std::size_t>(si)) * width + static_cast<std::size_t>(sj)]);
          }
        }
        out[(c * height + static_cast<std::size_t>(i)) * width + static_cast<std::size_t>(j)] = static_cast<T>(acc);
      }
  return out;
}

// Mean predicted count over an ensemble; differentiable under the active tape.
template <class T>
Tensor<T> avg_dens_loss(const std::vector<const Model<T>*>& models, const Tensor<T>& x_adv) {
  if (models.empty()) throw std::invalid_argument("avg_dens_loss: no models");
  Tensor<T> total;
  for (std::size_t i = 0; i < models.size(); ++i) {
    auto c = reduce_sum(models[i]->forward(x_adv));
    total = i == 0 ? c : add(total, c);
  }
  return scale(total, T(1) / static_cast<T>(models.size()));
}

// Full-image PGD: sign ascent on the half squared map error, projected to
// the eps-ball around x and to [0,1] after every iteration.
template <class T>
Tensor<T> pgd_linf(const Model<T>& model, const Tensor<T>& x, const Tensor<T>& target, T eps = T(8.0 / 255.0),
                   T alpha = T(0.002), std::size_t iters = 20,
                   const std::function<void(std::size_t, const Tensor<T>&)>& on_iter = {}) {
  if (!(eps >= 0) || !(alpha > 0)) throw std::invalid_argument("pgd_linf: eps must be >= 0 and alpha > 0");
  const auto frozen = model.frozen();
  Tensor<T> adv = x.detach();
  auto xs = x.data();
  for (std::size_t it = 0; it < iters; ++it) {
    adv.set_requires_grad(true);
    {
      TapeScope<T> scope;
      backward(map_loss(frozen.forward(adv), target, 1));
    }
    auto a = adv.data();
    auto g = adv.grad();
    for (std::size_t i = 0; i < a.size(); ++i) {
      const T v = a[i] + alpha * sign_of(g[i]);
      a[i] = std::clamp(std::clamp(v, xs[i] - eps, xs[i] + eps), T(0), T(1));
    }
    adv.zero_grad();
    if (on_iter) on_iter(it, adv);
  }
  adv = adv.detach();
  return adv;
}

// ---------------------------------------------------------------------------
// Patch generation with a baseline step rule.

enum class Baseline { migm, nigm, ti_nigm, avg_dens };

inline std::string to_string(Baseline b) {
  switch (b) {
    case Baseline::migm: return "MIGM";
    case Baseline::nigm: return "NIGM";
    case Baseline::ti_nigm: return "TI-NIGM";
    case Baseline::avg_dens: return "Avg-Dens";
  }
  return "MIGM";
}

inline Baseline baseline_from_string(const std::string& s) {
  if (s == "MIGM" || s == "migm") return Baseline::migm;
  if (s == "NIGM" || s == "nigm") return Baseline::nigm;
  if (s == "TI-NIGM" || s == "ti-nigm" || s == "ti_nigm") return Baseline::ti_nigm;
  if (s == "Avg-Dens" || s == "avg-dens" || s == "avg_dens") return Baseline::avg_dens;
  throw std::invalid_argument("unknown baseline: " + s);
}

struct BaselineConfig {
  Baseline method = Baseline::migm;
  double mu = 1.0;
  std::size_t ti_kernel = 15;
  double ti_sigma = 3.0;
  // Optimise the perceptual objective instead of the plain count sum.
  bool pap_losses = false;

  nlohmann::json to_json() const {
    return {{"baseline", to_string(method)}, {"mu", mu}, {"ti_kernel", ti_kernel}, {"ti_sigma", ti_sigma},
            {"pap_losses", pap_losses}};
  }
};

// Gradient of the baseline loss w.r.t. the patch at delta_values, with the
// patch composed at M into x. Loss is the mean predicted count over models
// (a single model gives its count) or, with pap_losses, the first model's
// perceptual objective.
template <class T>
std::vector<T> baseline_gradient(const std::vector<const Model<T>*>& models, const Sample<T>& sc, const Mask& M,
                                 const Tensor<T>& delta_values, const AttackConfig& acfg, bool pap_losses) {
  TapeScope<T> scope;
  Tensor<T> d = delta_values.detach();
  d.set_requires_grad(true);
  auto x_adv = apply_patch(sc.image, d, M);
  Tensor<T> loss;
  if (pap_losses) {
    loss = pap_objective(*models.front(), x_adv, sc.target.template to_tensor<T>(), M, acfg).total;
  } else {
    loss = avg_dens_loss(models, x_adv);
  }
  backward(loss);
  return std::vector<T>(d.grad().begin(), d.grad().end());
}

// Same outer loop as pap_generate (seeded scene order, random placement,
// T inner steps); momentum restarts at each placement.
template <class T>
Patch<T> baseline_generate(const std::vector<const Model<T>*>& sources, const std::vector<Sample<T>>& scenes,
                           const AttackConfig& acfg, const BaselineConfig& bcfg) {
  acfg.validate();
  if (sources.empty()) throw std::invalid_argument("baseline_generate: no source models");
  if (scenes.empty()) throw std::invalid_argument("baseline_generate: empty scene set");
  std::vector<Model<T>> frozen;
  for (const auto* m : sources) frozen.push_back(m->frozen());
  std::vector<const Model<T>*> models;
  for (const auto& m : frozen) models.push_back(&m);
  const std::size_t C = scenes[0].image.dim(1), H = scenes[0].image.dim(2), W = scenes[0].image.dim(3);
  const std::size_t P = acfg.patch_size;
  std::mt19937_64 rng(acfg.seed);
  Patch<T> patch{Tensor<T>::uniform({C, P, P}, T(0), T(1), rng), acfg.shape};
  const T alpha = static_cast<T>(acfg.alpha);
  MomentumState<T> state(patch.delta.size(), bcfg.mu);

  std::vector<std::size_t> order(scenes.size());
  for (std::size_t epoch = 0; epoch < acfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t si : order) {
      const auto& sc = scenes[si];
      const auto M = make_mask(acfg.shape, P, H, W, acfg.position, rng, acfg.random_rotation);
      state.reset();
      auto grad_at = [&](const Tensor<T>& at) {
        return baseline_gradient(models, sc, M, at, acfg, bcfg.pap_losses);
      };
      for (std::size_t t = 0; t < acfg.T; ++t) {
        switch (bcfg.method) {
          case Baseline::migm: {
            const auto g = grad_at(patch.delta);
            migm_step(patch.delta, std::span<const T>(g), state, alpha, acfg.direction);
            break;
          }
          case Baseline::nigm:
            nigm_step<T>(patch.delta, state, alpha, grad_at, acfg.direction);
            break;
          case Baseline::ti_nigm:
            nigm_step<T>(patch.delta, state, alpha, grad_at, acfg.direction, [&](std::vector<T> g) {
              return ti_smooth(std::span<const T>(g), C, P, P, bcfg.ti_kernel, bcfg.ti_sigma);
            });
            break;
          case Baseline::avg_dens: {
            // Loss swap only; the step is the same raw-gradient update as PAP.
            const auto g = grad_at(patch.delta);
            const T s = acfg.direction == Direction::increase ? T(1) : T(-1);
            auto d = patch.delta.data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::clamp(d[i] + s * alpha * g[i], T(0), T(1));
            break;
          }
        }
      }
    }
  }
  return patch;
}

}  // namespace pap
