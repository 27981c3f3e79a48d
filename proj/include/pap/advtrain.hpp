#pragma once

// Adversarial training with generated patches: patches made once against the
// pretrained model and mixed with clean data (OAT), or regenerated inside the
// training loop against the current model (IAT).

#include <chrono>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pap/attack.hpp"
#include "pap/models.hpp"
#include "pap/tensor.hpp"

namespace pap {

// 1 on [0, E/4], linear 1 -> 0.5 on [E/4, E/2], 0.5 afterwards.
inline double lambda_schedule(double e, double E) {
  if (!(E > 0)) throw std::invalid_argument("lambda_schedule: E must be positive");
  if (!(e >= 0 && e <= E)) throw std::out_of_range("lambda_schedule: epoch outside [0, E]");
  const double a = 0.25 * E, b = 0.5 * E;
  if (e <= a) return 1.0;
  if (e >= b) return 0.5;
  return 1.0 - 0.5 * (e - a) / (b - a);
}

enum class AdvVariant { oat, iat };

inline std::string to_string(AdvVariant v) { return v == AdvVariant::oat ? "OAT" : "IAT"; }

inline AdvVariant adv_variant_from_string(const std::string& s) {
  if (s == "OAT" || s == "oat") return AdvVariant::oat;
  if (s == "IAT" || s == "iat") return AdvVariant::iat;
  throw std::invalid_argument("unknown adversarial training variant: " + s);
}

struct AdvTrainConfig {
  AdvVariant variant = AdvVariant::oat;
  std::size_t mix_adv = 1;    // copies of each patched scene
  std::size_t mix_clean = 1;  // copies of each clean scene
  TrainConfig train{.epochs = 8};
  AttackConfig attack;        // OAT per-scene generation
  AttackConfig inner{.T = 5}; // IAT per-epoch regeneration

  void validate() const {
    if (mix_adv + mix_clean == 0) throw std::invalid_argument("mix ratio must not be 0:0");
    if (train.epochs < 4) throw std::invalid_argument("adversarial training needs at least 4 epochs");
    train.validate();
    attack.validate();
    inner.validate();
  }

  nlohmann::json to_json() const {
    return {{"variant", to_string(variant)}, {"mix_ratio", {mix_adv, mix_clean}}, {"train", train.to_json()},
            {"attack", attack.to_json()}, {"inner_attack", inner.to_json()}};
  }
};

struct AdvTrainResult {
  TrainResult train;
  double generation_seconds = 0;
  double seconds = 0;  // generation plus training
};

inline std::mt19937_64 scene_stream(std::uint64_t seed, std::size_t a, std::size_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

// One independent patch per scene, optimised at one fixed placement on that
// scene only, returned as the patched image.
template <class T>
Tensor<T> per_scene_adversarial(const Model<T>& model, const Sample<T>& sc, const AttackConfig& base,
                                std::uint64_t seed, std::optional<Tensor<T>> init = std::nullopt) {
  auto rng = scene_stream(seed, 0, 0);
  const std::size_t H = sc.image.dim(2), W = sc.image.dim(3);
  const auto M = make_mask(base.shape, base.patch_size, H, W, base.position, rng);
  AttackConfig cfg = base;
  cfg.seed = seed;
  cfg.position = std::make_pair(M.row, M.col);
  cfg.random_rotation = false;
  const auto patch = pap_generate(model, std::vector<Sample<T>>{sc}, cfg, nullptr, std::move(init));
  return apply_patch(sc.image, patch.delta, M).detach();
}

// Clean and adversarial images interleaved at mix_adv:mix_clean; patched
// copies keep the clean ground truth.
template <class T>
std::vector<Sample<T>> oat_mix(const std::vector<Sample<T>>& scenes, const std::vector<Tensor<T>>& adv,
                               std::size_t mix_adv = 1, std::size_t mix_clean = 1) {
  if (adv.size() != scenes.size()) throw std::invalid_argument("oat_mix: one adversarial image per scene");
  std::vector<Sample<T>> mixed;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (adv[i].shape() != scenes[i].image.shape()) throw ShapeError("oat_mix: adversarial image shape mismatch");
    for (std::size_t k = 0; k < mix_clean; ++k) mixed.push_back(scenes[i]);
    for (std::size_t k = 0; k < mix_adv; ++k) mixed.push_back({adv[i], scenes[i].target});
  }
  return mixed;
}

// Patched copies of every scene generated against `model` (the pretrained
// one); scene i uses seed cfg.attack.seed + i.
template <class T>
std::vector<Sample<T>> oat_augmented_set(const Model<T>& model, const std::vector<Sample<T>>& scenes,
                                         const AdvTrainConfig& cfg) {
  std::vector<Tensor<T>> adv;
  for (std::size_t i = 0; i < scenes.size(); ++i)
    adv.push_back(per_scene_adversarial(model, scenes[i], cfg.attack, cfg.attack.seed + i));
  return oat_mix(scenes, adv, cfg.mix_adv, cfg.mix_clean);
}

// Fine-tunes the pretrained model on the fixed mixed set.
template <class T>
Model<T> oat_train(const Model<T>& pretrained, const std::vector<Sample<T>>& scenes, const AdvTrainConfig& cfg,
                   AdvTrainResult* out = nullptr) {
  cfg.validate();
  if (scenes.empty()) throw std::invalid_argument("oat_train: empty training set");
  const auto t0 = std::chrono::steady_clock::now();
  const auto augmented = oat_augmented_set(pretrained, scenes, cfg);
  const double gen = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Model<T> model = pretrained.frozen();
  auto tr = train(model, augmented, cfg.train);
  if (out != nullptr) *out = {tr, gen, gen + tr.seconds};
  return model;
}

// Each epoch regenerates a white-box patch per scene against the current
// weights (warm-started from that scene's previous patch, fresh placement)
// and trains on lambda * L_clean + (1 - lambda) * L_adv.
template <class T>
Model<T> iat_train(const Model<T>& start, const std::vector<Sample<T>>& scenes, const AdvTrainConfig& cfg,
                   AdvTrainResult* out = nullptr) {
  cfg.validate();
  if (scenes.empty()) throw std::invalid_argument("iat_train: empty training set");
  for (const auto& s : scenes) check_target_resolution(start, s);
  Model<T> model = start.frozen();
  std::vector<Tensor<T>> targets;
  for (const auto& s : scenes) targets.push_back(s.target.template to_tensor<T>());
  std::vector<std::optional<Tensor<T>>> last(scenes.size());
  double gen = 0;
  const double E = static_cast<double>(cfg.train.epochs);
  auto tr = train_with(model, scenes.size(), cfg.train, [&](std::size_t i, std::size_t epoch, std::size_t batch) {
    const auto g0 = std::chrono::steady_clock::now();
    AttackConfig inner = cfg.inner;
    inner.epochs = 1;
    auto rng = scene_stream(cfg.inner.seed, epoch + 1, i);
    const auto M = make_mask(inner.shape, inner.patch_size, scenes[i].image.dim(2), scenes[i].image.dim(3),
                             inner.position, rng);
    inner.position = std::make_pair(M.row, M.col);
    inner.seed = cfg.inner.seed + 1000003 * (epoch + 1) + i;
    const auto snapshot = model.frozen();
    const auto patch = pap_generate(snapshot, std::vector<Sample<T>>{scenes[i]}, inner, nullptr, last[i]);
    last[i] = patch.delta;
    const auto x_adv = apply_patch(scenes[i].image, patch.delta, M).detach();
    gen += std::chrono::duration<double>(std::chrono::steady_clock::now() - g0).count();

    const T lam = static_cast<T>(lambda_schedule(static_cast<double>(epoch), E));
    auto clean = map_loss(model.forward(scenes[i].image), targets[i], batch);
    auto adv = map_loss(model.forward(x_adv), targets[i], batch);
    return add(scale(clean, lam), scale(adv, T(1) - lam));
  });
  if (out != nullptr) *out = {tr, gen, tr.seconds};
  return model;
}

template <class T>
Model<T> adv_train(const Model<T>& pretrained, const std::vector<Sample<T>>& scenes, const AdvTrainConfig& cfg,
                   AdvTrainResult* out = nullptr) {
  return cfg.variant == AdvVariant::oat ? oat_train(pretrained, scenes, cfg, out)
                                        : iat_train(pretrained, scenes, cfg, out);
}

}  // namespace pap
