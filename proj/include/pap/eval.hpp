#pragma once

// Count metrics, overestimation curves, source x target transfer matrices
// and their CSV/JSON/PPM dumps.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "pap/attack.hpp"
#include "pap/io.hpp"
#include "pap/models.hpp"
#include "pap/tensor.hpp"

namespace pap {

struct SceneResult {
  double pred = 0;
  double gt = 0;
  double clean_pred = 0;
  friend bool operator==(const SceneResult&, const SceneResult&) = default;
};

struct Metrics {
  double mae = 0;
  double mse = 0;  // root mean squared count error
  std::size_t n = 0;
  std::vector<SceneResult> per_scene;
  friend bool operator==(const Metrics&, const Metrics&) = default;
};

// MAE = mean |pred - gt|, MSE = sqrt(mean (pred - gt)^2).
inline std::pair<double, double> mae_mse(std::span<const double> pred, std::span<const double> gt) {
  if (pred.empty() || pred.size() != gt.size()) throw std::invalid_argument("mae_mse needs equal-length non-empty inputs");
  double abs_sum = 0, sq_sum = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - gt[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  const double n = static_cast<double>(pred.size());
  return {abs_sum / n, std::sqrt(sq_sum / n)};
}

inline Metrics make_metrics(std::vector<SceneResult> per_scene) {
  std::vector<double> p, g;
  for (const auto& r : per_scene) {
    p.push_back(r.pred);
    g.push_back(r.gt);
  }
  const auto [mae, mse] = mae_mse(p, g);
  return {mae, mse, per_scene.size(), std::move(per_scene)};
}

// Fraction of scenes whose (adv - clean) prediction exceeds each gamma;
// for decrease attacks the difference is (clean - adv).
inline std::vector<std::pair<double, double>> overestimation_curve(const std::vector<SceneResult>& per_scene,
                                                                   const std::vector<double>& gammas,
                                                                   Direction dir = Direction::increase) {
  if (per_scene.empty()) throw std::invalid_argument("overestimation_curve: no scenes");
  std::vector<std::pair<double, double>> curve;
  for (double g : gammas) {
    std::size_t hit = 0;
    for (const auto& r : per_scene) {
      const double delta = dir == Direction::increase ? r.pred - r.clean_pred : r.clean_pred - r.pred;
      if (delta > g) ++hit;
    }
    curve.emplace_back(g, static_cast<double>(hit) / static_cast<double>(per_scene.size()));
  }
  return curve;
}

inline std::vector<double> default_gamma_grid(Direction dir) {
  std::vector<double> g;
  const double hi = dir == Direction::increase ? 500 : 200;
  const double step = dir == Direction::increase ? 10 : 5;
  for (double v = 0; v <= hi + 1e-9; v += step) g.push_back(v);
  return g;
}

// ---------------------------------------------------------------------------
// Evaluation

// Placement of a patch on test scene `index`, identical for every model
// and every patch of the same shape and size.
inline Mask eval_placement(std::uint64_t seed, std::size_t index, PatchShape shape, std::size_t P, std::size_t H,
                           std::size_t W) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  std::mt19937_64 rng(seq);
  return make_mask(shape, P, H, W, std::nullopt, rng);
}

template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < jobs; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += jobs) fn(i);
    });
  for (auto& t : pool) t.join();
}

// Counts with and without the patch on every scene. Ground-truth count is
// the integral of the scene's ground-truth density. patch == nullptr gives
// the clean row (pred == clean_pred).
template <class T>
Metrics evaluate(const Model<T>& model, const std::vector<Sample<T>>& scenes, const Patch<T>* patch,
                 std::uint64_t placement_seed, std::size_t jobs = 1) {
  if (scenes.empty()) throw std::invalid_argument("evaluate: no scenes");
  std::vector<SceneResult> res(scenes.size());
  parallel_for(scenes.size(), jobs, [&](std::size_t i) {
    const auto& sc = scenes[i];
    const double clean = static_cast<double>(model.count(sc.image));
    double pred = clean;
    if (patch != nullptr) {
      const auto M = eval_placement(placement_seed, i, patch->shape, patch->size(), sc.image.dim(2), sc.image.dim(3));
      pred = static_cast<double>(model.count(apply_patch(sc.image, patch->delta, M)));
    }
    res[i] = {pred, sc.target.sum(), clean};
  });
  return make_metrics(std::move(res));
}

// Same as evaluate but with a ready-made adversarial input per scene (full
// image attacks).
template <class T>
Metrics evaluate_inputs(const Model<T>& model, const std::vector<Sample<T>>& scenes,
                        const std::vector<Tensor<T>>& inputs, std::size_t jobs = 1) {
  if (scenes.empty() || inputs.size() != scenes.size())
    throw std::invalid_argument("evaluate_inputs: one input per scene required");
  std::vector<SceneResult> res(scenes.size());
  parallel_for(scenes.size(), jobs, [&](std::size_t i) {
    res[i] = {static_cast<double>(model.count(inputs[i])), scenes[i].target.sum(),
              static_cast<double>(model.count(scenes[i].image))};
  });
  return make_metrics(std::move(res));
}

struct TransferMatrix {
  std::vector<std::string> sources;  // patch names, one row each
  std::vector<std::string> targets;  // model names
  std::vector<Metrics> clean;        // per target
  std::vector<std::vector<Metrics>> cells;
  friend bool operator==(const TransferMatrix&, const TransferMatrix&) = default;
};

template <class T>
TransferMatrix run_transfer_eval(const std::vector<std::pair<std::string, const Model<T>*>>& models,
                                 const std::vector<std::pair<std::string, const Patch<T>*>>& patches,
                                 const std::vector<Sample<T>>& scenes, std::uint64_t placement_seed,
                                 std::size_t jobs = 1) {
  if (scenes.empty()) throw std::invalid_argument("run_transfer_eval: no scenes");
  const std::size_t H = scenes[0].image.dim(2), W = scenes[0].image.dim(3);
  for (const auto& [name, m] : models)
    if (H % m->output_stride() != 0 || W % m->output_stride() != 0)
      throw ShapeError("model " + name + " cannot take " + std::to_string(H) + "x" + std::to_string(W) + " scenes");
  for (const auto& [name, p] : patches)
    if (p->channels() != scenes[0].image.dim(1) || p->size() > H || p->size() > W)
      throw ShapeError("patch " + name + " does not fit the scenes");
  TransferMatrix tm;
  for (const auto& [name, p] : patches) tm.sources.push_back(name);
  for (const auto& [name, m] : models) {
    tm.targets.push_back(name);
    tm.clean.push_back(evaluate(*m, scenes, static_cast<const Patch<T>*>(nullptr), placement_seed, jobs));
  }
  for (const auto& [pname, p] : patches) {
    std::vector<Metrics> row;
    for (const auto& [mname, m] : models) row.push_back(evaluate(*m, scenes, p, placement_seed, jobs));
    tm.cells.push_back(std::move(row));
  }
  return tm;
}

// CSV with header source,target,mae,mse,n; the clean row uses source "clean".
inline std::string transfer_csv(const TransferMatrix& tm) {
  std::ostringstream os;
  os.precision(17);
  os << "source,target,mae,mse,n\n";
  for (std::size_t j = 0; j < tm.targets.size(); ++j)
    os << "clean," << tm.targets[j] << ',' << tm.clean[j].mae << ',' << tm.clean[j].mse << ',' << tm.clean[j].n << '\n';
  for (std::size_t i = 0; i < tm.sources.size(); ++i)
    for (std::size_t j = 0; j < tm.targets.size(); ++j)
      os << tm.sources[i] << ',' << tm.targets[j] << ',' << tm.cells[i][j].mae << ',' << tm.cells[i][j].mse << ','
         << tm.cells[i][j].n << '\n';
  return os.str();
}

inline nlohmann::json metrics_to_json(const Metrics& m) {
  auto scenes = nlohmann::json::array();
  for (const auto& r : m.per_scene) scenes.push_back({r.pred, r.gt, r.clean_pred});
  return {{"mae", m.mae}, {"mse", m.mse}, {"n", m.n}, {"per_scene", scenes}};
}

inline Metrics metrics_from_json(const nlohmann::json& j) {
  Metrics m{j.at("mae").get<double>(), j.at("mse").get<double>(), j.at("n").get<std::size_t>(), {}};
  for (const auto& r : j.at("per_scene")) m.per_scene.push_back({r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>()});
  return m;
}

inline nlohmann::json transfer_to_json(const TransferMatrix& tm) {
  nlohmann::json j = {{"sources", tm.sources}, {"targets", tm.targets}};
  j["clean"] = nlohmann::json::array();
  for (const auto& m : tm.clean) j["clean"].push_back(metrics_to_json(m));
  j["cells"] = nlohmann::json::array();
  for (const auto& row : tm.cells) {
    auto r = nlohmann::json::array();
    for (const auto& m : row) r.push_back(metrics_to_json(m));
    j["cells"].push_back(r);
  }
  return j;
}

inline TransferMatrix transfer_from_json(const nlohmann::json& j) {
  TransferMatrix tm;
  tm.sources = j.at("sources").get<std::vector<std::string>>();
  tm.targets = j.at("targets").get<std::vector<std::string>>();
  for (const auto& m : j.at("clean")) tm.clean.push_back(metrics_from_json(m));
  for (const auto& row : j.at("cells")) {
    std::vector<Metrics> r;
    for (const auto& m : row) r.push_back(metrics_from_json(m));
    tm.cells.push_back(std::move(r));
  }
  return tm;
}

inline std::string curve_csv(const std::vector<std::pair<double, double>>& curve) {
  std::ostringstream os;
  os.precision(17);
  os << "gamma,fraction\n";
  for (const auto& [g, f] : curve) os << g << ',' << f << '\n';
  return os.str();
}

// Clean | adversarial | predicted density (upsampled, max-normalised) side
// by side as one RGB PPM.
template <class T>
std::string visualization_ppm(const Tensor<T>& clean, const Tensor<T>& adv, const Tensor<T>& density) {
  const std::size_t C = clean.dim(1), H = clean.dim(2), W = clean.dim(3);
  const auto up = upsample_bilinear(density, H, W);
  T peak = T(0);
  for (T v : up.data()) peak = std::max(peak, v);
  Image img{3, H, 3 * W, std::vector<float>(3 * H * 3 * W)};
  const std::size_t plane = H * 3 * W;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t src = ((C == 1 ? 0 : c) * H + i) * W + j;
        img.values[c * plane + i * 3 * W + j] = static_cast<float>(clean[src]);
        img.values[c * plane + i * 3 * W + W + j] = static_cast<float>(adv[src]);
        const float d = peak > T(0) ? static_cast<float>(up[i * W + j] / peak) : 0.0f;
        // red-yellow ramp
        const float rgb[3] = {std::min(1.0f, 2 * d), std::max(0.0f, 2 * d - 1), 0.0f};
        img.values[c * plane + i * 3 * W + 2 * W + j] = rgb[c];
      }
  return encode_ppm(img);
}

}  // namespace pap
