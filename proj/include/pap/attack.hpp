#pragma once

// Perceptual adversarial patch generation.
//
// A patch is a [C,P,P] texture in [0,1] with a fixed binary footprint
// (square, circle or trapezoid). Each optimisation step composes the patch
// into a scene, weights the predicted density by sigmoid(I - pred) (scale
// perception), adds the footprint mass of a count-guided Grad-CAM map
// (position perception), and moves the texture along the raw gradient:
// ascent for count-increasing patches, descent for count-decreasing ones.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pap/density.hpp"
#include "pap/io.hpp"
#include "pap/models.hpp"
#include "pap/tensor.hpp"

namespace pap {

enum class PatchShape : std::uint8_t { square = 0, circle = 1, trapezoid = 2 };
enum class Direction { increase, decrease };

inline std::string to_string(PatchShape s) {
  switch (s) {
    case PatchShape::square: return "square";
    case PatchShape::circle: return "circle";
    case PatchShape::trapezoid: return "trapezoid";
  }
  return "square";
}

inline PatchShape shape_from_string(const std::string& s) {
  if (s == "square") return PatchShape::square;
  if (s == "circle") return PatchShape::circle;
  if (s == "trapezoid") return PatchShape::trapezoid;
  throw std::invalid_argument("unknown patch shape: " + s);
}

inline std::string to_string(Direction d) { return d == Direction::increase ? "increase" : "decrease"; }

inline Direction direction_from_string(const std::string& s) {
  if (s == "increase") return Direction::increase;
  if (s == "decrease") return Direction::decrease;
  throw std::invalid_argument("unknown attack direction: " + s);
}

// ---------------------------------------------------------------------------
// Footprints and masks

// P x P binary footprint, row-major. Pixel centres are tested against the
// shape: a disc of diameter P, or an isosceles trapezoid whose top edge is
// P/2 wide and whose bottom edge spans the box.
inline std::vector<std::uint8_t> make_footprint(PatchShape shape, std::size_t P) {
  if (P == 0) throw std::invalid_argument("patch size must be positive");
  std::vector<std::uint8_t> fp(P * P, 0);
  const double half = static_cast<double>(P) / 2.0;
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t j = 0; j < P; ++j) {
      const double y = static_cast<double>(i) + 0.5, x = static_cast<double>(j) + 0.5;
      bool in = true;
      if (shape == PatchShape::circle) {
        in = (y - half) * (y - half) + (x - half) * (x - half) <= half * half;
      } else if (shape == PatchShape::trapezoid) {
        const double width = half + half * (y / static_cast<double>(P));
        in = std::abs(x - half) <= width / 2.0;
      }
      fp[i * P + j] = in ? 1 : 0;
    }
  return fp;
}

struct Mask {
  std::size_t height = 0, width = 0;
  std::size_t row = 0, col = 0;  // top-left of the P x P box
  std::size_t size = 0;          // P
  int quarter_turns = 0;
  PatchShape shape = PatchShape::square;
  std::vector<std::uint8_t> values;  // image resolution, row-major

  std::size_t ones() const { return static_cast<std::size_t>(std::count(values.begin(), values.end(), 1)); }
};

inline Mask place_mask(PatchShape shape, std::size_t P, std::size_t H, std::size_t W, std::size_t row,
                       std::size_t col, int quarter_turns = 0) {
  if (P == 0 || row + P > H || col + P > W)
    throw std::invalid_argument("patch of size " + std::to_string(P) + " at (" + std::to_string(row) + "," +
                                std::to_string(col) + ") exceeds " + std::to_string(H) + "x" + std::to_string(W));
  Mask m{H, W, row, col, P, ((quarter_turns % 4) + 4) % 4, shape, std::vector<std::uint8_t>(H * W, 0)};
  const auto fp = make_footprint(shape, P);
  // Same index mapping as place_patch so the texture and footprint rotate together.
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t j = 0; j < P; ++j) {
      std::size_t r = i, s = j;
      switch (m.quarter_turns) {
        case 1: r = j; s = P - 1 - i; break;
        case 2: r = P - 1 - i; s = P - 1 - j; break;
        case 3: r = P - 1 - j; s = i; break;
        default: break;
      }
      m.values[(row + r) * W + col + s] = fp[i * P + j];
    }
  return m;
}

// Random placement (and, when enabled, a random quarter-turn) or a fixed
// position when one is given.
template <class Rng>
Mask make_mask(PatchShape shape, std::size_t P, std::size_t H, std::size_t W,
               std::optional<std::pair<std::size_t, std::size_t>> position, Rng& rng, bool random_rotation = false) {
  if (P == 0 || P > H || P > W) throw std::invalid_argument("patch does not fit the image");
  std::size_t row = 0, col = 0;
  if (position) {
    std::tie(row, col) = *position;
  } else {
    std::uniform_int_distribution<std::size_t> rd(0, H - P), cd(0, W - P);
    row = rd(rng);
    col = cd(rng);
  }
  int q = 0;
  if (random_rotation) q = std::uniform_int_distribution<int>(0, 3)(rng);
  return place_mask(shape, P, H, W, row, col, q);
}

template <class T>
Tensor<T> mask_tensor(const Mask& m, std::size_t channels) {
  Tensor<T> t(Shape{1, channels, m.height, m.width});
  auto d = t.data();
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < m.values.size(); ++p) d[c * m.values.size() + p] = static_cast<T>(m.values[p]);
  return t;
}

// ---------------------------------------------------------------------------
// Patch

template <class T>
struct Patch {
  Tensor<T> delta;  // [C,P,P], values in [0,1]
  PatchShape shape = PatchShape::square;

  std::size_t size() const { return delta.dim(1); }
  std::size_t channels() const { return delta.dim(0); }
};

// x_adv = clip((1 - M) * x + M * canvas, [0, 1]); canvas is image-sized.
template <class T>
Tensor<T> compose(const Tensor<T>& x, const Tensor<T>& canvas, const Mask& M) {
  detail::require_same_shape(x, canvas, "compose");
  if (x.rank() != 4 || x.dim(2) != M.height || x.dim(3) != M.width)
    throw ShapeError("compose: mask " + std::to_string(M.height) + "x" + std::to_string(M.width) +
                     " does not match image " + to_string(x.shape()));
  const auto m = mask_tensor<T>(M, x.dim(1));
  const auto keep = affine(m, T(-1), T(1));
  return clamp(add(mul(keep, x), mul(m, canvas)), T(0), T(1));
}

template <class T>
Tensor<T> apply_patch(const Tensor<T>& x, const Tensor<T>& delta, const Mask& M) {
  const auto canvas = place_patch(delta, x.dim(2), x.dim(3), M.row, M.col, M.quarter_turns);
  return compose(x, canvas, M);
}

// PAPP1: "PAPP1", u8 shape code, u32 P, u32 C, C*P*P f32.
template <class T>
std::string encode_patch(const Patch<T>& p) {
  io::Writer w;
  w.magic("PAPP1");
  w.u8(static_cast<std::uint8_t>(p.shape));
  w.u32(static_cast<std::uint32_t>(p.size()));
  w.u32(static_cast<std::uint32_t>(p.channels()));
  for (T v : p.delta.data()) w.f32(static_cast<float>(v));
  return w.str();
}

template <class T>
Patch<T> decode_patch(std::string bytes) {
  io::Reader r(std::move(bytes), "PAPP1");
  r.expect_magic("PAPP1");
  const auto code = r.u8();
  if (code > 2) throw IoError("PAPP1: unknown shape code " + std::to_string(code));
  const std::size_t P = r.u32();
  const std::size_t C = r.u32();
  std::vector<T> v(C * P * P);
  for (auto& x : v) x = static_cast<T>(r.f32());
  return {Tensor<T>(Shape{C, P, P}, std::move(v)), static_cast<PatchShape>(code)};
}

// ---------------------------------------------------------------------------
// Losses

// W = sigmoid(I - pred), computed on values only (no gradient through pred).
template <class T>
Tensor<T> density_weights(const Tensor<T>& I, const Tensor<T>& pred) {
  detail::require_same_shape(I, pred, "density_weights");
  Tensor<T> W(I.shape());
  auto w = W.data();
  auto a = I.data();
  auto b = pred.data();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = T(1) / (T(1) + std::exp(-(a[i] - b[i])));
  return W;
}

// L_s = sum_ij W_ij * pred_ij
template <class T>
Tensor<T> scale_loss(const Tensor<T>& W, const Tensor<T>& pred) {
  detail::require_same_shape(W, pred, "scale_loss");
  return reduce_sum(mul(W, pred));
}

template <class T>
struct Attention {
  Tensor<T> map;                 // [1,1,h,w], non-negative
  std::vector<T> channel_weights;  // global-average-pooled dC/dA per channel
};

// Count-guided Grad-CAM over activation A (on the tape), target C = count.
// Channel weights are constants; the map stays differentiable through A.
template <class T>
Attention<T> grad_cam(Tape<T>& tape, const Tensor<T>& count, const Tensor<T>& A) {
  detail::require_rank4(A, "grad_cam");
  const std::size_t K = A.dim(1), hw = A.dim(2) * A.dim(3);
  std::vector<T> w(K, T(0));
  if (tape.tracks(A) && tape.tracks(count)) {
    const auto g = tape.gradient(count, A);
    for (std::size_t n = 0; n < A.dim(0); ++n)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t p = 0; p < hw; ++p) w[k] += g[(n * K + k) * hw + p];
    for (auto& v : w) v /= static_cast<T>(hw * A.dim(0));
  }
  Tensor<T> kernel(Shape{1, K, 1, 1}, w);
  auto S = relu(conv2d(A, kernel, Tensor<T>::zeros({1})));
  return {S, std::move(w)};
}

// Runs the model on x and returns the attention at the named layer.
template <class T>
Attention<T> attention_map(const Model<T>& model, const Tensor<T>& x, const std::string& layer = kDefaultAttentionLayer) {
  std::optional<TapeScope<T>> own;
  if (Tape<T>::active() == nullptr) own.emplace();
  auto& tape = *Tape<T>::active();
  Tensor<T> input = x;
  if (!tape.needs_grad(x)) input = x.detach().set_requires_grad(true);
  Taps<T> taps;
  auto out = model.forward(input, &taps);
  auto it = taps.find(layer);
  if (it == taps.end()) throw std::invalid_argument("unknown attention layer: " + layer);
  return grad_cam(tape, reduce_sum(out), it->second);
}

// L_p: attention upsampled to image size, summed over the patch footprint
// (or the whole map when whole_map is set).
template <class T>
Tensor<T> position_loss(const Tensor<T>& S, const Mask& M, bool whole_map = false) {
  detail::require_rank4(S, "position_loss");
  const auto up = upsample_bilinear(S, M.height, M.width);
  if (whole_map) return reduce_sum(up);
  return reduce_sum(up, std::span<const std::uint8_t>(M.values), M.height, M.width);
}

// ---------------------------------------------------------------------------
// Generation

struct AttackConfig {
  double lambda = 0.01;
  double alpha = 0.01;
  std::size_t T = 25;
  std::size_t epochs = 2;
  Direction direction = Direction::increase;
  std::uint64_t seed = 0;
  std::string attention_layer = kDefaultAttentionLayer;
  std::size_t patch_size = 10;
  PatchShape shape = PatchShape::square;
  bool use_density_weights = true;  // false: plain count sum in place of L_s
  bool scale_term = true;           // false: position loss only
  bool whole_map_position = false;
  bool random_rotation = false;
  // Fixed top-left (row, col) for every visit instead of random placement.
  std::optional<std::pair<std::size_t, std::size_t>> position;

  void validate() const {
    if (!(lambda >= 0)) throw std::invalid_argument("lambda must be >= 0");
    if (!(alpha > 0)) throw std::invalid_argument("alpha must be > 0");
    if (T < 1) throw std::invalid_argument("T must be >= 1");
    if (patch_size < 1) throw std::invalid_argument("patch size must be >= 1");
    if (!scale_term && !(lambda > 0)) throw std::invalid_argument("position-only objective needs lambda > 0");
  }

  nlohmann::json to_json() const {
    return {{"lambda", lambda}, {"alpha", alpha}, {"T", T}, {"epochs", epochs},
            {"direction", to_string(direction)}, {"seed", seed}, {"attention_layer", attention_layer},
            {"patch_size", patch_size}, {"shape", to_string(shape)},
            {"use_density_weights", use_density_weights}, {"scale_term", scale_term},
            {"whole_map_position", whole_map_position},
            {"random_rotation", random_rotation},
            {"position", position ? nlohmann::json::array({position->first, position->second}) : nlohmann::json()}};
  }

  static AttackConfig from_json(const nlohmann::json& j) {
    AttackConfig c;
    c.lambda = j.value("lambda", c.lambda);
    c.alpha = j.value("alpha", c.alpha);
    c.T = j.value("T", c.T);
    c.epochs = j.value("epochs", c.epochs);
    c.direction = direction_from_string(j.value("direction", std::string("increase")));
    c.seed = j.value("seed", c.seed);
    c.attention_layer = j.value("attention_layer", c.attention_layer);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.shape = shape_from_string(j.value("shape", std::string("square")));
    c.use_density_weights = j.value("use_density_weights", c.use_density_weights);
    c.scale_term = j.value("scale_term", c.scale_term);
    c.whole_map_position = j.value("whole_map_position", c.whole_map_position);
    c.random_rotation = j.value("random_rotation", c.random_rotation);
    if (j.contains("position") && !j["position"].is_null())
      c.position = std::make_pair(j["position"].at(0).get<std::size_t>(), j["position"].at(1).get<std::size_t>());
    return c;
  }
};

struct StepRecord {
  std::size_t epoch = 0, scene = 0, step = 0;
  double scale_loss = 0, position_loss = 0, total = 0, count = 0;
};

template <class T>
struct Objective {
  Tensor<T> total;
  double scale_loss = 0, position_loss = 0, count = 0;
};

// L_total = L_s + lambda * L_p for one composed input, built on the active
// tape. The position term is skipped when lambda is 0 unless want_position.
template <class T>
Objective<T> pap_objective(const Model<T>& model, const Tensor<T>& x_adv, const Tensor<T>& target,
                           const Mask& M, const AttackConfig& cfg, bool want_position = false) {
  auto& tape = *Tape<T>::active();
  Taps<T> taps;
  auto pred = model.forward(x_adv, &taps);
  const auto W = cfg.use_density_weights ? density_weights(target, pred) : Tensor<T>::ones(pred.shape());
  Objective<T> obj;
  auto ls = scale_loss(W, pred);
  obj.scale_loss = static_cast<double>(ls.item());
  auto count = reduce_sum(pred);
  obj.count = static_cast<double>(count.item());
  if (cfg.scale_term) obj.total = ls;
  if (cfg.lambda > 0 || want_position) {
    auto it = taps.find(cfg.attention_layer);
    if (it == taps.end()) throw std::invalid_argument("unknown attention layer: " + cfg.attention_layer);
    auto att = grad_cam(tape, count, it->second);
    auto lp = position_loss(att.map, M, cfg.whole_map_position);
    obj.position_loss = static_cast<double>(lp.item());
    if (cfg.lambda > 0) {
      auto wp = scale(lp, static_cast<T>(cfg.lambda));
      obj.total = cfg.scale_term ? add(obj.total, wp) : wp;
    }
  }
  if (!std::isfinite(static_cast<double>(obj.total.item()))) throw NumericError("non-finite attack loss");
  return obj;
}

template <class T>
void clip_unit(Tensor<T>& t) {
  for (auto& v : t.data()) v = std::clamp(v, T(0), T(1));
}

// The random starting patch pap_generate draws for this config.
template <class T>
Tensor<T> initial_patch(const AttackConfig& cfg, std::size_t channels) {
  std::mt19937_64 rng(cfg.seed);
  return Tensor<T>::uniform({channels, cfg.patch_size, cfg.patch_size}, T(0), T(1), rng);
}

// Universal patch over the scene set. Each epoch visits the scenes in a
// seeded order; every visit draws a fresh placement and runs T updates
// delta <- clip(delta +/- alpha * dL_total/d delta).
template <class T>
Patch<T> pap_generate(const Model<T>& source, const std::vector<Sample<T>>& scenes, const AttackConfig& cfg,
                      std::vector<StepRecord>* trace = nullptr, std::optional<Tensor<T>> init = std::nullopt) {
  cfg.validate();
  if (scenes.empty()) throw std::invalid_argument("pap_generate: empty scene set");
  const auto model = source.frozen();
  const std::size_t C = scenes[0].image.dim(1), H = scenes[0].image.dim(2), W = scenes[0].image.dim(3);
  std::mt19937_64 rng(cfg.seed);
  Patch<T> patch{init ? init->detach() : Tensor<T>::uniform({C, cfg.patch_size, cfg.patch_size}, T(0), T(1), rng),
                 cfg.shape};
  if (patch.delta.shape() != Shape{C, cfg.patch_size, cfg.patch_size}) throw ShapeError("initial patch has wrong shape");
  patch.delta.set_requires_grad(true);
  const T sign = cfg.direction == Direction::increase ? T(1) : T(-1);
  const T alpha = static_cast<T>(cfg.alpha);

  std::vector<std::size_t> order(scenes.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t si : order) {
      const auto& sc = scenes[si];
      if (sc.image.dim(2) != H || sc.image.dim(3) != W) throw ShapeError("pap_generate: scenes differ in size");
      const auto M = make_mask(cfg.shape, cfg.patch_size, H, W, cfg.position, rng, cfg.random_rotation);
      const auto target = sc.target.template to_tensor<T>();
      for (std::size_t t = 0; t < cfg.T; ++t) {
        TapeScope<T> scope;
        auto x_adv = apply_patch(sc.image, patch.delta, M);
        auto obj = pap_objective(model, x_adv, target, M, cfg, trace != nullptr);
        backward(obj.total);
        auto d = patch.delta.data();
        auto g = patch.delta.grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::clamp(d[i] + sign * alpha * g[i], T(0), T(1));
        patch.delta.zero_grad();
        if (trace != nullptr)
          trace->push_back({epoch, si, t, obj.scale_loss, obj.position_loss,
                            static_cast<double>(obj.total.item()), obj.count});
      }
    }
  }
  patch.delta = patch.delta.detach();
  return patch;
}

}  // namespace pap
