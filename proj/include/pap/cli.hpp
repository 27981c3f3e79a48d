#pragma once

// Command implementations behind tools/pap. Each command resolves its
// options, writes run.json and its artifacts under `out`, and throws
// PrereqError (exit 2) or NumericError (exit 3) on failure.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pap/advtrain.hpp"
#include "pap/attack.hpp"
#include "pap/baselines.hpp"
#include "pap/eval.hpp"
#include "pap/models.hpp"
#include "pap/scenes.hpp"

namespace pap::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Real = float;

inline constexpr const char* kVersion = "0.1.0";

struct PrereqError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenDataOpts {
  std::string preset = "standard";
  std::uint64_t seed = 0;
  std::size_t n_train = 64;
  std::size_t n_test = 32;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(GenDataOpts, preset, seed, n_train, n_test, out)

struct TrainOpts {
  std::string data;
  std::string family = "multi_column";
  std::size_t epochs = 100;
  double lr = 1e-4;
  double momentum = 0.9;
  std::size_t batch = 1;
  std::uint64_t seed = 0;
  std::string name;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainOpts, data, family, epochs, lr, momentum, batch, seed, name, out)

struct GenPatchOpts {
  std::string data;
  std::vector<std::string> sources;
  std::string baseline = "PAP";
  std::string direction = "increase";
  double lambda = 0.01;
  double alpha = 0.01;
  std::size_t T = 25;
  std::size_t epochs = 2;
  std::size_t size = 10;
  std::string shape = "square";
  std::uint64_t seed = 0;
  bool no_weights = false;
  bool position_only = false;
  bool whole_map = false;
  bool rotate = false;
  double mu = 1.0;
  std::string name;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(GenPatchOpts, data, sources, baseline, direction, lambda, alpha, T,
                                   epochs, size, shape, seed, no_weights, position_only, whole_map,
                                   rotate, mu, name, out)

struct AttackEvalOpts {
  std::string data;
  std::vector<std::string> patches;
  std::vector<std::string> models;
  std::size_t jobs = 1;
  std::uint64_t seed = 0;
  std::size_t visualize = 0;
  std::string pgd_source;
  double pgd_eps = 8.0 / 255.0;
  double pgd_alpha = 0.002;
  std::size_t pgd_iters = 20;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AttackEvalOpts, data, patches, models, jobs, seed, visualize,
                                   pgd_source, pgd_eps, pgd_alpha, pgd_iters, out)

struct AdvTrainOpts {
  std::string data;
  std::string model;
  std::string variant = "OAT";
  std::size_t epochs = 8;
  double lr = 1e-4;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  std::size_t mix_adv = 1;
  std::size_t mix_clean = 1;
  double lambda = 0.01;
  double alpha = 0.01;
  std::size_t T = 25;
  std::size_t attack_epochs = 2;
  std::size_t inner_T = 5;
  std::size_t size = 10;
  std::string shape = "square";
  std::string name;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AdvTrainOpts, data, model, variant, epochs, lr, momentum, seed,
                                   mix_adv, mix_clean, lambda, alpha, T, attack_epochs, inner_T, size,
                                   shape, name, out)

struct ReportOpts {
  std::string data;
  std::string source;
  std::vector<std::string> targets;
  std::string transfer;
  std::string direction = "increase";
  std::vector<double> gammas;
  bool ablation = false;
  std::vector<double> sweep_lambda;
  bool shapes = false;
  double lambda = 0.01;
  double alpha = 0.01;
  std::size_t T = 25;
  std::size_t epochs = 2;
  std::size_t size = 10;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ReportOpts, data, source, targets, transfer, direction, gammas,
                                   ablation, sweep_lambda, shapes, lambda, alpha, T, epochs, size, seed,
                                   jobs, out)

// ---------------------------------------------------------------------------
// helpers

inline void require_file(const fs::path& p, const std::string& what) {
  if (p.empty() || !fs::exists(p)) throw PrereqError("missing " + what + ": " + (p.empty() ? "(none given)" : p.string()));
}

inline void require_dataset(const std::string& dir) { require_file(fs::path(dir) / "manifest.json", "dataset"); }

inline void require_out(const std::string& out) {
  if (out.empty()) throw std::invalid_argument("--out is required");
  fs::create_directories(out);
}

inline std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

inline void write_json(const fs::path& p, const json& j) { io::write_file(p, j.dump(2) + "\n"); }

template <class Opts>
void write_run(const std::string& out, const std::string& command, const Opts& o) {
  json cfg = o;
  cfg.erase("out");
  write_json(fs::path(out) / "run.json", {{"command", command}, {"version", kVersion}, {"config", cfg}});
}

inline Model<Real> load_checkpoint(const std::string& path) {
  require_file(path, "model checkpoint");
  require_file(path + ".json", "model sidecar");
  return load_model<Real>(path);
}

inline Patch<Real> load_patch_file(const std::string& path) {
  require_file(path, "patch");
  return decode_patch<Real>(io::read_file(path));
}

inline std::string patch_name(const std::string& path) {
  const fs::path side = path + ".json";
  if (fs::exists(side)) {
    const auto j = json::parse(io::read_file(side));
    if (j.contains("name")) return j["name"].get<std::string>();
  }
  return stem_of(path);
}

// Count-only view of a split: stride-1 targets keep the exact integral.
inline std::vector<Sample<Real>> eval_samples(const std::string& data) {
  return to_samples<Real>(load_split(data, "test"), 1);
}

inline std::size_t equal_area_size(PatchShape shape, std::size_t square_size) {
  const double P = static_cast<double>(square_size);
  switch (shape) {
    case PatchShape::square: return square_size;
    case PatchShape::circle: return static_cast<std::size_t>(std::lround(P * 2.0 / std::sqrt(std::numbers::pi)));
    case PatchShape::trapezoid: return static_cast<std::size_t>(std::lround(P / std::sqrt(0.75)));
  }
  return square_size;
}

// ---------------------------------------------------------------------------
// commands

inline json cmd_gen_data(const GenDataOpts& o) {
  require_out(o.out);
  auto d = preset_config(o.preset);
  d.n_train = o.n_train;
  d.n_test = o.n_test;
  const auto manifest = gen_dataset(d, o.seed, o.out);
  write_run(o.out, "gen-data", o);
  return manifest;
}

inline json cmd_train(const TrainOpts& o) {
  require_dataset(o.data);
  require_out(o.out);
  const Family fam = family_from_string(o.family);
  const ModelSpec spec = fam == Family::multi_column ? ModelSpec::multi_column(o.seed) : ModelSpec::single_column(o.seed);
  Model<Real> model(spec);
  const auto train_scenes = load_split(o.data, "train");
  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.learning_rate = o.lr;
  tc.momentum = o.momentum;
  tc.batch_size = o.batch;
  tc.seed = o.seed;
  const auto res = train(model, to_samples<Real>(train_scenes, spec.output_stride), tc);
  const std::string name = o.name.empty() ? to_string(fam) : o.name;
  const fs::path ckpt = fs::path(o.out) / (name + ".papw");
  save_model(ckpt, model);
  const auto clean = evaluate(model, eval_samples(o.data), static_cast<const Patch<Real>*>(nullptr), 0);
  json summary = {{"name", name}, {"epoch_loss", res.epoch_loss}, {"test_mae", clean.mae}, {"test_mse", clean.mse}};
  write_json(fs::path(o.out) / (name + ".train.json"), summary);
  write_json(fs::path(o.out) / "timing.json", {{"seconds", res.seconds}});
  write_run(o.out, "train", o);
  return summary;
}

inline AttackConfig attack_config(const GenPatchOpts& o) {
  AttackConfig c;
  c.lambda = o.lambda;
  c.alpha = o.alpha;
  c.T = o.T;
  c.epochs = o.epochs;
  c.direction = direction_from_string(o.direction);
  c.seed = o.seed;
  c.patch_size = o.size;
  c.shape = shape_from_string(o.shape);
  c.use_density_weights = !o.no_weights;
  c.scale_term = !o.position_only;
  c.whole_map_position = o.whole_map;
  c.random_rotation = o.rotate;
  return c;
}

inline std::string loss_label(const AttackConfig& c) {
  if (!c.scale_term) return "Lp";
  std::string s = c.use_density_weights ? "Ls" : "Ls_noW";
  if (c.lambda > 0) s += "+lambda*Lp";
  return s;
}

inline json cmd_gen_patch(const GenPatchOpts& o) {
  require_dataset(o.data);
  require_out(o.out);
  if (o.sources.empty()) throw PrereqError("missing source model (--source)");
  std::vector<Model<Real>> models;
  json sources = json::array();
  for (const auto& s : o.sources) {
    models.push_back(load_checkpoint(s));
    sources.push_back({{"path", s}, {"sha256", io::sha256_file(s)}});
  }
  const auto acfg = attack_config(o);
  const auto scenes = to_samples<Real>(load_split(o.data, "train"), models.front().output_stride());
  Patch<Real> patch;
  std::vector<StepRecord> trace;
  if (o.baseline == "PAP" || o.baseline == "pap") {
    patch = pap_generate(models.front(), scenes, acfg, acfg.lambda > 0 ? &trace : nullptr);
  } else {
    BaselineConfig bc;
    bc.method = baseline_from_string(o.baseline);
    bc.mu = o.mu;
    std::vector<const Model<Real>*> ptrs;
    for (const auto& m : models) ptrs.push_back(&m);
    patch = baseline_generate(ptrs, scenes, acfg, bc);
  }
  std::string base = o.baseline == "PAP" || o.baseline == "pap" ? "pap" : to_string(baseline_from_string(o.baseline));
  std::transform(base.begin(), base.end(), base.begin(), [](unsigned char c) { return std::tolower(c); });
  const std::string name = o.name.empty() ? base + "-" + stem_of(o.sources.front()) : o.name;
  const fs::path file = fs::path(o.out) / (name + ".papp");
  const std::string bytes = encode_patch(patch);
  io::write_file(file, bytes);
  json side = {{"name", name},
               {"baseline", o.baseline == "pap" ? "PAP" : o.baseline},
               {"loss", loss_label(acfg)},
               {"attack", acfg.to_json()},
               {"sources", sources},
               {"sha256", io::sha256_hex(bytes)}};
  if (!trace.empty()) {
    const std::size_t visits = trace.size() / acfg.T;
    double first = 0, last = 0;
    for (std::size_t v = 0; v < visits; ++v) {
      first += trace[v * acfg.T].position_loss;
      last += trace[v * acfg.T + acfg.T - 1].position_loss;
    }
    side["footprint_attention"] = {{"first_step_mean", first / static_cast<double>(visits)},
                                   {"last_step_mean", last / static_cast<double>(visits)}};
  }
  write_json(file.string() + ".json", side);
  Image preview{patch.channels(), patch.size(), patch.size(), {}};
  for (Real v : patch.delta.data()) preview.values.push_back(static_cast<float>(v));
  io::write_file(fs::path(o.out) / (name + ".ppm"), encode_ppm(preview));
  write_run(o.out, "gen-patch", o);
  return side;
}

inline json cmd_attack_eval(const AttackEvalOpts& o) {
  require_dataset(o.data);
  require_out(o.out);
  if (o.models.empty()) throw PrereqError("missing target models (--models)");
  std::vector<Model<Real>> models;
  for (const auto& m : o.models) models.push_back(load_checkpoint(m));
  std::vector<Patch<Real>> patches;
  for (const auto& p : o.patches) patches.push_back(load_patch_file(p));
  const auto scenes = eval_samples(o.data);
  std::vector<std::pair<std::string, const Model<Real>*>> mrefs;
  for (std::size_t i = 0; i < models.size(); ++i) mrefs.emplace_back(stem_of(o.models[i]), &models[i]);
  std::vector<std::pair<std::string, const Patch<Real>*>> prefs;
  for (std::size_t i = 0; i < patches.size(); ++i) prefs.emplace_back(patch_name(o.patches[i]), &patches[i]);
  auto tm = run_transfer_eval(mrefs, prefs, scenes, o.seed, o.jobs);

  if (!o.pgd_source.empty()) {
    const auto src = load_checkpoint(o.pgd_source);
    const auto src_scenes = to_samples<Real>(load_split(o.data, "test"), src.output_stride());
    std::vector<Tensor<Real>> adv(scenes.size());
    parallel_for(scenes.size(), o.jobs, [&](std::size_t i) {
      adv[i] = pgd_linf(src, src_scenes[i].image, src_scenes[i].target.to_tensor<Real>(), static_cast<Real>(o.pgd_eps),
                        static_cast<Real>(o.pgd_alpha), o.pgd_iters);
    });
    std::vector<Metrics> row;
    for (const auto& m : models) row.push_back(evaluate_inputs(m, scenes, adv, o.jobs));
    tm.sources.push_back("pgd-" + stem_of(o.pgd_source));
    tm.cells.push_back(std::move(row));
  }

  io::write_file(fs::path(o.out) / "transfer.csv", transfer_csv(tm));
  const json j = transfer_to_json(tm);
  write_json(fs::path(o.out) / "transfer.json", j);

  if (o.visualize > 0) {
    const fs::path vis = fs::path(o.out) / "vis";
    for (std::size_t p = 0; p < patches.size(); ++p)
      for (std::size_t m = 0; m < models.size(); ++m)
        for (std::size_t i = 0; i < std::min(o.visualize, scenes.size()); ++i) {
          const auto& img = scenes[i].image;
          const auto M = eval_placement(o.seed, i, patches[p].shape, patches[p].size(), img.dim(2), img.dim(3));
          const auto x_adv = apply_patch(img, patches[p].delta, M);
          const auto dens = models[m].forward(x_adv);
          const std::string stem = prefs[p].first + "__" + mrefs[m].first + "__" + std::to_string(i);
          io::write_file(vis / (stem + ".ppm"), visualization_ppm(img, x_adv, dens));
          io::write_file(vis / (stem + ".papd"), encode_density(density_from_tensor(dens, models[m].output_stride())));
        }
  }
  write_run(o.out, "attack-eval", o);
  return j;
}

inline json cmd_advtrain(const AdvTrainOpts& o) {
  require_dataset(o.data);
  require_out(o.out);
  const auto base = load_checkpoint(o.model);
  AdvTrainConfig cfg;
  cfg.variant = adv_variant_from_string(o.variant);
  cfg.mix_adv = o.mix_adv;
  cfg.mix_clean = o.mix_clean;
  cfg.train.epochs = o.epochs;
  cfg.train.learning_rate = o.lr;
  cfg.train.momentum = o.momentum;
  cfg.train.seed = o.seed;
  cfg.attack.lambda = cfg.inner.lambda = o.lambda;
  cfg.attack.alpha = cfg.inner.alpha = o.alpha;
  cfg.attack.patch_size = cfg.inner.patch_size = o.size;
  cfg.attack.shape = cfg.inner.shape = shape_from_string(o.shape);
  cfg.attack.seed = cfg.inner.seed = o.seed;
  cfg.attack.T = o.T;
  cfg.attack.epochs = o.attack_epochs;
  cfg.inner.T = o.inner_T;
  const auto scenes = to_samples<Real>(load_split(o.data, "train"), base.output_stride());
  AdvTrainResult res;
  const auto enhanced = adv_train(base, scenes, cfg, &res);
  const std::string name = o.name.empty() ? stem_of(o.model) + "-" + to_string(cfg.variant) : o.name;
  save_model(fs::path(o.out) / (name + ".papw"), enhanced);
  const auto test = eval_samples(o.data);
  const auto before = evaluate(base, test, static_cast<const Patch<Real>*>(nullptr), 0);
  const auto after = evaluate(enhanced, test, static_cast<const Patch<Real>*>(nullptr), 0);
  json summary = {{"name", name},
                  {"config", cfg.to_json()},
                  {"epoch_loss", res.train.epoch_loss},
                  {"clean_mae_before", before.mae},
                  {"clean_mae_after", after.mae}};
  write_json(fs::path(o.out) / (name + ".advtrain.json"), summary);
  write_json(fs::path(o.out) / "timing.json",
             {{"variant", to_string(cfg.variant)}, {"seconds", res.seconds}, {"generation_seconds", res.generation_seconds}});
  write_run(o.out, "advtrain", o);
  return summary;
}

inline std::string metrics_table(const std::string& head, const std::vector<std::string>& rows,
                                 const std::vector<std::string>& targets, const std::vector<std::vector<Metrics>>& cells) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "| " << head << " |";
  for (const auto& t : targets) os << ' ' << t << " |";
  os << "\n|---|";
  for (std::size_t j = 0; j < targets.size(); ++j) os << "---|";
  os << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    os << "| " << rows[i] << " |";
    for (const auto& m : cells[i]) os << ' ' << m.mae << " / " << m.mse << " |";
    os << '\n';
  }
  return os.str();
}

inline std::string rows_csv(const std::string& key, const std::vector<std::string>& rows,
                            const std::vector<std::string>& targets, const std::vector<std::vector<Metrics>>& cells) {
  std::ostringstream os;
  os.precision(17);
  os << key << ",target,mae,mse,n\n";
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < targets.size(); ++j)
      os << rows[i] << ',' << targets[j] << ',' << cells[i][j].mae << ',' << cells[i][j].mse << ',' << cells[i][j].n
         << '\n';
  return os.str();
}

inline json cmd_report(const ReportOpts& o) {
  require_out(o.out);
  json summary = json::object();
  std::ostringstream md;
  md << "# Report\n\n";
  const Direction dir = direction_from_string(o.direction);

  if (!o.transfer.empty()) {
    require_file(o.transfer, "transfer matrix");
    const auto tm = transfer_from_json(json::parse(io::read_file(o.transfer)));
    const auto gammas = o.gammas.empty() ? default_gamma_grid(dir) : o.gammas;
    std::ostringstream os;
    os.precision(17);
    os << "source,target,gamma,fraction\n";
    for (std::size_t i = 0; i < tm.sources.size(); ++i)
      for (std::size_t j = 0; j < tm.targets.size(); ++j)
        for (const auto& [g, f] : overestimation_curve(tm.cells[i][j].per_scene, gammas, dir))
          os << tm.sources[i] << ',' << tm.targets[j] << ',' << g << ',' << f << '\n';
    io::write_file(fs::path(o.out) / "overestimation.csv", os.str());
    md << "## Transfer matrix (MAE / MSE)\n\n";
    std::vector<std::string> rows = {"clean"};
    std::vector<std::vector<Metrics>> cells = {tm.clean};
    for (std::size_t i = 0; i < tm.sources.size(); ++i) {
      rows.push_back(tm.sources[i]);
      cells.push_back(tm.cells[i]);
    }
    md << metrics_table("source \\ target", rows, tm.targets, cells) << '\n';
  }

  const bool generate = o.ablation || !o.sweep_lambda.empty() || o.shapes;
  if (generate) {
    require_dataset(o.data);
    const auto source = load_checkpoint(o.source);
    std::vector<Model<Real>> targets;
    std::vector<std::string> tnames;
    for (const auto& t : o.targets) {
      targets.push_back(load_checkpoint(t));
      tnames.push_back(stem_of(t));
    }
    if (targets.empty()) throw PrereqError("missing target models (--targets)");
    const auto train_s = to_samples<Real>(load_split(o.data, "train"), source.output_stride());
    const auto test_s = eval_samples(o.data);
    AttackConfig base;
    base.lambda = o.lambda;
    base.alpha = o.alpha;
    base.T = o.T;
    base.epochs = o.epochs;
    base.patch_size = o.size;
    base.seed = o.seed;
    base.direction = dir;
    auto row_for = [&](const Patch<Real>* p) {
      std::vector<Metrics> row;
      for (const auto& t : targets) row.push_back(evaluate(t, test_s, p, o.seed, o.jobs));
      return row;
    };
    // generation is deterministic, so sweep rows that repeat an ablation row reuse it
    std::map<std::string, std::vector<Metrics>> done;
    auto run = [&](const AttackConfig& c) {
      const auto key = c.to_json().dump();
      if (auto it = done.find(key); it != done.end()) return it->second;
      const auto p = pap_generate(source, train_s, c);
      return done[key] = row_for(&p);
    };

    if (o.ablation) {
      std::vector<std::string> rows = {"None", "Ls_noW", "Ls", "Lp", "Ls+lambda*Lp"};
      std::vector<std::vector<Metrics>> cells;
      cells.push_back(row_for(nullptr));
      AttackConfig c = base;
      c.lambda = 0;
      c.use_density_weights = false;
      cells.push_back(run(c));
      c.use_density_weights = true;
      cells.push_back(run(c));
      c.scale_term = false;
      c.lambda = base.lambda > 0 ? base.lambda : 0.01;
      cells.push_back(run(c));
      c.scale_term = true;
      cells.push_back(run(c));
      io::write_file(fs::path(o.out) / "ablation_loss.csv", rows_csv("loss", rows, tnames, cells));
      md << "## Loss ablation (MAE / MSE)\n\n" << metrics_table("loss", rows, tnames, cells) << '\n';
      json a = json::object();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        json r = json::object();
        for (std::size_t j = 0; j < tnames.size(); ++j) r[tnames[j]] = cells[i][j].mae;
        a[rows[i]] = r;
      }
      summary["ablation_mae"] = a;
    }

    if (!o.sweep_lambda.empty()) {
      std::vector<std::string> rows;
      std::vector<std::vector<Metrics>> cells;
      for (double l : o.sweep_lambda) {
        AttackConfig c = base;
        c.lambda = l;
        std::ostringstream ls;
        ls << l;
        rows.push_back(ls.str());
        cells.push_back(run(c));
      }
      io::write_file(fs::path(o.out) / "lambda_sweep.csv", rows_csv("lambda", rows, tnames, cells));
      md << "## Lambda sweep (MAE / MSE)\n\n" << metrics_table("lambda", rows, tnames, cells) << '\n';
    }

    if (o.shapes) {
      std::vector<std::string> rows;
      std::vector<std::vector<Metrics>> cells;
      for (auto sh : {PatchShape::circle, PatchShape::square, PatchShape::trapezoid}) {
        AttackConfig c = base;
        c.shape = sh;
        c.patch_size = equal_area_size(sh, o.size);
        rows.push_back(to_string(sh) + "(" + std::to_string(c.patch_size) + ")");
        cells.push_back(run(c));
      }
      io::write_file(fs::path(o.out) / "shapes.csv", rows_csv("shape", rows, tnames, cells));
      md << "## Patch shapes (MAE / MSE)\n\n" << metrics_table("shape", rows, tnames, cells) << '\n';
    }
  }
  io::write_file(fs::path(o.out) / "report.md", md.str());
  write_run(o.out, "report", o);
  return summary;
}

// Re-executes the command recorded in a run.json, writing under `out`.
inline json rerun(const fs::path& run_json, const std::string& out) {
  require_file(run_json, "run.json");
  const auto j = json::parse(io::read_file(run_json));
  const auto cmd = j.at("command").get<std::string>();
  json cfg = j.at("config");
  cfg["out"] = out;
  if (cmd == "gen-data") return cmd_gen_data(cfg.get<GenDataOpts>());
  if (cmd == "train") return cmd_train(cfg.get<TrainOpts>());
  if (cmd == "gen-patch") return cmd_gen_patch(cfg.get<GenPatchOpts>());
  if (cmd == "attack-eval") return cmd_attack_eval(cfg.get<AttackEvalOpts>());
  if (cmd == "advtrain") return cmd_advtrain(cfg.get<AdvTrainOpts>());
  if (cmd == "report") return cmd_report(cfg.get<ReportOpts>());
  throw std::invalid_argument("unknown command in run.json: " + cmd);
}

// sha256 of every file under dir except wall-clock records.
inline std::map<std::string, std::string> artifact_checksums(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == "timing.json") continue;
    out[fs::relative(e.path(), dir).generic_string()] = io::sha256_file(e.path());
  }
  return out;
}

// key=value lines (# comments) -> map; keys use the long flag names.
inline std::map<std::string, std::string> read_kv_config(const fs::path& p) {
  require_file(p, "config file");
  std::map<std::string, std::string> kv;
  std::istringstream in(io::read_file(p));
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument(p.string() + ":" + std::to_string(no) + ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

}  // namespace pap::cli
