// pap: dataset generation, training, patch attacks, evaluation and reports.

#include <cstdlib>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pap/cli.hpp"

namespace {

using namespace pap::cli;

// Splices `--config FILE` key=value pairs (and PAP_SEED) into argv ahead of
// the explicit flags so that explicit flags win.
std::vector<std::string> expand_args(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::vector<std::string> rest;
  std::string config;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  std::set<std::string> given;
  for (const auto& a : rest)
    if (a.rfind("--", 0) == 0) given.insert(a.substr(2, a.find('=') == std::string::npos ? std::string::npos : a.find('=') - 2));
  std::vector<std::string> extra;
  if (!config.empty()) {
    for (const auto& [k, v] : read_kv_config(config)) {
      if (given.count(k)) continue;
      given.insert(k);
      if (v == "true") {
        extra.push_back("--" + k);
      } else if (v != "false") {
        extra.push_back("--" + k);
        extra.push_back(v);
      }
    }
  }
  if (const char* env = std::getenv("PAP_SEED"); env != nullptr && !given.count("seed")) {
    extra.push_back("--seed");
    extra.push_back(env);
  }
  std::vector<std::string> out = {args[0]};
  if (!rest.empty()) out.push_back(rest[0]);
  out.insert(out.end(), extra.begin(), extra.end());
  if (rest.size() > 1) out.insert(out.end(), rest.begin() + 1, rest.end());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Perceptual adversarial patches for toy crowd counting"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  app.add_option("--config", "key=value file of flag defaults");

  GenDataOpts gd;
  auto* c_gd = app.add_subcommand("gen-data", "render a synthetic scene dataset");
  c_gd->add_option("--preset", gd.preset, "standard | scale-shift | clutter | dense")->capture_default_str();
  c_gd->add_option("--seed", gd.seed)->capture_default_str();
  c_gd->add_option("--n-train", gd.n_train)->capture_default_str();
  c_gd->add_option("--n-test", gd.n_test)->capture_default_str();
  c_gd->add_option("--out", gd.out)->required();

  TrainOpts tr;
  auto* c_tr = app.add_subcommand("train", "train a counting model");
  c_tr->add_option("--data", tr.data)->required();
  c_tr->add_option("--family", tr.family, "multi_column | single_column")->capture_default_str();
  c_tr->add_option("--epochs", tr.epochs)->capture_default_str();
  c_tr->add_option("--lr", tr.lr)->capture_default_str();
  c_tr->add_option("--momentum", tr.momentum)->capture_default_str();
  c_tr->add_option("--batch", tr.batch)->capture_default_str();
  c_tr->add_option("--seed", tr.seed)->capture_default_str();
  c_tr->add_option("--name", tr.name, "checkpoint name (default: family)");
  c_tr->add_option("--out", tr.out)->required();

  GenPatchOpts gp;
  auto* c_gp = app.add_subcommand("gen-patch", "optimise a universal patch");
  c_gp->add_option("--data", gp.data)->required();
  c_gp->add_option("--source", gp.sources, "source checkpoint(s); several for Avg-Dens")->required()->delimiter(',');
  c_gp->add_option("--baseline", gp.baseline, "PAP | MIGM | NIGM | TI-NIGM | Avg-Dens")->capture_default_str();
  c_gp->add_option("--direction", gp.direction, "increase | decrease")->capture_default_str();
  c_gp->add_option("--lambda", gp.lambda)->capture_default_str();
  c_gp->add_option("--alpha", gp.alpha)->capture_default_str();
  c_gp->add_option("--T", gp.T)->capture_default_str();
  c_gp->add_option("--epochs", gp.epochs)->capture_default_str();
  c_gp->add_option("--size", gp.size, "patch side in pixels")->capture_default_str();
  c_gp->add_option("--shape", gp.shape, "square | circle | trapezoid")->capture_default_str();
  c_gp->add_option("--seed", gp.seed)->capture_default_str();
  c_gp->add_option("--mu", gp.mu, "momentum decay for baselines")->capture_default_str();
  c_gp->add_flag("--no-weights", gp.no_weights, "drop W from the scale loss");
  c_gp->add_flag("--position-only", gp.position_only, "optimise lambda * Lp alone");
  c_gp->add_flag("--whole-map", gp.whole_map, "sum attention over the whole map");
  c_gp->add_flag("--rotate", gp.rotate, "random quarter-turn per placement");
  c_gp->add_option("--name", gp.name);
  c_gp->add_option("--out", gp.out)->required();

  AttackEvalOpts ae;
  auto* c_ae = app.add_subcommand("attack-eval", "transfer matrix of patches x models on the test split");
  c_ae->add_option("--data", ae.data)->required();
  c_ae->add_option("--patches", ae.patches)->delimiter(',');
  c_ae->add_option("--models", ae.models)->required()->delimiter(',');
  c_ae->add_option("--jobs", ae.jobs)->capture_default_str();
  c_ae->add_option("--seed", ae.seed, "placement seed")->capture_default_str();
  c_ae->add_option("--visualize", ae.visualize, "dump this many scenes per cell")->capture_default_str();
  c_ae->add_option("--pgd-source", ae.pgd_source, "add a full-image PGD row from this checkpoint");
  c_ae->add_option("--pgd-eps", ae.pgd_eps)->capture_default_str();
  c_ae->add_option("--pgd-alpha", ae.pgd_alpha)->capture_default_str();
  c_ae->add_option("--pgd-iters", ae.pgd_iters)->capture_default_str();
  c_ae->add_option("--out", ae.out)->required();

  AdvTrainOpts at;
  auto* c_at = app.add_subcommand("advtrain", "adversarial fine-tuning with patches");
  c_at->add_option("--data", at.data)->required();
  c_at->add_option("--model", at.model)->required();
  c_at->add_option("--variant", at.variant, "OAT | IAT")->capture_default_str();
  c_at->add_option("--epochs", at.epochs)->capture_default_str();
  c_at->add_option("--lr", at.lr)->capture_default_str();
  c_at->add_option("--momentum", at.momentum)->capture_default_str();
  c_at->add_option("--seed", at.seed)->capture_default_str();
  c_at->add_option("--mix-adv", at.mix_adv)->capture_default_str();
  c_at->add_option("--mix-clean", at.mix_clean)->capture_default_str();
  c_at->add_option("--lambda", at.lambda)->capture_default_str();
  c_at->add_option("--alpha", at.alpha)->capture_default_str();
  c_at->add_option("--T", at.T, "OAT generation steps")->capture_default_str();
  c_at->add_option("--attack-epochs", at.attack_epochs)->capture_default_str();
  c_at->add_option("--inner-T", at.inner_T, "IAT regeneration steps")->capture_default_str();
  c_at->add_option("--size", at.size)->capture_default_str();
  c_at->add_option("--shape", at.shape)->capture_default_str();
  c_at->add_option("--name", at.name);
  c_at->add_option("--out", at.out)->required();

  ReportOpts rp;
  auto* c_rp = app.add_subcommand("report", "overestimation curves and ablation tables");
  c_rp->add_option("--data", rp.data);
  c_rp->add_option("--source", rp.source);
  c_rp->add_option("--targets", rp.targets)->delimiter(',');
  c_rp->add_option("--transfer", rp.transfer, "transfer.json from attack-eval");
  c_rp->add_option("--direction", rp.direction)->capture_default_str();
  c_rp->add_option("--gammas", rp.gammas)->delimiter(',');
  c_rp->add_flag("--ablation", rp.ablation, "loss-term ablation");
  c_rp->add_option("--sweep-lambda", rp.sweep_lambda)->delimiter(',');
  c_rp->add_flag("--shapes", rp.shapes, "patch-shape ablation");
  c_rp->add_option("--lambda", rp.lambda)->capture_default_str();
  c_rp->add_option("--alpha", rp.alpha)->capture_default_str();
  c_rp->add_option("--T", rp.T)->capture_default_str();
  c_rp->add_option("--epochs", rp.epochs)->capture_default_str();
  c_rp->add_option("--size", rp.size)->capture_default_str();
  c_rp->add_option("--seed", rp.seed)->capture_default_str();
  c_rp->add_option("--jobs", rp.jobs)->capture_default_str();
  c_rp->add_option("--out", rp.out)->required();

  std::string run_file, rerun_out;
  auto* c_re = app.add_subcommand("rerun", "repeat the command recorded in a run.json");
  c_re->add_option("run", run_file)->required();
  c_re->add_option("--out", rerun_out)->required();

  auto args = expand_args(argc, argv);
  std::vector<char*> cargv;
  for (auto& a : args) cargv.push_back(a.data());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (c_gd->parsed()) cmd_gen_data(gd);
    else if (c_tr->parsed()) std::cout << cmd_train(tr).dump(2) << '\n';
    else if (c_gp->parsed()) std::cout << cmd_gen_patch(gp).dump(2) << '\n';
    else if (c_ae->parsed()) std::cout << transfer_csv(pap::transfer_from_json(cmd_attack_eval(ae)));
    else if (c_at->parsed()) std::cout << cmd_advtrain(at).dump(2) << '\n';
    else if (c_rp->parsed()) std::cout << cmd_report(rp).dump(2) << '\n';
    else if (c_re->parsed()) rerun(run_file, rerun_out);
  } catch (const PrereqError& e) {
    std::cerr << "pap: " << e.what() << '\n';
    return 2;
  } catch (const pap::IoError& e) {
    std::cerr << "pap: " << e.what() << '\n';
    return 2;
  } catch (const pap::NumericError& e) {
    std::cerr << "pap: numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "pap: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
