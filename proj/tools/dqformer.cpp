// dqformer: synthesize data, train, evaluate, and run panoptic inference.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dqf/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
  cmd->add_option("--config", c.config_path, "config file (key = value lines)");
  cmd->add_option("--set", c.sets, "override: key=value (repeatable)");
  cmd->add_option("--seed", c.seed, "override the config seed");
}

std::vector<std::pair<std::string, std::string>> parse_sets(const CommonOpts& c) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& s : c.sets) {
    auto eq = s.find('=');
    if (eq == std::string::npos)
      throw dqf::ValidationError("--set expects key=value, got '" + s + "'");
    out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  if (c.seed >= 0) out.emplace_back("seed", std::to_string(c.seed));
  return out;
}

dqf::RunConfig load_config(const CommonOpts& c) {
  dqf::RunConfig cfg;
  if (!c.config_path.empty()) cfg = dqf::load_config_file(c.config_path);
  for (const auto& [k, v] : parse_sets(c)) dqf::config_set(cfg, k, v);
  cfg.validate();
  return cfg;
}

int cmd_synth(const CommonOpts& common, int count, const std::string& out_dir) {
  dqf::RunConfig cfg = load_config(common);
  auto entries = dqf::synthesize_dataset(cfg.recipe(), cfg.taxonomy(), count, out_dir);
  std::size_t total = 0;
  for (const auto& e : entries) total += e.n_points;
  std::cout << "wrote " << entries.size() << " scenes (" << total << " points) to " << out_dir
            << "\n";
  return 0;
}

int cmd_train(const CommonOpts& common, const std::string& manifest, const std::string& out_dir,
              const std::string& resume) {
  dqf::RunConfig cfg = load_config(common);
  dqf::TrainResult res = dqf::train(cfg, manifest, out_dir, resume);
  std::printf("trained %d epochs: final loss %.17g, train PQ %.17g\n", res.epochs_run,
              res.final_loss, res.final_pq);
  std::cout << "checkpoint: " << res.checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& ck_path, const std::string& manifest,
             const std::string& out_path, bool plots, int block) {
  dqf::nn::Checkpoint ck = dqf::nn::load_checkpoint(ck_path);
  dqf::RunConfig cfg = dqf::checkpoint_config(ck, parse_sets(common));
  dqf::LabelTaxonomy tax = cfg.taxonomy();
  dqf::Model model(cfg);
  dqf::nn::restore_params(model.param_store(), ck);

  auto clouds = dqf::load_dataset(manifest, tax);
  std::vector<std::vector<dqf::ClassStats>> stats;
  nlohmann::json scenes = nlohmann::json::array();
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    dqf::InferenceResult res = dqf::infer_scene(model, cfg, tax, clouds[i], block);
    auto st = dqf::evaluate_counts(res.pred, clouds[i], tax);
    stats.push_back(st);
    nlohmann::json sj = dqf::report_to_json(dqf::report_from_counts(st, tax));
    sj["scene"] = i;
    scenes.push_back(sj);
    if (plots) {
      fs::path dir = fs::path(out_path).parent_path() / "plots";
      fs::create_directories(dir);
      for (int l = 0; l < 4; ++l) {
        auto dims = cfg.grid_spec().dims_at(l);
        dqf::Matrix img = res.center[l].colwise().maxCoeff();  // 1 x H*W over classes
        char name[64];
        std::snprintf(name, sizeof(name), "scene_%04zu_level%d.pgm", i, l);
        dqf::write_pgm(img, dims[0], dims[1], (dir / name).string());
      }
    }
  }
  dqf::PanopticReport rep = dqf::evaluate_pooled(stats, tax);
  nlohmann::json j = dqf::report_to_json(rep);
  j["scenes"] = scenes;
  std::ofstream f(out_path);
  if (!f) throw dqf::IoError("cannot open " + out_path);
  f << j.dump(2) << "\n";
  std::printf("PQ %.1f  PQ_th %.1f  PQ_st %.1f  (report: %s)\n", dqf::as_percent(rep.pq),
              dqf::as_percent(rep.pq_th), dqf::as_percent(rep.pq_st), out_path.c_str());
  return 0;
}

int cmd_infer(const CommonOpts& common, const std::string& ck_path, const std::string& in_path,
              const std::string& out_path) {
  dqf::nn::Checkpoint ck = dqf::nn::load_checkpoint(ck_path);
  dqf::RunConfig cfg = dqf::checkpoint_config(ck, parse_sets(common));
  dqf::LabelTaxonomy tax = cfg.taxonomy();
  dqf::Model model(cfg);
  dqf::nn::restore_params(model.param_store(), ck);
  dqf::LabeledPointCloud cloud = dqf::read_cloud(in_path);
  if (cloud.n_things != tax.n_things() || cloud.n_stuff != tax.n_stuff())
    throw dqf::ValidationError("taxonomy mismatch between checkpoint and " + in_path);
  dqf::InferenceResult res = dqf::infer_scene(model, cfg, tax, cloud);
  dqf::write_panoptic(cloud, res.pred, out_path);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LiDAR panoptic segmentation pipeline"};
  app.require_subcommand(1);

  CommonOpts c_synth, c_train, c_eval, c_infer;
  int synth_count = 16;
  std::string synth_out = "data";
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth, c_synth);
  synth->add_option("--count", synth_count, "number of scenes");
  synth->add_option("--out", synth_out, "output directory")->required();

  std::string train_manifest, train_out = "run", train_resume;
  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, c_train);
  train->add_option("--manifest", train_manifest, "dataset manifest.json")->required();
  train->add_option("--out", train_out, "output directory");
  train->add_option("--resume", train_resume, "checkpoint to resume from");

  std::string eval_ck, eval_manifest, eval_out = "report.json";
  bool eval_plots = false;
  int eval_block = -1;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, c_eval);
  eval->add_option("--checkpoint", eval_ck, "checkpoint file")->required();
  eval->add_option("--manifest", eval_manifest, "dataset manifest.json")->required();
  eval->add_option("--out", eval_out, "report JSON path");
  eval->add_option("--block", eval_block, "decoder block to evaluate (-1 = last)");
  eval->add_flag("--plots", eval_plots, "emit per-level heatmap images");

  std::string infer_ck, infer_in, infer_out = "out.dqpr";
  auto* infer = app.add_subcommand("infer", "run inference on one cloud");
  add_common(infer, c_infer);
  infer->add_option("--checkpoint", infer_ck, "checkpoint file")->required();
  infer->add_option("--input", infer_in, "input .dqpc file")->required();
  infer->add_option("--out", infer_out, "output .dqpr path");

  try {
    app.parse(argc, argv);
    if (*synth) return cmd_synth(c_synth, synth_count, synth_out);
    if (*train) return cmd_train(c_train, train_manifest, train_out, train_resume);
    if (*eval) return cmd_eval(c_eval, eval_ck, eval_manifest, eval_out, eval_plots, eval_block);
    if (*infer) return cmd_infer(c_infer, infer_ck, infer_in, infer_out);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const dqf::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const dqf::ContractError& e) {
    std::cerr << "contract error: " << e.what() << "\n";
    return 2;
  } catch (const dqf::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const dqf::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 3;
  } catch (const dqf::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
