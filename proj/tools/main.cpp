#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "tokenplan/commands.hpp"

namespace {

using tokenplan::cfg::RunConfig;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitValidation = 3;
constexpr int kExitIo = 4;
constexpr int kExitNumeric = 5;

struct GlobalFlags {
  std::string config_path;
  bool seed_set = false;
  std::uint64_t seed = 0;
  bool jobs_set = false;
  int jobs = 1;
  bool out_set = false;
  std::string out_dir;
};

RunConfig resolve_config(const GlobalFlags& g) {
  RunConfig c = g.config_path.empty() ? tokenplan::cfg::default_config()
                                      : tokenplan::cfg::load_config(g.config_path);
  if (g.seed_set) c.seed = g.seed;
  if (g.jobs_set) c.jobs = g.jobs;
  if (g.out_set) c.out_dir = g.out_dir;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tokenplan: discrete-token driving planner toolkit"};
  app.require_subcommand(1);

  GlobalFlags g;
  app.add_option("--config", g.config_path, "JSON config file");
  app.add_option("--seed", g.seed, "override the root seed")->each([&](const std::string&) {
    g.seed_set = true;
  });
  app.add_option("--jobs", g.jobs, "worker threads for evaluation")->each([&](const std::string&) {
    g.jobs_set = true;
  });
  app.add_option("--out", g.out_dir, "output directory")->each([&](const std::string&) {
    g.out_set = true;
  });

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic episode dataset");

  std::string dataset, ckpt_out, ckpt_in, mode = "open", csv_out, traj_in, difficulty = "easy";
  bool posttune_flag = false;
  std::uint64_t scene_seed = 0;

  CLI::App* train_bc = app.add_subcommand("train-bc", "stage-I behavior cloning");
  train_bc->add_option("--dataset", dataset, "dataset directory")->required();
  train_bc->add_option("--ckpt-out", ckpt_out, "checkpoint output path")->required();

  CLI::App* train_sacbc = app.add_subcommand("train-sacbc", "stage-II offline SAC-BC fine-tuning");
  train_sacbc->add_option("--dataset", dataset, "dataset directory")->required();
  train_sacbc->add_option("--ckpt-in", ckpt_in, "stage-I checkpoint")->required();
  train_sacbc->add_option("--ckpt-out", ckpt_out, "checkpoint output path")->required();

  CLI::App* eval = app.add_subcommand("eval", "open- or closed-loop evaluation");
  eval->add_option("--dataset", dataset, "dataset directory")->required();
  eval->add_option("--ckpt", ckpt_in, "checkpoint to evaluate")->required();
  eval->add_option("--mode", mode, "open|closed");
  eval->add_flag("--posttune", posttune_flag, "also score post-tuned trajectories");
  eval->add_option("--csv-out", csv_out, "metrics CSV path")->required();

  CLI::App* bench = app.add_subcommand("tok-bench", "trajectory tokenizer benchmark");
  bench->add_option("--csv-out", csv_out, "report CSV path")->required();

  CLI::App* pt = app.add_subcommand("posttune", "refine a trajectory file");
  pt->add_option("--traj-in", traj_in, "input CSV with x,y,yaw rows")->required();
  pt->add_option("--scene-seed", scene_seed, "seed of the scene providing lane evidence")
      ->required();
  pt->add_option("--difficulty", difficulty, "scene difficulty");
  pt->add_option("--csv-out", csv_out, "refined trajectory CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    const RunConfig c = resolve_config(g);
    if (gen->parsed()) {
      std::printf("dataset: %s\n", tokenplan::cmd::cmd_gen_data(c).c_str());
    } else if (train_bc->parsed()) {
      std::printf("checkpoint: %s\n",
                  tokenplan::cmd::cmd_train_bc(c, dataset, ckpt_out).c_str());
    } else if (train_sacbc->parsed()) {
      std::printf("checkpoint: %s\n",
                  tokenplan::cmd::cmd_train_sacbc(c, dataset, ckpt_in, ckpt_out).c_str());
    } else if (eval->parsed()) {
      std::printf("report: %s\n",
                  tokenplan::cmd::cmd_eval(c, dataset, ckpt_in, mode, posttune_flag, csv_out)
                      .c_str());
    } else if (bench->parsed()) {
      std::printf("report: %s\n", tokenplan::cmd::cmd_tok_bench(c, csv_out).c_str());
    } else if (pt->parsed()) {
      std::printf("refined: %s\n",
                  tokenplan::cmd::cmd_posttune(c, traj_in, scene_seed, difficulty, csv_out)
                      .c_str());
    }
  } catch (const tokenplan::UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const tokenplan::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const tokenplan::TrainingError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const tokenplan::ConfigError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return kExitValidation;
  }
  return kExitOk;
}
