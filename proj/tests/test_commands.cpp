#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "tokenplan/commands.hpp"
#include "tokenplan/common.hpp"

using namespace tokenplan;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

cfg::RunConfig small_config(const std::string& out_dir) {
  cfg::RunConfig c;
  c.seed = 21;
  c.out_dir = out_dir;
  c.sim.n_episodes = 6;
  c.sim.max_frames = 18;
  c.bev.grid = 32;
  c.bev.resolution = 1.0;
  c.bev.patch = 16;
  c.bev.codebook_k = 8;
  c.bev.fit_subsample = 400;
  c.model.d_model = 16;
  c.model.n_layers = 1;
  c.model.n_heads = 2;
  c.model.n_experts = 1;
  c.model.top_k = 1;
  c.model.d_ff = 24;
  c.model.history_frames = 1;
  c.model.max_seq_len = 128;
  c.train.batch_size = 2;
  c.train.epochs = 1;
  c.train.bc_epochs = 1;
  c.train.max_steps_per_epoch = 3;
  c.train.lr = 1e-3;
  c.sacbc.steps = 2;
  c.sacbc.batch_windows = 2;
  c.eval.n_scenes = 2;
  c.eval.closed_horizon_steps = 8;
  c.eval.anchor_stride = 20;
  c.bench.n_windows = 10;
  c.bench.schemes = {"identity", "fb-ka-B"};
  return c;
}

}  // namespace

TEST_CASE("config parsing rejects unknown keys and hashes canonically") {
  CHECK_THROWS_AS(cfg::config_from_json_text("{\"sedd\": 3}"), ConfigError);
  CHECK_THROWS_AS(cfg::config_from_json_text("{\"train\": {\"lrr\": 0.1}}"), ConfigError);
  CHECK_THROWS_AS(cfg::config_from_json_text("not json"), ConfigError);

  const cfg::RunConfig a = cfg::config_from_json_text("{\"seed\": 5}");
  CHECK(a.seed == 5);
  CHECK(a.train.lr == doctest::Approx(1e-4));  // defaults fill the rest

  const cfg::RunConfig b = cfg::config_from_json_text("{\"seed\": 5, \"train\": {\"lr\": 1e-4}}");
  CHECK(cfg::config_hash(a) == cfg::config_hash(b));  // explicit default hashes equal
  const cfg::RunConfig c = cfg::config_from_json_text("{\"seed\": 6}");
  CHECK(cfg::config_hash(a) != cfg::config_hash(c));

  // round trip through the canonical serialization
  const cfg::RunConfig d = cfg::config_from_json_text(cfg::config_to_json_text(a));
  CHECK(cfg::config_hash(d) == cfg::config_hash(a));
}

TEST_CASE("gen-data writes byte-identical datasets on reruns") {
  const fs::path tmp = fs::temp_directory_path() / "tokenplan_cmd_test";
  fs::remove_all(tmp);
  cfg::RunConfig c = small_config((tmp / "run1").string());
  const std::string d1 = cmd::cmd_gen_data(c);
  c.out_dir = (tmp / "run2").string();
  const std::string d2 = cmd::cmd_gen_data(c);

  for (const char* name : {"manifest.json", "codebook.bin", "ep_0000.txt", "ep_0005.txt"}) {
    CHECK(slurp(fs::path(d1) / name) == slurp(fs::path(d2) / name));
  }

  const cmd::DatasetInfo ds = cmd::load_dataset(d1);
  CHECK(ds.episodes.size() == 6);
  CHECK(ds.codebook.k == 8);
  CHECK(ds.config_hash == cfg::config_hash(c));

  SUBCASE("an empty dataset still produces a valid manifest") {
    cfg::RunConfig empty = c;
    empty.out_dir = (tmp / "empty").string();
    empty.sim.n_episodes = 0;
    const std::string d = cmd::cmd_gen_data(empty);
    const cmd::DatasetInfo eds = cmd::load_dataset(d);
    CHECK(eds.episodes.empty());
  }

  SUBCASE("windows and transition windows have coherent shapes") {
    const cmd::BcWindows w = cmd::build_bc_windows(ds, c);
    CHECK_FALSE(w.train.empty());
    CHECK_FALSE(w.holdout.empty());
    const int frame_tokens = cfg::bev_tokens_per_frame(c) + 1;
    const int expect_len =
        1 + (c.model.history_frames + 1 + c.train.n_step) * frame_tokens;
    for (const ar::TokenSequence& seq : w.train) {
      CHECK(seq.size() == static_cast<std::size_t>(expect_len));
    }
    const auto tw = cmd::build_transition_windows(ds, c);
    CHECK_FALSE(tw.empty());
    for (const rl::TransitionWindow& t : tw) {
      CHECK(t.decision_pos.size() == t.action_local.size() + 1);
      CHECK(t.action_local.size() == static_cast<std::size_t>(c.train.n_step));
      for (std::size_t k = 0; k < t.action_local.size(); ++k) {
        // decision position is the token right before A_t
        const int pos = t.decision_pos[k];
        CHECK(t.seq.modality[pos + 1] == tok::Modality::traj);
        CHECK(t.seq.ids[pos + 1] ==
              cfg::vocab_layout(c).traj_offset() + t.action_local[k]);
      }
    }
  }

  SUBCASE("io failure carries the path") {
    cfg::RunConfig bad = c;
    bad.out_dir = "/proc/definitely/not/writable";
    CHECK_THROWS_AS(cmd::cmd_gen_data(bad), IoError);
  }

  fs::remove_all(tmp);
}

TEST_CASE("training smoke: checkpoint, log and resume exactness") {
  const fs::path tmp = fs::temp_directory_path() / "tokenplan_train_test";
  fs::remove_all(tmp);
  cfg::RunConfig c = small_config((tmp / "run").string());
  c.train.epochs = 2;
  c.train.bc_epochs = 2;
  const std::string dataset = cmd::cmd_gen_data(c);
  const cmd::DatasetInfo ds = cmd::load_dataset(dataset);

  SUBCASE("cmd_train_bc writes a loadable checkpoint and a log") {
    const std::string ckpt = (tmp / "bc.ckpt").string();
    cmd::cmd_train_bc(c, dataset, ckpt);
    const ar::Checkpoint ck = ar::load_checkpoint(ckpt);
    CHECK(ck.config_hash == cfg::config_hash(c));
    CHECK(ck.step_count == 2);  // completed epochs
    const std::string log = slurp(ckpt + ".log.csv");
    CHECK(log.find("step,total,l_traj,l_bev,p,grad_norm") != std::string::npos);
  }

  SUBCASE("resume reproduces the uninterrupted run exactly") {
    std::vector<ar::StepRecord> log_full;
    cmd::TrainState full;
    full.model = ar::init_model(cfg::model_config(c), c.seed);
    full = cmd::train_bc_epochs(c, ds, std::move(full), 2, &log_full);

    std::vector<ar::StepRecord> log_a;
    cmd::TrainState part;
    part.model = ar::init_model(cfg::model_config(c), c.seed);
    part = cmd::train_bc_epochs(c, ds, std::move(part), 1, &log_a);
    part = cmd::train_bc_epochs(c, ds, std::move(part), 2, &log_a);

    CHECK(part.model.p.value == full.model.p.value);  // bit-exact
    REQUIRE(log_a.size() == log_full.size());
    for (std::size_t i = 0; i < log_a.size(); ++i) {
      CHECK(log_a[i].total == log_full[i].total);
    }
  }

  SUBCASE("lambda_bev = 0 zeroes the BEV loss column") {
    cfg::RunConfig nb = c;
    nb.train.lambda_bev = 0.0;
    std::vector<ar::StepRecord> log;
    cmd::train_bc_model(nb, ds, &log);
    for (const ar::StepRecord& r : log) {
      CHECK(r.l_bev == 0.0);
    }
  }

  SUBCASE("sacbc smoke run and eval CSVs") {
    const std::string ckpt = (tmp / "bc.ckpt").string();
    cmd::cmd_train_bc(c, dataset, ckpt);
    const std::string ckpt2 = (tmp / "sacbc.ckpt").string();
    cmd::cmd_train_sacbc(c, dataset, ckpt, ckpt2);
    CHECK(fs::exists(ckpt2));

    const std::string open_csv = (tmp / "open.csv").string();
    cmd::cmd_eval(c, dataset, ckpt2, "open", false, open_csv);
    const std::string open_txt = slurp(open_csv);
    CHECK(open_txt.find("config_hash=" + cfg::config_hash(c)) != std::string::npos);
    CHECK(open_txt.find("horizon_s,ade_raw_m") != std::string::npos);

    const std::string closed_csv = (tmp / "closed.csv").string();
    cmd::cmd_eval(c, dataset, ckpt2, "closed", false, closed_csv);
    CHECK(slurp(closed_csv).find("scene,nc,dac") != std::string::npos);

    CHECK_THROWS_AS(cmd::cmd_eval(c, dataset, ckpt2, "sideways", false, closed_csv), UsageError);
  }

  fs::remove_all(tmp);
}

TEST_CASE("tokenizer benchmark command") {
  const fs::path tmp = fs::temp_directory_path() / "tokenplan_bench_test";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  cfg::RunConfig c = small_config((tmp).string());

  const std::string csv_path = (tmp / "bench.csv").string();
  cmd::cmd_tok_bench(c, csv_path);
  const std::string csv = slurp(csv_path);
  CHECK(csv.find("scheme,config,codebook_size,horizon_s,ade_m,fde_m,ahe_rad,ci_level,ci_lo,ci_hi") !=
        std::string::npos);
  CHECK(csv.find("identity,-,0") != std::string::npos);
  CHECK(csv.find("fb-ka,B,3648") != std::string::npos);

  SUBCASE("identity rows report zero error") {
    std::istringstream ss(csv);
    std::string line;
    bool saw_identity = false;
    while (std::getline(ss, line)) {
      if (line.rfind("identity,", 0) == 0) {
        saw_identity = true;
        // ade field is the 5th column
        std::size_t pos = 0;
        for (int i = 0; i < 4; ++i) pos = line.find(',', pos) + 1;
        CHECK(line.substr(pos, line.find(',', pos) - pos) == "0");
      }
    }
    CHECK(saw_identity);
  }

  SUBCASE("unknown schemes are usage errors") {
    cfg::RunConfig bad = c;
    bad.bench.schemes = {"fb-zzz-A"};
    CHECK_THROWS_AS(cmd::cmd_tok_bench(bad, (tmp / "bad.csv").string()), UsageError);
  }

  fs::remove_all(tmp);
}

TEST_CASE("posttune command refines a trajectory file") {
  const fs::path tmp = fs::temp_directory_path() / "tokenplan_pt_test";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  cfg::RunConfig c = small_config(tmp.string());

  // laterally offset zig-zag near the straight scene's centerline
  const std::string in_path = (tmp / "traj.csv").string();
  {
    std::ofstream f(in_path);
    f << "x,y,yaw\n";
    for (int i = 0; i < 12; ++i) {
      f << (2.0 + 2.0 * i) << ',' << (1.0 + ((i % 2 == 0) ? 0.3 : -0.3)) << ",0\n";
    }
  }
  const std::string out_path = (tmp / "refined.csv").string();
  cmd::cmd_posttune(c, in_path, 3, "straight", out_path);
  const std::string out = slurp(out_path);
  CHECK(out.find("lateral_objective=") != std::string::npos);
  CHECK(out.find("x,y,yaw") != std::string::npos);

  // the smooth lateral offset is removed; the refined path hugs the lane
  std::istringstream ss(out);
  std::string line;
  double max_abs_y = 0.0;
  while (std::getline(ss, line)) {
    if (line.empty() || line[0] == '#' || line[0] == 'x') continue;
    const std::size_t c1 = line.find(',');
    const std::size_t c2 = line.find(',', c1 + 1);
    max_abs_y = std::max(max_abs_y, std::abs(std::stod(line.substr(c1 + 1, c2 - c1 - 1))));
  }
  CHECK(max_abs_y < 0.6);  // input peaks at 1.3

  CHECK_THROWS_AS(cmd::cmd_posttune(c, (tmp / "missing.csv").string(), 3, "straight", out_path),
                  IoError);
  fs::remove_all(tmp);
}
