#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "tokenplan/armodel.hpp"
#include "tokenplan/bevq.hpp"
#include "tokenplan/kinematics.hpp"
#include "tokenplan/posttune.hpp"
#include "tokenplan/rl.hpp"
#include "tokenplan/simworld.hpp"
#include "tokenplan/tokenize.hpp"

namespace py = pybind11;
using namespace tokenplan;

PYBIND11_MODULE(_core, m) {
  m.doc() = "Discrete-token trajectory planning stack (C++ core)";

  // kinematics
  py::class_<kin::EgoState>(m, "EgoState")
      .def(py::init<>())
      .def(py::init([](double x, double y, double yaw) { return kin::EgoState{x, y, yaw}; }),
           py::arg("x"), py::arg("y"), py::arg("yaw"))
      .def_readwrite("x", &kin::EgoState::x)
      .def_readwrite("y", &kin::EgoState::y)
      .def_readwrite("yaw", &kin::EgoState::yaw);
  py::class_<kin::KaPoint>(m, "KaPoint")
      .def(py::init<>())
      .def(py::init([](double kappa, double a) { return kin::KaPoint{kappa, a}; }),
           py::arg("kappa"), py::arg("a"))
      .def_readwrite("kappa", &kin::KaPoint::kappa)
      .def_readwrite("a", &kin::KaPoint::a);
  py::class_<kin::RateSample>(m, "RateSample")
      .def_readonly("v", &kin::RateSample::v)
      .def_readonly("omega", &kin::RateSample::omega)
      .def_readonly("alpha", &kin::RateSample::alpha)
      .def_readonly("delta_a", &kin::RateSample::delta_a);
  m.def("wrap_angle", &kin::wrap_angle, py::arg("theta"));
  m.def("states_to_ka", &kin::states_to_ka, py::arg("states"), py::arg("dt"),
        py::arg("eps") = kin::kDefaultEps);
  m.def("ka_rollout", &kin::ka_rollout, py::arg("start"), py::arg("v0"), py::arg("ka"),
        py::arg("dt"));
  m.def("finite_diff_rates", &kin::finite_diff_rates, py::arg("states"), py::arg("dt"));

  // tokenize
  py::class_<tok::UniformGrid>(m, "UniformGrid")
      .def_static("make", &tok::UniformGrid::make, py::arg("lo"), py::arg("hi"), py::arg("step"))
      .def_readonly("lo", &tok::UniformGrid::lo)
      .def_readonly("hi", &tok::UniformGrid::hi)
      .def_readonly("step", &tok::UniformGrid::step)
      .def_readonly("bins", &tok::UniformGrid::bins)
      .def("quantize", &tok::UniformGrid::quantize)
      .def("dequantize", &tok::UniformGrid::dequantize);
  py::class_<tok::KaGridConfig>(m, "KaGridConfig")
      .def(py::init([](tok::UniformGrid k, tok::UniformGrid a) {
             return tok::KaGridConfig{k, a};
           }),
           py::arg("kappa_grid"), py::arg("a_grid"))
      .def_readonly("kappa_grid", &tok::KaGridConfig::kappa_grid)
      .def_readonly("a_grid", &tok::KaGridConfig::a_grid)
      .def("codebook_size", &tok::KaGridConfig::codebook_size);
  py::class_<tok::XyGridConfig>(m, "XyGridConfig")
      .def("codebook_size", &tok::XyGridConfig::codebook_size);
  py::class_<tok::DctConfig>(m, "DctConfig").def("codebook_size", &tok::DctConfig::codebook_size);
  m.def("ka_fb_config", &tok::ka_fb_config, py::arg("variant"));
  m.def("xy_fb_config", &tok::xy_fb_config, py::arg("variant"));
  m.def("dct_xy_config", &tok::dct_xy_config, py::arg("variant"), py::arg("horizon"));
  m.def("dct_ka_config", &tok::dct_ka_config, py::arg("variant"), py::arg("horizon"));
  m.def("pack_token",
        [](int i_kappa, int i_a, int a_bins, int kappa_bins) {
          return tok::pack_token(i_kappa, i_a, a_bins, kappa_bins).value;
        },
        py::arg("i_kappa"), py::arg("i_a"), py::arg("a_bins"), py::arg("kappa_bins"));
  m.def("unpack_token",
        [](int value, int a_bins, int kappa_bins) {
          return tok::unpack_token(tok::TrajTokenId{value}, a_bins, kappa_bins);
        },
        py::arg("value"), py::arg("a_bins"), py::arg("kappa_bins"));
  m.def("ka_tokenize",
        [](const std::vector<kin::EgoState>& states, double dt, const tok::KaGridConfig& cfg,
           double eps) {
          std::vector<int> out;
          for (const tok::TrajTokenId& t : tok::ka_tokenize(states, dt, cfg, eps)) {
            out.push_back(t.value);
          }
          return out;
        },
        py::arg("states"), py::arg("dt"), py::arg("config"), py::arg("eps") = kin::kDefaultEps);
  m.def("ka_detokenize",
        [](const std::vector<int>& tokens, const kin::EgoState& start, double v0, double dt,
           const tok::KaGridConfig& cfg) {
          std::vector<tok::TrajTokenId> ids;
          for (int t : tokens) ids.push_back(tok::TrajTokenId{t});
          return tok::ka_detokenize(ids, start, v0, dt, cfg);
        },
        py::arg("tokens"), py::arg("start"), py::arg("v0"), py::arg("dt"), py::arg("config"));
  m.def("dct_forward", &tok::dct_forward, py::arg("seq"));
  m.def("dct_inverse", &tok::dct_inverse, py::arg("coeffs"));
  m.def("dct_quantize", &tok::dct_quantize, py::arg("coeffs"), py::arg("q"), py::arg("levels"));
  m.def("dct_dequantize", &tok::dct_dequantize, py::arg("indices"), py::arg("q"));

  py::enum_<tok::Modality>(m, "Modality")
      .value("command", tok::Modality::command)
      .value("bev", tok::Modality::bev)
      .value("traj", tok::Modality::traj);
  py::class_<tok::VocabLayout>(m, "VocabLayout")
      .def(py::init([](int c, int b, int t) {
             return tok::VocabLayout{c, b, t};
           }),
           py::arg("n_command"), py::arg("n_bev"), py::arg("n_traj"))
      .def_readonly("n_command", &tok::VocabLayout::n_command)
      .def_readonly("n_bev", &tok::VocabLayout::n_bev)
      .def_readonly("n_traj", &tok::VocabLayout::n_traj)
      .def("total", &tok::VocabLayout::total);
  m.def("vocab_map", &tok::vocab_map, py::arg("layout"), py::arg("modality"), py::arg("local"));
  m.def("vocab_unmap", &tok::vocab_unmap, py::arg("layout"), py::arg("global_id"));

  // bevq
  py::class_<bevq::BevGrid>(m, "BevGrid")
      .def_static("filled", &bevq::BevGrid::filled, py::arg("height"), py::arg("width"),
                  py::arg("n_classes"), py::arg("resolution"), py::arg("value") = 0)
      .def_readonly("height", &bevq::BevGrid::height)
      .def_readonly("width", &bevq::BevGrid::width)
      .def_readonly("n_classes", &bevq::BevGrid::n_classes)
      .def("at", &bevq::BevGrid::at)
      .def("set", &bevq::BevGrid::set);
  py::class_<bevq::Codebook>(m, "Codebook")
      .def_readonly("k", &bevq::Codebook::k)
      .def_readonly("dim", &bevq::Codebook::dim);
  py::class_<bevq::BevTokenGrid>(m, "BevTokenGrid")
      .def_readonly("h", &bevq::BevTokenGrid::h)
      .def_readonly("w", &bevq::BevTokenGrid::w)
      .def_readonly("idx", &bevq::BevTokenGrid::idx);
  m.def("patchify", &bevq::patchify, py::arg("grid"), py::arg("patch_h"), py::arg("patch_w"));
  m.def("fit_codebook", &bevq::fit_codebook, py::arg("vectors"), py::arg("k"), py::arg("seed"),
        py::arg("patch_h"), py::arg("patch_w"), py::arg("n_classes"), py::arg("max_iters") = 25);
  m.def("bev_encode", &bevq::encode, py::arg("grid"), py::arg("codebook"));
  m.def("bev_decode", &bevq::decode, py::arg("tokens"), py::arg("codebook"),
        py::arg("resolution"));
  m.def("recon_accuracy", &bevq::recon_accuracy, py::arg("a"), py::arg("b"));

  // rewards and PDMS
  m.def("reward_centerline", &rl::reward_centerline, py::arg("d_ctr"), py::arg("sigma_ctr"));
  m.def("reward_clearance", &rl::reward_clearance, py::arg("d_clr"), py::arg("sigma_clr"));
  m.def("reward_comfort",
        [](double delta_a, double alpha, double v, double lambda_da, double lambda_alpha,
           double eps_spd) {
          rl::RewardWeights w;
          w.lambda_da = lambda_da;
          w.lambda_alpha = lambda_alpha;
          w.eps_spd = eps_spd;
          return rl::reward_comfort(delta_a, alpha, v, w);
        },
        py::arg("delta_a"), py::arg("alpha"), py::arg("v"), py::arg("lambda_da") = 0.1,
        py::arg("lambda_alpha") = 0.1, py::arg("eps_spd") = 0.3);
  m.def("pdms", &sim::pdms, py::arg("nc"), py::arg("dac"), py::arg("ttc"), py::arg("c"),
        py::arg("ep"));

  // posttune
  m.def("solve_lateral", &post::solve_lateral, py::arg("gap"), py::arg("w1"), py::arg("w2"));
  m.def("solve_longitudinal", &post::solve_longitudinal, py::arg("s_raw"), py::arg("w1"),
        py::arg("w2"));
  m.def("isotonic_non_decreasing", &post::isotonic_non_decreasing, py::arg("values"));
  m.def("recompute_yaw",
        [](const std::vector<std::pair<double, double>>& xy, double rate_limit) {
          std::vector<geom::Vec2> pts;
          for (const auto& p : xy) pts.push_back(geom::Vec2{p.first, p.second});
          return post::recompute_yaw(pts, rate_limit);
        },
        py::arg("xy"), py::arg("rate_limit"));

  // simworld
  py::enum_<sim::Difficulty>(m, "Difficulty")
      .value("straight", sim::Difficulty::straight)
      .value("easy", sim::Difficulty::easy)
      .value("medium", sim::Difficulty::medium)
      .value("hard", sim::Difficulty::hard);
  py::class_<sim::Scene>(m, "Scene")
      .def_readonly("seed", &sim::Scene::seed)
      .def_readonly("command", &sim::Scene::command)
      .def_readonly("route_length", &sim::Scene::route_length)
      .def_readonly("lane_half_width", &sim::Scene::lane_half_width)
      .def_property_readonly("n_obstacles",
                             [](const sim::Scene& s) { return s.obstacles.size(); })
      .def_property_readonly("n_agents", [](const sim::Scene& s) { return s.agents.size(); });
  m.def("build_scene", &sim::build_scene, py::arg("seed"), py::arg("difficulty"));
  m.def("rasterize_bev",
        [](const sim::Scene& scene, const kin::EgoState& ego, double time, int grid,
           double resolution, double lane_band) {
          sim::BevParams params;
          params.grid = grid;
          params.resolution = resolution;
          params.lane_band = lane_band;
          return sim::rasterize_bev(scene, ego, time, params);
        },
        py::arg("scene"), py::arg("ego"), py::arg("time"), py::arg("grid") = 64,
        py::arg("resolution") = 0.5, py::arg("lane_band") = 0.3);
  m.def("scene_distances",
        [](const sim::Scene& s, const kin::EgoState& ego, double time) {
          return sim::distances(s, ego, time);
        },
        py::arg("scene"), py::arg("ego"), py::arg("time") = 0.0);

  // armodel (compact surface: config, init, forward shapes, generation)
  py::class_<ar::ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("d_model", &ar::ModelConfig::d_model)
      .def_readwrite("n_layers", &ar::ModelConfig::n_layers)
      .def_readwrite("n_heads", &ar::ModelConfig::n_heads)
      .def_readwrite("n_experts", &ar::ModelConfig::n_experts)
      .def_readwrite("top_k", &ar::ModelConfig::top_k)
      .def_readwrite("d_ff", &ar::ModelConfig::d_ff)
      .def_readwrite("vocab", &ar::ModelConfig::vocab)
      .def_readwrite("history_frames", &ar::ModelConfig::history_frames)
      .def_readwrite("bev_tokens_per_frame", &ar::ModelConfig::bev_tokens_per_frame)
      .def_readwrite("max_seq_len", &ar::ModelConfig::max_seq_len)
      .def_readwrite("seed", &ar::ModelConfig::seed);
  py::class_<ar::FrameTokens>(m, "FrameTokens")
      .def(py::init<>())
      .def_readwrite("bev_local", &ar::FrameTokens::bev_local)
      .def_readwrite("traj_local", &ar::FrameTokens::traj_local);
  py::class_<ar::TokenSequence>(m, "TokenSequence")
      .def_readonly("ids", &ar::TokenSequence::ids)
      .def("__len__", [](const ar::TokenSequence& s) { return s.size(); });
  m.def("assemble_sequence", &ar::assemble_sequence, py::arg("layout"), py::arg("command"),
        py::arg("frames"));
  m.def("assemble_context", &ar::assemble_context, py::arg("layout"), py::arg("command"),
        py::arg("past_frames"), py::arg("current_bev"));
  py::class_<ar::Model>(m, "Model")
      .def_property_readonly("n_params", &ar::Model::n_params)
      .def_property_readonly("config", [](const ar::Model& m_) { return m_.cfg; });
  m.def("init_model", &ar::init_model, py::arg("config"), py::arg("seed"));
  m.def("model_forward",
        [](const ar::Model& model, const ar::TokenSequence& seq) {
          return ar::forward(model, seq, nullptr);
        },
        py::arg("model"), py::arg("seq"));
  m.def("model_generate",
        [](const ar::Model& model, const ar::TokenSequence& ctx, int frames, bool greedy,
           double temperature, std::uint64_t seed) {
          if (greedy) {
            return ar::generate(model, ctx, frames, ar::GenMode::greedy, temperature, nullptr);
          }
          Rng rng(seed);
          return ar::generate(model, ctx, frames, ar::GenMode::sample, temperature, &rng);
        },
        py::arg("model"), py::arg("context"), py::arg("frames"), py::arg("greedy") = true,
        py::arg("temperature") = 1.0, py::arg("seed") = 0);

  // exceptions
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<SizeError>(m, "SizeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<SequenceError>(m, "SequenceError", PyExc_ValueError);
}
