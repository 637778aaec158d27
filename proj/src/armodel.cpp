#include "tokenplan/armodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "tokenplan/nnops.hpp"

namespace tokenplan::ar {

namespace {

using nn::gelu;
using nn::gelu_grad;
using nn::linear_fwd;
using nn::linear_bwd;
using nn::layernorm_fwd;
using nn::layernorm_bwd;
using nn::softmax_inplace;

double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

// ---------------------------------------------------------------------------
// Token sequences

void TokenSequence::push(std::int32_t id, Modality m, std::int32_t f) {
  ids.push_back(id);
  modality.push_back(m);
  frame.push_back(f);
}

void TokenSequence::validate(const VocabLayout& layout, int bev_per_frame,
                             bool allow_partial) const {
  if (ids.size() != modality.size() || ids.size() != frame.size()) {
    throw SequenceError("TokenSequence: parallel arrays disagree");
  }
  if (ids.empty() || modality[0] != Modality::command || frame[0] != -1) {
    throw SequenceError("TokenSequence: must begin with one command token");
  }
  auto check_range = [&](std::size_t pos, Modality m) {
    const int lo = layout.offset(m);
    if (ids[pos] < lo || ids[pos] >= lo + layout.size(m)) {
      throw SequenceError("TokenSequence: id outside its modality range");
    }
  };
  check_range(0, Modality::command);

  std::size_t pos = 1;
  int f = 0;
  while (pos < ids.size()) {
    int have_bev = 0;
    while (have_bev < bev_per_frame && pos < ids.size()) {
      if (modality[pos] != Modality::bev || frame[pos] != f) {
        throw SequenceError("TokenSequence: expected BEV token");
      }
      check_range(pos, Modality::bev);
      ++have_bev;
      ++pos;
    }
    if (have_bev < bev_per_frame) {
      throw SequenceError("TokenSequence: truncated BEV block");
    }
    if (pos == ids.size()) {
      if (!allow_partial) {
        throw SequenceError("TokenSequence: frame missing trajectory token");
      }
      return;
    }
    if (modality[pos] != Modality::traj || frame[pos] != f) {
      throw SequenceError("TokenSequence: expected trajectory token");
    }
    check_range(pos, Modality::traj);
    ++pos;
    ++f;
  }
}

TokenSequence assemble_sequence(const VocabLayout& layout, int command_local,
                                const std::vector<FrameTokens>& frames) {
  TokenSequence seq;
  seq.push(vocab_map(layout, Modality::command, command_local), Modality::command, -1);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    for (int b : frames[f].bev_local) {
      seq.push(vocab_map(layout, Modality::bev, b), Modality::bev, static_cast<int>(f));
    }
    seq.push(vocab_map(layout, Modality::traj, frames[f].traj_local), Modality::traj,
             static_cast<int>(f));
  }
  return seq;
}

TokenSequence assemble_context(const VocabLayout& layout, int command_local,
                               const std::vector<FrameTokens>& past_frames,
                               const std::vector<int>& current_bev) {
  TokenSequence seq = assemble_sequence(layout, command_local, past_frames);
  const int f = static_cast<int>(past_frames.size());
  for (int b : current_bev) {
    seq.push(vocab_map(layout, Modality::bev, b), Modality::bev, f);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Model setup

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0) {
    throw ConfigError("ModelConfig: dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("ModelConfig: d_model must be divisible by n_heads");
  }
  if (top_k < 1 || top_k > n_experts) {
    throw ConfigError("ModelConfig: need 1 <= top_k <= n_experts");
  }
  if (vocab.n_command < 1 || vocab.n_traj < 1 || vocab.n_bev < 0) {
    throw ConfigError("ModelConfig: vocabulary ranges invalid");
  }
  if (history_frames < 0 || bev_tokens_per_frame < 0) {
    throw ConfigError("ModelConfig: negative sequence geometry");
  }
  if (max_seq_len < 1 + (history_frames + 1) * frame_tokens()) {
    throw ConfigError("ModelConfig: max_seq_len below one full context");
  }
}

std::size_t ParamStore::add(const std::string& name, int rows, int cols) {
  const std::size_t off = value.size();
  tensors.push_back(TensorView{name, off, rows, cols});
  value.resize(off + static_cast<std::size_t>(rows) * cols, 0.0);
  return off;
}

void ParamStore::zero_grad() {
  grad.assign(value.size(), 0.0);
}

double ParamStore::grad_global_norm() const {
  double acc = 0.0;
  for (double g : grad) acc += g * g;
  return std::sqrt(acc);
}

Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  const int d = cfg.d_model;
  const int v = cfg.vocab.total();

  m.wte = m.p.add("wte", v, d);
  m.wpe = m.p.add("wpe", cfg.max_seq_len, d);
  m.wtype = m.p.add("wtype", 3, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    Model::LayerOffsets lo;
    const std::string pre = "layer" + std::to_string(l) + ".";
    lo.ln1_g = m.p.add(pre + "ln1_g", 1, d);
    lo.ln1_b = m.p.add(pre + "ln1_b", 1, d);
    lo.w_qkv = m.p.add(pre + "w_qkv", 3 * d, d);
    lo.b_qkv = m.p.add(pre + "b_qkv", 1, 3 * d);
    lo.w_o = m.p.add(pre + "w_o", d, d);
    lo.b_o = m.p.add(pre + "b_o", 1, d);
    lo.ln2_g = m.p.add(pre + "ln2_g", 1, d);
    lo.ln2_b = m.p.add(pre + "ln2_b", 1, d);
    lo.w_gate = m.p.add(pre + "w_gate", cfg.n_experts, d);
    lo.b_gate = m.p.add(pre + "b_gate", 1, cfg.n_experts);
    for (int e = 0; e < cfg.n_experts; ++e) {
      Model::ExpertOffsets eo;
      const std::string epre = pre + "expert" + std::to_string(e) + ".";
      eo.w1 = m.p.add(epre + "w1", cfg.d_ff, d);
      eo.b1 = m.p.add(epre + "b1", 1, cfg.d_ff);
      eo.w2 = m.p.add(epre + "w2", d, cfg.d_ff);
      eo.b2 = m.p.add(epre + "b2", 1, d);
      lo.experts.push_back(eo);
    }
    m.layers.push_back(std::move(lo));
  }
  m.lnf_g = m.p.add("lnf_g", 1, d);
  m.lnf_b = m.p.add("lnf_b", 1, d);
  m.w_out = m.p.add("w_out", v, d);

  Rng rng(substream_seed(seed, "init"));
  std::normal_distribution<double> normal(0.0, 0.02);
  for (const TensorView& t : m.p.tensors) {
    double* data = m.p.value.data() + t.offset;
    const std::size_t dotpos = t.name.rfind('.');
    const std::string leaf = dotpos == std::string::npos ? t.name : t.name.substr(dotpos + 1);
    if (leaf.size() >= 2 && leaf.substr(leaf.size() - 2) == "_g") {
      std::fill(data, data + t.size(), 1.0);  // layernorm gains
    } else if (leaf[0] == 'b' || (leaf.size() >= 2 && leaf.substr(leaf.size() - 2) == "_b")) {
      std::fill(data, data + t.size(), 0.0);  // biases and layernorm shifts
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) data[i] = normal(rng);
    }
  }
  m.p.zero_grad();
  return m;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct MoeSelection {
  // top_k expert indices ordered by (prob desc, index asc)
  static void select(const double* probs, int n_experts, int top_k, int* out) {
    std::vector<int> order(n_experts);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      if (probs[a] != probs[b]) return probs[a] > probs[b];
      return a < b;
    });
    std::copy(order.begin(), order.begin() + top_k, out);
  }
};

void resize_cache(ForwardCache& c, const ModelConfig& cfg, int t_len) {
  const int d = cfg.d_model;
  c.seq_len = t_len;
  c.x0.assign(static_cast<std::size_t>(t_len) * d, 0.0);
  c.layers.resize(cfg.n_layers);
  for (auto& lc : c.layers) {
    lc.ln1_out.assign(static_cast<std::size_t>(t_len) * d, 0.0);
    lc.ln1_mean.assign(t_len, 0.0);
    lc.ln1_rstd.assign(t_len, 0.0);
    lc.qkv.assign(static_cast<std::size_t>(t_len) * 3 * d, 0.0);
    lc.att_probs.assign(static_cast<std::size_t>(cfg.n_heads) * t_len * t_len, 0.0);
    lc.att_ctx.assign(static_cast<std::size_t>(t_len) * d, 0.0);
    lc.res1.assign(static_cast<std::size_t>(t_len) * d, 0.0);
    lc.ln2_out.assign(static_cast<std::size_t>(t_len) * d, 0.0);
    lc.ln2_mean.assign(t_len, 0.0);
    lc.ln2_rstd.assign(t_len, 0.0);
    lc.gate_logits.assign(static_cast<std::size_t>(t_len) * cfg.n_experts, 0.0);
    lc.gate_probs.assign(static_cast<std::size_t>(t_len) * cfg.n_experts, 0.0);
    lc.sel.assign(static_cast<std::size_t>(t_len) * cfg.top_k, 0);
    lc.sel_w.assign(static_cast<std::size_t>(t_len) * cfg.top_k, 0.0);
    lc.expert_pre.assign(static_cast<std::size_t>(t_len) * cfg.top_k * cfg.d_ff, 0.0);
    lc.expert_act.assign(static_cast<std::size_t>(t_len) * cfg.top_k * cfg.d_ff, 0.0);
    lc.expert_out.assign(static_cast<std::size_t>(t_len) * cfg.top_k * d, 0.0);
    lc.res2.assign(static_cast<std::size_t>(t_len) * d, 0.0);
  }
  c.lnf_out.assign(static_cast<std::size_t>(t_len) * d, 0.0);
  c.lnf_mean.assign(t_len, 0.0);
  c.lnf_rstd.assign(t_len, 0.0);
}

}  // namespace

std::vector<double> forward(const Model& model, const TokenSequence& seq, ForwardCache* cache) {
  const ModelConfig& cfg = model.cfg;
  seq.validate(cfg.vocab, cfg.bev_tokens_per_frame, /*allow_partial=*/true);
  const int t_len = static_cast<int>(seq.size());
  if (t_len > cfg.max_seq_len) {
    throw SequenceError("forward: sequence exceeds max length");
  }
  const int d = cfg.d_model;
  const int hs = d / cfg.n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hs));
  const double* pv = model.p.value.data();

  ForwardCache local;
  ForwardCache& c = cache != nullptr ? *cache : local;
  resize_cache(c, cfg, t_len);

  for (int t = 0; t < t_len; ++t) {
    const double* te = pv + model.wte + static_cast<std::size_t>(seq.ids[t]) * d;
    const double* pe = pv + model.wpe + static_cast<std::size_t>(t) * d;
    const double* ye = pv + model.wtype + static_cast<std::size_t>(static_cast<int>(seq.modality[t])) * d;
    double* x = c.x0.data() + static_cast<std::size_t>(t) * d;
    for (int i = 0; i < d; ++i) x[i] = te[i] + pe[i] + ye[i];
  }

  const std::vector<double>* x_in = &c.x0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Model::LayerOffsets& lo = model.layers[l];
    ForwardCache::LayerCache& lc = c.layers[l];

    for (int t = 0; t < t_len; ++t) {
      layernorm_fwd(pv + lo.ln1_g, pv + lo.ln1_b, x_in->data() + static_cast<std::size_t>(t) * d,
                    lc.ln1_out.data() + static_cast<std::size_t>(t) * d, &lc.ln1_mean[t],
                    &lc.ln1_rstd[t], d);
      linear_fwd(pv + lo.w_qkv, pv + lo.b_qkv,
                 lc.ln1_out.data() + static_cast<std::size_t>(t) * d,
                 lc.qkv.data() + static_cast<std::size_t>(t) * 3 * d, 3 * d, d);
    }

    for (int h = 0; h < cfg.n_heads; ++h) {
      double* probs_h = lc.att_probs.data() + static_cast<std::size_t>(h) * t_len * t_len;
      for (int t = 0; t < t_len; ++t) {
        const double* q = lc.qkv.data() + static_cast<std::size_t>(t) * 3 * d + h * hs;
        double* row = probs_h + static_cast<std::size_t>(t) * t_len;
        for (int j = 0; j <= t; ++j) {
          const double* k = lc.qkv.data() + static_cast<std::size_t>(j) * 3 * d + d + h * hs;
          double acc = 0.0;
          for (int i = 0; i < hs; ++i) acc += q[i] * k[i];
          row[j] = acc * att_scale;
        }
        softmax_inplace(row, t + 1);
        double* ctx = lc.att_ctx.data() + static_cast<std::size_t>(t) * d + h * hs;
        std::fill(ctx, ctx + hs, 0.0);
        for (int j = 0; j <= t; ++j) {
          const double* v = lc.qkv.data() + static_cast<std::size_t>(j) * 3 * d + 2 * d + h * hs;
          const double pj = row[j];
          for (int i = 0; i < hs; ++i) ctx[i] += pj * v[i];
        }
      }
    }

    std::vector<double> proj(d);
    for (int t = 0; t < t_len; ++t) {
      linear_fwd(pv + lo.w_o, pv + lo.b_o, lc.att_ctx.data() + static_cast<std::size_t>(t) * d,
                 proj.data(), d, d);
      const double* xi = x_in->data() + static_cast<std::size_t>(t) * d;
      double* r1 = lc.res1.data() + static_cast<std::size_t>(t) * d;
      for (int i = 0; i < d; ++i) r1[i] = xi[i] + proj[i];
    }

    for (int t = 0; t < t_len; ++t) {
      const double* r1 = lc.res1.data() + static_cast<std::size_t>(t) * d;
      double* a = lc.ln2_out.data() + static_cast<std::size_t>(t) * d;
      layernorm_fwd(pv + lo.ln2_g, pv + lo.ln2_b, r1, a, &lc.ln2_mean[t], &lc.ln2_rstd[t], d);

      double* gl = lc.gate_logits.data() + static_cast<std::size_t>(t) * cfg.n_experts;
      linear_fwd(pv + lo.w_gate, pv + lo.b_gate, a, gl, cfg.n_experts, d);
      double* gp = lc.gate_probs.data() + static_cast<std::size_t>(t) * cfg.n_experts;
      std::copy(gl, gl + cfg.n_experts, gp);
      softmax_inplace(gp, cfg.n_experts);

      int* sel = lc.sel.data() + static_cast<std::size_t>(t) * cfg.top_k;
      MoeSelection::select(gp, cfg.n_experts, cfg.top_k, sel);
      double wsum = 0.0;
      for (int s = 0; s < cfg.top_k; ++s) wsum += gp[sel[s]];
      double* sw = lc.sel_w.data() + static_cast<std::size_t>(t) * cfg.top_k;
      for (int s = 0; s < cfg.top_k; ++s) sw[s] = gp[sel[s]] / wsum;

      double* r2 = lc.res2.data() + static_cast<std::size_t>(t) * d;
      std::copy(r1, r1 + d, r2);
      for (int s = 0; s < cfg.top_k; ++s) {
        const Model::ExpertOffsets& eo = lo.experts[sel[s]];
        double* pre = lc.expert_pre.data() + (static_cast<std::size_t>(t) * cfg.top_k + s) * cfg.d_ff;
        double* act = lc.expert_act.data() + (static_cast<std::size_t>(t) * cfg.top_k + s) * cfg.d_ff;
        double* eout = lc.expert_out.data() + (static_cast<std::size_t>(t) * cfg.top_k + s) * d;
        linear_fwd(pv + eo.w1, pv + eo.b1, a, pre, cfg.d_ff, d);
        for (int i = 0; i < cfg.d_ff; ++i) act[i] = gelu(pre[i]);
        linear_fwd(pv + eo.w2, pv + eo.b2, act, eout, d, cfg.d_ff);
        for (int i = 0; i < d; ++i) r2[i] += sw[s] * eout[i];
      }
    }
    x_in = &lc.res2;
  }

  for (int t = 0; t < t_len; ++t) {
    layernorm_fwd(pv + model.lnf_g, pv + model.lnf_b, x_in->data() + static_cast<std::size_t>(t) * d,
                  c.lnf_out.data() + static_cast<std::size_t>(t) * d, &c.lnf_mean[t],
                  &c.lnf_rstd[t], d);
  }

  const int v = cfg.vocab.total();
  std::vector<double> logits(static_cast<std::size_t>(t_len) * v);
  for (int t = 0; t < t_len; ++t) {
    linear_fwd(pv + model.w_out, nullptr, c.lnf_out.data() + static_cast<std::size_t>(t) * d,
               logits.data() + static_cast<std::size_t>(t) * v, v, d);
  }
  return logits;
}

const std::vector<double>& final_hidden(const ForwardCache& cache) { return cache.lnf_out; }

void backward_from_dlogits(Model& model, const TokenSequence& seq, const ForwardCache& cache,
                           const std::vector<double>& dlogits) {
  const ModelConfig& cfg = model.cfg;
  const int t_len = cache.seq_len;
  const int d = cfg.d_model;
  const int v = cfg.vocab.total();
  const int hs = d / cfg.n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hs));
  const double* pv = model.p.value.data();
  double* pg = model.p.grad.data();

  // head + final layernorm
  std::vector<double> dx(static_cast<std::size_t>(t_len) * d, 0.0);
  {
    std::vector<double> dlnf(static_cast<std::size_t>(t_len) * d, 0.0);
    for (int t = 0; t < t_len; ++t) {
      const double* drow = dlogits.data() + static_cast<std::size_t>(t) * v;
      linear_bwd(pv + model.w_out, cache.lnf_out.data() + static_cast<std::size_t>(t) * d, drow,
                 pg + model.w_out, nullptr, dlnf.data() + static_cast<std::size_t>(t) * d, v, d);
    }
    const std::vector<double>& x_last =
        cfg.n_layers > 0 ? cache.layers.back().res2 : cache.x0;
    for (int t = 0; t < t_len; ++t) {
      layernorm_bwd(pv + model.lnf_g, x_last.data() + static_cast<std::size_t>(t) * d,
                    cache.lnf_mean[t], cache.lnf_rstd[t],
                    dlnf.data() + static_cast<std::size_t>(t) * d, pg + model.lnf_g,
                    pg + model.lnf_b, dx.data() + static_cast<std::size_t>(t) * d, d);
    }
  }

  std::vector<double> da(d), dgate(cfg.n_experts), dprobs_sel(cfg.top_k);
  std::vector<double> dpre(cfg.d_ff), dact(cfg.d_ff), deout(d);
  std::vector<double> dr1(static_cast<std::size_t>(t_len) * d);
  std::vector<double> dctx(static_cast<std::size_t>(t_len) * d);
  std::vector<double> dqkv(static_cast<std::size_t>(t_len) * 3 * d);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const Model::LayerOffsets& lo = model.layers[l];
    const ForwardCache::LayerCache& lc = cache.layers[l];
    const std::vector<double>& x_in = l == 0 ? cache.x0 : cache.layers[l - 1].res2;

    // aux load-balance gradient shares the gate softmax backward below
    std::vector<double> f_frac;
    if (cfg.aux_load_balance > 0.0) {
      f_frac.assign(cfg.n_experts, 0.0);
      for (int t = 0; t < t_len; ++t) {
        f_frac[lc.sel[static_cast<std::size_t>(t) * cfg.top_k]] += 1.0 / t_len;
      }
    }

    std::fill(dr1.begin(), dr1.end(), 0.0);
    for (int t = 0; t < t_len; ++t) {
      const double* dres2 = dx.data() + static_cast<std::size_t>(t) * d;
      double* dr1_t = dr1.data() + static_cast<std::size_t>(t) * d;
      for (int i = 0; i < d; ++i) dr1_t[i] += dres2[i];  // residual path

      const double* a = lc.ln2_out.data() + static_cast<std::size_t>(t) * d;
      const int* sel = lc.sel.data() + static_cast<std::size_t>(t) * cfg.top_k;
      const double* sw = lc.sel_w.data() + static_cast<std::size_t>(t) * cfg.top_k;
      const double* gp = lc.gate_probs.data() + static_cast<std::size_t>(t) * cfg.n_experts;

      std::fill(da.begin(), da.end(), 0.0);
      double wsum = 0.0;
      for (int s = 0; s < cfg.top_k; ++s) wsum += gp[sel[s]];

      double dr_dot_r = 0.0;
      for (int s = 0; s < cfg.top_k; ++s) {
        const Model::ExpertOffsets& eo = lo.experts[sel[s]];
        const double* pre = lc.expert_pre.data() + (static_cast<std::size_t>(t) * cfg.top_k + s) * cfg.d_ff;
        const double* act = lc.expert_act.data() + (static_cast<std::size_t>(t) * cfg.top_k + s) * cfg.d_ff;
        const double* eout = lc.expert_out.data() + (static_cast<std::size_t>(t) * cfg.top_k + s) * d;

        double dr = 0.0;
        for (int i = 0; i < d; ++i) {
          deout[i] = sw[s] * dres2[i];
          dr += dres2[i] * eout[i];
        }
        dprobs_sel[s] = dr;
        dr_dot_r += dr * sw[s];

        std::fill(dact.begin(), dact.end(), 0.0);
        linear_bwd(pv + eo.w2, act, deout.data(), pg + eo.w2, pg + eo.b2, dact.data(), d, cfg.d_ff);
        for (int i = 0; i < cfg.d_ff; ++i) dpre[i] = dact[i] * gelu_grad(pre[i]);
        linear_bwd(pv + eo.w1, a, dpre.data(), pg + eo.w1, pg + eo.b1, da.data(), cfg.d_ff, d);
      }

      // renormalized weights -> gate probabilities -> gate logits
      double dp_dot_p = 0.0;
      std::fill(dgate.begin(), dgate.end(), 0.0);
      for (int s = 0; s < cfg.top_k; ++s) {
        dgate[sel[s]] = (dprobs_sel[s] - dr_dot_r) / wsum;  // dL/dp for selected
      }
      if (!f_frac.empty()) {
        for (int e = 0; e < cfg.n_experts; ++e) {
          dgate[e] += cfg.aux_load_balance * cfg.n_experts * f_frac[e] / t_len;
        }
      }
      for (int e = 0; e < cfg.n_experts; ++e) dp_dot_p += dgate[e] * gp[e];
      for (int e = 0; e < cfg.n_experts; ++e) {
        dgate[e] = gp[e] * (dgate[e] - dp_dot_p);  // softmax backward, now dL/dlogit
      }
      linear_bwd(pv + lo.w_gate, a, dgate.data(), pg + lo.w_gate, pg + lo.b_gate, da.data(),
                 cfg.n_experts, d);

      layernorm_bwd(pv + lo.ln2_g, lc.res1.data() + static_cast<std::size_t>(t) * d,
                    lc.ln2_mean[t], lc.ln2_rstd[t], da.data(), pg + lo.ln2_g, pg + lo.ln2_b,
                    dr1_t, d);
    }

    // attention projection backward
    std::fill(dctx.begin(), dctx.end(), 0.0);
    for (int t = 0; t < t_len; ++t) {
      linear_bwd(pv + lo.w_o, lc.att_ctx.data() + static_cast<std::size_t>(t) * d,
                 dr1.data() + static_cast<std::size_t>(t) * d, pg + lo.w_o, pg + lo.b_o,
                 dctx.data() + static_cast<std::size_t>(t) * d, d, d);
    }

    std::fill(dqkv.begin(), dqkv.end(), 0.0);
    std::vector<double> dp_row(t_len), ds_row(t_len);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const double* probs_h = lc.att_probs.data() + static_cast<std::size_t>(h) * t_len * t_len;
      for (int t = 0; t < t_len; ++t) {
        const double* row = probs_h + static_cast<std::size_t>(t) * t_len;
        const double* dctx_t = dctx.data() + static_cast<std::size_t>(t) * d + h * hs;
        double dot = 0.0;
        for (int j = 0; j <= t; ++j) {
          const double* vj = lc.qkv.data() + static_cast<std::size_t>(j) * 3 * d + 2 * d + h * hs;
          double acc = 0.0;
          for (int i = 0; i < hs; ++i) acc += dctx_t[i] * vj[i];
          dp_row[j] = acc;
          dot += acc * row[j];
          double* dvj = dqkv.data() + static_cast<std::size_t>(j) * 3 * d + 2 * d + h * hs;
          const double pj = row[j];
          for (int i = 0; i < hs; ++i) dvj[i] += pj * dctx_t[i];
        }
        const double* q = lc.qkv.data() + static_cast<std::size_t>(t) * 3 * d + h * hs;
        double* dq = dqkv.data() + static_cast<std::size_t>(t) * 3 * d + h * hs;
        for (int j = 0; j <= t; ++j) {
          ds_row[j] = row[j] * (dp_row[j] - dot) * att_scale;
          const double* kj = lc.qkv.data() + static_cast<std::size_t>(j) * 3 * d + d + h * hs;
          double* dkj = dqkv.data() + static_cast<std::size_t>(j) * 3 * d + d + h * hs;
          for (int i = 0; i < hs; ++i) {
            dq[i] += ds_row[j] * kj[i];
            dkj[i] += ds_row[j] * q[i];
          }
        }
      }
    }

    // back through qkv projection and first layernorm into the layer input
    std::fill(dx.begin(), dx.end(), 0.0);
    std::vector<double> dln1(d);
    for (int t = 0; t < t_len; ++t) {
      std::fill(dln1.begin(), dln1.end(), 0.0);
      linear_bwd(pv + lo.w_qkv, lc.ln1_out.data() + static_cast<std::size_t>(t) * d,
                 dqkv.data() + static_cast<std::size_t>(t) * 3 * d, pg + lo.w_qkv, pg + lo.b_qkv,
                 dln1.data(), 3 * d, d);
      double* dx_t = dx.data() + static_cast<std::size_t>(t) * d;
      const double* dr1_t = dr1.data() + static_cast<std::size_t>(t) * d;
      for (int i = 0; i < d; ++i) dx_t[i] += dr1_t[i];  // residual into layer input
      layernorm_bwd(pv + lo.ln1_g, x_in.data() + static_cast<std::size_t>(t) * d, lc.ln1_mean[t],
                    lc.ln1_rstd[t], dln1.data(), pg + lo.ln1_g, pg + lo.ln1_b, dx_t, d);
    }
  }

  // embeddings
  for (int t = 0; t < t_len; ++t) {
    const double* dx_t = dx.data() + static_cast<std::size_t>(t) * d;
    double* dte = pg + model.wte + static_cast<std::size_t>(seq.ids[t]) * d;
    double* dpe = pg + model.wpe + static_cast<std::size_t>(t) * d;
    double* dye = pg + model.wtype + static_cast<std::size_t>(static_cast<int>(seq.modality[t])) * d;
    for (int i = 0; i < d; ++i) {
      dte[i] += dx_t[i];
      dpe[i] += dx_t[i];
      dye[i] += dx_t[i];
    }
  }
}

std::vector<double> moe_ffn(const Model& model, int layer, const std::vector<double>& h) {
  const ModelConfig& cfg = model.cfg;
  if (layer < 0 || layer >= cfg.n_layers || static_cast<int>(h.size()) != cfg.d_model) {
    throw ConfigError("moe_ffn: bad layer or input dimension");
  }
  const Model::LayerOffsets& lo = model.layers[layer];
  const double* pv = model.p.value.data();

  std::vector<double> gate(cfg.n_experts);
  linear_fwd(pv + lo.w_gate, pv + lo.b_gate, h.data(), gate.data(), cfg.n_experts, cfg.d_model);
  softmax_inplace(gate.data(), cfg.n_experts);
  std::vector<int> sel(cfg.top_k);
  MoeSelection::select(gate.data(), cfg.n_experts, cfg.top_k, sel.data());
  double wsum = 0.0;
  for (int s : sel) wsum += gate[s];

  std::vector<double> out(cfg.d_model, 0.0), pre(cfg.d_ff), act(cfg.d_ff), eout(cfg.d_model);
  for (int s = 0; s < cfg.top_k; ++s) {
    const Model::ExpertOffsets& eo = lo.experts[sel[s]];
    linear_fwd(pv + eo.w1, pv + eo.b1, h.data(), pre.data(), cfg.d_ff, cfg.d_model);
    for (int i = 0; i < cfg.d_ff; ++i) act[i] = gelu(pre[i]);
    linear_fwd(pv + eo.w2, pv + eo.b2, act.data(), eout.data(), cfg.d_model, cfg.d_ff);
    const double w = gate[sel[s]] / wsum;
    for (int i = 0; i < cfg.d_model; ++i) out[i] += w * eout[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss and training

namespace {

int greedy_in_range(const double* logits_row, int offset, int count) {
  int best = 0;
  for (int i = 1; i < count; ++i) {
    if (logits_row[offset + i] > logits_row[offset + best]) best = i;
  }
  return offset + best;
}

}  // namespace

LossBreakdown joint_loss(Model& model, const std::vector<TokenSequence>& batch,
                         double lambda_traj, double lambda_bev, double p_mix, Rng& rng,
                         bool accumulate_grad) {
  if (batch.empty()) {
    throw SizeError("joint_loss: empty batch");
  }
  if (p_mix < 0.0 || p_mix > 1.0) {
    throw ConfigError("joint_loss: p must lie in [0,1]");
  }
  const VocabLayout& layout = model.cfg.vocab;
  const int v = layout.total();

  LossBreakdown lb;
  for (const TokenSequence& seq : batch) {
    for (std::size_t pos = 1; pos < seq.size(); ++pos) {
      if (seq.modality[pos] == Modality::bev) ++lb.n_bev;
      if (seq.modality[pos] == Modality::traj) ++lb.n_traj;
    }
  }
  const double bev_w = lb.n_bev > 0 ? lambda_bev / static_cast<double>(lb.n_bev) : 0.0;
  const double traj_w = lb.n_traj > 0 ? lambda_traj / static_cast<double>(lb.n_traj) : 0.0;

  ForwardCache cache;
  std::vector<double> dlogits;
  double sum_bev = 0.0, sum_traj = 0.0;
  for (const TokenSequence& seq : batch) {
    TokenSequence mixed = seq;
    if (p_mix > 0.0) {
      const std::vector<double> plain = forward(model, seq, nullptr);
      for (std::size_t pos = 1; pos < seq.size(); ++pos) {
        if (uniform01(rng) < p_mix) {
          const Modality m = seq.modality[pos];
          mixed.ids[pos] = static_cast<std::int32_t>(greedy_in_range(
              plain.data() + (pos - 1) * v, layout.offset(m), layout.size(m)));
        }
      }
    }
    const std::vector<double> logits = forward(model, mixed, accumulate_grad ? &cache : nullptr);
    if (accumulate_grad) {
      dlogits.assign(logits.size(), 0.0);
    }
    for (std::size_t pos = 1; pos < seq.size(); ++pos) {
      const Modality m = seq.modality[pos];
      // a zero head weight disables that head entirely
      if (m == Modality::bev && lambda_bev == 0.0) continue;
      if (m == Modality::traj && lambda_traj == 0.0) continue;
      const double* row = logits.data() + (pos - 1) * v;
      double mx = row[0];
      for (int i = 1; i < v; ++i) mx = std::max(mx, row[i]);
      double sum = 0.0;
      for (int i = 0; i < v; ++i) sum += std::exp(row[i] - mx);
      const int target = seq.ids[pos];
      const double logp = row[target] - mx - std::log(sum);
      if (m == Modality::bev) {
        sum_bev -= logp;
      } else {
        sum_traj -= logp;
      }
      if (accumulate_grad) {
        const double w = m == Modality::bev ? bev_w : traj_w;
        double* drow = dlogits.data() + (pos - 1) * v;
        const double inv = 1.0 / sum;
        for (int i = 0; i < v; ++i) {
          drow[i] = w * std::exp(row[i] - mx) * inv;
        }
        drow[target] -= w;
      }
    }
    if (accumulate_grad) {
      backward_from_dlogits(model, mixed, cache, dlogits);
    }
  }
  lb.l_bev = (lb.n_bev > 0 && lambda_bev != 0.0) ? sum_bev / static_cast<double>(lb.n_bev) : 0.0;
  lb.l_traj =
      (lb.n_traj > 0 && lambda_traj != 0.0) ? sum_traj / static_cast<double>(lb.n_traj) : 0.0;
  lb.total = lambda_traj * lb.l_traj + lambda_bev * lb.l_bev;
  return lb;
}

double scheduled_p(const TrainConfig& cfg, int epoch) {
  if (epoch < cfg.bc_epochs) return 0.0;
  if (cfg.ramp_epochs <= 0) return cfg.p_max;
  const double frac = static_cast<double>(epoch - cfg.bc_epochs + 1) / cfg.ramp_epochs;
  return cfg.p_max * std::min(1.0, frac);
}

double adamw_update(ParamStore& p, AdamState& opt, const TrainConfig& cfg) {
  if (opt.m.size() != p.value.size()) {
    opt.m.assign(p.value.size(), 0.0);
    opt.v.assign(p.value.size(), 0.0);
    opt.t = 0;
  }
  if (cfg.grad_clip < 0.0) {
    throw ConfigError("adamw_update: negative clip threshold");
  }
  double norm = p.grad_global_norm();
  double scale = 1.0;
  if (norm > cfg.grad_clip) {
    scale = cfg.grad_clip / std::max(norm, 1e-300);
  }
  ++opt.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.t));
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double g = p.grad[i] * scale;
    opt.m[i] = cfg.beta1 * opt.m[i] + (1.0 - cfg.beta1) * g;
    opt.v[i] = cfg.beta2 * opt.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = opt.m[i] / bc1;
    const double vhat = opt.v[i] / bc2;
    p.value[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * p.value[i]);
  }
  return norm;
}

StepRecord train_step(Model& model, AdamState& opt, const std::vector<TokenSequence>& batch,
                      const TrainConfig& cfg, double p_mix, Rng& rng) {
  model.p.zero_grad();
  const LossBreakdown lb =
      joint_loss(model, batch, cfg.lambda_traj, cfg.lambda_bev, p_mix, rng, true);
  if (!std::isfinite(lb.total)) {
    throw TrainingError("train_step: non-finite loss (l_bev=" + fmt_g9(lb.l_bev) +
                        ", l_traj=" + fmt_g9(lb.l_traj) + ")");
  }
  StepRecord rec;
  rec.total = lb.total;
  rec.l_bev = lb.l_bev;
  rec.l_traj = lb.l_traj;
  rec.p_mix = p_mix;
  rec.grad_norm = adamw_update(model.p, opt, cfg);
  return rec;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

// Incremental decoder holding per-layer key/value history.
struct Decoder {
  const Model& m;
  int t = 0;
  std::vector<std::vector<double>> keys, vals;  // per layer, cap x d

  explicit Decoder(const Model& model) : m(model) {
    keys.resize(m.cfg.n_layers);
    vals.resize(m.cfg.n_layers);
    for (int l = 0; l < m.cfg.n_layers; ++l) {
      keys[l].assign(static_cast<std::size_t>(m.cfg.max_seq_len) * m.cfg.d_model, 0.0);
      vals[l].assign(static_cast<std::size_t>(m.cfg.max_seq_len) * m.cfg.d_model, 0.0);
    }
  }

  std::vector<double> feed(std::int32_t id, Modality mod) {
    const ModelConfig& cfg = m.cfg;
    if (t >= cfg.max_seq_len) {
      throw SequenceError("generate: sequence exceeds max length");
    }
    const int d = cfg.d_model;
    const int hs = d / cfg.n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hs));
    const double* pv = m.p.value.data();

    std::vector<double> x(d);
    {
      const double* te = pv + m.wte + static_cast<std::size_t>(id) * d;
      const double* pe = pv + m.wpe + static_cast<std::size_t>(t) * d;
      const double* ye = pv + m.wtype + static_cast<std::size_t>(static_cast<int>(mod)) * d;
      for (int i = 0; i < d; ++i) x[i] = te[i] + pe[i] + ye[i];
    }

    std::vector<double> ln(d), qkv(3 * d), ctx(d), proj(d);
    double mean = 0.0, rstd = 0.0;
    for (int l = 0; l < cfg.n_layers; ++l) {
      const Model::LayerOffsets& lo = m.layers[l];
      layernorm_fwd(pv + lo.ln1_g, pv + lo.ln1_b, x.data(), ln.data(), &mean, &rstd, d);
      linear_fwd(pv + lo.w_qkv, pv + lo.b_qkv, ln.data(), qkv.data(), 3 * d, d);
      std::copy(qkv.begin() + d, qkv.begin() + 2 * d, keys[l].begin() + static_cast<std::size_t>(t) * d);
      std::copy(qkv.begin() + 2 * d, qkv.end(), vals[l].begin() + static_cast<std::size_t>(t) * d);

      for (int h = 0; h < cfg.n_heads; ++h) {
        const double* q = qkv.data() + h * hs;
        std::vector<double> scores(t + 1);
        for (int j = 0; j <= t; ++j) {
          const double* kj = keys[l].data() + static_cast<std::size_t>(j) * d + h * hs;
          double acc = 0.0;
          for (int i = 0; i < hs; ++i) acc += q[i] * kj[i];
          scores[j] = acc * att_scale;
        }
        softmax_inplace(scores.data(), t + 1);
        double* out = ctx.data() + h * hs;
        std::fill(out, out + hs, 0.0);
        for (int j = 0; j <= t; ++j) {
          const double* vj = vals[l].data() + static_cast<std::size_t>(j) * d + h * hs;
          for (int i = 0; i < hs; ++i) out[i] += scores[j] * vj[i];
        }
      }
      linear_fwd(pv + lo.w_o, pv + lo.b_o, ctx.data(), proj.data(), d, d);
      for (int i = 0; i < d; ++i) x[i] += proj[i];

      layernorm_fwd(pv + lo.ln2_g, pv + lo.ln2_b, x.data(), ln.data(), &mean, &rstd, d);
      const std::vector<double> mo = moe_ffn(m, l, ln);
      for (int i = 0; i < d; ++i) x[i] += mo[i];
    }

    layernorm_fwd(pv + m.lnf_g, pv + m.lnf_b, x.data(), ln.data(), &mean, &rstd, d);
    const int vsize = cfg.vocab.total();
    std::vector<double> logits(vsize);
    linear_fwd(pv + m.w_out, nullptr, ln.data(), logits.data(), vsize, d);
    ++t;
    return logits;
  }
};

int pick_token(const std::vector<double>& logits, int offset, int count, GenMode mode,
               double temperature, Rng* rng) {
  if (mode == GenMode::greedy) {
    int best = 0;
    for (int i = 1; i < count; ++i) {
      if (logits[offset + i] > logits[offset + best]) best = i;
    }
    return best;
  }
  if (rng == nullptr) {
    throw ConfigError("generate: sampling mode requires an rng");
  }
  const double temp = temperature > 0.0 ? temperature : 1.0;
  std::vector<double> probs(count);
  double mx = logits[offset];
  for (int i = 1; i < count; ++i) mx = std::max(mx, logits[offset + i]);
  double sum = 0.0;
  for (int i = 0; i < count; ++i) {
    probs[i] = std::exp((logits[offset + i] - mx) / temp);
    sum += probs[i];
  }
  const double r = uniform01(*rng) * sum;
  double acc = 0.0;
  for (int i = 0; i < count; ++i) {
    acc += probs[i];
    if (acc >= r) return i;
  }
  return count - 1;
}

}  // namespace

std::vector<FrameTokens> generate(const Model& model, const TokenSequence& context,
                                  int horizon_frames, GenMode mode, double temperature, Rng* rng) {
  const ModelConfig& cfg = model.cfg;
  context.validate(cfg.vocab, cfg.bev_tokens_per_frame, /*allow_partial=*/true);
  if (horizon_frames < 0) {
    throw ConfigError("generate: negative horizon");
  }
  // a context ending inside a frame (after its BEV block) first receives that
  // frame's trajectory token
  const bool partial = !context.modality.empty() && context.modality.back() == Modality::bev;
  const std::size_t needed =
      context.size() + static_cast<std::size_t>(horizon_frames) * cfg.frame_tokens() -
      (partial && horizon_frames > 0 ? cfg.bev_tokens_per_frame : 0);
  if (needed > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw SequenceError("generate: context too long for the requested horizon");
  }
  std::vector<FrameTokens> out;
  if (horizon_frames == 0) return out;

  Decoder dec(model);
  std::vector<double> logits;
  for (std::size_t i = 0; i < context.size(); ++i) {
    logits = dec.feed(context.ids[i], context.modality[i]);
  }
  const VocabLayout& layout = cfg.vocab;
  for (int f = 0; f < horizon_frames; ++f) {
    FrameTokens ft;
    if (!(f == 0 && partial)) {
      for (int b = 0; b < cfg.bev_tokens_per_frame; ++b) {
        const int local =
            pick_token(logits, layout.bev_offset(), layout.n_bev, mode, temperature, rng);
        ft.bev_local.push_back(local);
        logits = dec.feed(layout.bev_offset() + local, Modality::bev);
      }
    }
    ft.traj_local = pick_token(logits, layout.traj_offset(), layout.n_traj, mode, temperature, rng);
    logits = dec.feed(layout.traj_offset() + ft.traj_local, Modality::traj);
    out.push_back(std::move(ft));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking

double grad_check(Model& model, const std::vector<TokenSequence>& batch, double epsilon,
                  std::size_t max_checked) {
  Rng rng(0);
  model.p.zero_grad();
  joint_loss(model, batch, 1.0, 1.0, 0.0, rng, true);
  const std::vector<double> analytic = model.p.grad;

  auto loss_at = [&]() {
    Rng r2(0);
    return joint_loss(model, batch, 1.0, 1.0, 0.0, r2, false).total;
  };

  const std::size_t n = model.p.size();
  const std::size_t stride = std::max<std::size_t>(1, n / std::max<std::size_t>(1, max_checked));
  double max_rel = 0.0;
  for (std::size_t i = 0; i < n; i += stride) {
    const double orig = model.p.value[i];
    model.p.value[i] = orig + epsilon;
    const double lp = loss_at();
    model.p.value[i] = orig - epsilon;
    const double lm = loss_at();
    model.p.value[i] = orig;
    const double fd = (lp - lm) / (2.0 * epsilon);
    const double denom = std::max(std::abs(fd) + std::abs(analytic[i]), 1e-8);
    max_rel = std::max(max_rel, std::abs(fd - analytic[i]) / denom);
  }
  return max_rel;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"d_model", c.d_model},
                        {"n_layers", c.n_layers},
                        {"n_heads", c.n_heads},
                        {"n_experts", c.n_experts},
                        {"top_k", c.top_k},
                        {"d_ff", c.d_ff},
                        {"n_command", c.vocab.n_command},
                        {"n_bev", c.vocab.n_bev},
                        {"n_traj", c.vocab.n_traj},
                        {"history_frames", c.history_frames},
                        {"bev_tokens_per_frame", c.bev_tokens_per_frame},
                        {"max_seq_len", c.max_seq_len},
                        {"aux_load_balance", c.aux_load_balance},
                        {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model");
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.n_experts = j.at("n_experts");
  c.top_k = j.at("top_k");
  c.d_ff = j.at("d_ff");
  c.vocab.n_command = j.at("n_command");
  c.vocab.n_bev = j.at("n_bev");
  c.vocab.n_traj = j.at("n_traj");
  c.history_frames = j.at("history_frames");
  c.bev_tokens_per_frame = j.at("bev_tokens_per_frame");
  c.max_seq_len = j.at("max_seq_len");
  c.aux_load_balance = j.at("aux_load_balance");
  c.seed = j.at("seed");
  return c;
}

constexpr char kCkptMagic[8] = {'T', 'P', 'C', 'K', 'P', 'T', '0', '1'};

void write_doubles(std::ofstream& f, const std::vector<double>& v) {
  const std::uint64_t n = v.size();
  f.write(reinterpret_cast<const char*>(&n), sizeof(n));
  f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
}

std::vector<double> read_doubles(std::ifstream& f) {
  std::uint64_t n = 0;
  f.read(reinterpret_cast<char*>(&n), sizeof(n));
  std::vector<double> v(n);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const AdamState& opt,
                     std::uint64_t seed, long step_count, const std::string& config_hash) {
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw IoError("save_checkpoint: cannot open " + path);
  }
  nlohmann::json header = {{"config", config_to_json(model.cfg)},
                           {"seed", seed},
                           {"step_count", step_count},
                           {"adam_t", opt.t},
                           {"config_hash", config_hash}};
  const std::string hs = header.dump();
  const std::uint64_t hlen = hs.size();
  f.write(kCkptMagic, sizeof(kCkptMagic));
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  write_doubles(f, model.p.value);
  write_doubles(f, opt.m);
  write_doubles(f, opt.v);
  if (!f) {
    throw IoError("save_checkpoint: write failed for " + path);
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw IoError("load_checkpoint: cannot open " + path);
  }
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kCkptMagic, sizeof(kCkptMagic)) != 0) {
    throw IoError("load_checkpoint: bad magic in " + path);
  }
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  const nlohmann::json header = nlohmann::json::parse(hs);

  Checkpoint ck;
  const ModelConfig cfg = config_from_json(header.at("config"));
  ck.model = init_model(cfg, cfg.seed);
  ck.seed = header.at("seed");
  ck.step_count = header.at("step_count");
  ck.config_hash = header.at("config_hash");
  ck.opt.t = header.at("adam_t");
  ck.model.p.value = read_doubles(f);
  ck.opt.m = read_doubles(f);
  ck.opt.v = read_doubles(f);
  if (!f || ck.model.p.value.size() != ck.model.p.grad.size()) {
    throw IoError("load_checkpoint: truncated or inconsistent file " + path);
  }
  return ck;
}

}  // namespace tokenplan::ar
