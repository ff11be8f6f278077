#pragma once

// Minibatch training loops over the bound objectives, synthetic data with
// known exact evidence, and the lower/upper bracket monitor.
//
// Training roles per objective (the auxiliary encoder's learning rate is
// scaled by aux_lr_scale):
//   elbo          enc+dec ascend the bound
//   anchored-elbo enc+aux+dec ascend the bound
//   eubo          enc+dec ascend recon - D[V||q]; aux descends the upper
//                 bound (chases V, tightening D[V||U] from an independent
//                 start)
//   twin-elbo     enc+dec ascend the bound; aux descends D[V||U]
//   jsd-eubo      each encoder/decoder pair ascends its own lower bound;
//                 the symmetric upper bound is the monitored value
//
// Metrics are JSON lines, one object per eval row, with deterministic bytes
// for a fixed config; wall time is reported on the console only.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evb/dataset.hpp"
#include "evb/divergence.hpp"
#include "evb/nets.hpp"
#include "evb/objectives.hpp"
#include "evb/ppca.hpp"
#include "evb/rng.hpp"

namespace evb {

struct TrainConfig {
  ObjectiveKind objective = ObjectiveKind::Elbo;
  std::size_t n_x = 16;
  std::size_t n_z = 3;

  // Data source: CSV path, or synthetic when empty.
  std::string data_csv;
  bool csv_header = false;
  std::string model_file;  // optional P-PCA model (anchor + evidence column)
  std::size_t synth_points = 2000;
  double synth_sigma = 0.1;

  std::size_t epochs = 200;
  std::size_t batch_size = 100;
  double lr = 5e-3;
  double lr_decay = 1.0;  // multiplicative per epoch
  Optimizer::Kind optimizer = Optimizer::Kind::Adam;
  std::size_t mc_samples = 1;
  bool seed_set = false;
  std::uint64_t seed = 0;

  std::size_t eval_every = 10;
  std::size_t eval_mc = 256;
  double aux_lr_scale = 0.25;
  std::vector<std::size_t> hidden = {64};
  // Replace the learned decoder with the fixed model likelihood (requires an
  // anchor, ground-truth or --model reference).
  bool ppca_decoder = false;

  std::string metrics_path;
  std::string checkpoint_path;
  std::optional<ObjectiveKind> bracket_partner;
};

struct EvalRow {
  std::size_t epoch = 0;
  double value = 0.0;
  double recon = 0.0;
  double regu = 0.0;
  double extra = 0.0;
  std::optional<double> evidence;  // exact mean when a reference model is known
  double gap = 0.0;                // D[V||Y] or D[V||U]; 0 for plain elbo
  double mc_se = 0.0;              // in memory only
  double wall_time_s = 0.0;        // in memory only
  bool aborted = false;
};

struct TrainReport {
  std::vector<EvalRow> rows;
  bool aborted = false;
};

enum class Trend { Shrinking, Stalled, Diverging };

struct ConvergenceStatus {
  double bracket_width = 0.0;  // final EUBO - ELBO
  Trend trend = Trend::Stalled;
  double encoder_gap = 0.0;  // final D[V||U] of the upper-bound run
};

inline const char* to_string(Trend t) {
  switch (t) {
    case Trend::Shrinking: return "shrinking";
    case Trend::Stalled: return "stalled";
    case Trend::Diverging: return "diverging";
  }
  return "?";
}

// Ground-truth loading matrix: orthonormal columns scaled by 2^-k, so the
// latent directions have a clean, well-separated spectrum.
inline std::pair<Dataset, PpcaModel> generate_synthetic(std::size_t n_x, std::size_t n_z,
                                                        double sigma, std::size_t n_points,
                                                        std::uint64_t seed) {
  if (n_z < 1 || n_z > n_x) throw std::invalid_argument("generate_synthetic: bad dimensions");
  if (!(sigma > 0.0)) throw std::invalid_argument("generate_synthetic: sigma must be positive");
  if (n_points < 1) throw std::invalid_argument("generate_synthetic: need n_points >= 1");
  Matrix loadings = random_orthonormal(n_x, n_z, Rng::derive(seed, 0xC0));
  for (std::size_t k = 0; k < n_z; ++k) {
    const double scale = std::pow(2.0, -static_cast<double>(k));
    for (std::size_t i = 0; i < n_x; ++i) loadings(i, k) *= scale;
  }
  PpcaModel model(std::move(loadings), sigma);
  Dataset data = model.sample(n_points, Rng::derive(seed, 0xDA));
  return {std::move(data), std::move(model)};
}

namespace detail {

inline nlohmann::ordered_json row_to_json(const EvalRow& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["value"] = r.value;
  j["recon"] = r.recon;
  j["regu"] = r.regu;
  j["extra"] = r.extra;
  if (r.evidence)
    j["evidence"] = *r.evidence;
  else
    j["evidence"] = nullptr;
  j["gap"] = r.gap;
  if (r.aborted) j["status"] = "aborted_non_finite";
  return j;
}

inline void shuffle_indices(std::vector<std::size_t>& idx, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = rng.next_u64() % i;
    std::swap(idx[i - 1], idx[j]);
  }
}

}  // namespace detail

// Full outcome: report plus the trained nets and the reference models, which
// the bracket runner and the tests inspect directly.
struct TrainOutcome {
  TrainReport report;
  MlpGaussianNet enc, dec;
  std::optional<MlpGaussianNet> aux, dec_aux;
  std::optional<PpcaModel> truth;   // synthetic ground truth
  std::optional<PpcaModel> anchor;  // anchored-elbo reference
  Dataset data;
  std::size_t train_rows = 0;  // rows [0, train_rows) train, rest eval
};

inline void validate(const TrainConfig& cfg) {
  if (!cfg.seed_set) throw std::invalid_argument("train: seed is required");
  if (cfg.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (cfg.mc_samples < 1) throw std::invalid_argument("train: mc_samples must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(cfg.lr >= 0.0)) throw std::invalid_argument("train: lr must be >= 0");
  if (cfg.n_z < 1 || cfg.n_z > cfg.n_x) throw std::invalid_argument("train: bad n_z/n_x");
}

inline TrainOutcome train_full(const TrainConfig& cfg,
                               const Dataset* shared_data = nullptr,
                               const PpcaModel* shared_truth = nullptr) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();

  TrainOutcome out;
  if (shared_data != nullptr) {
    out.data = *shared_data;
    if (shared_truth != nullptr) out.truth = *shared_truth;
  } else if (!cfg.data_csv.empty()) {
    out.data = read_csv(cfg.data_csv, cfg.csv_header);
    if (out.data.n_cols != cfg.n_x)
      throw std::runtime_error("train: CSV width does not match n_x");
  } else {
    auto [data, truth] = generate_synthetic(cfg.n_x, cfg.n_z, cfg.synth_sigma,
                                            cfg.synth_points, cfg.seed);
    out.data = std::move(data);
    out.truth = std::move(truth);
  }
  if (cfg.batch_size > out.data.n_rows)
    throw std::invalid_argument("train: batch_size exceeds dataset size");

  // Fixed 80/20 split; the tail is held out for evaluation.
  out.train_rows = std::max<std::size_t>(1, (out.data.n_rows * 4) / 5);
  if (out.train_rows == out.data.n_rows) out.train_rows = out.data.n_rows - 1;
  Batch eval_batch;
  for (std::size_t i = out.train_rows; i < out.data.n_rows; ++i) {
    const auto r = out.data.row(i);
    eval_batch.emplace_back(r.begin(), r.end());
  }

  // Reference model for the evidence column and the anchored objective.
  const PpcaModel* evidence_model = nullptr;
  std::optional<PpcaModel> file_model;
  if (!cfg.model_file.empty()) file_model = PpcaModel::load(cfg.model_file);
  if (out.truth)
    evidence_model = &*out.truth;
  else if (file_model)
    evidence_model = &*file_model;

  const auto fit_from_train = [&]() -> PpcaModel {
    Dataset train_view(out.train_rows, out.data.n_cols);
    std::copy(out.data.values.begin(),
              out.data.values.begin() + static_cast<long>(out.train_rows * out.data.n_cols),
              train_view.values.begin());
    const double sigma =
        cfg.data_csv.empty() ? cfg.synth_sigma : suggest_sigma(train_view, cfg.n_z);
    return fit_ppca(train_view, cfg.n_z, sigma);
  };
  if (cfg.objective == ObjectiveKind::AnchoredElbo)
    out.anchor = file_model ? *file_model : fit_from_train();
  if (cfg.ppca_decoder && !out.anchor) out.anchor = file_model ? *file_model : fit_from_train();
  const PpcaModel* anchor = out.anchor ? &*out.anchor : nullptr;

  // Nets.
  std::vector<std::size_t> enc_w{cfg.n_x};
  for (std::size_t h : cfg.hidden) enc_w.push_back(h);
  enc_w.push_back(2 * cfg.n_z);
  std::vector<std::size_t> dec_w{cfg.n_z};
  for (std::size_t h : cfg.hidden) dec_w.push_back(h);
  dec_w.push_back(2 * cfg.n_x);

  out.enc = MlpGaussianNet::glorot(enc_w, Rng::derive(cfg.seed, 101));
  const bool dec_frozen = cfg.ppca_decoder;
  out.dec = dec_frozen ? likelihood_net(*anchor)
                       : MlpGaussianNet::glorot(dec_w, Rng::derive(cfg.seed, 102));
  const bool needs_aux = cfg.objective != ObjectiveKind::Elbo;
  if (needs_aux) out.aux = MlpGaussianNet::glorot(enc_w, Rng::derive(cfg.seed, 103));
  if (cfg.objective == ObjectiveKind::JsdEubo)
    out.dec_aux = dec_frozen ? likelihood_net(*anchor)
                             : MlpGaussianNet::glorot(dec_w, Rng::derive(cfg.seed, 104));

  Optimizer opt_enc(cfg.optimizer, cfg.lr), opt_dec(cfg.optimizer, cfg.lr);
  Optimizer opt_aux(cfg.optimizer, cfg.lr * cfg.aux_lr_scale);
  Optimizer opt_dec_aux(cfg.optimizer, cfg.lr);

  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path, std::ios::trunc);
    if (!metrics) throw std::runtime_error("train: cannot open metrics file " + cfg.metrics_path);
  }

  const std::uint64_t eval_seed = Rng::derive(cfg.seed, 0xE7A1);

  const auto net_set = [&]() {
    NetSet n;
    n.enc = &out.enc;
    n.dec = &out.dec;
    if (out.aux) n.aux = &*out.aux;
    if (out.dec_aux) n.dec_aux = &*out.dec_aux;
    return n;
  };

  const auto do_eval = [&](std::size_t epoch, bool aborted_row = false) {
    EvalRow row;
    row.epoch = epoch;
    row.aborted = aborted_row;
    if (!aborted_row) {
      const auto res = evaluate_objective(cfg.objective, net_set(), anchor, eval_batch,
                                          cfg.eval_mc, eval_seed, false);
      row.value = res.est.value;
      row.recon = res.est.recon;
      row.regu = res.est.regu;
      row.extra = res.est.extra;
      row.mc_se = res.mc_se;
      if (out.aux) {
        double g = 0.0;
        for (const Vec& x : eval_batch)
          g += kl_diag(out.enc.forward(x), out.aux->forward(x));
        row.gap = g / static_cast<double>(eval_batch.size());
      }
      if (evidence_model != nullptr) {
        double e = 0.0;
        for (const Vec& x : eval_batch) e += evidence_model->evidence_logpdf(x);
        row.evidence = e / static_cast<double>(eval_batch.size());
      }
    }
    row.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.report.rows.push_back(row);
    if (metrics.is_open()) metrics << detail::row_to_json(row).dump() << '\n';
  };

  do_eval(0);

  std::vector<std::size_t> order(out.train_rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Vec g_enc, g_aux, g_dec, g_dec_aux;
  bool aborted = false;

  for (std::size_t epoch = 1; epoch <= cfg.epochs && !aborted; ++epoch) {
    const double decay = std::pow(cfg.lr_decay, static_cast<double>(epoch - 1));
    opt_enc.lr = cfg.lr * decay;
    opt_dec.lr = cfg.lr * decay;
    opt_dec_aux.lr = cfg.lr * decay;
    opt_aux.lr = cfg.lr * cfg.aux_lr_scale * decay;
    detail::shuffle_indices(order, Rng::derive(cfg.seed, 0x5405, epoch));
    const std::size_t n_batches = out.train_rows / cfg.batch_size;
    for (std::size_t bi = 0; bi < std::max<std::size_t>(n_batches, 1); ++bi) {
      Batch xs;
      const std::size_t lo = bi * cfg.batch_size;
      const std::size_t hi = std::min(lo + cfg.batch_size, out.train_rows);
      for (std::size_t k = lo; k < hi; ++k) {
        const auto r = out.data.row(order[k]);
        xs.emplace_back(r.begin(), r.end());
      }
      if (xs.empty()) continue;

      Tape tape;
      ObjectiveGraph g =
          build_objective(tape, cfg.objective, net_set(), anchor, xs, cfg.mc_samples,
                          Rng::derive(cfg.seed, epoch, bi));
      if (!std::isfinite(g.est.value)) {
        aborted = true;
        break;
      }

      tape.backward(g.primary_target);
      out.enc.add_grads(tape, g.enc_tp, g_enc);
      out.dec.add_grads(tape, g.dec_tp, g_dec);
      bool aux_done = false, dec_aux_done = false;
      if (out.aux && g.aux_target == g.primary_target && g.aux_sign > 0) {
        out.aux->add_grads(tape, g.aux_tp, g_aux);
        aux_done = true;
      }
      if (out.dec_aux && g.dec_aux_target == g.primary_target) {
        out.dec_aux->add_grads(tape, g.dec_aux_tp, g_dec_aux);
        dec_aux_done = true;
      }

      // Ascent: the optimizer descends, so negate.
      for (double& v : g_enc) v = -v;
      opt_enc.step(out.enc.params, g_enc);
      if (!dec_frozen) {
        for (double& v : g_dec) v = -v;
        opt_dec.step(out.dec.params, g_dec);
      }

      if (out.aux && g.aux_target >= 0 && !aux_done) {
        tape.backward(g.aux_target);
        out.aux->add_grads(tape, g.aux_tp, g_aux);
        if (out.dec_aux && g.dec_aux_target == g.aux_target) {
          out.dec_aux->add_grads(tape, g.dec_aux_tp, g_dec_aux);
          dec_aux_done = true;
        }
        aux_done = true;
      }
      if (out.aux && aux_done) {
        if (g.aux_sign > 0)
          for (double& v : g_aux) v = -v;
        opt_aux.step(out.aux->params, g_aux);
      }
      if (out.dec_aux && dec_aux_done && !dec_frozen) {
        for (double& v : g_dec_aux) v = -v;
        opt_dec_aux.step(out.dec_aux->params, g_dec_aux);
      }

      g_enc.clear();
      g_aux.clear();
      g_dec.clear();
      g_dec_aux.clear();

      if (!all_finite(out.enc.params) || !all_finite(out.dec.params)) {
        aborted = true;
        break;
      }
    }
    if (aborted) {
      do_eval(epoch, true);
      break;
    }
    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) do_eval(epoch);
  }

  out.report.aborted = aborted;

  if (!cfg.checkpoint_path.empty()) {
    nlohmann::ordered_json ck;
    ck["step"] = opt_enc.step_count;
    ck["nets"]["enc"] = out.enc.to_json();
    if (out.aux) ck["nets"]["aux"] = out.aux->to_json();
    ck["nets"]["dec"] = out.dec.to_json();
    if (out.dec_aux) ck["nets"]["dec_aux"] = out.dec_aux->to_json();
    ck["optimizers"]["enc"] = opt_enc.to_json();
    if (out.aux) ck["optimizers"]["aux"] = opt_aux.to_json();
    ck["optimizers"]["dec"] = opt_dec.to_json();
    if (out.dec_aux) ck["optimizers"]["dec_aux"] = opt_dec_aux.to_json();
    std::ofstream f(cfg.checkpoint_path, std::ios::trunc);
    if (!f) throw std::runtime_error("train: cannot open checkpoint file " + cfg.checkpoint_path);
    f << ck.dump(2) << '\n';
  }
  return out;
}

inline TrainReport train(const TrainConfig& cfg) { return train_full(cfg).report; }

inline ConvergenceStatus bracket_monitor(const std::vector<EvalRow>& elbo_rows,
                                         const std::vector<EvalRow>& eubo_rows) {
  if (elbo_rows.empty() || elbo_rows.size() != eubo_rows.size())
    throw std::invalid_argument("bracket_monitor: row count mismatch");
  for (std::size_t i = 0; i < elbo_rows.size(); ++i)
    if (elbo_rows[i].epoch != eubo_rows[i].epoch)
      throw std::invalid_argument("bracket_monitor: eval cadence mismatch");

  std::vector<double> width(elbo_rows.size());
  for (std::size_t i = 0; i < width.size(); ++i)
    width[i] = eubo_rows[i].value - elbo_rows[i].value;

  ConvergenceStatus st;
  st.bracket_width = width.back();
  st.encoder_gap = eubo_rows.back().gap;

  const std::size_t n = std::min<std::size_t>(width.size(), 10);
  const std::size_t off = width.size() - n;
  if (n < 2) {
    st.trend = Trend::Stalled;
    return st;
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(i);
    const double y = width[off + i];
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double dn = static_cast<double>(n);
  const double slope = (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
  const double tol = 1e-3;  // nats per eval
  st.trend = slope < -tol ? Trend::Shrinking : (slope > tol ? Trend::Diverging : Trend::Stalled);
  return st;
}

struct BracketOutcome {
  TrainOutcome lower;  // elbo run
  TrainOutcome upper;  // eubo run
  ConvergenceStatus status;
};

// Co-trains a lower-bound and an upper-bound model on the same data stream
// and seeds, synchronized at eval points.
inline BracketOutcome co_train_bracket(const TrainConfig& base) {
  validate(base);
  TrainConfig lower_cfg = base;
  lower_cfg.objective = ObjectiveKind::Elbo;
  TrainConfig upper_cfg = base;
  upper_cfg.objective = base.bracket_partner.value_or(ObjectiveKind::Eubo);
  if (!base.metrics_path.empty()) {
    lower_cfg.metrics_path = base.metrics_path + ".elbo.jsonl";
    upper_cfg.metrics_path = base.metrics_path + ".eubo.jsonl";
  }
  if (!base.checkpoint_path.empty()) {
    lower_cfg.checkpoint_path = base.checkpoint_path + ".elbo.json";
    upper_cfg.checkpoint_path = base.checkpoint_path + ".eubo.json";
  }

  BracketOutcome out;
  if (!base.data_csv.empty()) {
    out.lower = train_full(lower_cfg);
    out.upper = train_full(upper_cfg);
  } else {
    auto [data, truth] = generate_synthetic(base.n_x, base.n_z, base.synth_sigma,
                                            base.synth_points, base.seed);
    out.lower = train_full(lower_cfg, &data, &truth);
    out.upper = train_full(upper_cfg, &data, &truth);
  }
  out.status = bracket_monitor(out.lower.report.rows, out.upper.report.rows);
  return out;
}

}  // namespace evb
