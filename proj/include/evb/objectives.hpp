#pragma once

// The bound objectives, assembled as differentiable scalars over a
// minibatch. Every variant shares the same skeleton
//
//   value = recon - regu + extra
//
// where recon is the Monte Carlo reconstruction term (reparameterized
// samples through the decoder), regu the analytic divergence to the N(0, I)
// prior, and extra the variant's additional divergence:
//
//   elbo          value = recon - D[V||q]                       (lower)
//   anchored-elbo value = elbo + D[V||posterior] - D[V||Y]      (lower)
//   eubo          value = recon - D[V||q] + D[V||U]             (upper)
//   twin-elbo     value = recon - D[V||q], U tracks V           (lower)
//   jsd-eubo      value = (recon_V + recon_U)/2 - D[M||q]       (upper)
//
// The mixture divergence D[M||q] is estimated by stratified MC with
// antithetic pairs and the exact mixture log-density; every other
// divergence is closed-form.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "evb/divergence.hpp"
#include "evb/gaussian.hpp"
#include "evb/nets.hpp"
#include "evb/ppca.hpp"
#include "evb/rng.hpp"
#include "evb/tape.hpp"

namespace evb {

enum class ObjectiveKind { Elbo, AnchoredElbo, Eubo, TwinElbo, JsdEubo };

inline const char* to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::Elbo: return "elbo";
    case ObjectiveKind::AnchoredElbo: return "anchored-elbo";
    case ObjectiveKind::Eubo: return "eubo";
    case ObjectiveKind::TwinElbo: return "twin-elbo";
    case ObjectiveKind::JsdEubo: return "jsd-eubo";
  }
  return "?";
}

inline ObjectiveKind objective_from_string(const std::string& s) {
  if (s == "elbo") return ObjectiveKind::Elbo;
  if (s == "anchored-elbo") return ObjectiveKind::AnchoredElbo;
  if (s == "eubo") return ObjectiveKind::Eubo;
  if (s == "twin-elbo") return ObjectiveKind::TwinElbo;
  if (s == "jsd-eubo") return ObjectiveKind::JsdEubo;
  throw std::invalid_argument("unknown objective: " + s);
}

enum class BoundDirection { Lower, Upper };

struct BoundEstimate {
  double value = 0.0;
  double recon = 0.0;
  double regu = 0.0;
  double extra = 0.0;
  std::size_t mc_samples = 0;
  BoundDirection direction = BoundDirection::Lower;
};

using Batch = std::vector<Vec>;

struct NetSet {
  const MlpGaussianNet* enc = nullptr;      // primary encoder V
  const MlpGaussianNet* aux = nullptr;      // second encoder (Y or U)
  const MlpGaussianNet* dec = nullptr;      // decoder for V samples
  const MlpGaussianNet* dec_aux = nullptr;  // decoder for U samples (jsd only)
};

// Everything the trainer needs from one batch graph: the bound value, the
// per-group training targets and the bookkeeping numbers.
struct ObjectiveGraph {
  MlpGaussianNet::OnTape enc_tp, aux_tp, dec_tp, dec_aux_tp;
  int value = -1;           // batch-mean bound
  int primary_target = -1;  // enc and dec ascend this
  int aux_target = -1;      // aux ascends (+1) or descends (-1) this
  double aux_sign = 1.0;
  int dec_aux_target = -1;  // dec_aux ascends this
  BoundEstimate est;
  double mc_se = 0.0;  // MC standard error of est.value (0 when mc < 2)
};

namespace detail {

// eps stream roles so tied nets reproduce identical draws across variants.
enum : std::uint64_t { kRolePrimary = 0, kRoleAux = 1, kRoleMixPrimary = 2, kRoleMixAux = 3 };

inline Vec draw_eps(std::uint64_t seed, std::size_t point, std::size_t sample,
                    std::uint64_t role, std::size_t dim) {
  Rng rng(Rng::derive(seed, point, sample * 4 + role));
  Vec e(dim);
  for (double& x : e) x = rng.normal();
  return e;
}

inline double sample_variance(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double s = 0.0;
  for (double x : xs) s += (x - mean) * (x - mean);
  return s / static_cast<double>(xs.size() - 1);
}

struct ReconOut {
  int node = -1;        // (1/S) sum_s log dec(x | z_s)
  double var_of_mean = 0.0;  // sample variance of the sample mean
};

inline ReconOut recon_term(Tape& t, const MlpGaussianNet& dec,
                           const MlpGaussianNet::OnTape& dec_tp, int x_node, int mu,
                           int var, std::size_t mc, std::uint64_t seed, std::size_t point,
                           std::uint64_t role) {
  std::vector<int> lls;
  std::vector<double> vals;
  lls.reserve(mc);
  for (std::size_t s = 0; s < mc; ++s) {
    const int z = t.reparam(mu, var, draw_eps(seed, point, s, role, t.val(mu).size()));
    const auto [dmu, dvar] = dec.forward_on_tape(t, dec_tp, z);
    const int ll = t.gauss_logpdf(x_node, dmu, dvar);
    lls.push_back(ll);
    vals.push_back(t.scalar(ll));
  }
  ReconOut out;
  out.node = t.scale(t.sum_scalars(lls), 1.0 / static_cast<double>(mc));
  out.var_of_mean = sample_variance(vals) / static_cast<double>(mc);
  return out;
}

}  // namespace detail

inline ObjectiveGraph build_objective(Tape& t, ObjectiveKind kind, const NetSet& nets,
                                      const PpcaModel* anchor, const Batch& xs,
                                      std::size_t mc, std::uint64_t seed) {
  if (xs.empty()) throw std::invalid_argument("build_objective: empty batch");
  if (mc < 1) throw std::invalid_argument("build_objective: mc_samples must be >= 1");
  if (nets.enc == nullptr || nets.dec == nullptr)
    throw std::invalid_argument("build_objective: enc and dec are required");
  const bool needs_aux =
      kind != ObjectiveKind::Elbo;
  if (needs_aux && nets.aux == nullptr)
    throw std::invalid_argument("build_objective: this objective needs a second encoder");
  if (kind == ObjectiveKind::JsdEubo && nets.dec_aux == nullptr)
    throw std::invalid_argument("build_objective: jsd-eubo needs a second decoder");
  if (kind == ObjectiveKind::AnchoredElbo && anchor == nullptr)
    throw std::invalid_argument("build_objective: anchored-elbo needs a ppca model");

  const std::size_t nz = nets.enc->output_dim();
  ObjectiveGraph g;
  g.enc_tp = nets.enc->emit(t);
  if (needs_aux) g.aux_tp = nets.aux->emit(t);
  g.dec_tp = nets.dec->emit(t);
  if (kind == ObjectiveKind::JsdEubo) g.dec_aux_tp = nets.dec_aux->emit(t);

  const int prior_mu = t.constant(Vec(nz, 0.0));
  const int prior_var = t.constant(Vec(nz, 1.0));

  const std::size_t b = xs.size();
  std::vector<int> value_nodes, primary_nodes, aux_nodes;
  double recon_sum = 0.0, regu_sum = 0.0, extra_sum = 0.0, var_sum = 0.0;

  for (std::size_t i = 0; i < b; ++i) {
    const int x_node = t.constant(xs[i]);
    const auto [mu, var] = nets.enc->forward_on_tape(t, g.enc_tp, x_node);

    switch (kind) {
      case ObjectiveKind::Elbo: {
        const auto rec = detail::recon_term(t, *nets.dec, g.dec_tp, x_node, mu, var, mc,
                                            seed, i, detail::kRolePrimary);
        const int regu = t.kl_diag_node(mu, var, prior_mu, prior_var);
        const int value = t.sub(rec.node, regu);
        value_nodes.push_back(value);
        recon_sum += t.scalar(rec.node);
        regu_sum += t.scalar(regu);
        var_sum += rec.var_of_mean;
        break;
      }
      case ObjectiveKind::AnchoredElbo: {
        const auto rec = detail::recon_term(t, *nets.dec, g.dec_tp, x_node, mu, var, mc,
                                            seed, i, detail::kRolePrimary);
        const int regu = t.kl_diag_node(mu, var, prior_mu, prior_var);
        const auto [ymu, yvar] = nets.aux->forward_on_tape(t, g.aux_tp, x_node);
        const int to_w = t.kl_posterior_node(mu, var, anchor, xs[i]);
        const int to_y = t.kl_diag_node(mu, var, ymu, yvar);
        const int extra = t.sub(to_w, to_y);
        const int value = t.add(t.sub(rec.node, regu), extra);
        value_nodes.push_back(value);
        recon_sum += t.scalar(rec.node);
        regu_sum += t.scalar(regu);
        extra_sum += t.scalar(extra);
        var_sum += rec.var_of_mean;
        break;
      }
      case ObjectiveKind::Eubo: {
        const auto rec = detail::recon_term(t, *nets.dec, g.dec_tp, x_node, mu, var, mc,
                                            seed, i, detail::kRolePrimary);
        const int regu = t.kl_diag_node(mu, var, prior_mu, prior_var);
        const auto [umu, uvar] = nets.aux->forward_on_tape(t, g.aux_tp, x_node);
        const int extra = t.kl_diag_node(mu, var, umu, uvar);
        const int lower = t.sub(rec.node, regu);
        const int value = t.add(lower, extra);
        value_nodes.push_back(value);
        primary_nodes.push_back(lower);
        recon_sum += t.scalar(rec.node);
        regu_sum += t.scalar(regu);
        extra_sum += t.scalar(extra);
        var_sum += rec.var_of_mean;
        break;
      }
      case ObjectiveKind::TwinElbo: {
        const auto rec = detail::recon_term(t, *nets.dec, g.dec_tp, x_node, mu, var, mc,
                                            seed, i, detail::kRolePrimary);
        const int regu = t.kl_diag_node(mu, var, prior_mu, prior_var);
        const int value = t.sub(rec.node, regu);
        const auto [umu, uvar] = nets.aux->forward_on_tape(t, g.aux_tp, x_node);
        const int gap = t.kl_diag_node(mu, var, umu, uvar);
        value_nodes.push_back(value);
        aux_nodes.push_back(gap);
        recon_sum += t.scalar(rec.node);
        regu_sum += t.scalar(regu);
        var_sum += rec.var_of_mean;
        break;
      }
      case ObjectiveKind::JsdEubo: {
        const auto rec_v = detail::recon_term(t, *nets.dec, g.dec_tp, x_node, mu, var, mc,
                                              seed, i, detail::kRolePrimary);
        const auto [umu, uvar] = nets.aux->forward_on_tape(t, g.aux_tp, x_node);
        const auto rec_u = detail::recon_term(t, *nets.dec_aux, g.dec_aux_tp, x_node, umu,
                                              uvar, mc, seed, i, detail::kRoleAux);
        // D[M||q] by stratified MC: mc antithetic pairs from each component.
        std::vector<int> mix_terms;
        std::vector<double> mix_vals;
        for (std::size_t s = 0; s < mc; ++s) {
          for (int comp = 0; comp < 2; ++comp) {
            const std::uint64_t role =
                comp == 0 ? detail::kRoleMixPrimary : detail::kRoleMixAux;
            Vec eps = detail::draw_eps(seed, i, s, role, nz);
            for (int sign = 0; sign < 2; ++sign) {
              Vec e = eps;
              if (sign == 1)
                for (double& x : e) x = -x;
              const int z = comp == 0 ? t.reparam(mu, var, std::move(e))
                                      : t.reparam(umu, uvar, std::move(e));
              const int lm = t.mixture_logpdf(mu, var, umu, uvar, z);
              const int lq = t.gauss_logpdf(z, prior_mu, prior_var);
              const int term = t.sub(lm, lq);
              mix_terms.push_back(term);
              mix_vals.push_back(t.scalar(term));
            }
          }
        }
        const int regu =
            t.scale(t.sum_scalars(mix_terms), 1.0 / static_cast<double>(mix_terms.size()));
        const int recon =
            t.scale(t.add(rec_v.node, rec_u.node), 0.5);
        const int value = t.sub(recon, regu);
        const int lower_v =
            t.sub(rec_v.node, t.kl_diag_node(mu, var, prior_mu, prior_var));
        const int lower_u =
            t.sub(rec_u.node, t.kl_diag_node(umu, uvar, prior_mu, prior_var));
        value_nodes.push_back(value);
        primary_nodes.push_back(lower_v);
        aux_nodes.push_back(lower_u);
        recon_sum += t.scalar(recon);
        regu_sum += t.scalar(regu);
        var_sum += 0.25 * rec_v.var_of_mean + 0.25 * rec_u.var_of_mean +
                   detail::sample_variance(mix_vals) / static_cast<double>(mix_vals.size());
        break;
      }
    }
  }

  const double inv_b = 1.0 / static_cast<double>(b);
  g.value = t.scale(t.sum_scalars(value_nodes), inv_b);

  switch (kind) {
    case ObjectiveKind::Elbo:
      g.primary_target = g.value;
      break;
    case ObjectiveKind::AnchoredElbo:
      g.primary_target = g.value;
      g.aux_target = g.value;
      g.aux_sign = 1.0;
      break;
    case ObjectiveKind::Eubo:
      g.primary_target = t.scale(t.sum_scalars(primary_nodes), inv_b);
      g.aux_target = g.value;
      g.aux_sign = -1.0;
      break;
    case ObjectiveKind::TwinElbo:
      g.primary_target = g.value;
      g.aux_target = t.scale(t.sum_scalars(aux_nodes), inv_b);
      g.aux_sign = -1.0;
      break;
    case ObjectiveKind::JsdEubo:
      g.primary_target = t.scale(t.sum_scalars(primary_nodes), inv_b);
      g.aux_target = t.scale(t.sum_scalars(aux_nodes), inv_b);
      g.aux_sign = 1.0;
      g.dec_aux_target = g.aux_target;
      break;
  }

  g.est.recon = recon_sum * inv_b;
  g.est.regu = regu_sum * inv_b;
  g.est.extra = extra_sum * inv_b;
  g.est.value = g.est.recon - g.est.regu + g.est.extra;
  g.est.mc_samples = mc;
  g.est.direction = (kind == ObjectiveKind::Eubo || kind == ObjectiveKind::JsdEubo)
                        ? BoundDirection::Upper
                        : BoundDirection::Lower;
  g.mc_se = std::sqrt(var_sum) * inv_b;
  return g;
}

struct ObjectiveResult {
  BoundEstimate est;
  double mc_se = 0.0;
  Vec enc_grad, aux_grad, dec_grad, dec_aux_grad;  // d value / d params
};

inline ObjectiveResult evaluate_objective(ObjectiveKind kind, const NetSet& nets,
                                          const PpcaModel* anchor, const Batch& xs,
                                          std::size_t mc, std::uint64_t seed,
                                          bool with_grads = false) {
  Tape t;
  ObjectiveGraph g = build_objective(t, kind, nets, anchor, xs, mc, seed);
  ObjectiveResult r;
  r.est = g.est;
  r.mc_se = g.mc_se;
  if (with_grads) {
    t.backward(g.value);
    nets.enc->add_grads(t, g.enc_tp, r.enc_grad);
    if (nets.aux && !g.aux_tp.w_ids.empty()) nets.aux->add_grads(t, g.aux_tp, r.aux_grad);
    nets.dec->add_grads(t, g.dec_tp, r.dec_grad);
    if (nets.dec_aux && !g.dec_aux_tp.w_ids.empty())
      nets.dec_aux->add_grads(t, g.dec_aux_tp, r.dec_aux_grad);
  }
  return r;
}

inline BoundEstimate elbo(const MlpGaussianNet& enc, const MlpGaussianNet& dec,
                          const Batch& xs, std::size_t mc, std::uint64_t seed) {
  NetSet n;
  n.enc = &enc;
  n.dec = &dec;
  return evaluate_objective(ObjectiveKind::Elbo, n, nullptr, xs, mc, seed).est;
}

inline BoundEstimate anchored_elbo(const MlpGaussianNet& enc, const MlpGaussianNet& enc_y,
                                   const MlpGaussianNet& dec, const PpcaModel& model,
                                   const Batch& xs, std::size_t mc, std::uint64_t seed) {
  NetSet n;
  n.enc = &enc;
  n.aux = &enc_y;
  n.dec = &dec;
  return evaluate_objective(ObjectiveKind::AnchoredElbo, n, &model, xs, mc, seed).est;
}

inline BoundEstimate eubo(const MlpGaussianNet& enc, const MlpGaussianNet& enc_u,
                          const MlpGaussianNet& dec, const Batch& xs, std::size_t mc,
                          std::uint64_t seed) {
  NetSet n;
  n.enc = &enc;
  n.aux = &enc_u;
  n.dec = &dec;
  return evaluate_objective(ObjectiveKind::Eubo, n, nullptr, xs, mc, seed).est;
}

inline BoundEstimate twin_elbo(const MlpGaussianNet& enc, const MlpGaussianNet& enc_u,
                               const MlpGaussianNet& dec, const Batch& xs, std::size_t mc,
                               std::uint64_t seed) {
  NetSet n;
  n.enc = &enc;
  n.aux = &enc_u;
  n.dec = &dec;
  return evaluate_objective(ObjectiveKind::TwinElbo, n, nullptr, xs, mc, seed).est;
}

inline BoundEstimate jsd_eubo(const MlpGaussianNet& enc, const MlpGaussianNet& enc_u,
                              const MlpGaussianNet& dec, const MlpGaussianNet& dec_u,
                              const Batch& xs, std::size_t mc, std::uint64_t seed) {
  NetSet n;
  n.enc = &enc;
  n.aux = &enc_u;
  n.dec = &dec;
  n.dec_aux = &dec_u;
  return evaluate_objective(ObjectiveKind::JsdEubo, n, nullptr, xs, mc, seed).est;
}

// Affine net that evaluates the model likelihood exactly: mean C z,
// log-variance 2 log sigma.
inline MlpGaussianNet likelihood_net(const PpcaModel& m) {
  MlpGaussianNet net({m.n_z(), 2 * m.n_x()});
  for (std::size_t i = 0; i < m.n_x(); ++i)
    for (std::size_t j = 0; j < m.n_z(); ++j)
      net.params[net.w_offset(0) + i * m.n_z() + j] = m.loadings()(i, j);
  for (std::size_t i = 0; i < m.n_x(); ++i)
    net.params[net.b_offset(0) + m.n_x() + i] = 2.0 * std::log(m.sigma());
  return net;
}

// Affine net mapping x to the model posterior mean with the posterior's
// diagonal variances (exact when the loading columns are orthogonal).
inline MlpGaussianNet posterior_diag_net(const PpcaModel& m) {
  const std::size_t nx = m.n_x(), nz = m.n_z();
  MlpGaussianNet net({nx, 2 * nz});
  Vec basis(nx, 0.0);
  for (std::size_t j = 0; j < nx; ++j) {
    basis[j] = 1.0;
    const Vec col = m.posterior(basis).mean;
    for (std::size_t i = 0; i < nz; ++i) net.params[net.w_offset(0) + i * nx + j] = col[i];
    basis[j] = 0.0;
  }
  const FullGaussian at_zero = m.posterior(Vec(nx, 0.0));
  for (std::size_t i = 0; i < nz; ++i)
    net.params[net.b_offset(0) + nz + i] = std::log(at_zero.covariance(i, i));
  return net;
}

struct SecondOrderGap {
  double exact = 0.0;
  double quadratic = 0.0;
};

// exact = D[v||y]; quadratic = (1/2) integral (y - v)^2 / v, the second-order
// expansion of the divergence in (y - v). For diagonal Gaussians the
// integral factorizes into per-coordinate pieces, each evaluated by Simpson
// quadrature. Returns +inf in `quadratic` when a coordinate integral
// diverges (vy >= 2 vv).
inline SecondOrderGap second_order_gap(const DiagGaussian& v, const DiagGaussian& y) {
  if (v.dim() != y.dim()) throw std::invalid_argument("second_order_gap: dimension mismatch");
  SecondOrderGap out;
  out.exact = kl_diag(v, y);
  double prod = 1.0;
  for (std::size_t k = 0; k < v.dim(); ++k) {
    const double mv = v.mean[k], vv = v.variance[k];
    const double my = y.mean[k], vy = y.variance[k];
    const double prec = 2.0 / vy - 1.0 / vv;  // precision of y^2/v
    if (!(prec > 0.0)) {
      out.quadratic = std::numeric_limits<double>::infinity();
      return out;
    }
    const double center = (2.0 * my / vy - mv / vv) / prec;
    const double width = 12.0 / std::sqrt(prec);
    const std::size_t intervals = 8192;  // even
    const double h = 2.0 * width / static_cast<double>(intervals);
    const auto f = [&](double x) {
      const double dy = x - my, dv = x - mv;
      const double le = -(kLog2Pi + std::log(vy)) - dy * dy / vy +
                        0.5 * (kLog2Pi + std::log(vv)) + 0.5 * dv * dv / vv;
      return std::exp(le);
    };
    double s = f(center - width) + f(center + width);
    for (std::size_t i = 1; i < intervals; ++i)
      s += f(center - width + h * static_cast<double>(i)) * (i % 2 == 1 ? 4.0 : 2.0);
    prod *= s * h / 3.0;
  }
  out.quadratic = 0.5 * (prod - 1.0);
  return out;
}

}  // namespace evb
