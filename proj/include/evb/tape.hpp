#pragma once

// Reverse-mode differentiation over vector-valued primitives. A Tape records
// nodes in topological (creation) order; each node keeps its value, its
// adjoint, and forward/backward closures over parent ids. The op vocabulary
// is exactly what the bound objectives need: affine layers, tanh/exp/clamp,
// reparameterized sampling, Gaussian log-densities, the diagonal KL, the
// two-component mixture log-density and the SVD-path posterior divergence.
//
// Replaying the forward closures reproduces every recorded value, which the
// tests use as the tape's self-check.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "evb/divergence.hpp"
#include "evb/gaussian.hpp"
#include "evb/matrix.hpp"
#include "evb/ppca.hpp"

namespace evb {

class Tape {
 public:
  struct Node {
    Vec val;
    Vec grad;
    std::function<void(Tape&)> forward;   // null for leaves/constants
    std::function<void(Tape&)> backward;  // null for leaves/constants
  };

  int leaf(std::span<const double> v) {
    nodes_.push_back(Node{Vec(v.begin(), v.end()), Vec(v.size(), 0.0), nullptr, nullptr});
    return static_cast<int>(nodes_.size()) - 1;
  }
  int constant(std::span<const double> v) { return leaf(v); }
  int constant(double v) { return leaf(std::span<const double>(&v, 1)); }

  const Vec& val(int id) const { return nodes_[id].val; }
  const Vec& grad(int id) const { return nodes_[id].grad; }
  double scalar(int id) const {
    if (nodes_[id].val.size() != 1) throw std::logic_error("Tape::scalar: node not scalar");
    return nodes_[id].val[0];
  }
  std::size_t size() const { return nodes_.size(); }

  // y = W x + b with W stored row-major as a leaf of length out*in.
  int affine(int w, int b, int x, std::size_t out, std::size_t in) {
    if (val(w).size() != out * in || val(b).size() != out || val(x).size() != in)
      throw std::invalid_argument("Tape::affine: shape mismatch");
    const int id = alloc(out);
    auto fwd = [w, b, x, id, out, in](Tape& t) {
      const Vec& wv = t.nodes_[w].val;
      const Vec& xv = t.nodes_[x].val;
      for (std::size_t i = 0; i < out; ++i) {
        double s = t.nodes_[b].val[i];
        for (std::size_t j = 0; j < in; ++j) s += wv[i * in + j] * xv[j];
        t.nodes_[id].val[i] = s;
      }
    };
    fwd(*this);
    nodes_[id].forward = fwd;
    nodes_[id].backward = [w, b, x, id, out, in](Tape& t) {
      const Vec& g = t.nodes_[id].grad;
      const Vec& wv = t.nodes_[w].val;
      const Vec& xv = t.nodes_[x].val;
      Vec& gw = t.nodes_[w].grad;
      Vec& gb = t.nodes_[b].grad;
      Vec& gx = t.nodes_[x].grad;
      for (std::size_t i = 0; i < out; ++i) {
        const double gi = g[i];
        gb[i] += gi;
        for (std::size_t j = 0; j < in; ++j) {
          gw[i * in + j] += gi * xv[j];
          gx[j] += gi * wv[i * in + j];
        }
      }
    };
    return id;
  }

  int tanh_op(int x) {
    return unary(x, [](double v) { return std::tanh(v); },
                 [](double v, double y) {
                   (void)v;
                   return 1.0 - y * y;
                 });
  }

  int exp_op(int x) {
    return unary(x, [](double v) { return std::exp(v); },
                 [](double v, double y) {
                   (void)v;
                   return y;
                 });
  }

  int clamp_op(int x, double lo, double hi) {
    return unary(x,
                 [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
                 [lo, hi](double v, double y) {
                   (void)y;
                   return (v >= lo && v <= hi) ? 1.0 : 0.0;
                 });
  }

  int slice(int x, std::size_t offset, std::size_t len) {
    if (offset + len > val(x).size()) throw std::invalid_argument("Tape::slice: out of range");
    const int id = alloc(len);
    auto fwd = [x, id, offset, len](Tape& t) {
      for (std::size_t i = 0; i < len; ++i)
        t.nodes_[id].val[i] = t.nodes_[x].val[offset + i];
    };
    fwd(*this);
    nodes_[id].forward = fwd;
    nodes_[id].backward = [x, id, offset, len](Tape& t) {
      for (std::size_t i = 0; i < len; ++i)
        t.nodes_[x].grad[offset + i] += t.nodes_[id].grad[i];
    };
    return id;
  }

  int add(int a, int b) { return binary(a, b, +1.0); }
  int sub(int a, int b) { return binary(a, b, -1.0); }

  int scale(int a, double c) {
    const int id = alloc(val(a).size());
    auto fwd = [a, id, c](Tape& t) {
      const Vec& av = t.nodes_[a].val;
      for (std::size_t i = 0; i < av.size(); ++i) t.nodes_[id].val[i] = c * av[i];
    };
    fwd(*this);
    nodes_[id].forward = fwd;
    nodes_[id].backward = [a, id, c](Tape& t) {
      const Vec& g = t.nodes_[id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) t.nodes_[a].grad[i] += c * g[i];
    };
    return id;
  }

  int sum_scalars(std::vector<int> ids) {
    for (int n : ids)
      if (val(n).size() != 1) throw std::invalid_argument("Tape::sum_scalars: non-scalar input");
    const int id = alloc(1);
    auto fwd = [ids, id](Tape& t) {
      double s = 0.0;
      for (int n : ids) s += t.nodes_[n].val[0];
      t.nodes_[id].val[0] = s;
    };
    fwd(*this);
    nodes_[id].forward = fwd;
    nodes_[id].backward = [ids, id](Tape& t) {
      const double g = t.nodes_[id].grad[0];
      for (int n : ids) t.nodes_[n].grad[0] += g;
    };
    return id;
  }

  // z = mu + sqrt(var) * eps, eps fixed.
  int reparam(int mu, int var, Vec eps) {
    const std::size_t n = val(mu).size();
    if (val(var).size() != n || eps.size() != n)
      throw std::invalid_argument("Tape::reparam: shape mismatch");
    const int id = alloc(n);
    auto e = std::make_shared<Vec>(std::move(eps));
    auto fwd = [mu, var, id, e](Tape& t) {
      for (std::size_t k = 0; k < e->size(); ++k)
        t.nodes_[id].val[k] =
            t.nodes_[mu].val[k] + std::sqrt(t.nodes_[var].val[k]) * (*e)[k];
    };
    fwd(*this);
    nodes_[id].forward = fwd;
    nodes_[id].backward = [mu, var, id, e](Tape& t) {
      const Vec& g = t.nodes_[id].grad;
      for (std::size_t k = 0; k < e->size(); ++k) {
        t.nodes_[mu].grad[k] += g[k];
        t.nodes_[var].grad[k] +=
            g[k] * (*e)[k] / (2.0 * std::sqrt(t.nodes_[var].val[k]));
      }
    };
    return id;
  }

  // Scalar: sum_k log N(x_k; mu_k, var_k). All three arguments are nodes.
  int gauss_logpdf(int x, int mu, int var) {
    const std::size_t n = val(x).size();
    if (val(mu).size() != n || val(var).size() != n)
      throw std::invalid_argument("Tape::gauss_logpdf: shape mismatch");
    const int id = alloc(1);
    auto fwd = [x, mu, var, id, n](Tape& t) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double d = t.nodes_[x].val[k] - t.nodes_[mu].val[k];
        const double v = t.nodes_[var].val[k];
        s += kLog2Pi + std::log(v) + d * d / v;
      }
      t.nodes_[id].val[0] = -0.5 * s;
    };
    fwd(*this);
    nodes_[id].forward = fwd;
    nodes_[id].backward = [x, mu, var, id, n](Tape& t) {
      const double g = t.nodes_[id].grad[0];
      for (std::size_t k = 0; k < n; ++k) {
        const double d = t.nodes_[x].val[k] - t.nodes_[mu].val[k];
        const double v = t.nodes_[var].val[k];
        t.nodes_[x].grad[k] += g * (-d / v);
        t.nodes_[mu].grad[k] += g * (d / v);
        t.nodes_[var].grad[k] += g * 0.5 * (d * d / (v * v) - 1.0 / v);
      }
    };
    return id;
  }

  // Scalar: D[N(mv,vv) || N(my,vy)] in the diagonal closed form. Computed as
  // log(vy/vv) so that identical argument nodes give exactly zero.
  int kl_diag_node(int mv, int vv, int my, int vy) {
    const std::size_t n = val(mv).size();
    if (val(vv).size() != n || val(my).size() != n || val(vy).size() != n)
      throw std::invalid_argument("Tape::kl_diag_node: shape mismatch");
    const int id = alloc(1);
    auto fwd = [mv, vv, my, vy, id, n](Tape& t) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double dv = t.nodes_[vv].val[k], dy = t.nodes_[vy].val[k];
        const double dm = t.nodes_[my].val[k] - t.nodes_[mv].val[k];
        s += std::log(dy / dv) + dv / dy - 1.0 + dm * dm / dy;
      }
      t.nodes_[id].val[0] = 0.5 * s;
    };
    fwd(*this);
    nodes_[id].forward = fwd;
    nodes_[id].backward = [mv, vv, my, vy, id, n](Tape& t) {
      const double g = t.nodes_[id].grad[0];
      for (std::size_t k = 0; k < n; ++k) {
        const double dv = t.nodes_[vv].val[k], dy = t.nodes_[vy].val[k];
        const double dm = t.nodes_[my].val[k] - t.nodes_[mv].val[k];
        t.nodes_[mv].grad[k] += g * (-dm / dy);
        t.nodes_[my].grad[k] += g * (dm / dy);
        t.nodes_[vv].grad[k] += g * 0.5 * (1.0 / dy - 1.0 / dv);
        t.nodes_[vy].grad[k] += g * 0.5 * (1.0 / dy - dv / (dy * dy) - dm * dm / (dy * dy));
      }
    };
    return id;
  }

  // Scalar: log( (1/2) N(z; ma, va) + (1/2) N(z; mb, vb) ).
  int mixture_logpdf(int ma, int va, int mb, int vb, int z) {
    const std::size_t n = val(z).size();
    if (val(ma).size() != n || val(va).size() != n || val(mb).size() != n ||
        val(vb).size() != n)
      throw std::invalid_argument("Tape::mixture_logpdf: shape mismatch");
    const int id = alloc(1);
    auto comp = [n](Tape& t, int m, int v, int zz) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double d = t.nodes_[zz].val[k] - t.nodes_[m].val[k];
        const double vv = t.nodes_[v].val[k];
        s += kLog2Pi + std::log(vv) + d * d / vv;
      }
      return -0.5 * s;
    };
    auto fwd = [ma, va, mb, vb, z, id, comp](Tape& t) {
      const double la = comp(t, ma, va, z);
      const double lb = comp(t, mb, vb, z);
      const double m = std::max(la, lb);
      t.nodes_[id].val[0] =
          m + std::log(0.5 * std::exp(la - m) + 0.5 * std::exp(lb - m));
    };
    fwd(*this);
    nodes_[id].forward = fwd;
    nodes_[id].backward = [ma, va, mb, vb, z, id, n, comp](Tape& t) {
      const double g = t.nodes_[id].grad[0];
      const double la = comp(t, ma, va, z);
      const double lb = comp(t, mb, vb, z);
      const double lm = t.nodes_[id].val[0];
      const double wa = 0.5 * std::exp(la - lm);
      const double wb = 0.5 * std::exp(lb - lm);
      auto push = [&](int m, int v, double w) {
        for (std::size_t k = 0; k < n; ++k) {
          const double d = t.nodes_[z].val[k] - t.nodes_[m].val[k];
          const double vv = t.nodes_[v].val[k];
          t.nodes_[m].grad[k] += g * w * (d / vv);
          t.nodes_[v].grad[k] += g * w * 0.5 * (d * d / (vv * vv) - 1.0 / vv);
          t.nodes_[z].grad[k] += g * w * (-d / vv);
        }
      };
      push(ma, va, wa);
      push(mb, vb, wb);
    };
    return id;
  }

  // Scalar: D[N(mu, var) || posterior(x)] through the SVD path. The model
  // and x are fixed; gradients flow to mu and var:
  //   d/d var_l = (1/2)(a_l - 1/var_l)
  //   d/d mu    = -Lambda^T (xbar - mubar)
  int kl_posterior_node(int mu, int var, const PpcaModel* model, Vec x) {
    const int id = alloc(1);
    auto xs = std::make_shared<Vec>(std::move(x));
    auto fwd = [mu, var, model, xs, id](Tape& t) {
      t.nodes_[id].val[0] =
          detail::posterior_kl_terms(t.nodes_[mu].val, t.nodes_[var].val, *model, *xs).value;
    };
    fwd(*this);
    nodes_[id].forward = fwd;
    nodes_[id].backward = [mu, var, model, xs, id](Tape& t) {
      const double g = t.nodes_[id].grad[0];
      const auto terms =
          detail::posterior_kl_terms(t.nodes_[mu].val, t.nodes_[var].val, *model, *xs);
      const ThinSvd& svd = model->svd();
      const std::size_t nz = model->n_z();
      Vec lt(nz);  // Lambda^T (xbar - mubar) = V L t
      for (std::size_t l = 0; l < nz; ++l) lt[l] = svd.singular_values[l] * terms.proj[l];
      const Vec dmu = mat_vec(svd.v, lt);
      for (std::size_t l = 0; l < nz; ++l) {
        t.nodes_[mu].grad[l] += g * (-dmu[l]);
        t.nodes_[var].grad[l] +=
            g * 0.5 * (terms.trace_coeff[l] - 1.0 / t.nodes_[var].val[l]);
      }
    };
    return id;
  }

  // Seeds the adjoint of a scalar loss and sweeps the tape in reverse.
  void backward(int loss) {
    if (loss < 0 || loss >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("Tape::backward: bad node id");
    if (nodes_[loss].val.size() != 1)
      throw std::invalid_argument("Tape::backward: loss must be scalar");
    for (int i = 0; i <= loss; ++i)
      std::fill(nodes_[i].grad.begin(), nodes_[i].grad.end(), 0.0);
    nodes_[loss].grad[0] = 1.0;
    for (int i = loss; i >= 0; --i)
      if (nodes_[i].backward) nodes_[i].backward(*this);
  }

  // Recomputes every recorded value from the leaves; returns the loss value.
  double replay(int loss) {
    for (int i = 0; i <= loss; ++i)
      if (nodes_[i].forward) nodes_[i].forward(*this);
    return scalar(loss);
  }

 private:
  int alloc(std::size_t n) {
    nodes_.push_back(Node{Vec(n, 0.0), Vec(n, 0.0), nullptr, nullptr});
    return static_cast<int>(nodes_.size()) - 1;
  }

  template <typename F, typename DF>
  int unary(int x, F f, DF df) {
    const std::size_t n = val(x).size();
    const int id = alloc(n);
    auto fwd = [x, id, f, n](Tape& t) {
      for (std::size_t i = 0; i < n; ++i) t.nodes_[id].val[i] = f(t.nodes_[x].val[i]);
    };
    fwd(*this);
    nodes_[id].forward = fwd;
    nodes_[id].backward = [x, id, df, n](Tape& t) {
      for (std::size_t i = 0; i < n; ++i)
        t.nodes_[x].grad[i] +=
            t.nodes_[id].grad[i] * df(t.nodes_[x].val[i], t.nodes_[id].val[i]);
    };
    return id;
  }

  int binary(int a, int b, double sign_b) {
    const std::size_t n = val(a).size();
    if (val(b).size() != n) throw std::invalid_argument("Tape: binary op shape mismatch");
    const int id = alloc(n);
    auto fwd = [a, b, id, sign_b, n](Tape& t) {
      for (std::size_t i = 0; i < n; ++i)
        t.nodes_[id].val[i] = t.nodes_[a].val[i] + sign_b * t.nodes_[b].val[i];
    };
    fwd(*this);
    nodes_[id].forward = fwd;
    nodes_[id].backward = [a, b, id, sign_b, n](Tape& t) {
      for (std::size_t i = 0; i < n; ++i) {
        t.nodes_[a].grad[i] += t.nodes_[id].grad[i];
        t.nodes_[b].grad[i] += sign_b * t.nodes_[id].grad[i];
      }
    };
    return id;
  }

  std::vector<Node> nodes_;
};

}  // namespace evb
