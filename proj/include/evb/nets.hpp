#pragma once

// MLP with a Gaussian head: tanh hidden layers, then a final affine layer
// whose output splits into a mean half and a log-variance half (clamped to
// [-10, 10] before exponentiation). Parameters live in one flat vector so
// optimizers, finite differences and checkpoints all see the same layout.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evb/gaussian.hpp"
#include "evb/rng.hpp"
#include "evb/tape.hpp"

namespace evb {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

struct MlpGaussianNet {
  std::vector<std::size_t> widths;  // input, hidden..., 2*output
  Vec params;                       // per layer: W row-major, then b

  MlpGaussianNet() = default;

  explicit MlpGaussianNet(std::vector<std::size_t> w) : widths(std::move(w)) {
    if (widths.size() < 2) throw std::invalid_argument("MlpGaussianNet: need >= 2 widths");
    for (std::size_t wd : widths)
      if (wd == 0) throw std::invalid_argument("MlpGaussianNet: zero width");
    if (widths.back() % 2 != 0)
      throw std::invalid_argument("MlpGaussianNet: final width must be 2*output");
    params.assign(param_count_for(widths), 0.0);
  }

  // Uniform(-a, a) with a = sqrt(6/(fan_in+fan_out)); biases zero except the
  // log-variance half of the head, which starts at -1.
  static MlpGaussianNet glorot(std::vector<std::size_t> w, std::uint64_t seed) {
    MlpGaussianNet net(std::move(w));
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < net.widths.size(); ++l) {
      const std::size_t fan_in = net.widths[l], fan_out = net.widths[l + 1];
      const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      double* w_ptr = net.params.data() + net.w_offset(l);
      for (std::size_t i = 0; i < fan_in * fan_out; ++i)
        w_ptr[i] = (2.0 * rng.uniform() - 1.0) * a;
    }
    const std::size_t out = net.output_dim();
    double* head_b = net.params.data() + net.b_offset(net.layer_count() - 1);
    for (std::size_t i = 0; i < out; ++i) head_b[out + i] = -1.0;
    return net;
  }

  std::size_t input_dim() const { return widths.front(); }
  std::size_t output_dim() const { return widths.back() / 2; }
  std::size_t layer_count() const { return widths.size() - 1; }
  std::size_t param_count() const { return params.size(); }

  static std::size_t param_count_for(const std::vector<std::size_t>& w) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) n += w[l] * w[l + 1] + w[l + 1];
    return n;
  }

  std::size_t w_offset(std::size_t layer) const {
    std::size_t off = 0;
    for (std::size_t l = 0; l < layer; ++l) off += widths[l] * widths[l + 1] + widths[l + 1];
    return off;
  }
  std::size_t b_offset(std::size_t layer) const {
    return w_offset(layer) + widths[layer] * widths[layer + 1];
  }

  DiagGaussian forward(std::span<const double> x) const {
    if (x.size() != input_dim())
      throw std::invalid_argument("MlpGaussianNet::forward: input dimension mismatch");
    Vec h(x.begin(), x.end());
    for (std::size_t l = 0; l < layer_count(); ++l) {
      const std::size_t in = widths[l], out = widths[l + 1];
      Vec next(out);
      const double* w = params.data() + w_offset(l);
      const double* b = params.data() + b_offset(l);
      for (std::size_t i = 0; i < out; ++i) {
        double s = b[i];
        for (std::size_t j = 0; j < in; ++j) s += w[i * in + j] * h[j];
        next[i] = s;
      }
      if (l + 1 < layer_count())
        for (double& v : next) v = std::tanh(v);
      h = std::move(next);
    }
    const std::size_t out = output_dim();
    Vec mean(h.begin(), h.begin() + out);
    Vec var(out);
    for (std::size_t k = 0; k < out; ++k)
      var[k] = std::exp(std::min(std::max(h[out + k], kLogVarMin), kLogVarMax));
    return DiagGaussian(std::move(mean), std::move(var));
  }

  struct OnTape {
    std::vector<int> w_ids, b_ids;
  };

  OnTape emit(Tape& t) const {
    OnTape tp;
    for (std::size_t l = 0; l < layer_count(); ++l) {
      tp.w_ids.push_back(t.leaf(std::span<const double>(
          params.data() + w_offset(l), widths[l] * widths[l + 1])));
      tp.b_ids.push_back(t.leaf(std::span<const double>(
          params.data() + b_offset(l), widths[l + 1])));
    }
    return tp;
  }

  // Returns (mean node, variance node).
  std::pair<int, int> forward_on_tape(Tape& t, const OnTape& tp, int x_node) const {
    int h = x_node;
    for (std::size_t l = 0; l < layer_count(); ++l) {
      h = t.affine(tp.w_ids[l], tp.b_ids[l], h, widths[l + 1], widths[l]);
      if (l + 1 < layer_count()) h = t.tanh_op(h);
    }
    const std::size_t out = output_dim();
    const int mean = t.slice(h, 0, out);
    const int var = t.exp_op(t.clamp_op(t.slice(h, out, out), kLogVarMin, kLogVarMax));
    return {mean, var};
  }

  // Accumulates tape adjoints back into the flat parameter layout.
  void add_grads(const Tape& t, const OnTape& tp, Vec& flat) const {
    if (flat.size() != param_count()) flat.assign(param_count(), 0.0);
    for (std::size_t l = 0; l < layer_count(); ++l) {
      const Vec& gw = t.grad(tp.w_ids[l]);
      const Vec& gb = t.grad(tp.b_ids[l]);
      double* w = flat.data() + w_offset(l);
      double* b = flat.data() + b_offset(l);
      for (std::size_t i = 0; i < gw.size(); ++i) w[i] += gw[i];
      for (std::size_t i = 0; i < gb.size(); ++i) b[i] += gb[i];
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["widths"] = widths;
    j["params"] = params;
    return j;
  }

  static MlpGaussianNet from_json(const nlohmann::json& j) {
    MlpGaussianNet net(j.at("widths").get<std::vector<std::size_t>>());
    net.params = j.at("params").get<Vec>();
    if (net.params.size() != param_count_for(net.widths))
      throw std::runtime_error("MlpGaussianNet::from_json: parameter count mismatch");
    return net;
  }
};

struct Optimizer {
  enum class Kind { Sgd, Adam };

  Kind kind = Kind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  Vec m, v;

  Optimizer() = default;
  Optimizer(Kind k, double learning_rate) : kind(k), lr(learning_rate) {}

  // Descends the gradient; callers maximizing a bound pass the negated grads.
  void step(Vec& params, const Vec& grads) {
    if (params.size() != grads.size())
      throw std::invalid_argument("Optimizer::step: shape mismatch");
    ++step_count;
    if (kind == Kind::Sgd) {
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
      return;
    }
    if (m.size() != params.size()) m.assign(params.size(), 0.0);
    if (v.size() != params.size()) v.assign(params.size(), 0.0);
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      params[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["kind"] = kind == Kind::Sgd ? "sgd" : "adam";
    j["lr"] = lr;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["eps"] = eps;
    j["step_count"] = step_count;
    j["m"] = m;
    j["v"] = v;
    return j;
  }

  static Optimizer from_json(const nlohmann::json& j) {
    Optimizer o;
    o.kind = j.at("kind").get<std::string>() == "sgd" ? Kind::Sgd : Kind::Adam;
    o.lr = j.at("lr").get<double>();
    o.beta1 = j.at("beta1").get<double>();
    o.beta2 = j.at("beta2").get<double>();
    o.eps = j.at("eps").get<double>();
    o.step_count = j.at("step_count").get<long>();
    o.m = j.at("m").get<Vec>();
    o.v = j.at("v").get<Vec>();
    return o;
  }
};

}  // namespace evb
