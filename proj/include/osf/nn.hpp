#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "osf/core.hpp"

namespace osf {

// Trainable parameter block. Gradient and sparse-update bookkeeping are
// allocated lazily so untrained field sets stay cheap.
struct Tensor {
  std::string name;
  std::vector<double> v;
  std::vector<double> g;
  bool sparse = false;  // grid tensors: only touched entries get optimizer updates
  double lr_scale = 1.0;

  std::vector<int64_t> touched;
  std::vector<uint32_t> stamp;
  uint32_t epoch = 0;

  void resize(size_t n) { v.assign(n, 0.0); }
  size_t size() const { return v.size(); }

  void ensure_grad() {
    if (g.size() != v.size()) g.assign(v.size(), 0.0);
    if (sparse && stamp.size() != v.size()) stamp.assign(v.size(), 0);
  }

  void zero_grad() {
    ensure_grad();
    if (sparse) {
      for (int64_t i : touched) g[static_cast<size_t>(i)] = 0.0;
      touched.clear();
      if (++epoch == 0) {  // stamp wrap: restart clean
        std::fill(stamp.begin(), stamp.end(), 0);
        epoch = 1;
      }
    } else {
      std::fill(g.begin(), g.end(), 0.0);
    }
  }

  void accumulate(int64_t i, double dg) {
    g[static_cast<size_t>(i)] += dg;
    if (sparse && stamp[static_cast<size_t>(i)] != epoch) {
      stamp[static_cast<size_t>(i)] = epoch;
      touched.push_back(i);
    }
  }

  double grad_norm() const {
    double s = 0.0;
    if (sparse) {
      for (int64_t i : touched) s += g[static_cast<size_t>(i)] * g[static_cast<size_t>(i)];
    } else {
      for (double x : g) s += x * x;
    }
    return std::sqrt(s);
  }

  double value_norm() const {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  }
};

// Adam with per-tensor learning-rate scaling. Sparse tensors receive lazy
// updates: moments decay only on entries touched in the current step.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void attach(const std::vector<Tensor*>& params) {
    params_ = params;
    states_.clear();
    states_.resize(params.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      states_[i].m.assign(params_[i]->size(), 0.0);
      states_[i].v.assign(params_[i]->size(), 0.0);
    }
    t_ = 0;
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t p = 0; p < params_.size(); ++p) {
      Tensor& param = *params_[p];
      State& st = states_[p];
      const double lr = lr_ * param.lr_scale;
      auto update_one = [&](size_t i) {
        const double g = param.g[i];
        st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g;
        st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        param.v[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      };
      if (param.sparse) {
        for (int64_t i : param.touched) update_one(static_cast<size_t>(i));
      } else {
        for (size_t i = 0; i < param.size(); ++i) update_one(i);
      }
    }
  }

 private:
  struct State {
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor*> params_;
  std::vector<State> states_;
};

enum class Act { None, Relu, Softplus, Sigmoid };

inline double apply_act(Act a, double z) {
  switch (a) {
    case Act::None: return z;
    case Act::Relu: return z > 0.0 ? z : 0.0;
    case Act::Softplus:
      if (z > 20.0) return z;
      if (z < -20.0) return std::exp(z);
      return std::log1p(std::exp(z));
    case Act::Sigmoid: return 1.0 / (1.0 + std::exp(-z));
  }
  return z;
}

inline double act_derivative(Act a, double z) {
  switch (a) {
    case Act::None: return 1.0;
    case Act::Relu: return z > 0.0 ? 1.0 : 0.0;
    case Act::Softplus: return 1.0 / (1.0 + std::exp(-z));
    case Act::Sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-z));
      return s * (1.0 - s);
    }
  }
  return 1.0;
}

// Scratch for one MLP forward pass; reusable across calls.
struct MlpCache {
  std::vector<std::vector<double>> x;  // per-layer input
  std::vector<std::vector<double>> z;  // per-layer pre-activation
  std::vector<double> y;               // final output
};

// Fully-connected stack with hand-derived backward. Hidden layers use
// hidden_act, the last layer out_act.
class Mlp {
 public:
  Mlp() = default;

  Mlp(const std::string& name, const std::vector<int>& dims, Act hidden_act, Act out_act,
      Pcg32& rng) {
    if (dims.size() < 2) throw std::invalid_argument("mlp needs at least input and output dims");
    dims_ = dims;
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
      const int in = dims[l], out = dims[l + 1];
      Layer layer;
      layer.in = in;
      layer.out = out;
      layer.act = (l + 2 == dims.size()) ? out_act : hidden_act;
      layer.W.name = name + ".W" + std::to_string(l);
      layer.b.name = name + ".b" + std::to_string(l);
      layer.W.resize(static_cast<size_t>(in) * out);
      layer.b.resize(static_cast<size_t>(out));
      const double a = std::sqrt(6.0 / (in + out));
      for (double& w : layer.W.v) w = rng.uniform(-a, a);
      layers_.push_back(std::move(layer));
    }
  }

  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }

  // Zeroes the final affine layer; the network then outputs exactly zero.
  void zero_output_layer() {
    std::fill(layers_.back().W.v.begin(), layers_.back().W.v.end(), 0.0);
    std::fill(layers_.back().b.v.begin(), layers_.back().b.v.end(), 0.0);
  }

  const std::vector<double>& forward(const double* input, MlpCache& c) const {
    c.x.resize(layers_.size());
    c.z.resize(layers_.size());
    const double* cur = input;
    int cur_dim = dims_.front();
    for (size_t l = 0; l < layers_.size(); ++l) {
      const Layer& L = layers_[l];
      c.x[l].assign(cur, cur + cur_dim);
      c.z[l].resize(static_cast<size_t>(L.out));
      for (int o = 0; o < L.out; ++o) {
        double s = L.b.v[static_cast<size_t>(o)];
        const double* wr = L.W.v.data() + static_cast<size_t>(o) * L.in;
        for (int i = 0; i < L.in; ++i) s += wr[i] * cur[i];
        c.z[l][static_cast<size_t>(o)] = s;
      }
      if (l + 1 == layers_.size()) {
        c.y.resize(static_cast<size_t>(L.out));
        for (int o = 0; o < L.out; ++o) c.y[static_cast<size_t>(o)] = apply_act(L.act, c.z[l][static_cast<size_t>(o)]);
        return c.y;
      }
      // reuse x[l+1] buffer as activated output storage
      c.x[l + 1].resize(static_cast<size_t>(L.out));
      for (int o = 0; o < L.out; ++o)
        c.x[l + 1][static_cast<size_t>(o)] = apply_act(L.act, c.z[l][static_cast<size_t>(o)]);
      cur = c.x[l + 1].data();
      cur_dim = L.out;
    }
    return c.y;  // unreachable
  }

  // Accumulates parameter gradients; optionally writes the input gradient.
  void backward(const double* dy, const MlpCache& c, double* dx) {
    std::vector<double> delta(c.y.size());
    {
      const Layer& L = layers_.back();
      for (int o = 0; o < L.out; ++o)
        delta[static_cast<size_t>(o)] =
            dy[o] * act_derivative(L.act, c.z.back()[static_cast<size_t>(o)]);
    }
    for (size_t l = layers_.size(); l-- > 0;) {
      Layer& L = layers_[l];
      L.W.ensure_grad();
      L.b.ensure_grad();
      const std::vector<double>& x = c.x[l];
      std::vector<double> dprev(static_cast<size_t>(L.in), 0.0);
      for (int o = 0; o < L.out; ++o) {
        const double d = delta[static_cast<size_t>(o)];
        L.b.g[static_cast<size_t>(o)] += d;
        double* wg = L.W.g.data() + static_cast<size_t>(o) * L.in;
        const double* wr = L.W.v.data() + static_cast<size_t>(o) * L.in;
        for (int i = 0; i < L.in; ++i) {
          wg[i] += d * x[static_cast<size_t>(i)];
          dprev[static_cast<size_t>(i)] += d * wr[i];
        }
      }
      if (l > 0) {
        const Layer& P = layers_[l - 1];
        delta.resize(static_cast<size_t>(P.out));
        for (int o = 0; o < P.out; ++o)
          delta[static_cast<size_t>(o)] =
              dprev[static_cast<size_t>(o)] * act_derivative(P.act, c.z[l - 1][static_cast<size_t>(o)]);
      } else if (dx) {
        for (int i = 0; i < L.in; ++i) dx[i] = dprev[static_cast<size_t>(i)];
      }
    }
  }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out;
    for (Layer& l : layers_) {
      out.push_back(&l.W);
      out.push_back(&l.b);
    }
    return out;
  }

 private:
  struct Layer {
    int in = 0, out = 0;
    Act act = Act::None;
    Tensor W, b;
  };
  std::vector<int> dims_;
  std::vector<Layer> layers_;
};

}  // namespace osf
