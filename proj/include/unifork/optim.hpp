#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>

#include "unifork/checkpoint.hpp"
#include "unifork/autograd.hpp"

namespace unifork {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

// Adam with decoupled weight decay. Moments and step counts are kept per
// parameter so that parameters frozen for a while resume with correct bias
// correction.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  void set_weight_decay(double wd) { cfg_.weight_decay = wd; }

  // Global gradient norm over `names` (missing gradients count as zero).
  // Model is anything with param(name) -> Var.
  template <class Model>
  static double grad_norm(const Model& model, const std::set<std::string>& names) {
    double s = 0.0;
    for (const auto& name : names) {
      const auto& g = model.param(name).node().grad;
      for (double v : g) s += v * v;
    }
    return std::sqrt(s);
  }

  // One update of the parameters in `names` using their accumulated
  // gradients. Returns the pre-clip gradient norm.
  template <class Model>
  double step(Model& model, const std::set<std::string>& names, double lr) {
    const double norm = grad_norm(model, names);
    const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    for (const auto& name : names) {
      auto& node = model.param(name).node();
      auto& st = state_[name];
      if (st.m.size() != node.value.size()) {
        st.m = Tensor(node.value.shape());
        st.v = Tensor(node.value.shape());
      }
      st.t += 1;
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
      const bool has_grad = node.grad.size() == node.value.size();
      auto& p = node.value;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = has_grad ? node.grad[i] * clip : 0.0;
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double update = (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + cfg_.eps);
        p[i] -= lr * (update + cfg_.weight_decay * p[i]);
      }
    }
    return norm;
  }

  checkpoint::NamedTensors named_tensors() const {
    checkpoint::NamedTensors out;
    for (const auto& [name, st] : state_) {
      out.emplace_back("optim.m." + name, st.m);
      out.emplace_back("optim.v." + name, st.v);
      out.emplace_back("optim.t." + name, Tensor::scalar(static_cast<double>(st.t)));
    }
    return out;
  }

  void load_named_tensors(const checkpoint::NamedTensors& ts) {
    state_.clear();
    for (const auto& [key, t] : ts) {
      if (key.starts_with("optim.m.")) state_[key.substr(8)].m = t;
      else if (key.starts_with("optim.v.")) state_[key.substr(8)].v = t;
      else if (key.starts_with("optim.t.")) state_[key.substr(8)].t = static_cast<std::uint64_t>(t.item());
    }
  }

 private:
  struct Slot {
    Tensor m, v;
    std::uint64_t t = 0;
  };
  AdamWConfig cfg_;
  std::map<std::string, Slot> state_;
};

}  // namespace unifork
