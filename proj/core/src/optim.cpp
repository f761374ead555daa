#include "bugloc/optim.hpp"

#include <cmath>

#include "bugloc/error.hpp"

namespace bugloc {

void AdamOptimizer::step(ParamStore& params,
                         const std::map<std::string, Tensor>& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    if (!p.same_shape(g))
      throw Error("AdamOptimizer: gradient shape mismatch for " + name);
    auto [mi, m_new] = m_.try_emplace(name, Tensor(p.shape()));
    auto [vi, v_new] = v_.try_emplace(name, Tensor(p.shape()));
    (void)m_new;
    (void)v_new;
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon);
    }
  }
}

}  // namespace bugloc
