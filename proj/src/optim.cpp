#include "cpt/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace cpt {

Optimizer::Optimizer(std::vector<ParamGroup> groups, OptimizerConfig cfg)
    : groups_(std::move(groups)), cfg_(cfg) {
    if (cfg_.lr <= 0.0) throw std::runtime_error("optimizer lr must be positive");
    for (const ParamGroup& g : groups_) {
        if (g.frozen) continue;
        for (const Tensor& t : g.tensors) tunable_.push_back(t);
    }
    if (cfg_.kind == OptimizerConfig::Kind::adam) {
        m_.resize(tunable_.size());
        v_.resize(tunable_.size());
        for (size_t i = 0; i < tunable_.size(); ++i) {
            m_[i].assign(tunable_[i].numel(), 0.0);
            v_[i].assign(tunable_[i].numel(), 0.0);
        }
    }
}

void Optimizer::step() {
    for (const ParamGroup& g : groups_) {
        if (g.frozen) continue;
        for (const Tensor& t : g.tensors)
            if (!t.has_grad())
                throw std::runtime_error("optimizer step: tunable group '" + g.name +
                                         "' has a tensor with no gradient");
    }

    double sq = 0.0;
    for (const Tensor& t : tunable_)
        for (double g : t.grad()) sq += g * g;
    last_norm_ = std::sqrt(sq);

    double scale = 1.0;
    if (cfg_.clip_norm > 0.0 && last_norm_ > cfg_.clip_norm)
        scale = cfg_.clip_norm / last_norm_;

    if (cfg_.kind == OptimizerConfig::Kind::sgd) {
        for (Tensor& t : tunable_) {
            auto& val = t.values();
            const auto& gr = t.grad();
            for (size_t i = 0; i < val.size(); ++i) val[i] -= cfg_.lr * scale * gr[i];
        }
    } else {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t k = 0; k < tunable_.size(); ++k) {
            auto& val = tunable_[k].values();
            const auto& gr = tunable_[k].grad();
            auto& m = m_[k];
            auto& v = v_[k];
            for (size_t i = 0; i < val.size(); ++i) {
                const double g = scale * gr[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                val[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }
    zero_grad();
}

void Optimizer::zero_grad() {
    for (ParamGroup& g : groups_)
        for (Tensor& t : g.tensors) t.clear_grad();
}

FdReport finite_difference_check(const std::function<Tensor()>& f,
                                 const std::vector<Tensor>& params, double eps,
                                 int max_coords_per_tensor) {
    if (!(eps > 0.0 && eps <= 1e-3))
        throw std::runtime_error("finite_difference_check eps must be in (0, 1e-3], got " +
                                 std::to_string(eps));

    // The audit is meaningless if f is not a pure function of the params.
    const double l0 = f().item();
    const double l1 = f().item();
    if (std::memcmp(&l0, &l1, sizeof(double)) != 0)
        throw std::runtime_error("finite_difference_check: f is not deterministic");

    for (const Tensor& p : params) const_cast<Tensor&>(p).clear_grad();
    Tensor loss = f();
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const Tensor& p : params) {
        if (!p.has_grad())
            throw std::runtime_error(
                "finite_difference_check: a parameter received no gradient");
        analytic.push_back(p.grad());
    }

    FdReport rep;
    NoGradGuard ng;
    for (size_t k = 0; k < params.size(); ++k) {
        Tensor p = params[k];
        auto& val = p.values();
        const size_t n = val.size();
        size_t stride = 1;
        if (max_coords_per_tensor > 0 && n > static_cast<size_t>(max_coords_per_tensor))
            stride = (n + max_coords_per_tensor - 1) / max_coords_per_tensor;
        for (size_t i = 0; i < n; i += stride) {
            const double saved = val[i];
            val[i] = saved + eps;
            const double lp = f().item();
            val[i] = saved - eps;
            const double lm = f().item();
            val[i] = saved;
            const double fd = (lp - lm) / (2.0 * eps);
            const double an = analytic[k][i];
            const double abs_err = std::fabs(fd - an);
            const double rel = abs_err / std::max({1.0, std::fabs(fd), std::fabs(an)});
            if (rel > rep.max_rel_err) rep.max_rel_err = rel;
            if (abs_err > rep.max_abs_err) rep.max_abs_err = abs_err;
            ++rep.coords_checked;
        }
    }
    for (const Tensor& p : params) const_cast<Tensor&>(p).clear_grad();
    return rep;
}

}  // namespace cpt
