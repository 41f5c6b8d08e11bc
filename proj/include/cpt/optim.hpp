#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cpt/tensor.hpp"

namespace cpt {

// A named set of tensors updated together. Frozen groups keep their values
// through every optimizer step no matter what gradients they carry.
struct ParamGroup {
    std::string name;
    std::vector<Tensor> tensors;
    bool frozen = false;
};

struct OptimizerConfig {
    enum class Kind { sgd, adam };
    Kind kind = Kind::adam;
    double lr = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // global-norm clip over tunable grads; 0 disables
};

class Optimizer {
  public:
    Optimizer(std::vector<ParamGroup> groups, OptimizerConfig cfg);

    // Applies one update from the gradients currently on the tunable tensors,
    // then clears all grads (frozen ones included, they are stale either way).
    // A tunable tensor with no grad is an error: the caller forgot backward().
    void step();
    void zero_grad();

    double last_grad_norm() const { return last_norm_; }
    double lr() const { return cfg_.lr; }
    void set_lr(double lr) { cfg_.lr = lr; }

    const std::vector<ParamGroup>& groups() const { return groups_; }

  private:
    std::vector<ParamGroup> groups_;
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> m_, v_;  // Adam moments, indexed like tensors
    std::vector<Tensor> tunable_;
    long long t_ = 0;
    double last_norm_ = 0.0;
};

// Central-difference gradient audit. `f` rebuilds the loss graph from the
// current parameter values; it must be deterministic, which is verified by
// evaluating it twice and comparing bits. eps must lie in (0, 1e-3].
// With max_coords_per_tensor > 0 only an evenly strided subset of each
// tensor's coordinates is probed.
struct FdReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    size_t coords_checked = 0;
};
FdReport finite_difference_check(const std::function<Tensor()>& f,
                                 const std::vector<Tensor>& params, double eps = 1e-5,
                                 int max_coords_per_tensor = 0);

}  // namespace cpt
