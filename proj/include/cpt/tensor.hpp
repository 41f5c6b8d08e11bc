#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace cpt {

// Reverse-mode autodiff over dense row-major double tensors. A Tensor is a
// shared handle to a graph node; ops record parents and a backward closure
// only while grad mode is on and at least one input requires gradients.
// Graphs are single-threaded per training session (thread_local grad mode).

struct TensorNode {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until a backward pass reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    size_t numel() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double fill, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<double> values,
                       bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    size_t numel() const { return n_->value.size(); }
    int rows() const { return n_->shape.at(0); }
    int cols() const { return n_->shape.at(1); }

    std::vector<double>& values() { return n_->value; }
    const std::vector<double>& values() const { return n_->value; }
    double item() const;

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool b) { n_->requires_grad = b; }

    bool has_grad() const { return !n_->grad.empty(); }
    std::vector<double>& grad() { return n_->grad; }
    const std::vector<double>& grad() const { return n_->grad; }
    void clear_grad() { n_->grad.clear(); }

    // Deep copy of values only; the copy is a fresh leaf.
    Tensor clone() const;

    TensorNode* node() const { return n_.get(); }

    static Tensor wrap(std::shared_ptr<TensorNode> n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }
    const std::shared_ptr<TensorNode>& handle() const { return n_; }

  private:
    std::shared_ptr<TensorNode> n_;
};

// Grad-mode guard: ops executed while a NoGradGuard is alive compute values
// only and record nothing. Thread-local, nestable.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// ---- ops -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& x, const Tensor& bias);     // [r,c] + [c]
Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k] @ [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);       // [m,k] @ [n,k]^T
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
// q [Lq,d], k/v [Lk,d]; d divisible by n_heads; causal masks j > i.
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           int n_heads, bool causal);
// Sum over rows of -log softmax(logits_row)[target]; stable log-sum-exp.
Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets);
Tensor add_scalars(const std::vector<Tensor>& xs);

// ---- backward --------------------------------------------------------

// Populates grads on every requires-grad node reachable from `loss`.
// `loss` must be scalar; its value must be finite.
void backward(const Tensor& loss);

// ---- small utilities ---------------------------------------------------

uint64_t byte_hash(const std::vector<double>& v, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t byte_hash(const Tensor& t, uint64_t seed = 0xcbf29ce484222325ull);
bool all_finite(const std::vector<double>& v);

}  // namespace cpt
