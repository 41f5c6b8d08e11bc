#include "cpt/tensor.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

namespace cpt {

namespace {

thread_local int g_no_grad_depth = 0;

void check(bool ok, const std::string& msg) {
    if (!ok) throw std::runtime_error(msg);
}

std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

size_t shape_numel(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
        check(d >= 0, "tensor dimension must be non-negative, got " + std::to_string(d));
        n *= static_cast<size_t>(d);
    }
    return n;
}

bool track(const std::initializer_list<Tensor>& inputs) {
    if (g_no_grad_depth > 0) return false;
    for (const Tensor& t : inputs)
        if (t.requires_grad()) return true;
    return false;
}

std::shared_ptr<TensorNode> make_node(std::vector<int> shape) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value.assign(shape_numel(n->shape), 0.0);
    return n;
}

void attach(const std::shared_ptr<TensorNode>& out,
            std::initializer_list<Tensor> parents,
            std::function<void(TensorNode&)> fn) {
    out->requires_grad = true;
    for (const Tensor& p : parents) out->parents.push_back(p.handle());
    out->backward_fn = std::move(fn);
}

}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = make_node(std::move(shape));
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::full(std::vector<int> shape, double fill, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.values()) v = fill;
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    size_t n = shape_numel(shape);
    check(n == values.size(), "tensor shape " + shape_str(shape) + " wants " +
                                  std::to_string(n) + " values, got " +
                                  std::to_string(values.size()));
    auto node = make_node(std::move(shape));
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from({1}, {v}, requires_grad);
}

double Tensor::item() const {
    check(n_ && n_->value.size() == 1,
          "item() needs a single-element tensor, got " +
              std::string(n_ ? shape_str(n_->shape) : "<empty>"));
    return n_->value[0];
}

Tensor Tensor::clone() const {
    check(n_ != nullptr, "clone() on an undefined tensor");
    auto node = make_node(n_->shape);
    node->value = n_->value;
    node->requires_grad = n_->requires_grad;
    return wrap(std::move(node));
}

// ---- elementwise -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "add shape mismatch: " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
    auto out = make_node(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + bv[i];
    if (track({a, b})) {
        attach(out, {a, b}, [a, b](TensorNode& o) {
            if (a.requires_grad()) {
                a.node()->ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) a.node()->grad[i] += o.grad[i];
            }
            if (b.requires_grad()) {
                b.node()->ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) b.node()->grad[i] += o.grad[i];
            }
        });
    }
    return Tensor::wrap(std::move(out));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "mul shape mismatch: " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
    auto out = make_node(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
    if (track({a, b})) {
        attach(out, {a, b}, [a, b](TensorNode& o) {
            if (a.requires_grad()) {
                a.node()->ensure_grad();
                const auto& bv2 = b.values();
                for (size_t i = 0; i < o.grad.size(); ++i)
                    a.node()->grad[i] += o.grad[i] * bv2[i];
            }
            if (b.requires_grad()) {
                b.node()->ensure_grad();
                const auto& av2 = a.values();
                for (size_t i = 0; i < o.grad.size(); ++i)
                    b.node()->grad[i] += o.grad[i] * av2[i];
            }
        });
    }
    return Tensor::wrap(std::move(out));
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    check(x.shape().size() == 2, "add_bias wants a matrix, got " + shape_str(x.shape()));
    check(bias.shape().size() == 1 && bias.shape()[0] == x.cols(),
          "add_bias length mismatch: " + shape_str(x.shape()) + " vs " +
              shape_str(bias.shape()));
    auto out = make_node(x.shape());
    const int r = x.rows(), c = x.cols();
    const auto& xv = x.values();
    const auto& bv = bias.values();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out->value[i * c + j] = xv[i * c + j] + bv[j];
    if (track({x, bias})) {
        attach(out, {x, bias}, [x, bias, r, c](TensorNode& o) {
            if (x.requires_grad()) {
                x.node()->ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) x.node()->grad[i] += o.grad[i];
            }
            if (bias.requires_grad()) {
                bias.node()->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) bias.node()->grad[j] += o.grad[i * c + j];
            }
        });
    }
    return Tensor::wrap(std::move(out));
}

// ---- matmul --------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] @ B[k,n]; row-major, j-inner so the compiler vectorizes.
void mm_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a_row = A + static_cast<size_t>(i) * k;
        double* c_row = C + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double a = a_row[p];
            if (a == 0.0) continue;
            const double* b_row = B + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) c_row[j] += a * b_row[j];
        }
    }
}

// C[m,n] += A[m,k] @ B[n,k]^T
void mm_nt_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a_row = A + static_cast<size_t>(i) * k;
        double* c_row = C + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* b_row = B + static_cast<size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += a_row[p] * b_row[p];
            c_row[j] += s;
        }
    }
}

// C[m,n] += A[k,m]^T @ B[k,n]
void mm_tn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const double* a_row = A + static_cast<size_t>(p) * m;
        const double* b_row = B + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double a = a_row[i];
            if (a == 0.0) continue;
            double* c_row = C + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) c_row[j] += a * b_row[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.shape().size() == 2 && b.shape().size() == 2,
          "matmul wants matrices, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
    check(a.cols() == b.rows(), "matmul inner-dim mismatch: " + shape_str(a.shape()) +
                                    " @ " + shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    auto out = make_node({m, n});
    mm_acc(a.values().data(), b.values().data(), out->value.data(), m, k, n);
    if (track({a, b})) {
        attach(out, {a, b}, [a, b, m, k, n](TensorNode& o) {
            if (a.requires_grad()) {  // dA = dC @ B^T
                a.node()->ensure_grad();
                mm_nt_acc(o.grad.data(), b.values().data(), a.node()->grad.data(), m, n, k);
            }
            if (b.requires_grad()) {  // dB = A^T @ dC
                b.node()->ensure_grad();
                mm_tn_acc(a.values().data(), o.grad.data(), b.node()->grad.data(), k, m, n);
            }
        });
    }
    return Tensor::wrap(std::move(out));
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check(a.shape().size() == 2 && b.shape().size() == 2,
          "matmul_nt wants matrices, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
    check(a.cols() == b.cols(), "matmul_nt shared-dim mismatch: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.rows();
    auto out = make_node({m, n});
    mm_nt_acc(a.values().data(), b.values().data(), out->value.data(), m, k, n);
    if (track({a, b})) {
        attach(out, {a, b}, [a, b, m, k, n](TensorNode& o) {
            if (a.requires_grad()) {  // dA = dC @ B
                a.node()->ensure_grad();
                mm_acc(o.grad.data(), b.values().data(), a.node()->grad.data(), m, n, k);
            }
            if (b.requires_grad()) {  // dB = dC^T @ A
                b.node()->ensure_grad();
                mm_tn_acc(o.grad.data(), a.values().data(), b.node()->grad.data(), n, m, k);
            }
        });
    }
    return Tensor::wrap(std::move(out));
}

// ---- gather / concat -----------------------------------------------------

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    check(table.shape().size() == 2,
          "embedding_rows wants a matrix table, got " + shape_str(table.shape()));
    const int rows = table.rows(), d = table.cols();
    for (int id : ids)
        check(id >= 0 && id < rows, "embedding id " + std::to_string(id) +
                                        " out of range [0," + std::to_string(rows) + ")");
    auto out = make_node({static_cast<int>(ids.size()), d});
    const auto& tv = table.values();
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out->value.data() + i * d, tv.data() + static_cast<size_t>(ids[i]) * d,
                    sizeof(double) * d);
    if (track({table})) {
        attach(out, {table}, [table, ids, d](TensorNode& o) {
            if (!table.requires_grad()) return;
            table.node()->ensure_grad();
            auto& tg = table.node()->grad;
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < d; ++j)
                    tg[static_cast<size_t>(ids[i]) * d + j] += o.grad[i * d + j];
        });
    }
    return Tensor::wrap(std::move(out));
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    check(a.shape().size() == 2 && b.shape().size() == 2 && a.cols() == b.cols(),
          "concat_rows wants matrices with equal width, got " + shape_str(a.shape()) +
              " and " + shape_str(b.shape()));
    const int ra = a.rows(), rb = b.rows(), c = a.cols();
    auto out = make_node({ra + rb, c});
    std::memcpy(out->value.data(), a.values().data(), sizeof(double) * a.numel());
    std::memcpy(out->value.data() + a.numel(), b.values().data(), sizeof(double) * b.numel());
    if (track({a, b})) {
        attach(out, {a, b}, [a, b, ra, rb, c](TensorNode& o) {
            const size_t na = static_cast<size_t>(ra) * c;
            if (a.requires_grad()) {
                a.node()->ensure_grad();
                for (size_t i = 0; i < na; ++i) a.node()->grad[i] += o.grad[i];
            }
            if (b.requires_grad()) {
                b.node()->ensure_grad();
                const size_t nb = static_cast<size_t>(rb) * c;
                for (size_t i = 0; i < nb; ++i) b.node()->grad[i] += o.grad[na + i];
            }
        });
    }
    return Tensor::wrap(std::move(out));
}

// ---- nonlinearities --------------------------------------------------------

Tensor relu(const Tensor& x) {
    auto out = make_node(x.shape());
    const auto& xv = x.values();
    for (size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    if (track({x})) {
        attach(out, {x}, [x](TensorNode& o) {
            if (!x.requires_grad()) return;
            x.node()->ensure_grad();
            const auto& xv2 = x.values();
            for (size_t i = 0; i < o.grad.size(); ++i)
                if (xv2[i] > 0.0) x.node()->grad[i] += o.grad[i];
        });
    }
    return Tensor::wrap(std::move(out));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    check(x.shape().size() == 2, "layer_norm wants a matrix, got " + shape_str(x.shape()));
    const int r = x.rows(), c = x.cols();
    check(gamma.shape() == std::vector<int>{c} && beta.shape() == std::vector<int>{c},
          "layer_norm gamma/beta must be length " + std::to_string(c));
    auto out = make_node(x.shape());
    // Stash per-row inverse stddev and normalized values for the backward pass.
    auto inv_std = std::make_shared<std::vector<double>>(r);
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(r) * c);
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (int i = 0; i < r; ++i) {
        const double* row = xv.data() + static_cast<size_t>(i) * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += row[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= c;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (int j = 0; j < c; ++j) {
            const double xh = (row[j] - mean) * is;
            (*xhat)[static_cast<size_t>(i) * c + j] = xh;
            out->value[static_cast<size_t>(i) * c + j] = gv[j] * xh + bv[j];
        }
    }
    if (track({x, gamma, beta})) {
        attach(out, {x, gamma, beta}, [x, gamma, beta, inv_std, xhat, r, c](TensorNode& o) {
            const auto& gv2 = gamma.values();
            if (gamma.requires_grad()) gamma.node()->ensure_grad();
            if (beta.requires_grad()) beta.node()->ensure_grad();
            if (x.requires_grad()) x.node()->ensure_grad();
            for (int i = 0; i < r; ++i) {
                const double* go = o.grad.data() + static_cast<size_t>(i) * c;
                const double* xh = xhat->data() + static_cast<size_t>(i) * c;
                if (gamma.requires_grad())
                    for (int j = 0; j < c; ++j) gamma.node()->grad[j] += go[j] * xh[j];
                if (beta.requires_grad())
                    for (int j = 0; j < c; ++j) beta.node()->grad[j] += go[j];
                if (x.requires_grad()) {
                    // dx = is * (dxh - mean(dxh) - xh * mean(dxh * xh))
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < c; ++j) {
                        const double dxh = go[j] * gv2[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= c;
                    m2 /= c;
                    const double is = (*inv_std)[i];
                    double* gx = x.node()->grad.data() + static_cast<size_t>(i) * c;
                    for (int j = 0; j < c; ++j) {
                        const double dxh = go[j] * gv2[j];
                        gx[j] += is * (dxh - m1 - xh[j] * m2);
                    }
                }
            }
        });
    }
    return Tensor::wrap(std::move(out));
}

// ---- attention ------------------------------------------------------------

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           int n_heads, bool causal) {
    check(q.shape().size() == 2 && k.shape().size() == 2 && v.shape().size() == 2,
          "attention wants matrices");
    const int lq = q.rows(), lk = k.rows(), d = q.cols();
    check(k.cols() == d && v.cols() == d && v.rows() == lk,
          "attention shape mismatch: q " + shape_str(q.shape()) + " k " +
              shape_str(k.shape()) + " v " + shape_str(v.shape()));
    check(n_heads > 0 && d % n_heads == 0, "attention width " + std::to_string(d) +
                                               " not divisible by " +
                                               std::to_string(n_heads) + " heads");
    check(!causal || lq == lk, "causal attention wants square score matrix");
    const int dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    auto out = make_node({lq, d});
    // Attention probabilities per head, kept for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(
        static_cast<size_t>(n_heads) * lq * lk, 0.0);

    const double* qv = q.values().data();
    const double* kv = k.values().data();
    const double* vv = v.values().data();
    std::vector<double> scores(lk);
    for (int h = 0; h < n_heads; ++h) {
        const int off = h * dh;
        double* hp = probs->data() + static_cast<size_t>(h) * lq * lk;
        for (int i = 0; i < lq; ++i) {
            const int jmax = causal ? i + 1 : lk;
            const double* qi = qv + static_cast<size_t>(i) * d + off;
            double mx = -1e300;
            for (int j = 0; j < jmax; ++j) {
                const double* kj = kv + static_cast<size_t>(j) * d + off;
                double s = 0.0;
                for (int t = 0; t < dh; ++t) s += qi[t] * kj[t];
                s *= scale;
                scores[j] = s;
                if (s > mx) mx = s;
            }
            double z = 0.0;
            for (int j = 0; j < jmax; ++j) {
                const double e = std::exp(scores[j] - mx);
                scores[j] = e;
                z += e;
            }
            double* pi = hp + static_cast<size_t>(i) * lk;
            double* oi = out->value.data() + static_cast<size_t>(i) * d + off;
            for (int j = 0; j < jmax; ++j) {
                const double p = scores[j] / z;
                pi[j] = p;
                const double* vj = vv + static_cast<size_t>(j) * d + off;
                for (int t = 0; t < dh; ++t) oi[t] += p * vj[t];
            }
        }
    }

    if (track({q, k, v})) {
        attach(out, {q, k, v},
               [q, k, v, probs, n_heads, dh, d, lq, lk, scale, causal](TensorNode& o) {
                   if (q.requires_grad()) q.node()->ensure_grad();
                   if (k.requires_grad()) k.node()->ensure_grad();
                   if (v.requires_grad()) v.node()->ensure_grad();
                   const double* qv2 = q.values().data();
                   const double* kv2 = k.values().data();
                   const double* vv2 = v.values().data();
                   std::vector<double> dp(lk);
                   for (int h = 0; h < n_heads; ++h) {
                       const int off = h * dh;
                       const double* hp = probs->data() + static_cast<size_t>(h) * lq * lk;
                       for (int i = 0; i < lq; ++i) {
                           const int jmax = causal ? i + 1 : lk;
                           const double* go = o.grad.data() + static_cast<size_t>(i) * d + off;
                           const double* pi = hp + static_cast<size_t>(i) * lk;
                           // dV += p * dO; dP = dO . V
                           double dot = 0.0;
                           for (int j = 0; j < jmax; ++j) {
                               const double* vj = vv2 + static_cast<size_t>(j) * d + off;
                               double s = 0.0;
                               for (int t = 0; t < dh; ++t) s += go[t] * vj[t];
                               dp[j] = s;
                               dot += s * pi[j];
                               if (v.requires_grad()) {
                                   double* gv = v.node()->grad.data() +
                                                static_cast<size_t>(j) * d + off;
                                   const double p = pi[j];
                                   for (int t = 0; t < dh; ++t) gv[t] += p * go[t];
                               }
                           }
                           // softmax backward then scores -> q, k
                           const double* qi = qv2 + static_cast<size_t>(i) * d + off;
                           double* gq = q.requires_grad()
                                            ? q.node()->grad.data() +
                                                  static_cast<size_t>(i) * d + off
                                            : nullptr;
                           for (int j = 0; j < jmax; ++j) {
                               const double ds = pi[j] * (dp[j] - dot) * scale;
                               if (ds == 0.0) continue;
                               const double* kj = kv2 + static_cast<size_t>(j) * d + off;
                               if (gq)
                                   for (int t = 0; t < dh; ++t) gq[t] += ds * kj[t];
                               if (k.requires_grad()) {
                                   double* gk = k.node()->grad.data() +
                                                static_cast<size_t>(j) * d + off;
                                   for (int t = 0; t < dh; ++t) gk[t] += ds * qi[t];
                               }
                           }
                       }
                   }
               });
    }
    return Tensor::wrap(std::move(out));
}

// ---- loss -------------------------------------------------------------------

Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets) {
    check(logits.shape().size() == 2,
          "cross_entropy wants a matrix of logits, got " + shape_str(logits.shape()));
    const int r = logits.rows(), c = logits.cols();
    check(static_cast<int>(targets.size()) == r,
          "cross_entropy has " + std::to_string(r) + " rows but " +
              std::to_string(targets.size()) + " targets");
    for (int t : targets)
        check(t >= 0 && t < c, "cross_entropy target " + std::to_string(t) +
                                   " out of range [0," + std::to_string(c) + ")");
    auto out = make_node({1});
    // Softmax probabilities are needed verbatim in the backward pass.
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(r) * c);
    const auto& lv = logits.values();
    double total = 0.0;
    for (int i = 0; i < r; ++i) {
        const double* row = lv.data() + static_cast<size_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j)
            if (row[j] > mx) mx = row[j];
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        const double logz = mx + std::log(z);
        total += logz - row[targets[i]];
        double* p = probs->data() + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) p[j] = std::exp(row[j] - logz);
    }
    out->value[0] = total;
    if (track({logits})) {
        attach(out, {logits}, [logits, probs, targets, r, c](TensorNode& o) {
            if (!logits.requires_grad()) return;
            logits.node()->ensure_grad();
            const double g = o.grad[0];
            auto& lg = logits.node()->grad;
            const double* p = probs->data();
            for (int i = 0; i < r; ++i) {
                double* row = lg.data() + static_cast<size_t>(i) * c;
                const double* pi = p + static_cast<size_t>(i) * c;
                for (int j = 0; j < c; ++j) row[j] += g * pi[j];
                row[targets[i]] -= g;
            }
        });
    }
    return Tensor::wrap(std::move(out));
}

Tensor add_scalars(const std::vector<Tensor>& xs) {
    check(!xs.empty(), "add_scalars wants at least one input");
    double total = 0.0;
    bool any_grad = false;
    for (const Tensor& t : xs) {
        check(t.numel() == 1, "add_scalars input must be scalar, got " + shape_str(t.shape()));
        total += t.values()[0];
        if (t.requires_grad()) any_grad = true;
    }
    auto out = make_node({1});
    out->value[0] = total;
    if (grad_enabled() && any_grad) {
        out->requires_grad = true;
        for (const Tensor& t : xs) out->parents.push_back(t.handle());
        std::vector<Tensor> held = xs;
        out->backward_fn = [held](TensorNode& o) {
            for (const Tensor& t : held) {
                if (!t.requires_grad()) continue;
                t.node()->ensure_grad();
                t.node()->grad[0] += o.grad[0];
            }
        };
    }
    return Tensor::wrap(std::move(out));
}

// ---- backward ----------------------------------------------------------------

void backward(const Tensor& loss) {
    check(loss.defined() && loss.numel() == 1, "backward() wants a scalar loss");
    check(std::isfinite(loss.values()[0]),
          "backward() on a non-finite loss: " + std::to_string(loss.values()[0]));
    if (!loss.requires_grad()) return;

    // Iterative post-order toposort; recursion would overflow on long chains.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

// ---- utilities -----------------------------------------------------------------

uint64_t byte_hash(const std::vector<double>& v, uint64_t seed) {
    // FNV-1a over the raw bytes; equal hashes mean bit-identical contents.
    uint64_t h = seed;
    const unsigned char* p = reinterpret_cast<const unsigned char*>(v.data());
    const size_t n = v.size() * sizeof(double);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t byte_hash(const Tensor& t, uint64_t seed) { return byte_hash(t.values(), seed); }

bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace cpt
