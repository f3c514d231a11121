#pragma once

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "fieldseg/tensor.hpp"

namespace fieldseg::ag {

class Node;
using Var = std::shared_ptr<Node>;

/// One value in the computation graph. Leaves are parameters or constants;
/// interior nodes carry a backward closure that scatters the incoming
/// gradient into their parents.
class Node {
public:
    Tensor value;
    Tensor grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    bool is_leaf = true;
    std::string name;  // set for named parameters only

    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (grad.empty() && value.numel() > 0) grad = Tensor::zeros(value.shape());
        return grad;
    }
    void zero_grad() { grad = Tensor(); }
    bool has_grad() const { return !grad.empty(); }
};

/// Leaf factory: trainable flag decides whether gradients accumulate here.
Var make_leaf(Tensor value, bool requires_grad, std::string name = "");
Var constant(Tensor value);

/// Grad mode. When disabled, ops compute values only and record no graph.
bool grad_enabled();
void set_grad_enabled(bool on);
struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- elementwise / arithmetic ----
Var add(const Var& a, const Var& b);           // same shape
Var sub(const Var& a, const Var& b);           // same shape
Var hadamard(const Var& a, const Var& b);      // same shape
Var scale(const Var& a, float s);
Var add_scalar(const Var& a, float s);
Var relu(const Var& x);
Var gelu(const Var& x);
Var sigmoid(const Var& x);

// ---- matrix ops (rank-2 operands) ----
Var matmul(const Var& a, const Var& b);                       // [m,k]x[k,n]
Var linear(const Var& x, const Var& w, const Var& b);         // x[n,k], w[m,k], b[m] -> [n,m]
Var linear_nobias(const Var& x, const Var& w);
Var transpose(const Var& x);
Var softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-6f);

// ---- shape / indexing ----
Var reshape(const Var& x, std::vector<int64_t> shape);
Var slice_cols(const Var& x, int64_t c0, int64_t c1);
Var slice_rows(const Var& x, int64_t r0, int64_t r1);
Var concat_rows(const std::vector<Var>& xs);
Var concat_cols(const std::vector<Var>& xs);
/// Generic index-map copy: out[i] = index[i] < 0 ? 0 : x[index[i]].
/// Backward scatter-adds. Covers patchify, im2col, depth-to-space.
Var gather(const Var& x, std::shared_ptr<const std::vector<int64_t>> index,
           std::vector<int64_t> out_shape);
Var pick(const Var& x, int64_t flat_index);  // -> [1]

// ---- reductions ----
Var sum_all(const Var& x);   // -> [1]
Var mean_all(const Var& x);  // -> [1]

// ---- image-space ----
/// Bilinear resize of a single-channel [h,w] map (align_corners=false).
Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w);

// ---- fused losses (gradient derived analytically, checked in tests) ----
Var focal_loss_with_logits(const Var& logits, const Tensor& target, float alpha, float gamma);
Var dice_loss_with_logits(const Var& logits, const Tensor& target, float eps = 1.0f);

/// Reverse-mode sweep from a scalar root. Accumulates into .grad of every
/// node on the path that requires grad.
void backward(const Var& root);

// ---- init helpers ----
void fill_normal(Tensor& t, std::mt19937& rng, float mean, float stddev);
void fill_uniform(Tensor& t, std::mt19937& rng, float lo, float hi);

}  // namespace fieldseg::ag
