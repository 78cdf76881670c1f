#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "fourierage/tensor.hpp"

namespace fourierage::ag {

struct Node;
using Var = std::shared_ptr<Node>;

// One entry of the reverse-mode tape. The tape is the implicit DAG formed by
// `inputs` references; backward() walks it once in reverse topological order.
struct Node {
    Tensor value;
    Tensor grad;  // same shape as value once allocated
    std::vector<Var> inputs;
    std::function<void(Node&)> backprop;  // accumulates this node's grad into its inputs
    bool requires_grad = false;
    bool grad_ready = false;
    const char* op = "leaf";

    Tensor& ensure_grad() {
        if (!grad_ready) {
            grad = Tensor::zeros(value.shape());
            grad_ready = true;
        }
        return grad;
    }
};

// Leaf constructors. Constants never receive gradients; params do.
Var constant(Tensor value);
Var param(Tensor value);

// Accumulates dRoot/dLeaf into every reachable node that requires a gradient.
// `root` must be scalar (1-element); throws ContractError otherwise.
void backward(const Var& root);

void zero_grad(const std::vector<Var>& params);

// --- elementwise ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var abs(const Var& x);
Var leaky_relu(const Var& x, float slope);
Var scale(const Var& x, float s);
Var add_scalar(const Var& x, float s);

// --- shape ---
Var reshape(const Var& x, std::vector<int> shape);
Var concat(const std::vector<Var>& xs, int axis);
Var slice(const Var& x, int axis, int start, int len);
Var transpose(const Var& x);  // rank-2 only
Var take(const Var& x, std::vector<std::int64_t> flat_indices);
Var take_rows(const Var& table, std::vector<int> row_ids);

// --- reductions ---
Var sum(const Var& x);
Var mean(const Var& x);
// Mean over all leading axes, keeping the last axis: [..., D] -> [D].
Var mean_tokens(const Var& x);
Var softmax_rows(const Var& x);  // [N, M], softmax over M

// --- linear algebra / NN ---
Var matmul(const Var& a, const Var& b);                 // [m,k] x [k,n]
Var add_bias(const Var& x, const Var& b);               // b broadcast over leading axes
Var pointwise_conv(const Var& x, const Var& w, const Var& b);  // [..,Cin] x [Cin,Cout]
Var depthwise_conv3x3(const Var& x, const Var& kernels, const Var& bias);  // [H,W,C]
// gamma/beta may be null for a plain (non-affine) normalization.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);
Var l2_normalize_rows(const Var& x);                    // [N,D], unit rows
// Fused softmax(q kT / sqrt(D)) v; row-blocked so no [T,T] buffer is held.
Var softmax_attention(const Var& q, const Var& k, const Var& v);

// --- gradient oracle ---
// Max over coordinates of |analytic - central difference| / (|analytic| + |central| + 1e-8).
// The difference quotient is evaluated in 64-bit.
double finite_diff_check(const std::function<Var(const Var&)>& f, const Tensor& params,
                         float step = 1e-3f);
double finite_diff_check(const std::function<Var(const std::vector<Var>&)>& f,
                         const std::vector<Tensor>& params, float step = 1e-3f);

}  // namespace fourierage::ag
