#include "fourierage/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace fourierage::ag {

namespace {

Var make_node(Tensor value, std::vector<Var> inputs, const char* op,
              std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    n->op = op;
    bool rg = false;
    for (const auto& in : n->inputs) rg = rg || in->requires_grad;
    n->requires_grad = rg;
    if (rg) n->backprop = std::move(backprop);
    return n;
}

// Accumulate g into the gradient buffer of `in` if it participates in autodiff.
void accum(const Var& in, const Tensor& g) {
    if (!in->requires_grad) return;
    Tensor& dst = in->ensure_grad();
    const float* src = g.data();
    float* d = dst.data();
    const std::int64_t n = g.size();
    for (std::int64_t i = 0; i < n; ++i) d[i] += src[i];
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value)) {
        throw DimensionError(std::string(op) + ": shape mismatch " + a->value.shape_string() +
                             " vs " + b->value.shape_string());
    }
}

Var elementwise_binary(const Var& a, const Var& b, const char* op,
                       const std::function<float(float, float)>& f,
                       const std::function<void(float, float, float, float&, float&)>& df) {
    check_same_shape(a, b, op);
    Tensor out(a->value.shape());
    const std::int64_t n = out.size();
    for (std::int64_t i = 0; i < n; ++i) out[i] = f(a->value[i], b->value[i]);
    return make_node(std::move(out), {a, b}, op, [f, df](Node& node) {
        const Var& a = node.inputs[0];
        const Var& b = node.inputs[1];
        Tensor ga = Tensor::zeros(a->value.shape());
        Tensor gb = Tensor::zeros(b->value.shape());
        const std::int64_t n = node.value.size();
        for (std::int64_t i = 0; i < n; ++i) {
            float da = 0.0f, db = 0.0f;
            df(a->value[i], b->value[i], node.grad[i], da, db);
            ga[i] = da;
            gb[i] = db;
        }
        accum(a, ga);
        accum(b, gb);
    });
}

Var elementwise_unary(const Var& x, const char* op, const std::function<float(float)>& f,
                      const std::function<float(float, float)>& df /* (x, y) -> dy/dx */) {
    Tensor out(x->value.shape());
    const std::int64_t n = out.size();
    for (std::int64_t i = 0; i < n; ++i) out[i] = f(x->value[i]);
    return make_node(std::move(out), {x}, op, [df](Node& node) {
        const Var& x = node.inputs[0];
        Tensor gx = Tensor::zeros(x->value.shape());
        const std::int64_t n = node.value.size();
        for (std::int64_t i = 0; i < n; ++i) gx[i] = node.grad[i] * df(x->value[i], node.value[i]);
        accum(x, gx);
    });
}

// Plain m x k by k x n accumulation; ikj order keeps B and C row accesses contiguous.
void matmul_kernel(const float* a, const float* b, float* c, int m, int k, int n) {
    std::memset(c, 0, sizeof(float) * static_cast<std::size_t>(m) * static_cast<std::size_t>(n));
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::int64_t>(i) * k;
        float* crow = c + static_cast<std::int64_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            if (av == 0.0f) continue;
            const float* brow = b + static_cast<std::int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,n] += a[k,m]^T b[k,n]
void matmul_at_b_accum(const float* a, const float* b, float* c, int k, int m, int n) {
    for (int kk = 0; kk < k; ++kk) {
        const float* arow = a + static_cast<std::int64_t>(kk) * m;
        const float* brow = b + static_cast<std::int64_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const float av = arow[i];
            if (av == 0.0f) continue;
            float* crow = c + static_cast<std::int64_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,n] += a[m,k] b[n,k]^T
void matmul_a_bt_accum(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::int64_t>(i) * k;
        float* crow = c + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + static_cast<std::int64_t>(j) * k;
            float acc = 0.0f;
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

void softmax_row_inplace(float* row, int n) {
    float mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        denom += row[j];
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int j = 0; j < n; ++j) row[j] *= inv;
}

}  // namespace

Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = "const";
    return n;
}

Var param(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->op = "param";
    return n;
}

void backward(const Var& root) {
    if (root->value.size() != 1) {
        throw ContractError("backward root must be scalar, got " + root->value.shape_string());
    }
    // Iterative post-order DFS; reverse of the order is a valid reverse-topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next].get();
            ++next;
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backprop && node->requires_grad) {
            node->ensure_grad();
            node->backprop(*node);
        }
    }
}

void zero_grad(const std::vector<Var>& params) {
    for (const auto& p : params) {
        p->grad_ready = false;
        p->grad = Tensor();
    }
}

Var add(const Var& a, const Var& b) {
    return elementwise_binary(
        a, b, "add", [](float x, float y) { return x + y; },
        [](float, float, float g, float& da, float& db) { da = g; db = g; });
}

Var sub(const Var& a, const Var& b) {
    return elementwise_binary(
        a, b, "sub", [](float x, float y) { return x - y; },
        [](float, float, float g, float& da, float& db) { da = g; db = -g; });
}

Var mul(const Var& a, const Var& b) {
    return elementwise_binary(
        a, b, "mul", [](float x, float y) { return x * y; },
        [](float x, float y, float g, float& da, float& db) {
            da = g * y;
            db = g * x;
        });
}

Var div(const Var& a, const Var& b) {
    return elementwise_binary(
        a, b, "div", [](float x, float y) { return x / y; },
        [](float x, float y, float g, float& da, float& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

Var exp(const Var& x) {
    return elementwise_unary(
        x, "exp", [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Var log(const Var& x) {
    return elementwise_unary(
        x, "log", [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

Var sqrt(const Var& x) {
    return elementwise_unary(
        x, "sqrt", [](float v) { return std::sqrt(v); },
        [](float, float y) { return 0.5f / y; });
}

Var abs(const Var& x) {
    return elementwise_unary(
        x, "abs", [](float v) { return std::fabs(v); },
        [](float v, float) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

Var leaky_relu(const Var& x, float slope) {
    if (!(slope > 0.0f && slope < 1.0f)) {
        throw ContractError("leaky_relu slope must be in (0,1)");
    }
    // Subgradient at 0 follows the negative branch (slope).
    return elementwise_unary(
        x, "leaky_relu", [slope](float v) { return v > 0.0f ? v : slope * v; },
        [slope](float v, float) { return v > 0.0f ? 1.0f : slope; });
}

Var scale(const Var& x, float s) {
    return elementwise_unary(
        x, "scale", [s](float v) { return s * v; }, [s](float, float) { return s; });
}

Var add_scalar(const Var& x, float s) {
    return elementwise_unary(
        x, "add_scalar", [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

Var reshape(const Var& x, std::vector<int> shape) {
    Tensor out = x->value.reshaped(std::move(shape));
    return make_node(std::move(out), {x}, "reshape", [](Node& node) {
        accum(node.inputs[0], node.grad.reshaped(node.inputs[0]->value.shape()));
    });
}

Var concat(const std::vector<Var>& xs, int axis) {
    if (xs.empty()) throw ContractError("concat: empty input list");
    const int rank = xs[0]->value.rank();
    if (axis < 0 || axis >= rank) throw DimensionError("concat: bad axis");
    std::vector<int> out_shape = xs[0]->value.shape();
    for (std::size_t i = 1; i < xs.size(); ++i) {
        const auto& s = xs[i]->value.shape();
        if (static_cast<int>(s.size()) != rank) throw DimensionError("concat: rank mismatch");
        for (int a = 0; a < rank; ++a) {
            if (a != axis && s[static_cast<std::size_t>(a)] != out_shape[static_cast<std::size_t>(a)]) {
                throw DimensionError("concat: shape mismatch off the concat axis");
            }
        }
        out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
    }
    // outer x axis x inner decomposition of the row-major layout
    std::int64_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= out_shape[static_cast<std::size_t>(a)];
    for (int a = axis + 1; a < rank; ++a) inner *= out_shape[static_cast<std::size_t>(a)];

    Tensor out(out_shape);
    std::int64_t offset = 0;  // in axis units
    const std::int64_t out_axis = out_shape[static_cast<std::size_t>(axis)];
    for (const auto& x : xs) {
        const std::int64_t ax = x->value.dim(axis);
        for (std::int64_t o = 0; o < outer; ++o) {
            const float* src = x->value.data() + o * ax * inner;
            float* dst = out.data() + (o * out_axis + offset) * inner;
            std::memcpy(dst, src, sizeof(float) * static_cast<std::size_t>(ax * inner));
        }
        offset += ax;
    }
    return make_node(std::move(out), std::vector<Var>(xs), "concat", [axis, outer, inner](Node& node) {
        const std::int64_t out_axis = node.value.dim(axis);
        std::int64_t offset = 0;
        for (const auto& x : node.inputs) {
            const std::int64_t ax = x->value.dim(axis);
            if (x->requires_grad) {
                Tensor gx = Tensor::zeros(x->value.shape());
                for (std::int64_t o = 0; o < outer; ++o) {
                    const float* src = node.grad.data() + (o * out_axis + offset) * inner;
                    float* dst = gx.data() + o * ax * inner;
                    std::memcpy(dst, src, sizeof(float) * static_cast<std::size_t>(ax * inner));
                }
                accum(x, gx);
            }
            offset += ax;
        }
    });
}

Var slice(const Var& x, int axis, int start, int len) {
    const int rank = x->value.rank();
    if (axis < 0 || axis >= rank) throw DimensionError("slice: bad axis");
    const int ax = x->value.dim(axis);
    if (start < 0 || len < 1 || start + len > ax) throw DimensionError("slice: bad range");
    std::vector<int> out_shape = x->value.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    std::int64_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= x->value.dim(a);
    for (int a = axis + 1; a < rank; ++a) inner *= x->value.dim(a);

    Tensor out(out_shape);
    for (std::int64_t o = 0; o < outer; ++o) {
        const float* src = x->value.data() + (o * ax + start) * inner;
        float* dst = out.data() + o * len * inner;
        std::memcpy(dst, src, sizeof(float) * static_cast<std::size_t>(len) * static_cast<std::size_t>(inner));
    }
    return make_node(std::move(out), {x}, "slice", [axis, start, len, outer, inner](Node& node) {
        const Var& x = node.inputs[0];
        const std::int64_t ax = x->value.dim(axis);
        Tensor gx = Tensor::zeros(x->value.shape());
        for (std::int64_t o = 0; o < outer; ++o) {
            const float* src = node.grad.data() + o * len * inner;
            float* dst = gx.data() + (o * ax + start) * inner;
            std::memcpy(dst, src, sizeof(float) * static_cast<std::size_t>(len) * static_cast<std::size_t>(inner));
        }
        accum(x, gx);
    });
}

Var transpose(const Var& x) {
    if (x->value.rank() != 2) throw DimensionError("transpose: rank-2 tensor required");
    const int m = x->value.dim(0), n = x->value.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<std::int64_t>(j) * m + i] = x->value[static_cast<std::int64_t>(i) * n + j];
    return make_node(std::move(out), {x}, "transpose", [m, n](Node& node) {
        Tensor gx = Tensor::zeros(node.inputs[0]->value.shape());
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i)
                gx[static_cast<std::int64_t>(i) * n + j] = node.grad[static_cast<std::int64_t>(j) * m + i];
        accum(node.inputs[0], gx);
    });
}

Var take(const Var& x, std::vector<std::int64_t> flat_indices) {
    if (flat_indices.empty()) throw ContractError("take: empty index list");
    Tensor out({static_cast<int>(flat_indices.size())});
    for (std::size_t i = 0; i < flat_indices.size(); ++i) {
        const std::int64_t idx = flat_indices[i];
        if (idx < 0 || idx >= x->value.size()) throw DimensionError("take: index out of range");
        out[static_cast<std::int64_t>(i)] = x->value[idx];
    }
    return make_node(std::move(out), {x}, "take", [idx = std::move(flat_indices)](Node& node) {
        Tensor gx = Tensor::zeros(node.inputs[0]->value.shape());
        for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += node.grad[static_cast<std::int64_t>(i)];
        accum(node.inputs[0], gx);
    });
}

Var take_rows(const Var& table, std::vector<int> row_ids) {
    if (table->value.rank() != 2) throw DimensionError("take_rows: rank-2 table required");
    const int rows = table->value.dim(0), cols = table->value.dim(1);
    Tensor out({static_cast<int>(row_ids.size()), cols});
    for (std::size_t i = 0; i < row_ids.size(); ++i) {
        const int r = row_ids[i];
        if (r < 0 || r >= rows) throw DimensionError("take_rows: row id out of range");
        std::memcpy(out.data() + static_cast<std::int64_t>(i) * cols,
                    table->value.data() + static_cast<std::int64_t>(r) * cols,
                    sizeof(float) * static_cast<std::size_t>(cols));
    }
    return make_node(std::move(out), {table}, "take_rows", [ids = std::move(row_ids), cols](Node& node) {
        Tensor gt = Tensor::zeros(node.inputs[0]->value.shape());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const float* src = node.grad.data() + static_cast<std::int64_t>(i) * cols;
            float* dst = gt.data() + static_cast<std::int64_t>(ids[i]) * cols;
            for (int c = 0; c < cols; ++c) dst[c] += src[c];
        }
        accum(node.inputs[0], gt);
    });
}

Var sum(const Var& x) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < x->value.size(); ++i) acc += x->value[i];
    return make_node(Tensor::scalar(static_cast<float>(acc)), {x}, "sum", [](Node& node) {
        const float g = node.grad[0];
        accum(node.inputs[0], Tensor::full(node.inputs[0]->value.shape(), g));
    });
}

Var mean(const Var& x) {
    const std::int64_t n = x->value.size();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += x->value[i];
    return make_node(Tensor::scalar(static_cast<float>(acc / static_cast<double>(n))), {x}, "mean",
                     [n](Node& node) {
                         const float g = node.grad[0] / static_cast<float>(n);
                         accum(node.inputs[0], Tensor::full(node.inputs[0]->value.shape(), g));
                     });
}

Var mean_tokens(const Var& x) {
    const int d = x->value.dim(x->value.rank() - 1);
    const std::int64_t m = x->value.size() / d;
    Tensor out({d});
    std::vector<double> acc(static_cast<std::size_t>(d), 0.0);
    for (std::int64_t t = 0; t < m; ++t) {
        const float* row = x->value.data() + t * d;
        for (int j = 0; j < d; ++j) acc[static_cast<std::size_t>(j)] += row[j];
    }
    for (int j = 0; j < d; ++j) out[j] = static_cast<float>(acc[static_cast<std::size_t>(j)] / static_cast<double>(m));
    return make_node(std::move(out), {x}, "mean_tokens", [d, m](Node& node) {
        Tensor gx = Tensor::zeros(node.inputs[0]->value.shape());
        for (std::int64_t t = 0; t < m; ++t) {
            float* row = gx.data() + t * d;
            for (int j = 0; j < d; ++j) row[j] = node.grad[j] / static_cast<float>(m);
        }
        accum(node.inputs[0], gx);
    });
}

Var softmax_rows(const Var& x) {
    if (x->value.rank() != 2) throw DimensionError("softmax_rows: rank-2 tensor required");
    const int n = x->value.dim(0), m = x->value.dim(1);
    Tensor out = x->value;
    for (int i = 0; i < n; ++i) softmax_row_inplace(out.data() + static_cast<std::int64_t>(i) * m, m);
    return make_node(std::move(out), {x}, "softmax_rows", [n, m](Node& node) {
        Tensor gx = Tensor::zeros(node.inputs[0]->value.shape());
        for (int i = 0; i < n; ++i) {
            const float* p = node.value.data() + static_cast<std::int64_t>(i) * m;
            const float* g = node.grad.data() + static_cast<std::int64_t>(i) * m;
            float* out = gx.data() + static_cast<std::int64_t>(i) * m;
            double dot = 0.0;
            for (int j = 0; j < m; ++j) dot += static_cast<double>(g[j]) * p[j];
            for (int j = 0; j < m; ++j) out[j] = p[j] * (g[j] - static_cast<float>(dot));
        }
        accum(node.inputs[0], gx);
    });
}

Var matmul(const Var& a, const Var& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(1) != b->value.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + a->value.shape_string() + " x " +
                             b->value.shape_string());
    }
    const int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    Tensor out({m, n});
    matmul_kernel(a->value.data(), b->value.data(), out.data(), m, k, n);
    return make_node(std::move(out), {a, b}, "matmul", [m, k, n](Node& node) {
        const Var& a = node.inputs[0];
        const Var& b = node.inputs[1];
        if (a->requires_grad) {
            Tensor ga = Tensor::zeros(a->value.shape());
            matmul_a_bt_accum(node.grad.data(), b->value.data(), ga.data(), m, n, k);
            accum(a, ga);
        }
        if (b->requires_grad) {
            Tensor gb = Tensor::zeros(b->value.shape());
            matmul_at_b_accum(a->value.data(), node.grad.data(), gb.data(), m, k, n);
            accum(b, gb);
        }
    });
}

Var add_bias(const Var& x, const Var& b) {
    if (b->value.rank() != 1 || x->value.dim(x->value.rank() - 1) != b->value.dim(0)) {
        throw DimensionError("add_bias: bias must match last axis");
    }
    const int d = b->value.dim(0);
    const std::int64_t m = x->value.size() / d;
    Tensor out = x->value;
    for (std::int64_t t = 0; t < m; ++t) {
        float* row = out.data() + t * d;
        for (int j = 0; j < d; ++j) row[j] += b->value[j];
    }
    return make_node(std::move(out), {x, b}, "add_bias", [d, m](Node& node) {
        accum(node.inputs[0], node.grad);
        if (node.inputs[1]->requires_grad) {
            Tensor gb = Tensor::zeros({d});
            for (std::int64_t t = 0; t < m; ++t) {
                const float* row = node.grad.data() + t * d;
                for (int j = 0; j < d; ++j) gb[j] += row[j];
            }
            accum(node.inputs[1], gb);
        }
    });
}

Var pointwise_conv(const Var& x, const Var& w, const Var& b) {
    if (w->value.rank() != 2) throw DimensionError("pointwise_conv: weight must be [Cin,Cout]");
    const int cin = w->value.dim(0), cout = w->value.dim(1);
    if (x->value.dim(x->value.rank() - 1) != cin) {
        throw DimensionError("pointwise_conv: input channels " +
                             std::to_string(x->value.dim(x->value.rank() - 1)) + " != weight Cin " +
                             std::to_string(cin));
    }
    if (b->value.rank() != 1 || b->value.dim(0) != cout) {
        throw DimensionError("pointwise_conv: bias must be [Cout]");
    }
    const std::int64_t m = x->value.size() / cin;
    std::vector<int> out_shape = x->value.shape();
    out_shape.back() = cout;
    Tensor out(out_shape);
    matmul_kernel(x->value.data(), w->value.data(), out.data(), static_cast<int>(m), cin, cout);
    for (std::int64_t t = 0; t < m; ++t) {
        float* row = out.data() + t * cout;
        for (int j = 0; j < cout; ++j) row[j] += b->value[j];
    }
    return make_node(std::move(out), {x, w, b}, "pointwise_conv", [m, cin, cout](Node& node) {
        const Var& x = node.inputs[0];
        const Var& w = node.inputs[1];
        const Var& b = node.inputs[2];
        if (x->requires_grad) {
            Tensor gx = Tensor::zeros(x->value.shape());
            matmul_a_bt_accum(node.grad.data(), w->value.data(), gx.data(), static_cast<int>(m), cout, cin);
            accum(x, gx);
        }
        if (w->requires_grad) {
            Tensor gw = Tensor::zeros(w->value.shape());
            matmul_at_b_accum(x->value.data(), node.grad.data(), gw.data(), static_cast<int>(m), cin, cout);
            accum(w, gw);
        }
        if (b->requires_grad) {
            Tensor gb = Tensor::zeros({cout});
            for (std::int64_t t = 0; t < m; ++t) {
                const float* row = node.grad.data() + t * cout;
                for (int j = 0; j < cout; ++j) gb[j] += row[j];
            }
            accum(b, gb);
        }
    });
}

Var depthwise_conv3x3(const Var& x, const Var& kernels, const Var& bias) {
    if (x->value.rank() != 3) throw DimensionError("depthwise_conv3x3: input must be [H,W,C]");
    const int h = x->value.dim(0), w = x->value.dim(1), c = x->value.dim(2);
    if (kernels->value.shape() != std::vector<int>{3, 3, c}) {
        throw DimensionError("depthwise_conv3x3: kernels must be [3,3,C] with C=" + std::to_string(c));
    }
    if (bias->value.shape() != std::vector<int>{c}) {
        throw DimensionError("depthwise_conv3x3: bias must be [C]");
    }
    // Same-padding with zero fill.
    Tensor out({h, w, c});
    const float* xd = x->value.data();
    const float* kd = kernels->value.data();
    for (int y = 0; y < h; ++y) {
        for (int xcol = 0; xcol < w; ++xcol) {
            float* orow = out.data() + (static_cast<std::int64_t>(y) * w + xcol) * c;
            for (int ch = 0; ch < c; ++ch) orow[ch] = bias->value[ch];
            for (int dy = 0; dy < 3; ++dy) {
                const int sy = y + dy - 1;
                if (sy < 0 || sy >= h) continue;
                for (int dx = 0; dx < 3; ++dx) {
                    const int sx = xcol + dx - 1;
                    if (sx < 0 || sx >= w) continue;
                    const float* xr = xd + (static_cast<std::int64_t>(sy) * w + sx) * c;
                    const float* kr = kd + (static_cast<std::int64_t>(dy) * 3 + dx) * c;
                    for (int ch = 0; ch < c; ++ch) orow[ch] += xr[ch] * kr[ch];
                }
            }
        }
    }
    return make_node(std::move(out), {x, kernels, bias}, "depthwise_conv3x3", [h, w, c](Node& node) {
        const Var& x = node.inputs[0];
        const Var& kernels = node.inputs[1];
        const Var& bias = node.inputs[2];
        const float* gd = node.grad.data();
        if (x->requires_grad) {
            Tensor gx = Tensor::zeros(x->value.shape());
            const float* kd = kernels->value.data();
            for (int y = 0; y < h; ++y) {
                for (int xcol = 0; xcol < w; ++xcol) {
                    const float* grow = gd + (static_cast<std::int64_t>(y) * w + xcol) * c;
                    for (int dy = 0; dy < 3; ++dy) {
                        const int sy = y + dy - 1;
                        if (sy < 0 || sy >= h) continue;
                        for (int dx = 0; dx < 3; ++dx) {
                            const int sx = xcol + dx - 1;
                            if (sx < 0 || sx >= w) continue;
                            float* xr = gx.data() + (static_cast<std::int64_t>(sy) * w + sx) * c;
                            const float* kr = kd + (static_cast<std::int64_t>(dy) * 3 + dx) * c;
                            for (int ch = 0; ch < c; ++ch) xr[ch] += grow[ch] * kr[ch];
                        }
                    }
                }
            }
            accum(x, gx);
        }
        if (kernels->requires_grad) {
            Tensor gk = Tensor::zeros(kernels->value.shape());
            const float* xd = x->value.data();
            for (int y = 0; y < h; ++y) {
                for (int xcol = 0; xcol < w; ++xcol) {
                    const float* grow = gd + (static_cast<std::int64_t>(y) * w + xcol) * c;
                    for (int dy = 0; dy < 3; ++dy) {
                        const int sy = y + dy - 1;
                        if (sy < 0 || sy >= h) continue;
                        for (int dx = 0; dx < 3; ++dx) {
                            const int sx = xcol + dx - 1;
                            if (sx < 0 || sx >= w) continue;
                            const float* xr = xd + (static_cast<std::int64_t>(sy) * w + sx) * c;
                            float* kr = gk.data() + (static_cast<std::int64_t>(dy) * 3 + dx) * c;
                            for (int ch = 0; ch < c; ++ch) kr[ch] += grow[ch] * xr[ch];
                        }
                    }
                }
            }
            accum(kernels, gk);
        }
        if (bias->requires_grad) {
            Tensor gb = Tensor::zeros({c});
            const std::int64_t hw = static_cast<std::int64_t>(h) * w;
            for (std::int64_t t = 0; t < hw; ++t) {
                const float* grow = gd + t * c;
                for (int ch = 0; ch < c; ++ch) gb[ch] += grow[ch];
            }
            accum(bias, gb);
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
    if (eps <= 0.0f) throw ContractError("layer_norm: eps must be > 0");
    const int d = x->value.dim(x->value.rank() - 1);
    const bool affine = gamma != nullptr;
    if (affine) {
        if (!beta) throw ContractError("layer_norm: gamma without beta");
        if (gamma->value.shape() != std::vector<int>{d} || beta->value.shape() != std::vector<int>{d}) {
            throw DimensionError("layer_norm: gamma/beta must match normalized axis length " + std::to_string(d));
        }
    }
    const std::int64_t m = x->value.size() / d;
    Tensor out(x->value.shape());
    Tensor xhat(x->value.shape());
    Tensor inv_sigma({static_cast<int>(m)});
    for (std::int64_t t = 0; t < m; ++t) {
        const float* row = x->value.data() + t * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double z = row[j] - mu;
            var += z * z;
        }
        var /= d;
        const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
        inv_sigma[t] = inv;
        float* hrow = xhat.data() + t * d;
        float* orow = out.data() + t * d;
        for (int j = 0; j < d; ++j) {
            const float xh = (row[j] - static_cast<float>(mu)) * inv;
            hrow[j] = xh;
            orow[j] = affine ? xh * gamma->value[j] + beta->value[j] : xh;
        }
    }
    std::vector<Var> inputs = affine ? std::vector<Var>{x, gamma, beta} : std::vector<Var>{x};
    return make_node(std::move(out), std::move(inputs), "layer_norm",
                     [d, m, affine, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Node& node) {
                         const Var& x = node.inputs[0];
                         const Var* gamma = affine ? &node.inputs[1] : nullptr;
                         if (x->requires_grad) {
                             Tensor gx = Tensor::zeros(x->value.shape());
                             for (std::int64_t t = 0; t < m; ++t) {
                                 const float* g = node.grad.data() + t * d;
                                 const float* xh = xhat.data() + t * d;
                                 float* out = gx.data() + t * d;
                                 double mean_gy = 0.0, mean_gy_xh = 0.0;
                                 for (int j = 0; j < d; ++j) {
                                     const float gy = affine ? g[j] * (*gamma)->value[j] : g[j];
                                     mean_gy += gy;
                                     mean_gy_xh += static_cast<double>(gy) * xh[j];
                                 }
                                 mean_gy /= d;
                                 mean_gy_xh /= d;
                                 for (int j = 0; j < d; ++j) {
                                     const float gy = affine ? g[j] * (*gamma)->value[j] : g[j];
                                     out[j] = inv_sigma[t] * (gy - static_cast<float>(mean_gy) -
                                                              xh[j] * static_cast<float>(mean_gy_xh));
                                 }
                             }
                             accum(x, gx);
                         }
                         if (affine) {
                             const Var& gm = node.inputs[1];
                             const Var& bt = node.inputs[2];
                             if (gm->requires_grad || bt->requires_grad) {
                                 Tensor gg = Tensor::zeros({d});
                                 Tensor gb = Tensor::zeros({d});
                                 for (std::int64_t t = 0; t < m; ++t) {
                                     const float* g = node.grad.data() + t * d;
                                     const float* xh = xhat.data() + t * d;
                                     for (int j = 0; j < d; ++j) {
                                         gg[j] += g[j] * xh[j];
                                         gb[j] += g[j];
                                     }
                                 }
                                 accum(gm, gg);
                                 accum(bt, gb);
                             }
                         }
                     });
}

Var l2_normalize_rows(const Var& x) {
    if (x->value.rank() != 2) throw DimensionError("l2_normalize_rows: rank-2 tensor required");
    const int n = x->value.dim(0), d = x->value.dim(1);
    Tensor out(x->value.shape());
    Tensor inv_norm({n});
    for (int i = 0; i < n; ++i) {
        const float* row = x->value.data() + static_cast<std::int64_t>(i) * d;
        double sq = 0.0;
        for (int j = 0; j < d; ++j) sq += static_cast<double>(row[j]) * row[j];
        if (sq == 0.0) throw ContractError("l2_normalize_rows: zero-norm row " + std::to_string(i));
        const float inv = static_cast<float>(1.0 / std::sqrt(sq));
        inv_norm[i] = inv;
        float* orow = out.data() + static_cast<std::int64_t>(i) * d;
        for (int j = 0; j < d; ++j) orow[j] = row[j] * inv;
    }
    return make_node(std::move(out), {x}, "l2_normalize_rows", [n, d, inv_norm = std::move(inv_norm)](Node& node) {
        Tensor gx = Tensor::zeros(node.inputs[0]->value.shape());
        for (int i = 0; i < n; ++i) {
            const float* y = node.value.data() + static_cast<std::int64_t>(i) * d;
            const float* g = node.grad.data() + static_cast<std::int64_t>(i) * d;
            float* out = gx.data() + static_cast<std::int64_t>(i) * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += static_cast<double>(g[j]) * y[j];
            for (int j = 0; j < d; ++j) out[j] = inv_norm[i] * (g[j] - y[j] * static_cast<float>(dot));
        }
        accum(node.inputs[0], gx);
    });
}

namespace {

constexpr int kAttentionRowBlock = 64;

// softmax(q kT / sqrt(d)) for the row block [r0, r1); probs is (r1-r0) x t.
void attention_probs_block(const float* q, const float* k, float* probs, int r0, int r1, int t, int d) {
    const float scl = 1.0f / std::sqrt(static_cast<float>(d));
    for (int i = r0; i < r1; ++i) {
        const float* qi = q + static_cast<std::int64_t>(i) * d;
        float* prow = probs + static_cast<std::int64_t>(i - r0) * t;
        for (int j = 0; j < t; ++j) {
            const float* kj = k + static_cast<std::int64_t>(j) * d;
            float acc = 0.0f;
            for (int kk = 0; kk < d; ++kk) acc += qi[kk] * kj[kk];
            prow[j] = acc * scl;
        }
        softmax_row_inplace(prow, t);
    }
}

}  // namespace

Var softmax_attention(const Var& q, const Var& k, const Var& v) {
    if (q->value.rank() != 2 || !q->value.same_shape(k->value) || !q->value.same_shape(v->value)) {
        throw DimensionError("softmax_attention: q/k/v must share a [T,D] shape");
    }
    const int t = q->value.dim(0), d = q->value.dim(1);
    Tensor out({t, d});
    std::vector<float> probs(static_cast<std::size_t>(std::min(t, kAttentionRowBlock)) * static_cast<std::size_t>(t));
    for (int r0 = 0; r0 < t; r0 += kAttentionRowBlock) {
        const int r1 = std::min(t, r0 + kAttentionRowBlock);
        attention_probs_block(q->value.data(), k->value.data(), probs.data(), r0, r1, t, d);
        matmul_kernel(probs.data(), v->value.data(), out.data() + static_cast<std::int64_t>(r0) * d, r1 - r0, t, d);
    }
    return make_node(std::move(out), {q, k, v}, "softmax_attention", [t, d](Node& node) {
        const Var& q = node.inputs[0];
        const Var& k = node.inputs[1];
        const Var& v = node.inputs[2];
        const float scl = 1.0f / std::sqrt(static_cast<float>(d));
        Tensor gq = Tensor::zeros({t, d});
        Tensor gk = Tensor::zeros({t, d});
        Tensor gv = Tensor::zeros({t, d});
        // Probabilities are recomputed per block so no [T,T] buffer outlives the op.
        const int block = std::min(t, kAttentionRowBlock);
        std::vector<float> probs(static_cast<std::size_t>(block) * static_cast<std::size_t>(t));
        std::vector<float> dscores(static_cast<std::size_t>(block) * static_cast<std::size_t>(t));
        for (int r0 = 0; r0 < t; r0 += block) {
            const int r1 = std::min(t, r0 + block);
            attention_probs_block(q->value.data(), k->value.data(), probs.data(), r0, r1, t, d);
            const float* gout = node.grad.data() + static_cast<std::int64_t>(r0) * d;
            // dV += P^T g
            matmul_at_b_accum(probs.data(), gout, gv.data(), r1 - r0, t, d);
            // dP = g V^T, then dS = P o (dP - rowsum(dP o P)) / sqrt(d)
            std::fill(dscores.begin(), dscores.end(), 0.0f);
            matmul_a_bt_accum(gout, v->value.data(), dscores.data(), r1 - r0, d, t);
            for (int i = 0; i < r1 - r0; ++i) {
                float* ds = dscores.data() + static_cast<std::int64_t>(i) * t;
                const float* p = probs.data() + static_cast<std::int64_t>(i) * t;
                double dot = 0.0;
                for (int j = 0; j < t; ++j) dot += static_cast<double>(ds[j]) * p[j];
                for (int j = 0; j < t; ++j) ds[j] = p[j] * (ds[j] - static_cast<float>(dot)) * scl;
            }
            // dq_block = dS k ; dk += dS^T q_block
            matmul_kernel(dscores.data(), k->value.data(), gq.data() + static_cast<std::int64_t>(r0) * d,
                          r1 - r0, t, d);
            matmul_at_b_accum(dscores.data(), q->value.data() + static_cast<std::int64_t>(r0) * d,
                              gk.data(), r1 - r0, t, d);
        }
        accum(q, gq);
        accum(k, gk);
        accum(v, gv);
    });
}

double finite_diff_check(const std::function<Var(const Var&)>& f, const Tensor& params, float step) {
    return finite_diff_check(
        [&f](const std::vector<Var>& ps) { return f(ps[0]); }, std::vector<Tensor>{params}, step);
}

double finite_diff_check(const std::function<Var(const std::vector<Var>&)>& f,
                         const std::vector<Tensor>& params, float step) {
    if (step <= 0.0f) throw ContractError("finite_diff_check: step must be > 0");
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(param(p));
    Var root = f(vars);
    if (root->value.size() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
    backward(root);

    auto eval_at = [&f](const std::vector<Tensor>& ps) {
        std::vector<Var> vs;
        vs.reserve(ps.size());
        for (const auto& p : ps) vs.push_back(constant(p));
        return static_cast<double>(f(vs)->value.item());
    };

    double worst = 0.0;
    std::vector<Tensor> work = params;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const Tensor& g = vars[pi]->grad_ready ? vars[pi]->grad : Tensor::zeros(params[pi].shape());
        for (std::int64_t i = 0; i < params[pi].size(); ++i) {
            const float orig = work[pi][i];
            const float hi = orig + step;
            const float lo = orig - step;
            work[pi][i] = hi;
            const double f_plus = eval_at(work);
            work[pi][i] = lo;
            const double f_minus = eval_at(work);
            work[pi][i] = orig;
            // Divide by the step actually realized in 32-bit storage.
            const double central = (f_plus - f_minus) / (static_cast<double>(hi) - static_cast<double>(lo));
            const double analytic = static_cast<double>(g[i]);
            const double rel = std::fabs(analytic - central) / (std::fabs(analytic) + std::fabs(central) + 1e-8);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace fourierage::ag
