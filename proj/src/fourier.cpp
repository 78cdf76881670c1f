#include "fourierage/fourier.hpp"

#include <cmath>
#include <numbers>
#include <vector>

#include "fourierage/errors.hpp"

namespace fourierage {

namespace {

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 Cooley-Tukey on split real/imag arrays.
// sign = -1 forward, +1 inverse; no normalization.
void fft_pow2(float* re, float* im, int n, int sign) {
    for (int i = 1, j = 0; i < n; ++i) {
        int bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (int len = 2; len <= n; len <<= 1) {
        const double ang = sign * 2.0 * std::numbers::pi / len;
        const float wr = static_cast<float>(std::cos(ang));
        const float wi = static_cast<float>(std::sin(ang));
        for (int i = 0; i < n; i += len) {
            float cr = 1.0f, ci = 0.0f;
            for (int j = 0; j < len / 2; ++j) {
                const int a = i + j, b = i + j + len / 2;
                const float xr = re[b] * cr - im[b] * ci;
                const float xi = re[b] * ci + im[b] * cr;
                re[b] = re[a] - xr;
                im[b] = im[a] - xi;
                re[a] += xr;
                im[a] += xi;
                const float ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

// Direct O(n^2) transform for non-power-of-two lengths.
void dft_direct(const float* re_in, const float* im_in, float* re_out, float* im_out, int n,
                int sign) {
    for (int k = 0; k < n; ++k) {
        double sr = 0.0, si = 0.0;
        for (int t = 0; t < n; ++t) {
            const double ang = sign * 2.0 * std::numbers::pi * k * t / n;
            const double c = std::cos(ang), s = std::sin(ang);
            sr += re_in[t] * c - im_in[t] * s;
            si += re_in[t] * s + im_in[t] * c;
        }
        re_out[k] = static_cast<float>(sr);
        im_out[k] = static_cast<float>(si);
    }
}

void transform_1d(float* re, float* im, int n, int sign, std::vector<float>& scratch) {
    if (n == 1) return;
    if (is_pow2(n)) {
        fft_pow2(re, im, n, sign);
        return;
    }
    scratch.resize(static_cast<std::size_t>(2 * n));
    dft_direct(re, im, scratch.data(), scratch.data() + n, n, sign);
    std::copy_n(scratch.data(), n, re);
    std::copy_n(scratch.data() + n, n, im);
}

struct Grid {
    int h, w, c;
    bool has_channels;
};

Grid grid_of(const Tensor& x) {
    if (x.rank() == 2) return {x.dim(0), x.dim(1), 1, false};
    if (x.rank() == 3) return {x.dim(0), x.dim(1), x.dim(2), true};
    throw DimensionError("fourier: expected [H,W] or [H,W,C], got " + x.shape_string());
}

// Unnormalized separable 2D transform per channel, then one 1/sqrt(H*W) scale.
void transform_2d(Tensor& real, Tensor& imag, const Grid& g, int sign) {
    std::vector<float> row_re(static_cast<std::size_t>(std::max(g.h, g.w)));
    std::vector<float> row_im(static_cast<std::size_t>(std::max(g.h, g.w)));
    std::vector<float> scratch;
    for (int ch = 0; ch < g.c; ++ch) {
        // Rows (along W).
        for (int y = 0; y < g.h; ++y) {
            for (int x = 0; x < g.w; ++x) {
                const std::int64_t idx = (static_cast<std::int64_t>(y) * g.w + x) * g.c + ch;
                row_re[static_cast<std::size_t>(x)] = real[idx];
                row_im[static_cast<std::size_t>(x)] = imag[idx];
            }
            transform_1d(row_re.data(), row_im.data(), g.w, sign, scratch);
            for (int x = 0; x < g.w; ++x) {
                const std::int64_t idx = (static_cast<std::int64_t>(y) * g.w + x) * g.c + ch;
                real[idx] = row_re[static_cast<std::size_t>(x)];
                imag[idx] = row_im[static_cast<std::size_t>(x)];
            }
        }
        // Columns (along H).
        for (int x = 0; x < g.w; ++x) {
            for (int y = 0; y < g.h; ++y) {
                const std::int64_t idx = (static_cast<std::int64_t>(y) * g.w + x) * g.c + ch;
                row_re[static_cast<std::size_t>(y)] = real[idx];
                row_im[static_cast<std::size_t>(y)] = imag[idx];
            }
            transform_1d(row_re.data(), row_im.data(), g.h, sign, scratch);
            for (int y = 0; y < g.h; ++y) {
                const std::int64_t idx = (static_cast<std::int64_t>(y) * g.w + x) * g.c + ch;
                real[idx] = row_re[static_cast<std::size_t>(y)];
                imag[idx] = row_im[static_cast<std::size_t>(y)];
            }
        }
    }
    const float norm = 1.0f / std::sqrt(static_cast<float>(g.h) * static_cast<float>(g.w));
    for (std::int64_t i = 0; i < real.size(); ++i) {
        real[i] *= norm;
        imag[i] *= norm;
    }
}

}  // namespace

ComplexPair::ComplexPair(Tensor r, Tensor i) : real(std::move(r)), imag(std::move(i)) {
    if (!real.same_shape(imag)) {
        throw DimensionError("ComplexPair: real " + real.shape_string() + " vs imag " +
                             imag.shape_string());
    }
}

ComplexPair dft2d(const Tensor& x) {
    const Grid g = grid_of(x);
    ComplexPair f(x, Tensor::zeros(x.shape()));
    transform_2d(f.real, f.imag, g, -1);
    return f;
}

Tensor idft2d(const ComplexPair& f) { return idft2d_complex(f).real; }

ComplexPair idft2d_complex(const ComplexPair& f) {
    const Grid g = grid_of(f.real);
    if (!f.real.same_shape(f.imag)) {
        throw DimensionError("idft2d: real/imag shape mismatch");
    }
    ComplexPair out(f.real, f.imag);
    transform_2d(out.real, out.imag, g, +1);
    return out;
}

std::pair<Tensor, Tensor> amplitude_phase(const ComplexPair& f) {
    Tensor amp(f.real.shape());
    Tensor phase(f.real.shape());
    for (std::int64_t i = 0; i < amp.size(); ++i) {
        amp[i] = std::hypot(f.real[i], f.imag[i]);
        phase[i] = std::atan2(f.imag[i], f.real[i]);
    }
    return {std::move(amp), std::move(phase)};
}

ComplexPair naive_dft_oracle(const Tensor& x, bool inverse) {
    return naive_dft_oracle(ComplexPair(x, Tensor::zeros(x.shape())), inverse);
}

ComplexPair naive_dft_oracle(const ComplexPair& f, bool inverse) {
    const Grid g = grid_of(f.real);
    if (static_cast<std::int64_t>(g.h) * g.w > 4096) {
        throw ContractError("naive_dft_oracle: refusing H*W > 4096 (quadratic cost)");
    }
    ComplexPair out(Tensor::zeros(f.real.shape()), Tensor::zeros(f.real.shape()));
    const double sign = inverse ? 1.0 : -1.0;
    const double norm = 1.0 / std::sqrt(static_cast<double>(g.h) * static_cast<double>(g.w));
    for (int ch = 0; ch < g.c; ++ch) {
        for (int u = 0; u < g.h; ++u) {
            for (int v = 0; v < g.w; ++v) {
                double sr = 0.0, si = 0.0;
                for (int h = 0; h < g.h; ++h) {
                    for (int w = 0; w < g.w; ++w) {
                        const double ang =
                            sign * 2.0 * std::numbers::pi *
                            (static_cast<double>(h) * u / g.h + static_cast<double>(w) * v / g.w);
                        const double c = std::cos(ang), s = std::sin(ang);
                        const std::int64_t idx =
                            (static_cast<std::int64_t>(h) * g.w + w) * g.c + ch;
                        sr += f.real[idx] * c - f.imag[idx] * s;
                        si += f.real[idx] * s + f.imag[idx] * c;
                    }
                }
                const std::int64_t odx = (static_cast<std::int64_t>(u) * g.w + v) * g.c + ch;
                out.real[odx] = static_cast<float>(sr * norm);
                out.imag[odx] = static_cast<float>(si * norm);
            }
        }
    }
    return out;
}

namespace ag {

namespace {

std::vector<int> stacked_shape(const std::vector<int>& spatial) {
    std::vector<int> s{2};
    s.insert(s.end(), spatial.begin(), spatial.end());
    return s;
}

Tensor stack_pair(const ComplexPair& f) {
    Tensor out(stacked_shape(f.real.shape()));
    std::copy_n(f.real.data(), f.real.size(), out.data());
    std::copy_n(f.imag.data(), f.imag.size(), out.data() + f.real.size());
    return out;
}

ComplexPair unstack(const Tensor& stacked) {
    if (stacked.rank() < 3 || stacked.dim(0) != 2) {
        throw DimensionError("expected stacked [2,H,W(,C)] spectrum, got " +
                             stacked.shape_string());
    }
    std::vector<int> spatial(stacked.shape().begin() + 1, stacked.shape().end());
    const std::int64_t n = Tensor::shape_size(spatial);
    Tensor re(spatial), im(spatial);
    std::copy_n(stacked.data(), n, re.data());
    std::copy_n(stacked.data() + n, n, im.data());
    return {std::move(re), std::move(im)};
}

Var make_linear_node(Tensor value, const Var& input, const char* op,
                     std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->inputs = {input};
    n->op = op;
    n->requires_grad = input->requires_grad;
    if (n->requires_grad) n->backprop = std::move(backprop);
    return n;
}

void accum_into(const Var& v, const Tensor& g) {
    Tensor& dst = v->ensure_grad();
    for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace

Var dft2d_op(const Var& x) {
    Tensor value = stack_pair(dft2d(x->value));
    // Linear unitary map: the pullback of (gR, gI) is Re(F^{-1}(gR + i*gI)).
    return make_linear_node(std::move(value), x, "dft2d", [](Node& node) {
        ComplexPair g = unstack(node.grad);
        accum_into(node.inputs[0], idft2d(g));
    });
}

Var idft2d_op(const Var& stacked) {
    ComplexPair f = unstack(stacked->value);
    Tensor value = idft2d(f);
    // Pullback of the real-part inverse: (dR, dI) = (Re(F(g)), Im(F(g))).
    return make_linear_node(std::move(value), stacked, "idft2d", [](Node& node) {
        ComplexPair fg = dft2d(node.grad);
        accum_into(node.inputs[0], stack_pair(fg));
    });
}

}  // namespace ag

}  // namespace fourierage
