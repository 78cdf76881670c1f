#include "fourierage/fourierformer.hpp"

#include <cmath>

#include "fourierage/errors.hpp"

namespace fourierage {

namespace {

using ag::Var;

void check_block_input(const Tensor& x, const FPEConfig& cfg, const char* op) {
    if (x.rank() != 3) {
        throw DimensionError(std::string(op) + ": expected [H,W,C], got " + x.shape_string());
    }
    if (x.dim(2) != cfg.channels) {
        throw DimensionError(std::string(op) + ": input channels " + std::to_string(x.dim(2)) +
                             " != config channels " + std::to_string(cfg.channels));
    }
}

// Split a stacked [2,H,W,C] spectrum into its two [H,W,C] planes.
std::pair<Var, Var> split_spectrum(const Var& spec) {
    const int h = spec->value.dim(1), w = spec->value.dim(2), c = spec->value.dim(3);
    Var re = ag::reshape(ag::slice(spec, 0, 0, 1), {h, w, c});
    Var im = ag::reshape(ag::slice(spec, 0, 1, 1), {h, w, c});
    return {re, im};
}

Var stack_spectrum(const Var& re, const Var& im) {
    const int h = re->value.dim(0), w = re->value.dim(1), c = re->value.dim(2);
    return ag::concat({ag::reshape(re, {1, h, w, c}), ag::reshape(im, {1, h, w, c})}, 0);
}

Var maybe_activate(const Var& v, const FPEConfig& cfg) {
    return cfg.activation ? ag::leaky_relu(v, cfg.leaky_slope) : v;
}

}  // namespace

std::vector<ag::Var> BlockParams::all() const {
    return {spatial_re_kernel, spatial_re_bias, spatial_im_kernel, spatial_im_bias,
            channel_re_weight, channel_re_bias, channel_im_weight, channel_im_bias,
            ln1_gamma,         ln1_beta,        ln2_gamma,         ln2_beta};
}

BlockParams make_block_params(const FPEConfig& cfg) {
    const int c = cfg.channels;
    BlockParams p;
    p.spatial_re_kernel = ag::param(Tensor::zeros({3, 3, c}));
    p.spatial_re_bias = ag::param(Tensor::zeros({c}));
    p.spatial_im_kernel = ag::param(Tensor::zeros({3, 3, c}));
    p.spatial_im_bias = ag::param(Tensor::zeros({c}));
    p.channel_re_weight = ag::param(Tensor::zeros({c, c}));
    p.channel_re_bias = ag::param(Tensor::zeros({c}));
    p.channel_im_weight = ag::param(Tensor::zeros({c, c}));
    p.channel_im_bias = ag::param(Tensor::zeros({c}));
    p.ln1_gamma = ag::param(Tensor::full({c}, 1.0f));
    p.ln1_beta = ag::param(Tensor::zeros({c}));
    p.ln2_gamma = ag::param(Tensor::full({c}, 1.0f));
    p.ln2_beta = ag::param(Tensor::zeros({c}));
    return p;
}

ag::Var fourier_spatial_interaction(const ag::Var& x, const BlockParams& p, const FPEConfig& cfg) {
    check_block_input(x->value, cfg, "fourier_spatial_interaction");
    Var spec = ag::dft2d_op(x);
    auto [re, im] = split_spectrum(spec);
    Var sr = maybe_activate(ag::depthwise_conv3x3(re, p.spatial_re_kernel, p.spatial_re_bias), cfg);
    Var si = maybe_activate(ag::depthwise_conv3x3(im, p.spatial_im_kernel, p.spatial_im_bias), cfg);
    Var y = ag::idft2d_op(stack_spectrum(sr, si));
    if (cfg.spatial_norm) y = ag::layer_norm(y, nullptr, nullptr, cfg.ln_eps);
    return y;
}

ag::Var fourier_channel_evolution(const ag::Var& x, const BlockParams& p, const FPEConfig& cfg) {
    check_block_input(x->value, cfg, "fourier_channel_evolution");
    Var spec = ag::dft2d_op(x);
    auto [re, im] = split_spectrum(spec);
    Var cr = maybe_activate(ag::pointwise_conv(re, p.channel_re_weight, p.channel_re_bias), cfg);
    Var ci = maybe_activate(ag::pointwise_conv(im, p.channel_im_weight, p.channel_im_bias), cfg);
    return ag::idft2d_op(stack_spectrum(cr, ci));
}

ag::Var fpe_block_forward(const ag::Var& x, const BlockParams& p, const FPEConfig& cfg) {
    Var y1 = ag::add(x, fourier_spatial_interaction(
                            ag::layer_norm(x, p.ln1_gamma, p.ln1_beta, cfg.ln_eps), p, cfg));
    Var y2 = ag::add(y1, fourier_channel_evolution(
                             ag::layer_norm(y1, p.ln2_gamma, p.ln2_beta, cfg.ln_eps), p, cfg));
    return y2;
}

ag::Var fourierformer_forward(const ag::Var& x, const std::vector<BlockParams>& blocks,
                              const FPEConfig& cfg) {
    Var h = x;
    for (const auto& b : blocks) h = fpe_block_forward(h, b, cfg);
    return h;
}

float spatial_imag_residue(const Tensor& x, const BlockParams& p, const FPEConfig& cfg) {
    check_block_input(x, cfg, "spatial_imag_residue");
    ComplexPair spec = dft2d(x);
    Var sr = maybe_activate(
        ag::depthwise_conv3x3(ag::constant(spec.real), p.spatial_re_kernel, p.spatial_re_bias),
        cfg);
    Var si = maybe_activate(
        ag::depthwise_conv3x3(ag::constant(spec.imag), p.spatial_im_kernel, p.spatial_im_bias),
        cfg);
    ComplexPair full = idft2d_complex(ComplexPair(sr->value, si->value));
    float residue = 0.0f;
    for (std::int64_t i = 0; i < full.imag.size(); ++i)
        residue = std::max(residue, std::fabs(full.imag[i]));
    return residue;
}

std::vector<ag::Var> AttentionParams::all() const {
    return {wq, bq, wk, bk, wv, bv, gamma, beta};
}

AttentionParams make_attention_params(int d, std::mt19937& gen) {
    if (d < 1) throw ContractError("make_attention_params: d must be >= 1");
    const float scale = 1.0f / std::sqrt(static_cast<float>(d));
    AttentionParams p;
    p.wq = ag::param(randn({d, d}, gen, scale));
    p.bq = ag::param(Tensor::zeros({d}));
    p.wk = ag::param(randn({d, d}, gen, scale));
    p.bk = ag::param(Tensor::zeros({d}));
    p.wv = ag::param(randn({d, d}, gen, scale));
    p.bv = ag::param(Tensor::zeros({d}));
    p.gamma = ag::param(Tensor::full({d}, 1.0f));
    p.beta = ag::param(Tensor::zeros({d}));
    return p;
}

ag::Var attention_baseline_forward(const ag::Var& tokens, const AttentionParams& p, float ln_eps) {
    if (tokens->value.rank() != 2) {
        throw DimensionError("attention_baseline_forward: expected [T,D], got " +
                             tokens->value.shape_string());
    }
    Var q = ag::add_bias(ag::matmul(tokens, p.wq), p.bq);
    Var k = ag::add_bias(ag::matmul(tokens, p.wk), p.bk);
    Var v = ag::add_bias(ag::matmul(tokens, p.wv), p.bv);
    Var mixed = ag::softmax_attention(q, k, v);
    return ag::layer_norm(ag::add(tokens, mixed), p.gamma, p.beta, ln_eps);
}

}  // namespace fourierage
