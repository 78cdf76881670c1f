#pragma once

#include <random>
#include <vector>

#include "fourierage/autograd.hpp"
#include "fourierage/fourier.hpp"
#include "fourierage/tensor.hpp"

namespace fourierage {

struct FPEConfig {
    int channels = 1;
    int blocks = 0;
    float leaky_slope = 0.2f;
    float ln_eps = 1e-5f;
    // Test plumbing: the trailing normalize of the spatial interaction and the
    // branch activations can be switched off to expose the raw transform
    // identities. Production paths leave both on.
    bool spatial_norm = true;
    bool activation = true;
};

// Parameters of one Fourier Prior Embedding block. The real and imaginary
// spectral branches carry separate, unshared parameters.
struct BlockParams {
    ag::Var spatial_re_kernel, spatial_re_bias;  // [3,3,C], [C]
    ag::Var spatial_im_kernel, spatial_im_bias;
    ag::Var channel_re_weight, channel_re_bias;  // [C,C], [C]
    ag::Var channel_im_weight, channel_im_bias;
    ag::Var ln1_gamma, ln1_beta;  // [C] pre-norm of the spatial sub-module
    ag::Var ln2_gamma, ln2_beta;  // [C] pre-norm of the channel sub-module

    std::vector<ag::Var> all() const;
};

// Zero-filled spectral maps and unit layer-norm affines: the block starts as
// an exact identity and learns departures from it.
BlockParams make_block_params(const FPEConfig& cfg);

// DFT -> depthwise 3x3 + activation per spectral branch -> inverse DFT (real
// part) -> plain channel normalization.
ag::Var fourier_spatial_interaction(const ag::Var& x, const BlockParams& p, const FPEConfig& cfg);

// DFT -> 1x1 conv across channel spectra + activation per branch -> inverse
// DFT (real part).
ag::Var fourier_channel_evolution(const ag::Var& x, const BlockParams& p, const FPEConfig& cfg);

// y1 = x + spatial(LN1(x)); y2 = y1 + channel(LN2(y1)).
ag::Var fpe_block_forward(const ag::Var& x, const BlockParams& p, const FPEConfig& cfg);

// Sequential application of the blocks; empty list is the identity.
ag::Var fourierformer_forward(const ag::Var& x, const std::vector<BlockParams>& blocks,
                              const FPEConfig& cfg);

// Magnitude of the imaginary component discarded by the spatial interaction's
// inverse transform (the learned maps break conjugate symmetry). Debug
// statistic; not part of the forward path.
float spatial_imag_residue(const Tensor& x, const BlockParams& p, const FPEConfig& cfg);

// Quadratic-cost single-head attention block used as the complexity baseline:
// LN(x + softmax(QK^T/sqrt(D)) V) with learnable Q/K/V projections.
struct AttentionParams {
    ag::Var wq, bq, wk, bk, wv, bv;  // [D,D], [D]
    ag::Var gamma, beta;             // [D]

    std::vector<ag::Var> all() const;
};

AttentionParams make_attention_params(int d, std::mt19937& gen);

ag::Var attention_baseline_forward(const ag::Var& tokens, const AttentionParams& p,
                                   float ln_eps = 1e-5f);

}  // namespace fourierage
