#pragma once

#include <utility>

#include "fourierage/autograd.hpp"
#include "fourierage/tensor.hpp"

namespace fourierage {

// Real/imaginary planes of a 2D spectrum; frequency coordinates are the array
// indices. Shapes are [H,W] or [H,W,C].
struct ComplexPair {
    Tensor real;
    Tensor imag;

    ComplexPair() = default;
    ComplexPair(Tensor r, Tensor i);
};

// Orthonormal 2D DFT (1/sqrt(H*W) on both directions), applied per channel
// when a trailing channel axis is present.
ComplexPair dft2d(const Tensor& x);

// Orthonormal inverse; returns the real part. Learned spectral maps break
// conjugate symmetry, so the exact inverse is complex; discarding the
// imaginary part is this module's contract.
Tensor idft2d(const ComplexPair& f);

// Full complex inverse, for observing the imaginary residue idft2d discards.
ComplexPair idft2d_complex(const ComplexPair& f);

// A = sqrt(R^2 + I^2); P = atan2(I, R). Full-quadrant atan2 rather than
// arctan(I/R) so the phase keeps its sign in all quadrants.
std::pair<Tensor, Tensor> amplitude_phase(const ComplexPair& f);

// Literal double-loop evaluation of the transform in 64-bit arithmetic.
// Quadratic in H*W, so capped at H*W <= 4096.
ComplexPair naive_dft_oracle(const Tensor& x, bool inverse = false);
ComplexPair naive_dft_oracle(const ComplexPair& f, bool inverse);

namespace ag {

// Tape ops. Spectra ride the tape as a stacked [2,H,W(,C)] tensor (plane 0 =
// real, plane 1 = imaginary) so one FFT serves both planes.
Var dft2d_op(const Var& x);

// Inverse of the stacked spectrum; returns the real part with shape [H,W(,C)].
Var idft2d_op(const Var& stacked);

}  // namespace ag

}  // namespace fourierage
