#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "fourierage/errors.hpp"
#include "fourierage/fourier.hpp"
#include "test_util.hpp"

using namespace fourierage;
using testutil::check_grad;
using testutil::rand_nondegenerate;
using testutil::weighted;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
    return m;
}

}  // namespace

// ---- the oracle itself, validated first on closed-form cases ----

TEST_CASE("oracle: constant input concentrates in the DC bin") {
    Tensor x = Tensor::full({4, 4}, 2.0f);
    ComplexPair f = naive_dft_oracle(x);
    CHECK(f.real.at({0, 0}) == doctest::Approx(2.0f * 4.0f).epsilon(1e-6));
    for (int u = 0; u < 4; ++u)
        for (int v = 0; v < 4; ++v) {
            if (u == 0 && v == 0) continue;
            CHECK(std::fabs(f.real.at({u, v})) < 1e-5);
            CHECK(std::fabs(f.imag.at({u, v})) < 1e-5);
        }
}

TEST_CASE("oracle: linearity") {
    std::mt19937 gen(21);
    Tensor x = rand_nondegenerate({5, 7}, gen);
    Tensor y = rand_nondegenerate({5, 7}, gen);
    const float a = 1.3f, b = -0.7f;
    Tensor mix(x.shape());
    for (std::int64_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
    ComplexPair fm = naive_dft_oracle(mix);
    ComplexPair fx = naive_dft_oracle(x);
    ComplexPair fy = naive_dft_oracle(y);
    for (std::int64_t i = 0; i < mix.size(); ++i) {
        CHECK(std::fabs(fm.real[i] - (a * fx.real[i] + b * fy.real[i])) < 1e-6);
        CHECK(std::fabs(fm.imag[i] - (a * fx.imag[i] + b * fy.imag[i])) < 1e-6);
    }
}

TEST_CASE("oracle: refuses quadratic blowup") {
    CHECK_THROWS_AS(naive_dft_oracle(Tensor({65, 64})), ContractError);
}

// ---- fast transform against the oracle ----

TEST_CASE("dft2d: constant image -> DC bin c*sqrt(H*W)") {
    ComplexPair f = dft2d(Tensor::full({8, 8}, 3.0f));
    CHECK(f.real.at({0, 0}) == doctest::Approx(3.0f * 8.0f).epsilon(1e-6));
    double off = 0.0;
    for (std::int64_t i = 1; i < f.real.size(); ++i)
        off = std::max({off, std::fabs(static_cast<double>(f.real[i])), std::fabs(static_cast<double>(f.imag[i]))});
    CHECK(off < 1e-5);
}

TEST_CASE("dft2d: delta image -> flat spectrum 1/sqrt(H*W)") {
    Tensor x({4, 8});
    x.at({0, 0}) = 1.0f;
    ComplexPair f = dft2d(x);
    const float expect = 1.0f / std::sqrt(32.0f);
    for (std::int64_t i = 0; i < f.real.size(); ++i) {
        CHECK(f.real[i] == doctest::Approx(expect).epsilon(1e-5));
        CHECK(std::fabs(f.imag[i]) < 1e-5);
    }
}

TEST_CASE("dft2d matches oracle on 20 random 8x8 inputs") {
    std::mt19937 gen(22);
    for (int r = 0; r < 20; ++r) {
        Tensor x = rand_nondegenerate({8, 8}, gen);
        ComplexPair fast = dft2d(x);
        ComplexPair ref = naive_dft_oracle(x);
        CHECK(max_abs_diff(fast.real, ref.real) < 1e-4);
        CHECK(max_abs_diff(fast.imag, ref.imag) < 1e-4);
    }
}

TEST_CASE("dft2d matches oracle on non-power-of-two sizes") {
    std::mt19937 gen(23);
    for (auto [h, w] : {std::pair{6, 10}, std::pair{5, 8}, std::pair{7, 3}}) {
        Tensor x = rand_nondegenerate({h, w}, gen);
        ComplexPair fast = dft2d(x);
        ComplexPair ref = naive_dft_oracle(x);
        CHECK(max_abs_diff(fast.real, ref.real) < 1e-4);
        CHECK(max_abs_diff(fast.imag, ref.imag) < 1e-4);
    }
}

TEST_CASE("dft2d treats channels independently") {
    std::mt19937 gen(24);
    Tensor x = rand_nondegenerate({8, 8, 3}, gen);
    ComplexPair f = dft2d(x);
    for (int c = 0; c < 3; ++c) {
        Tensor plane({8, 8});
        for (int y = 0; y < 8; ++y)
            for (int xx = 0; xx < 8; ++xx) plane.at({y, xx}) = x.at({y, xx, c});
        ComplexPair fp = dft2d(plane);
        for (int y = 0; y < 8; ++y)
            for (int xx = 0; xx < 8; ++xx) {
                CHECK(f.real.at({y, xx, c}) == doctest::Approx(fp.real.at({y, xx})).epsilon(1e-6));
                CHECK(f.imag.at({y, xx, c}) == doctest::Approx(fp.imag.at({y, xx})).epsilon(1e-6));
            }
    }
}

TEST_CASE("conjugate symmetry of real-input spectra") {
    std::mt19937 gen(25);
    const int h = 8, w = 16;
    ComplexPair f = dft2d(rand_nondegenerate({h, w}, gen));
    for (int u = 0; u < h; ++u)
        for (int v = 0; v < w; ++v) {
            const int mu = (h - u) % h, mv = (w - v) % w;
            CHECK(std::fabs(f.real.at({u, v}) - f.real.at({mu, mv})) < 1e-5);
            CHECK(std::fabs(f.imag.at({u, v}) + f.imag.at({mu, mv})) < 1e-5);
        }
}

TEST_CASE("parseval under the orthonormal normalization") {
    std::mt19937 gen(26);
    Tensor x = rand_nondegenerate({16, 8}, gen);
    ComplexPair f = dft2d(x);
    double spatial = 0.0, spectral = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        spatial += static_cast<double>(x[i]) * x[i];
        spectral += static_cast<double>(f.real[i]) * f.real[i] +
                    static_cast<double>(f.imag[i]) * f.imag[i];
    }
    CHECK(std::fabs(spatial - spectral) / spatial < 1e-5);
}

// ---- inverse ----

TEST_CASE("idft2d inverts dft2d") {
    std::mt19937 gen(27);
    for (auto shape : {std::vector<int>{8, 8}, std::vector<int>{6, 10}, std::vector<int>{16, 4, 2}}) {
        Tensor x = rand_nondegenerate(shape, gen);
        CHECK(max_abs_diff(idft2d(dft2d(x)), x) < 1e-5);
    }
}

TEST_CASE("idft2d: DC-only spectrum of amplitude a -> constant a/sqrt(H*W)") {
    ComplexPair f(Tensor::zeros({4, 4}), Tensor::zeros({4, 4}));
    f.real.at({0, 0}) = 8.0f;
    Tensor x = idft2d(f);
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(x[i] == doctest::Approx(2.0f).epsilon(1e-6));
}

TEST_CASE("idft2d real part matches naive inverse on asymmetric spectra") {
    std::mt19937 gen(28);
    ComplexPair f(rand_nondegenerate({8, 8}, gen), rand_nondegenerate({8, 8}, gen));
    Tensor fast = idft2d(f);
    ComplexPair ref = naive_dft_oracle(f, true);
    CHECK(max_abs_diff(fast, ref.real) < 1e-4);
}

// ---- amplitude / phase ----

TEST_CASE("amplitude_phase closed-form points") {
    ComplexPair f(Tensor({2}, {3.0f, 1.0f}), Tensor({2}, {4.0f, 0.0f}));
    auto [amp, phase] = amplitude_phase(f);
    CHECK(amp[0] == doctest::Approx(5.0f));
    CHECK(phase[0] == doctest::Approx(0.92730f).epsilon(1e-4));
    CHECK(amp[1] == doctest::Approx(1.0f));
    CHECK(phase[1] == doctest::Approx(0.0f));
}

TEST_CASE("amplitude_phase covers all quadrants") {
    ComplexPair f(Tensor({2}, {-1.0f, -1.0f}), Tensor({2}, {1.0f, -1.0f}));
    auto [amp, phase] = amplitude_phase(f);
    CHECK(phase[0] == doctest::Approx(3.0f * std::numbers::pi_v<float> / 4.0f));
    CHECK(phase[1] == doctest::Approx(-3.0f * std::numbers::pi_v<float> / 4.0f));
}

TEST_CASE("amplitude_phase polar round trip") {
    std::mt19937 gen(29);
    ComplexPair f(rand_nondegenerate({5, 6}, gen), rand_nondegenerate({5, 6}, gen));
    auto [amp, phase] = amplitude_phase(f);
    for (std::int64_t i = 0; i < amp.size(); ++i) {
        CHECK(std::fabs(amp[i] * std::cos(phase[i]) - f.real[i]) < 1e-5);
        CHECK(std::fabs(amp[i] * std::sin(phase[i]) - f.imag[i]) < 1e-5);
    }
}

// ---- tape ops ----

TEST_CASE("dft2d_op forward equals plain dft2d") {
    std::mt19937 gen(30);
    Tensor x = rand_nondegenerate({8, 4, 2}, gen);
    ag::Var v = ag::dft2d_op(ag::constant(x));
    ComplexPair ref = dft2d(x);
    CHECK(v->value.dim(0) == 2);
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) {
        CHECK(v->value[i] == doctest::Approx(ref.real[i]).epsilon(1e-6));
        CHECK(v->value[n + i] == doctest::Approx(ref.imag[i]).epsilon(1e-6));
    }
}

TEST_CASE("idft2d_op forward equals plain idft2d") {
    std::mt19937 gen(31);
    Tensor re = rand_nondegenerate({4, 8}, gen);
    Tensor im = rand_nondegenerate({4, 8}, gen);
    Tensor stacked({2, 4, 8});
    std::copy_n(re.data(), re.size(), stacked.data());
    std::copy_n(im.data(), im.size(), stacked.data() + re.size());
    ag::Var v = ag::idft2d_op(ag::constant(stacked));
    Tensor ref = idft2d(ComplexPair(re, im));
    CHECK(max_abs_diff(v->value, ref) < 1e-6);
}

TEST_CASE("tape round trip dft->idft reproduces input") {
    std::mt19937 gen(32);
    Tensor x = rand_nondegenerate({8, 8}, gen);
    ag::Var v = ag::idft2d_op(ag::dft2d_op(ag::constant(x)));
    CHECK(max_abs_diff(v->value, x) < 1e-5);
}

TEST_CASE("dft2d_op gradient via finite differences") {
    check_grad(
        [](const std::vector<ag::Var>& p) { return weighted(ag::dft2d_op(p[0]), 61); },
        [](std::mt19937& g) { return std::vector<Tensor>{rand_nondegenerate({4, 4}, g)}; });
}

TEST_CASE("idft2d_op gradient via finite differences") {
    check_grad(
        [](const std::vector<ag::Var>& p) { return weighted(ag::idft2d_op(p[0]), 62); },
        [](std::mt19937& g) { return std::vector<Tensor>{rand_nondegenerate({2, 4, 4}, g)}; });
}

TEST_CASE("composite spectral pipeline gradient") {
    // dft -> elementwise scale in frequency space -> idft, the FPE skeleton.
    check_grad(
        [](const std::vector<ag::Var>& p) {
            ag::Var spec = ag::dft2d_op(p[0]);
            ag::Var filtered = ag::mul(spec, p[1]);
            return weighted(ag::idft2d_op(filtered), 63);
        },
        [](std::mt19937& g) {
            return std::vector<Tensor>{rand_nondegenerate({4, 4}, g),
                                       rand_nondegenerate({2, 4, 4}, g)};
        });
}

TEST_CASE("tape ops reject malformed spectra") {
    CHECK_THROWS_AS(ag::idft2d_op(ag::constant(Tensor({3, 4, 4}))), DimensionError);
    CHECK_THROWS_AS(ag::dft2d_op(ag::constant(Tensor({4}))), DimensionError);
}
