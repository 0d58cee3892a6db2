#include <catch2/catch_amalgamated.hpp>

#include <fpbc/fft.hpp>
#include <fpbc/field.hpp>
#include <fpbc/rng.hpp>

#include "support/oracles.hpp"

using namespace fpbc;

TEST_CASE("field shape bookkeeping") {
    Field f({4, 8, 8});
    REQUIRE(f.size() == 256);
    REQUIRE(f.stride(0) == 64);
    REQUIRE(f.stride(2) == 1);
    REQUIRE_THROWS_AS(Field({0, 3}), Error);
}

TEST_CASE("inner product is conjugate-linear in the first slot") {
    Rng rng(7);
    Field a = random_field({6, 5}, rng);
    Field b = random_field({6, 5}, rng);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += cplx{0.0, rng.normal()};
    auto lhs = inner(a, b);
    auto rhs = std::conj(inner(b, a));
    REQUIRE(std::abs(lhs - rhs) < 1e-12);
}

TEST_CASE("rng determinism and fork independence") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    Rng base(1);
    Rng f1 = base.fork(0), f2 = base.fork(1);
    REQUIRE(f1.next_u64() != f2.next_u64());
}

TEST_CASE("poisson sampler mean/variance sanity") {
    Rng rng(3);
    for (double mean : {0.5, 8.0, 200.0, 9000.0}) {
        const int trials = 4000;
        double s = 0, s2 = 0;
        for (int i = 0; i < trials; ++i) {
            double k = double(rng.poisson(mean));
            s += k;
            s2 += k * k;
        }
        double m = s / trials;
        double var = s2 / trials - m * m;
        REQUIRE(std::abs(m - mean) < 5.0 * std::sqrt(mean / trials) + 1e-9);
        REQUIRE(var == Catch::Approx(mean).margin(6.0 * mean * std::sqrt(2.0 / trials) + 0.1));
    }
}

TEST_CASE("unitary DFT matches the naive oracle") {
    Rng rng(11);
    for (auto dims : std::vector<std::vector<std::size_t>>{{8}, {4, 6}, {3, 4, 5}}) {
        Field x = random_field(dims, rng);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += cplx{0.0, rng.normal()};
        Field want = oracles::naive_dft_unitary(x, -1);
        Field got = x;
        dft_unitary_all(got, FFTW_FORWARD);
        REQUIRE(rel_diff(got, want) < 1e-10);

        Field back = got;
        dft_unitary_all(back, FFTW_BACKWARD);
        REQUIRE(rel_diff(back, x) < 1e-10);
    }
}

TEST_CASE("unitary DFT preserves l2 norm to 1e-9") {
    Rng rng(5);
    Field x = random_field({16, 16}, rng);
    double before = x.norm2();
    dft_unitary_all(x, FFTW_FORWARD);
    REQUIRE(std::abs(x.norm2() - before) <= 1e-9 * before);
}

TEST_CASE("spatial DFT batches over trailing axes") {
    Rng rng(13);
    Field x = random_field({4, 4, 3}, rng);
    // transform each trailing slice separately with the oracle
    Field got = x;
    dft_spatial(got, FFTW_FORWARD);
    for (std::size_t b = 0; b < 3; ++b) {
        Field slice({4, 4});
        for (std::size_t i = 0; i < 16; ++i) slice[i] = x[i * 3 + b];
        Field want = oracles::naive_dft_unitary(slice, -1);
        want *= std::sqrt(16.0); // oracle is unitary; dft_spatial is unnormalized
        for (std::size_t i = 0; i < 16; ++i)
            REQUIRE(std::abs(got[i * 3 + b] - want[i]) < 1e-9);
    }
}
