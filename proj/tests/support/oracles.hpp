#pragma once

// Independent oracles used by the test suites. Everything here is deliberately
// brute-force and stays decoupled from the implementation paths it checks.

#include <fpbc/field.hpp>

#include <cmath>
#include <complex>
#include <vector>

namespace oracles {

using fpbc::cplx;
using fpbc::Field;

// O(N^2) DFT over all axes, unitary scaling.
inline Field naive_dft_unitary(const Field& in, int sign) {
    Field out = Field::zeros_like(in);
    const auto& dims = in.dims();
    const std::size_t n = in.size();
    std::vector<std::size_t> idx_out(dims.size()), idx_in(dims.size());
    for (std::size_t io = 0; io < n; ++io) {
        std::size_t rem = io;
        for (std::size_t a = 0; a < dims.size(); ++a) {
            idx_out[a] = rem / in.stride(a);
            rem %= in.stride(a);
        }
        cplx acc{0.0, 0.0};
        for (std::size_t ii = 0; ii < n; ++ii) {
            std::size_t rem2 = ii;
            double phase = 0.0;
            for (std::size_t a = 0; a < dims.size(); ++a) {
                idx_in[a] = rem2 / in.stride(a);
                rem2 %= in.stride(a);
                phase += double(idx_out[a] * idx_in[a]) / double(dims[a]);
            }
            acc += in[ii] * std::polar(1.0, sign * 2.0 * M_PI * phase);
        }
        out[io] = acc;
    }
    out *= 1.0 / std::sqrt(double(n));
    return out;
}

// Brute-force ray sum for a single parallel-beam angle on a small 2D image:
// rotate sampling points by -theta about the center with bilinear weights and
// sum down columns. Used to freeze Radon expectations independently.
inline std::vector<double> ray_sum_projection(const Field& img, double theta) {
    const std::size_t ny = img.dims()[0], nx = img.dims()[1];
    const double cy = 0.5 * double(ny - 1), cx = 0.5 * double(nx - 1);
    const double c = std::cos(theta), s = std::sin(theta);
    std::vector<double> proj(nx, 0.0);
    for (std::size_t u = 0; u < nx; ++u) {
        for (std::size_t v = 0; v < ny; ++v) {
            // detector coordinate u (x after rotation), integration along v
            const double xr = double(u) - cx, yr = double(v) - cy;
            const double xs = c * xr - s * yr + cx;
            const double ys = s * xr + c * yr + cy;
            const int x0 = int(std::floor(xs)), y0 = int(std::floor(ys));
            const double fx = xs - x0, fy = ys - y0;
            for (int dy = 0; dy <= 1; ++dy) {
                for (int dx = 0; dx <= 1; ++dx) {
                    const int xi = x0 + dx, yi = y0 + dy;
                    if (xi < 0 || yi < 0 || xi >= int(nx) || yi >= int(ny)) continue;
                    const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
                    proj[u] += w * img[std::size_t(yi) * nx + xi].real();
                }
            }
        }
    }
    return proj;
}

} // namespace oracles
