#pragma once

#include <fftw3.h>

#include <cstring>
#include <map>
#include <mutex>
#include <tuple>
#include <vector>

#include "field.hpp"

namespace fpbc {

namespace detail {

// FFTW's planner is not thread-safe; plan creation is serialized. Executed
// plans live in a thread-local cache with their own aligned scratch so
// concurrent workers never share buffers.
inline std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

struct PlanEntry {
    fftw_plan plan = nullptr;
    fftw_complex* buf = nullptr;
    std::size_t n = 0;

    ~PlanEntry() {
        if (plan) {
            std::lock_guard<std::mutex> lock(planner_mutex());
            fftw_destroy_plan(plan);
        }
        if (buf) fftw_free(buf);
    }
    PlanEntry() = default;
    PlanEntry(const PlanEntry&) = delete;
    PlanEntry& operator=(const PlanEntry&) = delete;
    PlanEntry(PlanEntry&& o) noexcept : plan(o.plan), buf(o.buf), n(o.n) {
        o.plan = nullptr;
        o.buf = nullptr;
    }
};

using PlanKey = std::tuple<std::vector<std::size_t>, int, int>; // dims, n_axes, sign

inline PlanEntry& plan_for(const std::vector<std::size_t>& dims, int transform_axes, int sign) {
    thread_local std::map<PlanKey, PlanEntry> cache;
    PlanKey key{dims, transform_axes, sign};
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;

    std::size_t total = 1;
    for (auto d : dims) total *= d;

    PlanEntry entry;
    entry.n = total;
    entry.buf = fftw_alloc_complex(total);

    std::vector<int> n(dims.begin(), dims.begin() + transform_axes);
    std::size_t rest = 1;
    for (std::size_t a = std::size_t(transform_axes); a < dims.size(); ++a) rest *= dims[a];

    {
        std::lock_guard<std::mutex> lock(planner_mutex());
        // Row-major layout: the transformed axes are the leading ones, so each
        // of the `rest` trailing slices is an interleaved transform with
        // stride `rest` and distance 1.
        entry.plan = fftw_plan_many_dft(transform_axes, n.data(), int(rest), entry.buf, nullptr,
                                        int(rest), 1, entry.buf, nullptr, int(rest), 1, sign,
                                        FFTW_ESTIMATE);
    }
    auto [pos, inserted] = cache.emplace(std::move(key), std::move(entry));
    return pos->second;
}

} // namespace detail

// In-place DFT over the leading `axes` axes (batched over the rest).
// sign = FFTW_FORWARD (-1) or FFTW_BACKWARD (+1). Unnormalized.
inline void dft_leading_axes(Field& f, int axes, int sign) {
    auto& entry = detail::plan_for(f.dims(), axes, sign);
    static_assert(sizeof(cplx) == sizeof(fftw_complex));
    std::memcpy(entry.buf, f.data(), entry.n * sizeof(cplx));
    fftw_execute(entry.plan);
    std::memcpy(f.data(), entry.buf, entry.n * sizeof(cplx));
}

// Unitary DFT over all axes (1/sqrt(N) both directions).
inline void dft_unitary_all(Field& f, int sign) {
    dft_leading_axes(f, int(f.rank()), sign);
    f *= 1.0 / std::sqrt(double(f.size()));
}

// Unnormalized 2D DFT over the spatial axes (0, 1).
inline void dft_spatial(Field& f, int sign) {
    if (f.rank() < 2) fail("ShapeMismatch", "spatial DFT needs rank >= 2");
    dft_leading_axes(f, 2, sign);
}

inline void idft_spatial_scaled(Field& f) {
    dft_spatial(f, FFTW_BACKWARD);
    f *= 1.0 / double(f.dims()[0] * f.dims()[1]);
}

} // namespace fpbc
