#pragma once

#include <algorithm>
#include <complex>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace fpbc {

using cplx = std::complex<double>;

enum class DomainTag { object, intermediate, measurement };

// Dense multi-dimensional array, row-major, up to 5 axes. Storage is complex;
// most chains stay numerically real and is_real() tracks that cheaply.
class Field {
  public:
    Field() = default;

    explicit Field(std::vector<std::size_t> dims, DomainTag tag = DomainTag::intermediate)
        : dims_(std::move(dims)), tag_(tag) {
        if (dims_.empty() || dims_.size() > 5) fail("ShapeMismatch", "field rank must be 1..5");
        std::size_t n = 1;
        for (std::size_t d : dims_) {
            if (d == 0) fail("ShapeMismatch", "zero-sized axis");
            n *= d;
        }
        data_.assign(n, cplx{0.0, 0.0});
    }

    static Field zeros_like(const Field& other) { return Field(other.dims_, other.tag_); }

    const std::vector<std::size_t>& dims() const { return dims_; }
    std::size_t rank() const { return dims_.size(); }
    std::size_t size() const { return data_.size(); }
    DomainTag tag() const { return tag_; }
    void set_tag(DomainTag t) { tag_ = t; }

    cplx& operator[](std::size_t i) { return data_[i]; }
    const cplx& operator[](std::size_t i) const { return data_[i]; }
    cplx* data() { return data_.data(); }
    const cplx* data() const { return data_.data(); }

    std::size_t stride(std::size_t axis) const {
        std::size_t s = 1;
        for (std::size_t a = axis + 1; a < dims_.size(); ++a) s *= dims_[a];
        return s;
    }

    bool same_dims(const Field& other) const { return dims_ == other.dims_; }

    bool is_real(double tol = 1e-12) const {
        double max_im = 0.0, max_re = 0.0;
        for (const auto& v : data_) {
            max_im = std::max(max_im, std::abs(v.imag()));
            max_re = std::max(max_re, std::abs(v.real()));
        }
        return max_im <= tol * std::max(max_re, 1.0);
    }

    bool is_nonneg(double tol = 1e-12) const {
        if (!is_real(tol)) return false;
        for (const auto& v : data_)
            if (v.real() < -tol) return false;
        return true;
    }

    double norm2() const {
        double s = 0.0;
        for (const auto& v : data_) s += std::norm(v);
        return std::sqrt(s);
    }

    double max_abs() const {
        double m = 0.0;
        for (const auto& v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    // Peak of the real part; the PSNR reference level for real phantoms.
    double max_real() const {
        double m = -std::numeric_limits<double>::infinity();
        for (const auto& v : data_) m = std::max(m, v.real());
        return m;
    }

    double sum_real() const {
        double s = 0.0;
        for (const auto& v : data_) s += v.real();
        return s;
    }

    Field& operator+=(const Field& o) {
        check_same(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Field& operator-=(const Field& o) {
        check_same(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Field& operator*=(double s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    friend Field operator+(Field a, const Field& b) { return a += b; }
    friend Field operator-(Field a, const Field& b) { return a -= b; }
    friend Field operator*(double s, Field a) { return a *= s; }

    void clamp_nonneg() {
        for (auto& v : data_) v = cplx{std::max(v.real(), 0.0), 0.0};
    }

    std::string dims_string() const {
        std::ostringstream os;
        for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "x" : "") << dims_[i];
        return os.str();
    }

  private:
    void check_same(const Field& o) const {
        if (dims_ != o.dims_)
            fail("ShapeMismatch", "field dims " + dims_string() + " vs " + o.dims_string());
    }

    std::vector<std::size_t> dims_;
    std::vector<cplx> data_;
    DomainTag tag_ = DomainTag::intermediate;
};

inline cplx inner(const Field& a, const Field& b) {
    if (!a.same_dims(b)) fail("ShapeMismatch", "inner product dims");
    cplx s{0.0, 0.0};
    for (std::size_t i = 0; i < a.size(); ++i) s += std::conj(a[i]) * b[i];
    return s;
}

inline Field random_field(const std::vector<std::size_t>& dims, Rng& rng, bool nonneg = false) {
    Field f(dims);
    for (std::size_t i = 0; i < f.size(); ++i)
        f[i] = cplx{nonneg ? rng.uniform() : rng.normal(), 0.0};
    return f;
}

inline double rel_diff(const Field& a, const Field& b) {
    double num = (a - b).norm2();
    double den = std::max(b.norm2(), 1e-300);
    return num / den;
}

} // namespace fpbc
