#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "fft.hpp"
#include "field.hpp"
#include "rng.hpp"
#include "specdoc.hpp"

namespace fpbc {

enum class Linearity { linear, nonlinear };

enum class LambdaFamily { exponential, logarithmic, phase_wrap, polynomial, saturation };

enum class Encoder { diffuser, multilens, metasurface };

// ---------------------------------------------------------------------------
// parameter helpers

inline double param_double(const std::map<std::string, std::string>& params,
                           const std::string& key, double fallback) {
    auto it = params.find(key);
    if (it == params.end()) return fallback;
    double d = 0;
    if (!strutil::parse_double(it->second, d))
        fail("MissingParam", "param '" + key + "' is not numeric: '" + it->second + "'");
    return d;
}

inline double require_param(const std::map<std::string, std::string>& params,
                            const std::string& key, const char* who) {
    auto it = params.find(key);
    if (it == params.end()) fail("MissingParam", std::string(who) + " requires param '" + key + "'");
    double d = 0;
    if (!strutil::parse_double(it->second, d))
        fail("MissingParam", "param '" + key + "' is not numeric: '" + it->second + "'");
    return d;
}

inline bool param_flag(const std::map<std::string, std::string>& params, const std::string& key) {
    return params.count(key) != 0;
}

// ---------------------------------------------------------------------------
// depth-encoder PSF generation

namespace psf_detail {

inline void gaussian_blur_2d(std::vector<double>& img, std::size_t ny, std::size_t nx,
                             double sigma) {
    if (sigma <= 0) return;
    int radius = std::max(1, int(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double ksum = 0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        ksum += kernel[i + radius];
    }
    for (auto& k : kernel) k /= ksum;
    std::vector<double> tmp(img.size());
    for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t x = 0; x < nx; ++x) {
            double s = 0;
            for (int i = -radius; i <= radius; ++i) {
                std::size_t xx = std::size_t((int(x) + i + 8 * int(nx)) % int(nx));
                s += kernel[i + radius] * img[y * nx + xx];
            }
            tmp[y * nx + x] = s;
        }
    for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t x = 0; x < nx; ++x) {
            double s = 0;
            for (int i = -radius; i <= radius; ++i) {
                std::size_t yy = std::size_t((int(y) + i + 8 * int(ny)) % int(ny));
                s += kernel[i + radius] * tmp[yy * nx + x];
            }
            img[y * nx + x] = s;
        }
}

inline Field intensity_psf_from_phase(const std::vector<double>& phase, std::size_t ny,
                                      std::size_t nx) {
    Field pupil({ny, nx});
    for (std::size_t i = 0; i < pupil.size(); ++i) pupil[i] = std::polar(1.0, phase[i]);
    dft_leading_axes(pupil, 2, FFTW_FORWARD);
    Field psf({ny, nx});
    // centered (fftshifted) intensity
    for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t x = 0; x < nx; ++x) {
            std::size_t ys = (y + ny / 2) % ny, xs = (x + nx / 2) % nx;
            psf[ys * nx + xs] = std::norm(pupil[y * nx + x]);
        }
    double s = psf.sum_real();
    if (s > 0) psf *= 1.0 / s;
    return psf;
}

} // namespace psf_detail

inline Encoder parse_encoder(const std::string& name) {
    std::string n = strutil::lower(name);
    if (n == "diffuser" || n == "phase_mask") return Encoder::diffuser;
    if (n == "multilens" || n == "multi-lens" || n == "lenslet") return Encoder::multilens;
    if (n == "metasurface" || n == "meta-surface") return Encoder::metasurface;
    fail("BadEncoderParam", "unknown encoder '" + name + "'");
}

// Depth-dependent PSF stacks for the three encoder families. Every PSF is
// centered and normalized to unit sum; identical (encoder, params, seed)
// reproduce the stack bit-exactly.
inline std::vector<Field> generate_depth_psfs(Encoder encoder, std::size_t n_depths,
                                              std::size_t ny, std::size_t nx,
                                              const std::map<std::string, std::string>& params,
                                              std::uint64_t seed) {
    if (n_depths < 1) fail("BadEncoderParam", "n_depths must be >= 1");
    const double defocus_max = param_double(params, "defocus_max", 40.0);
    auto defocus = [&](std::size_t z) {
        return n_depths == 1 ? 0.0 : defocus_max * double(z) / double(n_depths - 1);
    };
    std::vector<Field> stack;
    stack.reserve(n_depths);

    if (encoder == Encoder::diffuser) {
        const double feature_scale = param_double(params, "feature_scale", 1.0);
        const double phase_amp = param_double(params, "phase_amp", 14.0);
        Rng rng(seed);
        std::vector<double> phi(ny * nx);
        for (auto& v : phi) v = rng.normal();
        psf_detail::gaussian_blur_2d(phi, ny, nx, feature_scale);
        double m = 0, m2 = 0;
        for (double v : phi) { m += v; m2 += v * v; }
        m /= double(phi.size());
        double sd = std::sqrt(std::max(m2 / double(phi.size()) - m * m, 1e-30));
        for (auto& v : phi) v = (v - m) / sd * phase_amp;
        if (phase_amp == 0.0) std::fill(phi.begin(), phi.end(), 0.0);

        for (std::size_t z = 0; z < n_depths; ++z) {
            std::vector<double> phase(ny * nx);
            for (std::size_t y = 0; y < ny; ++y)
                for (std::size_t x = 0; x < nx; ++x) {
                    double u = 2.0 * double(x) / double(nx) - 1.0;
                    double v = 2.0 * double(y) / double(ny) - 1.0;
                    phase[y * nx + x] = phi[y * nx + x] + defocus(z) * (u * u + v * v);
                }
            stack.push_back(psf_detail::intensity_psf_from_phase(phase, ny, nx));
        }
        return stack;
    }

    if (encoder == Encoder::multilens) {
        const double pitch = param_double(params, "lenslet_pitch", 8.0);
        const double parallax = param_double(params, "parallax_px", 0.6);
        if (pitch < 2) fail("BadEncoderParam", "lenslet_pitch must be >= 2");
        for (std::size_t z = 0; z < n_depths; ++z) {
            Field psf({ny, nx});
            const double sz = parallax * double(z);
            for (double gy = pitch / 2; gy < double(ny); gy += pitch)
                for (double gx = pitch / 2; gx < double(nx); gx += pitch) {
                    // sub-pixel parallax shift, deposited bilinearly
                    double yy = gy + sz, xx = gx + sz;
                    int y0 = int(std::floor(yy)), x0 = int(std::floor(xx));
                    double fy = yy - y0, fx = xx - x0;
                    for (int dy = 0; dy <= 1; ++dy)
                        for (int dx = 0; dx <= 1; ++dx) {
                            std::size_t yi = std::size_t((y0 + dy) % int(ny));
                            std::size_t xi = std::size_t((x0 + dx) % int(nx));
                            psf[yi * nx + xi] += (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
                        }
                }
            double s = psf.sum_real();
            psf *= 1.0 / s;
            stack.push_back(std::move(psf));
        }
        return stack;
    }

    // metasurface: engineered phase, cubic + trefoil + astigmatism + defocus(z)
    const double cubic = param_double(params, "cubic_amp", 18.0);
    const double trefoil = param_double(params, "trefoil_amp", 6.0);
    const double astig = param_double(params, "astig_amp", 4.0);
    for (std::size_t z = 0; z < n_depths; ++z) {
        std::vector<double> phase(ny * nx);
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) {
                double u = 2.0 * double(x) / double(nx) - 1.0;
                double v = 2.0 * double(y) / double(ny) - 1.0;
                double r2 = u * u + v * v;
                double r = std::sqrt(r2), th = std::atan2(v, u);
                phase[y * nx + x] = cubic * (u * u * u + v * v * v) +
                                    trefoil * r2 * r * std::cos(3 * th) +
                                    astig * r2 * std::cos(2 * th) + defocus(z) * r2;
            }
        stack.push_back(psf_detail::intensity_psf_from_phase(phase, ny, nx));
    }
    return stack;
}

// Mean pairwise normalized inner product between distinct depth PSFs.
inline double mean_psf_cross_correlation(const std::vector<Field>& stack) {
    if (stack.size() < 2) return 1.0;
    double acc = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < stack.size(); ++i)
        for (std::size_t j = i + 1; j < stack.size(); ++j) {
            double dot = inner(stack[i], stack[j]).real();
            acc += dot / std::max(stack[i].norm2() * stack[j].norm2(), 1e-300);
            ++count;
        }
    return acc / double(count);
}

// ---------------------------------------------------------------------------
// Primitive

// One FPB operator instance. Constructed from (kind, params, tier) and
// finalized against concrete input dims by prepare(); apply/adjoint are pure
// afterwards. Nonlinear kinds expose the adjoint of their Jacobian at a
// linearization point instead of a true adjoint.
class Primitive {
  public:
    Kind kind = Kind::D;
    Variant variant = Variant::none;
    std::map<std::string, std::string> params;
    int tier = 1;

    Primitive() = default;

    Primitive(Kind k, std::map<std::string, std::string> p, int t, Variant var = Variant::none)
        : kind(k), variant(var), params(std::move(p)), tier(t) {
        if (tier < 0 || tier > 3) fail("TierUnsupported", "tier must be 0..3");
        if (tier == 3 && kind != Kind::C && kind != Kind::R)
            fail("TierUnsupported",
                 std::string("tier 3 has a synthetic surrogate only for C and R, not ") +
                     kind_symbol(kind));
        validate_params();
    }

    Linearity linearity() const {
        if (kind == Kind::Lambda) return Linearity::nonlinear;
        if (kind == Kind::D && param_flag(params, "intensity")) return Linearity::nonlinear;
        return Linearity::linear;
    }

    bool prepared() const { return prepared_; }
    const std::vector<std::size_t>& in_dims() const { return in_dims_; }
    const std::vector<std::size_t>& out_dims() const { return out_dims_; }
    double lipschitz() const { return lipschitz_; }
    const std::vector<Field>& psf_stack() const { return psfs_; }

    void prepare(const std::vector<std::size_t>& dims, std::uint64_t seed) {
        if (prepared_ && dims == in_dims_) return;
        in_dims_ = dims;
        out_dims_ = dims;
        seed_ = seed;
        switch (kind) {
            case Kind::M: prepare_modulate(); break;
            case Kind::Pi: prepare_radon(); break;
            case Kind::F: lipschitz_ = 1.0; break;
            case Kind::C: prepare_convolve(); break;
            case Kind::P: prepare_propagate(); break;
            case Kind::W: prepare_disperse(); break;
            case Kind::Sigma: prepare_accumulate(); break;
            case Kind::S: prepare_sample(); break;
            case Kind::D: prepare_detect(); break;
            case Kind::R: prepare_scatter(); break;
            case Kind::Lambda: prepare_lambda(); break;
        }
        prepared_ = true;
    }

    Field apply(const Field& x) const {
        check_in(x);
        switch (kind) {
            case Kind::M: return mul_mask(x, false);
            case Kind::Pi: return radon_forward(x);
            case Kind::F: {
                Field y = x;
                dft_unitary_all(y, FFTW_FORWARD);
                return y;
            }
            case Kind::C: return conv_spectrum(x, spectra_, false);
            case Kind::P: return conv_spectrum(x, spectra_, false);
            case Kind::W: return disperse_forward(x);
            case Kind::Sigma: return accumulate_forward(x);
            case Kind::S: return mul_mask(x, false);
            case Kind::D: return detect_forward(x);
            case Kind::R: return conv_spectrum(x, spectra_, false);
            case Kind::Lambda: return lambda_forward(x);
        }
        fail("ShapeMismatch", "unreachable");
    }

    Field adjoint(const Field& y) const {
        if (linearity() == Linearity::nonlinear)
            fail("NotLinearizable",
                 std::string(kind_symbol(kind)) + " is nonlinear; use adjoint_jacobian");
        check_out(y);
        switch (kind) {
            case Kind::M: return mul_mask(y, true);
            case Kind::Pi: return radon_adjoint(y);
            case Kind::F: {
                Field x = y;
                dft_unitary_all(x, FFTW_BACKWARD);
                return x;
            }
            case Kind::C: return conv_spectrum(y, spectra_, true);
            case Kind::P: return conv_spectrum(y, spectra_, true);
            case Kind::W: return disperse_adjoint(y);
            case Kind::Sigma: return accumulate_adjoint(y);
            case Kind::S: return mul_mask(y, true);
            case Kind::D: {
                Field x = y;
                x *= param_double(params, "gain", 1.0);
                return x;
            }
            case Kind::R: return conv_spectrum(y, spectra_, true);
            case Kind::Lambda: break;
        }
        fail("NotLinearizable", "unreachable");
    }

    // Tangent map at linearization point x0 (equals apply for linear kinds).
    Field apply_jacobian(const Field& x0, const Field& v) const {
        if (linearity() == Linearity::linear) return apply(v);
        check_in(x0);
        check_in(v);
        Field out = Field(out_dims_);
        const double gain = param_double(params, "gain", 1.0);
        if (kind == Kind::D) {
            for (std::size_t i = 0; i < v.size(); ++i)
                out[i] = cplx{2.0 * gain * (std::conj(x0[i]) * v[i]).real(), 0.0};
            return out;
        }
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = lambda_deriv(x0[i]) * v[i];
        return out;
    }

    Field adjoint_jacobian(const Field& x0, const Field& y) const {
        if (linearity() == Linearity::linear) return adjoint(y);
        check_in(x0);
        check_out(y);
        Field out = Field(in_dims_);
        const double gain = param_double(params, "gain", 1.0);
        if (kind == Kind::D) {
            for (std::size_t i = 0; i < y.size(); ++i) out[i] = 2.0 * gain * x0[i] * y[i].real();
            return out;
        }
        for (std::size_t i = 0; i < y.size(); ++i) out[i] = std::conj(lambda_deriv(x0[i])) * y[i];
        return out;
    }

  private:
    void validate_params() {
        if (kind == Kind::Pi) (void)require_param(params, "n_angles", "Pi");
        if (kind == Kind::W) {
            (void)require_param(params, "shift", "W");
            (void)require_param(params, "axis", "W");
        }
        if (kind == Kind::Lambda) {
            auto it = params.find("family");
            if (it == params.end()) fail("MissingParam", "Lambda requires param 'family'");
            family_ = parse_family(it->second);
        }
    }

    static LambdaFamily parse_family(const std::string& name) {
        std::string n = strutil::lower(name);
        if (n == "exponential") return LambdaFamily::exponential;
        if (n == "logarithmic") return LambdaFamily::logarithmic;
        if (n == "phase_wrap") return LambdaFamily::phase_wrap;
        if (n == "polynomial") return LambdaFamily::polynomial;
        if (n == "saturation") return LambdaFamily::saturation;
        fail("UnknownFamily", "'" + name +
                                  "' is not one of exponential|logarithmic|phase_wrap|"
                                  "polynomial|saturation");
    }

    void check_in(const Field& x) const {
        if (!prepared_) fail("ShapeMismatch", "primitive not prepared");
        if (x.dims() != in_dims_)
            fail("ShapeMismatch", std::string(kind_symbol(kind)) + ": got " + x.dims_string());
    }
    void check_out(const Field& y) const {
        if (!prepared_) fail("ShapeMismatch", "primitive not prepared");
        if (y.dims() != out_dims_)
            fail("ShapeMismatch", std::string(kind_symbol(kind)) + " adjoint: got " +
                                      y.dims_string());
    }

    std::size_t rest_count() const {
        std::size_t r = 1;
        for (std::size_t a = 2; a < in_dims_.size(); ++a) r *= in_dims_[a];
        return r;
    }

    std::size_t rest_axis_index(std::size_t rest_index, std::size_t axis) const {
        std::size_t stride = 1;
        for (std::size_t a = axis + 1; a < in_dims_.size(); ++a) stride *= in_dims_[a];
        return (rest_index / stride) % in_dims_[axis];
    }

    // ---- M / S ----
    void prepare_modulate() {
        if (in_dims_.size() < 2) fail("ShapeMismatch", "M needs rank >= 2");
        const std::size_t ny = in_dims_[0], nx = in_dims_[1];
        mask_ = Field({ny, nx});
        std::string pattern = params.count("mask") ? strutil::lower(params.at("mask")) : "ones";
        Rng rng(seed_ ^ 0x6d61736bULL);
        if (pattern == "ones" || pattern == "coil" || pattern.empty()) {
            for (std::size_t i = 0; i < mask_.size(); ++i) mask_[i] = 1.0;
            if (pattern == "coil") {
                // smooth single-coil sensitivity, peaked off-center
                for (std::size_t y = 0; y < ny; ++y)
                    for (std::size_t x = 0; x < nx; ++x) {
                        double u = (double(x) / nx - 0.35), v = (double(y) / ny - 0.4);
                        mask_[y * nx + x] = 0.35 + 0.65 * std::exp(-3.0 * (u * u + v * v));
                    }
            }
        } else if (pattern == "random_binary") {
            double density = param_double(params, "density", 0.5);
            for (std::size_t i = 0; i < mask_.size(); ++i)
                mask_[i] = rng.uniform() < density ? 1.0 : 0.0;
        } else if (pattern == "random_uniform") {
            for (std::size_t i = 0; i < mask_.size(); ++i) mask_[i] = rng.uniform();
        } else {
            fail("MissingParam", "unknown mask pattern '" + pattern + "'");
        }
        double sy = param_double(params, "mask_shift_y", 0.0);
        double sx = param_double(params, "mask_shift_x", 0.0);
        if (sy != 0 || sx != 0) mask_ = shift_bilinear_circular(mask_, sy, sx);
        lipschitz_ = mask_.max_abs();
    }

    void prepare_sample() {
        if (in_dims_.size() < 2) fail("ShapeMismatch", "S needs rank >= 2");
        const std::size_t ny = in_dims_[0], nx = in_dims_[1];
        mask_ = Field({ny, nx});
        std::string pattern =
            params.count("pattern") ? strutil::lower(params.at("pattern")) : "stride_rows";
        std::size_t kept = 0;
        if (pattern == "stride_rows") {
            int stride = int(param_double(params, "stride", 4));
            if (stride < 1) fail("MissingParam", "S stride must be >= 1");
            int center = int(param_double(params, "center_rows", 4));
            for (std::size_t y = 0; y < ny; ++y) {
                bool keep = (y % std::size_t(stride)) == 0 ||
                            std::llabs(long long(y) - long long(ny / 2)) < center / 2;
                if (!keep) continue;
                for (std::size_t x = 0; x < nx; ++x) mask_[y * nx + x] = 1.0;
                kept += nx;
            }
        } else if (pattern == "random") {
            double density = param_double(params, "density", 0.25);
            Rng rng(seed_ ^ 0x73616d70ULL);
            for (std::size_t i = 0; i < mask_.size(); ++i)
                if (rng.uniform() < density) {
                    mask_[i] = 1.0;
                    ++kept;
                }
        } else {
            fail("MissingParam", "unknown sampling pattern '" + pattern + "'");
        }
        keep_fraction_ = double(kept) / double(ny * nx);
        lipschitz_ = 1.0;
    }

  public:
    double keep_fraction() const { return kind == Kind::S ? keep_fraction_ : 1.0; }
    const Field& mask() const { return mask_; }

  private:
    Field mul_mask(const Field& x, bool conj) const {
        Field out = x;
        const std::size_t rest = rest_count();
        const std::size_t spatial = in_dims_[0] * in_dims_[1];
        for (std::size_t s = 0; s < spatial; ++s) {
            cplx m = conj ? std::conj(mask_[s]) : mask_[s];
            for (std::size_t r = 0; r < rest; ++r) out[s * rest + r] = x[s * rest + r] * m;
        }
        return out;
    }

    static Field shift_bilinear_circular(const Field& img, double dy, double dx) {
        const std::size_t ny = img.dims()[0], nx = img.dims()[1];
        Field out({ny, nx});
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) {
                double ys = double(y) - dy, xs = double(x) - dx;
                long y0 = long(std::floor(ys)), x0 = long(std::floor(xs));
                double fy = ys - double(y0), fx = xs - double(x0);
                cplx acc = 0;
                for (int ddy = 0; ddy <= 1; ++ddy)
                    for (int ddx = 0; ddx <= 1; ++ddx) {
                        std::size_t yi = std::size_t(((y0 + ddy) % long(ny) + long(ny)) % long(ny));
                        std::size_t xi = std::size_t(((x0 + ddx) % long(nx) + long(nx)) % long(nx));
                        acc += (ddy ? fy : 1 - fy) * (ddx ? fx : 1 - fx) * img[yi * nx + xi];
                    }
                out[y * nx + x] = acc;
            }
        return out;
    }

    // ---- Pi ----
    void prepare_radon() {
        if (in_dims_.size() != 2) fail("ShapeMismatch", "Pi expects a 2D object");
        n_angles_ = std::size_t(require_param(params, "n_angles", "Pi"));
        if (n_angles_ < 1) fail("MissingParam", "Pi n_angles must be >= 1");
        out_dims_ = {n_angles_, in_dims_[1]};
        // Schur bound via row/column absolute sums of the sampling weights
        Field ones_in(in_dims_);
        for (std::size_t i = 0; i < ones_in.size(); ++i) ones_in[i] = 1.0;
        Field row = radon_forward(ones_in);
        Field ones_out(out_dims_);
        for (std::size_t i = 0; i < ones_out.size(); ++i) ones_out[i] = 1.0;
        Field col = radon_adjoint(ones_out);
        lipschitz_ = std::sqrt(row.max_abs() * col.max_abs());
    }

    double angle(std::size_t a) const {
        const double offset = param_double(params, "angle_offset_deg", 0.0) * M_PI / 180.0;
        return M_PI * double(a) / double(n_angles_) + offset;
    }

    // Rotate-by-bilinear-interpolation then column-sum; tier 0 uses
    // nearest-neighbour sampling, tiers 1-2 bilinear. The adjoint is the exact
    // transpose of the same discrete map.
    Field radon_forward(const Field& x) const {
        const std::size_t ny = in_dims_[0], nx = in_dims_[1];
        const double cy = 0.5 * double(ny - 1), cx = 0.5 * double(nx - 1);
        Field out({n_angles_, nx});
        const bool nearest = tier == 0;
        for (std::size_t a = 0; a < n_angles_; ++a) {
            const double c = std::cos(angle(a)), s = std::sin(angle(a));
            for (std::size_t u = 0; u < nx; ++u)
                for (std::size_t v = 0; v < ny; ++v) {
                    const double xr = double(u) - cx, yr = double(v) - cy;
                    const double xs = c * xr - s * yr + cx;
                    const double ys = s * xr + c * yr + cy;
                    if (nearest) {
                        long xi = std::lround(xs), yi = std::lround(ys);
                        if (xi < 0 || yi < 0 || xi >= long(nx) || yi >= long(ny)) continue;
                        out[a * nx + u] += x[std::size_t(yi) * nx + std::size_t(xi)];
                        continue;
                    }
                    const long x0 = long(std::floor(xs)), y0 = long(std::floor(ys));
                    const double fx = xs - double(x0), fy = ys - double(y0);
                    for (int dy = 0; dy <= 1; ++dy)
                        for (int dx = 0; dx <= 1; ++dx) {
                            const long xi = x0 + dx, yi = y0 + dy;
                            if (xi < 0 || yi < 0 || xi >= long(nx) || yi >= long(ny)) continue;
                            out[a * nx + u] += (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx) *
                                               x[std::size_t(yi) * nx + std::size_t(xi)];
                        }
                }
        }
        return out;
    }

    Field radon_adjoint(const Field& y) const {
        const std::size_t ny = in_dims_[0], nx = in_dims_[1];
        const double cy = 0.5 * double(ny - 1), cx = 0.5 * double(nx - 1);
        Field out(in_dims_);
        const bool nearest = tier == 0;
        for (std::size_t a = 0; a < n_angles_; ++a) {
            const double c = std::cos(angle(a)), s = std::sin(angle(a));
            for (std::size_t u = 0; u < nx; ++u) {
                const cplx val = y[a * nx + u];
                for (std::size_t v = 0; v < ny; ++v) {
                    const double xr = double(u) - cx, yr = double(v) - cy;
                    const double xs = c * xr - s * yr + cx;
                    const double ys = s * xr + c * yr + cy;
                    if (nearest) {
                        long xi = std::lround(xs), yi = std::lround(ys);
                        if (xi < 0 || yi < 0 || xi >= long(nx) || yi >= long(ny)) continue;
                        out[std::size_t(yi) * nx + std::size_t(xi)] += val;
                        continue;
                    }
                    const long x0 = long(std::floor(xs)), y0 = long(std::floor(ys));
                    const double fx = xs - double(x0), fy = ys - double(y0);
                    for (int dy = 0; dy <= 1; ++dy)
                        for (int dx = 0; dx <= 1; ++dx) {
                            const long xi = x0 + dx, yi = y0 + dy;
                            if (xi < 0 || yi < 0 || xi >= long(nx) || yi >= long(ny)) continue;
                            out[std::size_t(yi) * nx + std::size_t(xi)] +=
                                (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx) * val;
                        }
                }
            }
        }
        return out;
    }

    // ---- C / P / R: spatial-spectrum multipliers ----
    void prepare_convolve() {
        if (in_dims_.size() < 2) fail("ShapeMismatch", "C needs rank >= 2");
        const std::size_t ny = in_dims_[0], nx = in_dims_[1];
        std::string psf_spec = params.count("psf") ? strutil::lower(params.at("psf")) : "delta";
        depth_axis_ = std::size_t(param_double(params, "depth_axis", 2));
        std::size_t n_depths = 1;
        bool depth_parameterised = variant == Variant::z;
        if (depth_parameterised) {
            if (depth_axis_ >= in_dims_.size())
                fail("ShapePropagationError", "Phi_z depth axis missing from field");
            n_depths = in_dims_[depth_axis_];
        }

        psfs_.clear();
        // strip a trailing "(z)" marker: diffuser(z) names the encoder family
        std::string enc_name = psf_spec;
        auto paren = enc_name.find('(');
        if (paren != std::string::npos) enc_name = enc_name.substr(0, paren);

        if (enc_name == "delta") {
            Field d({ny, nx});
            d[(ny / 2) * nx + nx / 2] = 1.0;
            psfs_.assign(1, d);
        } else if (enc_name == "gaussian") {
            double sigma = param_double(params, "psf_sigma", 1.5);
            psfs_.assign(1, gaussian_kernel(ny, nx, sigma));
        } else if (enc_name == "delta_plus_gaussian") {
            // well-conditioned blur: 0.7 delta + 0.3 gaussian
            double sigma = param_double(params, "psf_sigma", 2.0);
            Field g = gaussian_kernel(ny, nx, sigma);
            g *= 0.3;
            g[(ny / 2) * nx + nx / 2] += 0.7;
            psfs_.assign(1, g);
        } else {
            Encoder enc = parse_encoder(enc_name);
            psfs_ = generate_depth_psfs(enc, n_depths, ny, nx, params, seed_ ^ 0x707366ULL);
        }
        if (depth_parameterised && psfs_.size() == 1 && n_depths > 1)
            psfs_.assign(n_depths, psfs_[0]);
        if (depth_parameterised && psfs_.size() != n_depths)
            fail("ShapePropagationError", "psf stack depth mismatch");
        build_spectra();
    }

    void prepare_scatter() {
        if (in_dims_.size() < 2) fail("ShapeMismatch", "R needs rank >= 2");
        const std::size_t ny = in_dims_[0], nx = in_dims_[1];
        double len = param_double(params, "scattering_length", 2.0);
        psfs_.assign(1, gaussian_kernel(ny, nx, len));
        depth_axis_ = in_dims_.size(); // no depth parameterisation
        build_spectra();
    }

    void prepare_propagate() {
        if (in_dims_.size() < 2) fail("ShapeMismatch", "P needs rank >= 2");
        const std::size_t ny = in_dims_[0], nx = in_dims_[1];
        const double d = param_double(params, "d", 50.0);
        const double wavelength = param_double(params, "wavelength", 0.5);
        const double pitch = param_double(params, "pixel_pitch", 1.0);
        depth_axis_ = in_dims_.size();
        spectra_.assign(1, Field({ny, nx}));
        Field& h = spectra_[0];
        const double inv_l2 = 1.0 / (wavelength * wavelength);
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) {
                double fy = fft_freq(y, ny) / pitch;
                double fx = fft_freq(x, nx) / pitch;
                double f2 = fx * fx + fy * fy;
                if (tier == 0) {
                    // paraxial (Fresnel) transfer function
                    h[y * nx + x] = std::polar(1.0, -M_PI * wavelength * d * f2);
                } else if (f2 <= inv_l2) {
                    h[y * nx + x] = std::polar(1.0, 2.0 * M_PI * d * std::sqrt(inv_l2 - f2));
                } else {
                    h[y * nx + x] = std::exp(-2.0 * M_PI * d * std::sqrt(f2 - inv_l2));
                }
            }
        lipschitz_ = 1.0;
    }

    static Field gaussian_kernel(std::size_t ny, std::size_t nx, double sigma) {
        Field k({ny, nx});
        double s = 0;
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) {
                double dy = double(y) - double(ny / 2), dx = double(x) - double(nx / 2);
                double v = std::exp(-0.5 * (dy * dy + dx * dx) / (sigma * sigma));
                k[y * nx + x] = v;
                s += v;
            }
        k *= 1.0 / s;
        return k;
    }

    // Spectra are FFTs of the centered PSFs; tier 3 composes the synthetic
    // high-fidelity surrogate H + beta*H^2 in the Fourier domain.
    void build_spectra() {
        const std::size_t ny = in_dims_[0], nx = in_dims_[1];
        spectra_.clear();
        double lip = 0;
        const double beta = param_double(params, "surrogate_beta", 0.08);
        for (auto& p : psfs_) {
            // un-center so that the kernel peak sits at the origin
            Field k({ny, nx});
            for (std::size_t y = 0; y < ny; ++y)
                for (std::size_t x = 0; x < nx; ++x) {
                    std::size_t ys = (y + ny / 2) % ny, xs = (x + nx / 2) % nx;
                    k[y * nx + x] = p[ys * nx + xs];
                }
            dft_leading_axes(k, 2, FFTW_FORWARD);
            if (tier == 3)
                for (std::size_t i = 0; i < k.size(); ++i) k[i] = k[i] + beta * k[i] * k[i];
            lip = std::max(lip, k.max_abs());
            spectra_.push_back(std::move(k));
        }
        lipschitz_ = lip;
    }

    Field conv_spectrum(const Field& x, const std::vector<Field>& spectra, bool conj) const {
        Field out = x;
        dft_spatial(out, FFTW_FORWARD);
        const std::size_t ny = in_dims_[0], nx = in_dims_[1];
        const std::size_t rest = rest_count();
        const bool per_depth = spectra.size() > 1;
        for (std::size_t s = 0; s < ny * nx; ++s) {
            for (std::size_t r = 0; r < rest; ++r) {
                const Field& h = per_depth ? spectra[rest_axis_index(r, depth_axis_)] : spectra[0];
                cplx m = conj ? std::conj(h[s]) : h[s];
                out[s * rest + r] *= m;
            }
        }
        idft_spatial_scaled(out);
        return out;
    }

    static double fft_freq(std::size_t i, std::size_t n) {
        long k = long(i);
        if (k > long(n) / 2) k -= long(n);
        return double(k) / double(n);
    }

    // ---- W ----
    void prepare_disperse() {
        shift_ = require_param(params, "shift", "W");
        bin_axis_ = std::size_t(require_param(params, "axis", "W"));
        if (bin_axis_ < 2 || bin_axis_ >= in_dims_.size())
            fail("ShapePropagationError", "W bin axis out of range");
        dir_y_ = params.count("dir") && strutil::lower(params.at("dir")) == "y";
        const std::size_t nb = in_dims_[bin_axis_];
        const double span = std::abs(shift_) * double(nb - 1);
        const std::size_t grow = std::size_t(std::ceil(span - 1e-12));
        out_dims_ = in_dims_;
        out_dims_[dir_y_ ? 0 : 1] += grow;
        lipschitz_ = 1.0;
    }

    Field disperse_forward(const Field& x) const {
        Field out(out_dims_);
        scatter_disperse(x, out, false);
        return out;
    }
    Field disperse_adjoint(const Field& y) const {
        Field out(in_dims_);
        scatter_disperse(out, const_cast<Field&>(y), true);
        return out;
    }

    void scatter_disperse(const Field& small_ref, Field& big_ref, bool adjoint_mode) const {
        const Field& small_in = small_ref;
        const std::size_t ny = in_dims_[0], nx = in_dims_[1];
        const std::size_t nb = in_dims_[bin_axis_];
        const std::size_t rest = rest_count();
        const std::size_t big_sp_y = out_dims_[0], big_sp_x = out_dims_[1];
        Field& small_out = const_cast<Field&>(small_ref);
        const double base = shift_ < 0 ? std::abs(shift_) * double(nb - 1) : 0.0;
        for (std::size_t yy = 0; yy < ny; ++yy)
            for (std::size_t xx = 0; xx < nx; ++xx)
                for (std::size_t r = 0; r < rest; ++r) {
                    const std::size_t b = rest_axis_index(r, bin_axis_);
                    const double off = base + shift_ * double(b);
                    const std::size_t k = std::size_t(std::floor(off + 1e-12));
                    const double f = off - std::floor(off + 1e-12);
                    const std::size_t y0 = dir_y_ ? yy + k : yy;
                    const std::size_t x0 = dir_y_ ? xx : xx + k;
                    const std::size_t small_idx = (yy * nx + xx) * rest + r;
                    const std::size_t big0 = (y0 * big_sp_x + x0) * rest + r;
                    const std::size_t big1 =
                        ((dir_y_ ? y0 + 1 : y0) * big_sp_x + (dir_y_ ? x0 : x0 + 1)) * rest + r;
                    if (!adjoint_mode) {
                        big_ref[big0] += (1.0 - f) * small_in[small_idx];
                        if (f > 0) big_ref[big1] += f * small_in[small_idx];
                    } else {
                        cplx acc = (1.0 - f) * big_ref[big0];
                        if (f > 0) acc += f * big_ref[big1];
                        small_out[small_idx] = acc;
                    }
                }
        (void)big_sp_y;
    }

    // ---- Sigma ----
    void prepare_accumulate() {
        sum_axes_.clear();
        if (params.count("axis")) {
            sum_axes_.push_back(std::size_t(param_double(params, "axis", 0)));
        } else {
            for (std::size_t a = 2; a < in_dims_.size(); ++a) sum_axes_.push_back(a);
        }
        if (sum_axes_.empty() && in_dims_.size() > 2)
            fail("ShapePropagationError", "Sigma has nothing to sum");
        double l = 1.0;
        out_dims_.clear();
        for (std::size_t a = 0; a < in_dims_.size(); ++a) {
            bool summed = std::find(sum_axes_.begin(), sum_axes_.end(), a) != sum_axes_.end();
            if (summed) l *= double(in_dims_[a]);
            else out_dims_.push_back(in_dims_[a]);
        }
        if (out_dims_.empty()) out_dims_.push_back(1);
        lipschitz_ = std::sqrt(l);
    }

    Field accumulate_forward(const Field& x) const {
        Field out(out_dims_);
        std::vector<std::size_t> idx(in_dims_.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            std::size_t rem = i;
            for (std::size_t a = 0; a < in_dims_.size(); ++a) {
                idx[a] = rem / x.stride(a);
                rem %= x.stride(a);
            }
            std::size_t oi = 0;
            for (std::size_t a = 0, oa = 0; a < in_dims_.size(); ++a) {
                if (std::find(sum_axes_.begin(), sum_axes_.end(), a) != sum_axes_.end()) continue;
                oi += idx[a] * out.stride(oa);
                ++oa;
            }
            out[oi] += x[i];
        }
        return out;
    }

    Field accumulate_adjoint(const Field& y) const {
        Field out(in_dims_);
        std::vector<std::size_t> idx(in_dims_.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::size_t rem = i;
            for (std::size_t a = 0; a < in_dims_.size(); ++a) {
                idx[a] = rem / out.stride(a);
                rem %= out.stride(a);
            }
            std::size_t oi = 0;
            for (std::size_t a = 0, oa = 0; a < in_dims_.size(); ++a) {
                if (std::find(sum_axes_.begin(), sum_axes_.end(), a) != sum_axes_.end()) continue;
                oi += idx[a] * y.stride(oa);
                ++oa;
            }
            out[i] = y[oi];
        }
        return out;
    }

    // ---- D ----
    void prepare_detect() {
        const double gain = param_double(params, "gain", 1.0);
        if (linearity() == Linearity::linear) {
            lipschitz_ = std::abs(gain);
        } else {
            const double in_bound = param_double(params, "in_bound", 1.0);
            lipschitz_ = 2.0 * std::abs(gain) * in_bound;
        }
    }

    Field detect_forward(const Field& x) const {
        Field out = x;
        const double gain = param_double(params, "gain", 1.0);
        if (param_flag(params, "intensity")) {
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = cplx{gain * std::norm(x[i]), 0.0};
        } else {
            out *= gain;
        }
        return out;
    }

    // ---- Lambda ----
    void prepare_lambda() {
        // sup |f'| over the declared input range, dense grid
        const double lo = param_double(params, "range_lo", 0.0);
        const double hi = param_double(params, "range_hi", 1.0);
        double sup = 0;
        const int grid = 4096;
        for (int i = 0; i <= grid; ++i) {
            double t = lo + (hi - lo) * double(i) / grid;
            sup = std::max(sup, std::abs(lambda_deriv(cplx{t, 0.0})));
        }
        lipschitz_ = sup;
    }

    cplx lambda_value(cplx u) const {
        switch (family_) {
            case LambdaFamily::exponential: {
                double mu = param_double(params, "mu", 1.0);
                return std::exp(-mu * u);
            }
            case LambdaFamily::logarithmic: {
                double a = param_double(params, "a", 1.0);
                cplx arg = 1.0 + a * u;
                if (std::abs(arg.imag()) < 1e-12 && arg.real() <= 0)
                    fail("DomainError", "log of non-positive value");
                return std::log(arg);
            }
            case LambdaFamily::phase_wrap: {
                double a = param_double(params, "a", 1.0);
                return std::exp(cplx{0.0, 1.0} * a * u);
            }
            case LambdaFamily::polynomial: {
                double c1 = param_double(params, "c1", 1.0);
                double c2 = param_double(params, "c2", 0.0);
                return c1 * u + c2 * u * u;
            }
            case LambdaFamily::saturation: {
                double ts = param_double(params, "t_sat", 1.0);
                return ts * std::tanh(u / ts);
            }
        }
        return u;
    }

    cplx lambda_deriv(cplx u) const {
        switch (family_) {
            case LambdaFamily::exponential: {
                double mu = param_double(params, "mu", 1.0);
                return -mu * std::exp(-mu * u);
            }
            case LambdaFamily::logarithmic: {
                double a = param_double(params, "a", 1.0);
                return a / (1.0 + a * u);
            }
            case LambdaFamily::phase_wrap: {
                double a = param_double(params, "a", 1.0);
                return cplx{0.0, 1.0} * a * std::exp(cplx{0.0, 1.0} * a * u);
            }
            case LambdaFamily::polynomial: {
                double c1 = param_double(params, "c1", 1.0);
                double c2 = param_double(params, "c2", 0.0);
                return c1 + 2.0 * c2 * u;
            }
            case LambdaFamily::saturation: {
                double ts = param_double(params, "t_sat", 1.0);
                cplx c = std::cosh(u / ts);
                return 1.0 / (c * c);
            }
        }
        return 1.0;
    }

    Field lambda_forward(const Field& x) const {
        Field out = Field(out_dims_);
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = lambda_value(x[i]);
        return out;
    }

  public:
    LambdaFamily lambda_family() const { return family_; }

    // Count of free (tunable) parameters; structural keys are excluded. Used
    // by compiler check C4.
    std::size_t free_param_count() const {
        static const std::vector<std::string> structural = {
            "family",  "range_lo", "range_hi", "axis",     "depth_axis", "psf",   "mask",
            "pattern", "seed",     "dir",      "in_bound", "intensity",  "kspace", "coil"};
        std::size_t n = 0;
        for (const auto& [k, v] : params) {
            if (std::find(structural.begin(), structural.end(), k) != structural.end()) continue;
            if (k.rfind("bound_", 0) == 0) continue;
            ++n;
        }
        return n;
    }

  private:
    bool prepared_ = false;
    std::uint64_t seed_ = 0;
    std::vector<std::size_t> in_dims_, out_dims_;
    double lipschitz_ = 1.0;

    Field mask_;                 // M / S
    double keep_fraction_ = 1.0; // S
    std::size_t n_angles_ = 0;   // Pi
    std::vector<Field> psfs_;    // C / R (centered, unit sum)
    std::vector<Field> spectra_; // C / P / R transfer functions
    std::size_t depth_axis_ = 2;
    double shift_ = 1.0;        // W
    std::size_t bin_axis_ = 2;  // W
    bool dir_y_ = false;        // W
    std::vector<std::size_t> sum_axes_; // Sigma
    LambdaFamily family_ = LambdaFamily::polynomial;
};

inline Primitive make_primitive(Kind kind, std::map<std::string, std::string> params, int tier,
                                Variant variant = Variant::none) {
    return Primitive(kind, std::move(params), tier, variant);
}

inline double lipschitz_bound(const Primitive& p) {
    if (!p.prepared()) fail("ShapeMismatch", "primitive not prepared");
    return p.lipschitz();
}

// ---------------------------------------------------------------------------
// noise

struct NoiseModel {
    NoiseSpec spec;
    std::uint64_t seed = 0;
};

// Measurement noise applied after the clean forward pass. Poisson counts use
// photon scale i0; with mixed noise the Gaussian sigma is quoted in counts and
// divided by i0 (the supplementary-data convention).
inline Field detect_noise(const Field& y_clean, const NoiseModel& nm) {
    Field out = y_clean;
    Rng rng(nm.seed ^ 0x6e6f697365ULL);
    const auto& ns = nm.spec;

    if (ns.has_poisson()) {
        if (!y_clean.is_nonneg(1e-9))
            fail("NegativeIntensity", "poisson noise requires a nonnegative clean measurement");
        if (std::isfinite(ns.i0)) {
            for (std::size_t i = 0; i < out.size(); ++i) {
                double mean = std::max(out[i].real(), 0.0) * ns.i0;
                out[i] = cplx{double(rng.poisson(mean)) / ns.i0, 0.0};
            }
        }
    }

    double sigma = 0.0;
    if (ns.kind == NoiseKind::gaussian) {
        sigma = ns.sigma;
        if (sigma <= 0 && ns.snr_db) {
            double rms = y_clean.norm2() / std::sqrt(double(y_clean.size()));
            sigma = rms / std::pow(10.0, *ns.snr_db / 20.0);
        }
    } else if (ns.kind == NoiseKind::poisson_gaussian) {
        sigma = ns.sigma / ns.i0;
    }
    if (sigma > 0)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += sigma * rng.normal();
    return out;
}

} // namespace fpbc
