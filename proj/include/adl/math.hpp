#pragma once
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>

namespace adl::math {

inline constexpr double kSqrt2 = 1.4142135623730951;
inline constexpr double kSqrt2Pi = 2.5066282746310002;

inline double pos(double u) { return u > 0.0 ? u : 0.0; }

/** Standard normal density. */
inline double norm_pdf(double z) {
    return std::exp(-0.5 * z * z) / kSqrt2Pi;
}

/** Standard normal CDF via the complementary error function (accurate in both tails). */
inline double norm_cdf(double z) {
    return 0.5 * std::erfc(-z / kSqrt2);
}

/** Standard normal survival function P(Z > z). */
inline double norm_sf(double z) {
    return 0.5 * std::erfc(z / kSqrt2);
}

/**
 * Inverse standard normal CDF.
 *
 * Uses Peter Acklam's rational approximation (relative error < 1.15e-9 over
 * (0,1)) followed by one Halley refinement step against erfc-based norm_cdf,
 * which brings the result to full double precision. Throws std::domain_error
 * outside (0,1).
 */
inline double norm_quantile(double p) {
    if (!(p > 0.0 && p < 1.0))
        throw std::domain_error("norm_quantile: probability must lie in (0,1)");

    static constexpr double a[6] = {
        -3.969683028665376e+01,  2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01,  2.506628277459239e+00};
    static constexpr double b[5] = {
        -5.447609879822406e+01,  1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01};
    static constexpr double c[6] = {
        -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
        -2.549732539343734e+00,  4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[4] = {
         7.784695709041462e-03,  3.224671290700398e-01,  2.445134137142996e+00,
         3.754408661907416e+00};

    constexpr double p_low = 0.02425;
    constexpr double p_high = 1.0 - p_low;

    double x;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= p_high) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
             ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }

    // Halley step: e = Phi(x) - p, u = e / phi(x).
    const double e = norm_cdf(x) - p;
    const double u = e * kSqrt2Pi * std::exp(0.5 * x * x);
    x -= u / (1.0 + 0.5 * x * u);
    return x;
}

/**
 * Counter-style uniform draw in (0,1) from a 64-bit word: 53 random bits
 * centered away from both endpoints so quantile transforms stay finite.
 */
inline double uniform_from_bits(std::uint64_t w) {
    return (static_cast<double>(w >> 11) + 0.5) * 0x1.0p-53;
}

/**
 * Root of a nondecreasing function by safeguarded bisection.
 * Assumes f(lo) <= 0 <= f(hi); returns a point where |f| <= f_tol or the
 * bracket has collapsed to x_tol.
 */
template <class F>
double bisect_nondecreasing(F&& f, double lo, double hi, double f_tol, double x_tol,
                            int max_iter = 400) {
    double flo = f(lo), fhi = f(hi);
    if (flo > 0.0 && flo <= f_tol) return lo;
    if (flo > 0.0) throw std::invalid_argument("bisect: f(lo) > 0");
    if (fhi < 0.0 && -fhi <= f_tol) return hi;
    if (fhi < 0.0) throw std::invalid_argument("bisect: f(hi) < 0");
    double mid = 0.5 * (lo + hi);
    for (int it = 0; it < max_iter; ++it) {
        mid = 0.5 * (lo + hi);
        const double fm = f(mid);
        if (std::fabs(fm) <= f_tol || (hi - lo) <= x_tol) return mid;
        if (fm < 0.0)
            lo = mid;
        else
            hi = mid;
    }
    return mid;
}

/** Shortest round-trippable decimal rendering: 17 significant digits. */
inline std::string format_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

}  // namespace adl::math
