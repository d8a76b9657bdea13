#pragma once
#include <cctype>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "adl/math.hpp"

namespace adl {

/**
 * Solvency gate: equity marked at the deleveraging price must be positive,
 * with a small absolute-plus-relative floor so near-zero-equity accounts are
 * rejected rather than fed to leverage formulas.
 */
inline void require_solvent(double equity, double margin, const std::string& id) {
    if (!(equity > 1e-9 * (1.0 + std::fabs(margin))))
        throw std::invalid_argument("account " + (id.empty() ? std::string("<unnamed>") : id) +
                                    " is insolvent at the deleveraging price (equity " +
                                    std::to_string(equity) + ")");
}

/**
 * One short position in a single asset. Equity is always derived from
 * (q, p_entry, m) and the deleveraging price; it is never stored, so any two
 * states with the same derived equity are indistinguishable downstream.
 */
struct SingleAssetAccount {
    std::string id;
    double q;        // short position in units, >= 0
    double p_entry;  // entry price
    double m;        // posted margin, >= 0

    double equity(double p_tau) const { return q * (p_entry - p_tau) + m; }
};

inline SingleAssetAccount make_single_asset_account(std::string id, double q, double p_entry,
                                                    double m, double p_tau) {
    if (!(q >= 0.0)) throw std::domain_error("account " + id + ": short position must be >= 0");
    if (!(m >= 0.0)) throw std::domain_error("account " + id + ": margin must be >= 0");
    SingleAssetAccount a{std::move(id), q, p_entry, m};
    require_solvent(a.equity(p_tau), m, a.id);
    return a;
}

/**
 * Builds an account from a target equity by synthesizing the entry price
 * p_entry = p_tau + (E - m)/q. Used for fixtures that state equity directly.
 */
inline SingleAssetAccount single_asset_from_equity(std::string id, double q, double E, double m,
                                                   double p_tau) {
    if (!(q >= 0.0)) throw std::domain_error("account " + id + ": short position must be >= 0");
    double p_entry = p_tau;
    if (q > 0.0) {
        p_entry = p_tau + (E - m) / q;
    } else if (std::fabs(E - m) > 1e-9 * (1.0 + std::fabs(m))) {
        throw std::domain_error("account " + id + ": zero position cannot carry equity != margin");
    }
    return make_single_asset_account(std::move(id), q, p_entry, m, p_tau);
}

/**
 * Cross-margin account: signed positions over d assets (positive = short,
 * negative = long) against one shared margin pool.
 */
struct CrossMarginAccount {
    std::string id;
    std::vector<double> q;
    std::vector<double> p_entry;
    double m;

    std::size_t dim() const { return q.size(); }

    double equity(const std::vector<double>& p_tau) const {
        if (p_tau.size() != q.size())
            throw std::domain_error("equity: price dimension mismatch");
        double e = m;
        for (std::size_t k = 0; k < q.size(); ++k) e += q[k] * (p_entry[k] - p_tau[k]);
        return e;
    }
};

inline CrossMarginAccount make_cross_margin_account(std::string id, std::vector<double> q,
                                                    std::vector<double> p_entry, double m,
                                                    const std::vector<double>& p_tau) {
    if (q.size() != p_entry.size())
        throw std::domain_error("account " + id + ": q and p_entry dimensions differ");
    if (!(m >= 0.0)) throw std::domain_error("account " + id + ": margin must be >= 0");
    CrossMarginAccount a{std::move(id), std::move(q), std::move(p_entry), m};
    require_solvent(a.equity(p_tau), m, a.id);
    return a;
}

/**
 * Back-solves synthetic entry prices p_entry = p_tau + alpha * q with
 * alpha = (E - m)/|q|^2, which reproduces the stated equity exactly.
 */
inline CrossMarginAccount cross_margin_from_equity(std::string id, std::vector<double> q, double E,
                                                   double m, const std::vector<double>& p_tau) {
    if (q.size() != p_tau.size())
        throw std::domain_error("account " + id + ": q and p_tau dimensions differ");
    double norm2 = 0.0;
    for (double c : q) norm2 += c * c;
    std::vector<double> p_entry(p_tau);
    if (norm2 > 0.0) {
        const double alpha = (E - m) / norm2;
        for (std::size_t k = 0; k < q.size(); ++k) p_entry[k] = p_tau[k] + alpha * q[k];
    } else if (std::fabs(E - m) > 1e-9 * (1.0 + std::fabs(m))) {
        throw std::domain_error("account " + id + ": zero position cannot carry equity != margin");
    }
    return make_cross_margin_account(std::move(id), std::move(q), std::move(p_entry), m, p_tau);
}

// ---------------------------------------------------------------------------
// Equity, shortfall, leverage
// ---------------------------------------------------------------------------

/** Post-reduction equity at price p: E + (q - x)'(p_tau - p). Equals E whenever p = p_tau. */
inline double equity_at(const CrossMarginAccount& a, const std::vector<double>& x,
                        const std::vector<double>& p, const std::vector<double>& p_tau) {
    const std::size_t d = a.dim();
    if (x.size() != d || p.size() != d || p_tau.size() != d)
        throw std::domain_error("equity_at: dimension mismatch");
    double e = a.equity(p_tau);
    for (std::size_t k = 0; k < d; ++k) e += (a.q[k] - x[k]) * (p_tau[k] - p[k]);
    return e;
}

inline double equity_at(const SingleAssetAccount& a, double x, double p, double p_tau) {
    return a.equity(p_tau) + (a.q - x) * (p_tau - p);
}

inline double shortfall(const CrossMarginAccount& a, const std::vector<double>& x,
                        const std::vector<double>& p, const std::vector<double>& p_tau) {
    return math::pos(-equity_at(a, x, p, p_tau));
}

inline double shortfall(const SingleAssetAccount& a, double x, double p, double p_tau) {
    return math::pos(-equity_at(a, x, p, p_tau));
}

namespace detail {
inline void check_reduction_range(double x, double q) {
    const double slack = 1e-9 * (1.0 + std::fabs(q));
    if (!(x >= -slack && x <= q + slack))
        throw std::domain_error("reduction outside [0, q]");
}
}  // namespace detail

/** Post-reduction leverage p_tau (q - x) / E; affine and strictly decreasing in x. */
inline double leverage(const SingleAssetAccount& a, double x, double p_tau) {
    detail::check_reduction_range(x, a.q);
    return p_tau * (a.q - x) / a.equity(p_tau);
}

/**
 * Zero-equity terminal price p_tau + E/(q - x); +infinity once the position is
 * fully closed (the account can no longer go bankrupt).
 */
inline double bankruptcy_price(const SingleAssetAccount& a, double x, double p_tau) {
    detail::check_reduction_range(x, a.q);
    const double rem = a.q - x;
    if (rem <= 0.0) return std::numeric_limits<double>::infinity();
    return p_tau + a.equity(p_tau) / rem;
}

/** Gross residual notional per unit equity: sum_k |p_tau^k (q^k - x^k)| / E. */
inline double gross_leverage(const CrossMarginAccount& a, const std::vector<double>& x,
                             const std::vector<double>& p_tau) {
    const std::size_t d = a.dim();
    if (x.size() != d || p_tau.size() != d)
        throw std::domain_error("gross_leverage: dimension mismatch");
    double notional = 0.0;
    for (std::size_t k = 0; k < d; ++k) notional += std::fabs(p_tau[k] * (a.q[k] - x[k]));
    return notional / a.equity(p_tau);
}

/** Exposure to the factor loading per unit equity: v'(q - x) / E. Affine in x. */
inline double factor_leverage(const CrossMarginAccount& a, const std::vector<double>& x,
                              const std::vector<double>& v, const std::vector<double>& p_tau) {
    const std::size_t d = a.dim();
    if (x.size() != d || v.size() != d || p_tau.size() != d)
        throw std::domain_error("factor_leverage: dimension mismatch");
    double expo = 0.0;
    for (std::size_t k = 0; k < d; ++k) expo += v[k] * (a.q[k] - x[k]);
    return expo / a.equity(p_tau);
}

// ---------------------------------------------------------------------------
// Directional bounds
// ---------------------------------------------------------------------------

/** Per-account box for the reduction vector. Always satisfies l <= 0 <= u. */
struct BoundsBox {
    std::vector<double> l;
    std::vector<double> u;

    std::size_t dim() const { return l.size(); }

    bool contains(const std::vector<double>& x, double tol = 0.0) const {
        if (x.size() != l.size()) return false;
        for (std::size_t k = 0; k < l.size(); ++k)
            if (x[k] < l[k] - tol || x[k] > u[k] + tol) return false;
        return true;
    }

    std::vector<double> clamp(std::vector<double> x) const {
        for (std::size_t k = 0; k < l.size(); ++k) x[k] = std::min(std::max(x[k], l[k]), u[k]);
        return x;
    }
};

/**
 * Reductions move positions toward zero and only in the direction of the
 * aggregate target: asset k is frozen when Q^k = 0, shorts-only when Q^k > 0,
 * longs-only when Q^k < 0.
 */
inline BoundsBox directional_bounds(const CrossMarginAccount& a, const std::vector<double>& Q) {
    if (Q.size() != a.dim()) throw std::domain_error("directional_bounds: dimension mismatch");
    BoundsBox box;
    box.l.assign(a.dim(), 0.0);
    box.u.assign(a.dim(), 0.0);
    for (std::size_t k = 0; k < a.dim(); ++k) {
        if (Q[k] > 0.0)
            box.u[k] = std::max(0.0, a.q[k]);
        else if (Q[k] < 0.0)
            box.l[k] = std::min(0.0, a.q[k]);
    }
    return box;
}

/**
 * Orders account ids numerically when both parse as integers, otherwise
 * lexicographically. Keeps fixture files with ids "1".."12" in natural order.
 */
inline bool id_less(const std::string& lhs, const std::string& rhs) {
    auto as_int = [](const std::string& s, long long& out) {
        if (s.empty()) return false;
        std::size_t i = (s[0] == '-') ? 1 : 0;
        if (i == s.size()) return false;
        for (std::size_t j = i; j < s.size(); ++j)
            if (!std::isdigit(static_cast<unsigned char>(s[j]))) return false;
        out = std::stoll(s);
        return true;
    };
    long long a = 0, b = 0;
    if (as_int(lhs, a) && as_int(rhs, b)) {
        if (a != b) return a < b;
        return lhs < rhs;
    }
    return lhs < rhs;
}

}  // namespace adl
