#pragma once
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "adl/accounts.hpp"
#include "adl/market_model.hpp"
#include "adl/math.hpp"
#include "adl/multi_asset.hpp"

namespace adl {

// ---------------------------------------------------------------------------
// The fill function psi and its derivative
// ---------------------------------------------------------------------------

/**
 * psi(z) = E[(eps z - 1)₊] for a standard normal eps: the expected shortfall
 * per unit equity of a position with factor leverage z. Even, convex,
 * psi(0) = 0. Closed form for z > 0: z phi(1/z) - (1 - Phi(1/z)).
 */
inline double psi(double z) {
    const double az = std::fabs(z);
    if (az == 0.0) return 0.0;
    const double inv = 1.0 / az;
    return az * math::norm_pdf(inv) - math::norm_sf(inv);
}

/**
 * psi'(z) = E[eps 1{eps z > 1}]: phi(1/z) for z > 0, -phi(1/z) for z < 0,
 * and 0 at z = 0. Strictly increasing with range (-phi(0), phi(0)).
 */
inline double psi_prime(double z) {
    if (z == 0.0) return 0.0;
    const double p = math::norm_pdf(1.0 / std::fabs(z));
    return z > 0.0 ? p : -p;
}

/** psi for a general factor law, by adaptive quadrature against its density. */
inline double psi(const EpsilonLaw& law, double z) {
    if (law.standard_normal) return psi(z);
    if (z == 0.0) return 0.0;
    namespace bq = boost::math::quadrature;
    const double inf = std::numeric_limits<double>::infinity();
    auto integrand = [&](double e) { return (e * z - 1.0) * law.pdf(e); };
    if (z > 0.0) return bq::gauss_kronrod<double, 15>::integrate(integrand, 1.0 / z, inf, 12, 1e-12);
    return bq::gauss_kronrod<double, 15>::integrate(integrand, -inf, 1.0 / z, 12, 1e-12);
}

/** psi' for a general factor law: E[eps 1{eps z > 1}] by quadrature. */
inline double psi_prime(const EpsilonLaw& law, double z) {
    if (law.standard_normal) return psi_prime(z);
    if (z == 0.0) return 0.0;
    namespace bq = boost::math::quadrature;
    const double inf = std::numeric_limits<double>::infinity();
    auto integrand = [&](double e) { return e * law.pdf(e); };
    if (z > 0.0) return bq::gauss_kronrod<double, 15>::integrate(integrand, 1.0 / z, inf, 12, 1e-12);
    return bq::gauss_kronrod<double, 15>::integrate(integrand, -inf, 1.0 / z, 12, 1e-12);
}

/**
 * Inverse of the strictly increasing psi' by safeguarded bisection on
 * [-Z, Z], growing Z geometrically until the bracket holds. eta must lie
 * strictly inside psi's slope range.
 */
inline double psi_prime_inverse(const EpsilonLaw& law, double eta) {
    if (eta == 0.0) return 0.0;
    double z = 1.0;
    int guard = 0;
    while ((eta > 0.0 ? psi_prime(law, z) < eta : psi_prime(law, -z) > eta)) {
        z *= 2.0;
        if (++guard > 200)
            throw std::domain_error("psi_prime_inverse: eta outside the attainable slope range");
    }
    const double lo = eta > 0.0 ? 0.0 : -z;
    const double hi = eta > 0.0 ? z : 0.0;
    return math::bisect_nondecreasing([&](double t) { return psi_prime(law, t) - eta; }, lo, hi,
                                      1e-12, 1e-14 * (1.0 + z), 400);
}

inline double psi_prime_inverse(double eta) { return psi_prime_inverse(EpsilonLaw::normal(), eta); }

// ---------------------------------------------------------------------------
// Factor-leverage intervals and clipped targets
// ---------------------------------------------------------------------------

/** Attainable factor-leverage range of one account over its reduction box. */
struct FactorInterval {
    double lo = 0.0;
    double hi = 0.0;
};

/**
 * Image of the account's directional box under the affine map
 * x ↦ vᵀ(q - x)/E, taken cornerwise per sign of v.
 */
inline FactorInterval factor_interval(const CrossMarginAccount& a, const std::vector<double>& Q,
                                      const std::vector<double>& v,
                                      const std::vector<double>& p_tau) {
    if (v.size() != a.dim() || Q.size() != a.dim())
        throw std::domain_error("factor_interval: dimension mismatch");
    const BoundsBox box = directional_bounds(a, Q);
    const double E = a.equity(p_tau);
    double base = 0.0;
    for (std::size_t k = 0; k < a.dim(); ++k) base += v[k] * a.q[k];
    double hi_sub = 0.0, lo_sub = 0.0;  // v'x extremes over the box
    for (std::size_t k = 0; k < a.dim(); ++k) {
        if (v[k] >= 0.0) {
            hi_sub += v[k] * box.u[k];
            lo_sub += v[k] * box.l[k];
        } else {
            hi_sub += v[k] * box.l[k];
            lo_sub += v[k] * box.u[k];
        }
    }
    return {(base - hi_sub) / E, (base - lo_sub) / E};
}

/**
 * The clipped water-filling target: the unique minimizer of psi(z) - eta z
 * over [lo, hi] — lo when the slope there is already too steep, hi when not
 * steep enough, and the interior stationary point (psi')⁻¹(eta) otherwise.
 */
inline double clipped_target(const FactorInterval& iv, double eta,
                             const EpsilonLaw& law = EpsilonLaw::normal()) {
    if (!(iv.lo <= iv.hi)) throw std::domain_error("clipped_target: inverted interval");
    if (eta <= psi_prime(law, iv.lo)) return iv.lo;
    if (eta >= psi_prime(law, iv.hi)) return iv.hi;
    return std::min(std::max(psi_prime_inverse(law, eta), iv.lo), iv.hi);
}

// ---------------------------------------------------------------------------
// Budget equation and implementability
// ---------------------------------------------------------------------------

/** Output of the factor-leverage solve: the multiplier, targets, and (when a
 * single-asset construction applies) the implementing allocation. */
struct FactorTargets {
    double eta_star = 0.0;
    std::vector<double> targets;
    std::vector<FactorInterval> intervals;
    bool implementable = false;
    std::vector<std::vector<double>> x_star;  // filled when implementable
};

/**
 * Solves the budget equation Σ E_i ℓ_i*(η) = vᵀ(Σ q_i − Q) for η by monotone
 * bisection. The left side is continuous and nondecreasing in η with range
 * [Σ E_i lo_i, Σ E_i hi_i]; a right side outside that range means the stated
 * problem violates aggregate feasibility.
 */
inline FactorTargets solve_eta(const std::vector<CrossMarginAccount>& accounts,
                               const std::vector<double>& p_tau, const std::vector<double>& v,
                               const std::vector<double>& Q,
                               const EpsilonLaw& law = EpsilonLaw::normal()) {
    if (accounts.empty()) throw std::domain_error("solve_eta: no accounts");
    const std::size_t d = p_tau.size();
    if (v.size() != d || Q.size() != d) throw std::domain_error("solve_eta: dimension mismatch");

    const std::size_t n = accounts.size();
    FactorTargets ft;
    ft.intervals.reserve(n);
    std::vector<double> E(n);
    double rhs = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        double sum_q = 0.0;
        for (const auto& a : accounts) sum_q += a.q[k];
        rhs += v[k] * (sum_q - Q[k]);
    }
    double h_lo = 0.0, h_hi = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        E[i] = accounts[i].equity(p_tau);
        require_solvent(E[i], accounts[i].m, accounts[i].id);
        ft.intervals.push_back(factor_interval(accounts[i], Q, v, p_tau));
        h_lo += E[i] * ft.intervals[i].lo;
        h_hi += E[i] * ft.intervals[i].hi;
    }
    const double slack = 1e-9 * (1.0 + std::max(std::fabs(h_lo), std::fabs(h_hi)));
    if (rhs < h_lo - slack || rhs > h_hi + slack)
        throw std::invalid_argument(
            "solve_eta: required equity-weighted exposure is not attainable (infeasible inputs)");
    const double target = std::min(std::max(rhs, h_lo), h_hi);

    auto H = [&](double eta) {
        double h = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            h += E[i] * clipped_target(ft.intervals[i], eta, law);
        return h;
    };
    double eta_lo = 0.0, eta_hi = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        eta_lo = std::min(eta_lo, psi_prime(law, ft.intervals[i].lo));
        eta_hi = std::max(eta_hi, psi_prime(law, ft.intervals[i].hi));
    }
    eta_lo -= 1.0;  // beyond these, every target is clipped at its endpoint
    eta_hi += 1.0;
    const double h_tol = 1e-10 * (1.0 + std::fabs(target));
    double eta = 0.5 * (eta_lo + eta_hi);
    for (int it = 0; it < 400; ++it) {
        eta = 0.5 * (eta_lo + eta_hi);
        const double h = H(eta);
        if (std::fabs(h - target) <= h_tol) break;
        if (h < target)
            eta_lo = eta;
        else
            eta_hi = eta;
    }
    ft.eta_star = eta;
    ft.targets.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        ft.targets[i] = clipped_target(ft.intervals[i], eta, law);
    return ft;
}

/**
 * Inverts the factor-leverage map when only asset k0 is being deleveraged:
 * x_i^{k0} = q_i^{k0} - (E_i ℓ_i - Σ_{k≠k0} v^k q_i^k)/v^{k0}, zero elsewhere.
 * Hitting every target forces the clearing constraint automatically because
 * the targets satisfy the budget identity.
 */
inline std::vector<std::vector<double>> implement_single_asset(
    const std::vector<CrossMarginAccount>& accounts, const std::vector<double>& p_tau,
    const std::vector<double>& v, const std::vector<double>& Q, std::size_t k0,
    const std::vector<double>& targets) {
    const std::size_t d = p_tau.size(), n = accounts.size();
    if (k0 >= d) throw std::domain_error("implement_single_asset: asset index out of range");
    if (v[k0] == 0.0)
        throw std::domain_error("implement_single_asset: factor loading on the cleared asset is zero");
    for (std::size_t k = 0; k < d; ++k)
        if (k != k0 && Q[k] != 0.0)
            throw std::domain_error("implement_single_asset: only one asset may be cleared");
    if (targets.size() != n) throw std::domain_error("implement_single_asset: target count mismatch");

    std::vector<std::vector<double>> x(n, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        const auto& a = accounts[i];
        const double E = a.equity(p_tau);
        const FactorInterval iv = factor_interval(a, Q, v, p_tau);
        const double margin = 1e-9 * (1.0 + std::fabs(iv.hi - iv.lo));
        if (targets[i] < iv.lo - margin || targets[i] > iv.hi + margin)
            throw std::domain_error("implement_single_asset: target for account " + a.id +
                                    " lies outside its attainable interval");
        double off = 0.0;
        for (std::size_t k = 0; k < d; ++k)
            if (k != k0) off += v[k] * a.q[k];
        const BoundsBox box = directional_bounds(a, Q);
        const double xi = a.q[k0] - (E * targets[i] - off) / v[k0];
        x[i][k0] = std::min(std::max(xi, box.l[k0]), box.u[k0]);
    }
    return x;
}

/**
 * Full factor-leverage solve: budget equation for the targets, then the
 * single-asset construction whenever exactly one asset with nonzero loading
 * is being cleared. Multi-asset targets are returned unimplemented — whether
 * an allocation attains them is a separate (post hoc) question.
 */
inline FactorTargets solve_factor_targets(const std::vector<CrossMarginAccount>& accounts,
                                          const std::vector<double>& p_tau,
                                          const std::vector<double>& v,
                                          const std::vector<double>& Q,
                                          const EpsilonLaw& law = EpsilonLaw::normal()) {
    FactorTargets ft = solve_eta(accounts, p_tau, v, Q, law);
    std::vector<std::size_t> cleared;
    for (std::size_t k = 0; k < Q.size(); ++k)
        if (Q[k] != 0.0) cleared.push_back(k);
    if (cleared.size() == 1 && v[cleared[0]] != 0.0) {
        ft.x_star = implement_single_asset(accounts, p_tau, v, Q, cleared[0], ft.targets);
        ft.implementable = true;
    }
    return ft;
}

// ---------------------------------------------------------------------------
// Interior-coverage graph
// ---------------------------------------------------------------------------

/** Vertices are actively cleared assets with nonzero loading; an account
 * strictly interior in several of them connects those assets pairwise. */
struct CoverageGraph {
    std::vector<std::size_t> vertices;                        // K
    std::vector<std::vector<std::size_t>> interior;           // F_i per account
    std::vector<std::pair<std::size_t, std::size_t>> edges;   // asset pairs
    bool covered = false;    // every vertex interior for some account
    bool connected = false;  // covered and graph connected (singleton counts)
};

inline CoverageGraph interior_coverage_graph(const std::vector<std::vector<double>>& x,
                                             const std::vector<BoundsBox>& bounds,
                                             const std::vector<double>& Q,
                                             const std::vector<double>& v) {
    const std::size_t n = x.size(), d = Q.size();
    if (bounds.size() != n) throw std::domain_error("interior_coverage_graph: size mismatch");
    CoverageGraph g;
    std::vector<bool> in_K(d, false);
    for (std::size_t k = 0; k < d; ++k)
        if (Q[k] != 0.0 && v[k] != 0.0) {
            in_K[k] = true;
            g.vertices.push_back(k);
        }
    g.interior.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
            if (!in_K[k]) continue;
            const double l = bounds[i].l[k], u = bounds[i].u[k];
            const double margin = 1e-9 * (u - l);
            if (u - l > 0.0 && x[i][k] > l + margin && x[i][k] < u - margin)
                g.interior[i].push_back(k);
        }
        for (std::size_t a = 0; a < g.interior[i].size(); ++a)
            for (std::size_t b = a + 1; b < g.interior[i].size(); ++b)
                g.edges.push_back({g.interior[i][a], g.interior[i][b]});
    }

    std::vector<bool> seen(d, false);
    g.covered = true;
    for (std::size_t k : g.vertices) {
        bool hit = false;
        for (std::size_t i = 0; i < n && !hit; ++i)
            hit = std::find(g.interior[i].begin(), g.interior[i].end(), k) != g.interior[i].end();
        if (!hit) g.covered = false;
    }
    if (g.vertices.empty()) {
        g.connected = true;  // nothing to connect
        return g;
    }
    // BFS from the first vertex over the edge list.
    std::vector<std::size_t> stack{g.vertices[0]};
    seen[g.vertices[0]] = true;
    while (!stack.empty()) {
        const std::size_t k = stack.back();
        stack.pop_back();
        for (const auto& [a, b] : g.edges) {
            if (a == k && !seen[b]) {
                seen[b] = true;
                stack.push_back(b);
            } else if (b == k && !seen[a]) {
                seen[a] = true;
                stack.push_back(a);
            }
        }
    }
    bool all = true;
    for (std::size_t k : g.vertices) all = all && seen[k];
    g.connected = g.covered && all;
    return g;
}

inline bool interior_coverage_connected(const std::vector<std::vector<double>>& x,
                                        const std::vector<BoundsBox>& bounds,
                                        const std::vector<double>& Q,
                                        const std::vector<double>& v) {
    return interior_coverage_graph(x, bounds, Q, v).connected;
}

/**
 * Ratio test certifying that the optimal shadow prices point along the factor
 * loading: λ^k / v^k equal across actively cleared assets within tol.
 */
inline bool shadow_price_parallel(const std::vector<double>& lambda, const std::vector<double>& v,
                                  const std::vector<double>& Q, double tol = 1e-6) {
    double ref = 0.0;
    bool have_ref = false;
    for (std::size_t k = 0; k < Q.size(); ++k) {
        if (Q[k] == 0.0 || v[k] == 0.0) continue;
        const double r = lambda[k] / v[k];
        if (!have_ref) {
            ref = r;
            have_ref = true;
        } else if (std::fabs(r - ref) > tol * std::max(1.0, std::fabs(ref))) {
            return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Dual ascent under the one-factor law
// ---------------------------------------------------------------------------

/**
 * Best responses when prices are p_tau + eps v: the per-account expected
 * shortfall is E_i psi(factor leverage), smooth and convex, so coordinate
 * minimizers come from bisecting the derivative -v^k psi'(ℓ(x)) + λ^k.
 */
class FactorSubproblems {
  public:
    FactorSubproblems(const ClearingProblem& pb, const SingleFactorModel& model)
        : pb_(pb), model_(model), boxes_(problem_boxes(pb)) {
        if (model.v.size() != pb.d())
            throw std::domain_error("factor model dimension does not match problem");
        for (std::size_t k = 0; k < pb.d(); ++k)
            if (std::fabs(model.p_tau[k] - pb.p_tau[k]) > 1e-12 * std::max(1.0, pb.p_tau[k]))
                throw std::domain_error("factor model and problem disagree on p_tau");
        free_.resize(pb.n());
        E_.resize(pb.n());
        for (std::size_t i = 0; i < pb.n(); ++i) {
            E_[i] = pb.accounts[i].equity(pb.p_tau);
            for (std::size_t k = 0; k < pb.d(); ++k)
                if (boxes_[i].l[k] < boxes_[i].u[k]) free_[i].push_back(k);
        }
    }

    const BoundsBox& box(std::size_t i) const { return boxes_[i]; }
    const std::vector<std::size_t>& free_coords(std::size_t i) const { return free_[i]; }

    bool single_free_everywhere() const {
        for (const auto& f : free_)
            if (f.size() > 1) return false;
        return true;
    }

    std::vector<double> solve(std::size_t i, const std::vector<double>& lambda,
                              double* phi = nullptr) const {
        std::vector<double> x(pb_.d(), 0.0);
        if (free_[i].size() == 1) {
            const std::size_t k = free_[i][0];
            double a, b;
            coordinate_min(i, k, x, lambda[k], a, b);
            x[k] = a;
        } else if (free_[i].size() > 1) {
            for (int sweep = 0; sweep < 200; ++sweep) {
                double moved = 0.0;
                for (std::size_t k : free_[i]) {
                    double a, b;
                    coordinate_min(i, k, x, lambda[k], a, b);
                    moved = std::max(moved, std::fabs(x[k] - a));
                    x[k] = a;
                }
                if (moved <= 1e-13 * (1.0 + box_span(i))) break;
            }
        }
        if (phi) {
            double f = loss(i, x);
            for (std::size_t k : free_[i]) f += lambda[k] * x[k];
            *phi = f;
        }
        return x;
    }

    void argmin_interval(std::size_t i, const std::vector<double>& lambda, double& a,
                         double& b) const {
        if (free_[i].size() != 1)
            throw std::logic_error("argmin_interval: account is not single-coordinate");
        const std::size_t k = free_[i][0];
        std::vector<double> x(pb_.d(), 0.0);
        coordinate_min(i, k, x, lambda[k], a, b);
    }

    double loss(std::size_t i, const std::vector<double>& x) const {
        return E_[i] * psi(model_.epsilon_law, factor_leverage(pb_.accounts[i], x, model_.v, pb_.p_tau));
    }

  private:
    double box_span(std::size_t i) const {
        double s = 0.0;
        for (std::size_t k = 0; k < pb_.d(); ++k) s += boxes_[i].u[k] - boxes_[i].l[k];
        return s;
    }

    /**
     * Exact minimizer interval of f(t) = E psi(ℓ(x with x^k = t)) + lam t on
     * the k-th box edge, other coordinates fixed. With v^k = 0 the loss is
     * flat in t and the linear term decides; otherwise the derivative is
     * continuous and nondecreasing, and plateaus (underflowed psi') make the
     * minimizer an interval.
     */
    void coordinate_min(std::size_t i, std::size_t k, const std::vector<double>& x, double lam,
                        double& a, double& b) const {
        const double lo = boxes_[i].l[k], hi = boxes_[i].u[k];
        const double vk = model_.v[k];
        if (vk == 0.0) {
            if (lam > 0.0)
                a = b = lo;
            else if (lam < 0.0)
                a = b = hi;
            else {
                a = lo;
                b = hi;
            }
            return;
        }
        const auto& acct = pb_.accounts[i];
        auto ell = [&](double t) {
            double e = 0.0;
            for (std::size_t j = 0; j < pb_.d(); ++j)
                e += model_.v[j] * (acct.q[j] - ((j == k) ? t : x[j]));
            return e / E_[i];
        };
        auto deriv = [&](double t) { return -vk * psi_prime(model_.epsilon_law, ell(t)) + lam; };
        const double d_lo = deriv(lo), d_hi = deriv(hi);
        if (d_lo >= 0.0 && d_hi >= 0.0) {
            a = lo;
            // plateau: derivative may be exactly zero on a leading stretch
            b = (d_lo == 0.0) ? plateau_end(deriv, lo, hi) : lo;
            return;
        }
        if (d_hi <= 0.0) {
            b = hi;
            a = (d_hi == 0.0) ? plateau_start(deriv, lo, hi) : hi;
            return;
        }
        // sign change: bracket the root interval from both sides
        a = math::bisect_nondecreasing(deriv, lo, hi, 0.0, 1e-14 * (1.0 + hi - lo), 200);
        b = a;
        // widen over an exact-zero plateau if one exists
        if (deriv(a) == 0.0) {
            a = plateau_start(deriv, lo, a);
            b = plateau_end(deriv, b, hi);
        }
    }

    template <class F>
    static double plateau_end(const F& deriv, double from, double hi) {
        double lo = from, up = hi;
        if (deriv(hi) <= 0.0) return hi;
        for (int it = 0; it < 100; ++it) {
            const double mid = 0.5 * (lo + up);
            if (deriv(mid) > 0.0)
                up = mid;
            else
                lo = mid;
        }
        return lo;
    }

    template <class F>
    static double plateau_start(const F& deriv, double lo, double from) {
        double dn = lo, up = from;
        if (deriv(lo) >= 0.0) return lo;
        for (int it = 0; it < 100; ++it) {
            const double mid = 0.5 * (dn + up);
            if (deriv(mid) < 0.0)
                dn = mid;
            else
                up = mid;
        }
        return up;
    }

    const ClearingProblem& pb_;
    const SingleFactorModel& model_;
    std::vector<BoundsBox> boxes_;
    std::vector<std::vector<std::size_t>> free_;
    std::vector<double> E_;
};

/** Expected-loss clearing solve under the one-factor price law. */
inline MultiSolveReport dual_ascent(const ClearingProblem& pb, const SingleFactorModel& model,
                                    const DualParams& prm = DualParams{}) {
    FactorSubproblems sub(pb, model);
    return detail::run_dual_ascent(pb, sub, prm);
}

}  // namespace adl
