#pragma once
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adl/accounts.hpp"
#include "adl/market_model.hpp"
#include "adl/math.hpp"
#include "adl/parallel.hpp"
#include "adl/single_asset.hpp"

namespace adl {

/**
 * Cross-margin clearing instance: reduce the aggregate book by Q (signed,
 * per asset) at prices p_tau, splitting the burden across accounts so the
 * expected total shortfall is minimized.
 */
struct ClearingProblem {
    std::vector<CrossMarginAccount> accounts;
    std::vector<double> Q;
    std::vector<double> p_tau;

    std::size_t n() const { return accounts.size(); }
    std::size_t d() const { return Q.size(); }
};

inline void validate_clearing_problem(const ClearingProblem& pb) {
    if (pb.accounts.empty()) throw std::domain_error("clearing problem: no accounts");
    const std::size_t d = pb.d();
    if (pb.p_tau.size() != d) throw std::domain_error("clearing problem: Q/p_tau dimension mismatch");
    for (double p : pb.p_tau)
        if (!(p > 0.0)) throw std::domain_error("clearing problem: prices must be positive");
    for (const auto& a : pb.accounts) {
        if (a.dim() != d)
            throw std::domain_error("clearing problem: account " + a.id + " has wrong dimension");
        require_solvent(a.equity(pb.p_tau), a.m, a.id);
    }
    // Aggregate feasibility: each target must be coverable by same-side positions.
    for (std::size_t k = 0; k < d; ++k) {
        double lo = 0.0, hi = 0.0;
        for (const auto& a : pb.accounts) {
            lo += std::min(0.0, a.q[k]);
            hi += std::max(0.0, a.q[k]);
        }
        const double slack = 1e-9 * (1.0 + std::max(std::fabs(lo), std::fabs(hi)));
        if (pb.Q[k] < lo - slack || pb.Q[k] > hi + slack)
            throw std::invalid_argument("clearing problem: Q[" + std::to_string(k) +
                                        "] is not coverable by open positions");
    }
}

/** Number of assets actually being deleveraged; the dual iterates only on these. */
inline std::size_t effective_dimension(const ClearingProblem& pb) {
    std::size_t c = 0;
    for (double qk : pb.Q)
        if (qk != 0.0) ++c;
    return c;
}

inline std::vector<BoundsBox> problem_boxes(const ClearingProblem& pb) {
    std::vector<BoundsBox> boxes;
    boxes.reserve(pb.n());
    for (const auto& a : pb.accounts) boxes.push_back(directional_bounds(a, pb.Q));
    return boxes;
}

// ---------------------------------------------------------------------------
// Scenario objectives
// ---------------------------------------------------------------------------

/** Sample-average total shortfall: Σ_s w_s Σ_i (−e_i(x_i, p^{(s)}))₊. */
inline double saa_loss(const std::vector<CrossMarginAccount>& accounts,
                       const std::vector<std::vector<double>>& x,
                       const std::vector<double>& p_tau, const ScenarioSet& scenarios) {
    if (x.size() != accounts.size()) throw std::domain_error("saa_loss: size mismatch");
    if (scenarios.dim() != p_tau.size()) throw std::domain_error("saa_loss: dimension mismatch");
    double total = 0.0;
    std::vector<double> p(scenarios.dim());
    for (std::size_t s = 0; s < scenarios.size(); ++s) {
        for (std::size_t k = 0; k < p.size(); ++k) p[k] = scenarios.price(s, k);
        double l = 0.0;
        for (std::size_t i = 0; i < accounts.size(); ++i)
            l += shortfall(accounts[i], x[i], p, p_tau);
        total += scenarios.prob(s) * l;
    }
    return total;
}

inline double saa_loss(const ClearingProblem& pb, const std::vector<std::vector<double>>& x,
                       const ScenarioSet& scenarios) {
    return saa_loss(pb.accounts, x, pb.p_tau, scenarios);
}

/**
 * Risk functional of the aggregate loss on an explicit scenario table.
 * Expected loss matches saa_loss; CVaR/spectral use the exact discrete CVaR
 * of the aggregate (evaluation only; the solver optimizes expected loss).
 */
inline double scenario_risk_objective(const std::vector<CrossMarginAccount>& accounts,
                                      const std::vector<std::vector<double>>& x,
                                      const std::vector<double>& p_tau,
                                      const ScenarioSet& scenarios, const RiskSpec& spec) {
    if (x.size() != accounts.size())
        throw std::domain_error("scenario_risk_objective: size mismatch");
    const std::size_t S = scenarios.size();
    std::vector<double> loss(S, 0.0), probs(S);
    std::vector<double> p(scenarios.dim());
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t k = 0; k < p.size(); ++k) p[k] = scenarios.price(s, k);
        probs[s] = scenarios.prob(s);
        double l = 0.0;
        for (std::size_t i = 0; i < accounts.size(); ++i)
            l += shortfall(accounts[i], x[i], p, p_tau);
        loss[s] = l;
    }
    switch (spec.kind) {
        case RiskSpec::Kind::Expected: {
            double mean = 0.0;
            for (std::size_t s = 0; s < S; ++s) mean += probs[s] * loss[s];
            return mean;
        }
        case RiskSpec::Kind::Cvar: return discrete_cvar(loss, probs, spec.beta);
        case RiskSpec::Kind::Spectral: {
            double total = 0.0;
            for (const auto& [b, w] : spec.components) total += w * discrete_cvar(loss, probs, b);
            return total;
        }
    }
    throw std::logic_error("scenario_risk_objective: unknown spec kind");
}

// ---------------------------------------------------------------------------
// Exact filling along a common shift (continuous knapsack)
// ---------------------------------------------------------------------------

/**
 * Finds z_i = clamp(y_i + s, l_i, u_i) with Σ z_i = target. The sum is
 * continuous and nondecreasing in s, so s is bisected; the leftover rounding
 * error is spread over the coordinates that are strictly inside their box.
 * Requires Σl <= target <= Σu up to a small slack.
 */
inline std::vector<double> clipped_shift_fill(const std::vector<double>& y,
                                              const std::vector<double>& l,
                                              const std::vector<double>& u, double target) {
    const std::size_t n = y.size();
    if (l.size() != n || u.size() != n) throw std::domain_error("clipped_shift_fill: size mismatch");
    if (n == 0) {
        if (std::fabs(target) > 1e-12) throw std::domain_error("clipped_shift_fill: empty problem");
        return {};
    }
    double sum_l = 0.0, sum_u = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!(l[i] <= u[i])) throw std::domain_error("clipped_shift_fill: inverted bounds");
        sum_l += l[i];
        sum_u += u[i];
    }
    const double slack = 1e-9 * (1.0 + std::max(std::fabs(sum_l), std::fabs(sum_u)));
    if (target < sum_l - slack || target > sum_u + slack)
        throw std::domain_error("clipped_shift_fill: target outside [sum l, sum u]");
    target = std::min(std::max(target, sum_l), sum_u);

    double s_lo = l[0] - y[0], s_hi = u[0] - y[0];
    for (std::size_t i = 1; i < n; ++i) {
        s_lo = std::min(s_lo, l[i] - y[i]);
        s_hi = std::max(s_hi, u[i] - y[i]);
    }
    auto fill = [&](double s) {
        std::vector<double> z(n);
        for (std::size_t i = 0; i < n; ++i) z[i] = std::min(std::max(y[i] + s, l[i]), u[i]);
        return z;
    };
    auto total = [&](double s) {
        double t = 0.0;
        for (std::size_t i = 0; i < n; ++i) t += std::min(std::max(y[i] + s, l[i]), u[i]);
        return t;
    };
    for (int it = 0; it < 200 && s_hi - s_lo > 0.0; ++it) {
        const double mid = 0.5 * (s_lo + s_hi);
        if (total(mid) < target)
            s_lo = mid;
        else
            s_hi = mid;
    }
    std::vector<double> z = fill(s_hi);
    // Spread the residual over interior coordinates without leaving the box.
    for (int pass = 0; pass < 4; ++pass) {
        double resid = target;
        for (double zi : z) resid -= zi;
        if (resid == 0.0) break;
        std::vector<std::size_t> room;
        for (std::size_t i = 0; i < n; ++i) {
            if (resid > 0.0 ? z[i] < u[i] : z[i] > l[i]) room.push_back(i);
        }
        if (room.empty()) break;
        const double step = resid / static_cast<double>(room.size());
        for (std::size_t i : room) z[i] = std::min(std::max(z[i] + step, l[i]), u[i]);
    }
    return z;
}

// ---------------------------------------------------------------------------
// Per-account subproblems on scenario tables
// ---------------------------------------------------------------------------

namespace detail {

/**
 * One-dimensional hinge sum h(x) = Σ_s w_s (base_s + c_s x)₊ on [lo, hi],
 * preprocessed so that for any linear coefficient a the minimizer of
 * h(x) + a x is recovered in O(log S). The derivative of h is a nondecreasing
 * step function that gains w_s |c_s| at each kink −base_s/c_s.
 */
struct Hinge1D {
    double lo = 0.0, hi = 0.0;
    double f_lo = 0.0;             // h(lo)
    double d_lo = 0.0;             // right-derivative of h at lo
    std::vector<double> kink;      // ascending, strictly inside (lo, hi)
    std::vector<double> cum;       // cumulative derivative gain after kink j
    std::vector<double> val;       // h(kink[j])

    static Hinge1D build(const std::vector<double>& w, const std::vector<double>& base,
                         const std::vector<double>& c, double lo, double hi) {
        Hinge1D h;
        h.lo = lo;
        h.hi = hi;
        std::vector<std::pair<double, double>> kj;  // (kink position, jump)
        for (std::size_t s = 0; s < w.size(); ++s) {
            if (w[s] <= 0.0) continue;
            const double at_lo = base[s] + c[s] * lo;
            const bool active = at_lo > 0.0 || (at_lo == 0.0 && c[s] > 0.0);
            if (at_lo > 0.0) h.f_lo += w[s] * at_lo;
            if (active) h.d_lo += w[s] * c[s];
            if (c[s] != 0.0) {
                const double xk = -base[s] / c[s];
                if (xk > lo && xk < hi) kj.push_back({xk, w[s] * std::fabs(c[s])});
            }
        }
        std::sort(kj.begin(), kj.end());
        h.kink.reserve(kj.size());
        h.cum.reserve(kj.size());
        h.val.reserve(kj.size());
        double running = 0.0, prev_x = lo, prev_v = h.f_lo;
        for (const auto& [xk, jump] : kj) {
            const double v = prev_v + (h.d_lo + running) * (xk - prev_x);
            h.kink.push_back(xk);
            running += jump;
            h.cum.push_back(running);
            h.val.push_back(v);
            prev_x = xk;
            prev_v = v;
        }
        return h;
    }

    double value(double x) const {
        x = std::min(std::max(x, lo), hi);
        const auto it = std::upper_bound(kink.begin(), kink.end(), x);
        if (it == kink.begin()) return f_lo + d_lo * (x - lo);
        const std::size_t j = static_cast<std::size_t>(it - kink.begin()) - 1;
        return val[j] + (d_lo + cum[j]) * (x - kink[j]);
    }

    /** Smallest minimizer of h(x) + a x (ties resolved toward lo). */
    double lowest_min(double a) const {
        if (d_lo + a >= 0.0) return lo;
        // first kink after which derivative d_lo + cum[j] + a >= 0
        const auto it = std::lower_bound(cum.begin(), cum.end(), -(d_lo + a));
        if (it == cum.end()) return hi;
        return kink[static_cast<std::size_t>(it - cum.begin())];
    }

    /** Largest minimizer of h(x) + a x. */
    double highest_min(double a) const {
        if (d_lo + a > 0.0) return lo;
        // first kink after which derivative becomes strictly positive
        const auto it = std::upper_bound(cum.begin(), cum.end(), -(d_lo + a));
        if (it == cum.end()) return hi;
        return kink[static_cast<std::size_t>(it - cum.begin())];
    }
};

}  // namespace detail

/**
 * All per-account best-response machinery for one scenario table. Accounts
 * whose box is free in exactly one coordinate get an exact O(log S) solver;
 * genuinely multi-coordinate boxes fall back to projected subgradient with a
 * coordinate-exact polish. Minimizer ties resolve toward the lower bound,
 * then lexicographically by coordinate.
 */
class ScenarioSubproblems {
  public:
    ScenarioSubproblems(const ClearingProblem& pb, const ScenarioSet& scenarios)
        : pb_(pb), scen_(scenarios), boxes_(problem_boxes(pb)) {
        if (scenarios.dim() != pb.d())
            throw std::domain_error("scenario set dimension does not match problem");
        const std::size_t n = pb.n();
        free_.resize(n);
        hinge_.resize(n);
        weights_.resize(scen_.size());
        for (std::size_t s = 0; s < scen_.size(); ++s) weights_[s] = scen_.prob(s);
        parallel_for(n, [&](std::size_t i) { prepare(i); });
    }

    const BoundsBox& box(std::size_t i) const { return boxes_[i]; }
    const std::vector<std::size_t>& free_coords(std::size_t i) const { return free_[i]; }

    bool single_free_everywhere() const {
        for (const auto& f : free_)
            if (f.size() > 1) return false;
        return true;
    }

    /** Best response of account i to shadow prices lambda; phi gets min f + λᵀx. */
    std::vector<double> solve(std::size_t i, const std::vector<double>& lambda,
                              double* phi = nullptr) const {
        std::vector<double> x(pb_.d(), 0.0);
        if (free_[i].empty()) {
            if (phi) *phi = loss(i, x);  // λᵀx = 0 at x = 0
            return x;
        }
        if (free_[i].size() == 1) {
            const std::size_t k = free_[i][0];
            const double a = lambda[k];
            x[k] = hinge_[i].lowest_min(a);
            if (phi) *phi = hinge_[i].value(x[k]) + a * x[k];
            return x;
        }
        x = solve_multi(i, lambda);
        if (phi) {
            double f = loss(i, x);
            for (std::size_t k : free_[i]) f += lambda[k] * x[k];
            *phi = f;
        }
        return x;
    }

    /**
     * Minimizer interval on the unique free coordinate (only valid for
     * single-free-coordinate accounts): every point in [a, b] attains the
     * same best-response value.
     */
    void argmin_interval(std::size_t i, const std::vector<double>& lambda, double& a,
                         double& b) const {
        if (free_[i].size() != 1)
            throw std::logic_error("argmin_interval: account is not single-coordinate");
        const double lam = lambda[free_[i][0]];
        a = hinge_[i].lowest_min(lam);
        b = hinge_[i].highest_min(lam);
    }

    /** Expected shortfall of account i at reduction x (no λ term). */
    double loss(std::size_t i, const std::vector<double>& x) const {
        const auto& a = pb_.accounts[i];
        double total = 0.0;
        std::vector<double> p(pb_.d());
        for (std::size_t s = 0; s < scen_.size(); ++s) {
            for (std::size_t k = 0; k < p.size(); ++k) p[k] = scen_.price(s, k);
            total += weights_[s] * shortfall(a, x, p, pb_.p_tau);
        }
        return total;
    }

  private:
    void prepare(std::size_t i) {
        const BoundsBox& b = boxes_[i];
        for (std::size_t k = 0; k < pb_.d(); ++k)
            if (b.l[k] < b.u[k]) free_[i].push_back(k);
        if (free_[i].size() != 1) return;
        const std::size_t k = free_[i][0];
        const auto& a = pb_.accounts[i];
        // -e_i as an affine function of x^k with the other coordinates frozen
        // at zero: base_s + c_s x^k, where c_s = p_tau^k - p_s^k.
        const std::size_t S = scen_.size();
        std::vector<double> base(S), c(S);
        std::vector<double> p(pb_.d());
        const double E = a.equity(pb_.p_tau);
        for (std::size_t s = 0; s < S; ++s) {
            for (std::size_t j = 0; j < p.size(); ++j) p[j] = scen_.price(s, j);
            double neg_e = -E;
            for (std::size_t j = 0; j < p.size(); ++j) neg_e -= a.q[j] * (pb_.p_tau[j] - p[j]);
            base[s] = neg_e;
            c[s] = pb_.p_tau[k] - p[k];
        }
        hinge_[i] = detail::Hinge1D::build(weights_, base, c, b.l[k], b.u[k]);
    }

    /** Projected subgradient plus coordinatewise-exact polish for >= 2 free coordinates. */
    std::vector<double> solve_multi(std::size_t i, const std::vector<double>& lambda) const {
        const BoundsBox& b = boxes_[i];
        const auto& fc = free_[i];
        const std::size_t d = pb_.d();
        auto objective = [&](const std::vector<double>& x) {
            double f = loss(i, x);
            for (std::size_t k : fc) f += lambda[k] * x[k];
            return f;
        };
        std::vector<double> x(d, 0.0), best;
        for (std::size_t k : fc) x[k] = b.l[k];
        best = x;
        double best_val = objective(x);

        double diam2 = 0.0, gb = 0.0;
        for (std::size_t k : fc) {
            diam2 += (b.u[k] - b.l[k]) * (b.u[k] - b.l[k]);
            gb += std::fabs(lambda[k]);
        }
        std::vector<double> p(d);
        for (std::size_t s = 0; s < scen_.size(); ++s) {
            double row = 0.0;
            for (std::size_t k : fc) {
                const double dk = pb_.p_tau[k] - scen_.price(s, k);
                row += dk * dk;
            }
            gb += weights_[s] * std::sqrt(row);
        }
        const double diam = std::sqrt(diam2);
        const std::size_t iters = 400;
        std::vector<double> g(d, 0.0);
        for (std::size_t j = 0; j < iters; ++j) {
            for (std::size_t k : fc) g[k] = lambda[k];
            const auto& a = pb_.accounts[i];
            for (std::size_t s = 0; s < scen_.size(); ++s) {
                for (std::size_t k = 0; k < d; ++k) p[k] = scen_.price(s, k);
                if (equity_at(a, x, p, pb_.p_tau) < 0.0)
                    for (std::size_t k : fc) g[k] += weights_[s] * (pb_.p_tau[k] - p[k]);
            }
            const double step = diam / ((1.0 + gb) * std::sqrt(static_cast<double>(j + 1)));
            for (std::size_t k : fc) x[k] = std::min(std::max(x[k] - step * g[k], b.l[k]), b.u[k]);
            const double v = objective(x);
            if (v < best_val) {
                best_val = v;
                best = x;
            }
        }
        // Coordinate-exact polish: rebuild the 1-D hinge for each free
        // coordinate with the others fixed and jump to its lowest minimizer.
        x = best;
        const auto& a = pb_.accounts[i];
        const double E = a.equity(pb_.p_tau);
        for (int sweep = 0; sweep < 60; ++sweep) {
            const double before = objective(x);
            for (std::size_t k : fc) {
                const std::size_t S = scen_.size();
                std::vector<double> base(S), c(S);
                for (std::size_t s = 0; s < S; ++s) {
                    for (std::size_t j2 = 0; j2 < d; ++j2) p[j2] = scen_.price(s, j2);
                    // -e as an affine function of x^k: the k-th term enters as
                    // -(q^k - x^k)(p_tau^k - p_s^k), so freezing x^k = 0 in the
                    // sum leaves exactly the intercept.
                    double neg_e = -E;
                    for (std::size_t j2 = 0; j2 < d; ++j2) {
                        const double xj = (j2 == k) ? 0.0 : x[j2];
                        neg_e -= (a.q[j2] - xj) * (pb_.p_tau[j2] - p[j2]);
                    }
                    base[s] = neg_e;
                    c[s] = pb_.p_tau[k] - p[k];
                }
                auto h = detail::Hinge1D::build(weights_, base, c, b.l[k], b.u[k]);
                x[k] = h.lowest_min(lambda[k]);
            }
            const double after = objective(x);
            if (before - after <= 1e-13 * (1.0 + std::fabs(before))) break;
        }
        if (objective(x) <= best_val) return x;
        return best;
    }

    const ClearingProblem& pb_;
    const ScenarioSet& scen_;
    std::vector<BoundsBox> boxes_;
    std::vector<std::vector<std::size_t>> free_;
    std::vector<detail::Hinge1D> hinge_;
    std::vector<double> weights_;
};

/**
 * Best-response machinery for a one-asset clearing problem under a continuous
 * price law with closed-form call expectation (geometric Brownian motion or
 * the shifted exponential). The per-account objective
 * (q-x) E[(p_T - p^z(x))₊] + λx is smooth and strictly convex, so the
 * minimizer is the unique root of its derivative.
 */
template <class Model>
class ClosedForm1DSubproblems {
  public:
    ClosedForm1DSubproblems(const ClearingProblem& pb, const Model& model)
        : pb_(pb), model_(model), boxes_(problem_boxes(pb)) {
        if (pb.d() != 1)
            throw std::domain_error("closed-form subproblems require a one-asset problem");
        if (std::fabs(model.p_tau - pb.p_tau[0]) > 1e-12 * std::max(1.0, pb.p_tau[0]))
            throw std::domain_error("model and problem disagree on p_tau");
        free_.resize(pb.n());
        for (std::size_t i = 0; i < pb.n(); ++i)
            if (boxes_[i].l[0] < boxes_[i].u[0]) free_[i].push_back(0);
    }

    const BoundsBox& box(std::size_t i) const { return boxes_[i]; }
    const std::vector<std::size_t>& free_coords(std::size_t i) const { return free_[i]; }
    bool single_free_everywhere() const { return true; }

    std::vector<double> solve(std::size_t i, const std::vector<double>& lambda,
                              double* phi = nullptr) const {
        std::vector<double> x(1, 0.0);
        if (!free_[i].empty()) x[0] = minimize(i, lambda[0]);
        if (phi) *phi = loss(i, x) + lambda[0] * x[0];
        return x;
    }

    void argmin_interval(std::size_t i, const std::vector<double>& lambda, double& a,
                         double& b) const {
        a = b = minimize(i, lambda[0]);
    }

    double loss(std::size_t i, const std::vector<double>& x) const {
        const auto& a = pb_.accounts[i];
        const double rem = a.q[0] - x[0];
        if (rem <= 0.0) return 0.0;
        const double pz = pb_.p_tau[0] + a.equity(pb_.p_tau) / rem;
        return rem * call_expectation(model_, pz);
    }

  private:
    double derivative(std::size_t i, double x, double lam) const {
        const auto& a = pb_.accounts[i];
        const double rem = a.q[0] - x;
        if (rem <= 1e-14 * std::max(1.0, a.q[0])) return lam;  // loss slope vanishes at full close
        const double E = a.equity(pb_.p_tau);
        const double pz = pb_.p_tau[0] + E / rem;
        return -call_expectation(model_, pz) - survival(model_, pz) * E / rem + lam;
    }

    double minimize(std::size_t i, double lam) const {
        const double lo = boxes_[i].l[0], hi = boxes_[i].u[0];
        if (derivative(i, lo, lam) >= 0.0) return lo;
        if (derivative(i, hi, lam) <= 0.0) return hi;
        return math::bisect_nondecreasing([&](double x) { return derivative(i, x, lam); }, lo, hi,
                                          0.0, 1e-15 * (1.0 + hi - lo), 200);
    }

    const ClearingProblem& pb_;
    Model model_;
    std::vector<BoundsBox> boxes_;
    std::vector<std::vector<std::size_t>> free_;
};

/** Public wrapper: best response of one account to shadow prices lambda. */
inline std::vector<double> account_subproblem(const CrossMarginAccount& account,
                                              const BoundsBox& box,
                                              const std::vector<double>& lambda,
                                              const ScenarioSet& scenarios,
                                              const std::vector<double>& p_tau) {
    ClearingProblem pb;
    pb.accounts = {account};
    pb.p_tau = p_tau;
    pb.Q.assign(p_tau.size(), 0.0);
    for (std::size_t k = 0; k < p_tau.size(); ++k) {
        if (box.u[k] > 0.0)
            pb.Q[k] = box.u[k];  // any positive target reproduces the box direction
        else if (box.l[k] < 0.0)
            pb.Q[k] = box.l[k];
    }
    ScenarioSubproblems sub(pb, scenarios);
    return sub.solve(0, lambda);
}

// ---------------------------------------------------------------------------
// Dual ascent
// ---------------------------------------------------------------------------

struct DualParams {
    double tol = 1e-6;          // clearing tolerance, relative to 1 + ||Q||_inf
    std::size_t max_iter = 5000;
    double t0 = 0.0;            // 0 = auto: 1 / (1 + Σ_i ||box_i||_1)
    bool refine = true;         // terminal polish / scalar-dual bisection
};

struct DualTraceRow {
    std::size_t iter = 0;
    double residual_inf = 0.0;
    double g_value = 0.0;
};

struct MultiSolveReport {
    std::vector<std::vector<double>> x;
    std::vector<double> lambda;
    double objective = 0.0;   // expected total shortfall at x
    double dual_value = 0.0;  // best dual objective seen
    double residual_inf = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
    std::vector<DualTraceRow> trace;
};

class ConvergenceError : public std::runtime_error {
  public:
    ConvergenceError(const std::string& msg, std::vector<DualTraceRow> tr, double resid)
        : std::runtime_error(msg), trace(std::move(tr)), best_residual(resid) {}
    std::vector<DualTraceRow> trace;
    double best_residual = 0.0;
};

/** One dual evaluation: value g(λ), per-account best responses, supergradient. */
struct DualEval {
    double g = 0.0;
    std::vector<std::vector<double>> x;
    std::vector<double> residual;  // Σ x_i − Q
};

namespace detail {

template <class Sub>
DualEval evaluate_dual(const ClearingProblem& pb, const Sub& sub,
                       const std::vector<double>& lambda) {
    const std::size_t n = pb.n(), d = pb.d();
    DualEval ev;
    ev.x.assign(n, {});
    std::vector<double> phi(n, 0.0);
    parallel_for(n, [&](std::size_t i) { ev.x[i] = sub.solve(i, lambda, &phi[i]); });
    ev.residual.assign(d, 0.0);
    double g = 0.0;
    for (std::size_t k = 0; k < d; ++k) g -= lambda[k] * pb.Q[k];
    for (std::size_t i = 0; i < n; ++i) {
        g += phi[i];
        for (std::size_t k = 0; k < d; ++k) ev.residual[k] += ev.x[i][k];
    }
    for (std::size_t k = 0; k < d; ++k) ev.residual[k] -= pb.Q[k];
    ev.g = g;
    return ev;
}

}  // namespace detail

inline DualEval dual_value(const ClearingProblem& pb, const std::vector<double>& lambda,
                           const ScenarioSet& scenarios) {
    validate_clearing_problem(pb);
    if (lambda.size() != pb.d()) throw std::domain_error("dual_value: lambda dimension mismatch");
    ScenarioSubproblems sub(pb, scenarios);
    return detail::evaluate_dual(pb, sub, lambda);
}

namespace detail {

/**
 * Shared dual-ascent engine over any best-response backend. Runs plain
 * supergradient ascent with t_k = t0/sqrt(k+1), then recovers a primal point
 * from (a) the last iterate, (b) the step-weighted average projected onto the
 * clearing constraint, and when every account is free in at most one
 * coordinate (c) a terminal polish choosing a point inside the per-account
 * argmin intervals at the best shadow price, preceded for scalar duals by a
 * bisection that localizes λ* exactly via the monotone residual.
 */
template <class Sub>
MultiSolveReport run_dual_ascent(const ClearingProblem& pb, const Sub& sub,
                                 const DualParams& prm) {
    validate_clearing_problem(pb);
    const std::size_t n = pb.n(), d = pb.d();
    std::vector<std::size_t> active_coords;
    for (std::size_t k = 0; k < d; ++k)
        if (pb.Q[k] != 0.0) active_coords.push_back(k);

    double q_inf = 0.0;
    for (double qk : pb.Q) q_inf = std::max(q_inf, std::fabs(qk));
    const double resid_tol = prm.tol * (1.0 + q_inf);

    MultiSolveReport rep;
    rep.lambda.assign(d, 0.0);
    if (active_coords.empty()) {
        rep.x.assign(n, std::vector<double>(d, 0.0));
        double obj = 0.0;
        for (std::size_t i = 0; i < n; ++i) obj += sub.loss(i, rep.x[i]);
        rep.objective = obj;
        rep.dual_value = obj;
        rep.converged = true;
        return rep;
    }

    double box_norm = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k)
            box_norm += std::max(std::fabs(sub.box(i).l[k]), std::fabs(sub.box(i).u[k]));
    const double t0 = prm.t0 > 0.0 ? prm.t0 : 1.0 / (1.0 + box_norm);

    std::vector<double> lambda(d, 0.0), lambda_best(d, 0.0);
    std::vector<std::vector<double>> x_avg(n, std::vector<double>(d, 0.0));
    double weight = 0.0;
    double g_best = -std::numeric_limits<double>::infinity();
    DualEval last;
    bool hit_tol = false;

    for (std::size_t it = 0; it < prm.max_iter; ++it) {
        last = evaluate_dual(pb, sub, lambda);
        double rinf = 0.0;
        for (double r : last.residual) rinf = std::max(rinf, std::fabs(r));
        rep.trace.push_back({it, rinf, last.g});
        if (last.g > g_best) {
            g_best = last.g;
            lambda_best = lambda;
        }
        rep.iterations = it + 1;
        if (rinf <= resid_tol) {
            hit_tol = true;
            break;
        }
        const double t = t0 / std::sqrt(static_cast<double>(it + 1));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < d; ++k) x_avg[i][k] += t * last.x[i][k];
        weight += t;
        for (std::size_t k : active_coords) lambda[k] += t * last.residual[k];
    }
    if (rep.iterations == 0) last = evaluate_dual(pb, sub, lambda);

    // ---- primal recovery -------------------------------------------------
    struct Candidate {
        std::vector<std::vector<double>> x;
        double resid = std::numeric_limits<double>::infinity();
        double obj = std::numeric_limits<double>::infinity();
    };
    auto assess = [&](std::vector<std::vector<double>> x) {
        Candidate c;
        for (std::size_t i = 0; i < n; ++i) x[i] = sub.box(i).clamp(std::move(x[i]));
        double rinf = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            double sum = 0.0;
            for (std::size_t i = 0; i < n; ++i) sum += x[i][k];
            rinf = std::max(rinf, std::fabs(sum - pb.Q[k]));
        }
        c.resid = rinf;
        if (rinf <= resid_tol) {
            double obj = 0.0;
            for (std::size_t i = 0; i < n; ++i) obj += sub.loss(i, x[i]);
            c.obj = obj;
        }
        c.x = std::move(x);
        return c;
    };

    std::vector<Candidate> candidates;
    candidates.push_back(assess(last.x));

    if (weight > 0.0) {
        std::vector<std::vector<double>> xa(n, std::vector<double>(d, 0.0));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < d; ++k) xa[i][k] = x_avg[i][k] / weight;
        // Per-asset projection onto the clearing constraint.
        bool ok = true;
        for (std::size_t k = 0; k < d; ++k) {
            std::vector<double> y(n), l(n), u(n);
            for (std::size_t i = 0; i < n; ++i) {
                y[i] = xa[i][k];
                l[i] = sub.box(i).l[k];
                u[i] = sub.box(i).u[k];
            }
            try {
                const auto z = clipped_shift_fill(y, l, u, pb.Q[k]);
                for (std::size_t i = 0; i < n; ++i) xa[i][k] = z[i];
            } catch (const std::domain_error&) {
                ok = false;
                break;
            }
        }
        if (ok) candidates.push_back(assess(std::move(xa)));
    }

    // Terminal polish: distribute within per-account argmin intervals.
    auto polish_at = [&](const std::vector<double>& lam, bool* feasible) {
        std::vector<std::vector<double>> x(n, std::vector<double>(d, 0.0));
        *feasible = true;
        for (std::size_t k : active_coords) {
            std::vector<std::size_t> members;
            std::vector<double> a, b;
            for (std::size_t i = 0; i < n; ++i) {
                if (sub.free_coords(i).empty()) continue;
                if (sub.free_coords(i)[0] != k) continue;
                double ai, bi;
                sub.argmin_interval(i, lam, ai, bi);
                members.push_back(i);
                a.push_back(ai);
                b.push_back(bi);
            }
            double sa = 0.0, sb = 0.0;
            for (std::size_t j = 0; j < a.size(); ++j) {
                sa += a[j];
                sb += b[j];
            }
            const double pad = 1e-12 * (1.0 + std::fabs(pb.Q[k]));
            if (pb.Q[k] < sa - pad || pb.Q[k] > sb + pad) {
                *feasible = false;
                return x;
            }
            const auto z = clipped_shift_fill(a, a, b, std::min(std::max(pb.Q[k], sa), sb));
            for (std::size_t j = 0; j < members.size(); ++j) x[members[j]][k] = z[j];
        }
        return x;
    };

    std::vector<double> lambda_report = lambda_best;
    if (prm.refine && sub.single_free_everywhere()) {
        for (const auto& lam : {lambda_best, lambda}) {
            bool feasible = false;
            auto x = polish_at(lam, &feasible);
            if (feasible) candidates.push_back(assess(std::move(x)));
        }

        if (active_coords.size() == 1) {
            // Scalar dual: the argmin-interval sums are nonincreasing in λ, so
            // bisect to the multiplier where they cross the clearing target.
            const std::size_t k0 = active_coords[0];
            auto interval_sums = [&](double lam_k, double& sa, double& sb) {
                std::vector<double> lam(d, 0.0);
                lam[k0] = lam_k;
                sa = sb = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (sub.free_coords(i).empty()) continue;
                    double ai, bi;
                    sub.argmin_interval(i, lam, ai, bi);
                    sa += ai;
                    sb += bi;
                }
            };
            const double target = pb.Q[k0];
            double L = 0.0, R = 0.0, sa, sb;
            interval_sums(0.0, sa, sb);
            if (sb < target) {
                // need smaller λ to raise reductions
                double step = 1.0 + std::fabs(pb.p_tau[k0]);
                L = -step;
                interval_sums(L, sa, sb);
                while (sb < target && std::fabs(L) < 1e12 * step) {
                    L *= 2.0;
                    interval_sums(L, sa, sb);
                }
                R = 0.0;
            } else if (sa > target) {
                double step = 1.0 + std::fabs(pb.p_tau[k0]);
                R = step;
                interval_sums(R, sa, sb);
                while (sa > target && R < 1e12 * step) {
                    R *= 2.0;
                    interval_sums(R, sa, sb);
                }
                L = 0.0;
            }
            // Invariant: reductions at L sum above target, at R below. For a
            // piecewise-linear dual the sums step across λ*, so a single λ
            // need never bracket the target; bisect until the λ-interval
            // collapses to adjacent doubles and take the box spanned by the
            // argmins at its two ends — exactly the λ* argmin segment.
            while (L != R) {
                const double mid = 0.5 * (L + R);
                if (mid == L || mid == R) break;
                interval_sums(mid, sa, sb);
                if (sa > target)
                    L = mid;
                else if (sb < target)
                    R = mid;
                else {
                    L = R = mid;
                    break;
                }
            }
            std::vector<double> lam_lo(d, 0.0), lam_hi(d, 0.0);
            lam_lo[k0] = L;
            lam_hi[k0] = R;
            std::vector<std::size_t> members;
            std::vector<double> a, b;
            for (std::size_t i = 0; i < n; ++i) {
                if (sub.free_coords(i).empty()) continue;
                double aL, bL, aR, bR;
                sub.argmin_interval(i, lam_lo, aL, bL);
                if (R != L)
                    sub.argmin_interval(i, lam_hi, aR, bR);
                else {
                    aR = aL;
                    bR = bL;
                }
                members.push_back(i);
                a.push_back(std::min(aR, aL));  // higher λ gives the low end
                b.push_back(std::max(bL, bR));
            }
            double suma = 0.0, sumb = 0.0;
            for (std::size_t j = 0; j < a.size(); ++j) {
                suma += a[j];
                sumb += b[j];
            }
            if (suma <= target && target <= sumb) {
                const auto z = clipped_shift_fill(a, a, b, target);
                std::vector<std::vector<double>> x(n, std::vector<double>(d, 0.0));
                for (std::size_t j = 0; j < members.size(); ++j) x[members[j]][k0] = z[j];
                candidates.push_back(assess(std::move(x)));
                const auto ev = evaluate_dual(pb, sub, lam_lo);
                if (ev.g > g_best) {
                    g_best = ev.g;
                    lambda_report = lam_lo;
                }
            }
        }
    }

    std::size_t best_idx = candidates.size();
    double best_resid = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        best_resid = std::min(best_resid, candidates[c].resid);
        if (candidates[c].resid > resid_tol) continue;
        if (best_idx == candidates.size() || candidates[c].obj < candidates[best_idx].obj)
            best_idx = c;
    }
    if (best_idx == candidates.size())
        throw ConvergenceError("dual ascent did not reach the clearing tolerance (best residual " +
                                   std::to_string(best_resid) + ")",
                               rep.trace, best_resid);

    rep.x = candidates[best_idx].x;
    rep.objective = candidates[best_idx].obj;
    rep.residual_inf = candidates[best_idx].resid;
    rep.dual_value = g_best;
    rep.lambda = lambda_report;
    rep.converged = true;
    (void)hit_tol;
    return rep;
}

}  // namespace detail

/** Expected-loss clearing solve against a scenario table. */
inline MultiSolveReport dual_ascent(const ClearingProblem& pb, const ScenarioSet& scenarios,
                                    const DualParams& prm = DualParams{}) {
    ScenarioSubproblems sub(pb, scenarios);
    return detail::run_dual_ascent(pb, sub, prm);
}

/** Expected-loss clearing solve for d = 1 under a closed-form price law. */
template <class Model>
inline MultiSolveReport dual_ascent_closed_form(const ClearingProblem& pb, const Model& model,
                                                const DualParams& prm = DualParams{}) {
    ClosedForm1DSubproblems<Model> sub(pb, model);
    return detail::run_dual_ascent(pb, sub, prm);
}

}  // namespace adl
