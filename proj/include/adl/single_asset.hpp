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

namespace adl {

/**
 * Output of the water-filling solver. `active` lists the accounts that
 * received a positive reduction; every one of them sits exactly at the common
 * post-reduction leverage `t_star`, and everyone else already started below it.
 */
struct WaterfillResult {
    std::vector<double> x;
    double t_star = 0.0;
    std::vector<std::size_t> active;
    double g_residual = 0.0;  // aggregate_demand(t_star) - Q, diagnostics only
};

/**
 * Which tail functional the allocator is scored against. Expected shortfall,
 * a single CVaR level, or a finite mixture of CVaR levels (a spectral risk
 * measure with piecewise-constant spectrum).
 */
struct RiskSpec {
    enum class Kind { Expected, Cvar, Spectral };

    Kind kind = Kind::Expected;
    double beta = 0.0;                                     // Cvar only
    std::vector<std::pair<double, double>> components;     // Spectral: (beta_j, weight_j)

    static RiskSpec expected() { return RiskSpec{}; }

    static RiskSpec cvar(double beta) {
        if (!(beta >= 0.0 && beta < 1.0))
            throw std::domain_error("RiskSpec: cvar level must lie in [0,1)");
        RiskSpec s;
        s.kind = Kind::Cvar;
        s.beta = beta;
        return s;
    }

    static RiskSpec spectral(std::vector<std::pair<double, double>> comps) {
        if (comps.empty()) throw std::domain_error("RiskSpec: spectral mixture is empty");
        double wsum = 0.0;
        for (const auto& [b, w] : comps) {
            if (!(b >= 0.0 && b < 1.0))
                throw std::domain_error("RiskSpec: spectral level must lie in [0,1)");
            if (!(w >= 0.0)) throw std::domain_error("RiskSpec: spectral weight must be >= 0");
            wsum += w;
        }
        if (std::fabs(wsum - 1.0) > 1e-12)
            throw std::domain_error("RiskSpec: spectral weights must sum to one");
        RiskSpec s;
        s.kind = Kind::Spectral;
        s.components = std::move(comps);
        return s;
    }

    std::string describe() const {
        switch (kind) {
            case Kind::Expected: return "expected";
            case Kind::Cvar: return "cvar(" + math::format_double(beta) + ")";
            case Kind::Spectral: {
                std::string s = "spectral(";
                for (std::size_t j = 0; j < components.size(); ++j) {
                    if (j) s += ",";
                    s += math::format_double(components[j].first) + ":" +
                         math::format_double(components[j].second);
                }
                return s + ")";
            }
        }
        return "expected";
    }
};

// ---------------------------------------------------------------------------
// Basic helpers over an account list
// ---------------------------------------------------------------------------

inline void validate_single_asset_inputs(const std::vector<SingleAssetAccount>& accounts,
                                         double p_tau) {
    if (accounts.empty()) throw std::domain_error("need at least one account");
    if (!(p_tau > 0.0)) throw std::domain_error("deleveraging price must be positive");
    for (const auto& a : accounts) {
        if (!(a.q >= 0.0)) throw std::domain_error("account " + a.id + ": q must be >= 0");
        require_solvent(a.equity(p_tau), a.m, a.id);
    }
}

inline double total_position(const std::vector<SingleAssetAccount>& accounts) {
    double s = 0.0;
    for (const auto& a : accounts) s += a.q;
    return s;
}

inline std::vector<double> post_leverages(const std::vector<SingleAssetAccount>& accounts,
                                          const std::vector<double>& x, double p_tau) {
    if (x.size() != accounts.size()) throw std::domain_error("post_leverages: size mismatch");
    std::vector<double> out(accounts.size());
    for (std::size_t i = 0; i < accounts.size(); ++i)
        out[i] = leverage(accounts[i], x[i], p_tau);
    return out;
}

inline double max_post_leverage(const std::vector<SingleAssetAccount>& accounts,
                                const std::vector<double>& x, double p_tau) {
    double worst = 0.0;
    for (double l : post_leverages(accounts, x, p_tau)) worst = std::max(worst, l);
    return worst;
}

/** Throws unless x is a feasible allocation: right size, inside [0,q], summing to Q. */
inline void require_feasible_allocation(const std::vector<SingleAssetAccount>& accounts,
                                        const std::vector<double>& x, double Q) {
    if (x.size() != accounts.size())
        throw std::domain_error("allocation size does not match account count");
    double sum = 0.0;
    for (std::size_t i = 0; i < accounts.size(); ++i) {
        const double slack = 1e-9 * (1.0 + std::fabs(accounts[i].q));
        if (!(x[i] >= -slack && x[i] <= accounts[i].q + slack))
            throw std::domain_error("allocation for account " + accounts[i].id +
                                    " lies outside [0, q]");
        sum += x[i];
    }
    if (std::fabs(sum - Q) > 1e-9 * std::max(1.0, std::fabs(Q)))
        throw std::domain_error("allocation sums to " + std::to_string(sum) +
                                ", expected " + std::to_string(Q));
}

// ---------------------------------------------------------------------------
// Water-filling
// ---------------------------------------------------------------------------

/**
 * Aggregate reduction demanded when every account is capped at leverage t:
 * G(t) = Σ (q_i - (E_i/p_tau) t)₊. Continuous, nonincreasing, G(0) = Σ q_i,
 * and identically zero once t clears every initial leverage.
 */
inline double aggregate_demand(const std::vector<SingleAssetAccount>& accounts, double p_tau,
                               double t) {
    if (!(t >= 0.0)) throw std::domain_error("aggregate_demand: leverage must be >= 0");
    validate_single_asset_inputs(accounts, p_tau);
    double g = 0.0;
    for (const auto& a : accounts) g += math::pos(a.q - (a.equity(p_tau) / p_tau) * t);
    return g;
}

/**
 * Exact root of G(t) = Q. G is piecewise affine with breakpoints at the
 * initial leverages, so the root is found by sorting the breakpoints and
 * solving the straddling segment in closed form; no iteration is involved.
 *
 * Q = Σ q_i is accepted (full close-out, t* = 0) even though it makes the
 * allocation problem trivial; Q outside (0, Σ q_i] is rejected.
 */
inline double solve_threshold(const std::vector<SingleAssetAccount>& accounts, double p_tau,
                              double Q) {
    validate_single_asset_inputs(accounts, p_tau);
    const double sum_q = total_position(accounts);
    if (!(Q > 0.0)) throw std::invalid_argument("infeasible budget: Q must be positive");
    if (Q > sum_q + 1e-12 * std::max(1.0, sum_q))
        throw std::invalid_argument("infeasible budget: Q exceeds total open position");
    if (Q >= sum_q - 1e-12 * std::max(1.0, sum_q)) return 0.0;

    struct Seg {
        double b;  // initial leverage, the breakpoint where this account activates
        double s;  // equity slope E_i / p_tau
    };
    std::vector<Seg> segs;
    segs.reserve(accounts.size());
    for (const auto& a : accounts) {
        if (a.q <= 0.0) continue;  // flat accounts never activate
        const double s = a.equity(p_tau) / p_tau;
        segs.push_back({a.q / s, s});
    }
    std::sort(segs.begin(), segs.end(), [](const Seg& l, const Seg& r) { return l.b > r.b; });

    // Walking down from the largest breakpoint, the active set only grows and
    // on each segment G(t) = A - S t with A = Σ q_i, S = Σ s_i over it.
    double A = 0.0, S = 0.0;
    for (std::size_t j = 0; j < segs.size(); ++j) {
        A += segs[j].b * segs[j].s;
        S += segs[j].s;
        const double b_next = (j + 1 < segs.size()) ? segs[j + 1].b : 0.0;
        const double t = (A - Q) / S;
        if (t >= b_next) return std::max(t, 0.0);
    }
    return 0.0;  // unreachable for Q < sum_q; kept for completeness
}

/**
 * Risk-optimal allocation: reduce every account with initial leverage above
 * the common threshold t* down to exactly t*, leave the rest untouched.
 * Minimizes the worst post-reduction leverage, and with it expected shortfall
 * and every CVaR/spectral objective under a common price law.
 */
inline WaterfillResult waterfill(const std::vector<SingleAssetAccount>& accounts, double p_tau,
                                 double Q) {
    WaterfillResult res;
    res.t_star = solve_threshold(accounts, p_tau, Q);
    res.x.resize(accounts.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < accounts.size(); ++i) {
        const auto& a = accounts[i];
        res.x[i] = math::pos(a.q - (a.equity(p_tau) / p_tau) * res.t_star);
        if (res.x[i] > 0.0) res.active.push_back(i);
        sum += res.x[i];
    }
    res.g_residual = sum - Q;
    return res;
}

/** Smallest budget that brings every account to the stress cutoff: Q_beta = G(l_beta). */
inline double budget_to_cutoff(const std::vector<SingleAssetAccount>& accounts, double p_tau,
                               double ell_beta) {
    if (!(ell_beta > 0.0)) throw std::domain_error("budget_to_cutoff: cutoff must be positive");
    if (std::isinf(ell_beta)) return 0.0;
    return aggregate_demand(accounts, p_tau, ell_beta);
}

// ---------------------------------------------------------------------------
// Tail cutoffs and risk objectives
// ---------------------------------------------------------------------------

/**
 * Leverage above which an account's bankruptcy price falls inside the upper
 * beta-tail: l_beta = p_tau / (p_beta - p_tau), or +infinity when even the
 * beta-quantile sits at or below the deleveraging price.
 */
template <class Model>
inline double leverage_cutoff(const Model& model, double beta) {
    const double p_beta = quantile(model, beta);
    if (p_beta > model.p_tau) return model.p_tau / (p_beta - model.p_tau);
    return std::numeric_limits<double>::infinity();
}

/**
 * Per-account CVaR of the shortfall under a continuous one-asset law.
 * Stressed accounts (bankruptcy price inside the tail) pay
 * (q-x)(tail_mean - p^z); unstressed ones pay the truncated call
 * (q-x) E[(p_T - p^z)₊]/(1-beta). beta = 0 degrades to the plain expectation.
 */
template <class Model>
inline double cvar_account(const SingleAssetAccount& a, double x, const Model& model,
                           double beta) {
    if (!(beta >= 0.0 && beta < 1.0))
        throw std::domain_error("cvar_account: beta must lie in [0,1)");
    detail::check_reduction_range(x, a.q);
    const double rem = a.q - x;
    if (rem <= 0.0) return 0.0;
    const double p_z = bankruptcy_price(a, x, model.p_tau);
    if (beta == 0.0) return rem * call_expectation(model, p_z);
    const double p_beta = quantile(model, beta);
    if (p_z <= p_beta) return rem * (tail_mean(model, beta) - p_z);
    return rem / (1.0 - beta) * call_expectation(model, p_z);
}

/** Expected total shortfall in closed form: Σ (q_i - x_i) E[(p_T - p^z_i)₊]. */
template <class Model>
inline double expected_shortfall_total(const std::vector<SingleAssetAccount>& accounts,
                                       const std::vector<double>& x, const Model& model) {
    if (x.size() != accounts.size())
        throw std::domain_error("expected_shortfall_total: size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < accounts.size(); ++i)
        total += cvar_account(accounts[i], x[i], model, 0.0);
    return total;
}

/**
 * Objective value of an allocation under a continuous model. CVaR terms sum
 * account by account because all shortfalls are driven by the same price and
 * move together, so the aggregate CVaR splits exactly.
 */
template <class Model>
inline double risk_objective(const std::vector<SingleAssetAccount>& accounts,
                             const std::vector<double>& x, const Model& model,
                             const RiskSpec& spec) {
    if (x.size() != accounts.size()) throw std::domain_error("risk_objective: size mismatch");
    auto cvar_sum = [&](double beta) {
        double total = 0.0;
        for (std::size_t i = 0; i < accounts.size(); ++i)
            total += cvar_account(accounts[i], x[i], model, beta);
        return total;
    };
    switch (spec.kind) {
        case RiskSpec::Kind::Expected: return cvar_sum(0.0);
        case RiskSpec::Kind::Cvar: return cvar_sum(spec.beta);
        case RiskSpec::Kind::Spectral: {
            double total = 0.0;
            for (const auto& [b, w] : spec.components) total += w * cvar_sum(b);
            return total;
        }
    }
    throw std::logic_error("risk_objective: unknown spec kind");
}

/**
 * Objective against an explicit scenario table (single asset, d = 1).
 * Expected value is the probability-weighted aggregate shortfall; CVaR is the
 * exact discrete CVaR of the aggregate loss with atom splitting.
 */
inline double risk_objective(const std::vector<SingleAssetAccount>& accounts,
                             const std::vector<double>& x, double p_tau,
                             const ScenarioSet& scenarios, const RiskSpec& spec) {
    if (x.size() != accounts.size()) throw std::domain_error("risk_objective: size mismatch");
    if (scenarios.dim() != 1)
        throw std::domain_error("risk_objective: scenario set must have exactly one asset");
    const std::size_t S = scenarios.size();
    std::vector<double> loss(S, 0.0), probs(S);
    for (std::size_t s = 0; s < S; ++s) {
        const double p = scenarios.price(s, 0);
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
    throw std::logic_error("risk_objective: unknown spec kind");
}

// ---------------------------------------------------------------------------
// Optimality verifiers
// ---------------------------------------------------------------------------

/** Result of a first-order optimality check, with the offending account when it fails. */
struct OptimalityCheck {
    bool ok = true;
    std::size_t witness = static_cast<std::size_t>(-1);
    std::string detail;

    explicit operator bool() const { return ok; }
};

/**
 * Expected-loss optimality is exactly the leverage threshold rule: every
 * account given a positive reduction sits at one common post-reduction
 * leverage t, and every untouched account already started at or below t.
 */
inline OptimalityCheck verify_expected_loss_optimality(
    const std::vector<SingleAssetAccount>& accounts, double p_tau, double Q,
    const std::vector<double>& x, double tol = 1e-8) {
    validate_single_asset_inputs(accounts, p_tau);
    require_feasible_allocation(accounts, x, Q);

    double t_ref = -1.0;
    std::size_t ref_idx = 0;
    OptimalityCheck res;
    for (std::size_t i = 0; i < accounts.size(); ++i) {
        if (x[i] <= 1e-12 * std::max(1.0, accounts[i].q)) continue;
        const double li = leverage(accounts[i], x[i], p_tau);
        if (t_ref < 0.0) {
            t_ref = li;
            ref_idx = i;
        } else if (std::fabs(li - t_ref) > tol * std::max(1.0, t_ref)) {
            res.ok = false;
            res.witness = i;
            res.detail = "active accounts " + accounts[ref_idx].id + " and " + accounts[i].id +
                         " end at different leverages " + std::to_string(t_ref) + " vs " +
                         std::to_string(li);
            return res;
        }
    }
    if (t_ref < 0.0) t_ref = 0.0;  // nothing allocated; only consistent with Q = 0
    for (std::size_t i = 0; i < accounts.size(); ++i) {
        if (x[i] > 1e-12 * std::max(1.0, accounts[i].q)) continue;
        const double l0 = leverage(accounts[i], 0.0, p_tau);
        if (l0 > t_ref + tol * std::max(1.0, t_ref)) {
            res.ok = false;
            res.witness = i;
            res.detail = "untouched account " + accounts[i].id + " starts at leverage " +
                         std::to_string(l0) + " above the common threshold " +
                         std::to_string(t_ref);
            return res;
        }
    }
    return res;
}

/**
 * Marginal tail value of leverage: v_beta(l) = E[(p_T - p_tau) 1{p_T > H}]
 * with H = p_tau (1 + max(1/l_beta, 1/l)), i.e. the bankruptcy price at
 * leverage l clipped below the tail quantile. Nondecreasing in l and zero at
 * l = 0.
 */
template <class Model>
inline double cvar_marginal_value(const Model& model, double beta, double ell) {
    if (!(beta > 0.0 && beta < 1.0))
        throw std::domain_error("cvar_marginal_value: beta must lie in (0,1)");
    if (!(ell >= 0.0)) throw std::domain_error("cvar_marginal_value: leverage must be >= 0");
    if (ell == 0.0) return 0.0;
    const double cutoff = leverage_cutoff(model, beta);
    const double inv = std::max(std::isinf(cutoff) ? 0.0 : 1.0 / cutoff, 1.0 / ell);
    if (inv == 0.0) return 0.0;  // both leverages infinite: empty event
    const double H = model.p_tau * (1.0 + inv);
    return call_expectation(model, H) + (H - model.p_tau) * survival(model, H);
}

/**
 * First-order CVaR optimality: some shadow value theta >= 0 has
 * v_beta(l_i(x_i)) = theta on strict-interior coordinates, <= theta where
 * x_i = 0, and >= theta hidden in v_beta(0) = 0 where x_i = q_i (so any fully
 * closed position forces theta = 0). Flat optima make this strictly weaker
 * than the threshold rule: allocations other than water-filling can pass.
 */
template <class Model>
inline OptimalityCheck verify_cvar_optimality(const std::vector<SingleAssetAccount>& accounts,
                                              double p_tau, double Q, const std::vector<double>& x,
                                              const Model& model, double beta,
                                              double tol = 1e-8) {
    validate_single_asset_inputs(accounts, p_tau);
    require_feasible_allocation(accounts, x, Q);
    if (std::fabs(model.p_tau - p_tau) > 1e-12 * std::max(1.0, p_tau))
        throw std::domain_error("verify_cvar_optimality: model and accounts disagree on p_tau");

    std::vector<int> kind(accounts.size());  // 0 interior, 1 at zero, 2 at cap
    std::vector<double> value(accounts.size());
    double vmax = 0.0;
    for (std::size_t i = 0; i < accounts.size(); ++i) {
        const double q = accounts[i].q;
        const double lo_tol = 1e-12 * std::max(1.0, q);
        if (x[i] <= lo_tol)
            kind[i] = 1;
        else if (x[i] >= q - 1e-12 * std::max(1.0, q))
            kind[i] = 2;
        else
            kind[i] = 0;
        value[i] = cvar_marginal_value(model, beta, leverage(accounts[i], std::min(x[i], q), p_tau));
        vmax = std::max(vmax, value[i]);
    }
    const double scale = tol * std::max(1.0, vmax);

    OptimalityCheck res;
    // A fully closed position pins theta to v_beta(0) = 0.
    bool theta_zero = false;
    for (std::size_t i = 0; i < accounts.size(); ++i)
        if (kind[i] == 2 && accounts[i].q > 0.0) theta_zero = true;

    double theta = 0.0;
    if (!theta_zero) {
        double sum = 0.0;
        std::size_t n_int = 0;
        for (std::size_t i = 0; i < accounts.size(); ++i)
            if (kind[i] == 0) {
                sum += value[i];
                ++n_int;
            }
        theta = n_int ? sum / static_cast<double>(n_int) : vmax;
    }

    for (std::size_t i = 0; i < accounts.size(); ++i) {
        if (kind[i] == 0 && std::fabs(value[i] - theta) > scale) {
            res.ok = false;
            res.witness = i;
            res.detail = "interior account " + accounts[i].id + " has marginal value " +
                         std::to_string(value[i]) + " != shadow value " + std::to_string(theta);
            return res;
        }
        if (kind[i] == 1 && value[i] > theta + scale) {
            res.ok = false;
            res.witness = i;
            res.detail = "untouched account " + accounts[i].id + " has marginal value " +
                         std::to_string(value[i]) + " above shadow value " + std::to_string(theta);
            return res;
        }
        // kind 2: v_beta(0) = 0 >= theta holds because theta was pinned to zero.
    }
    return res;
}

}  // namespace adl
