#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adl/accounts.hpp"
#include "adl/market_model.hpp"
#include "adl/single_asset.hpp"

namespace adl {

enum class PolicyId { Waterfill, Queue, ProRata };

inline std::string policy_name(PolicyId p) {
    switch (p) {
        case PolicyId::Waterfill: return "waterfill";
        case PolicyId::Queue: return "queue";
        case PolicyId::ProRata: return "pro_rata";
    }
    return "waterfill";
}

inline PolicyId parse_policy(const std::string& s) {
    if (s == "waterfill") return PolicyId::Waterfill;
    if (s == "queue") return PolicyId::Queue;
    if (s == "pro_rata" || s == "prorata") return PolicyId::ProRata;
    throw std::domain_error("unknown policy '" + s + "' (expected waterfill|queue|pro_rata)");
}

/**
 * Queue ranking configuration. Priority is percentage P&L times current
 * leverage, depleted in descending order. The exchange-style percentage P&L
 * formula is a modeling choice, so it is injectable; the default treats a
 * short entered at p_entry and marked at p_tau as (p_entry - p_tau)/p_entry,
 * positive when the position is in profit.
 */
struct QueueConfig {
    std::function<double(const SingleAssetAccount&, double)> pct_pnl =
        [](const SingleAssetAccount& a, double p_tau) { return (a.p_entry - p_tau) / a.p_entry; };
};

/**
 * Dispatches one of the three reference policies. Q = 0 is accepted by all of
 * them (nothing to clear); Q above the total open position is rejected.
 */
inline std::vector<double> apply_policy(PolicyId policy,
                                        const std::vector<SingleAssetAccount>& accounts,
                                        double p_tau, double Q,
                                        const QueueConfig& queue_cfg = QueueConfig{}) {
    validate_single_asset_inputs(accounts, p_tau);
    const double sum_q = total_position(accounts);
    if (!(Q >= 0.0)) throw std::invalid_argument("infeasible budget: Q must be >= 0");
    if (Q > sum_q + 1e-12 * std::max(1.0, sum_q))
        throw std::invalid_argument("infeasible budget: Q exceeds total open position");
    Q = std::min(Q, sum_q);

    std::vector<double> x(accounts.size(), 0.0);
    if (Q <= 0.0) return x;

    switch (policy) {
        case PolicyId::Waterfill:
            return waterfill(accounts, p_tau, Q).x;
        case PolicyId::ProRata: {
            for (std::size_t i = 0; i < accounts.size(); ++i)
                x[i] = Q * accounts[i].q / sum_q;
            return x;
        }
        case PolicyId::Queue: {
            std::vector<std::size_t> order(accounts.size());
            std::iota(order.begin(), order.end(), 0);
            std::vector<double> prio(accounts.size());
            for (std::size_t i = 0; i < accounts.size(); ++i)
                prio[i] = queue_cfg.pct_pnl(accounts[i], p_tau) * leverage(accounts[i], 0.0, p_tau);
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                if (prio[a] != prio[b]) return prio[a] > prio[b];
                return id_less(accounts[a].id, accounts[b].id);
            });
            double remaining = Q;
            for (std::size_t i : order) {
                if (remaining <= 0.0) break;
                x[i] = std::min(accounts[i].q, remaining);
                remaining -= x[i];
            }
            return x;
        }
    }
    throw std::logic_error("apply_policy: unknown policy");
}

// ---------------------------------------------------------------------------
// State evolution (two-stage deleveraging)
// ---------------------------------------------------------------------------

/**
 * Applies a reduction to the account state: positions shrink, and the P&L
 * realized by buying back x units at p_tau settles into margin. Equity at
 * p_tau is invariant under this update.
 */
inline std::vector<SingleAssetAccount> advance_state(std::vector<SingleAssetAccount> accounts,
                                                     const std::vector<double>& x, double p_tau) {
    if (x.size() != accounts.size()) throw std::domain_error("advance_state: size mismatch");
    for (std::size_t i = 0; i < accounts.size(); ++i) {
        auto& a = accounts[i];
        detail::check_reduction_range(x[i], a.q);
        const double applied = std::min(std::max(x[i], 0.0), a.q);
        a.q -= applied;
        a.m += applied * (a.p_entry - p_tau);
    }
    return accounts;
}

// ---------------------------------------------------------------------------
// Manipulation-resistance checks
// ---------------------------------------------------------------------------

namespace detail {
inline std::string json_number(double v) { return math::format_double(v); }

inline std::string account_json(const SingleAssetAccount& a) {
    return "{\"id\":\"" + a.id + "\",\"q\":" + json_number(a.q) +
           ",\"p_entry\":" + json_number(a.p_entry) + ",\"margin\":" + json_number(a.m) + "}";
}

inline std::string accounts_json(const std::vector<SingleAssetAccount>& accounts) {
    std::string s = "[";
    for (std::size_t i = 0; i < accounts.size(); ++i) {
        if (i) s += ",";
        s += account_json(accounts[i]);
    }
    return s + "]";
}
}  // namespace detail

/** Outcome of a single property trial; `counterexample_json` is set when it fails. */
struct PropertyTrialResult {
    bool pass = true;
    std::string counterexample_json;
};

/**
 * A split of an aggregate position (q_A, E_A) into parts with the same totals.
 * Parts are materialized as margin-free accounts with entry price backed out
 * of the part equity, which reproduces each E_k exactly.
 */
struct SybilSplit {
    std::vector<std::pair<double, double>> parts;  // (q_k >= 0, E_k > 0)

    void validate(double attacker_q, double attacker_E) const {
        if (parts.empty()) throw std::domain_error("SybilSplit: no parts");
        double sq = 0.0, se = 0.0;
        for (const auto& [q, E] : parts) {
            if (!(q >= 0.0)) throw std::domain_error("SybilSplit: part position must be >= 0");
            if (!(E > 0.0)) throw std::domain_error("SybilSplit: part equity must be positive");
            sq += q;
            se += E;
        }
        if (std::fabs(sq - attacker_q) > 1e-9 * std::max(1.0, std::fabs(attacker_q)))
            throw std::domain_error("SybilSplit: part positions do not sum to the aggregate");
        if (std::fabs(se - attacker_E) > 1e-9 * std::max(1.0, std::fabs(attacker_E)))
            throw std::domain_error("SybilSplit: part equities do not sum to the aggregate");
    }
};

/** Total reduction applied to the attacker in the unsplit and split economies. */
struct SybilOutcome {
    double total_unsplit = 0.0;
    double total_split = 0.0;
};

inline SybilOutcome sybil_gain(PolicyId policy, const std::vector<SingleAssetAccount>& others,
                               double attacker_q, double attacker_E, const SybilSplit& split,
                               double p_tau, double Q,
                               const QueueConfig& queue_cfg = QueueConfig{}) {
    split.validate(attacker_q, attacker_E);

    auto synthesize = [&](const std::string& id, double q, double E) {
        // Margin-free synthesis: all equity is unrealized P&L.
        return (q > 0.0) ? single_asset_from_equity(id, q, E, 0.0, p_tau)
                         : single_asset_from_equity(id, q, E, E, p_tau);
    };

    std::vector<SingleAssetAccount> unsplit = others;
    unsplit.push_back(synthesize("sybil:0", attacker_q, attacker_E));
    const auto x_unsplit = apply_policy(policy, unsplit, p_tau, Q, queue_cfg);

    std::vector<SingleAssetAccount> economy = others;
    for (std::size_t k = 0; k < split.parts.size(); ++k)
        economy.push_back(
            synthesize("sybil:" + std::to_string(k), split.parts[k].first, split.parts[k].second));
    const auto x_split = apply_policy(policy, economy, p_tau, Q, queue_cfg);

    SybilOutcome out;
    out.total_unsplit = x_unsplit.back();
    for (std::size_t k = 0; k < split.parts.size(); ++k)
        out.total_split += x_split[others.size() + k];
    return out;
}

/** Sybil resistance: splitting must not reduce the attacker's total reduction. */
inline PropertyTrialResult check_sybil(PolicyId policy,
                                       const std::vector<SingleAssetAccount>& others,
                                       double attacker_q, double attacker_E,
                                       const SybilSplit& split, double p_tau, double Q,
                                       double tol = 1e-9) {
    const SybilOutcome o = sybil_gain(policy, others, attacker_q, attacker_E, split, p_tau, Q);
    PropertyTrialResult r;
    if (o.total_split < o.total_unsplit - tol) {
        r.pass = false;
        std::string parts = "[";
        for (std::size_t k = 0; k < split.parts.size(); ++k) {
            if (k) parts += ",";
            parts += "[" + detail::json_number(split.parts[k].first) + "," +
                     detail::json_number(split.parts[k].second) + "]";
        }
        parts += "]";
        r.counterexample_json =
            "{\"property\":\"sybil\",\"policy\":\"" + policy_name(policy) +
            "\",\"others\":" + detail::accounts_json(others) +
            ",\"attacker_q\":" + detail::json_number(attacker_q) +
            ",\"attacker_E\":" + detail::json_number(attacker_E) + ",\"split\":" + parts +
            ",\"p_tau\":" + detail::json_number(p_tau) + ",\"Q\":" + detail::json_number(Q) +
            ",\"total_unsplit\":" + detail::json_number(o.total_unsplit) +
            ",\"total_split\":" + detail::json_number(o.total_split) + "}";
    }
    return r;
}

/**
 * Path-independence gap: clear Q1+Q2 at once versus Q1, settle, then Q2.
 * Returns the max-norm deviation between the two cumulative allocations.
 */
inline double path_gap(PolicyId policy, const std::vector<SingleAssetAccount>& accounts,
                       double p_tau, double Q1, double Q2,
                       const QueueConfig& queue_cfg = QueueConfig{}) {
    if (!(Q1 >= 0.0 && Q2 >= 0.0))
        throw std::invalid_argument("path_gap: stage budgets must be >= 0");
    const auto x_full = apply_policy(policy, accounts, p_tau, Q1 + Q2, queue_cfg);
    const auto x1 = apply_policy(policy, accounts, p_tau, Q1, queue_cfg);
    const auto staged = advance_state(accounts, x1, p_tau);
    const auto x2 = apply_policy(policy, staged, p_tau, Q2, queue_cfg);
    double gap = 0.0;
    for (std::size_t i = 0; i < accounts.size(); ++i)
        gap = std::max(gap, std::fabs(x_full[i] - (x1[i] + x2[i])));
    return gap;
}

inline PropertyTrialResult check_path(PolicyId policy,
                                      const std::vector<SingleAssetAccount>& accounts,
                                      double p_tau, double Q1, double Q2, double tol = 1e-9) {
    const double gap = path_gap(policy, accounts, p_tau, Q1, Q2);
    PropertyTrialResult r;
    if (gap > tol) {
        r.pass = false;
        r.counterexample_json = "{\"property\":\"path_independence\",\"policy\":\"" +
                                policy_name(policy) +
                                "\",\"accounts\":" + detail::accounts_json(accounts) +
                                ",\"p_tau\":" + detail::json_number(p_tau) +
                                ",\"Q1\":" + detail::json_number(Q1) +
                                ",\"Q2\":" + detail::json_number(Q2) +
                                ",\"gap\":" + detail::json_number(gap) + "}";
    }
    return r;
}

/**
 * A wash trade on one account: entry price moves by delta while margin
 * absorbs q*delta, leaving the position and equity untouched.
 */
struct WashPerturbation {
    std::size_t index = 0;
    double delta = 0.0;  // entry price shift

    SingleAssetAccount apply(const SingleAssetAccount& a, double p_tau) const {
        SingleAssetAccount b = a;
        b.p_entry = a.p_entry + delta;
        b.m = a.m - a.q * delta;
        if (!(b.m >= 0.0))
            throw std::domain_error("wash perturbation drives margin of " + a.id + " negative");
        if (std::fabs(b.equity(p_tau) - a.equity(p_tau)) >
            1e-9 * std::max(1.0, std::fabs(a.equity(p_tau))))
            throw std::domain_error("perturbation changed equity of " + a.id);
        return b;
    }
};

/**
 * Wash-trade invariance of a policy: the allocation before and after the
 * equity-preserving perturbation must coincide coordinatewise within tol.
 */
inline PropertyTrialResult check_wash(PolicyId policy,
                                      const std::vector<SingleAssetAccount>& accounts,
                                      double p_tau, double Q, const WashPerturbation& pert,
                                      double tol = 1e-12) {
    if (pert.index >= accounts.size()) throw std::domain_error("check_wash: index out of range");
    std::vector<SingleAssetAccount> perturbed = accounts;
    perturbed[pert.index] = pert.apply(accounts[pert.index], p_tau);
    const auto x0 = apply_policy(policy, accounts, p_tau, Q);
    const auto x1 = apply_policy(policy, perturbed, p_tau, Q);
    double diff = 0.0;
    for (std::size_t i = 0; i < accounts.size(); ++i)
        diff = std::max(diff, std::fabs(x0[i] - x1[i]));
    PropertyTrialResult r;
    if (diff > tol) {
        r.pass = false;
        r.counterexample_json =
            "{\"property\":\"wash_trade\",\"policy\":\"" + policy_name(policy) +
            "\",\"accounts\":" + detail::accounts_json(accounts) +
            ",\"p_tau\":" + detail::json_number(p_tau) + ",\"Q\":" + detail::json_number(Q) +
            ",\"index\":" + std::to_string(pert.index) +
            ",\"delta\":" + detail::json_number(pert.delta) +
            ",\"max_diff\":" + detail::json_number(diff) + "}";
    }
    return r;
}

/** Waterfill wash-trade invariance as a plain predicate (tolerance 1e-12). */
inline bool wash_trade_invariance(const std::vector<SingleAssetAccount>& accounts, double p_tau,
                                  double Q, const WashPerturbation& pert) {
    return check_wash(PolicyId::Waterfill, accounts, p_tau, Q, pert).pass;
}

/**
 * Leverage priority: while the budget is too small to pull the most levered
 * accounts down to the runner-up's leverage, nobody else may be touched.
 * Probes the policy at 25/50/75% of that equalization budget.
 */
inline PropertyTrialResult check_leverage_priority(PolicyId policy,
                                                   const std::vector<SingleAssetAccount>& accounts,
                                                   double p_tau) {
    validate_single_asset_inputs(accounts, p_tau);
    std::vector<double> lev(accounts.size());
    for (std::size_t i = 0; i < accounts.size(); ++i)
        lev[i] = leverage(accounts[i], 0.0, p_tau);
    const double top = *std::max_element(lev.begin(), lev.end());
    std::vector<bool> maximal(accounts.size());
    double second = -1.0;
    for (std::size_t i = 0; i < accounts.size(); ++i) {
        maximal[i] = lev[i] >= top - 1e-12 * std::max(1.0, top);
        if (!maximal[i]) second = std::max(second, lev[i]);
    }
    PropertyTrialResult r;
    if (second < 0.0) return r;  // all accounts share the top leverage: vacuously true

    const double q_equalize = aggregate_demand(accounts, p_tau, second);
    if (q_equalize <= 0.0) return r;
    for (double frac : {0.25, 0.5, 0.75}) {
        const double Q = frac * q_equalize;
        const auto x = apply_policy(policy, accounts, p_tau, Q);
        for (std::size_t i = 0; i < accounts.size(); ++i) {
            if (maximal[i] || x[i] <= 1e-12 * std::max(1.0, accounts[i].q)) continue;
            r.pass = false;
            r.counterexample_json =
                "{\"property\":\"leverage_priority\",\"policy\":\"" + policy_name(policy) +
                "\",\"accounts\":" + detail::accounts_json(accounts) +
                ",\"p_tau\":" + detail::json_number(p_tau) + ",\"Q\":" + detail::json_number(Q) +
                ",\"touched_id\":\"" + accounts[i].id +
                "\",\"x\":" + detail::json_number(x[i]) + "}";
            return r;
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Randomized property suite
// ---------------------------------------------------------------------------

/** Aggregate result of a randomized search over one (policy, property) cell. */
struct PropertySuiteReport {
    PolicyId policy = PolicyId::Waterfill;
    std::string property;
    std::size_t trials = 0;
    std::size_t failures = 0;
    std::string first_counterexample_json;

    bool pass() const { return failures == 0; }
};

namespace detail {

struct TrialRng {
    UniformStream u;
    explicit TrialRng(std::uint64_t seed) : u(seed) {}
    double uniform(double a, double b) { return a + (b - a) * u.next(); }
    std::size_t index(std::size_t n) {
        return std::min<std::size_t>(n - 1, static_cast<std::size_t>(u.next() * n));
    }
};

/** Random solvent book: 2..6 accounts priced at p_tau = 1, mixed profit/loss. */
inline std::vector<SingleAssetAccount> random_book(TrialRng& rng, std::size_t& n_out) {
    const std::size_t n = 2 + rng.index(5);
    std::vector<SingleAssetAccount> book;
    book.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double q = rng.uniform(0.5, 10.0);
        const double E = rng.uniform(0.2, 5.0);
        const double m = rng.uniform(0.0, 1.0) < 0.5 ? 0.0 : rng.uniform(0.0, 2.0 * E);
        book.push_back(single_asset_from_equity("a" + std::to_string(i), q, E, m, 1.0));
    }
    n_out = n;
    return book;
}

}  // namespace detail

/**
 * Seeded randomized search over all four resistance properties for one
 * policy. Each trial derives its own generator from (seed, trial index), so
 * results are independent of execution order and shardable across workers.
 */
inline std::vector<PropertySuiteReport> run_property_suite(PolicyId policy, std::size_t trials,
                                                           std::uint64_t seed) {
    PropertySuiteReport sybil, path, wash, priority;
    sybil.policy = path.policy = wash.policy = priority.policy = policy;
    sybil.property = "sybil";
    path.property = "path_independence";
    wash.property = "wash_trade";
    priority.property = "leverage_priority";
    sybil.trials = path.trials = wash.trials = priority.trials = trials;

    auto record = [](PropertySuiteReport& rep, const PropertyTrialResult& res) {
        if (!res.pass) {
            if (rep.failures == 0) rep.first_counterexample_json = res.counterexample_json;
            ++rep.failures;
        }
    };

    for (std::size_t t = 0; t < trials; ++t) {
        detail::TrialRng rng(seed + 0x9E3779B97F4A7C15ull * (t + 1));
        std::size_t n = 0;
        auto book = detail::random_book(rng, n);
        const double p_tau = 1.0;
        const double sum_q = total_position(book);
        const double Q = rng.uniform(0.05, 0.95) * sum_q;

        // Sybil: the last account doubles as the attacker aggregate.
        {
            auto others = book;
            const auto attacker = others.back();
            others.pop_back();
            const double aq = attacker.q, aE = attacker.equity(p_tau);
            const std::size_t K = 2 + rng.index(3);
            SybilSplit split;
            // Skewed simplex weights so extreme splits (tiny-equity levered
            // part plus deep-pocket part) show up regularly.
            std::vector<double> wq(K), we(K);
            double sq = 0.0, se = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                wq[k] = std::pow(rng.uniform(1e-3, 1.0), 3.0);
                we[k] = std::pow(rng.uniform(1e-3, 1.0), 3.0);
                sq += wq[k];
                se += we[k];
            }
            for (std::size_t k = 0; k < K; ++k)
                split.parts.push_back({aq * wq[k] / sq, aE * we[k] / se});
            const double q_cap = std::min(Q, sum_q - 1e-9);
            record(sybil, check_sybil(policy, others, aq, aE, split, p_tau, q_cap));
        }
        // Path independence: random split of Q into two stages.
        {
            const double u = rng.uniform(0.0, 1.0);
            record(path, check_path(policy, book, p_tau, u * Q, (1.0 - u) * Q));
        }
        // Wash trade: equity-preserving entry shift on a random account.
        {
            const std::size_t j = rng.index(n);
            const auto& a = book[j];
            double delta;
            if (rng.uniform(0.0, 1.0) < 0.5 && a.q > 0.0 && a.m > 0.0)
                delta = rng.uniform(0.0, 0.9 * a.m / a.q);  // raise entry, burn margin
            else
                delta = -rng.uniform(0.0, 0.9 * std::max(a.p_entry, 0.0));  // lower entry
            if (a.p_entry + delta > 1e-9)
                record(wash, check_wash(policy, book, p_tau, Q, WashPerturbation{j, delta},
                                        policy == PolicyId::Waterfill ? 1e-12 : 1e-9));
        }
        // Leverage priority on the raw book.
        record(priority, check_leverage_priority(policy, book, p_tau));
    }
    return {sybil, path, wash, priority};
}

}  // namespace adl
