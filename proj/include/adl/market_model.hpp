#pragma once
#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "adl/math.hpp"

namespace adl {

/**
 * Lognormal terminal-price law
 *   p_T = p_tau * exp((mu - sigma^2/2) * delta + sigma * sqrt(delta) * Z),  Z ~ N(0,1).
 *
 * mu is a drift per year, sigma a volatility per sqrt(year), delta a horizon in years.
 */
struct GbmModel {
    double p_tau;
    double mu;
    double sigma;
    double delta;

    GbmModel(double p_tau_, double mu_, double sigma_, double delta_)
        : p_tau(p_tau_), mu(mu_), sigma(sigma_), delta(delta_) {
        if (!(p_tau > 0.0)) throw std::domain_error("GbmModel: p_tau must be positive");
        if (!(sigma > 0.0)) throw std::domain_error("GbmModel: sigma must be positive");
        if (!(delta > 0.0)) throw std::domain_error("GbmModel: delta must be positive");
    }
};

/**
 * Shifted exponential terminal-price law p_T = p_tau + Y, Y ~ Exp(rate).
 * Density is strictly positive on [p_tau, inf), which is the support regime the
 * single-asset optimality results assume; tail functionals are elementary.
 */
struct ShiftedExponentialModel {
    double p_tau;
    double rate;

    ShiftedExponentialModel(double p_tau_, double rate_) : p_tau(p_tau_), rate(rate_) {
        if (!(rate > 0.0)) throw std::domain_error("ShiftedExponentialModel: rate must be positive");
    }
};

/** Two correlated lognormal legs with zero drift, annualized volatilities and horizon delta. */
struct BivariateGbmModel {
    std::array<double, 2> p_tau;
    std::array<double, 2> sigma_ann;
    double rho;
    double delta;

    BivariateGbmModel(std::array<double, 2> p_tau_, std::array<double, 2> sigma_ann_,
                      double rho_, double delta_)
        : p_tau(p_tau_), sigma_ann(sigma_ann_), rho(rho_), delta(delta_) {
        for (double p : p_tau)
            if (!(p > 0.0)) throw std::domain_error("BivariateGbmModel: prices must be positive");
        for (double s : sigma_ann)
            if (!(s > 0.0)) throw std::domain_error("BivariateGbmModel: volatilities must be positive");
        if (!(std::fabs(rho) <= 1.0))
            throw std::domain_error("BivariateGbmModel: |rho| must be <= 1");
        if (!(delta > 0.0)) throw std::domain_error("BivariateGbmModel: delta must be positive");
    }
};

/**
 * Scalar driver law for the additive factor model. Must have a strictly positive
 * density and a finite first absolute moment. Standard normal by default; a custom
 * law supplies its density (for quadrature) and quantile (for sampling).
 */
struct EpsilonLaw {
    std::function<double(double)> pdf;
    std::function<double(double)> quantile;
    bool standard_normal{true};

    static EpsilonLaw normal() {
        EpsilonLaw law;
        law.pdf = [](double z) { return math::norm_pdf(z); };
        law.quantile = [](double u) { return math::norm_quantile(u); };
        law.standard_normal = true;
        return law;
    }

    static EpsilonLaw custom(std::function<double(double)> pdf,
                             std::function<double(double)> quantile) {
        EpsilonLaw law;
        law.pdf = std::move(pdf);
        law.quantile = std::move(quantile);
        law.standard_normal = false;
        return law;
    }
};

/** Additive single-factor model p_T = p_tau + epsilon * v with scalar driver epsilon. */
struct SingleFactorModel {
    std::vector<double> p_tau;
    std::vector<double> v;
    EpsilonLaw epsilon_law;

    SingleFactorModel(std::vector<double> p_tau_, std::vector<double> v_,
                      EpsilonLaw law = EpsilonLaw::normal())
        : p_tau(std::move(p_tau_)), v(std::move(v_)), epsilon_law(std::move(law)) {
        if (p_tau.size() != v.size())
            throw std::domain_error("SingleFactorModel: p_tau and v dimensions differ");
        if (std::all_of(v.begin(), v.end(), [](double c) { return c == 0.0; }))
            throw std::domain_error("SingleFactorModel: v must have a nonzero component");
    }

    std::size_t dim() const { return p_tau.size(); }
};

/** Finite terminal-price law: S scenarios over d assets with probabilities. */
class ScenarioSet {
public:
    ScenarioSet(std::size_t n_scenarios, std::size_t dim)
        : S_(n_scenarios), d_(dim), prices_(n_scenarios * dim, 0.0),
          probs_(n_scenarios, n_scenarios > 0 ? 1.0 / static_cast<double>(n_scenarios) : 0.0) {
        if (n_scenarios == 0) throw std::domain_error("ScenarioSet: need at least one scenario");
        if (dim == 0) throw std::domain_error("ScenarioSet: need at least one asset");
    }

    std::size_t size() const { return S_; }
    std::size_t dim() const { return d_; }

    double price(std::size_t s, std::size_t k) const { return prices_[s * d_ + k]; }
    double& price(std::size_t s, std::size_t k) { return prices_[s * d_ + k]; }
    const double* row(std::size_t s) const { return prices_.data() + s * d_; }

    double prob(std::size_t s) const { return probs_[s]; }
    void set_prob(std::size_t s, double p) { probs_[s] = p; }

    /** Checks probabilities are nonnegative and sum to one within 1e-12. */
    void validate() const {
        double sum = 0.0;
        for (double p : probs_) {
            if (p < 0.0) throw std::domain_error("ScenarioSet: negative probability");
            sum += p;
        }
        if (std::fabs(sum - 1.0) > 1e-12)
            throw std::domain_error("ScenarioSet: probabilities sum to " + std::to_string(sum));
    }

private:
    std::size_t S_;
    std::size_t d_;
    std::vector<double> prices_;
    std::vector<double> probs_;
};

namespace detail {
inline void check_level_open(double beta) {
    if (!(beta > 0.0 && beta < 1.0))
        throw std::domain_error("quantile level must lie in (0,1)");
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Quantiles, tail means, call expectations (one overload set per scalar law)
// ---------------------------------------------------------------------------

/** beta-quantile of the lognormal terminal price. */
inline double quantile(const GbmModel& m, double beta) {
    detail::check_level_open(beta);
    const double z = math::norm_quantile(beta);
    return m.p_tau * std::exp((m.mu - 0.5 * m.sigma * m.sigma) * m.delta +
                              m.sigma * std::sqrt(m.delta) * z);
}

/** Conditional mean E[p_T | p_T >= beta-quantile]. */
inline double tail_mean(const GbmModel& m, double beta) {
    detail::check_level_open(beta);
    const double s = m.sigma * std::sqrt(m.delta);
    const double z = math::norm_quantile(beta);
    return m.p_tau * std::exp(m.mu * m.delta) * math::norm_cdf(s - z) / (1.0 - beta);
}

/** E[(p_T - K)+] in closed form under the physical (drifted) measure. */
inline double call_expectation(const GbmModel& m, double strike) {
    if (!(strike > 0.0)) throw std::domain_error("call_expectation: strike must be positive");
    const double s = m.sigma * std::sqrt(m.delta);
    const double d1 = (std::log(m.p_tau / strike) + (m.mu + 0.5 * m.sigma * m.sigma) * m.delta) / s;
    const double d2 = d1 - s;
    return m.p_tau * std::exp(m.mu * m.delta) * math::norm_cdf(d1) - strike * math::norm_cdf(d2);
}

/** P(p_T > p). */
inline double survival(const GbmModel& m, double p) {
    if (!(p > 0.0)) return 1.0;
    const double s = m.sigma * std::sqrt(m.delta);
    const double z = (std::log(p / m.p_tau) - (m.mu - 0.5 * m.sigma * m.sigma) * m.delta) / s;
    return math::norm_sf(z);
}

inline double mean(const GbmModel& m) { return m.p_tau * std::exp(m.mu * m.delta); }

inline double quantile(const ShiftedExponentialModel& m, double beta) {
    detail::check_level_open(beta);
    return m.p_tau - std::log1p(-beta) / m.rate;
}

inline double tail_mean(const ShiftedExponentialModel& m, double beta) {
    // Memorylessness: E[p_T | p_T >= p_beta] = p_beta + 1/rate.
    return quantile(m, beta) + 1.0 / m.rate;
}

inline double call_expectation(const ShiftedExponentialModel& m, double strike) {
    if (strike <= m.p_tau) return (m.p_tau - strike) + 1.0 / m.rate;
    return std::exp(-m.rate * (strike - m.p_tau)) / m.rate;
}

inline double survival(const ShiftedExponentialModel& m, double p) {
    if (p <= m.p_tau) return 1.0;
    return std::exp(-m.rate * (p - m.p_tau));
}

inline double mean(const ShiftedExponentialModel& m) { return m.p_tau + 1.0 / m.rate; }

// ---------------------------------------------------------------------------
// Discrete CVaR
// ---------------------------------------------------------------------------

/**
 * CVaR_beta of a finite law, computed exactly as the quantile integral
 * (1/(1-beta)) * Int_beta^1 VaR_u du on sorted atoms, splitting the atom that
 * straddles level beta. beta = 0 reduces to the probability-weighted mean.
 */
inline double discrete_cvar(const std::vector<double>& values, const std::vector<double>& probs,
                            double beta) {
    if (values.size() != probs.size())
        throw std::domain_error("discrete_cvar: values/probs size mismatch");
    if (values.empty()) throw std::domain_error("discrete_cvar: empty law");
    if (!(beta >= 0.0 && beta < 1.0)) throw std::domain_error("discrete_cvar: beta must lie in [0,1)");

    double mass = 0.0;
    for (double p : probs) {
        if (p < 0.0) throw std::domain_error("discrete_cvar: negative probability");
        mass += p;
    }
    if (std::fabs(mass - 1.0) > 1e-12)
        throw std::domain_error("discrete_cvar: probabilities must sum to one");

    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return values[i] > values[j]; });

    const double tail = 1.0 - beta;
    double remaining = tail;
    double acc = 0.0;
    for (std::size_t idx : order) {
        const double take = std::min(probs[idx], remaining);
        acc += take * values[idx];
        remaining -= take;
        if (remaining <= 0.0) break;
    }
    return acc / tail;
}

// ---------------------------------------------------------------------------
// One-factor calibration
// ---------------------------------------------------------------------------

using Matrix = std::vector<std::vector<double>>;

/** Covariance of the price increment p_T - p_tau implied by the bivariate lognormal law. */
inline Matrix increment_covariance(const BivariateGbmModel& m) {
    const double vB = m.sigma_ann[0], vE = m.sigma_ann[1];
    const double c11 = m.p_tau[0] * m.p_tau[0] * std::expm1(vB * vB * m.delta);
    const double c22 = m.p_tau[1] * m.p_tau[1] * std::expm1(vE * vE * m.delta);
    const double c12 = m.p_tau[0] * m.p_tau[1] * std::expm1(m.rho * vB * vE * m.delta);
    return {{c11, c12}, {c12, c22}};
}

struct FactorDecomposition {
    double lambda1;          // largest eigenvalue
    std::vector<double> u1;  // unit eigenvector, largest-|component| entry positive
    std::vector<double> v;   // sqrt(lambda1) * u1
};

/**
 * Leading eigenpair of a symmetric PSD matrix via Eigen's self-adjoint solver.
 * The eigenvector sign is fixed so that its largest-magnitude component is
 * positive, and v = sqrt(lambda1) * u1.
 */
inline FactorDecomposition leading_factor(const Matrix& cov) {
    const std::size_t d = cov.size();
    if (d == 0) throw std::domain_error("leading_factor: empty matrix");
    Eigen::MatrixXd M(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        if (cov[i].size() != d) throw std::domain_error("leading_factor: matrix must be square");
        for (std::size_t j = 0; j < d; ++j) M(i, j) = cov[i][j];
    }
    const double scale = std::max(1.0, M.cwiseAbs().maxCoeff());
    if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
        throw std::domain_error("leading_factor: matrix must be symmetric");

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(M);
    if (solver.info() != Eigen::Success)
        throw std::runtime_error("leading_factor: eigendecomposition failed");

    FactorDecomposition out;
    out.lambda1 = solver.eigenvalues()(d - 1);  // eigenvalues sorted ascending
    Eigen::VectorXd u = solver.eigenvectors().col(d - 1);
    std::size_t imax = 0;
    for (std::size_t i = 1; i < d; ++i)
        if (std::fabs(u(i)) > std::fabs(u(imax))) imax = i;
    if (u(imax) < 0.0) u = -u;
    out.u1.resize(d);
    out.v.resize(d);
    const double root = std::sqrt(std::max(0.0, out.lambda1));
    for (std::size_t i = 0; i < d; ++i) {
        out.u1[i] = u(i);
        out.v[i] = root * u(i);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

namespace detail {
/** Deterministic uniform stream: mt19937_64 words mapped to (0,1) open interval. */
class UniformStream {
public:
    explicit UniformStream(std::uint64_t seed) : rng_(seed) {}
    double next() { return math::uniform_from_bits(rng_()); }

private:
    std::mt19937_64 rng_;
};
}  // namespace detail

/** n equiprobable lognormal draws; identical (model, n, seed) give identical output. */
inline ScenarioSet sample(const GbmModel& m, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw std::domain_error("sample: need n >= 1");
    detail::UniformStream u(seed);
    ScenarioSet out(n, 1);
    const double s = m.sigma * std::sqrt(m.delta);
    const double drift = (m.mu - 0.5 * m.sigma * m.sigma) * m.delta;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = math::norm_quantile(u.next());
        out.price(i, 0) = m.p_tau * std::exp(drift + s * z);
    }
    return out;
}

inline ScenarioSet sample(const ShiftedExponentialModel& m, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw std::domain_error("sample: need n >= 1");
    detail::UniformStream u(seed);
    ScenarioSet out(n, 1);
    for (std::size_t i = 0; i < n; ++i)
        out.price(i, 0) = m.p_tau - std::log1p(-u.next()) / m.rate;
    return out;
}

inline ScenarioSet sample(const BivariateGbmModel& m, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw std::domain_error("sample: need n >= 1");
    detail::UniformStream u(seed);
    ScenarioSet out(n, 2);
    const double s0 = m.sigma_ann[0] * std::sqrt(m.delta);
    const double s1 = m.sigma_ann[1] * std::sqrt(m.delta);
    const double mix = std::sqrt(std::max(0.0, 1.0 - m.rho * m.rho));
    for (std::size_t i = 0; i < n; ++i) {
        const double z0 = math::norm_quantile(u.next());
        const double zr = math::norm_quantile(u.next());
        const double z1 = m.rho * z0 + mix * zr;
        out.price(i, 0) = m.p_tau[0] * std::exp(-0.5 * s0 * s0 + s0 * z0);
        out.price(i, 1) = m.p_tau[1] * std::exp(-0.5 * s1 * s1 + s1 * z1);
    }
    return out;
}

inline ScenarioSet sample(const SingleFactorModel& m, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw std::domain_error("sample: need n >= 1");
    detail::UniformStream u(seed);
    const std::size_t d = m.dim();
    ScenarioSet out(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double eps = m.epsilon_law.quantile(u.next());
        for (std::size_t k = 0; k < d; ++k) out.price(i, k) = m.p_tau[k] + eps * m.v[k];
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV serialization: header "prob,p1,...,pd", 17 significant digits
// ---------------------------------------------------------------------------

inline std::string to_csv(const ScenarioSet& scen) {
    std::string out = "prob";
    for (std::size_t k = 0; k < scen.dim(); ++k) out += ",p" + std::to_string(k + 1);
    out += "\n";
    for (std::size_t s = 0; s < scen.size(); ++s) {
        out += math::format_double(scen.prob(s));
        for (std::size_t k = 0; k < scen.dim(); ++k)
            out += "," + math::format_double(scen.price(s, k));
        out += "\n";
    }
    return out;
}

inline ScenarioSet scenario_set_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw std::domain_error("scenario CSV: empty input");
    std::size_t d = 0;
    for (char c : line)
        if (c == ',') ++d;
    if (d == 0) throw std::domain_error("scenario CSV: header must be prob,p1,...,pd");

    std::vector<double> probs;
    std::vector<double> prices;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string cell;
        std::vector<double> vals;
        while (std::getline(row, cell, ',')) vals.push_back(std::stod(cell));
        if (vals.size() != d + 1)
            throw std::domain_error("scenario CSV: row has " + std::to_string(vals.size()) +
                                    " fields, expected " + std::to_string(d + 1));
        probs.push_back(vals[0]);
        prices.insert(prices.end(), vals.begin() + 1, vals.end());
    }
    if (probs.empty()) throw std::domain_error("scenario CSV: no scenarios");

    ScenarioSet out(probs.size(), d);
    for (std::size_t s = 0; s < probs.size(); ++s) {
        out.set_prob(s, probs[s]);
        for (std::size_t k = 0; k < d; ++k) out.price(s, k) = prices[s * d + k];
    }
    out.validate();
    return out;
}

}  // namespace adl
