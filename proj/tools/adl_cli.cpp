// Command-line front end for the deleveraging engine: batch solves, policy
// comparisons, factor calibration, and a self-contained `reproduce` bundle.
//
// Every floating-point value is emitted with 17 significant digits, and all
// randomness is seeded, so identical invocations produce identical bytes.
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "adl/accounts.hpp"
#include "adl/io.hpp"
#include "adl/market_model.hpp"
#include "adl/math.hpp"
#include "adl/multi_asset.hpp"
#include "adl/policies.hpp"
#include "adl/single_asset.hpp"
#include "adl/single_factor.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Option parsing helpers
// ---------------------------------------------------------------------------

std::vector<double> parse_vector(const std::string& text, const std::string& what) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t comma = std::min(text.find(',', pos), text.size());
        const std::string tok = text.substr(pos, comma - pos);
        try {
            std::size_t used = 0;
            out.push_back(std::stod(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw std::invalid_argument(what + ": cannot parse \"" + tok + "\" as a number");
        }
        pos = comma + 1;
        if (comma == text.size()) break;
    }
    if (out.empty()) throw std::invalid_argument(what + ": empty value");
    return out;
}

/** Model configuration: inline JSON text or a path to a JSON file. */
struct ModelConfig {
    enum class Kind { None, Gbm, ShiftedExponential, BivariateGbm, Factor };
    Kind kind = Kind::None;
    // gbm / shifted_exponential
    double p_tau1 = 0.0, mu = 0.0, sigma = 0.0, delta = 0.0, rate = 0.0;
    // bivariate_gbm
    std::array<double, 2> p_tau2{}, sigma2{};
    double rho = 0.0;
    // factor
    std::vector<double> p_tau_vec, v;
    // sampled-law scenario count (SAA paths)
    std::size_t scenarios = 10000;

    std::vector<double> p_tau() const {
        switch (kind) {
            case Kind::Gbm:
            case Kind::ShiftedExponential: return {p_tau1};
            case Kind::BivariateGbm: return {p_tau2[0], p_tau2[1]};
            case Kind::Factor: return p_tau_vec;
            case Kind::None: break;
        }
        return {};
    }
};

double require_number(const json& j, const std::string& key) {
    if (!j.contains(key) || !j[key].is_number())
        throw std::invalid_argument("model config: missing numeric field \"" + key + "\"");
    return j[key].get<double>();
}

std::vector<double> require_array(const json& j, const std::string& key) {
    if (!j.contains(key) || !j[key].is_array())
        throw std::invalid_argument("model config: missing array field \"" + key + "\"");
    std::vector<double> out;
    for (const auto& e : j[key]) {
        if (!e.is_number())
            throw std::invalid_argument("model config: field \"" + key + "\" must hold numbers");
        out.push_back(e.get<double>());
    }
    return out;
}

ModelConfig parse_model(const std::string& arg) {
    if (arg.empty()) return {};
    const std::string text =
        arg.find('{') != std::string::npos ? arg : adl::io::read_file(arg);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("model config is malformed JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string())
        throw std::invalid_argument("model config: expected an object with a string \"kind\"");
    const std::string kind = j["kind"].get<std::string>();
    ModelConfig m;
    if (j.contains("scenarios")) {
        if (!j["scenarios"].is_number_unsigned())
            throw std::invalid_argument("model config: \"scenarios\" must be a positive integer");
        m.scenarios = j["scenarios"].get<std::size_t>();
    }
    if (kind == "gbm") {
        m.kind = ModelConfig::Kind::Gbm;
        m.p_tau1 = require_number(j, "p_tau");
        m.mu = j.contains("mu") ? require_number(j, "mu") : 0.0;
        m.sigma = require_number(j, "sigma");
        m.delta = require_number(j, "delta");
    } else if (kind == "shifted_exponential") {
        m.kind = ModelConfig::Kind::ShiftedExponential;
        m.p_tau1 = require_number(j, "p_tau");
        m.rate = require_number(j, "rate");
    } else if (kind == "bivariate_gbm") {
        m.kind = ModelConfig::Kind::BivariateGbm;
        const auto p = require_array(j, "p_tau");
        const auto s = require_array(j, "sigma");
        if (p.size() != 2 || s.size() != 2)
            throw std::invalid_argument("model config: bivariate_gbm needs 2-vectors");
        m.p_tau2 = {p[0], p[1]};
        m.sigma2 = {s[0], s[1]};
        m.rho = require_number(j, "rho");
        m.delta = require_number(j, "delta");
    } else if (kind == "factor") {
        m.kind = ModelConfig::Kind::Factor;
        m.p_tau_vec = require_array(j, "p_tau");
        m.v = require_array(j, "v");
        if (m.p_tau_vec.size() != m.v.size())
            throw std::invalid_argument("model config: factor p_tau and v dimensions differ");
    } else {
        throw std::invalid_argument("model config: unknown kind \"" + kind + "\"");
    }
    return m;
}

adl::RiskSpec parse_spec(const std::string& spec_arg, std::optional<double> beta_flag) {
    std::string s = spec_arg.empty() ? "expected" : spec_arg;
    if (s == "expected") {
        if (beta_flag) return adl::RiskSpec::cvar(*beta_flag);
        return adl::RiskSpec::expected();
    }
    if (s.rfind("cvar", 0) == 0) {
        double beta = beta_flag.value_or(std::numeric_limits<double>::quiet_NaN());
        if (s.size() > 4 && (s[4] == ':' || s[4] == '(')) {
            std::string level = s.substr(5);
            if (!level.empty() && level.back() == ')') level.pop_back();
            beta = std::stod(level);
        }
        if (beta_flag) beta = *beta_flag;  // explicit flag wins
        if (!std::isfinite(beta))
            throw std::invalid_argument("--spec cvar requires a level (cvar:0.95 or --beta)");
        return adl::RiskSpec::cvar(beta);
    }
    if (s.rfind("spectral:", 0) == 0) {
        std::vector<std::pair<double, double>> comps;
        for (const std::string& item : [&] {
                 std::vector<std::string> toks;
                 std::string rest = s.substr(9);
                 std::size_t pos = 0;
                 while (pos <= rest.size()) {
                     const std::size_t comma = std::min(rest.find(',', pos), rest.size());
                     toks.push_back(rest.substr(pos, comma - pos));
                     pos = comma + 1;
                     if (comma == rest.size()) break;
                 }
                 return toks;
             }()) {
            const std::size_t colon = item.find(':');
            if (colon == std::string::npos)
                throw std::invalid_argument("--spec spectral expects level:weight pairs");
            comps.emplace_back(std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1)));
        }
        return adl::RiskSpec::spectral(std::move(comps));
    }
    throw std::invalid_argument("unknown --spec \"" + s + "\" (expected|cvar[:b]|spectral:b:w,...)");
}

/** Resolve the liquidation price vector from flag, accounts file, and model. */
std::vector<double> resolve_p_tau(const std::vector<double>& flag, const adl::io::AccountsFile& f,
                                  const ModelConfig& model) {
    std::vector<double> chosen;
    auto merge = [&](const std::vector<double>& cand, const char* source) {
        if (cand.empty()) return;
        if (chosen.empty()) {
            chosen = cand;
            return;
        }
        if (cand.size() != chosen.size())
            throw std::invalid_argument(std::string("inconsistent p_tau dimension from ") + source);
        for (std::size_t k = 0; k < cand.size(); ++k)
            if (std::fabs(cand[k] - chosen[k]) > 1e-9 * std::max(1.0, std::fabs(chosen[k])))
                throw std::invalid_argument(std::string("inconsistent p_tau values from ") + source);
    };
    merge(flag, "--p-tau");
    merge(f.p_tau, "the accounts file");
    merge(model.p_tau(), "the model config");
    if (chosen.empty())
        throw std::invalid_argument(
            "no liquidation price: pass --p-tau, embed p_tau in the accounts file, or give a model");
    return chosen;
}

void ensure_dir(const std::string& out) {
    if (!out.empty()) fs::create_directories(out);
}

void emit(const std::string& out_dir, const std::string& name, const std::string& content,
          bool echo) {
    if (out_dir.empty()) {
        if (echo) std::cout << content;
        return;
    }
    adl::io::write_file((fs::path(out_dir) / name).string(), content);
}

// ---------------------------------------------------------------------------
// Shared option bundle
// ---------------------------------------------------------------------------

struct Options {
    std::string accounts_path;
    std::string model_arg;
    std::string q_arg;
    std::string spec_arg;
    double beta_raw = std::numeric_limits<double>::quiet_NaN();
    std::string scenarios_path;
    std::string p_tau_arg;
    std::string out_dir;
    std::uint64_t seed = 1;
    double tol = 1e-6;
    std::size_t max_iter = 5000;
    bool check_connectivity = false;

    std::optional<double> beta() const {
        if (std::isnan(beta_raw)) return std::nullopt;
        return beta_raw;
    }
};

void add_common_flags(CLI::App* sub, Options& o, bool needs_accounts) {
    auto* acc = sub->add_option("--accounts", o.accounts_path, "Accounts JSON file");
    if (needs_accounts) acc->required();
    sub->add_option("--model", o.model_arg, "Model config: inline JSON or path");
    sub->add_option("--q", o.q_arg, "Clearing quantity (scalar or comma-separated vector)");
    sub->add_option("--beta", o.beta_raw, "CVaR level in [0,1)");
    sub->add_option("--spec", o.spec_arg, "Risk spec: expected | cvar[:b] | spectral:b:w,...");
    sub->add_option("--scenarios", o.scenarios_path, "Scenario CSV (prob,p1,...,pd)");
    sub->add_option("--p-tau", o.p_tau_arg, "Liquidation price (scalar or vector)");
    sub->add_option("--seed", o.seed, "RNG seed for sampled laws / property trials");
    sub->add_option("--out", o.out_dir, "Output directory (default: print to stdout)");
    sub->add_option("--tol", o.tol, "Solver clearing tolerance");
    sub->add_option("--max-iter", o.max_iter, "Maximum dual iterations");
}

// ---------------------------------------------------------------------------
// solve-single
// ---------------------------------------------------------------------------

int run_solve_single(const Options& o) {
    const auto file = adl::io::load_accounts_file(o.accounts_path);
    const ModelConfig model = parse_model(o.model_arg);
    const auto p_tau_vec = resolve_p_tau(
        o.p_tau_arg.empty() ? std::vector<double>{} : parse_vector(o.p_tau_arg, "--p-tau"), file,
        model);
    if (p_tau_vec.size() != 1)
        throw std::invalid_argument("solve-single expects a scalar liquidation price");
    const double p_tau = p_tau_vec[0];
    if (o.q_arg.empty()) throw std::invalid_argument("solve-single requires --q");
    const double Q = parse_vector(o.q_arg, "--q").at(0);

    const auto accounts = adl::io::single_asset_accounts(file, p_tau);
    const adl::RiskSpec spec = parse_spec(o.spec_arg, o.beta());
    const auto wf = adl::waterfill(accounts, p_tau, Q);

    double objective = std::numeric_limits<double>::quiet_NaN();
    if (model.kind == ModelConfig::Kind::Gbm) {
        adl::GbmModel g(model.p_tau1, model.mu, model.sigma, model.delta);
        objective = adl::risk_objective(accounts, wf.x, g, spec);
    } else if (model.kind == ModelConfig::Kind::ShiftedExponential) {
        adl::ShiftedExponentialModel g(model.p_tau1, model.rate);
        objective = adl::risk_objective(accounts, wf.x, g, spec);
    } else if (!o.scenarios_path.empty()) {
        const auto scen = adl::scenario_set_from_csv(adl::io::read_file(o.scenarios_path));
        objective = adl::risk_objective(accounts, wf.x, p_tau, scen, spec);
    } else if (model.kind != ModelConfig::Kind::None) {
        throw std::invalid_argument("solve-single: model kind must be gbm or shifted_exponential");
    }

    ensure_dir(o.out_dir);
    const std::string report = adl::io::solve_report_json(accounts, wf, objective, spec);
    emit(o.out_dir, "solve_single_report.json", report, true);
    if (!o.out_dir.empty()) {
        std::vector<std::tuple<double, std::string, double>> rows;
        const auto lev = adl::post_leverages(accounts, wf.x, p_tau);
        for (std::size_t i = 0; i < accounts.size(); ++i)
            rows.emplace_back(Q, accounts[i].id, lev[i]);
        adl::io::write_file((fs::path(o.out_dir) / "post_leverage.csv").string(),
                            adl::io::leverage_curve_csv(rows));
        std::cout << report;
    }
    const bool ok = std::fabs(wf.g_residual) <= 1e-12 * std::max(1.0, std::fabs(Q));
    return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// solve-multi
// ---------------------------------------------------------------------------

int run_solve_multi(const Options& o) {
    const auto file = adl::io::load_accounts_file(o.accounts_path);
    const ModelConfig model = parse_model(o.model_arg);
    const auto p_tau = resolve_p_tau(
        o.p_tau_arg.empty() ? std::vector<double>{} : parse_vector(o.p_tau_arg, "--p-tau"), file,
        model);
    if (o.q_arg.empty()) throw std::invalid_argument("solve-multi requires --q");

    adl::ClearingProblem pb;
    pb.p_tau = p_tau;
    pb.Q = parse_vector(o.q_arg, "--q");
    if (pb.Q.size() != p_tau.size())
        throw std::invalid_argument("--q dimension does not match the liquidation price vector");
    pb.accounts = adl::io::cross_margin_accounts(file, p_tau);

    adl::DualParams prm;
    prm.tol = o.tol;
    prm.max_iter = o.max_iter;

    ensure_dir(o.out_dir);
    try {
        adl::MultiSolveReport rep;
        if (!o.scenarios_path.empty()) {
            const auto scen = adl::scenario_set_from_csv(adl::io::read_file(o.scenarios_path));
            rep = adl::dual_ascent(pb, scen, prm);
        } else if (model.kind == ModelConfig::Kind::Factor) {
            adl::SingleFactorModel fm(model.p_tau_vec, model.v);
            rep = adl::dual_ascent(pb, fm, prm);
        } else if (model.kind == ModelConfig::Kind::Gbm) {
            adl::GbmModel g(model.p_tau1, model.mu, model.sigma, model.delta);
            rep = adl::dual_ascent_closed_form(pb, g, prm);
        } else if (model.kind == ModelConfig::Kind::ShiftedExponential) {
            adl::ShiftedExponentialModel g(model.p_tau1, model.rate);
            rep = adl::dual_ascent_closed_form(pb, g, prm);
        } else if (model.kind == ModelConfig::Kind::BivariateGbm) {
            adl::BivariateGbmModel g(model.p_tau2, model.sigma2, model.rho, model.delta);
            const auto scen = adl::sample(g, model.scenarios, o.seed);
            rep = adl::dual_ascent(pb, scen, prm);
        } else {
            throw std::invalid_argument("solve-multi needs --scenarios or a --model config");
        }
        const std::string report = adl::io::multi_report_json(pb.accounts, rep);
        emit(o.out_dir, "solve_multi_report.json", report, true);
        emit(o.out_dir, "solve_multi_trace.csv", adl::io::trace_csv(rep.trace), false);
        if (!o.out_dir.empty()) std::cout << report;
        return rep.converged ? 0 : 1;
    } catch (const adl::ConvergenceError& e) {
        const std::string trace = adl::io::trace_csv(e.trace);
        const std::string where = o.out_dir.empty() ? std::string("solve_multi_trace.csv")
                                                    : (fs::path(o.out_dir) / "solve_multi_trace.csv").string();
        adl::io::write_file(where, trace);
        std::cerr << "solve-multi failed to converge: " << e.what() << "\n"
                  << "iteration trace written to " << where << "\n";
        return 1;
    }
}

// ---------------------------------------------------------------------------
// solve-factor
// ---------------------------------------------------------------------------

int run_solve_factor(const Options& o) {
    const auto file = adl::io::load_accounts_file(o.accounts_path);
    const ModelConfig model = parse_model(o.model_arg);
    if (model.kind != ModelConfig::Kind::Factor)
        throw std::invalid_argument("solve-factor requires --model with kind \"factor\"");
    const auto p_tau = resolve_p_tau(
        o.p_tau_arg.empty() ? std::vector<double>{} : parse_vector(o.p_tau_arg, "--p-tau"), file,
        model);
    if (o.q_arg.empty()) throw std::invalid_argument("solve-factor requires --q");
    const auto Q = parse_vector(o.q_arg, "--q");
    if (Q.size() != p_tau.size())
        throw std::invalid_argument("--q dimension does not match the liquidation price vector");

    const auto accounts = adl::io::cross_margin_accounts(file, p_tau);
    const auto ft = adl::solve_factor_targets(accounts, p_tau, model.v, Q);

    ensure_dir(o.out_dir);
    int status = 0;
    std::string report;
    if (o.check_connectivity) {
        adl::ClearingProblem pb;
        pb.accounts = accounts;
        pb.p_tau = p_tau;
        pb.Q = Q;
        std::vector<adl::BoundsBox> boxes = adl::problem_boxes(pb);
        std::vector<std::vector<double>> x;
        bool parallel_ok = true;
        if (ft.implementable) {
            x = ft.x_star;
        } else {
            adl::DualParams prm;
            prm.tol = o.tol;
            prm.max_iter = o.max_iter;
            try {
                adl::SingleFactorModel fm(model.p_tau_vec, model.v);
                const auto rep = adl::dual_ascent(pb, fm, prm);
                x = rep.x;
                parallel_ok = adl::shadow_price_parallel(rep.lambda, model.v, Q, o.tol);
            } catch (const adl::ConvergenceError& e) {
                std::cerr << "solve-factor: connectivity solve failed: " << e.what() << "\n";
                status = 1;
            }
        }
        if (status == 0) {
            const auto graph = adl::interior_coverage_graph(x, boxes, Q, model.v);
            report = adl::io::factor_report_json(accounts, ft, &graph);
            std::cout << "coverage vertices:";
            for (std::size_t k : graph.vertices) std::cout << " " << k;
            std::cout << "\ncoverage edges:";
            for (const auto& [a, b] : graph.edges) std::cout << " (" << a << "," << b << ")";
            std::cout << "\nconnected: " << (graph.connected ? "yes" : "no")
                      << "\nshadow prices parallel to loading: " << (parallel_ok ? "yes" : "no")
                      << "\n";
        }
    } else {
        report = adl::io::factor_report_json(accounts, ft);
    }
    if (status == 0) {
        emit(o.out_dir, "solve_factor_report.json", report, true);
        if (!o.out_dir.empty()) std::cout << report;
    }
    return status;
}

// ---------------------------------------------------------------------------
// compare-policies
// ---------------------------------------------------------------------------

int run_compare_policies(const Options& o) {
    constexpr std::size_t kTrials = 1000;
    std::vector<adl::PropertySuiteReport> all;
    for (adl::PolicyId policy :
         {adl::PolicyId::Waterfill, adl::PolicyId::Queue, adl::PolicyId::ProRata}) {
        auto reports = adl::run_property_suite(policy, kTrials, o.seed);
        all.insert(all.end(), reports.begin(), reports.end());
    }
    const std::string csv = adl::io::policy_report_csv(all);
    ensure_dir(o.out_dir);
    emit(o.out_dir, "compare_policies.csv", csv, true);
    if (!o.out_dir.empty()) {
        std::cout << csv;
        for (const auto& r : all)
            if (!r.pass())
                adl::io::write_file((fs::path(o.out_dir) /
                                     ("counterexample_" + adl::policy_name(r.policy) + "_" +
                                      r.property + ".json"))
                                        .string(),
                                    r.first_counterexample_json + "\n");
    }
    return 0;
}

// ---------------------------------------------------------------------------
// calibrate-factor
// ---------------------------------------------------------------------------

std::string calibration_json(const adl::Matrix& cov, const adl::FactorDecomposition& fd) {
    return "{\"covariance\":" + adl::io::json_matrix(cov) +
           ",\"lambda1\":" + adl::math::format_double(fd.lambda1) +
           ",\"u1\":" + adl::io::json_array(fd.u1) + ",\"v\":" + adl::io::json_array(fd.v) + "}\n";
}

int run_calibrate_factor(const Options& o) {
    const ModelConfig model = parse_model(o.model_arg);
    if (model.kind != ModelConfig::Kind::BivariateGbm)
        throw std::invalid_argument("calibrate-factor requires --model with kind \"bivariate_gbm\"");
    adl::BivariateGbmModel g(model.p_tau2, model.sigma2, model.rho, model.delta);
    const adl::Matrix cov = adl::increment_covariance(g);
    const auto fd = adl::leading_factor(cov);
    const std::string report = calibration_json(cov, fd);
    ensure_dir(o.out_dir);
    emit(o.out_dir, "factor_calibration.json", report, true);
    if (!o.out_dir.empty()) std::cout << report;
    return 0;
}

// ---------------------------------------------------------------------------
// reproduce: regenerate the bundled tables and plot-ready curves
// ---------------------------------------------------------------------------

const char* kCrossMarginBook = R"({
  "p_tau": [67000, 1900],
  "accounts": [
    {"id": "acct1", "q": [8, 323],    "margin": 137500, "equity": 242100},
    {"id": "acct2", "q": [10, -38.7], "margin": 85300,  "equity": 143000},
    {"id": "acct3", "q": [8, 326.2],  "margin": 75400,  "equity": 180600},
    {"id": "acct4", "q": [7, -190],   "margin": 43900,  "equity": 116900}
  ]
})";

const char* kSingleAssetBook = R"({
  "p_tau": 67000,
  "accounts": [
    {"id": "a1", "q": 8,  "p_entry": 71000,   "margin": 146000},
    {"id": "a2", "q": 10, "p_entry": 72000,   "margin": 178800},
    {"id": "a3", "q": 8,  "p_entry": 70000,   "margin": 171800},
    {"id": "a4", "q": 7,  "p_entry": 69500,   "margin": 83500}
  ]
})";

const char* kStressBook = R"({
  "p_tau": [1, 1],
  "accounts": [
    {"id": "s1", "q": [10, 0],  "p_entry": [1, 1], "margin": 18},
    {"id": "s2", "q": [10, 10], "p_entry": [1, 1], "margin": 40}
  ]
})";

const char* kStressScenarios =
    "prob,p1,p2\n"
    "0.9,1,1\n"
    "0.05,4,1\n"
    "0.05,2,5\n";

const char* kSplitCoverageBook = R"({
  "p_tau": [1, 1],
  "accounts": [
    {"id": "long_a", "q": [1, 0], "margin": 0, "equity": 1},
    {"id": "long_b", "q": [0, 1], "margin": 0, "equity": 1}
  ]
})";

std::string cross_margin_model_json() {
    return std::string("{\"kind\":\"bivariate_gbm\",\"p_tau\":[67000,1900],\"sigma\":[0.6,0.75],") +
           "\"rho\":0.85,\"delta\":" + adl::math::format_double(10.0 / 365.0) +
           ",\"scenarios\":10000}\n";
}

std::string single_asset_model_json() {
    return std::string("{\"kind\":\"gbm\",\"p_tau\":67000,\"mu\":0,\"sigma\":1,\"delta\":") +
           adl::math::format_double(10.0 / 365.0) + "}\n";
}

int run_reproduce(const Options& o) {
    const std::string out = o.out_dir.empty() ? std::string("reproduce_out") : o.out_dir;
    ensure_dir(out);
    const fs::path root(out);
    fs::create_directories(root / "fixtures");

    // Emit the fixture configs, then consume them through the normal loaders so
    // the bundle doubles as an end-to-end exercise of the file interfaces.
    adl::io::write_file((root / "fixtures/cross_margin_book.json").string(),
                        std::string(kCrossMarginBook) + "\n");
    adl::io::write_file((root / "fixtures/cross_margin_model.json").string(),
                        cross_margin_model_json());
    adl::io::write_file((root / "fixtures/single_asset_book.json").string(),
                        std::string(kSingleAssetBook) + "\n");
    adl::io::write_file((root / "fixtures/single_asset_model.json").string(),
                        single_asset_model_json());
    adl::io::write_file((root / "fixtures/stress_book.json").string(),
                        std::string(kStressBook) + "\n");
    adl::io::write_file((root / "fixtures/stress_scenarios.csv").string(), kStressScenarios);
    adl::io::write_file((root / "fixtures/split_coverage_book.json").string(),
                        std::string(kSplitCoverageBook) + "\n");

    int status = 0;

    // --- Factor calibration and the cross-margin leverage table ---
    const ModelConfig mm = parse_model((root / "fixtures/cross_margin_model.json").string());
    adl::BivariateGbmModel biv(mm.p_tau2, mm.sigma2, mm.rho, mm.delta);
    const adl::Matrix cov = adl::increment_covariance(biv);
    const auto fd = adl::leading_factor(cov);
    adl::io::write_file((root / "factor_calibration.json").string(), calibration_json(cov, fd));

    const auto cm_file = adl::io::load_accounts_file((root / "fixtures/cross_margin_book.json").string());
    const std::vector<double> p_tau2 = cm_file.p_tau;
    const auto cm_accounts = adl::io::cross_margin_accounts(cm_file, p_tau2);
    {
        std::string csv = "account_id,equity,factor_leverage,gross_leverage\n";
        const std::vector<double> zero(2, 0.0);
        for (const auto& a : cm_accounts) {
            csv += adl::io::csv_field(a.id) + "," + adl::math::format_double(a.equity(p_tau2)) +
                   "," + adl::math::format_double(adl::factor_leverage(a, zero, fd.v, p_tau2)) +
                   "," + adl::math::format_double(adl::gross_leverage(a, zero, p_tau2)) + "\n";
        }
        adl::io::write_file((root / "cross_margin_leverages.csv").string(), csv);
    }

    // --- Discrete-scenario risk scan: CVaR minimizers move with the level ---
    {
        const auto sb_file = adl::io::load_accounts_file((root / "fixtures/stress_book.json").string());
        const auto sb = adl::io::cross_margin_accounts(sb_file, sb_file.p_tau);
        const auto scen = adl::scenario_set_from_csv(
            adl::io::read_file((root / "fixtures/stress_scenarios.csv").string()));
        const adl::RiskSpec c90 = adl::RiskSpec::cvar(0.90), c95 = adl::RiskSpec::cvar(0.95);
        std::string csv = "a,cvar_0.90,cvar_0.95\n";
        double best90 = std::numeric_limits<double>::infinity(), a90 = 0.0;
        double best95 = std::numeric_limits<double>::infinity(), a95 = 0.0;
        for (int i = 0; i <= 10000; ++i) {
            const double a = static_cast<double>(i) / 1000.0;
            const std::vector<std::vector<double>> x{{a, 0.0}, {10.0 - a, 0.0}};
            const double v90 = adl::scenario_risk_objective(sb, x, sb_file.p_tau, scen, c90);
            const double v95 = adl::scenario_risk_objective(sb, x, sb_file.p_tau, scen, c95);
            csv += adl::math::format_double(a) + "," + adl::math::format_double(v90) + "," +
                   adl::math::format_double(v95) + "\n";
            if (v90 < best90) {
                best90 = v90;
                a90 = a;
            }
            if (v95 < best95) {
                best95 = v95;
                a95 = a;
            }
        }
        adl::io::write_file((root / "risk_level_scan.csv").string(), csv);
        adl::io::write_file(
            (root / "risk_level_summary.json").string(),
            "{\"cvar_0.90\":{\"a_star\":" + adl::math::format_double(a90) +
                ",\"value\":" + adl::math::format_double(best90) +
                "},\"cvar_0.95\":{\"a_star\":" + adl::math::format_double(a95) +
                ",\"value\":" + adl::math::format_double(best95) + "}}\n");
    }

    // --- Disconnected-coverage instance: targets exist, no allocation attains them ---
    {
        const auto f = adl::io::load_accounts_file((root / "fixtures/split_coverage_book.json").string());
        const auto accounts = adl::io::cross_margin_accounts(f, f.p_tau);
        const std::vector<double> v{1.0, 1.0};
        const std::vector<double> Q{0.2, 0.8};
        const auto ft = adl::solve_factor_targets(accounts, f.p_tau, v, Q);
        adl::ClearingProblem pb;
        pb.accounts = accounts;
        pb.p_tau = f.p_tau;
        pb.Q = Q;
        try {
            adl::SingleFactorModel fm(f.p_tau, v);
            adl::DualParams prm;
            prm.tol = o.tol;
            const auto rep = adl::dual_ascent(pb, fm, prm);
            const auto boxes = adl::problem_boxes(pb);
            const auto graph = adl::interior_coverage_graph(rep.x, boxes, Q, v);
            std::string rj = adl::io::factor_report_json(accounts, ft, &graph);
            rj.pop_back();  // rejoin: append the solved allocation next to the targets
            rj.pop_back();
            rj += ",\"solved_x\":" + adl::io::json_matrix(rep.x) +
                  ",\"solved_factor_leverage\":[";
            for (std::size_t i = 0; i < accounts.size(); ++i) {
                if (i) rj += ",";
                rj += adl::math::format_double(
                    adl::factor_leverage(accounts[i], rep.x[i], v, f.p_tau));
            }
            rj += "]}\n";
            adl::io::write_file((root / "split_coverage_report.json").string(), rj);
        } catch (const adl::ConvergenceError& e) {
            std::cerr << "reproduce: split-coverage solve failed: " << e.what() << "\n";
            adl::io::write_file((root / "split_coverage_trace.csv").string(),
                                adl::io::trace_csv(e.trace));
            status = 1;
        }
    }

    // --- Single-asset book: leverage and objective curves over the cleared quantity ---
    {
        const auto f = adl::io::load_accounts_file((root / "fixtures/single_asset_book.json").string());
        const double p_tau = f.p_tau.at(0);
        const auto accounts = adl::io::single_asset_accounts(f, p_tau);
        const ModelConfig smc = parse_model((root / "fixtures/single_asset_model.json").string());
        adl::GbmModel gbm(smc.p_tau1, smc.mu, smc.sigma, smc.delta);
        const double beta = 0.98;
        const double ell_beta = adl::leverage_cutoff(gbm, beta);
        const double q_beta = adl::budget_to_cutoff(accounts, p_tau, ell_beta);
        const double sum_q = adl::total_position(accounts);

        // Q grid: 1/100 steps of the open interest, with the cutoff budget
        // inserted exactly so the slope change is visible at a grid point.
        std::vector<double> grid;
        for (int i = 0; i <= 3300; ++i) grid.push_back(static_cast<double>(i) / 100.0);
        grid.push_back(q_beta);
        std::sort(grid.begin(), grid.end());
        grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

        std::vector<std::tuple<double, std::string, double>> lev_rows;
        std::vector<std::pair<double, double>> cvar_rows, exp_rows;
        for (double Q : grid) {
            if (Q > sum_q) break;
            // Q = 0 anchors the curves at the untouched book.
            std::vector<double> x(accounts.size(), 0.0);
            if (Q > 0.0) x = adl::waterfill(accounts, p_tau, Q).x;
            const auto lev = adl::post_leverages(accounts, x, p_tau);
            for (std::size_t i = 0; i < accounts.size(); ++i)
                lev_rows.emplace_back(Q, accounts[i].id, lev[i]);
            cvar_rows.emplace_back(
                Q, adl::risk_objective(accounts, x, gbm, adl::RiskSpec::cvar(beta)));
            exp_rows.emplace_back(
                Q, adl::risk_objective(accounts, x, gbm, adl::RiskSpec::expected()));
        }
        adl::io::write_file((root / "leverage_vs_q.csv").string(),
                            adl::io::leverage_curve_csv(lev_rows));
        adl::io::write_file((root / "objective_vs_q_cvar.csv").string(),
                            adl::io::objective_curve_csv(cvar_rows));
        adl::io::write_file((root / "objective_vs_q_expected.csv").string(),
                            adl::io::objective_curve_csv(exp_rows));
        adl::io::write_file(
            (root / "summary.json").string(),
            "{\"ell_beta\":" + adl::math::format_double(ell_beta) +
                ",\"q_beta\":" + adl::math::format_double(q_beta) +
                ",\"open_interest\":" + adl::math::format_double(sum_q) +
                ",\"calibrated_v\":" + adl::io::json_array(fd.v) + "}\n");
    }

    std::cout << "reproduce artifacts written to " << out << "\n";
    return status;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Risk-optimal auto-deleveraging allocator"};
    app.require_subcommand(1);

    Options o_single, o_multi, o_factor, o_compare, o_calibrate, o_repro;
    auto* solve_single =
        app.add_subcommand("solve-single", "Water-filling allocation for one asset");
    add_common_flags(solve_single, o_single, true);
    auto* solve_multi =
        app.add_subcommand("solve-multi", "Dual-decomposition allocation across assets");
    add_common_flags(solve_multi, o_multi, true);
    auto* solve_factor =
        app.add_subcommand("solve-factor", "Factor-leverage targets and construction");
    add_common_flags(solve_factor, o_factor, true);
    solve_factor->add_flag("--check-connectivity", o_factor.check_connectivity,
                           "Solve under the factor law and print the interior-coverage graph");
    auto* compare =
        app.add_subcommand("compare-policies", "Property harness over allocation policies");
    add_common_flags(compare, o_compare, false);
    auto* calibrate =
        app.add_subcommand("calibrate-factor", "Leading factor of the price-increment covariance");
    add_common_flags(calibrate, o_calibrate, false);
    auto* repro = app.add_subcommand("reproduce", "Regenerate bundled tables and curve data");
    add_common_flags(repro, o_repro, false);

    CLI11_PARSE(app, argc, argv);

    try {
        if (solve_single->parsed()) return run_solve_single(o_single);
        if (solve_multi->parsed()) return run_solve_multi(o_multi);
        if (solve_factor->parsed()) return run_solve_factor(o_factor);
        if (compare->parsed()) return run_compare_policies(o_compare);
        if (calibrate->parsed()) return run_calibrate_factor(o_calibrate);
        if (repro->parsed()) return run_reproduce(o_repro);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
