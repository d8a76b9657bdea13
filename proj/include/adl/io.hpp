#pragma once
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adl/accounts.hpp"
#include "adl/math.hpp"
#include "adl/multi_asset.hpp"
#include "adl/policies.hpp"
#include "adl/single_asset.hpp"
#include "adl/single_factor.hpp"

namespace adl::io {

// ---------------------------------------------------------------------------
// Plain file helpers
// ---------------------------------------------------------------------------

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << content;
    if (!out) throw std::runtime_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Accounts JSON
//
// Accepted shapes:
//   [ {...}, {...} ]                          — bare array of account records
//   { "p_tau": number|array, "accounts": [...] } — with bundled prices
//
// Record schema: {id, q: number|number[], p_entry: number|number[],
// margin: number}. An optional "equity" field replaces p_entry: the entry
// price is backed out of the stated equity at p_tau instead.
// ---------------------------------------------------------------------------

/** One parsed account record, before binding to a liquidation price. */
struct AccountRecord {
    std::string id;
    std::vector<double> q;
    std::vector<double> p_entry;  // empty when equity is given instead
    double margin = 0.0;
    std::optional<double> equity;
    bool scalar = false;  // q was written as a plain number
};

struct AccountsFile {
    std::vector<AccountRecord> records;
    std::vector<double> p_tau;  // empty unless the file bundled prices
    bool scalar_p_tau = false;
};

namespace detail {

inline std::vector<double> number_or_array(const nlohmann::json& v, const std::string& where,
                                           bool* was_scalar = nullptr) {
    if (v.is_number()) {
        if (was_scalar) *was_scalar = true;
        return {v.get<double>()};
    }
    if (v.is_array()) {
        if (was_scalar) *was_scalar = false;
        std::vector<double> out;
        out.reserve(v.size());
        for (const auto& e : v) {
            if (!e.is_number())
                throw std::invalid_argument(where + ": array elements must be numbers");
            out.push_back(e.get<double>());
        }
        if (out.empty()) throw std::invalid_argument(where + ": array must be non-empty");
        return out;
    }
    throw std::invalid_argument(where + ": expected a number or an array of numbers");
}

inline AccountRecord parse_record(const nlohmann::json& j, std::size_t index) {
    const std::string where = "account record #" + std::to_string(index);
    if (!j.is_object()) throw std::invalid_argument(where + ": expected a JSON object");
    AccountRecord r;
    if (!j.contains("id")) throw std::invalid_argument(where + ": missing \"id\"");
    if (j["id"].is_string())
        r.id = j["id"].get<std::string>();
    else if (j["id"].is_number_integer())
        r.id = std::to_string(j["id"].get<long long>());
    else
        throw std::invalid_argument(where + ": \"id\" must be a string or integer");
    const std::string who = "account \"" + r.id + "\"";

    if (!j.contains("q")) throw std::invalid_argument(who + ": missing \"q\"");
    r.q = number_or_array(j["q"], who + " field q", &r.scalar);

    if (!j.contains("margin")) throw std::invalid_argument(who + ": missing \"margin\"");
    if (!j["margin"].is_number()) throw std::invalid_argument(who + ": \"margin\" must be a number");
    r.margin = j["margin"].get<double>();

    if (j.contains("equity")) {
        if (!j["equity"].is_number())
            throw std::invalid_argument(who + ": \"equity\" must be a number");
        r.equity = j["equity"].get<double>();
    }
    if (j.contains("p_entry")) {
        bool scalar_p = false;
        r.p_entry = number_or_array(j["p_entry"], who + " field p_entry", &scalar_p);
        if (r.p_entry.size() != r.q.size())
            throw std::invalid_argument(who + ": q and p_entry dimensions differ");
        if (r.scalar && !scalar_p)
            throw std::invalid_argument(who + ": scalar q with array p_entry");
    } else if (!r.equity) {
        throw std::invalid_argument(who + ": needs either \"p_entry\" or \"equity\"");
    }
    return r;
}

}  // namespace detail

/**
 * Parses an accounts file, validating the schema and returning records in
 * deterministic id order. Malformed files throw std::invalid_argument naming
 * the offending record.
 */
inline AccountsFile parse_accounts_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(std::string("accounts JSON is malformed: ") + e.what());
    }
    AccountsFile f;
    const nlohmann::json* arr = nullptr;
    if (j.is_array()) {
        arr = &j;
    } else if (j.is_object()) {
        if (!j.contains("accounts") || !j["accounts"].is_array())
            throw std::invalid_argument("accounts JSON object must contain an \"accounts\" array");
        arr = &j["accounts"];
        if (j.contains("p_tau"))
            f.p_tau = detail::number_or_array(j["p_tau"], "field p_tau", &f.scalar_p_tau);
    } else {
        throw std::invalid_argument("accounts JSON must be an array or an object");
    }
    std::size_t dim = 0;
    for (std::size_t i = 0; i < arr->size(); ++i) {
        AccountRecord r = detail::parse_record((*arr)[i], i);
        if (dim == 0)
            dim = r.q.size();
        else if (r.q.size() != dim)
            throw std::invalid_argument("account \"" + r.id + "\": dimension " +
                                        std::to_string(r.q.size()) + " differs from earlier records (" +
                                        std::to_string(dim) + ")");
        f.records.push_back(std::move(r));
    }
    if (!f.p_tau.empty() && dim != 0 && f.p_tau.size() != dim)
        throw std::invalid_argument("p_tau dimension does not match the account records");
    std::sort(f.records.begin(), f.records.end(),
              [](const AccountRecord& a, const AccountRecord& b) { return id_less(a.id, b.id); });
    for (std::size_t i = 1; i < f.records.size(); ++i)
        if (f.records[i].id == f.records[i - 1].id)
            throw std::invalid_argument("duplicate account id \"" + f.records[i].id + "\"");
    return f;
}

inline AccountsFile load_accounts_file(const std::string& path) {
    return parse_accounts_json(read_file(path));
}

/** Binds parsed records to a liquidation price as single-asset accounts. */
inline std::vector<SingleAssetAccount> single_asset_accounts(const AccountsFile& f, double p_tau) {
    std::vector<SingleAssetAccount> out;
    out.reserve(f.records.size());
    for (const auto& r : f.records) {
        if (r.q.size() != 1)
            throw std::invalid_argument("account \"" + r.id +
                                        "\" is multi-asset; a single-asset solve expects scalar q");
        if (r.equity)
            out.push_back(single_asset_from_equity(r.id, r.q[0], *r.equity, r.margin, p_tau));
        else
            out.push_back(make_single_asset_account(r.id, r.q[0], r.p_entry[0], r.margin, p_tau));
    }
    return out;
}

/** Binds parsed records to a liquidation price vector as cross-margin accounts. */
inline std::vector<CrossMarginAccount> cross_margin_accounts(const AccountsFile& f,
                                                             const std::vector<double>& p_tau) {
    std::vector<CrossMarginAccount> out;
    out.reserve(f.records.size());
    for (const auto& r : f.records) {
        if (r.q.size() != p_tau.size())
            throw std::invalid_argument("account \"" + r.id + "\": dimension " +
                                        std::to_string(r.q.size()) + " does not match p_tau (" +
                                        std::to_string(p_tau.size()) + ")");
        if (r.equity)
            out.push_back(cross_margin_from_equity(r.id, r.q, *r.equity, r.margin, p_tau));
        else
            out.push_back(make_cross_margin_account(r.id, r.q, r.p_entry, r.margin, p_tau));
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON writers (hand-rolled: stable field order, 17 significant digits)
// ---------------------------------------------------------------------------

inline std::string json_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size() + 2);
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            default:
                if (static_cast<unsigned char>(c) < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\u%04x", c);
                    out += buf;
                } else {
                    out += c;
                }
        }
    }
    return out;
}

inline std::string json_array(const std::vector<double>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += math::format_double(v[i]);
    }
    return s + "]";
}

inline std::string json_matrix(const std::vector<std::vector<double>>& m) {
    std::string s = "[";
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (i) s += ",";
        s += json_array(m[i]);
    }
    return s + "]";
}

/**
 * Single-asset solve report: allocation, water level, objective, diagnostics.
 * A non-finite objective (no scoring model was supplied) serializes as null.
 */
inline std::string solve_report_json(const std::vector<SingleAssetAccount>& accounts,
                                     const WaterfillResult& wf, double objective,
                                     const RiskSpec& spec) {
    std::string ids = "[";
    for (std::size_t i = 0; i < accounts.size(); ++i) {
        if (i) ids += ",";
        ids += "\"" + json_escape(accounts[i].id) + "\"";
    }
    ids += "]";
    const std::string obj =
        std::isfinite(objective) ? math::format_double(objective) : std::string("null");
    return "{\"x\":" + json_array(wf.x) + ",\"t_star\":" + math::format_double(wf.t_star) +
           ",\"objective\":" + obj + ",\"spec\":\"" + json_escape(spec.describe()) +
           "\",\"account_ids\":" + ids +
           ",\"diagnostics\":{\"g_residual\":" + math::format_double(wf.g_residual) + "}}\n";
}

/** Multi-asset solve report: allocation matrix, shadow prices, gap diagnostics. */
inline std::string multi_report_json(const std::vector<CrossMarginAccount>& accounts,
                                     const MultiSolveReport& rep) {
    std::string ids = "[";
    for (std::size_t i = 0; i < accounts.size(); ++i) {
        if (i) ids += ",";
        ids += "\"" + json_escape(accounts[i].id) + "\"";
    }
    ids += "]";
    const double gap = rep.objective - rep.dual_value;
    return "{\"x\":" + json_matrix(rep.x) + ",\"lambda\":" + json_array(rep.lambda) +
           ",\"objective\":" + math::format_double(rep.objective) +
           ",\"dual_value\":" + math::format_double(rep.dual_value) +
           ",\"duality_gap\":" + math::format_double(gap) + ",\"account_ids\":" + ids +
           ",\"diagnostics\":{\"residual_inf\":" + math::format_double(rep.residual_inf) +
           ",\"iterations\":" + std::to_string(rep.iterations) +
           ",\"converged\":" + (rep.converged ? "true" : "false") + "}}\n";
}

/** Factor-target report: multiplier, per-account targets, construction result. */
inline std::string factor_report_json(const std::vector<CrossMarginAccount>& accounts,
                                      const FactorTargets& ft,
                                      const CoverageGraph* graph = nullptr) {
    std::string ids = "[";
    for (std::size_t i = 0; i < accounts.size(); ++i) {
        if (i) ids += ",";
        ids += "\"" + json_escape(accounts[i].id) + "\"";
    }
    ids += "]";
    std::string intervals = "[";
    for (std::size_t i = 0; i < ft.intervals.size(); ++i) {
        if (i) intervals += ",";
        intervals += "[" + math::format_double(ft.intervals[i].lo) + "," +
                     math::format_double(ft.intervals[i].hi) + "]";
    }
    intervals += "]";
    std::string s = "{\"eta_star\":" + math::format_double(ft.eta_star) +
                    ",\"targets\":" + json_array(ft.targets) + ",\"intervals\":" + intervals +
                    ",\"implementable\":" + (ft.implementable ? "true" : "false") +
                    ",\"account_ids\":" + ids;
    if (ft.implementable) s += ",\"x\":" + json_matrix(ft.x_star);
    if (graph) {
        s += ",\"coverage\":{\"vertices\":[";
        for (std::size_t i = 0; i < graph->vertices.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(graph->vertices[i]);
        }
        s += "],\"edges\":[";
        for (std::size_t i = 0; i < graph->edges.size(); ++i) {
            if (i) s += ",";
            s += "[" + std::to_string(graph->edges[i].first) + "," +
                 std::to_string(graph->edges[i].second) + "]";
        }
        s += "],\"covered\":";
        s += graph->covered ? "true" : "false";
        s += ",\"connected\":";
        s += graph->connected ? "true" : "false";
        s += "}";
    }
    return s + "}\n";
}

// ---------------------------------------------------------------------------
// CSV writers
// ---------------------------------------------------------------------------

/** RFC-4180 field quoting: wrap when the value holds a comma, quote, or newline. */
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    return out + "\"";
}

/** Leverage-vs-Q curve rows in the layout `Q,account_id,post_leverage`. */
inline std::string leverage_curve_csv(
    const std::vector<std::tuple<double, std::string, double>>& rows) {
    std::string out = "Q,account_id,post_leverage\n";
    for (const auto& [Q, id, lev] : rows)
        out += math::format_double(Q) + "," + csv_field(id) + "," + math::format_double(lev) + "\n";
    return out;
}

/** Property-harness report: `policy,property,pass,counterexample_json`. */
inline std::string policy_report_csv(const std::vector<PropertySuiteReport>& reports) {
    std::string out = "policy,property,pass,counterexample_json\n";
    for (const auto& r : reports)
        out += csv_field(policy_name(r.policy)) + "," + csv_field(r.property) + "," +
               (r.pass() ? "true" : "false") + "," + csv_field(r.first_counterexample_json) + "\n";
    return out;
}

/** Dual-ascent iteration trace: `iter,residual_inf,g_value`. */
inline std::string trace_csv(const std::vector<DualTraceRow>& trace) {
    std::string out = "iter,residual_inf,g_value\n";
    for (const auto& row : trace)
        out += std::to_string(row.iter) + "," + math::format_double(row.residual_inf) + "," +
               math::format_double(row.g_value) + "\n";
    return out;
}

/** Objective-vs-Q curve rows `Q,objective` (plot-ready series). */
inline std::string objective_curve_csv(const std::vector<std::pair<double, double>>& rows) {
    std::string out = "Q,objective\n";
    for (const auto& [Q, val] : rows)
        out += math::format_double(Q) + "," + math::format_double(val) + "\n";
    return out;
}

/** Serializes bound accounts back to the accounts-file schema (round-trips). */
inline std::string accounts_to_json(const std::vector<SingleAssetAccount>& accounts) {
    std::string s = "[";
    for (std::size_t i = 0; i < accounts.size(); ++i) {
        if (i) s += ",";
        s += "{\"id\":\"" + json_escape(accounts[i].id) + "\",\"q\":" +
             math::format_double(accounts[i].q) +
             ",\"p_entry\":" + math::format_double(accounts[i].p_entry) +
             ",\"margin\":" + math::format_double(accounts[i].m) + "}";
    }
    return s + "]\n";
}

inline std::string accounts_to_json(const std::vector<CrossMarginAccount>& accounts,
                                    const std::vector<double>& p_tau) {
    std::string s = "{\"p_tau\":" + json_array(p_tau) + ",\"accounts\":[";
    for (std::size_t i = 0; i < accounts.size(); ++i) {
        if (i) s += ",";
        s += "{\"id\":\"" + json_escape(accounts[i].id) + "\",\"q\":" + json_array(accounts[i].q) +
             ",\"p_entry\":" + json_array(accounts[i].p_entry) +
             ",\"margin\":" + math::format_double(accounts[i].m) + "}";
    }
    return s + "]}\n";
}

}  // namespace adl::io
