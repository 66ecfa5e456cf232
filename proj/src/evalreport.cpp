// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include "hetforest/evalreport.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "hetforest/corpus.hpp"
#include "hetforest/pool.hpp"

namespace hetforest {

namespace {

std::string scenario_key(Scenario s) { return std::string(to_string(s)); }

Scenario scenario_from_key(const std::string& key) {
    const auto s = parse_scenario(key);
    if (!s) {
        throw Error(ErrorCode::ConfigInvalid, "unknown scenario '" + key + "'");
    }
    return *s;
}

std::string fmt(const char* pattern, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    return out + '"';
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    bool any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
                field += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n') {
            row.push_back(std::move(field));
            field.clear();
            rows.push_back(std::move(row));
            row.clear();
            any = false;
        } else if (c != '\r') {
            field += c;
            any = true;
        }
    }
    if (any) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

void order_domains(std::vector<DomainOutcome>& domains) {
    std::stable_sort(domains.begin(), domains.end(), [](const DomainOutcome& a, const DomainOutcome& b) {
        if (a.kind != b.kind) {
            return a.kind == DomainKind::Trained;
        }
        return a.name < b.name;
    });
}

void count_wins(ComparisonReport& r) {
    r.trained_wins.clear();
    r.eval_only_wins.clear();
    for (Scenario s : r.scenarios) {
        r.trained_wins[s] = 0;
        r.eval_only_wins[s] = 0;
    }
    for (const auto& d : r.domains) {
        auto& wins = d.kind == DomainKind::Trained ? r.trained_wins : r.eval_only_wins;
        for (Scenario s : d.winners) {
            ++wins[s];
        }
    }
}

nlohmann::json report_to_json(const ComparisonReport& r) {
    nlohmann::json scen = nlohmann::json::array();
    for (Scenario s : r.scenarios) {
        scen.push_back(scenario_key(s));
    }
    nlohmann::json domains = nlohmann::json::array();
    for (const auto& d : r.domains) {
        nlohmann::json ppl = nlohmann::json::object();
        for (const auto& [s, v] : d.perplexity) {
            ppl[scenario_key(s)] = v;
        }
        nlohmann::json winners = nlohmann::json::array();
        for (Scenario s : d.winners) {
            winners.push_back(scenario_key(s));
        }
        domains.push_back({{"name", d.name},
                           {"kind", std::string(to_string(d.kind))},
                           {"perplexity", ppl},
                           {"winners", winners},
                           {"margin", d.margin},
                           {"tie", d.tie}});
    }
    const auto wins_json = [](const std::map<Scenario, int>& m) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [s, n] : m) {
            j[scenario_key(s)] = n;
        }
        return j;
    };
    return {{"setup", r.setup},
            {"scenarios", scen},
            {"domains", domains},
            {"wins", {{"trained", wins_json(r.trained_wins)}, {"eval_only", wins_json(r.eval_only_wins)}}}};
}

ComparisonReport report_from_json(const nlohmann::json& j) {
    ComparisonReport r;
    r.setup = j.at("setup").get<std::string>();
    for (const auto& s : j.at("scenarios")) {
        r.scenarios.push_back(scenario_from_key(s.get<std::string>()));
    }
    for (const auto& dj : j.at("domains")) {
        DomainOutcome d;
        d.name = dj.at("name").get<std::string>();
        d.kind = parse_domain_kind(dj.at("kind").get<std::string>());
        for (const auto& [k, v] : dj.at("perplexity").items()) {
            d.perplexity[scenario_from_key(k)] = v.get<double>();
        }
        for (const auto& s : dj.at("winners")) {
            d.winners.push_back(scenario_from_key(s.get<std::string>()));
        }
        d.margin = dj.at("margin").get<double>();
        d.tie = dj.at("tie").get<bool>();
        r.domains.push_back(std::move(d));
    }
    count_wins(r);
    return r;
}

std::string emit_markdown(const std::vector<ComparisonReport>& reports) {
    std::string out = "| Domain |";
    std::string rule = "| --- |";
    for (const auto& r : reports) {
        for (Scenario s : r.scenarios) {
            out += " " + r.setup + " " + scenario_key(s) + " |";
            rule += " ---: |";
        }
    }
    out += "\n" + rule + "\n";

    std::map<std::string, DomainKind> all;
    for (const auto& r : reports) {
        for (const auto& d : r.domains) {
            all.emplace(d.name, d.kind);
        }
    }
    const auto section = [&](DomainKind kind, const char* title) {
        std::vector<std::string> names;
        for (const auto& [name, k] : all) {
            if (k == kind) {
                names.push_back(name);
            }
        }
        if (names.empty()) {
            return;
        }
        out += "| _" + std::string(title) + "_ |";
        for (const auto& r : reports) {
            for (std::size_t i = 0; i < r.scenarios.size(); ++i) {
                out += " |";
            }
        }
        out += "\n";
        for (const auto& name : names) {
            out += "| " + name + " |";
            for (const auto& r : reports) {
                const auto it = std::find_if(r.domains.begin(), r.domains.end(),
                                             [&](const DomainOutcome& d) { return d.name == name; });
                for (Scenario s : r.scenarios) {
                    if (it == r.domains.end() || !it->perplexity.count(s)) {
                        out += " - |";
                        continue;
                    }
                    const std::string cell = fmt("%.2f", it->perplexity.at(s));
                    const bool best = std::find(it->winners.begin(), it->winners.end(), s) != it->winners.end();
                    out += " " + (best ? "**" + cell + "**" : cell) + " |";
                }
            }
            out += "\n";
        }
    };
    section(DomainKind::Trained, "Trained");
    section(DomainKind::EvalOnly, "Evaluation only");

    for (const auto& r : reports) {
        out += "\n" + r.setup + " wins (trained/eval-only):";
        for (Scenario s : r.scenarios) {
            out += " " + scenario_key(s) + " " + std::to_string(r.trained_wins.at(s)) + "/" +
                   std::to_string(r.eval_only_wins.at(s));
        }
        std::string shared;
        for (const auto& d : r.domains) {
            if (d.tie) {
                shared += " " + d.name;
            }
        }
        if (!shared.empty()) {
            out += "; shared:" + shared;
        }
        out += "\n";
    }
    return out;
}

std::string emit_csv(const std::vector<ComparisonReport>& reports) {
    std::string out = "setup,scenario,domain,kind,perplexity,winner,tie,margin\n";
    for (const auto& r : reports) {
        for (const auto& d : r.domains) {
            for (Scenario s : r.scenarios) {
                if (!d.perplexity.count(s)) {
                    continue;
                }
                const bool win = std::find(d.winners.begin(), d.winners.end(), s) != d.winners.end();
                out += csv_field(r.setup) + "," + scenario_key(s) + "," + csv_field(d.name) + "," +
                       std::string(to_string(d.kind)) + "," + fmt("%.17g", d.perplexity.at(s)) + "," +
                       (win ? "1" : "0") + "," + (d.tie ? "1" : "0") + "," + fmt("%.17g", d.margin) + "\n";
            }
        }
    }
    return out;
}

}  // namespace

std::string_view to_string(DomainKind kind) noexcept {
    return kind == DomainKind::Trained ? "trained" : "eval_only";
}

DomainKind parse_domain_kind(std::string_view name) {
    if (name == "trained") {
        return DomainKind::Trained;
    }
    if (name == "eval_only") {
        return DomainKind::EvalOnly;
    }
    throw Error(ErrorCode::ConfigInvalid, "unknown domain kind '" + std::string(name) + "'");
}

EvalResult evaluate_forest(const Forest& forest, const std::vector<EvalDomain>& domains, const std::string& setup,
                           const EvalOptions& options) {
    if (forest.experts.empty()) {
        throw Error(ErrorCode::MissingTierExpert, "forest has no trained experts");
    }
    for (const auto& [tier, a] : forest.plan.assignments) {
        if (!forest.experts.count(tier)) {
            throw Error(ErrorCode::MissingTierExpert, "forest has no " + std::string(to_string(tier)) + " expert");
        }
    }
    std::set<std::string> names;
    for (const auto& d : domains) {
        if (!names.insert(d.name).second) {
            throw Error(ErrorCode::InvalidArgument, "domain '" + d.name + "' listed twice");
        }
        if (d.test.empty()) {
            throw Error(ErrorCode::EmptyEval, "domain '" + d.name + "' has no held-out tokens");
        }
    }

    const ForestModels models = forest_models(forest);
    const ModelSet members = models.members();
    std::vector<double> ppl(domains.size());
    const auto errors = run_pool(domains.size(), options.workers, [&](std::size_t i) {
        ppl[i] = corpus_perplexity(members, forest.prior, documents(domains[i].test, options.document_tokens),
                                   options.reset_per_document);
    });
    for (std::size_t i = 0; i < domains.size(); ++i) {
        if (!errors[i].empty()) {
            throw Error(ErrorCode::EmptyEval, "domain '" + domains[i].name + "': " + errors[i]);
        }
    }

    EvalResult r;
    r.setup = setup;
    r.scenario = forest.plan.scenario;
    for (std::size_t i = 0; i < domains.size(); ++i) {
        r.perplexity[domains[i].name] = ppl[i];
        r.kinds[domains[i].name] = domains[i].kind;
    }
    nlohmann::json experts = nlohmann::json::object();
    nlohmann::json steps = nlohmann::json::object();
    for (const auto& [tier, ck] : forest.experts) {
        experts[std::string(to_string(tier))] = ck.id;
        steps[std::string(to_string(tier))] = ck.step;
    }
    nlohmann::json seeds = nlohmann::json::array();
    for (const auto& h : forest.history) {
        nlohmann::json row = nlohmann::json::object();
        for (const auto& [tier, s] : h.data_seeds) {
            row[std::string(to_string(tier))] = s;
        }
        seeds.push_back(row);
    }
    r.metadata = {{"iteration", forest.completed_iterations()},
                  {"experts", experts},
                  {"steps", steps},
                  {"data_seeds", seeds},
                  {"document_tokens", options.document_tokens},
                  {"reset_per_document", options.reset_per_document},
                  {"prior", prior_to_json(forest.prior)}};
    return r;
}

nlohmann::json result_to_json(const EvalResult& r) {
    nlohmann::json domains = nlohmann::json::object();
    for (const auto& [name, p] : r.perplexity) {
        const auto k = r.kinds.find(name);
        domains[name] = {{"perplexity", p},
                         {"kind", std::string(to_string(k == r.kinds.end() ? DomainKind::Trained : k->second))}};
    }
    return {{"format", "hetforest-eval-v1"},
            {"setup", r.setup},
            {"scenario", scenario_key(r.scenario)},
            {"domains", domains},
            {"metadata", r.metadata}};
}

EvalResult result_from_json(const nlohmann::json& j) {
    EvalResult r;
    r.setup = j.at("setup").get<std::string>();
    r.scenario = scenario_from_key(j.at("scenario").get<std::string>());
    for (const auto& [name, d] : j.at("domains").items()) {
        r.perplexity[name] = d.at("perplexity").get<double>();
        r.kinds[name] = parse_domain_kind(d.at("kind").get<std::string>());
    }
    r.metadata = j.value("metadata", nlohmann::json::object());
    return r;
}

ComparisonReport compare(const std::vector<EvalResult>& results) {
    if (results.empty()) {
        throw Error(ErrorCode::InvalidArgument, "nothing to compare");
    }
    std::map<Scenario, const EvalResult*> by_scenario;
    for (const auto& r : results) {
        if (r.setup != results.front().setup) {
            throw Error(ErrorCode::DomainSetMismatch,
                        "results mix setups '" + results.front().setup + "' and '" + r.setup + "'");
        }
        if (r.kinds != results.front().kinds || r.perplexity.size() != results.front().perplexity.size()) {
            throw Error(ErrorCode::DomainSetMismatch, "results do not share the same domain set");
        }
        for (const auto& [name, p] : r.perplexity) {
            if (!results.front().perplexity.count(name)) {
                throw Error(ErrorCode::DomainSetMismatch, "domain '" + name + "' is not in every result");
            }
            if (!(p >= 1.0)) {
                throw Error(ErrorCode::InvalidPerplexity, "perplexity of '" + name + "' is below 1");
            }
        }
        if (!by_scenario.emplace(r.scenario, &r).second) {
            throw Error(ErrorCode::InvalidArgument, "scenario " + scenario_key(r.scenario) + " appears twice");
        }
    }

    ComparisonReport report;
    report.setup = results.front().setup;
    for (Scenario s : kAllScenarios) {
        if (by_scenario.count(s)) {
            report.scenarios.push_back(s);
        }
    }
    for (const auto& [name, kind] : results.front().kinds) {
        DomainOutcome d;
        d.name = name;
        d.kind = kind;
        double best = 0.0;
        bool first = true;
        for (Scenario s : report.scenarios) {
            const double p = by_scenario.at(s)->perplexity.at(name);
            d.perplexity[s] = p;
            if (first || p < best) {
                best = p;
                first = false;
            }
        }
        double runner_up = best;
        bool has_loser = false;
        for (Scenario s : report.scenarios) {
            const double p = d.perplexity.at(s);
            if (p - best <= kTieThreshold + 1e-12) {
                d.winners.push_back(s);
            } else if (!has_loser || p < runner_up) {
                runner_up = p;
                has_loser = true;
            }
        }
        d.tie = d.winners.size() > 1;
        d.margin = has_loser ? runner_up - best : 0.0;
        report.domains.push_back(std::move(d));
    }
    order_domains(report.domains);
    count_wins(report);
    return report;
}

ReportFormat parse_report_format(std::string_view name) {
    if (name == "markdown" || name == "md") {
        return ReportFormat::Markdown;
    }
    if (name == "csv") {
        return ReportFormat::Csv;
    }
    if (name == "json") {
        return ReportFormat::Json;
    }
    throw Error(ErrorCode::InvalidArgument, "unknown report format '" + std::string(name) + "'");
}

std::string emit(const std::vector<ComparisonReport>& reports, ReportFormat format) {
    switch (format) {
        case ReportFormat::Markdown: return emit_markdown(reports);
        case ReportFormat::Csv: return emit_csv(reports);
        case ReportFormat::Json: {
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& r : reports) {
                arr.push_back(report_to_json(r));
            }
            return nlohmann::json{{"format", "hetforest-report-v1"}, {"reports", arr}}.dump(2) + "\n";
        }
    }
    return {};
}

std::vector<ComparisonReport> reports_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigInvalid, std::string("report: ") + e.what());
    }
    std::vector<ComparisonReport> out;
    for (const auto& r : j.at("reports")) {
        out.push_back(report_from_json(r));
    }
    return out;
}

std::vector<ComparisonReport> reports_from_csv(const std::string& text) {
    const auto rows = parse_csv(text);
    if (rows.empty() || rows.front().size() != 8 || rows.front()[0] != "setup") {
        throw Error(ErrorCode::ConfigInvalid, "report CSV has an unexpected header");
    }
    std::vector<ComparisonReport> out;
    std::map<std::string, std::size_t> setup_index;
    std::vector<std::map<std::string, DomainOutcome>> domains;
    std::vector<std::set<Scenario>> scenarios;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& row = rows[i];
        if (row.size() != 8) {
            throw Error(ErrorCode::ConfigInvalid, "report CSV row " + std::to_string(i) + " has the wrong width");
        }
        auto [it, added] = setup_index.emplace(row[0], out.size());
        if (added) {
            out.emplace_back().setup = row[0];
            domains.emplace_back();
            scenarios.emplace_back();
        }
        const std::size_t k = it->second;
        const Scenario s = scenario_from_key(row[1]);
        scenarios[k].insert(s);
        auto& d = domains[k][row[2]];
        d.name = row[2];
        d.kind = parse_domain_kind(row[3]);
        d.perplexity[s] = std::stod(row[4]);
        if (row[5] == "1") {
            d.winners.push_back(s);
        }
        d.tie = row[6] == "1";
        d.margin = std::stod(row[7]);
    }
    for (std::size_t k = 0; k < out.size(); ++k) {
        for (Scenario s : kAllScenarios) {
            if (scenarios[k].count(s)) {
                out[k].scenarios.push_back(s);
            }
        }
        for (auto& [name, d] : domains[k]) {
            std::vector<Scenario> ordered;
            for (Scenario s : kAllScenarios) {
                if (std::find(d.winners.begin(), d.winners.end(), s) != d.winners.end()) {
                    ordered.push_back(s);
                }
            }
            d.winners = std::move(ordered);
            out[k].domains.push_back(std::move(d));
        }
        order_domains(out[k].domains);
        count_wins(out[k]);
    }
    return out;
}

}  // namespace hetforest
