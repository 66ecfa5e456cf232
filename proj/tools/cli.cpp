// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include <CLI11.hpp>

#include "hetforest/budget.hpp"
#include "hetforest/evalreport.hpp"
#include "hetforest/experiment.hpp"
#include "hetforest/synthetic.hpp"

namespace hetforest::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers;
    std::optional<double> holdout;
};

void add_common(CLI::App* app, Common& c, bool needs_config = true) {
    auto* opt = app->add_option("-c,--config", c.config, "Experiment config (YAML)");
    if (needs_config) {
        opt->required();
    }
    app->add_option("--set", c.sets, "Override a config key, e.g. --set budget.iter_m=300");
    app->add_option("--out-dir", c.out_dir, "Output directory");
    app->add_option("--seed", c.seed, "Base random seed");
    app->add_option("--workers", c.workers, "Parallel training/evaluation jobs")->check(CLI::PositiveNumber);
    app->add_option("--holdout-fraction", c.holdout, "Held-out fraction of every domain")
        ->check(CLI::Range(0.0, 1.0));
}

std::vector<std::string> overrides_of(const Common& c) {
    std::vector<std::string> o = c.sets;
    if (!c.out_dir.empty()) {
        o.push_back("run.out_dir=" + fs::absolute(c.out_dir).string());
    }
    if (c.seed) {
        o.push_back("run.seed=" + std::to_string(*c.seed));
    }
    if (c.workers) {
        o.push_back("run.workers=" + std::to_string(*c.workers));
    }
    if (c.holdout) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", *c.holdout);
        o.push_back(std::string("data.holdout_fraction=") + buf);
    }
    return o;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::MissingArtifact, "'" + p.string() + "' not found");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void print_plan(const BudgetPlan& plan, std::ostream& out) {
    const auto report = verify_budget(plan);
    char line[160];
    out << "scenario " << to_string(plan.scenario) << "\n";
    std::snprintf(line, sizeof line, "%-10s %7s %7s %6s %7s %12s %11s\n", "tier", "hidden", "interm", "heads",
                  "layers", "ffn_total", "iterations");
    out << line;
    for (const auto& [tier, a] : plan.assignments) {
        std::snprintf(line, sizeof line, "%-10s %7d %7d %6d %7d %12lld %11d\n", std::string(to_string(tier)).c_str(),
                      a.config.hidden_size, a.config.intermediate_size, a.config.num_heads, a.config.num_layers,
                      static_cast<long long>(ffn_total(a.config)), a.iterations);
        out << line;
    }
    out << "reference:";
    for (const auto& [tier, cfg] : plan.reference_configs) {
        out << " " << to_string(tier) << " ffn " << ffn_total(cfg) << " x " << plan.reference_iterations.at(tier);
        out << (tier == Tier::Difficult ? "" : ",");
    }
    out << "\n";
    std::snprintf(line, sizeof line, "small-pair deviation %.6f\nlarge-pair deviation %.6f\n", report.small_deviation,
                  report.large_deviation);
    out << line;
    std::snprintf(line, sizeof line, "total compute %.6g\nbudget %s at tolerance %.4g\n", report.total_compute,
                  report.pass ? "PASS" : "FAIL", report.tolerance);
    out << line;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Heterogeneous expert forests: pretrain, budget, branch-train-merge, evaluate, report"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "hetforest 0.1.0");

    // synth
    std::string synth_dir = "data";
    std::size_t synth_bytes = 200 * 1024;
    std::uint64_t synth_seed = 7;
    auto* synth = app.add_subcommand("synth", "Write a synthetic demo corpus and registry");
    synth->add_option("--dir", synth_dir, "Destination directory");
    synth->add_option("--bytes", synth_bytes, "Bytes per trained domain");
    synth->add_option("--seed", synth_seed, "Generator seed");

    // plan
    Common plan_c;
    std::string plan_setup;
    std::string plan_scenario;
    bool plan_json = false;
    auto* plan = app.add_subcommand("plan", "Build the scenario's budget plan and print its verification");
    add_common(plan, plan_c, false);
    plan->add_option("--setup", plan_setup, "Reference setup instead of a config (tiny-spread, tiny-close, small-close)");
    plan->add_option("--scenario", plan_scenario, "Scenario for --setup (default MHoIHe)");
    plan->add_flag("--json", plan_json, "Print the plan and report as JSON");

    Common pre_c;
    auto* pretrain = app.add_subcommand("pretrain", "Pretrain the seed models and assign domain tiers");
    add_common(pretrain, pre_c);

    Common bt_c;
    int iteration = 1;
    auto* bt = app.add_subcommand("branch-train", "Run one branch-train-merge iteration");
    add_common(bt, bt_c);
    bt->add_option("--iteration", iteration, "BTM iteration (1-based)")->required()->check(CLI::PositiveNumber);

    Common ev_c;
    std::string forest_path;
    std::string domains_path;
    std::string results_path;
    std::string eval_step;
    std::optional<int> eval_iteration;
    auto* evaluate = app.add_subcommand("evaluate", "Ensemble perplexity of the forest on every domain's test split");
    add_common(evaluate, ev_c);
    evaluate->add_option("--forest", forest_path, "Forest manifest (default <out-dir>/forest.json)");
    evaluate->add_option("--domains", domains_path, "Domain registry (default from config)");
    evaluate->add_option("--out", results_path, "Results file (default <out-dir>/results.json)");
    evaluate->add_option("--eval-step", eval_step, "Evaluate 'final' or 'branch' checkpoints")
        ->check(CLI::IsMember({"final", "branch"}));
    evaluate->add_option("--iteration", eval_iteration, "Evaluate the forest as of this iteration");

    std::vector<std::string> inputs;
    std::string format = "markdown";
    std::string report_out;
    auto* report = app.add_subcommand("report", "Compare evaluation results across scenarios");
    report->add_option("--inputs", inputs, "results.json files")->required();
    report->add_option("--format", format, "markdown, csv or json")->check(CLI::IsMember({"markdown", "csv", "json"}));
    report->add_option("--out", report_out, "Write to a file instead of stdout");

    Common pipe_c;
    auto* pipeline = app.add_subcommand("pipeline", "pretrain, every branch-train iteration, then evaluate");
    add_common(pipeline, pipe_c);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (synth->parsed()) {
            const auto reg = write_demo_corpus(synth_dir, synth_bytes, synth_seed);
            out << "wrote " << reg.string() << "\n";
            return 0;
        }

        if (plan->parsed()) {
            BudgetPlan p;
            if (!plan_setup.empty()) {
                const auto& setups = reference_setups();
                const auto it = std::find_if(setups.begin(), setups.end(),
                                             [&](const SetupSpec& s) { return s.name == plan_setup; });
                if (it == setups.end()) {
                    throw Error(ErrorCode::ConfigInvalid, "unknown setup '" + plan_setup + "'");
                }
                const auto scen = parse_scenario(plan_scenario.empty() ? "MHoIHe" : plan_scenario);
                if (!scen) {
                    throw Error(ErrorCode::ConfigInvalid, "unknown scenario '" + plan_scenario + "'");
                }
                p = make_plan(*scen,
                              {{Tier::Easy, seed_table_config(it->small)},
                               {Tier::Moderate, seed_table_config(it->medium)},
                               {Tier::Difficult, seed_table_config(it->large)}},
                              it->iter_m);
            } else if (!plan_c.config.empty()) {
                auto o = overrides_of(plan_c);
                if (!plan_scenario.empty()) {
                    o.push_back("scenario=" + plan_scenario);
                }
                p = experiment_plan(load_experiment_config(plan_c.config, o));
            } else {
                throw Error(ErrorCode::ConfigInvalid, "plan needs --config or --setup");
            }
            if (plan_json) {
                out << nlohmann::json{{"plan", plan_to_json(p)}, {"report", report_to_json(verify_budget(p))}}.dump(2)
                    << "\n";
            } else {
                print_plan(p, out);
            }
            return verify_budget(p).pass ? 0 : 1;
        }

        if (pretrain->parsed()) {
            const auto o = overrides_of(pre_c);
            const auto cfg = load_experiment_config(pre_c.config, o);
            const auto seeds = run_pretrain(cfg);
            const auto tiers = run_assign_tiers(cfg);
            nlohmann::json details = nlohmann::json::object();
            for (const auto& [tier, ck] : seeds) {
                details["seeds"][std::string(to_string(tier))] = ck.id;
                out << "seed " << to_string(tier) << " " << ck.id << "\n";
            }
            for (const auto& [name, tier] : tiers) {
                out << "domain " << name << " -> " << to_string(tier) << "\n";
            }
            write_provenance(cfg, "pretrain", o, details);
            return 0;
        }

        if (bt->parsed()) {
            const auto o = overrides_of(bt_c);
            const auto cfg = load_experiment_config(bt_c.config, o);
            const Forest f = run_branch_train(cfg, iteration);
            nlohmann::json details{{"iteration", iteration}};
            const auto& rec = f.history.at(static_cast<std::size_t>(iteration - 1));
            for (const auto& [tier, id] : rec.final_ids) {
                out << "iteration " << iteration << " " << to_string(tier) << " " << rec.domains.at(tier) << " steps "
                    << rec.steps.at(tier) << " branch@" << rec.branch_steps.at(tier) << " " << id << "\n";
                details["experts"][std::string(to_string(tier))] = id;
            }
            write_provenance(cfg, "branch-train-" + std::to_string(iteration), o, details);
            return 0;
        }

        if (evaluate->parsed()) {
            auto o = overrides_of(ev_c);
            if (!domains_path.empty()) {
                o.push_back("data.registry=" + fs::absolute(domains_path).string());
            }
            if (!eval_step.empty()) {
                o.push_back("eval.step=" + eval_step);
            }
            if (eval_iteration) {
                o.push_back("eval.iteration=" + std::to_string(*eval_iteration));
            }
            const auto cfg = load_experiment_config(ev_c.config, o);
            const fs::path manifest = forest_path.empty() ? cfg.out_dir / "forest.json" : fs::path(forest_path);
            const fs::path results = results_path.empty() ? cfg.out_dir / "results.json" : fs::path(results_path);
            const auto r = run_evaluate(cfg, manifest, results);
            for (const auto& [name, ppl] : r.perplexity) {
                char line[128];
                std::snprintf(line, sizeof line, "%-24s %-9s %10.4f\n", name.c_str(),
                              std::string(to_string(r.kinds.at(name))).c_str(), ppl);
                out << line;
            }
            write_provenance(cfg, "evaluate", o, {{"forest", manifest.string()}, {"results", results.string()}});
            return 0;
        }

        if (report->parsed()) {
            std::vector<std::string> order;
            std::map<std::string, std::vector<EvalResult>> by_setup;
            for (const auto& in : inputs) {
                auto r = result_from_json(nlohmann::json::parse(read_file(in)));
                if (!by_setup.count(r.setup)) {
                    order.push_back(r.setup);
                }
                by_setup[r.setup].push_back(std::move(r));
            }
            std::vector<ComparisonReport> reports;
            for (const auto& s : order) {
                reports.push_back(compare(by_setup.at(s)));
            }
            const std::string text = emit(reports, parse_report_format(format));
            if (report_out.empty()) {
                out << text;
            } else {
                std::ofstream f(report_out, std::ios::binary);
                if (!f) {
                    throw Error(ErrorCode::IoError, "cannot write '" + report_out + "'");
                }
                f << text;
            }
            return 0;
        }

        if (pipeline->parsed()) {
            const auto o = overrides_of(pipe_c);
            const auto cfg = load_experiment_config(pipe_c.config, o);
            const auto r = run_pipeline(cfg);
            for (const auto& [name, ppl] : r.perplexity) {
                char line[128];
                std::snprintf(line, sizeof line, "%-24s %10.4f\n", name.c_str(), ppl);
                out << line;
            }
            write_provenance(cfg, "pipeline", o);
            return 0;
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace hetforest::cli
