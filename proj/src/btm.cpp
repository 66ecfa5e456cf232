// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include "hetforest/btm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>

#include "hetforest/checkpoint.hpp"
#include "hetforest/kernels.hpp"
#include "hetforest/pool.hpp"
#include "hetforest/rng.hpp"

namespace hetforest {

namespace {

std::string tier_key(Tier t) { return std::string(to_string(t)); }

Tier tier_from_key(const std::string& key) {
    const auto t = parse_tier(key);
    if (!t) {
        throw Error(ErrorCode::ConfigInvalid, "unknown tier '" + key + "'");
    }
    return *t;
}

template <typename V, typename F>
nlohmann::json tier_map_to_json(const std::map<Tier, V>& m, F&& f) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [t, v] : m) {
        j[tier_key(t)] = f(v);
    }
    return j;
}

template <typename V, typename F>
std::map<Tier, V> tier_map_from_json(const nlohmann::json& j, F&& f) {
    std::map<Tier, V> m;
    for (const auto& [k, v] : j.items()) {
        m[tier_from_key(k)] = f(v);
    }
    return m;
}

const std::string& expected_parent(const Forest& forest, Tier tier) {
    if (forest.history.empty()) {
        const auto it = forest.seeds.find(tier);
        if (it == forest.seeds.end()) {
            throw Error(ErrorCode::MissingSeed, "no seed checkpoint for tier " + tier_key(tier));
        }
        return it->second.id;
    }
    const auto it = forest.branch_points.find(tier);
    if (it == forest.branch_points.end()) {
        throw Error(ErrorCode::MissingTierExpert, "no " + tier_key(tier) + " expert from iteration " +
                                                      std::to_string(forest.completed_iterations()));
    }
    return it->second.id;
}

}  // namespace

int branch_step_for(int total_steps, double ratio) {
    if (total_steps <= 0) {
        throw Error(ErrorCode::InvalidArgument, "total_steps must be positive");
    }
    if (!(ratio > 0.0 && ratio <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "branch ratio must lie in (0, 1]");
    }
    const int s = static_cast<int>(std::lround(total_steps * ratio));
    return std::clamp(s, 1, total_steps);
}

std::vector<Tier> Forest::member_tiers() const {
    std::vector<Tier> out;
    for (Tier t : kAllTiers) {
        if (experts.count(t)) {
            out.push_back(t);
        }
    }
    return out;
}

Forest make_forest(BudgetPlan plan, std::map<Tier, ExpertCheckpoint> seeds, DomainPrior prior) {
    if (!verify_budget(plan).pass) {
        throw Error(ErrorCode::BudgetViolation, "plan does not satisfy its compute budget");
    }
    for (const auto& [tier, a] : plan.assignments) {
        const auto it = seeds.find(tier);
        if (it == seeds.end()) {
            throw Error(ErrorCode::MissingSeed, "no seed checkpoint for tier " + tier_key(tier));
        }
        if (!it->second.config().same_architecture(a.config)) {
            throw Error(ErrorCode::InvalidConfig, "seed for tier " + tier_key(tier) +
                                                      " does not match the planned architecture");
        }
    }
    prior.validate(plan.assignments.size());
    Forest f;
    f.plan = std::move(plan);
    f.prior = std::move(prior);
    f.seeds = std::move(seeds);
    return f;
}

ExpertCheckpoint branch(const Forest& forest, Tier tier) {
    if (forest.history.empty()) {
        const auto it = forest.seeds.find(tier);
        if (it == forest.seeds.end()) {
            throw Error(ErrorCode::MissingSeed, "no seed checkpoint for tier " + tier_key(tier));
        }
        return it->second;
    }
    const auto it = forest.branch_points.find(tier);
    if (it == forest.branch_points.end()) {
        throw Error(ErrorCode::MissingTierExpert, "no " + tier_key(tier) + " expert from iteration " +
                                                      std::to_string(forest.completed_iterations()));
    }
    return it->second;
}

TierJob make_tier_job(const Forest& forest, Tier tier, const DomainData& domain, const BtmOptions& options) {
    const auto a = forest.plan.assignments.find(tier);
    if (a == forest.plan.assignments.end()) {
        throw Error(ErrorCode::MissingTier, "plan has no assignment for tier " + tier_key(tier));
    }
    TierJob job;
    job.tier = tier;
    job.iteration = forest.completed_iterations() + 1;
    job.domain = domain.name;
    job.start = branch(forest, tier);
    job.train = domain.train;
    job.schedule = options.schedule;
    job.schedule.total_steps = a->second.iterations;
    job.schedule.validate();
    job.branch_step = branch_step_for(job.schedule.total_steps, options.branch_ratio);
    job.data_seed = derive_seed(options.base_seed, static_cast<std::uint64_t>(job.iteration),
                                static_cast<std::uint64_t>(tier));
    return job;
}

TierResult run_tier_job(const TierJob& job) {
    const auto seq = static_cast<std::size_t>(job.start.config().seq_len);
    const auto batch = std::max<std::size_t>(1, static_cast<std::size_t>(job.schedule.batch_tokens) / seq);
    BatchIterator data(job.train, seq, batch, job.data_seed);
    TrainOptions opts;
    opts.record = LineageEntry{job.iteration, job.domain, {}};
    opts.tier = job.tier;
    auto cks = train(job.start, data, job.schedule, {job.branch_step}, opts);

    TierResult r;
    r.tier = job.tier;
    r.branch_step = job.branch_step;
    r.data_seed = job.data_seed;
    for (auto& ck : cks) {
        if (ck.step == job.branch_step) {
            r.branch_checkpoint = ck;
        }
        if (ck.step == job.schedule.total_steps) {
            r.final_checkpoint = ck;
        }
    }
    return r;
}

IterationFailedError::IterationFailedError(std::map<Tier, std::string> failures, std::vector<TierResult> completed)
    : Error(ErrorCode::IterationFailed,
            [&] {
                std::string msg = std::to_string(failures.size()) + " tier job(s) failed:";
                for (const auto& [t, why] : failures) {
                    msg += " [" + tier_key(t) + "] " + why;
                }
                return msg;
            }()),
      failures_(std::move(failures)),
      completed_(std::move(completed)) {}

Forest train_iteration(const Forest& forest, const std::map<Tier, DomainData>& domain_row,
                       const BtmOptions& options) {
    if (!verify_budget(forest.plan).pass) {
        throw Error(ErrorCode::BudgetViolation, "plan does not satisfy its compute budget");
    }
    for (const auto& [tier, a] : forest.plan.assignments) {
        if (!domain_row.count(tier)) {
            throw Error(ErrorCode::MissingTier, "no domain for tier " + tier_key(tier));
        }
    }
    std::vector<TierJob> jobs;
    for (const auto& [tier, domain] : domain_row) {
        jobs.push_back(make_tier_job(forest, tier, domain, options));
    }

    std::vector<std::optional<TierResult>> results(jobs.size());
    const auto errors = run_pool(jobs.size(), options.workers, [&](std::size_t i) {
        kernels::set_kernel_threads(options.kernel_threads);
        results[i] = run_tier_job(jobs[i]);
    });

    std::vector<TierResult> done;
    std::map<Tier, std::string> failures;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (results[i]) {
            done.push_back(std::move(*results[i]));
        } else {
            failures[jobs[i].tier] = errors[i];
        }
    }
    if (!failures.empty()) {
        throw IterationFailedError(std::move(failures), std::move(done));
    }
    return merge(forest, done);
}

Forest merge(const Forest& forest, const std::vector<TierResult>& trained) {
    std::map<Tier, const TierResult*> by_tier;
    for (const auto& r : trained) {
        if (!by_tier.emplace(r.tier, &r).second) {
            throw Error(ErrorCode::DuplicateTier, "two checkpoints for tier " + tier_key(r.tier));
        }
    }
    for (const auto& [tier, a] : forest.plan.assignments) {
        if (!by_tier.count(tier)) {
            throw Error(ErrorCode::MissingTier, "no trained checkpoint for tier " + tier_key(tier));
        }
    }

    const int iteration = forest.completed_iterations() + 1;
    Forest out = forest;
    IterationRecord rec;
    rec.index = iteration;
    for (const auto& [tier, r] : by_tier) {
        if (!forest.plan.assignments.count(tier)) {
            throw Error(ErrorCode::MissingTier, "tier " + tier_key(tier) + " is not part of the plan");
        }
        const auto& fin = r->final_checkpoint;
        const std::string& parent = expected_parent(forest, tier);
        if (fin.lineage.size() != static_cast<std::size_t>(iteration) || fin.lineage.back().iteration != iteration ||
            fin.lineage.back().parent_id != parent || r->branch_checkpoint.lineage != fin.lineage) {
            throw Error(ErrorCode::LineageMismatch, "checkpoint for tier " + tier_key(tier) +
                                                        " does not descend from the forest's " +
                                                        (iteration == 1 ? "seed" : "previous branch point"));
        }
        if (fin.config().tier != tier || r->branch_checkpoint.config().tier != tier) {
            throw Error(ErrorCode::LineageMismatch, "checkpoint tier label does not match tier " + tier_key(tier));
        }
        rec.domains[tier] = fin.lineage.back().domain;
        rec.final_ids[tier] = fin.id;
        rec.branch_ids[tier] = r->branch_checkpoint.id;
        rec.steps[tier] = fin.step;
        rec.branch_steps[tier] = r->branch_checkpoint.step;
        rec.data_seeds[tier] = r->data_seed;
        out.experts[tier] = fin;
        out.branch_points[tier] = r->branch_checkpoint;
    }
    out.history.push_back(std::move(rec));
    return out;
}

void verify_lineage(const Forest& forest) {
    for (const auto& [tier, expert] : forest.experts) {
        const auto fail = [&](const std::string& why) {
            throw Error(ErrorCode::LineageMismatch, "tier " + tier_key(tier) + ": " + why);
        };
        if (expert.lineage.size() != forest.history.size()) {
            fail("lineage length differs from history length");
        }
        for (std::size_t k = 0; k < expert.lineage.size(); ++k) {
            const auto& entry = expert.lineage[k];
            const auto& rec = forest.history[k];
            if (entry.iteration != rec.index || !rec.domains.count(tier) || rec.domains.at(tier) != entry.domain) {
                fail("entry " + std::to_string(k) + " disagrees with iteration record");
            }
            const std::string want = k == 0 ? (forest.seeds.count(tier) ? forest.seeds.at(tier).id : std::string())
                                            : forest.history[k - 1].branch_ids.at(tier);
            if (entry.parent_id != want) {
                fail("entry " + std::to_string(k) + " parent " + entry.parent_id + " expected " + want);
            }
        }
        if (!forest.history.empty() && forest.history.back().final_ids.at(tier) != expert.id) {
            fail("expert id is not the last recorded final checkpoint");
        }
    }
}

ModelSet ForestModels::members() const {
    ModelSet out;
    for (const auto& m : models) {
        out.push_back(&m);
    }
    return out;
}

ForestModels forest_models(const Forest& forest) {
    ForestModels fm;
    for (Tier t : forest.member_tiers()) {
        fm.models.emplace_back(forest.experts.at(t));
    }
    return fm;
}

nlohmann::json prior_to_json(const DomainPrior& prior) {
    if (prior.kind == DomainPrior::Kind::Uniform) {
        return {{"kind", "uniform"}};
    }
    return {{"kind", "fixed"}, {"values", prior.values}};
}

DomainPrior prior_from_json(const nlohmann::json& j) {
    const auto kind = j.value("kind", std::string("uniform"));
    if (kind == "uniform") {
        return DomainPrior::uniform();
    }
    if (kind == "fixed") {
        return DomainPrior::fixed(j.at("values").get<std::vector<double>>());
    }
    throw Error(ErrorCode::ConfigInvalid, "unknown prior kind '" + kind + "'");
}

void save_forest(const Forest& forest, const std::filesystem::path& manifest_path) {
    const auto dir = manifest_path.parent_path().empty() ? std::filesystem::path(".") : manifest_path.parent_path();
    const auto ck_dir = dir / "checkpoints";
    const auto store = [&](const ExpertCheckpoint& ck) {
        save_checkpoint(ck, ck_dir);
        return "checkpoints/" + ck.id + ".ckpt";
    };

    nlohmann::json history = nlohmann::json::array();
    for (const auto& r : forest.history) {
        const auto ident = [](const auto& v) { return v; };
        history.push_back({{"index", r.index},
                           {"domains", tier_map_to_json(r.domains, ident)},
                           {"final", tier_map_to_json(r.final_ids, ident)},
                           {"branch", tier_map_to_json(r.branch_ids, ident)},
                           {"steps", tier_map_to_json(r.steps, ident)},
                           {"branch_steps", tier_map_to_json(r.branch_steps, ident)},
                           {"data_seeds", tier_map_to_json(r.data_seeds, ident)}});
    }
    const nlohmann::json manifest{{"format", "hetforest-forest-v1"},
                                  {"scenario", std::string(to_string(forest.plan.scenario))},
                                  {"plan", plan_to_json(forest.plan)},
                                  {"prior", prior_to_json(forest.prior)},
                                  {"seeds", tier_map_to_json(forest.seeds, store)},
                                  {"experts", tier_map_to_json(forest.experts, store)},
                                  {"branch_points", tier_map_to_json(forest.branch_points, store)},
                                  {"history", history}};

    std::filesystem::create_directories(dir);
    const auto tmp = manifest_path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) {
            throw Error(ErrorCode::IoError, "cannot write forest manifest '" + tmp + "'");
        }
        out << manifest.dump(2) << '\n';
    }
    std::filesystem::rename(tmp, manifest_path);
}

Forest load_forest(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::MissingArtifact,
                    "forest manifest '" + manifest_path.string() + "' not found; run pretrain and branch-train first");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigInvalid, std::string("forest manifest: ") + e.what());
    }
    const auto dir = manifest_path.parent_path();
    const auto load = [&](const nlohmann::json& p) { return load_checkpoint(dir / p.get<std::string>()); };

    Forest f;
    f.plan = plan_from_json(j.at("plan"));
    f.prior = prior_from_json(j.at("prior"));
    f.seeds = tier_map_from_json<ExpertCheckpoint>(j.at("seeds"), load);
    f.experts = tier_map_from_json<ExpertCheckpoint>(j.at("experts"), load);
    f.branch_points = tier_map_from_json<ExpertCheckpoint>(j.at("branch_points"), load);
    for (const auto& h : j.at("history")) {
        IterationRecord r;
        r.index = h.at("index").get<int>();
        const auto str = [](const nlohmann::json& v) { return v.get<std::string>(); };
        const auto num = [](const nlohmann::json& v) { return v.get<int>(); };
        r.domains = tier_map_from_json<std::string>(h.at("domains"), str);
        r.final_ids = tier_map_from_json<std::string>(h.at("final"), str);
        r.branch_ids = tier_map_from_json<std::string>(h.at("branch"), str);
        r.steps = tier_map_from_json<int>(h.at("steps"), num);
        r.branch_steps = tier_map_from_json<int>(h.at("branch_steps"), num);
        r.data_seeds = tier_map_from_json<std::uint64_t>(
            h.at("data_seeds"), [](const nlohmann::json& v) { return v.get<std::uint64_t>(); });
        f.history.push_back(std::move(r));
    }
    return f;
}

}  // namespace hetforest
