// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "hetforest/btm.hpp"
#include "hetforest/checkpoint.hpp"
#include "hetforest/synthetic.hpp"
#include "support.hpp"

using namespace hetforest;
using hetforest::testing::ScratchDir;

namespace {

ExpertConfig tier_config(int intermediate) {
    ExpertConfig c;
    c.hidden_size = 16;
    c.intermediate_size = intermediate;
    c.num_heads = 2;
    c.num_layers = 1;
    c.seq_len = 16;
    return c;
}

std::map<Tier, ExpertConfig> tier_configs() {
    return {{Tier::Easy, tier_config(16)}, {Tier::Moderate, tier_config(32)}, {Tier::Difficult, tier_config(48)}};
}

std::map<Tier, ExpertCheckpoint> seeds_for(const BudgetPlan& plan) {
    std::map<Tier, ExpertCheckpoint> seeds;
    for (const auto& [tier, a] : plan.assignments) {
        seeds[tier] = make_checkpoint(init_model<float>(a.config, 100 + static_cast<int>(tier)), 0, {});
    }
    return seeds;
}

struct Corpora {
    std::map<std::string, std::vector<Token>> tokens;

    Corpora() {
        tokens["periodic"] = tokenize(generate_periodic("abcdabce", 3000, 0.02, 1));
        tokens["letters"] = tokenize(generate_markov({byte_range('a', 26), 1, 1.5, 2}, 3000, 3));
        tokens["symbols"] = tokenize(generate_markov({byte_range('!', 64), 2, 0.6, 4}, 3000, 5));
        tokens["digits"] = tokenize(generate_markov({byte_range('0', 10), 1, 1.0, 6}, 3000, 7));
    }

    std::map<Tier, DomainData> row(const std::string& e, const std::string& m, const std::string& d) const {
        return {{Tier::Easy, {e, tokens.at(e)}}, {Tier::Moderate, {m, tokens.at(m)}},
                {Tier::Difficult, {d, tokens.at(d)}}};
    }
};

BtmOptions options(int workers) {
    BtmOptions o;
    o.schedule.warmup_steps = 2;
    o.schedule.max_lr = 1e-2;
    o.schedule.min_lr = 1e-3;
    o.schedule.batch_tokens = 32;
    o.base_seed = 17;
    o.workers = workers;
    return o;
}

Forest fresh_forest(Scenario scenario = Scenario::MHeIHo) {
    auto plan = make_plan(scenario, tier_configs(), 12, 2);
    auto seeds = seeds_for(plan);
    return make_forest(std::move(plan), std::move(seeds));
}

std::map<Tier, std::string> final_ids(const Forest& f) {
    std::map<Tier, std::string> ids;
    for (const auto& [t, e] : f.experts) {
        ids[t] = e.id;
    }
    return ids;
}

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no hetforest::Error thrown";
    return ErrorCode::IoError;
}

}  // namespace

TEST(BranchStep, RoundingAndClamp) {
    EXPECT_EQ(branch_step_for(600), 400);
    EXPECT_EQ(branch_step_for(200), 133);
    EXPECT_EQ(branch_step_for(12), 8);
    EXPECT_EQ(branch_step_for(1), 1);
    EXPECT_EQ(branch_step_for(2), 1);
    EXPECT_EQ(branch_step_for(10, 1.0), 10);
    EXPECT_THROW(branch_step_for(0), Error);
    EXPECT_THROW(branch_step_for(10, 0.0), Error);
}

TEST(MakeForest, Errors) {
    auto plan = make_plan(Scenario::MHeIHo, tier_configs(), 12, 2);
    auto seeds = seeds_for(plan);
    auto missing = seeds;
    missing.erase(Tier::Difficult);
    EXPECT_EQ(code_of([&] { make_forest(plan, missing); }), ErrorCode::MissingSeed);
    auto wrong = seeds;
    wrong[Tier::Easy] = seeds.at(Tier::Moderate);
    EXPECT_EQ(code_of([&] { make_forest(plan, wrong); }), ErrorCode::InvalidConfig);
    auto broken = plan;
    broken.reference_iterations[Tier::Easy] = 1;
    EXPECT_EQ(code_of([&] { make_forest(broken, seeds); }), ErrorCode::BudgetViolation);
    EXPECT_EQ(code_of([&] { make_forest(plan, seeds, DomainPrior::fixed({0.5, 0.5})); }),
              ErrorCode::DimensionMismatch);
    EXPECT_NO_THROW(make_forest(plan, seeds));
}

TEST(TrainIteration, FirstIterationBranchesFromSeeds) {
    const Corpora data;
    const auto forest = fresh_forest();
    const auto f1 = train_iteration(forest, data.row("periodic", "letters", "symbols"), options(1));
    ASSERT_EQ(f1.completed_iterations(), 1);
    EXPECT_EQ(f1.member_tiers(), (std::vector<Tier>{Tier::Easy, Tier::Moderate, Tier::Difficult}));
    const auto& rec = f1.history[0];
    for (Tier t : kAllTiers) {
        const auto& e = f1.experts.at(t);
        EXPECT_EQ(e.config().tier, t);
        EXPECT_EQ(e.step, 12);
        ASSERT_EQ(e.lineage.size(), 1u);
        EXPECT_EQ(e.lineage[0].parent_id, forest.seeds.at(t).id);
        EXPECT_EQ(e.config().intermediate_size, tier_configs().at(t).intermediate_size);
        EXPECT_EQ(f1.branch_points.at(t).step, 8);
        EXPECT_EQ(rec.data_seeds.at(t), derive_seed(17, 1, static_cast<std::uint64_t>(t)));
        EXPECT_EQ(rec.final_ids.at(t), e.id);
    }
    EXPECT_EQ(rec.domains.at(Tier::Difficult), "symbols");
    EXPECT_NO_THROW(verify_lineage(f1));
}

TEST(TrainIteration, WorkerCountInvariant) {
    const Corpora data;
    const auto row = data.row("periodic", "letters", "symbols");
    const auto a = train_iteration(fresh_forest(), row, options(1));
    const auto b = train_iteration(fresh_forest(), row, options(3));
    auto opts = options(2);
    opts.kernel_threads = 2;
    const auto c = train_iteration(fresh_forest(), row, opts);
    EXPECT_EQ(final_ids(a), final_ids(b));
    EXPECT_EQ(final_ids(a), final_ids(c));
    EXPECT_EQ(a.history, b.history);
}

TEST(TrainIteration, SingleTierRerunReproducesExpert) {
    const Corpora data;
    const auto row = data.row("periodic", "letters", "symbols");
    const auto forest = fresh_forest();
    const auto f1 = train_iteration(forest, row, options(3));
    for (Tier t : kAllTiers) {
        const auto r = run_tier_job(make_tier_job(forest, t, row.at(t), options(1)));
        EXPECT_EQ(r.final_checkpoint.id, f1.experts.at(t).id);
        EXPECT_EQ(r.branch_checkpoint.id, f1.branch_points.at(t).id);
    }
}

TEST(TrainIteration, NoCrossTalkBetweenTiers) {
    const Corpora data;
    const auto base = train_iteration(fresh_forest(), data.row("periodic", "letters", "symbols"), options(3));
    const auto perturbed = train_iteration(fresh_forest(), data.row("periodic", "letters", "digits"), options(3));
    EXPECT_EQ(base.experts.at(Tier::Easy).id, perturbed.experts.at(Tier::Easy).id);
    EXPECT_EQ(base.experts.at(Tier::Moderate).id, perturbed.experts.at(Tier::Moderate).id);
    EXPECT_NE(base.experts.at(Tier::Difficult).id, perturbed.experts.at(Tier::Difficult).id);
}

TEST(TrainIteration, ThreeIterationLineage) {
    const Corpora data;
    auto f = fresh_forest(Scenario::MHoIHe);
    const std::vector<std::map<Tier, DomainData>> rows{data.row("periodic", "letters", "symbols"),
                                                       data.row("letters", "digits", "symbols"),
                                                       data.row("digits", "periodic", "letters")};
    for (const auto& row : rows) {
        const auto prev = f;
        f = train_iteration(f, row, options(2));
        for (Tier t : kAllTiers) {
            const auto& entry = f.experts.at(t).lineage.back();
            const std::string want = prev.history.empty() ? prev.seeds.at(t).id : prev.branch_points.at(t).id;
            EXPECT_EQ(entry.parent_id, want);
            EXPECT_EQ(entry.iteration, f.completed_iterations());
        }
    }
    EXPECT_NO_THROW(verify_lineage(f));
    EXPECT_EQ(f.experts.at(Tier::Easy).lineage.size(), 3u);
    EXPECT_EQ(f.history[2].domains.at(Tier::Moderate), "periodic");
    // MHoIHe: every tier shares the moderate architecture but trains for different lengths.
    EXPECT_LT(f.history[0].steps.at(Tier::Easy), f.history[0].steps.at(Tier::Difficult));

    auto tampered = f;
    tampered.history[1].branch_ids[Tier::Easy] = std::string(64, '0');
    EXPECT_EQ(code_of([&] { verify_lineage(tampered); }), ErrorCode::LineageMismatch);
    tampered = f;
    tampered.history[2].domains[Tier::Moderate] = "other";
    EXPECT_EQ(code_of([&] { verify_lineage(tampered); }), ErrorCode::LineageMismatch);
}

TEST(Merge, RejectsForeignOrIncompleteResults) {
    const Corpora data;
    const auto row = data.row("periodic", "letters", "symbols");
    const auto forest = fresh_forest();
    std::vector<TierResult> results;
    for (Tier t : kAllTiers) {
        results.push_back(run_tier_job(make_tier_job(forest, t, row.at(t), options(1))));
    }
    EXPECT_NO_THROW(merge(forest, results));

    auto dup = results;
    dup.push_back(results[0]);
    EXPECT_EQ(code_of([&] { merge(forest, dup); }), ErrorCode::DuplicateTier);
    auto partial = results;
    partial.pop_back();
    EXPECT_EQ(code_of([&] { merge(forest, partial); }), ErrorCode::MissingTier);

    // A checkpoint trained from some other starting point.
    auto foreign = results;
    auto start = forest.seeds.at(Tier::Easy);
    start.params.values[0] += 1.0f;
    start = make_checkpoint(start.params, 0, {});
    auto job = make_tier_job(forest, Tier::Easy, row.at(Tier::Easy), options(1));
    job.start = start;
    foreign[0] = run_tier_job(job);
    EXPECT_EQ(code_of([&] { merge(forest, foreign); }), ErrorCode::LineageMismatch);

    // Tier label swapped.
    auto swapped = results;
    swapped[0].tier = Tier::Moderate;
    swapped[1].tier = Tier::Easy;
    EXPECT_EQ(code_of([&] { merge(forest, swapped); }), ErrorCode::LineageMismatch);

    // Merging iteration-1 results into a forest that already completed iteration 1.
    const auto f1 = merge(forest, results);
    EXPECT_EQ(code_of([&] { merge(f1, results); }), ErrorCode::LineageMismatch);
}

TEST(Branch, MissingExpertAfterFirstIteration) {
    const Corpora data;
    auto f1 = train_iteration(fresh_forest(), data.row("periodic", "letters", "symbols"), options(1));
    EXPECT_EQ(branch(f1, Tier::Easy).id, f1.branch_points.at(Tier::Easy).id);
    f1.branch_points.erase(Tier::Easy);
    EXPECT_EQ(code_of([&] { branch(f1, Tier::Easy); }), ErrorCode::MissingTierExpert);
    auto bare = fresh_forest();
    bare.seeds.erase(Tier::Easy);
    EXPECT_EQ(code_of([&] { branch(bare, Tier::Easy); }), ErrorCode::MissingSeed);
}

TEST(TrainIteration, FailureIsolatedToOneTier) {
    const Corpora data;
    auto row = data.row("periodic", "letters", "symbols");
    const std::vector<Token> tiny(8, 'x');
    row[Tier::Moderate] = {"tiny", tiny};
    try {
        train_iteration(fresh_forest(), row, options(3));
        FAIL() << "expected IterationFailedError";
    } catch (const IterationFailedError& e) {
        EXPECT_EQ(e.code(), ErrorCode::IterationFailed);
        ASSERT_EQ(e.failures().size(), 1u);
        EXPECT_TRUE(e.failures().count(Tier::Moderate));
        EXPECT_NE(e.failures().at(Tier::Moderate).find("SequenceTooLong"), std::string::npos);
        EXPECT_EQ(e.completed().size(), 2u);
    }
    row.erase(Tier::Easy);
    EXPECT_EQ(code_of([&] { train_iteration(fresh_forest(), row, options(1)); }), ErrorCode::MissingTier);
}

TEST(ForestManifest, SaveLoadRoundTrip) {
    ScratchDir dir("forest");
    const Corpora data;
    auto f = train_iteration(fresh_forest(), data.row("periodic", "letters", "symbols"), options(2));
    f = train_iteration(f, data.row("letters", "digits", "symbols"), options(2));
    save_forest(f, dir / "forest.json");
    const std::string first = hetforest::testing::read_file(dir / "forest.json");
    const auto back = load_forest(dir / "forest.json");
    EXPECT_EQ(final_ids(back), final_ids(f));
    EXPECT_EQ(back.history, f.history);
    EXPECT_EQ(back.seeds.at(Tier::Easy).id, f.seeds.at(Tier::Easy).id);
    EXPECT_EQ(back.branch_points.at(Tier::Difficult).id, f.branch_points.at(Tier::Difficult).id);
    EXPECT_NO_THROW(verify_lineage(back));
    save_forest(back, dir / "again.json");
    EXPECT_EQ(hetforest::testing::read_file(dir / "again.json"), first);
    const auto j = nlohmann::json::parse(first);
    EXPECT_EQ(j.at("format"), "hetforest-forest-v1");
    EXPECT_TRUE(std::filesystem::exists(dir.path() / j.at("experts").at("easy").get<std::string>()));
    EXPECT_EQ(code_of([&] { load_forest(dir / "nope.json"); }), ErrorCode::MissingArtifact);
}

TEST(ForestModels, EnsembleOrderFollowsTiers) {
    const Corpora data;
    const auto f = train_iteration(fresh_forest(), data.row("periodic", "letters", "symbols"), options(1));
    const auto fm = forest_models(f);
    const auto members = fm.members();
    ASSERT_EQ(members.size(), 3u);
    const std::vector<Token> x(data.tokens.at("periodic").begin(), data.tokens.at("periodic").begin() + 16);
    const auto direct = predictive_logprobs(f.experts.at(Tier::Difficult).params, x);
    EXPECT_EQ(members[2]->predictive_logprobs(x), direct);
}

TEST(PriorJson, RoundTrip) {
    for (const auto& p : {DomainPrior::uniform(), DomainPrior::fixed({0.25, 0.25, 0.5})}) {
        EXPECT_EQ(prior_from_json(prior_to_json(p)), p);
    }
}
