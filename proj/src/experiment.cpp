// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include "hetforest/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "hetforest/checkpoint.hpp"
#include "hetforest/ensemble.hpp"
#include "hetforest/kernels.hpp"
#include "hetforest/pool.hpp"
#include "hetforest/rng.hpp"

extern char** environ;

namespace hetforest {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kInitTag = 0x1417;
constexpr std::uint64_t kPretrainTag = 0x9E7A;
constexpr std::uint64_t kBtmTag = 0xB7B7;
constexpr std::uint64_t kSplitTag = 0x5917;

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h = (h ^ c) * 0x100000001b3ULL;
    }
    return h;
}

[[noreturn]] void bad(const std::string& why) { throw Error(ErrorCode::ConfigInvalid, why); }

template <typename T>
T get(const YAML::Node& node, const char* key, T fallback, const std::string& where) {
    const YAML::Node v = node[key];
    if (!v.IsDefined() || v.IsNull()) {
        return fallback;
    }
    try {
        return v.as<T>();
    } catch (const YAML::Exception&) {
        bad(where + key + ": cannot read value '" + YAML::Dump(v) + "'");
    }
}

void check_keys(const YAML::Node& node, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!node.IsDefined() || node.IsNull()) {
        return;
    }
    if (!node.IsMap()) {
        bad(where + " must be a mapping");
    }
    for (const auto& kv : node) {
        const auto key = kv.first.as<std::string>();
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            bad("unknown key '" + where + (where.empty() ? "" : ".") + key + "'");
        }
    }
}

ExpertConfig read_model(const YAML::Node& node, ExpertConfig base, const std::string& where) {
    if (node.IsScalar()) {
        return seed_table_config(node.as<std::string>());
    }
    check_keys(node,
               {"hidden_size", "intermediate_size", "num_heads", "num_layers", "vocab_size", "seq_len", "init_std",
                "rope_theta", "norm_eps"},
               where);
    base.hidden_size = get(node, "hidden_size", base.hidden_size, where + ".");
    base.intermediate_size = get(node, "intermediate_size", base.intermediate_size, where + ".");
    base.num_heads = get(node, "num_heads", base.num_heads, where + ".");
    base.num_layers = get(node, "num_layers", base.num_layers, where + ".");
    base.vocab_size = get(node, "vocab_size", base.vocab_size, where + ".");
    base.seq_len = get(node, "seq_len", base.seq_len, where + ".");
    base.init_std = get(node, "init_std", base.init_std, where + ".");
    base.rope_theta = get(node, "rope_theta", base.rope_theta, where + ".");
    base.norm_eps = get(node, "norm_eps", base.norm_eps, where + ".");
    return base;
}

TrainSchedule read_schedule(const YAML::Node& node, TrainSchedule base, const std::string& where) {
    check_keys(node,
               {"total_steps", "warmup_steps", "max_lr", "min_lr", "batch_tokens", "beta1", "beta2", "adam_eps",
                "grad_clip", "weight_decay"},
               where);
    if (!node.IsDefined() || node.IsNull()) {
        return base;
    }
    const bool has_min = node["min_lr"].IsDefined();
    base.total_steps = get(node, "total_steps", base.total_steps, where + ".");
    base.warmup_steps = get(node, "warmup_steps", base.warmup_steps, where + ".");
    base.max_lr = get(node, "max_lr", base.max_lr, where + ".");
    base.min_lr = has_min ? get(node, "min_lr", base.min_lr, where + ".") : base.max_lr / 10.0;
    base.batch_tokens = get(node, "batch_tokens", base.batch_tokens, where + ".");
    base.beta1 = get(node, "beta1", base.beta1, where + ".");
    base.beta2 = get(node, "beta2", base.beta2, where + ".");
    base.adam_eps = get(node, "adam_eps", base.adam_eps, where + ".");
    base.grad_clip = get(node, "grad_clip", base.grad_clip, where + ".");
    base.weight_decay = get(node, "weight_decay", base.weight_decay, where + ".");
    return base;
}

void set_path(YAML::Node node, const std::vector<std::string>& keys, std::size_t i, const YAML::Node& value) {
    if (i + 1 == keys.size()) {
        node[keys[i]] = value;
        return;
    }
    if (!node[keys[i]].IsMap()) {
        node[keys[i]] = YAML::Node(YAML::NodeType::Map);
    }
    set_path(node[keys[i]], keys, i + 1, value);
}

void apply_override(YAML::Node& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        bad("override '" + assignment + "' is not of the form key=value");
    }
    std::vector<std::string> keys;
    std::stringstream ss(assignment.substr(0, eq));
    for (std::string part; std::getline(ss, part, '.');) {
        if (part.empty()) {
            bad("override '" + assignment + "' has an empty key segment");
        }
        keys.push_back(part);
    }
    YAML::Node value;
    try {
        value = YAML::Load(assignment.substr(eq + 1));
    } catch (const YAML::Exception& e) {
        bad("override '" + assignment + "': " + e.what());
    }
    set_path(root, keys, 0, value);
}

fs::path resolve(const fs::path& base, const std::string& p) {
    if (p.empty()) {
        return {};
    }
    const fs::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) {
            throw Error(ErrorCode::IoError, "cannot write '" + tmp.string() + "'");
        }
        out << text;
    }
    fs::rename(tmp, path);
}

nlohmann::json read_json(const fs::path& path, const std::string& hint) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::MissingArtifact, "'" + path.string() + "' not found; " + hint);
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigInvalid, path.string() + ": " + e.what());
    }
}

const ExpertConfig& moderate_config(const ExperimentConfig& c) {
    const auto it = c.tier_configs.find(Tier::Moderate);
    if (it == c.tier_configs.end()) {
        bad("a moderate tier model is required");
    }
    return it->second;
}

std::size_t block_size(const ExperimentConfig& c) {
    return static_cast<std::size_t>(moderate_config(c).seq_len);
}

fs::path checkpoint_dir(const ExperimentConfig& c) { return c.out_dir / "checkpoints"; }

std::vector<Token> pretrain_tokens(const ExperimentConfig& c) {
    if (!c.pretrain_corpus.empty()) {
        return DomainCorpus::load("pretrain", c.pretrain_corpus).tokens;
    }
    std::vector<Token> all;
    for (const auto& d : load_domains(c)) {
        if (!d.entry.eval_only) {
            all.insert(all.end(), d.split.train.begin(), d.split.train.end());
        }
    }
    return all;
}

/// Cache key for one seed: everything that determines its bytes.
std::string seed_key(const ExperimentConfig& c, const ExpertConfig& arch, const std::string& corpus_digest) {
    const nlohmann::json j{{"arch", config_to_json(arch)},
                           {"schedule", schedule_to_json(c.pretrain_schedule)},
                           {"seed", c.seed},
                           {"corpus", corpus_digest}};
    return sha256_hex(j.dump());
}

std::string token_digest(const std::vector<Token>& tokens) {
    std::string bytes(tokens.size() * sizeof(Token), '\0');
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto v = static_cast<std::uint32_t>(tokens[i]);
        for (int b = 0; b < 4; ++b) {
            bytes[i * 4 + static_cast<std::size_t>(b)] = static_cast<char>((v >> (8 * b)) & 0xFF);
        }
    }
    return sha256_hex(bytes);
}

std::map<Tier, ExpertCheckpoint> load_seeds(const ExperimentConfig& c) {
    const auto j = read_json(c.out_dir / "seeds.json", "run 'pretrain' first");
    std::map<Tier, ExpertCheckpoint> seeds;
    for (const auto& [name, entry] : j.at("seeds").items()) {
        const auto tier = parse_tier(name);
        if (!tier) {
            bad("seeds.json: unknown tier '" + name + "'");
        }
        seeds[*tier] = load_checkpoint(c.out_dir / entry.at("path").get<std::string>());
    }
    return seeds;
}

std::map<std::string, Tier> load_tiers(const ExperimentConfig& c) {
    const fs::path p = c.out_dir / "tiers.json";
    if (!fs::exists(p)) {
        return run_assign_tiers(c);
    }
    const auto j = read_json(p, "run 'pretrain' first");
    std::map<std::string, Tier> out;
    for (const auto& [name, entry] : j.at("domains").items()) {
        const auto tier = parse_tier(entry.at("tier").get<std::string>());
        if (!tier) {
            bad("tiers.json: bad tier for '" + name + "'");
        }
        out[name] = *tier;
    }
    return out;
}

}  // namespace

ExperimentConfig default_experiment_config() {
    ExperimentConfig c;
    c.tier_configs[Tier::Moderate] = ExpertConfig{};
    c.pretrain_schedule.total_steps = 600;
    c.pretrain_schedule.warmup_steps = 50;
    c.pretrain_schedule.max_lr = 5e-3;
    c.pretrain_schedule.min_lr = 5e-4;
    c.domain_schedule.total_steps = c.iter_m;
    c.domain_schedule.warmup_steps = 50;
    c.domain_schedule.max_lr = 5e-4;
    c.domain_schedule.min_lr = 5e-5;
    return c;
}

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json tiers = nlohmann::json::object();
    for (const auto& [t, cfg] : tier_configs) {
        tiers[std::string(to_string(t))] = config_to_json(cfg);
    }
    return {{"setup", setup},
            {"scenario", std::string(to_string(scenario))},
            {"tiers", tiers},
            {"budget",
             {{"iter_m", iter_m}, {"granularity", granularity}, {"tolerance", tolerance}, {"branch_ratio", branch_ratio}}},
            {"data",
             {{"registry", registry.string()},
              {"pretrain_corpus", pretrain_corpus.string()},
              {"holdout_fraction", holdout_fraction},
              {"val_test_ratio", val_test_ratio}}},
            {"pretrain", schedule_to_json(pretrain_schedule)},
            {"domain_training", schedule_to_json(domain_schedule)},
            {"prior", prior_to_json(prior)},
            {"eval",
             {{"document_tokens", eval.document_tokens},
              {"reset_per_document", eval.reset_per_document},
              {"step", eval.step},
              {"iteration", eval.iteration}}},
            {"run",
             {{"seed", seed}, {"out_dir", out_dir.string()}, {"workers", workers}, {"kernel_threads", kernel_threads}}}};
}

void ExperimentConfig::validate() const {
    const auto& mid = moderate_config(*this);
    for (const auto& [t, cfg] : tier_configs) {
        cfg.validate();
        if (cfg.seq_len != mid.seq_len || cfg.vocab_size != mid.vocab_size) {
            bad("all tier models must share seq_len and vocab_size");
        }
    }
    if (workers < 1 || kernel_threads < 1) {
        bad("workers and kernel_threads must be at least 1");
    }
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0) || !(val_test_ratio > 0.0 && val_test_ratio < 1.0)) {
        bad("holdout_fraction and val_test_ratio must lie in (0, 1)");
    }
    if (!(branch_ratio > 0.0 && branch_ratio <= 1.0)) {
        bad("branch_ratio must lie in (0, 1]");
    }
    if (eval.step != "final" && eval.step != "branch") {
        bad("eval.step must be 'final' or 'branch'");
    }
    if (eval.iteration < 0) {
        bad("eval.iteration must be non-negative");
    }
    pretrain_schedule.validate();
    const BudgetPlan plan = experiment_plan(*this);
    prior.validate(plan.assignments.size());
    int shortest = iter_m;
    for (const auto& [t, a] : plan.assignments) {
        shortest = std::min(shortest, a.iterations);
    }
    TrainSchedule probe = domain_schedule;
    probe.total_steps = shortest;
    try {
        probe.validate();
    } catch (const Error& e) {
        bad(std::string("domain_training: ") + e.what() + " (shortest tier trains " + std::to_string(shortest) +
            " steps)");
    }
}

ExperimentConfig parse_experiment_config(const std::string& yaml_text, const fs::path& base_dir,
                                         const std::vector<std::string>& overrides) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::Exception& e) {
        bad(std::string("config: ") + e.what());
    }
    if (root.IsNull()) {
        root = YAML::Node(YAML::NodeType::Map);
    }
    for (const auto& o : overrides) {
        apply_override(root, o);
    }
    check_keys(root,
               {"setup", "scenario", "model", "tiers", "budget", "data", "pretrain", "domain_training", "prior", "eval",
                "run"},
               "");

    ExperimentConfig c = default_experiment_config();
    c.setup = get(root, "setup", c.setup, "");
    const auto scen = get(root, "scenario", std::string(to_string(c.scenario)), "");
    const auto parsed = parse_scenario(scen);
    if (!parsed) {
        bad("unknown scenario '" + scen + "' (expected MHoIHo, MHoIHe or MHeIHo)");
    }
    c.scenario = *parsed;

    const ExpertConfig model = read_model(root["model"], ExpertConfig{}, "model");
    c.tier_configs.clear();
    const YAML::Node tiers = root["tiers"];
    check_keys(tiers, {"easy", "moderate", "difficult"}, "tiers");
    if (tiers.IsDefined() && !tiers.IsNull()) {
        for (Tier t : kAllTiers) {
            const YAML::Node n = tiers[std::string(to_string(t))];
            if (n.IsDefined() && !n.IsNull()) {
                c.tier_configs[t] = read_model(n, model, "tiers." + std::string(to_string(t)));
            }
        }
    }
    if (!c.tier_configs.count(Tier::Moderate)) {
        c.tier_configs[Tier::Moderate] = model;
    }

    const YAML::Node budget = root["budget"];
    check_keys(budget, {"iter_m", "granularity", "tolerance", "branch_ratio"}, "budget");
    c.iter_m = get(budget, "iter_m", c.iter_m, "budget.");
    c.granularity = get(budget, "granularity", c.granularity, "budget.");
    c.tolerance = get(budget, "tolerance", c.tolerance, "budget.");
    c.branch_ratio = get(budget, "branch_ratio", c.branch_ratio, "budget.");

    const YAML::Node data = root["data"];
    check_keys(data, {"registry", "pretrain_corpus", "holdout_fraction", "val_test_ratio"}, "data");
    c.registry = resolve(base_dir, get(data, "registry", std::string(), "data."));
    c.pretrain_corpus = resolve(base_dir, get(data, "pretrain_corpus", std::string(), "data."));
    c.holdout_fraction = get(data, "holdout_fraction", c.holdout_fraction, "data.");
    c.val_test_ratio = get(data, "val_test_ratio", c.val_test_ratio, "data.");

    c.pretrain_schedule = read_schedule(root["pretrain"], c.pretrain_schedule, "pretrain");
    TrainSchedule dom = c.domain_schedule;
    dom.max_lr = c.pretrain_schedule.min_lr;
    dom.min_lr = dom.max_lr / 10.0;
    c.domain_schedule = read_schedule(root["domain_training"], dom, "domain_training");
    c.domain_schedule.total_steps = c.iter_m;

    const YAML::Node prior = root["prior"];
    check_keys(prior, {"kind", "values"}, "prior");
    if (prior.IsDefined() && !prior.IsNull()) {
        const auto kind = get(prior, "kind", std::string("uniform"), "prior.");
        if (kind == "uniform") {
            c.prior = DomainPrior::uniform();
        } else if (kind == "fixed") {
            c.prior.kind = DomainPrior::Kind::Fixed;
            c.prior.values = get(prior, "values", std::vector<double>{}, "prior.");
        } else {
            bad("prior.kind must be 'uniform' or 'fixed'");
        }
    }

    const YAML::Node eval = root["eval"];
    check_keys(eval, {"document_tokens", "reset_per_document", "step", "iteration"}, "eval");
    c.eval.document_tokens = get(eval, "document_tokens", c.eval.document_tokens, "eval.");
    c.eval.reset_per_document = get(eval, "reset_per_document", c.eval.reset_per_document, "eval.");
    c.eval.step = get(eval, "step", c.eval.step, "eval.");
    c.eval.iteration = get(eval, "iteration", c.eval.iteration, "eval.");

    const YAML::Node run = root["run"];
    check_keys(run, {"seed", "out_dir", "workers", "kernel_threads"}, "run");
    c.seed = get(run, "seed", c.seed, "run.");
    c.out_dir = resolve(base_dir, get(run, "out_dir", std::string("out"), "run."));
    c.workers = get(run, "workers", c.workers, "run.");
    c.kernel_threads = get(run, "kernel_threads", c.kernel_threads, "run.");

    c.validate();
    return c;
}

std::vector<std::string> environment_overrides() {
    static constexpr std::string_view prefix = "HETFOREST_";
    std::vector<std::string> out;
    for (char** e = environ; e && *e; ++e) {
        std::string_view kv(*e);
        if (kv.substr(0, prefix.size()) != prefix) {
            continue;
        }
        const auto eq = kv.find('=');
        if (eq == std::string_view::npos) {
            continue;
        }
        std::string key(kv.substr(prefix.size(), eq - prefix.size()));
        std::transform(key.begin(), key.end(), key.begin(), [](unsigned char ch) { return std::tolower(ch); });
        for (std::size_t p = key.find("__"); p != std::string::npos; p = key.find("__", p + 1)) {
            key.replace(p, 2, ".");
        }
        out.push_back(key + "=" + std::string(kv.substr(eq + 1)));
    }
    std::sort(out.begin(), out.end());
    return out;
}

ExperimentConfig load_experiment_config(const fs::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::MissingArtifact, "config file '" + path.string() + "' not found");
    }
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::vector<std::string> all = environment_overrides();
    all.insert(all.end(), overrides.begin(), overrides.end());
    return parse_experiment_config(text, path.parent_path(), all);
}

BudgetPlan experiment_plan(const ExperimentConfig& c) {
    return make_plan(c.scenario, c.tier_configs, c.iter_m, c.granularity, c.tolerance);
}

std::vector<LoadedDomain> load_domains(const ExperimentConfig& c) {
    if (c.registry.empty()) {
        bad("data.registry is not set");
    }
    if (!fs::exists(c.registry)) {
        throw Error(ErrorCode::MissingArtifact, "domain registry '" + c.registry.string() + "' not found");
    }
    const auto entries = load_registry(c.registry);
    std::vector<LoadedDomain> out(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        if (!fs::exists(e.path)) {
            throw Error(ErrorCode::MissingArtifact, "corpus for domain '" + e.name + "' not found at " + e.path.string());
        }
        SplitSpec spec;
        spec.holdout_fraction = c.holdout_fraction;
        spec.val_test_ratio = c.val_test_ratio;
        spec.block_size = block_size(c);
        spec.rng_seed = derive_seed(c.seed, kSplitTag, fnv1a(e.name));
        out[i] = {e, split(DomainCorpus::load(e.name, e.path), spec)};
    }
    return out;
}

std::map<Tier, ExpertCheckpoint> run_pretrain(const ExperimentConfig& c) {
    c.validate();
    const BudgetPlan plan = experiment_plan(c);
    // Distinct architectures the plan trains; homogeneous scenarios share one seed.
    std::vector<ExpertConfig> archs;
    std::map<Tier, std::size_t> arch_of;
    for (const auto& [tier, a] : plan.assignments) {
        ExpertConfig arch = a.config;
        arch.tier.reset();
        auto it = std::find(archs.begin(), archs.end(), arch);
        if (it == archs.end()) {
            archs.push_back(arch);
            it = archs.end() - 1;
        }
        arch_of[tier] = static_cast<std::size_t>(it - archs.begin());
    }

    const std::vector<Token> tokens = pretrain_tokens(c);
    const std::string digest = token_digest(tokens);
    std::vector<std::string> keys;
    for (const auto& a : archs) {
        keys.push_back(seed_key(c, a, digest));
    }

    // Reuse seeds whose inputs are unchanged.
    std::map<std::string, std::string> cached;
    if (fs::exists(c.out_dir / "seeds.json")) {
        const auto j = read_json(c.out_dir / "seeds.json", "");
        for (const auto& [name, entry] : j.at("seeds").items()) {
            if (fs::exists(c.out_dir / entry.at("path").get<std::string>())) {
                cached[entry.at("key").get<std::string>()] = entry.at("path").get<std::string>();
            }
        }
    }

    std::vector<ExpertCheckpoint> trained(archs.size());
    const auto errors = run_pool(archs.size(), c.workers, [&](std::size_t i) {
        kernels::set_kernel_threads(c.kernel_threads);
        if (cached.count(keys[i])) {
            trained[i] = load_checkpoint(c.out_dir / cached.at(keys[i]));
            return;
        }
        const auto start = make_checkpoint(init_model<float>(archs[i], derive_seed(c.seed, kInitTag)), 0, {});
        if (c.pretrain_schedule.total_steps == 0) {
            trained[i] = start;
            return;
        }
        const auto seq = static_cast<std::size_t>(archs[i].seq_len);
        const auto batch = std::max<std::size_t>(1, static_cast<std::size_t>(c.pretrain_schedule.batch_tokens) / seq);
        BatchIterator data(tokens, seq, batch, derive_seed(c.seed, kPretrainTag));
        trained[i] = train(start, data, c.pretrain_schedule, {}).back();
    });
    for (std::size_t i = 0; i < errors.size(); ++i) {
        if (!errors[i].empty()) {
            throw Error(ErrorCode::IterationFailed, "pretraining failed: " + errors[i]);
        }
    }

    std::map<Tier, ExpertCheckpoint> seeds;
    nlohmann::json manifest = nlohmann::json::object();
    for (const auto& [tier, idx] : arch_of) {
        save_checkpoint(trained[idx], checkpoint_dir(c));
        seeds[tier] = trained[idx];
        manifest[std::string(to_string(tier))] = {{"path", "checkpoints/" + trained[idx].id + ".ckpt"},
                                                  {"key", keys[idx]}};
    }
    write_text(c.out_dir / "seeds.json",
               nlohmann::json{{"seeds", manifest}, {"pretrain_tokens", tokens.size()}}.dump(2) + "\n");
    return seeds;
}

std::map<std::string, Tier> run_assign_tiers(const ExperimentConfig& c) {
    const auto seeds = load_seeds(c);
    if (!seeds.count(Tier::Moderate)) {
        throw Error(ErrorCode::MissingSeed, "seeds.json has no moderate seed");
    }
    const ExpertModel scorer(seeds.at(Tier::Moderate));
    const ModelSet solo{&scorer};
    const auto domains = load_domains(c);

    std::map<int, std::vector<const LoadedDomain*>> rows;
    for (const auto& d : domains) {
        if (d.entry.eval_only) {
            continue;
        }
        if (!d.entry.iteration || *d.entry.iteration < 1) {
            bad("trained domain '" + d.entry.name + "' needs an iteration >= 1");
        }
        rows[*d.entry.iteration].push_back(&d);
    }

    std::map<std::string, double> ppl;
    std::vector<const LoadedDomain*> flat;
    for (const auto& [k, row] : rows) {
        flat.insert(flat.end(), row.begin(), row.end());
    }
    std::vector<double> scores(flat.size());
    const auto errors = run_pool(flat.size(), c.workers, [&](std::size_t i) {
        const auto& split = flat[i]->split;
        const auto& held = split.val.empty() ? split.test : split.val;
        scores[i] = corpus_perplexity(solo, DomainPrior::uniform(), documents(held, block_size(c)));
    });
    for (std::size_t i = 0; i < flat.size(); ++i) {
        if (!errors[i].empty()) {
            throw Error(ErrorCode::EmptyEval, "domain '" + flat[i]->entry.name + "': " + errors[i]);
        }
        ppl[flat[i]->entry.name] = scores[i];
    }

    const BudgetPlan plan = experiment_plan(c);
    std::map<std::string, Tier> out;
    nlohmann::json doc = nlohmann::json::object();
    for (const auto& [k, row] : rows) {
        std::map<std::string, Tier> assigned;
        const bool all_pinned = std::all_of(row.begin(), row.end(), [](const auto* d) { return d->entry.tier_override.has_value(); });
        if (!all_pinned) {
            std::map<std::string, double> row_ppl;
            for (const auto* d : row) {
                row_ppl[d->entry.name] = ppl.at(d->entry.name);
            }
            assigned = classify_difficulty(row_ppl);
        }
        for (const auto* d : row) {
            if (d->entry.tier_override) {
                assigned[d->entry.name] = *d->entry.tier_override;
            }
        }
        std::map<Tier, std::string> seen;
        for (const auto& [name, tier] : assigned) {
            if (!seen.emplace(tier, name).second) {
                bad("iteration " + std::to_string(k) + " assigns both '" + seen.at(tier) + "' and '" + name +
                    "' to the " + std::string(to_string(tier)) + " tier");
            }
        }
        for (const auto& [tier, a] : plan.assignments) {
            if (!seen.count(tier)) {
                bad("iteration " + std::to_string(k) + " has no " + std::string(to_string(tier)) + " domain");
            }
        }
        for (const auto& [name, tier] : assigned) {
            out[name] = tier;
            doc[name] = {{"tier", std::string(to_string(tier))}, {"iteration", k}, {"seed_perplexity", ppl.at(name)}};
        }
    }
    write_text(c.out_dir / "tiers.json", nlohmann::json{{"domains", doc}}.dump(2) + "\n");
    return out;
}

int registry_iterations(const ExperimentConfig& c) {
    int k = 0;
    for (const auto& e : load_registry(c.registry)) {
        if (!e.eval_only && e.iteration) {
            k = std::max(k, *e.iteration);
        }
    }
    return k;
}

Forest run_branch_train(const ExperimentConfig& c, int iteration) {
    c.validate();
    if (iteration < 1) {
        throw Error(ErrorCode::InvalidArgument, "iteration must be >= 1");
    }
    const BudgetPlan plan = experiment_plan(c);
    const fs::path manifest = c.out_dir / "forest.json";
    Forest forest;
    if (fs::exists(manifest)) {
        forest = load_forest(manifest);
        if (plan_to_json(forest.plan) != plan_to_json(plan)) {
            bad("forest at " + manifest.string() + " was built with a different plan; use a fresh out_dir");
        }
    } else if (iteration > 1) {
        throw Error(ErrorCode::MissingTierExpert, "no forest at " + manifest.string() +
                                                      "; run 'branch-train --iteration 1' first");
    } else {
        forest = make_forest(plan, load_seeds(c), c.prior);
    }
    if (forest.completed_iterations() >= iteration) {
        return forest;
    }
    if (forest.completed_iterations() < iteration - 1) {
        throw Error(ErrorCode::MissingTierExpert, "iteration " + std::to_string(iteration - 1) +
                                                      " has not been trained; run 'branch-train --iteration " +
                                                      std::to_string(forest.completed_iterations() + 1) + "' first");
    }

    const auto tiers = load_tiers(c);
    const auto domains = load_domains(c);
    std::map<Tier, DomainData> row;
    for (const auto& d : domains) {
        if (d.entry.eval_only || d.entry.iteration != iteration) {
            continue;
        }
        const auto t = tiers.find(d.entry.name);
        if (t == tiers.end()) {
            bad("domain '" + d.entry.name + "' has no tier; delete tiers.json and re-run");
        }
        row[t->second] = {d.entry.name, d.split.train};
    }

    BtmOptions opts;
    opts.schedule = c.domain_schedule;
    opts.branch_ratio = c.branch_ratio;
    opts.base_seed = derive_seed(c.seed, kBtmTag);
    opts.workers = c.workers;
    opts.kernel_threads = c.kernel_threads;
    Forest next = train_iteration(forest, row, opts);
    verify_lineage(next);
    save_forest(next, manifest);
    return next;
}

Forest forest_at(const Forest& forest, int iteration, const std::string& step, const fs::path& checkpoint_dir) {
    if (iteration == 0) {
        iteration = forest.completed_iterations();
    }
    if (iteration < 1 || iteration > forest.completed_iterations()) {
        throw Error(ErrorCode::MissingTierExpert, "forest has no iteration " + std::to_string(iteration));
    }
    if (step != "final" && step != "branch") {
        throw Error(ErrorCode::InvalidArgument, "step must be 'final' or 'branch'");
    }
    Forest out = forest;
    out.history.resize(static_cast<std::size_t>(iteration));
    const auto& rec = out.history.back();
    out.experts.clear();
    out.branch_points.clear();
    for (const auto& [tier, id] : rec.final_ids) {
        const auto& chosen = step == "final" ? id : rec.branch_ids.at(tier);
        out.experts[tier] = load_checkpoint(checkpoint_dir / (chosen + ".ckpt"));
        out.branch_points[tier] = load_checkpoint(checkpoint_dir / (rec.branch_ids.at(tier) + ".ckpt"));
    }
    return out;
}

EvalResult run_evaluate(const ExperimentConfig& c, const fs::path& forest_manifest, const fs::path& results_path) {
    c.validate();
    const Forest full = load_forest(forest_manifest);
    const Forest forest = (c.eval.iteration == 0 && c.eval.step == "final")
                              ? full
                              : forest_at(full, c.eval.iteration, c.eval.step, forest_manifest.parent_path() / "checkpoints");
    const auto domains = load_domains(c);
    std::vector<EvalDomain> eval;
    for (const auto& d : domains) {
        eval.push_back({d.entry.name, d.entry.eval_only ? DomainKind::EvalOnly : DomainKind::Trained, d.split.test});
    }
    EvalOptions opts;
    opts.document_tokens = c.eval.document_tokens ? c.eval.document_tokens : block_size(c);
    opts.reset_per_document = c.eval.reset_per_document;
    opts.workers = c.workers;
    EvalResult r = evaluate_forest(forest, eval, c.setup, opts);
    r.metadata["eval_step"] = c.eval.step;
    r.metadata["seed"] = c.seed;
    write_text(results_path, result_to_json(r).dump(2) + "\n");
    return r;
}

EvalResult run_pipeline(const ExperimentConfig& c) {
    c.validate();
    run_pretrain(c);
    run_assign_tiers(c);
    const int k = registry_iterations(c);
    if (k < 1) {
        bad("registry has no trained domains");
    }
    for (int i = 1; i <= k; ++i) {
        run_branch_train(c, i);
    }
    return run_evaluate(c, c.out_dir / "forest.json", c.out_dir / "results.json");
}

void write_provenance(const ExperimentConfig& c, const std::string& subcommand,
                      const std::vector<std::string>& overrides, const nlohmann::json& extra) {
    nlohmann::json j{{"subcommand", subcommand}, {"config", c.to_json()}, {"overrides", overrides}};
    if (!extra.is_null()) {
        j["details"] = extra;
    }
    write_text(c.out_dir / "provenance" / (subcommand + ".json"), j.dump(2) + "\n");
}

}  // namespace hetforest
