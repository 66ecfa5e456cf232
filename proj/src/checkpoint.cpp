// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include "hetforest/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <openssl/evp.h>

namespace hetforest {

namespace {

constexpr std::string_view kMagic = "HFCKPT01";
constexpr std::string_view kFormat = "hetforest-ckpt-v1";

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

std::uint64_t get_u64_le(const std::string& in, std::size_t pos) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)])) << (8 * i);
    }
    return v;
}

std::string float_blob(const std::vector<float>& values) {
    std::string blob(values.size() * sizeof(float), '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) {
            blob[i * 4 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xFF);
        }
    }
    return blob;
}

nlohmann::json header_without_id(const ExpertCheckpoint& ck) {
    nlohmann::json lineage = nlohmann::json::array();
    for (const auto& e : ck.lineage) {
        lineage.push_back({{"iteration", e.iteration}, {"domain", e.domain}, {"parent", e.parent_id}});
    }
    nlohmann::json tensors = nlohmann::json::array();
    const ParamLayout layout(ck.config());
    for (const auto& t : layout.tensors()) {
        tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    }
    return {{"format", kFormat}, {"config", config_to_json(ck.config())}, {"step", ck.step},
            {"lineage", lineage}, {"tensors", tensors}, {"dtype", "f32le"}};
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
    EVP_DigestFinal_ex(ctx, md.data(), &len);
    EVP_MD_CTX_free(ctx);
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xF]);
    }
    return out;
}

nlohmann::json config_to_json(const ExpertConfig& c) {
    nlohmann::json j{{"hidden_size", c.hidden_size},     {"intermediate_size", c.intermediate_size},
                     {"num_heads", c.num_heads},         {"num_layers", c.num_layers},
                     {"vocab_size", c.vocab_size},       {"seq_len", c.seq_len},
                     {"init_std", c.init_std},           {"rope_theta", c.rope_theta},
                     {"norm_eps", c.norm_eps}};
    j["tier"] = c.tier ? nlohmann::json(std::string(to_string(*c.tier))) : nlohmann::json(nullptr);
    return j;
}

ExpertConfig config_from_json(const nlohmann::json& j) {
    ExpertConfig c;
    c.hidden_size = j.value("hidden_size", c.hidden_size);
    c.intermediate_size = j.value("intermediate_size", c.intermediate_size);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.init_std = j.value("init_std", c.init_std);
    c.rope_theta = j.value("rope_theta", c.rope_theta);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    if (j.contains("tier") && !j["tier"].is_null()) {
        c.tier = parse_tier(j["tier"].get<std::string>());
        if (!c.tier) {
            throw Error(ErrorCode::InvalidConfig, "unknown tier '" + j["tier"].get<std::string>() + "'");
        }
    }
    return c;
}

nlohmann::json schedule_to_json(const TrainSchedule& s) {
    return {{"total_steps", s.total_steps}, {"warmup_steps", s.warmup_steps}, {"max_lr", s.max_lr},
            {"min_lr", s.min_lr},           {"batch_tokens", s.batch_tokens}, {"beta1", s.beta1},
            {"beta2", s.beta2},             {"adam_eps", s.adam_eps},         {"grad_clip", s.grad_clip},
            {"weight_decay", s.weight_decay}};
}

TrainSchedule schedule_from_json(const nlohmann::json& j) {
    TrainSchedule s;
    s.total_steps = j.value("total_steps", s.total_steps);
    s.warmup_steps = j.value("warmup_steps", s.warmup_steps);
    s.max_lr = j.value("max_lr", s.max_lr);
    s.min_lr = j.value("min_lr", s.min_lr);
    s.batch_tokens = j.value("batch_tokens", s.batch_tokens);
    s.beta1 = j.value("beta1", s.beta1);
    s.beta2 = j.value("beta2", s.beta2);
    s.adam_eps = j.value("adam_eps", s.adam_eps);
    s.grad_clip = j.value("grad_clip", s.grad_clip);
    s.weight_decay = j.value("weight_decay", s.weight_decay);
    return s;
}

std::string compute_checkpoint_id(const ExpertCheckpoint& ck) {
    return sha256_hex(header_without_id(ck).dump() + float_blob(ck.params.values));
}

std::string serialize_checkpoint(const ExpertCheckpoint& ck) {
    nlohmann::json header = header_without_id(ck);
    header["id"] = ck.id.empty() ? compute_checkpoint_id(ck) : ck.id;
    const std::string text = header.dump();
    std::string out(kMagic);
    put_u64_le(out, text.size());
    out += text;
    out += float_blob(ck.params.values);
    return out;
}

ExpertCheckpoint deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < 16 || std::string_view(bytes).substr(0, 8) != kMagic) {
        throw Error(ErrorCode::CorruptCheckpoint, "bad magic");
    }
    const std::uint64_t n = get_u64_le(bytes, 8);
    if (16 + n > bytes.size()) {
        throw Error(ErrorCode::CorruptCheckpoint, "truncated header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, n));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::CorruptCheckpoint, std::string("header: ") + e.what());
    }
    if (header.value("format", std::string()) != kFormat) {
        throw Error(ErrorCode::CorruptCheckpoint, "unsupported format");
    }
    ExpertCheckpoint ck;
    ck.params.config = config_from_json(header.at("config"));
    ck.params.config.validate();
    ck.step = header.at("step").get<int>();
    for (const auto& e : header.at("lineage")) {
        ck.lineage.push_back({e.at("iteration").get<int>(), e.at("domain").get<std::string>(),
                              e.at("parent").get<std::string>()});
    }
    const std::size_t count = ParamLayout(ck.params.config).total();
    const std::size_t blob_at = 16 + n;
    if (bytes.size() - blob_at != count * sizeof(float)) {
        throw Error(ErrorCode::CorruptCheckpoint, "parameter blob has wrong size");
    }
    ck.params.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[blob_at + i * 4 + static_cast<std::size_t>(b)]))
                    << (8 * b);
        }
        ck.params.values[i] = std::bit_cast<float>(bits);
    }
    ck.id = compute_checkpoint_id(ck);
    if (header.value("id", std::string()) != ck.id) {
        throw Error(ErrorCode::CorruptCheckpoint, "content hash does not match recorded id");
    }
    return ck;
}

std::filesystem::path save_checkpoint(const ExpertCheckpoint& ck, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const std::string id = ck.id.empty() ? compute_checkpoint_id(ck) : ck.id;
    const auto path = dir / (id + ".ckpt");
    if (std::filesystem::exists(path)) {
        return path;
    }
    const auto tmp = dir / (id + ".ckpt.tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) {
            throw Error(ErrorCode::IoError, "cannot write checkpoint '" + tmp.string() + "'");
        }
        const std::string bytes = serialize_checkpoint(ck);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    std::filesystem::rename(tmp, path);
    return path;
}

ExpertCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::MissingArtifact, "checkpoint '" + path.string() + "' not found");
    }
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace hetforest
