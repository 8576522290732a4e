#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>
#include <openssl/evp.h>

#include "demondnc/demon.hpp"
#include "demondnc/dnc.hpp"
#include "demondnc/errors.hpp"
#include "demondnc/mine.hpp"
#include "demondnc/tasks.hpp"

namespace demondnc {

struct MineSettings {
    std::size_t hidden = 64;
    double lr = 1e-3;
    double ema_decay = 0.99;
    double grad_clip = 10.0;
    std::size_t norm_warmup = 1000;

    void validate() const {
        if (hidden < 1) throw ConfigError("mine: hidden must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("mine: lr must be positive");
        if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("mine: ema_decay must be in (0,1)");
    }

    bool operator==(const MineSettings&) const = default;
};

struct ExperimentConfig {
    int schema_version = 1;
    TaskConfig task;
    std::string babi_dir;  // when set, the task is bAbI and `task` is ignored
    std::size_t babi_max_story_len = 160;
    std::size_t babi_story_limit = 0;  // 0 keeps every story
    DncConfig dnc;  // input_dim/output_dim of 0 mean "derive from the task"
    MineSettings mine;
    PpoConfig<double> ppo;
    bool demon_enabled = false;
    std::size_t demon_hidden = 64;
    double demon_alpha = 0.1;
    double dnc_lr = 1e-3;
    double dnc_lr_final = 0.0;  // > 0 decays the lr geometrically to this value over `steps`
    double grad_clip = 10.0;
    std::size_t steps = 1000;
    std::size_t batch_size = 16;
    std::size_t snapshot_stride = 1;
    std::size_t log_interval = 25;
    std::size_t checkpoint_interval = 500;
    double target_error = 0.0;  // early stop when > 0
    std::uint64_t seed = 1;
    std::string out_dir;

    void validate() const {
        if (schema_version != 1) throw ConfigError("config: unsupported schema_version");
        task.validate();
        mine.validate();
        ppo.validate();
        if (demon_hidden < 1) throw ConfigError("config: demon_hidden must be >= 1");
        if (!(demon_alpha > 0.0)) throw ConfigError("config: demon_alpha must be positive");
        if (!(dnc_lr > 0.0)) throw ConfigError("config: dnc_lr must be positive");
        if (dnc_lr_final < 0.0) throw ConfigError("config: dnc_lr_final must be >= 0");
        if (steps < 1 || batch_size < 1) throw ConfigError("config: steps and batch_size must be >= 1");
        if (snapshot_stride < 1) throw ConfigError("config: snapshot_stride must be >= 1");
        if (log_interval < 1 || checkpoint_interval < 1)
            throw ConfigError("config: logging and checkpoint intervals must be >= 1");
        if (dnc.N < 1 || dnc.W < 1 || dnc.R < 1 || dnc.controller_hidden < 1 || dnc.depth < 1)
            throw ConfigError("config: dnc dimensions must be >= 1");
    }

    bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

inline void expect_keys(const nlohmann::json& j, const char* where) {
    if (!j.is_object()) throw ParseError(std::string("config: expected an object for ") + where);
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const TaskConfig& c) {
    j = nlohmann::json{{"kind", task_kind_name(c.kind)},
                       {"bits", c.bits},
                       {"len_min", c.len_min},
                       {"len_max", c.len_max},
                       {"repeat_min", c.repeat_min},
                       {"repeat_max", c.repeat_max},
                       {"items_min", c.items_min},
                       {"items_max", c.items_max},
                       {"item_len", c.item_len},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TaskConfig& c) {
    detail::expect_keys(j, "task");
    c.kind = task_kind_from_name(j.at("kind").get<std::string>());
    j.at("bits").get_to(c.bits);
    j.at("len_min").get_to(c.len_min);
    j.at("len_max").get_to(c.len_max);
    j.at("repeat_min").get_to(c.repeat_min);
    j.at("repeat_max").get_to(c.repeat_max);
    j.at("items_min").get_to(c.items_min);
    j.at("items_max").get_to(c.items_max);
    j.at("item_len").get_to(c.item_len);
    j.at("seed").get_to(c.seed);
}

inline void to_json(nlohmann::json& j, const DncToggles& t) {
    j = nlohmann::json{{"mask", t.mask}, {"dealloc", t.dealloc}, {"sharpness", t.sharpness}};
}

inline void from_json(const nlohmann::json& j, DncToggles& t) {
    detail::expect_keys(j, "dnc.toggles");
    j.at("mask").get_to(t.mask);
    j.at("dealloc").get_to(t.dealloc);
    j.at("sharpness").get_to(t.sharpness);
}

inline void to_json(nlohmann::json& j, const DncConfig& c) {
    j = nlohmann::json{{"N", c.N},
                       {"W", c.W},
                       {"R", c.R},
                       {"controller_hidden", c.controller_hidden},
                       {"depth", c.depth},
                       {"input_dim", c.input_dim},
                       {"output_dim", c.output_dim},
                       {"toggles", c.toggles}};
}

inline void from_json(const nlohmann::json& j, DncConfig& c) {
    detail::expect_keys(j, "dnc");
    j.at("N").get_to(c.N);
    j.at("W").get_to(c.W);
    j.at("R").get_to(c.R);
    j.at("controller_hidden").get_to(c.controller_hidden);
    j.at("depth").get_to(c.depth);
    j.at("input_dim").get_to(c.input_dim);
    j.at("output_dim").get_to(c.output_dim);
    j.at("toggles").get_to(c.toggles);
}

inline void to_json(nlohmann::json& j, const MineSettings& c) {
    j = nlohmann::json{{"hidden", c.hidden},
                       {"lr", c.lr},
                       {"ema_decay", c.ema_decay},
                       {"grad_clip", c.grad_clip},
                       {"norm_warmup", c.norm_warmup}};
}

inline void from_json(const nlohmann::json& j, MineSettings& c) {
    detail::expect_keys(j, "mine");
    j.at("hidden").get_to(c.hidden);
    j.at("lr").get_to(c.lr);
    j.at("ema_decay").get_to(c.ema_decay);
    j.at("grad_clip").get_to(c.grad_clip);
    j.at("norm_warmup").get_to(c.norm_warmup);
}

inline void to_json(nlohmann::json& j, const PpoConfig<double>& c) {
    j = nlohmann::json{{"clip_eps", c.clip_eps},
                       {"gamma", c.gamma},
                       {"lambda", c.lam},
                       {"epochs", c.epochs},
                       {"minibatch", c.minibatch},
                       {"value_coef", c.value_coef},
                       {"entropy_coef", c.entropy_coef},
                       {"lr", c.lr}};
}

inline void from_json(const nlohmann::json& j, PpoConfig<double>& c) {
    detail::expect_keys(j, "ppo");
    j.at("clip_eps").get_to(c.clip_eps);
    j.at("gamma").get_to(c.gamma);
    j.at("lambda").get_to(c.lam);
    j.at("epochs").get_to(c.epochs);
    j.at("minibatch").get_to(c.minibatch);
    j.at("value_coef").get_to(c.value_coef);
    j.at("entropy_coef").get_to(c.entropy_coef);
    j.at("lr").get_to(c.lr);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = nlohmann::json{{"schema_version", c.schema_version},
                       {"task", c.task},
                       {"babi_dir", c.babi_dir},
                       {"babi_max_story_len", c.babi_max_story_len},
                       {"babi_story_limit", c.babi_story_limit},
                       {"dnc", c.dnc},
                       {"mine", c.mine},
                       {"ppo", c.ppo},
                       {"demon_enabled", c.demon_enabled},
                       {"demon_hidden", c.demon_hidden},
                       {"demon_alpha", c.demon_alpha},
                       {"dnc_lr", c.dnc_lr},
                       {"dnc_lr_final", c.dnc_lr_final},
                       {"grad_clip", c.grad_clip},
                       {"steps", c.steps},
                       {"batch_size", c.batch_size},
                       {"snapshot_stride", c.snapshot_stride},
                       {"log_interval", c.log_interval},
                       {"checkpoint_interval", c.checkpoint_interval},
                       {"target_error", c.target_error},
                       {"seed", c.seed},
                       {"out_dir", c.out_dir}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    detail::expect_keys(j, "config");
    j.at("schema_version").get_to(c.schema_version);
    j.at("task").get_to(c.task);
    j.at("babi_dir").get_to(c.babi_dir);
    j.at("babi_max_story_len").get_to(c.babi_max_story_len);
    j.at("babi_story_limit").get_to(c.babi_story_limit);
    j.at("dnc").get_to(c.dnc);
    j.at("mine").get_to(c.mine);
    j.at("ppo").get_to(c.ppo);
    j.at("demon_enabled").get_to(c.demon_enabled);
    j.at("demon_hidden").get_to(c.demon_hidden);
    j.at("demon_alpha").get_to(c.demon_alpha);
    j.at("dnc_lr").get_to(c.dnc_lr);
    j.at("dnc_lr_final").get_to(c.dnc_lr_final);
    j.at("grad_clip").get_to(c.grad_clip);
    j.at("steps").get_to(c.steps);
    j.at("batch_size").get_to(c.batch_size);
    j.at("snapshot_stride").get_to(c.snapshot_stride);
    j.at("log_interval").get_to(c.log_interval);
    j.at("checkpoint_interval").get_to(c.checkpoint_interval);
    j.at("target_error").get_to(c.target_error);
    j.at("seed").get_to(c.seed);
    j.at("out_dir").get_to(c.out_dir);
}

// Canonical form: compact JSON with keys sorted (the object type is a sorted
// map, so dumping is canonical by construction).
inline std::string config_serialize(const ExperimentConfig& c) {
    const nlohmann::json j = c;
    return j.dump(2) + "\n";
}

inline ExperimentConfig config_parse(const std::string& text) {
    try {
        return nlohmann::json::parse(text).get<ExperimentConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
}

inline ExperimentConfig config_load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return config_parse(buf.str());
}

inline void config_save(const ExperimentConfig& c, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("config: cannot write " + path);
    out << config_serialize(c);
    if (!out) throw IoError("config: short write to " + path);
}

using ConfigDigest = std::array<unsigned char, 32>;

inline ConfigDigest sha256_bytes(const void* data, std::size_t len) {
    ConfigDigest digest{};
    unsigned int out_len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx) throw IoError("sha256: allocation failed");
    const bool ok = EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx, data, len) == 1 &&
                    EVP_DigestFinal_ex(ctx, digest.data(), &out_len) == 1;
    EVP_MD_CTX_free(ctx);
    if (!ok || out_len != digest.size()) throw IoError("sha256: digest computation failed");
    return digest;
}

// Digest of the canonical compact dump (sorted keys, no whitespace).
inline ConfigDigest config_digest(const ExperimentConfig& c) {
    const nlohmann::json j = c;
    const std::string canon = j.dump();
    return sha256_bytes(canon.data(), canon.size());
}

inline std::string digest_hex(const ConfigDigest& d) {
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(64);
    for (const unsigned char b : d) {
        out.push_back(hex[b >> 4]);
        out.push_back(hex[b & 0xF]);
    }
    return out;
}

}  // namespace demondnc
