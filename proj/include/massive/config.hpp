#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "error.hpp"
#include "hash.hpp"

namespace massive {

using json = nlohmann::json;

enum class ResidualVariant { pre_ln, residual_dropout, sandwich_ln };
enum class NormKind { rmsnorm, layernorm };
enum class Positional { rope, none };

NLOHMANN_JSON_SERIALIZE_ENUM(ResidualVariant, {
                                                  {ResidualVariant::pre_ln, "pre_ln"},
                                                  {ResidualVariant::residual_dropout, "residual_dropout"},
                                                  {ResidualVariant::sandwich_ln, "sandwich_ln"},
                                              })
NLOHMANN_JSON_SERIALIZE_ENUM(NormKind, {
                                           {NormKind::rmsnorm, "rmsnorm"},
                                           {NormKind::layernorm, "layernorm"},
                                       })
NLOHMANN_JSON_SERIALIZE_ENUM(Positional, {
                                             {Positional::rope, "rope"},
                                             {Positional::none, "none"},
                                         })

struct MoeConfig {
    std::size_t num_experts = 8;
    std::size_t top_t = 2;
    std::set<std::size_t> layers; // 1-based
};

// Architecture hyperparameters. Layers are numbered 1..num_layers throughout.
struct ModelConfig {
    std::string family = "toy";
    int schema_version = 1;
    std::size_t vocab_size = 0;
    std::size_t hidden_dim = 0;
    std::size_t ffn_dim = 0;
    std::size_t num_layers = 0;
    std::size_t num_heads = 1;
    std::size_t head_dim = 0;
    std::size_t num_kv_heads = 0; // 0 means num_heads
    ResidualVariant residual_variant = ResidualVariant::pre_ln;
    double residual_dropout = 0.0;
    NormKind norm_kind = NormKind::rmsnorm;
    double norm_eps = 1e-5;
    Positional positional = Positional::rope;
    double rope_theta = 10000.0;
    std::uint32_t bos_token_id = 0;
    std::optional<MoeConfig> moe;
    std::string activation = "silu";

    std::size_t kv_heads() const { return num_kv_heads == 0 ? num_heads : num_kv_heads; }

    bool is_moe_layer(std::size_t layer) const { return moe && moe->layers.count(layer) != 0; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("invalid model config: " + m); };
        if (vocab_size == 0 || hidden_dim == 0 || ffn_dim == 0 || num_layers == 0 || num_heads == 0) {
            fail("extents must be positive");
        }
        if (hidden_dim != num_heads * head_dim) {
            fail("hidden_dim must equal num_heads * head_dim");
        }
        if (num_heads % kv_heads() != 0) {
            fail("num_heads must be a multiple of num_kv_heads");
        }
        if (bos_token_id >= vocab_size) {
            fail("bos_token_id must be below vocab_size");
        }
        if (norm_eps < 0) {
            fail("norm_eps must be non-negative");
        }
        if (residual_dropout < 0 || residual_dropout >= 1) {
            fail("residual_dropout must lie in [0, 1)");
        }
        if (positional == Positional::rope && head_dim % 2 != 0) {
            fail("rope needs an even head_dim");
        }
        if (activation != "silu") {
            fail("only the silu activation is supported");
        }
        if (moe) {
            if (moe->num_experts < 2) {
                fail("a mixture of experts needs at least two experts");
            }
            if (moe->top_t == 0 || moe->top_t > moe->num_experts) {
                fail("moe top_t must lie in [1, num_experts]");
            }
            for (std::size_t l : moe->layers) {
                if (l < 1 || l > num_layers) {
                    fail("moe layer " + std::to_string(l) + " outside [1, num_layers]");
                }
            }
        }
    }

    void require_layer(std::size_t layer) const {
        if (layer < 1 || layer > num_layers) {
            throw InputError("layer " + std::to_string(layer) + " outside [1, " + std::to_string(num_layers) + "]");
        }
    }
};

inline void to_json(json& j, const ModelConfig& c) {
    j = json{
        {"family", c.family},
        {"schema_version", c.schema_version},
        {"vocab_size", c.vocab_size},
        {"hidden_dim", c.hidden_dim},
        {"ffn_dim", c.ffn_dim},
        {"num_layers", c.num_layers},
        {"num_heads", c.num_heads},
        {"head_dim", c.head_dim},
        {"num_kv_heads", c.kv_heads()},
        {"residual_variant", c.residual_variant},
        {"residual_dropout", c.residual_dropout},
        {"norm_kind", c.norm_kind},
        {"norm_eps", c.norm_eps},
        {"positional", c.positional},
        {"rope_theta", c.rope_theta},
        {"bos_token_id", c.bos_token_id},
        {"activation", c.activation},
    };
    if (c.moe) {
        j["moe"] = json{{"num_experts", c.moe->num_experts},
                        {"top_t", c.moe->top_t},
                        {"layers", std::vector<std::size_t>(c.moe->layers.begin(), c.moe->layers.end())}};
    } else {
        j["moe"] = nullptr;
    }
}

inline void from_json(const json& j, ModelConfig& c) {
    try {
        c = ModelConfig{};
        c.family = j.value("family", std::string("toy"));
        c.schema_version = j.value("schema_version", 1);
        j.at("vocab_size").get_to(c.vocab_size);
        j.at("hidden_dim").get_to(c.hidden_dim);
        j.at("ffn_dim").get_to(c.ffn_dim);
        j.at("num_layers").get_to(c.num_layers);
        j.at("num_heads").get_to(c.num_heads);
        c.head_dim = j.value("head_dim", c.num_heads ? c.hidden_dim / c.num_heads : 0);
        c.num_kv_heads = j.value("num_kv_heads", c.num_heads);
        c.residual_variant = j.value("residual_variant", ResidualVariant::pre_ln);
        c.residual_dropout = j.value("residual_dropout", 0.0);
        c.norm_kind = j.value("norm_kind", NormKind::rmsnorm);
        c.norm_eps = j.value("norm_eps", 1e-5);
        c.positional = j.value("positional", Positional::rope);
        c.rope_theta = j.value("rope_theta", 10000.0);
        c.bos_token_id = j.value("bos_token_id", std::uint32_t{0});
        c.activation = j.value("activation", std::string("silu"));
        if (j.contains("moe") && !j.at("moe").is_null()) {
            const json& m = j.at("moe");
            MoeConfig moe;
            m.at("num_experts").get_to(moe.num_experts);
            moe.top_t = m.value("top_t", std::size_t{2});
            for (std::size_t l : m.at("layers").get<std::vector<std::size_t>>()) {
                moe.layers.insert(l);
            }
            c.moe = moe;
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed model config: ") + e.what());
    }
    c.validate();
}

// Stable identity of a configuration: SHA-256 of its canonical JSON, 16 hex digits.
inline std::string config_hash(const ModelConfig& c) {
    return sha256_hex(json(c).dump()).substr(0, 16);
}

} // namespace massive
