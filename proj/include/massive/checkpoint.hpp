#pragma once

#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "fileio.hpp"
#include "lora.hpp"
#include "params.hpp"
#include "safetensors.hpp"

namespace massive {

// ---------------------------------------------------------------------------
// Family schema tables: how external tensor names and config keys map onto
// the internal ones. Kept as data in schemas/families.json.

struct TensorMapping {
    std::string name_template; // external name with {l0}, {l}, {e}
    bool transpose = false;
    double offset = 0.0; // added after loading (e.g. norms stored as gain - 1)
    std::optional<std::string> fallback;
};

struct FamilySchema {
    std::string family;
    std::vector<std::string> model_types;
    bool identity = false;
    std::map<std::string, std::string> config_keys; // internal key -> external key
    std::optional<json> moe;
    json fixed = json::object();
    std::vector<std::pair<std::regex, TensorMapping>> tensors;
    std::vector<std::string> tensor_keys; // internal templates, for error messages
};

inline fs::path default_schema_path() {
    if (const char* env = std::getenv("MASSIVE_SCHEMA_PATH"); env && *env) {
        return env;
    }
#ifdef MASSIVE_SCHEMA_FILE
    return MASSIVE_SCHEMA_FILE;
#else
    return "schemas/families.json";
#endif
}

class SchemaTable {
public:
    static SchemaTable load(const fs::path& path = default_schema_path()) {
        if (!fs::exists(path)) {
            throw IoError("schema table not found: " + path.string());
        }
        json j;
        try {
            j = json::parse(read_file(path));
        } catch (const json::exception& e) {
            throw ConfigError("schema table " + path.string() + ": " + e.what());
        }
        return SchemaTable(j);
    }

    explicit SchemaTable(const json& j) {
        try {
            version_ = j.at("schema_version").get<int>();
            for (const auto& [fam, spec] : j.at("families").items()) {
                FamilySchema f;
                f.family = fam;
                f.model_types = spec.value("model_types", std::vector<std::string>{});
                f.identity = spec.value("identity", false);
                if (spec.contains("config")) {
                    f.config_keys = spec.at("config").get<std::map<std::string, std::string>>();
                }
                if (spec.contains("moe")) {
                    f.moe = spec.at("moe");
                }
                f.fixed = spec.value("fixed", json::object());
                if (spec.contains("tensors")) {
                    for (const auto& [internal, m] : spec.at("tensors").items()) {
                        TensorMapping tm;
                        tm.name_template = m.at("name").get<std::string>();
                        tm.transpose = m.value("transpose", false);
                        tm.offset = m.value("offset", 0.0);
                        if (m.contains("fallback")) {
                            tm.fallback = m.at("fallback").get<std::string>();
                        }
                        f.tensors.emplace_back(template_regex(internal), std::move(tm));
                        f.tensor_keys.push_back(internal);
                    }
                }
                families_.emplace(fam, std::move(f));
            }
        } catch (const json::exception& e) {
            throw ConfigError(std::string("malformed schema table: ") + e.what());
        }
    }

    int version() const noexcept { return version_; }

    const FamilySchema& family(const std::string& name) const {
        auto it = families_.find(name);
        if (it == families_.end()) {
            throw ConfigError("unknown model family '" + name + "'");
        }
        return it->second;
    }

    const FamilySchema& for_model_type(const std::string& model_type) const {
        for (const auto& [_, f] : families_) {
            if (std::find(f.model_types.begin(), f.model_types.end(), model_type) != f.model_types.end()) {
                return f;
            }
        }
        throw ConfigError("no schema family handles model_type '" + model_type + "'");
    }

private:
    // "layers.{l}.experts.{e}.w_up" -> ^layers\.(\d+)\.experts\.(\d+)\.w_up$ with named slots in order.
    static std::regex template_regex(const std::string& tmpl) {
        std::string re = "^";
        for (std::size_t i = 0; i < tmpl.size(); ++i) {
            if (tmpl.compare(i, 3, "{l}") == 0 || tmpl.compare(i, 3, "{e}") == 0) {
                re += "(\\d+)";
                i += 2;
            } else if (std::string(".[]()*+?^$|\\{}").find(tmpl[i]) != std::string::npos) {
                re += '\\';
                re += tmpl[i];
            } else {
                re += tmpl[i];
            }
        }
        return std::regex(re + "$");
    }

    int version_ = 0;
    std::map<std::string, FamilySchema> families_;
};

namespace detail {

inline std::string substitute(std::string s, const std::string& key, const std::string& value) {
    for (std::size_t p = s.find(key); p != std::string::npos; p = s.find(key, p + value.size())) {
        s.replace(p, key.size(), value);
    }
    return s;
}

// Resolves an internal name to its external mapping under `f`.
inline std::optional<TensorMapping> map_tensor(const FamilySchema& f, const std::string& internal) {
    if (f.identity) {
        return TensorMapping{internal, false, 0.0, std::nullopt};
    }
    for (std::size_t i = 0; i < f.tensors.size(); ++i) {
        std::smatch m;
        if (!std::regex_match(internal, m, f.tensors[i].first)) {
            continue;
        }
        TensorMapping tm = f.tensors[i].second;
        const std::string& key = f.tensor_keys[i];
        std::size_t group = 1;
        std::optional<std::size_t> layer, expert;
        for (std::size_t p = 0; p < key.size(); ++p) {
            if (key.compare(p, 3, "{l}") == 0) {
                layer = std::stoul(m[group++].str());
            } else if (key.compare(p, 3, "{e}") == 0) {
                expert = std::stoul(m[group++].str());
            }
        }
        if (layer) {
            tm.name_template = substitute(tm.name_template, "{l0}", std::to_string(*layer - 1));
            tm.name_template = substitute(tm.name_template, "{l}", std::to_string(*layer));
        }
        if (expert) {
            tm.name_template = substitute(tm.name_template, "{e}", std::to_string(*expert));
        }
        return tm;
    }
    return std::nullopt;
}

inline const json* find_key(const json& j, const std::string& key) {
    auto it = j.find(key);
    return (it == j.end() || it->is_null()) ? nullptr : &*it;
}

// Builds a ModelConfig from a foreign config.json via the family's key table.
inline ModelConfig translate_config(const json& hf, const FamilySchema& f) {
    json ours = f.fixed;
    for (const auto& [internal, external] : f.config_keys) {
        if (const json* v = find_key(hf, external)) {
            ours[internal] = *v;
        }
    }
    if (ours.contains("bos_token_id") && ours["bos_token_id"].is_array()) {
        ours["bos_token_id"] = ours["bos_token_id"].empty() ? json(0) : ours["bos_token_id"][0];
    }
    if (!ours.contains("head_dim") && ours.contains("hidden_dim") && ours.contains("num_heads")) {
        ours["head_dim"] = ours["hidden_dim"].get<std::size_t>() / ours["num_heads"].get<std::size_t>();
    }
    if (f.moe) {
        json moe;
        moe["num_experts"] = hf.at(f.moe->at("num_experts").get<std::string>());
        moe["top_t"] = hf.at(f.moe->at("top_t").get<std::string>());
        moe["layers"] = json::array();
        if (f.moe->value("layers", std::string("all")) == "all") {
            for (std::size_t l = 1; l <= ours.at("num_layers").get<std::size_t>(); ++l) {
                moe["layers"].push_back(l);
            }
        }
        ours["moe"] = moe;
    }
    ours["family"] = f.family;
    return ours.get<ModelConfig>();
}

} // namespace detail

// ---------------------------------------------------------------------------
// Files on disk.

struct CheckpointPaths {
    fs::path config;
    std::vector<fs::path> shards; // one entry unless an index file lists several
    std::optional<fs::path> index;
};

// Sidecar config of a single weight file: same stem, ".json" extension.
inline fs::path config_path_for(const fs::path& weights) {
    fs::path c = weights;
    c.replace_extension(".json");
    return c;
}

// A directory (config.json + model.safetensors or model.safetensors.index.json),
// a shard index file, or a single weight file with a sidecar config.
inline CheckpointPaths resolve_checkpoint(const fs::path& path) {
    CheckpointPaths out;
    if (!fs::exists(path)) {
        throw InputError("checkpoint not found: " + path.string());
    }
    auto read_index = [&](const fs::path& idx) {
        out.index = idx;
        json j;
        try {
            j = json::parse(read_file(idx));
        } catch (const json::exception& e) {
            throw CheckpointError(CheckpointFault::bad_header, "", "index " + idx.string() + ": " + e.what());
        }
        std::set<std::string> files;
        for (const auto& [_, file] : j.at("weight_map").items()) {
            files.insert(file.get<std::string>());
        }
        for (const auto& f : files) {
            out.shards.push_back(idx.parent_path() / f);
        }
    };
    if (fs::is_directory(path)) {
        out.config = path / "config.json";
        if (fs::exists(path / "model.safetensors")) {
            out.shards.push_back(path / "model.safetensors");
        } else if (fs::exists(path / "model.safetensors.index.json")) {
            read_index(path / "model.safetensors.index.json");
        } else {
            throw InputError("no model.safetensors or model.safetensors.index.json in " + path.string());
        }
    } else if (path.filename().string().ends_with(".index.json")) {
        out.config = path.parent_path() / "config.json";
        read_index(path);
    } else {
        out.config = config_path_for(path);
        if (!fs::exists(out.config) && fs::exists(path.parent_path() / "config.json")) {
            out.config = path.parent_path() / "config.json";
        }
        out.shards.push_back(path);
    }
    if (!fs::exists(out.config)) {
        throw InputError("checkpoint config not found: " + out.config.string());
    }
    return out;
}

// Reads tensors lazily by internal name, so large checkpoints can be processed
// one layer at a time.
class CheckpointReader {
public:
    explicit CheckpointReader(const fs::path& path, std::optional<fs::path> schema_path = std::nullopt)
        : paths_(resolve_checkpoint(path)) {
        json cj;
        try {
            cj = json::parse(read_file(paths_.config));
        } catch (const json::exception& e) {
            throw ConfigError("config " + paths_.config.string() + ": " + e.what());
        }
        if (cj.contains("model_type")) {
            schema_ = std::make_shared<SchemaTable>(SchemaTable::load(schema_path.value_or(default_schema_path())));
            family_ = schema_->for_model_type(cj.at("model_type").get<std::string>());
            try {
                config_ = detail::translate_config(cj, family_);
            } catch (const json::exception& e) {
                throw ConfigError("config " + paths_.config.string() + ": " + e.what());
            }
        } else {
            try {
                config_ = cj.get<ModelConfig>();
            } catch (const json::exception& e) {
                throw ConfigError("config " + paths_.config.string() + ": " + e.what());
            }
            family_.family = config_.family;
            family_.identity = true;
        }
        config_.validate();
        for (const auto& shard : paths_.shards) {
            files_.push_back(std::make_unique<safetensors::File>(shard));
            for (const auto& [name, _] : files_.back()->entries()) {
                if (!owner_.emplace(name, files_.size() - 1).second) {
                    throw CheckpointError(CheckpointFault::bad_header, name, "tensor appears in more than one shard");
                }
            }
        }
    }

    const ModelConfig& config() const noexcept { return config_; }
    const CheckpointPaths& paths() const noexcept { return paths_; }
    bool foreign() const noexcept { return !family_.identity; }

    bool has_external(const std::string& name) const { return owner_.count(name) != 0; }

    template <Scalar T>
    Tensor<T> load(const TensorSpec& spec) const {
        const TensorMapping m = mapping(spec.name);
        const std::string ext = external_name(m, spec.name);
        Tensor<T> t = file_of(ext).template read<T>(ext);
        if (m.transpose) {
            if (t.rank() != 2) {
                throw CheckpointError(CheckpointFault::shape_mismatch, spec.name, "transposed tensor is not a matrix");
            }
            t = transpose(t);
        }
        if (t.shape() != spec.shape) {
            throw CheckpointError(CheckpointFault::shape_mismatch, spec.name,
                                  "expected " + shape_string(spec.shape) + ", found " + shape_string(t.shape()));
        }
        if (m.offset != 0.0) {
            for (T& v : t.data()) {
                v += static_cast<T>(m.offset);
            }
        }
        return t;
    }

    // One embedding row, without reading the whole table.
    template <Scalar T>
    Tensor<T> embedding_row(std::uint32_t token) const {
        const TensorMapping m = mapping(names::embed());
        const std::string ext = external_name(m, names::embed());
        const auto& e = file_of(ext).entry(ext);
        if (e.shape.size() != 2 || e.shape[0] != config_.vocab_size || e.shape[1] != config_.hidden_dim) {
            throw CheckpointError(CheckpointFault::shape_mismatch, names::embed(),
                                  "unexpected shape " + shape_string(e.shape));
        }
        return file_of(ext).template read_row<T>(ext, token);
    }

    // Every tensor of one layer (1-based), by internal name.
    template <Scalar T>
    ParameterStore<T> load_layer(std::size_t l) const {
        config_.require_layer(l);
        ParameterStore<T> out;
        const std::string prefix = names::layer(l);
        for (const TensorSpec& spec : architecture_schema(config_)) {
            if (spec.name.starts_with(prefix)) {
                out.set(spec.name, load<T>(spec));
            }
        }
        return out;
    }

private:
    TensorMapping mapping(const std::string& internal) const {
        auto m = detail::map_tensor(family_, internal);
        if (!m) {
            throw CheckpointError(CheckpointFault::missing_tensor, internal,
                                  "no mapping in family '" + family_.family + "'");
        }
        return *m;
    }

    std::string external_name(const TensorMapping& m, const std::string& internal) const {
        if (has_external(m.name_template)) {
            return m.name_template;
        }
        if (m.fallback && has_external(*m.fallback)) {
            return *m.fallback;
        }
        throw CheckpointError(CheckpointFault::missing_tensor, internal,
                              foreign() ? "expected " + m.name_template : "not in checkpoint");
    }

    const safetensors::File& file_of(const std::string& external) const { return *files_[owner_.at(external)]; }

    CheckpointPaths paths_;
    std::shared_ptr<SchemaTable> schema_;
    FamilySchema family_;
    ModelConfig config_;
    std::vector<std::unique_ptr<safetensors::File>> files_;
    std::map<std::string, std::size_t> owner_;
};

template <Scalar T>
struct Checkpoint {
    ModelConfig config;
    ParameterStore<T> params;
};

// Loads every tensor of the architecture. Either the whole store is returned
// or an error is thrown; nothing partial escapes.
template <Scalar T = float>
Checkpoint<T> load_checkpoint(const fs::path& path, std::optional<fs::path> schema_path = std::nullopt) {
    CheckpointReader reader(path, std::move(schema_path));
    Checkpoint<T> out{reader.config(), {}};
    for (const TensorSpec& spec : architecture_schema(out.config)) {
        out.params.set(spec.name, reader.load<T>(spec));
    }
    return out;
}

// Canonical weight bytes of a store (internal names, name order, native dtype).
template <Scalar T>
std::string serialize_weights(const ModelConfig& config, const ParameterStore<T>& params) {
    std::map<std::string, const Tensor<T>*> view;
    for (const auto& [name, t] : params.tensors()) {
        view.emplace(name, &t);
    }
    return safetensors::serialize(view, json{{"config_hash", config_hash(config)}});
}

inline std::string serialize_config(const ModelConfig& config) { return json(config).dump(2) + "\n"; }

// Writes weights and the sidecar config (or config.json in a directory), each atomically.
template <Scalar T>
void save_checkpoint(const fs::path& path, const ModelConfig& config, const ParameterStore<T>& params) {
    config.validate();
    params.validate(config);
    fs::path weights = path, cfg;
    if (fs::is_directory(path)) {
        weights = path / "model.safetensors";
        cfg = path / "config.json";
    } else {
        cfg = config_path_for(path);
    }
    atomic_write(weights, serialize_weights(config, params));
    atomic_write(cfg, serialize_config(config));
}

// SHA-256 of the canonical re-serialisation.
template <Scalar T>
std::string checkpoint_digest(const ModelConfig& config, const ParameterStore<T>& params) {
    return sha256_hex(serialize_weights(config, params));
}

// Adapters are stored as "<target>.lora_A" / "<target>.lora_B" with rank and
// alpha in the header metadata.
template <Scalar T>
void save_adapters(const fs::path& path, const LoraAdapterSet<T>& set) {
    std::map<std::string, const Tensor<T>*> view;
    for (const auto& [name, ad] : set.adapters) {
        view.emplace(name + ".lora_A", &ad.a);
        view.emplace(name + ".lora_B", &ad.b);
    }
    safetensors::write(path, view, json{{"rank", std::to_string(set.rank)}, {"alpha", json(set.alpha).dump()}});
}

template <Scalar T = float>
LoraAdapterSet<T> load_adapters(const fs::path& path) {
    const safetensors::File file(path);
    LoraAdapterSet<T> set;
    try {
        set.rank = std::stoul(file.metadata().at("rank").get<std::string>());
        set.alpha = std::stod(file.metadata().at("alpha").get<std::string>());
    } catch (const std::exception& e) {
        throw CheckpointError(CheckpointFault::bad_header, "", "adapter file lacks rank/alpha metadata");
    }
    for (const auto& [name, _] : file.entries()) {
        if (!name.ends_with(".lora_A")) {
            continue;
        }
        const std::string target = name.substr(0, name.size() - 7);
        LoraAdapter<T> ad{file.read<T>(name), file.read<T>(target + ".lora_B")};
        if (ad.a.rank() != 2 || ad.b.rank() != 2 || ad.a.dim(0) != set.rank || ad.b.dim(1) != set.rank) {
            throw CheckpointError(CheckpointFault::shape_mismatch, target, "adapter shapes disagree with rank");
        }
        set.adapters.emplace(target, std::move(ad));
    }
    return set;
}

} // namespace massive
