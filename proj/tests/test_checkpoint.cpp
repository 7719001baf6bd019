#include <catch_amalgamated.hpp>

#include <bit>
#include <cstring>
#include <fstream>

#include <massive/checkpoint.hpp>
#include <massive/probe_stream.hpp>
#include <massive/token_stream.hpp>

#include "support/random_model.hpp"
#include "support/tempdir.hpp"

using namespace massive;
using support::TempDir;

namespace {

const fs::path fixture_dir = MASSIVE_FIXTURE_DIR;

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void dump(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out << bytes;
}

// Hand-assembled container: u64 length prefix, header text, payload.
std::string raw_container(const std::string& header, const std::string& payload) {
    std::string out(8, '\0');
    const std::uint64_t n = header.size();
    std::memcpy(out.data(), &n, 8);
    return out + header + payload;
}

std::string float_bytes(std::initializer_list<float> v) {
    std::string s(v.size() * 4, '\0');
    std::memcpy(s.data(), std::data(v), s.size());
    return s;
}

CheckpointFault load_fault(const fs::path& weights) {
    try {
        (void)load_checkpoint<float>(weights);
    } catch (const CheckpointError& e) {
        return e.fault;
    }
    FAIL("expected a checkpoint error");
    return CheckpointFault::truncated;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 19, c.hidden_dim = 8, c.ffn_dim = 12, c.num_layers = 2, c.num_heads = 2, c.head_dim = 4;
    c.bos_token_id = 3;
    return c;
}

} // namespace

TEST_CASE("committed fixture re-serializes to its recorded digest") {
    const auto ck = load_checkpoint<float>(fixture_dir / "seed11.st");
    CHECK(ck.config.num_layers == 2);
    CHECK(ck.config.hidden_dim == 16);
    std::string recorded = slurp(fixture_dir / "seed11.sha256");
    recorded.erase(recorded.find_last_not_of(" \n") + 1);
    CHECK(checkpoint_digest(ck.config, ck.params) == recorded);
    // the fixture is the seed-11 initialization
    CHECK(ck.params == init_parameters<float>(ck.config, 11));
}

TEST_CASE("save(load(x)) is byte-identical and loading does not touch the file") {
    TempDir dir;
    const auto src = fixture_dir / "seed11.st";
    const std::string before = sha256_file(src);
    const auto ck = load_checkpoint<float>(src);
    CHECK(sha256_file(src) == before);
    save_checkpoint(dir / "copy.st", ck.config, ck.params);
    CHECK(slurp(dir / "copy.st") == slurp(src));
    CHECK(slurp(dir / "copy.json") == slurp(fixture_dir / "seed11.json"));
    const auto again = load_checkpoint<float>(dir / "copy.st");
    save_checkpoint(dir / "again.st", again.config, again.params);
    CHECK(slurp(dir / "again.st") == slurp(src));
}

TEST_CASE("f64 stores round-trip exactly") {
    TempDir dir;
    Rng rng(3);
    const auto c = support::random_config(rng, ResidualVariant::sandwich_ln);
    const auto p = support::random_params<double>(c, 4);
    save_checkpoint(dir / "m.st", c, p);
    const auto back = load_checkpoint<double>(dir / "m.st");
    CHECK(back.params == p);
    CHECK(config_hash(back.config) == config_hash(c));
}

TEST_CASE("directory checkpoints use config.json and model.safetensors") {
    TempDir dir;
    const auto c = tiny_config();
    const auto p = init_parameters<float>(c, 2);
    save_checkpoint(dir.path(), c, p);
    CHECK(fs::exists(dir / "config.json"));
    CHECK(fs::exists(dir / "model.safetensors"));
    CHECK(load_checkpoint<float>(dir.path()).params == p);
}

TEST_CASE("malformed containers raise distinct faults") {
    TempDir dir;
    const auto c = tiny_config();
    const auto p = init_parameters<float>(c, 1);
    save_checkpoint(dir / "good.st", c, p);
    const std::string good = slurp(dir / "good.st");
    auto with_config = [&](const std::string& name, const std::string& bytes) {
        dump(dir / (name + ".st"), bytes);
        fs::copy_file(dir / "good.json", dir / (name + ".json"), fs::copy_options::overwrite_existing);
        return dir / (name + ".st");
    };

    SECTION("truncated header") {
        CHECK(load_fault(with_config("t1", good.substr(0, 5))) == CheckpointFault::truncated);
        CHECK(load_fault(with_config("t2", good.substr(0, 40))) == CheckpointFault::truncated);
    }
    SECTION("truncated payload") {
        CHECK(load_fault(with_config("t3", good.substr(0, good.size() - 4))) == CheckpointFault::truncated);
    }
    SECTION("unparsable header") {
        CHECK(load_fault(with_config("b", raw_container("{not json", ""))) == CheckpointFault::bad_header);
    }
    SECTION("unknown dtype") {
        const auto path = with_config(
            "d", raw_container(R"({"embed.weight":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}})", "x"));
        CHECK(load_fault(path) == CheckpointFault::unknown_dtype);
    }
    SECTION("overlapping offsets") {
        const auto path = with_config("o", raw_container(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},)"
                                                         R"("b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})",
                                                         float_bytes({1, 2, 3})));
        CHECK(load_fault(path) == CheckpointFault::overlapping_offsets);
    }
    SECTION("declared shape does not cover the byte span") {
        const auto path =
            with_config("s", raw_container(R"({"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", float_bytes({1, 2})));
        CHECK(load_fault(path) == CheckpointFault::shape_mismatch);
    }
    SECTION("missing tensor names the tensor") {
        auto q = p;
        q.erase(names::wk(2));
        std::map<std::string, const Tensor<float>*> view;
        for (const auto& [n, t] : q.tensors()) view.emplace(n, &t);
        const auto path = with_config("m", safetensors::serialize(view));
        try {
            (void)load_checkpoint<float>(path);
            FAIL("expected missing tensor");
        } catch (const CheckpointError& e) {
            CHECK(e.fault == CheckpointFault::missing_tensor);
            CHECK(std::string(e.what()).find(names::wk(2)) != std::string::npos);
        }
    }
    SECTION("tensor shape disagrees with the config") {
        auto q = p;
        q.set(names::w_up(1), Tensor<float>({c.ffn_dim + 1, c.hidden_dim}));
        std::map<std::string, const Tensor<float>*> view;
        for (const auto& [n, t] : q.tensors()) view.emplace(n, &t);
        CHECK(load_fault(with_config("x", safetensors::serialize(view))) == CheckpointFault::shape_mismatch);
    }
}

TEST_CASE("half-precision payloads are widened exactly") {
    CHECK(safetensors::bf16_to_f32(0x3F80) == 1.0f);
    CHECK(safetensors::bf16_to_f32(0xC040) == -3.0f);
    CHECK(safetensors::f16_to_f32(0x3C00) == 1.0f);
    CHECK(safetensors::f16_to_f32(0xC000) == -2.0f);
    CHECK(safetensors::f16_to_f32(0x7BFF) == 65504.0f);
    CHECK(safetensors::f16_to_f32(0x0001) == std::ldexp(1.0f, -24));
    CHECK(std::isinf(safetensors::f16_to_f32(0x7C00)));
    // every bf16 pattern is the high half of its f32
    for (std::uint32_t h = 0; h < 65536; h += 97) {
        const float f = safetensors::bf16_to_f32(static_cast<std::uint16_t>(h));
        CHECK(std::bit_cast<std::uint32_t>(f) >> 16 == h);
    }
}

namespace {

// Writes `p` under Hugging Face llama names, bf16, split over two shards.
void write_llama_dir(const fs::path& dir, const ModelConfig& c, const ParameterStore<float>& p) {
    auto bf16 = [](const Tensor<float>& t) {
        std::string s(t.numel() * 2, '\0');
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const std::uint16_t h = static_cast<std::uint16_t>(std::bit_cast<std::uint32_t>(t[i]) >> 16);
            std::memcpy(s.data() + 2 * i, &h, 2);
        }
        return s;
    };
    std::map<std::string, Tensor<float>> hf;
    hf["model.embed_tokens.weight"] = p.at(names::embed());
    hf["model.norm.weight"] = p.at(names::final_norm());
    hf["lm_head.weight"] = transpose(p.at(names::lm_head()));
    for (std::size_t l = 1; l <= c.num_layers; ++l) {
        const std::string pre = "model.layers." + std::to_string(l - 1) + ".";
        hf[pre + "input_layernorm.weight"] = p.at(names::attn_norm(l));
        hf[pre + "post_attention_layernorm.weight"] = p.at(names::ffn_norm(l));
        hf[pre + "self_attn.q_proj.weight"] = p.at(names::wq(l));
        hf[pre + "self_attn.k_proj.weight"] = p.at(names::wk(l));
        hf[pre + "self_attn.v_proj.weight"] = p.at(names::wv(l));
        hf[pre + "self_attn.o_proj.weight"] = p.at(names::wo(l));
        hf[pre + "mlp.gate_proj.weight"] = p.at(names::w_gate(l));
        hf[pre + "mlp.up_proj.weight"] = p.at(names::w_up(l));
        hf[pre + "mlp.down_proj.weight"] = p.at(names::w_down(l));
    }
    json index{{"metadata", json::object()}, {"weight_map", json::object()}};
    json headers[2] = {json::object(), json::object()};
    std::string payloads[2];
    std::size_t i = 0;
    for (const auto& [name, t] : hf) {
        const int shard = (i++ % 2);
        const std::string bytes = bf16(t);
        headers[shard][name] = {{"dtype", "BF16"},
                                {"shape", t.shape()},
                                {"data_offsets", {payloads[shard].size(), payloads[shard].size() + bytes.size()}}};
        payloads[shard] += bytes;
        index["weight_map"][name] = "model-0000" + std::to_string(shard + 1) + "-of-00002.safetensors";
    }
    for (int s = 0; s < 2; ++s) {
        dump(dir / ("model-0000" + std::to_string(s + 1) + "-of-00002.safetensors"),
             raw_container(headers[s].dump(), payloads[s]));
    }
    dump(dir / "model.safetensors.index.json", index.dump());
    const json cfg{{"model_type", "llama"},
                   {"vocab_size", c.vocab_size},
                   {"hidden_size", c.hidden_dim},
                   {"intermediate_size", c.ffn_dim},
                   {"num_hidden_layers", c.num_layers},
                   {"num_attention_heads", c.num_heads},
                   {"num_key_value_heads", c.kv_heads()},
                   {"rms_norm_eps", c.norm_eps},
                   {"rope_theta", c.rope_theta},
                   {"bos_token_id", c.bos_token_id},
                   {"hidden_act", "silu"},
                   {"tie_word_embeddings", false}};
    dump(dir / "config.json", cfg.dump());
}

ParameterStore<float> bf16_rounded(const ParameterStore<float>& p) {
    ParameterStore<float> out = p;
    for (const auto& [name, t] : p.tensors()) {
        auto& o = out.at(name);
        for (std::size_t i = 0; i < t.numel(); ++i)
            o[i] = std::bit_cast<float>(std::bit_cast<std::uint32_t>(t[i]) & 0xFFFF0000u);
    }
    return out;
}

} // namespace

TEST_CASE("foreign llama-style sharded bf16 checkpoints map onto internal names") {
    TempDir dir;
    ModelConfig c = tiny_config();
    c.num_kv_heads = 1;
    const auto p = bf16_rounded(support::random_params<float>(c, 8));
    write_llama_dir(dir.path(), c, p);
    const auto ck = load_checkpoint<float>(dir.path());
    CHECK(ck.config.family == "llama");
    CHECK(ck.config.kv_heads() == 1);
    CHECK(ck.config.bos_token_id == 3);
    CHECK(ck.params == p);
    // via the index file too
    CHECK(load_checkpoint<float>(dir / "model.safetensors.index.json").params == p);

    SECTION("streaming probe equals the in-memory probe") {
        CheckpointReader reader(dir.path());
        const auto a = streaming_find_massive_weights<float>(reader, 4);
        const auto b = find_massive_weights(ck.config, ck.params, 4);
        CHECK(json(a) == json(b));
        CHECK(reader.embedding_row<float>(5) == Tensor<float>({c.hidden_dim}, std::vector<float>(p.at(names::embed()).row(5).begin(), p.at(names::embed()).row(5).end())));
    }
    SECTION("tied embeddings fall back to the embedding table") {
        // drop lm_head.weight from the index and its shard by rewriting with a tied config
        auto q = p;
        q.set(names::lm_head(), transpose(p.at(names::embed())));
        TempDir tied;
        write_llama_dir(tied.path(), c, q);
        // remove lm_head from whichever shard holds it
        json index = json::parse(slurp(tied / "model.safetensors.index.json"));
        const std::string shard = index["weight_map"]["lm_head.weight"];
        const safetensors::File f(tied / shard);
        std::map<std::string, Tensor<float>> keep;
        for (const auto& [n, _] : f.entries())
            if (n != "lm_head.weight") keep.emplace(n, f.read<float>(n));
        std::map<std::string, const Tensor<float>*> view;
        for (const auto& [n, t] : keep) view.emplace(n, &t);
        dump(tied / shard, safetensors::serialize(view));
        index["weight_map"].erase("lm_head.weight");
        dump(tied / "model.safetensors.index.json", index.dump());
        CHECK(load_checkpoint<float>(tied.path()).params == q);
    }
}

TEST_CASE("schema table covers the four families") {
    const auto table = SchemaTable::load();
    CHECK(table.version() == 1);
    for (const char* f : {"toy", "llama", "moe", "sandwich"}) CHECK_NOTHROW(table.family(f));
    CHECK(table.for_model_type("mistral").family == "llama");
    CHECK(table.for_model_type("mixtral").family == "moe");
    CHECK(table.for_model_type("gemma2").family == "sandwich");
    CHECK_THROWS_AS(table.for_model_type("bert"), ConfigError);
    const auto m = detail::map_tensor(table.family("moe"), "layers.3.experts.5.w_up");
    REQUIRE(m);
    CHECK(m->name_template == "model.layers.2.block_sparse_moe.experts.5.w3.weight");
    const auto r = detail::map_tensor(table.family("moe"), "layers.1.router");
    REQUIRE(r);
    CHECK(r->transpose);
    const auto n = detail::map_tensor(table.family("sandwich"), "layers.2.post_ffn_norm.weight");
    REQUIRE(n);
    CHECK(n->offset == 1.0);
}

TEST_CASE("adapters round-trip through a file") {
    TempDir dir;
    const auto c = tiny_config();
    auto ad = make_lora_adapters<float>(c, 3, 6.0, 4);
    Rng rng(1);
    for (auto& [_, a] : ad.adapters)
        for (float& v : a.b.data()) v = static_cast<float>(rng.normal());
    save_adapters(dir / "ad.st", ad);
    CHECK(load_adapters<float>(dir / "ad.st") == ad);
}

TEST_CASE("token streams") {
    TempDir dir;
    SECTION("JSON lines") {
        dump(dir / "a.jsonl", "{\"ids\":[0,1,2]}\n");
        CHECK(load_token_stream(dir / "a.jsonl", 3).size() == 3);
        dump(dir / "b.jsonl", "{\"ids\":[0,1]}\n\n{\"ids\":[2]}\n");
        CHECK(load_token_stream(dir / "b.jsonl", 3) == TokenStream{0, 1, 2});
    }
    SECTION("out-of-range id reports its position") {
        dump(dir / "c.jsonl", "{\"ids\":[5]}\n");
        try {
            (void)load_token_stream(dir / "c.jsonl", 3);
            FAIL("expected an input error");
        } catch (const InputError& e) {
            CHECK(std::string(e.what()).find("position 0") != std::string::npos);
        }
    }
    SECTION("binary stream of seeded ids") {
        Rng gen(9);
        TokenStream ids(1000);
        for (auto& id : ids) id = static_cast<std::uint32_t>(gen.below(50000));
        save_token_stream(dir / "ids.bin", ids);
        CHECK(fs::file_size(dir / "ids.bin") == 16 + 4000);
        const auto back = load_token_stream(dir / "ids.bin", 50000);
        Rng regen(9);
        REQUIRE(back.size() == 1000);
        for (std::size_t i = 0; i < 1000; ++i) CHECK(back[i] == regen.below(50000));
    }
    SECTION("binary count mismatch") {
        TokenStream ids{1, 2, 3};
        save_token_stream(dir / "x.bin", ids);
        std::string bytes = slurp(dir / "x.bin");
        dump(dir / "x.bin", bytes.substr(0, bytes.size() - 2));
        CHECK_THROWS_AS(load_token_stream(dir / "x.bin", 10), InputError);
    }
}
