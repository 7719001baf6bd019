#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ledger.hpp"
#include "massive.hpp"
#include "plot.hpp"

namespace massive::cli {

// Levenshtein distance, for "did you mean" hints.
inline std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) {
        prev[j] = j;
    }
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline std::string suggest(const std::string& given, const std::vector<std::string>& known) {
    std::string flag = given.substr(0, given.find('='));
    std::string best;
    std::size_t best_d = std::string::npos;
    for (const auto& k : known) {
        const std::size_t d = edit_distance(flag, k);
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best_d <= std::max<std::size_t>(2, flag.size() / 3) ? best : std::string{};
}

inline std::vector<std::size_t> parse_index_list(const std::string& s, const char* what) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) {
            continue;
        }
        try {
            std::size_t used = 0;
            const long long v = std::stoll(item, &used);
            if (used != item.size() || v < 0) {
                throw std::invalid_argument(item);
            }
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::logic_error&) {
            throw UsageError(std::string("bad ") + what + " entry '" + item + "'");
        }
    }
    return out;
}

// A relative checkpoint path that does not exist is looked up under
// $MASSIVE_CHECKPOINT_DIR; with no path at all that directory itself is used.
inline fs::path checkpoint_path(const std::string& arg) {
    const char* dir = std::getenv("MASSIVE_CHECKPOINT_DIR");
    if (arg.empty()) {
        if (!dir || !*dir) {
            throw UsageError("--checkpoint is required (or set MASSIVE_CHECKPOINT_DIR)");
        }
        return dir;
    }
    fs::path p(arg);
    if (!fs::exists(p) && p.is_relative() && dir && *dir && fs::exists(fs::path(dir) / p)) {
        return fs::path(dir) / p;
    }
    return p;
}

inline ScheduleKind parse_schedule(std::string s) {
    std::replace(s.begin(), s.end(), '-', '_');
    if (s == "step") return ScheduleKind::step;
    if (s == "epoch_before") return ScheduleKind::epoch_before;
    if (s == "epoch_after") return ScheduleKind::epoch_after;
    if (s == "exp") return ScheduleKind::exp;
    throw UsageError("unknown schedule '" + s + "' (step, epoch-before, epoch-after, exp)");
}

struct Ledger {
    std::string path;
    bool disabled = false;

    void add(CLI::App* sub) {
        sub->add_option("--ledger", path, "results ledger CSV (default $MASSIVE_LEDGER or ledger.csv)");
        sub->add_flag("--no-ledger", disabled, "do not append to the results ledger");
    }

    void append(const LedgerEntry& e) const {
        if (disabled) {
            return;
        }
        fs::path p = path;
        if (p.empty()) {
            const char* env = std::getenv("MASSIVE_LEDGER");
            p = env && *env ? fs::path(env) : fs::path("ledger.csv");
        }
        ledger_append(p, e);
    }
};

struct EvalArgs {
    std::string data, mc, metric, normalization = "sum";
    std::size_t window = default_window, stride = default_stride;

    void add(CLI::App* sub) {
        sub->add_option("--stream,--data", data, "token stream for perplexity (JSONL or binary)");
        sub->add_option("--items,--mc", mc, "multiple-choice items (JSONL)");
        sub->add_option("--metric", metric, "perplexity or mc_accuracy (default: from the input given)");
        sub->add_option("--window", window, "perplexity window");
        sub->add_option("--stride", stride, "perplexity stride");
        sub->add_option("--normalization", normalization, "mc scoring: sum or per_token");
    }

    bool any() const { return !data.empty() || !mc.empty(); }

    Normalization norm() const {
        if (normalization == "sum") return Normalization::sum;
        if (normalization == "per_token" || normalization == "per-token") return Normalization::per_token;
        throw UsageError("unknown normalization '" + normalization + "' (sum, per_token)");
    }

    // Loads the evaluation data once and returns a closure scoring any store.
    std::function<EvalReport(const LogitsFn<float>&)> prepare(const ModelConfig& config) const {
        if (!data.empty() && !mc.empty()) {
            throw UsageError("--stream and --items are mutually exclusive");
        }
        if (!metric.empty() && metric != "perplexity" && metric != "mc_accuracy") {
            throw UsageError("unknown metric '" + metric + "' (perplexity, mc_accuracy)");
        }
        if (metric == "perplexity" && data.empty()) {
            throw UsageError("--metric perplexity needs --stream");
        }
        if (metric == "mc_accuracy" && mc.empty()) {
            throw UsageError("--metric mc_accuracy needs --items");
        }
        if (!data.empty()) {
            auto stream = std::make_shared<TokenStream>(load_token_stream(data, config.vocab_size));
            const std::string name = fs::path(data).filename().string();
            return [stream, name, w = window, s = stride](const LogitsFn<float>& fn) {
                return perplexity<float>(fn, *stream, w, s, name);
            };
        }
        if (!mc.empty()) {
            auto items = std::make_shared<std::vector<McItem>>(load_mc_items(mc));
            check_mc_range(*items, config.vocab_size);
            const std::string name = fs::path(mc).filename().string();
            return [items, name, n = norm()](const LogitsFn<float>& fn) { return mc_accuracy<float>(fn, *items, n, name); };
        }
        throw UsageError("one of --stream or --items is required");
    }
};

inline const char* metric_name(MetricKind k) { return k == MetricKind::perplexity ? "perplexity" : "mc_accuracy"; }

inline void write_or_print(const std::string& path, const std::string& text, std::ostream& out) {
    if (path.empty()) {
        out << text;
    } else {
        atomic_write(path, text);
    }
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Locate, attack and regularise massive weights in gated-FFN decoders", "massive"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "help for every subcommand");

    std::string checkpoint;
    auto add_checkpoint = [&](CLI::App* sub) {
        sub->add_option("--checkpoint", checkpoint, "weight file, index file or checkpoint directory");
    };

    // init
    auto* init = app.add_subcommand("init", "write a randomly initialised (optionally planted) toy checkpoint");
    std::string init_out, variant = "pre_ln", norm = "rmsnorm", positional = "rope", moe_layers, plant_rows;
    ModelConfig ic;
    ic.vocab_size = 257, ic.hidden_dim = 64, ic.ffn_dim = 128, ic.num_layers = 4, ic.num_heads = 4;
    std::size_t moe_experts = 0, moe_top = 2, plant_layer = 0;
    std::optional<std::size_t> plant_expert;
    double init_std = 0.02, plant_scale = 1000.0;
    std::uint64_t init_seed = 0;
    init->add_option("--out", init_out, "output weight file")->required();
    init->add_option("--vocab", ic.vocab_size, "vocabulary size");
    init->add_option("--hidden", ic.hidden_dim, "hidden dimension d");
    init->add_option("--ffn", ic.ffn_dim, "FFN width d_ff");
    init->add_option("--layers", ic.num_layers, "number of layers");
    init->add_option("--heads", ic.num_heads, "attention heads");
    init->add_option("--kv-heads", ic.num_kv_heads, "key/value heads (0 = heads)");
    init->add_option("--variant", variant, "pre_ln, residual_dropout or sandwich_ln");
    init->add_option("--residual-dropout", ic.residual_dropout, "dropout on residual branches");
    init->add_option("--norm", norm, "rmsnorm or layernorm");
    init->add_option("--norm-eps", ic.norm_eps, "normalisation epsilon");
    init->add_option("--positional", positional, "rope or none");
    init->add_option("--bos", ic.bos_token_id, "bos token id");
    init->add_option("--moe-experts", moe_experts, "experts per MoE layer (0 = dense)");
    init->add_option("--moe-top", moe_top, "experts combined per token");
    init->add_option("--moe-layers", moe_layers, "comma-separated MoE layers (default all)");
    init->add_option("--seed", init_seed, "initialisation seed");
    init->add_option("--std", init_std, "weight standard deviation");
    init->add_option("--plant-layer", plant_layer, "layer to plant massive rows in");
    init->add_option("--plant-rows", plant_rows, "comma-separated rows to scale");
    init->add_option("--plant-scale", plant_scale, "row scale factor");
    init->add_option("--plant-expert", plant_expert, "expert to plant in (MoE layers)");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "full-parameter next-token training on a token stream");
    std::string pre_data, pre_out, pre_log;
    PretrainConfig pc;
    add_checkpoint(pre);
    pre->add_option("--data", pre_data, "training token stream")->required();
    pre->add_option("--out", pre_out, "output weight file")->required();
    pre->add_option("--steps", pc.steps, "optimizer steps");
    pre->add_option("--lr", pc.lr, "learning rate");
    pre->add_option("--batch", pc.batch_size, "windows per step");
    pre->add_option("--chunk", pc.chunk_len, "window length");
    pre->add_option("--seed", pc.seed, "data seed");
    pre->add_option("--log", pre_log, "per-step loss log (JSONL)");

    // trace
    auto* trace = app.add_subcommand("trace", "per-layer magnitude profile of one token position");
    std::string trace_out, trace_ids, trace_svg;
    std::size_t trace_pos = 0;
    add_checkpoint(trace);
    trace->add_option("--ids", trace_ids, "comma-separated input ids (default: the bos token)");
    trace->add_option("--position", trace_pos, "traced position");
    trace->add_option("--out", trace_out, "profile CSV (default stdout)");
    trace->add_option("--svg", trace_svg, "also render the profile as SVG");

    // detect
    auto* detect = app.add_subcommand("detect", "find the massive layer and top-k massive weight rows");
    std::size_t detect_k = 5;
    std::string rule_name = "argmax", detect_out;
    double spike = default_spike_factor;
    bool streaming = false, router = false;
    add_checkpoint(detect);
    detect->add_option("--k", detect_k, "number of massive rows");
    detect->add_option("--rule", rule_name, "layer rule: argmax or first_spike");
    detect->add_option("--spike-factor", spike, "first_spike threshold over the running median");
    detect->add_flag("--streaming", streaming, "load one layer at a time");
    detect->add_flag("--router", router, "also report bos router probabilities (MoE)");
    detect->add_option("--out", detect_out, "report JSON path (also printed)");

    // attack
    auto* attack = app.add_subcommand("attack", "top-k zeroing or retaining of massive rows");
    std::string attack_kind = "zeroing", k_list, report_path, attack_out, sweep_out;
    std::optional<std::size_t> attack_k;
    bool in_place = false;
    EvalArgs attack_eval;
    Ledger attack_ledger;
    add_checkpoint(attack);
    attack->add_option("--kind", attack_kind, "zeroing or retaining");
    attack->add_option("--k", attack_k, "number of massive rows attacked");
    attack->add_option("--k-list", k_list, "comma-separated k values for a sweep");
    attack->add_option("--report", report_path, "detection report JSON (default: detect now)");
    attack->add_option("--rule", rule_name, "layer rule when detecting");
    attack->add_flag("--in-place", in_place, "overwrite the input checkpoint");
    attack->add_option("--out", attack_out, "attacked checkpoint path");
    attack->add_option("--sweep-out", sweep_out, "sweep CSV (k,value,kind)");
    attack_eval.add(attack);
    attack_ledger.add(attack);

    // eval
    auto* eval = app.add_subcommand("eval", "perplexity or multiple-choice accuracy");
    std::string eval_out, eval_adapters;
    EvalArgs eval_args;
    Ledger eval_ledger;
    add_checkpoint(eval);
    eval_args.add(eval);
    eval->add_option("--adapters", eval_adapters, "LoRA adapter file applied on top");
    eval->add_option("--out", eval_out, "report JSON path (also printed)");
    eval_ledger.add(eval);

    // train
    auto* train = app.add_subcommand("train", "LoRA fine-tuning with or without MacDrop");
    std::string train_data, val_data, schedule_name = "step", out_adapters, merged_out, log_path, log_csv;
    bool no_macdrop = false, merge = false;
    TrainConfig tc;
    Ledger train_ledger;
    add_checkpoint(train);
    train->add_option("--train", train_data, "training token stream")->required();
    train->add_option("--val", val_data, "validation token stream")->required();
    train->add_option("--schedule", schedule_name, "step, epoch-before, epoch-after or exp");
    train->add_option("--p0", tc.p0, "initial dropout probability");
    train->add_option("--alpha", tc.alpha, "decay rate of the exp schedule");
    train->add_option("--k", tc.k, "massive rows dropped");
    train->add_option("--epochs", tc.epochs, "epochs");
    train->add_option("--lr", tc.lr, "learning rate");
    train->add_option("--warmup", tc.warmup_ratio, "warmup ratio");
    train->add_option("--batch", tc.batch_size, "chunks per step");
    train->add_option("--chunk", tc.chunk_len, "chunk length");
    train->add_option("--rank", tc.lora_rank, "LoRA rank");
    train->add_option("--lora-alpha", tc.lora_alpha, "LoRA alpha");
    train->add_option("--seed", tc.seed, "seed");
    train->add_option("--rule", rule_name, "layer rule for locating massive rows");
    train->add_flag("--no-macdrop", no_macdrop, "baseline arm: plain LoRA");
    train->add_flag("--per-row", tc.macdrop.per_row, "one mask draw per massive row");
    train->add_flag("--rescale", tc.macdrop.rescale, "scale kept weights by 1/(1-p)");
    train->add_option("--out-adapters", out_adapters, "adapter output file");
    train->add_flag("--merge", merge, "merge adapters into the base weights (needs --out)");
    train->add_option("--out", merged_out, "merged checkpoint path");
    train->add_option("--log", log_path, "metrics log (JSONL: step, epoch, p, loss)");
    train->add_option("--log-csv", log_csv, "metrics log as CSV (step,epoch,p,loss)");
    train_ledger.add(train);

    // plot
    auto* plot = app.add_subcommand("plot", "render a CSV as SVG");
    std::string plot_from, plot_out, plot_kind;
    plot->add_option("--from", plot_from, "input CSV")->required();
    plot->add_option("--out", plot_out, "output SVG")->required();
    plot->add_option("--kind", plot_kind, "magnitude_by_layer, metric_by_k or p_by_step (default: from columns)");

    for (auto* sub : app.get_subcommands({})) {
        sub->allow_extras();
    }

    try {
        try {
            app.parse(argc, argv);
        } catch (const CLI::CallForHelp&) {
            out << app.help();
            return 0;
        } catch (const CLI::CallForAllHelp&) {
            out << app.help("", CLI::AppFormatMode::All);
            return 0;
        } catch (const CLI::ParseError& e) {
            throw UsageError(e.what());
        }
        CLI::App* sub = app.get_subcommands().front();
        if (!sub->remaining().empty()) {
            std::vector<std::string> known;
            for (const CLI::Option* o : sub->get_options()) {
                for (const auto& n : o->get_lnames()) {
                    known.push_back("--" + n);
                }
            }
            const std::string bad = sub->remaining().front();
            std::string msg = sub->get_name() + ": unknown argument '" + bad + "'";
            if (const std::string hint = suggest(bad, known); !hint.empty()) {
                msg += "; did you mean '" + hint + "'?";
            }
            throw UsageError(msg);
        }
        auto rule = [&] {
            if (rule_name == "argmax") return LayerRule::argmax;
            if (rule_name == "first_spike" || rule_name == "first-spike") return LayerRule::first_spike;
            throw UsageError("unknown layer rule '" + rule_name + "' (argmax, first_spike)");
        };

        if (sub == init) {
            ic.residual_variant = json(variant).get<ResidualVariant>();
            if (json(ic.residual_variant) != json(variant)) {
                throw UsageError("unknown --variant '" + variant + "'");
            }
            ic.norm_kind = norm == "layernorm" ? NormKind::layernorm : NormKind::rmsnorm;
            if (norm != "layernorm" && norm != "rmsnorm") {
                throw UsageError("unknown --norm '" + norm + "'");
            }
            if (positional != "rope" && positional != "none") {
                throw UsageError("unknown --positional '" + positional + "'");
            }
            ic.positional = positional == "none" ? Positional::none : Positional::rope;
            ic.head_dim = ic.num_heads ? ic.hidden_dim / ic.num_heads : 0;
            if (moe_experts > 0) {
                MoeConfig moe{moe_experts, moe_top, {}};
                if (moe_layers.empty()) {
                    for (std::size_t l = 1; l <= ic.num_layers; ++l) {
                        moe.layers.insert(l);
                    }
                } else {
                    for (std::size_t l : parse_index_list(moe_layers, "--moe-layers")) {
                        moe.layers.insert(l);
                    }
                }
                ic.moe = moe;
            }
            ic.validate();
            auto params = init_parameters<float>(ic, init_seed, init_std);
            json res;
            if (plant_layer != 0) {
                const auto rows = parse_index_list(plant_rows, "--plant-rows");
                if (rows.empty()) {
                    throw UsageError("--plant-layer needs --plant-rows");
                }
                plant_massive_rows(ic, params, plant_layer, rows, plant_scale, plant_expert);
                res["planted"] = {{"layer", plant_layer}, {"rows", rows}, {"expert", plant_expert ? json(*plant_expert) : json(nullptr)}};
            }
            save_checkpoint(init_out, ic, params);
            res["path"] = init_out;
            res["config_hash"] = config_hash(ic);
            res["digest"] = checkpoint_digest(ic, params);
            out << res.dump() << "\n";
            return 0;
        }

        if (sub == pre) {
            auto ck = load_checkpoint<float>(checkpoint_path(checkpoint));
            const auto stream = load_token_stream(pre_data, ck.config.vocab_size);
            const auto losses = pretrain(ck.config, ck.params, stream, pc);
            if (!pre_log.empty()) {
                std::string log;
                for (std::size_t i = 0; i < losses.size(); ++i) {
                    log += json{{"step", i + 1}, {"loss", losses[i]}}.dump() + "\n";
                }
                atomic_write(pre_log, log);
            }
            save_checkpoint(pre_out, ck.config, ck.params);
            out << json{{"path", pre_out}, {"steps", losses.size()}, {"final_loss", losses.empty() ? 0.0 : losses.back()}}.dump()
                << "\n";
            return 0;
        }

        if (sub == trace) {
            auto ck = load_checkpoint<float>(checkpoint_path(checkpoint));
            std::vector<std::uint32_t> ids;
            for (std::size_t v : parse_index_list(trace_ids, "--ids")) {
                ids.push_back(static_cast<std::uint32_t>(v));
            }
            if (ids.empty()) {
                ids.push_back(ck.config.bos_token_id);
            }
            const auto st = trace_forward(ck.config, ck.params, std::span<const std::uint32_t>(ids), trace_pos);
            std::ostringstream csv;
            write_profile_csv(csv, magnitude_profile(st));
            write_or_print(trace_out, csv.str(), out);
            if (!trace_svg.empty()) {
                atomic_write(trace_svg, plot_csv(parse_csv(csv.str()), PlotKind::magnitude_by_layer));
            }
            return 0;
        }

        if (sub == detect) {
            const fs::path path = checkpoint_path(checkpoint);
            MassiveWeightReport report;
            json extra;
            if (streaming) {
                CheckpointReader reader(path);
                report = streaming_find_massive_weights<float>(reader, detect_k, rule(), spike);
            } else {
                auto ck = load_checkpoint<float>(path);
                report = find_massive_weights(ck.config, ck.params, detect_k, rule(), spike);
                if (router) {
                    extra = json::array();
                    for (const auto& rp : router_profile(ck.config, ck.params)) {
                        extra.push_back({{"layer", rp.layer}, {"probabilities", rp.probabilities},
                                         {"argmax", rp.argmax}, {"flagged", rp.flagged}});
                    }
                }
            }
            json j = report;
            if (!extra.is_null()) {
                j["router"] = extra;
            }
            const std::string text = j.dump(2) + "\n";
            if (!detect_out.empty()) {
                atomic_write(detect_out, text);
            }
            out << text;
            return 0;
        }

        if (sub == attack) {
            const fs::path path = checkpoint_path(checkpoint);
            const AttackKind kind = attack_kind == "zeroing"     ? AttackKind::zeroing
                                    : attack_kind == "retaining" ? AttackKind::retaining
                                                                 : throw UsageError("unknown --kind '" + attack_kind +
                                                                                    "' (zeroing, retaining)");
            const auto ks = parse_index_list(k_list, "--k-list");
            if (attack_k && !ks.empty()) {
                throw UsageError("--k and --k-list are mutually exclusive");
            }
            if (!attack_k && ks.empty()) {
                throw UsageError("one of --k or --k-list is required");
            }
            if (!ks.empty() && (in_place || !attack_out.empty())) {
                throw UsageError("a --k-list sweep writes no checkpoint; drop --out/--in-place");
            }
            if (in_place && !attack_out.empty()) {
                throw UsageError("--in-place and --out are mutually exclusive");
            }
            auto ck = load_checkpoint<float>(path);
            const std::size_t k_max = ks.empty() ? *attack_k : *std::max_element(ks.begin(), ks.end());
            MassiveWeightReport report;
            if (!report_path.empty()) {
                try {
                    report = json::parse(read_file(report_path)).get<MassiveWeightReport>();
                } catch (const json::exception& e) {
                    throw InputError("report " + report_path + ": " + e.what());
                }
            } else {
                report = find_massive_weights(ck.config, ck.params, std::clamp<std::size_t>(k_max, 1, ck.config.ffn_dim),
                                              rule());
            }
            const std::string hash = config_hash(ck.config);
            if (!ks.empty()) {
                const auto score = attack_eval.prepare(ck.config);
                MetricKind metric = MetricKind::perplexity;
                const auto rows = k_sweep<float>(ck.config, ck.params, kind, ks, report, [&](const ParameterStore<float>& p) {
                    const EvalReport r = score(model_logits_fn(ck.config, p));
                    metric = r.metric;
                    return r.value;
                });
                std::string csv = "k,value,kind\n";
                json j = json::array();
                for (const auto& r : rows) {
                    std::ostringstream v;
                    v.precision(9);
                    if (r.value) {
                        v << *r.value;
                        attack_ledger.append({hash, "attack", AttackSpec{kind, r.k, report, false}.describe(),
                                              metric_name(metric), *r.value});
                        csv += std::to_string(r.k) + "," + v.str() + "," + to_string(kind) + "\n";
                    }
                    j.push_back({{"k", r.k}, {"value", r.value ? json(*r.value) : json(nullptr)}, {"error", r.error}});
                }
                if (!sweep_out.empty()) {
                    atomic_write(sweep_out, csv);
                }
                out << j.dump(2) << "\n";
                return 0;
            }
            const AttackSpec spec{kind, *attack_k, report, in_place};
            const ParameterStore<float> attacked = apply_attack(ck.config, ck.params, spec);
            json j{{"spec", spec.describe()}, {"layer", spec.layer()}, {"k", spec.k}};
            if (in_place) {
                save_checkpoint(resolve_checkpoint(path).shards.front(), ck.config, attacked);
                j["out"] = path.string();
            } else if (!attack_out.empty()) {
                save_checkpoint(attack_out, ck.config, attacked);
                j["out"] = attack_out;
            }
            if (attack_eval.any()) {
                const EvalReport r = attack_eval.prepare(ck.config)(model_logits_fn(ck.config, attacked));
                j["eval"] = r;
                attack_ledger.append({hash, "attack", spec.describe(), metric_name(r.metric), r.value});
            }
            out << j.dump(2) << "\n";
            return 0;
        }

        if (sub == eval) {
            auto ck = load_checkpoint<float>(checkpoint_path(checkpoint));
            std::optional<LoraAdapterSet<float>> adapters;
            if (!eval_adapters.empty()) {
                adapters = load_adapters<float>(eval_adapters);
            }
            const auto score = eval_args.prepare(ck.config);
            const EvalReport r = score(model_logits_fn(ck.config, ck.params, adapters ? &*adapters : nullptr));
            const std::string text = json(r).dump(2) + "\n";
            if (!eval_out.empty()) {
                atomic_write(eval_out, text);
            }
            eval_ledger.append({config_hash(ck.config), "eval", adapters ? "adapters" : "base", metric_name(r.metric), r.value});
            out << text;
            return 0;
        }

        if (sub == train) {
            if (merge && merged_out.empty()) {
                throw UsageError("--merge needs --out for the merged checkpoint");
            }
            auto ck = load_checkpoint<float>(checkpoint_path(checkpoint));
            const auto train_stream = load_token_stream(train_data, ck.config.vocab_size);
            const auto val_stream = load_token_stream(val_data, ck.config.vocab_size);
            tc.schedule = no_macdrop ? std::nullopt : std::optional(parse_schedule(schedule_name));
            tc.layer_rule = rule();
            const auto res = finetune(ck.config, ck.params, train_stream, val_stream, tc);
            std::string jsonl, csv = "step,epoch,p,loss\n";
            for (const auto& s : res.log) {
                jsonl += json(s).dump() + "\n";
                std::ostringstream row;
                row.precision(9);
                row << s.step << "," << s.epoch << "," << s.p << "," << s.loss << "\n";
                csv += row.str();
            }
            if (!log_path.empty()) {
                atomic_write(log_path, jsonl);
            }
            if (!log_csv.empty()) {
                atomic_write(log_csv, csv);
            }
            if (!out_adapters.empty()) {
                save_adapters(out_adapters, res.adapters);
            }
            if (merge) {
                save_checkpoint(merged_out, ck.config, merge_adapters(ck.params, res.adapters));
            }
            const std::string spec = res.schedule ? std::string("macdrop:") + to_string(res.schedule->kind) +
                                                        ":p0=" + json(tc.p0).dump() + ":k=" + std::to_string(tc.k)
                                                  : std::string("baseline");
            json j{{"arm", spec},
                   {"steps", res.log.size()},
                   {"initial_val_loss", res.initial_val_loss},
                   {"val_losses", res.val_losses}};
            if (res.report) {
                j["report"] = *res.report;
            }
            train_ledger.append({config_hash(ck.config), "train", spec, "val_loss",
                                 res.val_losses.empty() ? res.initial_val_loss : res.val_losses.back()});
            out << j.dump(2) << "\n";
            return 0;
        }

        if (sub == plot) {
            const CsvTable table = parse_csv(read_file(plot_from));
            const PlotKind kind = plot_kind.empty() ? infer_plot_kind(table) : parse_plot_kind(plot_kind);
            atomic_write(plot_out, plot_csv(table, kind));
            return 0;
        }
        throw UsageError("no subcommand");
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<const char*> argv{"massive"};
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

} // namespace massive::cli
