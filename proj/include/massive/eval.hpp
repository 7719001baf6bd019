#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "model.hpp"

namespace massive {

enum class MetricKind { perplexity, mc_accuracy };
enum class Normalization { sum, per_token };

NLOHMANN_JSON_SERIALIZE_ENUM(MetricKind, {
                                             {MetricKind::perplexity, "perplexity"},
                                             {MetricKind::mc_accuracy, "mc_accuracy"},
                                         })
NLOHMANN_JSON_SERIALIZE_ENUM(Normalization, {
                                                {Normalization::sum, "sum"},
                                                {Normalization::per_token, "per_token"},
                                            })

inline constexpr std::size_t default_window = 1024;
inline constexpr std::size_t default_stride = 512;

struct EvalReport {
    std::string dataset;
    MetricKind metric = MetricKind::perplexity;
    double value = 0;
    std::size_t tokens_scored = 0;
    std::size_t items = 0;
    std::size_t items_skipped = 0;
    std::size_t window = 0;
    std::size_t stride = 0;
    Normalization normalization = Normalization::sum;
};

inline void to_json(json& j, const EvalReport& r) {
    j = json{{"dataset", r.dataset}, {"metric", r.metric}, {"value", r.value}, {"tokens_scored", r.tokens_scored}};
    if (r.metric == MetricKind::perplexity) {
        j["window"] = r.window;
        j["stride"] = r.stride;
    } else {
        j["items"] = r.items;
        j["items_skipped"] = r.items_skipped;
        j["normalization"] = r.normalization;
    }
}

// Maps a token sequence to logits [T × V]. Lets the scoring logic run against
// anything that produces logits, not only the decoder.
template <Scalar T>
using LogitsFn = std::function<Tensor<T>(std::span<const std::uint32_t>)>;

template <Scalar T>
LogitsFn<T> model_logits_fn(const ModelConfig& config, const ParameterStore<T>& params,
                            const LoraAdapterSet<T>* adapters = nullptr) {
    return [&config, &params, adapters](std::span<const std::uint32_t> ids) {
        return logits(config, params, ids, adapters);
    };
}

// Sliding-window perplexity. Windows start every `stride` tokens; each window
// scores only the tokens not already scored by an earlier window, so every
// token after the first is predicted exactly once and the overlap acts as context.
template <Scalar T>
EvalReport perplexity(const LogitsFn<T>& fn, std::span<const std::uint32_t> stream, std::size_t window = default_window,
                      std::size_t stride = default_stride, std::string dataset = {}) {
    if (window < 2 || stride < 1 || stride > window) {
        throw InputError("perplexity needs window >= 2 and 1 <= stride <= window");
    }
    if (stream.size() < 2) {
        throw InputError("perplexity needs a stream of at least two tokens");
    }
    const std::size_t n = stream.size();
    double nll = 0;
    std::size_t scored = 0;
    std::size_t prev_end = 1; // token 0 is never predicted
    for (std::size_t begin = 0;; begin += stride) {
        const std::size_t end = std::min(begin + window, n);
        if (end > prev_end) {
            const Tensor<T> lg = fn(stream.subspan(begin, end - begin));
            for (std::size_t tok = prev_end; tok < end; ++tok) {
                nll -= log_softmax_at<T>(lg.row(tok - begin - 1), stream[tok]);
                ++scored;
            }
            prev_end = end;
        }
        if (end == n) {
            break;
        }
    }
    EvalReport r;
    r.dataset = std::move(dataset);
    r.metric = MetricKind::perplexity;
    r.value = std::exp(nll / static_cast<double>(scored));
    r.tokens_scored = scored;
    r.window = window;
    r.stride = stride;
    return r;
}

template <Scalar T>
EvalReport perplexity(const ModelConfig& config, const ParameterStore<T>& params, std::span<const std::uint32_t> stream,
                      std::size_t window = default_window, std::size_t stride = default_stride,
                      std::string dataset = {}) {
    return perplexity<T>(model_logits_fn(config, params), stream, window, stride, std::move(dataset));
}

struct McItem {
    std::vector<std::uint32_t> context;
    std::vector<std::vector<std::uint32_t>> options;
    std::size_t gold = 0;
};

inline void from_json(const json& j, McItem& item) {
    try {
        j.at("context").get_to(item.context);
        j.at("options").get_to(item.options);
        j.at("gold").get_to(item.gold);
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed multiple-choice item: ") + e.what());
    }
}

inline void to_json(json& j, const McItem& item) {
    j = json{{"context", item.context}, {"options", item.options}, {"gold", item.gold}};
}

// Log-likelihood of each option's continuation given the context (summed, or
// averaged per token).
template <Scalar T>
std::vector<double> option_scores(const LogitsFn<T>& fn, const McItem& item, Normalization norm) {
    std::vector<double> scores;
    for (const auto& opt : item.options) {
        std::vector<std::uint32_t> seq = item.context;
        seq.insert(seq.end(), opt.begin(), opt.end());
        const Tensor<T> lg = fn(seq);
        double ll = 0;
        for (std::size_t i = 0; i < opt.size(); ++i) {
            const std::size_t pos = item.context.size() + i;
            ll += log_softmax_at<T>(lg.row(pos - 1), seq[pos]);
        }
        scores.push_back(norm == Normalization::per_token ? ll / static_cast<double>(opt.size()) : ll);
    }
    return scores;
}

// Argmax over option scores, ties to the lowest index.
inline std::size_t predict_option(const std::vector<double>& scores) {
    return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

template <Scalar T>
EvalReport mc_accuracy(const LogitsFn<T>& fn, const std::vector<McItem>& items,
                       Normalization norm = Normalization::sum, std::string dataset = {}) {
    if (items.empty()) {
        throw InputError("multiple-choice evaluation needs at least one item");
    }
    EvalReport r;
    r.dataset = std::move(dataset);
    r.metric = MetricKind::mc_accuracy;
    r.normalization = norm;
    std::size_t correct = 0;
    for (const auto& item : items) {
        const bool malformed = item.options.size() < 2 || item.gold >= item.options.size() || item.context.empty() ||
                               std::any_of(item.options.begin(), item.options.end(),
                                           [](const auto& o) { return o.empty(); });
        if (malformed) {
            ++r.items_skipped;
            continue;
        }
        const auto scores = option_scores(fn, item, norm);
        for (const auto& o : item.options) {
            r.tokens_scored += o.size();
        }
        ++r.items;
        correct += predict_option(scores) == item.gold ? 1 : 0;
    }
    r.value = r.items ? static_cast<double>(correct) / static_cast<double>(r.items) : 0.0;
    return r;
}

template <Scalar T>
EvalReport mc_accuracy(const ModelConfig& config, const ParameterStore<T>& params, const std::vector<McItem>& items,
                       Normalization norm = Normalization::sum, std::string dataset = {}) {
    return mc_accuracy<T>(model_logits_fn(config, params), items, norm, std::move(dataset));
}

} // namespace massive
