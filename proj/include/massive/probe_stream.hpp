#pragma once

#include <functional>

#include "checkpoint.hpp"
#include "probe.hpp"

namespace massive {

// Bos-token probe that holds one layer's weights at a time. With a single
// token the sequence dimension is 1, so each layer is independent of every
// later one and the checkpoint never has to fit in memory at once.
template <Scalar T = float>
std::vector<BosIntermediate<T>> streaming_bos_intermediates(const CheckpointReader& reader,
                                                            std::size_t max_layer = 0,
                                                            const std::function<void(std::size_t)>& progress = {}) {
    const ModelConfig& config = reader.config();
    const std::size_t last = max_layer == 0 ? config.num_layers : std::min(max_layer, config.num_layers);
    Tensor<T> h = reader.embedding_row<T>(config.bos_token_id).reshaped({1, config.hidden_dim});
    std::vector<BosIntermediate<T>> out;
    ForwardOptions<T> opts;
    opts.trace_position = 0;
    for (std::size_t l = 1; l <= last; ++l) {
        const ParameterStore<T> layer = reader.load_layer<T>(l);
        Graph<T> g;
        ForwardGraph<T> fg;
        detail::ForwardBuilder<T> b(g, config, layer, opts, fg);
        LayerTrace<T> lt;
        const auto hv = b.layer(l, g.constant(h), &lt);
        h = g.value(hv);
        out.push_back({std::move(lt.inter), lt.expert, std::move(lt.router_probs)});
        if (progress) {
            progress(l);
        }
    }
    return out;
}

template <Scalar T = float>
MassiveWeightReport streaming_find_massive_weights(const CheckpointReader& reader, std::size_t k,
                                                   LayerRule rule = LayerRule::argmax,
                                                   double spike_factor = default_spike_factor,
                                                   const std::function<void(std::size_t)>& progress = {}) {
    return report_from(reader.config(), streaming_bos_intermediates<T>(reader, 0, progress), k, rule, spike_factor);
}

} // namespace massive
