#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "probe.hpp"
#include "schedule.hpp"
#include "train.hpp"

namespace massive {

struct MacDropOptions {
    bool per_row = false; // one keep/drop draw per massive row instead of per element
    bool rescale = false; // divide kept weights by (1 - p); off means a plain 0/1 mask
};

// Saved copies of the k massive rows of W_gate / W_up, plus the mask and
// counters of the current step. Massive-row dropout only ever touches the
// live rows listed in `report`; everything is restored from `saved_*`.
template <Scalar T>
struct MacDropState {
    MassiveWeightReport report;
    Tensor<T> saved_gate; // [k × d]
    Tensor<T> saved_up;   // [k × d]
    Tensor<T> mask;       // [k × d], last mask applied
    std::size_t step = 0;
    std::size_t epoch = 1;
    MacDropOptions options;
    Rng mask_rng;

    std::string gate_name() const { return names::w_gate(report.layer, report.expert); }
    std::string up_name() const { return names::w_up(report.layer, report.expert); }
};

template <Scalar T>
MacDropState<T> make_macdrop_state(const ParameterStore<T>& params, const MassiveWeightReport& report,
                                   std::uint64_t mask_seed, MacDropOptions options = {}) {
    MacDropState<T> s{report, {}, {}, {}, 0, 1, options, Rng(mask_seed)};
    const Tensor<T>& gate = params.at(s.gate_name());
    const Tensor<T>& up = params.at(s.up_name());
    const std::size_t k = report.indices.size(), d = gate.cols();
    s.saved_gate = Tensor<T>({k, d});
    s.saved_up = Tensor<T>({k, d});
    for (std::size_t r = 0; r < k; ++r) {
        const std::size_t idx = report.indices[r];
        if (idx >= gate.rows()) {
            throw InputError("massive index " + std::to_string(idx) + " outside the FFN width");
        }
        std::copy_n(gate.row(idx).data(), d, s.saved_gate.row(r).data());
        std::copy_n(up.row(idx).data(), d, s.saved_up.row(r).data());
    }
    s.mask = Tensor<T>({k, d}, T{1});
    return s;
}

// Writes the saved massive rows back into the live weights.
template <Scalar T>
void restore_massive_rows(ParameterStore<T>& params, const MacDropState<T>& state) {
    Tensor<T>& gate = params.at(state.gate_name());
    Tensor<T>& up = params.at(state.up_name());
    const std::size_t d = gate.cols();
    for (std::size_t r = 0; r < state.report.indices.size(); ++r) {
        const std::size_t idx = state.report.indices[r];
        std::copy_n(state.saved_gate.row(r).data(), d, gate.row(idx).data());
        std::copy_n(state.saved_up.row(r).data(), d, up.row(idx).data());
    }
}

// Restores the massive rows when the step scope ends, whether or not the step threw.
template <Scalar T>
class MassiveRowsGuard {
public:
    MassiveRowsGuard(ParameterStore<T>& params, const MacDropState<T>& state) : params_(params), state_(state) {}
    MassiveRowsGuard(const MassiveRowsGuard&) = delete;
    MassiveRowsGuard& operator=(const MassiveRowsGuard&) = delete;
    ~MassiveRowsGuard() { restore_massive_rows(params_, state_); }

private:
    ParameterStore<T>& params_;
    const MacDropState<T>& state_;
};

struct MacDropStepResult {
    double loss = 0;
    double p = 0;
    double kept_fraction = 1; // expected-magnitude shrinkage of the massive rows this step
};

// Called after the mask is applied and before the training step runs.
template <Scalar T>
using MaskObserver = std::function<void(const ParameterStore<T>&, const MacDropState<T>&)>;

// One MacDrop step: draw p from the curriculum, sample one mask (keep when
// u > p) and multiply it into the massive rows of both W_gate and W_up, train
// the adapters for one step, then roll the rows back to the saved originals.
template <Scalar T>
MacDropStepResult macdrop_step(const ModelConfig& config, ParameterStore<T>& params, LoraAdapterSet<T>& adapters,
                               MacDropState<T>& state, const CurriculumSchedule& schedule,
                               std::span<const Chunk> batch, Adam<T>& optimizer, double lr,
                               Rng* dropout_rng = nullptr, const MaskObserver<T>& observer = {}) {
    MacDropStepResult res;
    const std::size_t step = state.step + 1;
    res.p = schedule_eval(schedule, step, state.epoch);

    const std::size_t k = state.saved_gate.rows(), d = state.saved_gate.cols();
    const T keep_value = (state.options.rescale && res.p < 1) ? static_cast<T>(1.0 / (1.0 - res.p)) : T{1};
    std::size_t kept = 0;
    for (std::size_t r = 0; r < k; ++r) {
        bool row_keep = false;
        if (state.options.per_row) {
            row_keep = state.mask_rng.uniform_open() > res.p;
        }
        for (std::size_t c = 0; c < d; ++c) {
            const bool keep = state.options.per_row ? row_keep : state.mask_rng.uniform_open() > res.p;
            state.mask.at(r, c) = keep ? keep_value : T{0};
            kept += keep ? 1 : 0;
        }
    }
    res.kept_fraction = k * d ? static_cast<double>(kept) / static_cast<double>(k * d) : 1.0;

    {
        MassiveRowsGuard<T> guard(params, state);
        Tensor<T>& gate = params.at(state.gate_name());
        Tensor<T>& up = params.at(state.up_name());
        for (std::size_t r = 0; r < k; ++r) {
            const std::size_t idx = state.report.indices[r];
            auto grow = gate.row(idx);
            auto urow = up.row(idx);
            for (std::size_t c = 0; c < d; ++c) {
                grow[c] *= state.mask.at(r, c);
                urow[c] *= state.mask.at(r, c);
            }
        }
        if (observer) {
            observer(params, state);
        }
        try {
            res.loss = adapter_step(config, params, adapters, batch, optimizer, lr, dropout_rng);
        } catch (const NumericFault& e) {
            throw NumericFault(std::string(e.what()) + " at step " + std::to_string(step), e.layer);
        }
    }
    state.step = step;
    return res;
}

struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double warmup_ratio = 0.05;
    std::size_t epochs = 3;
    std::size_t batch_size = 1;
    std::size_t chunk_len = 256;
    std::uint64_t seed = 0;
    std::size_t k = 5;
    double p0 = 0.8;
    double alpha = 0.01;
    std::optional<ScheduleKind> schedule = ScheduleKind::step; // nullopt trains without MacDrop
    std::size_t lora_rank = 16;
    double lora_alpha = 16.0;
    MacDropOptions macdrop;
    LayerRule layer_rule = LayerRule::argmax;
};

struct StepLog {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double p = 0;
    double loss = 0;
    double lr = 0;
    double kept_fraction = 1;
};

inline void to_json(json& j, const StepLog& s) {
    j = json{{"step", s.step}, {"epoch", s.epoch}, {"p", s.p}, {"loss", s.loss}};
}

template <Scalar T>
struct FinetuneResult {
    LoraAdapterSet<T> adapters;
    std::vector<StepLog> log;
    double initial_val_loss = 0;
    std::vector<double> val_losses; // after each epoch
    std::optional<MassiveWeightReport> report;
    std::optional<CurriculumSchedule> schedule;
};

// Adapter fine-tuning with optional MacDrop. The massive rows are located once
// with the bos token before training; data order depends only on the seed, and
// the mask generator is a separate stream so toggling MacDrop keeps batches identical.
template <Scalar T>
FinetuneResult<T> finetune(const ModelConfig& config, ParameterStore<T>& params,
                           std::span<const std::uint32_t> train_stream, std::span<const std::uint32_t> val_stream,
                           const TrainConfig& tc, const std::function<void(const StepLog&)>& on_step = {}) {
    if (train_stream.size() < 2 || val_stream.size() < 2) {
        throw InputError("fine-tuning needs non-empty training and validation streams");
    }
    if (tc.batch_size == 0) {
        throw ConfigError("batch size must be positive");
    }
    std::vector<Chunk> train_chunks = make_chunks(train_stream, tc.chunk_len);
    const std::vector<Chunk> val_chunks = make_chunks(val_stream, tc.chunk_len);
    const std::size_t steps_per_epoch = (train_chunks.size() + tc.batch_size - 1) / tc.batch_size;
    const std::size_t total_steps = steps_per_epoch * tc.epochs;

    FinetuneResult<T> res;
    res.adapters = make_lora_adapters<T>(config, tc.lora_rank, tc.lora_alpha, tc.seed ^ 0x10AULL);
    res.initial_val_loss = mean_loss(config, params, val_chunks, &res.adapters);

    std::optional<MacDropState<T>> state;
    if (tc.schedule) {
        res.report = find_massive_weights(config, params, tc.k, tc.layer_rule);
        state = make_macdrop_state(params, *res.report, tc.seed ^ 0x3A5CULL, tc.macdrop);
        res.schedule = CurriculumSchedule{*tc.schedule, tc.p0, tc.alpha, std::max<std::size_t>(total_steps, 1),
                                          std::max<std::size_t>(tc.epochs, 1)};
    }

    Rng data_rng(tc.seed);
    Rng dropout_rng(tc.seed ^ 0xD50ULL);
    Adam<T> adam(tc.beta1, tc.beta2);
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        data_rng.shuffle(train_chunks.begin(), train_chunks.end());
        for (std::size_t b = 0; b < train_chunks.size(); b += tc.batch_size) {
            const std::size_t n = std::min(tc.batch_size, train_chunks.size() - b);
            const std::span<const Chunk> batch(train_chunks.data() + b, n);
            ++step;
            StepLog entry;
            entry.step = step;
            entry.epoch = epoch;
            entry.lr = warmup_lr(tc.lr, tc.warmup_ratio, step, total_steps);
            if (state) {
                state->epoch = epoch;
                const auto r = macdrop_step(config, params, res.adapters, *state, *res.schedule, batch, adam,
                                            entry.lr, &dropout_rng);
                entry.p = r.p;
                entry.loss = r.loss;
                entry.kept_fraction = r.kept_fraction;
            } else {
                try {
                    entry.loss = adapter_step(config, params, res.adapters, batch, adam, entry.lr, &dropout_rng);
                } catch (const NumericFault& e) {
                    throw NumericFault(std::string(e.what()) + " at step " + std::to_string(step), e.layer);
                }
            }
            res.log.push_back(entry);
            if (on_step) {
                on_step(entry);
            }
        }
        res.val_losses.push_back(mean_loss(config, params, val_chunks, &res.adapters));
    }
    return res;
}

} // namespace massive
