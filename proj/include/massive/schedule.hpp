#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "config.hpp"
#include "error.hpp"

namespace massive {

enum class ScheduleKind { step, epoch_before, epoch_after, exp };

NLOHMANN_JSON_SERIALIZE_ENUM(ScheduleKind, {
                                               {ScheduleKind::step, "step"},
                                               {ScheduleKind::epoch_before, "epoch_before"},
                                               {ScheduleKind::epoch_after, "epoch_after"},
                                               {ScheduleKind::exp, "exp"},
                                           })

inline const char* to_string(ScheduleKind k) {
    switch (k) {
    case ScheduleKind::step: return "step";
    case ScheduleKind::epoch_before: return "epoch_before";
    case ScheduleKind::epoch_after: return "epoch_after";
    case ScheduleKind::exp: return "exp";
    }
    return "?";
}

// Curriculum for the massive-weight dropout probability:
//   step          p0 · (1 − t/T_step)
//   epoch_before  p0 · (1 − (e − 1)/T_epoch)
//   epoch_after   p0 · (1 − e/T_epoch)
//   exp           p0 · exp(−alpha · t)
// with t the 1-based optimizer step and e the 1-based epoch.
struct CurriculumSchedule {
    ScheduleKind kind = ScheduleKind::step;
    double p0 = 0.8;
    double alpha = 0.01;
    std::size_t total_steps = 1;
    std::size_t total_epochs = 1;

    void validate() const {
        if (!(p0 >= 0 && p0 <= 1)) {
            throw ConfigError("p0 must lie in [0, 1]");
        }
        if (kind == ScheduleKind::exp && !(alpha > 0)) {
            throw ConfigError("exp schedule needs alpha > 0");
        }
        if (total_steps == 0 || total_epochs == 0) {
            throw ConfigError("schedule totals must be positive");
        }
    }
};

inline double schedule_eval(const CurriculumSchedule& s, std::size_t step, std::size_t epoch) {
    s.validate();
    if (step > s.total_steps) {
        throw InputError("step " + std::to_string(step) + " beyond T_step = " + std::to_string(s.total_steps));
    }
    if (epoch < 1 || epoch > s.total_epochs) {
        throw InputError("epoch " + std::to_string(epoch) + " outside [1, " + std::to_string(s.total_epochs) + "]");
    }
    const double t = static_cast<double>(step);
    const double e = static_cast<double>(epoch);
    const double ts = static_cast<double>(s.total_steps);
    const double te = static_cast<double>(s.total_epochs);
    double p = 0;
    switch (s.kind) {
    case ScheduleKind::step: p = s.p0 * (1.0 - t / ts); break;
    case ScheduleKind::epoch_before: p = s.p0 * (1.0 - (e - 1.0) / te); break;
    case ScheduleKind::epoch_after: p = s.p0 * (1.0 - e / te); break;
    case ScheduleKind::exp: p = s.p0 * std::exp(-s.alpha * t); break;
    }
    return std::clamp(p, 0.0, 1.0);
}

} // namespace massive
