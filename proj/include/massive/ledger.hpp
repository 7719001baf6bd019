#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <string>

#include "error.hpp"

namespace massive {

struct LedgerEntry {
    std::string config_hash;
    std::string command;
    std::string spec; // attack spec or schedule
    std::string metric_kind;
    double value = 0;
};

inline constexpr const char* ledger_header = "timestamp,config_hash,command,spec,metric_kind,value\n";

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

namespace detail {

inline std::string csv_cell(std::string s) {
    std::replace(s.begin(), s.end(), ',', ';');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

} // namespace detail

// Appends one row under an exclusive lock; the header is written when the file is new.
inline void ledger_append(const std::filesystem::path& path, const LedgerEntry& e) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd < 0) {
        throw IoError("cannot open ledger " + path.string());
    }
    ::flock(fd, LOCK_EX);
    std::string line;
    if (::lseek(fd, 0, SEEK_END) == 0) {
        line = ledger_header;
    }
    char value[32];
    std::snprintf(value, sizeof value, "%.9g", e.value);
    line += utc_timestamp() + "," + detail::csv_cell(e.config_hash) + "," + detail::csv_cell(e.command) + "," +
            detail::csv_cell(e.spec) + "," + detail::csv_cell(e.metric_kind) + "," + value + "\n";
    const ssize_t n = ::write(fd, line.data(), line.size());
    ::flock(fd, LOCK_UN);
    ::close(fd);
    if (n != static_cast<ssize_t>(line.size())) {
        throw IoError("short write to ledger " + path.string());
    }
}

} // namespace massive
