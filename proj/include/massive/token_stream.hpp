#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "eval.hpp"
#include "fileio.hpp"

namespace massive {

// Binary streams: 8-byte magic, u64 LE count, then count u32 LE ids.
inline constexpr char token_magic[8] = {'M', 'A', 'S', 'S', 'T', 'O', 'K', '1'};

using TokenStream = std::vector<std::uint32_t>;

inline void check_token_range(const TokenStream& ids, std::size_t vocab_size) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= vocab_size) {
            throw InputError("token id " + std::to_string(ids[i]) + " >= vocab size " + std::to_string(vocab_size) +
                             " at position " + std::to_string(i));
        }
    }
}

inline TokenStream parse_token_stream(const std::string& bytes) {
    TokenStream ids;
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), token_magic, 8) == 0) {
        if (bytes.size() < 16) {
            throw InputError("binary token stream truncated in its header");
        }
        std::uint64_t count = 0;
        std::memcpy(&count, bytes.data() + 8, 8);
        if (count > (bytes.size() - 16) / 4 || bytes.size() - 16 != count * 4) {
            throw InputError("binary token stream declares " + std::to_string(count) + " ids but holds " +
                             std::to_string((bytes.size() - 16) / 4));
        }
        ids.resize(count);
        std::memcpy(ids.data(), bytes.data() + 16, count * 4);
        return ids;
    }
    // JSON lines, each {"ids": [...]}; records are concatenated in file order.
    std::istringstream in(bytes);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const auto j = json::parse(line);
            for (const auto& v : j.at("ids")) {
                const auto id = v.get<std::int64_t>();
                if (id < 0 || id > static_cast<std::int64_t>(UINT32_MAX)) {
                    throw InputError("token id " + std::to_string(id) + " out of u32 range at position " +
                                     std::to_string(ids.size()));
                }
                ids.push_back(static_cast<std::uint32_t>(id));
            }
        } catch (const json::exception& e) {
            throw InputError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return ids;
}

inline TokenStream load_token_stream(const fs::path& path, std::size_t vocab_size) {
    if (!fs::exists(path)) {
        throw InputError("token stream not found: " + path.string());
    }
    TokenStream ids = parse_token_stream(read_file(path));
    check_token_range(ids, vocab_size);
    return ids;
}

inline void save_token_stream(const fs::path& path, const TokenStream& ids) {
    std::string out(token_magic, 8);
    const std::uint64_t n = ids.size();
    out.append(reinterpret_cast<const char*>(&n), 8);
    out.append(reinterpret_cast<const char*>(ids.data()), ids.size() * 4);
    atomic_write(path, out);
}

inline void save_token_stream_jsonl(const fs::path& path, const TokenStream& ids) {
    atomic_write(path, json{{"ids", ids}}.dump() + "\n");
}

// One JSON object per line: {"context": [...], "options": [[...], ...], "gold": i}.
inline std::vector<McItem> load_mc_items(const fs::path& path) {
    if (!fs::exists(path)) {
        throw InputError("item file not found: " + path.string());
    }
    std::istringstream in(read_file(path));
    std::vector<McItem> items;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            items.push_back(json::parse(line).get<McItem>());
        } catch (const json::exception& e) {
            throw InputError("line " + std::to_string(lineno) + ": " + e.what());
        } catch (const InputError& e) {
            throw InputError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return items;
}

inline void check_mc_range(const std::vector<McItem>& items, std::size_t vocab_size) {
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto bad = [&](std::uint32_t id) { return id >= vocab_size; };
        bool oob = std::any_of(items[i].context.begin(), items[i].context.end(), bad);
        for (const auto& o : items[i].options) {
            oob = oob || std::any_of(o.begin(), o.end(), bad);
        }
        if (oob) {
            throw InputError("item " + std::to_string(i) + " has a token id >= vocab size " +
                             std::to_string(vocab_size));
        }
    }
}

} // namespace massive
