#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "fileio.hpp"
#include "tensor.hpp"

namespace massive {

static_assert(std::endian::native == std::endian::little, "safetensors payloads are little-endian");

// Container layout: u64 LE header length N, N bytes of UTF-8 JSON mapping
// tensor name -> {dtype, shape, data_offsets: [begin, end)}, then the raw data.
// Offsets are relative to the first data byte.
namespace safetensors {

using json = nlohmann::json;

inline std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "F32") return 4;
    if (dtype == "F64") return 8;
    if (dtype == "F16" || dtype == "BF16") return 2;
    return 0;
}

inline float bf16_to_f32(std::uint16_t bits) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

inline float f16_to_f32(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    std::uint32_t bits;
    if (exp == 0x1F) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: renormalise
            exp = 127 - 15 + 1;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3FFu;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

struct Entry {
    std::string name;
    std::string dtype;
    Shape shape;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
};

// Header-only view of one safetensors file; tensor payloads are read on demand.
class File {
public:
    explicit File(std::filesystem::path path) : path_(std::move(path)) {
        std::ifstream in(path_, std::ios::binary);
        if (!in) {
            throw IoError("cannot open " + path_.string());
        }
        const auto file_size = std::filesystem::file_size(path_);
        if (file_size < 8) {
            throw CheckpointError(CheckpointFault::truncated, "", path_.string() + " is shorter than its length prefix");
        }
        std::uint64_t n = 0;
        in.read(reinterpret_cast<char*>(&n), 8);
        if (n > file_size - 8) {
            throw CheckpointError(CheckpointFault::truncated, "", "header length exceeds file size");
        }
        std::string header(n, '\0');
        in.read(header.data(), static_cast<std::streamsize>(n));
        data_start_ = 8 + n;
        const std::uint64_t data_size = file_size - data_start_;
        json j;
        try {
            j = json::parse(header);
        } catch (const json::exception& e) {
            throw CheckpointError(CheckpointFault::bad_header, "", e.what());
        }
        if (!j.is_object()) {
            throw CheckpointError(CheckpointFault::bad_header, "", "header is not a JSON object");
        }
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "__metadata__") {
                metadata_ = it.value();
                continue;
            }
            Entry e;
            e.name = it.key();
            try {
                e.dtype = it.value().at("dtype").get<std::string>();
                e.shape = it.value().at("shape").get<Shape>();
                const auto off = it.value().at("data_offsets").get<std::vector<std::uint64_t>>();
                if (off.size() != 2 || off[0] > off[1]) {
                    throw CheckpointError(CheckpointFault::bad_header, e.name, "malformed data_offsets");
                }
                e.begin = off[0];
                e.end = off[1];
            } catch (const json::exception& ex) {
                throw CheckpointError(CheckpointFault::bad_header, e.name, ex.what());
            }
            const std::size_t width = dtype_size(e.dtype);
            if (width == 0) {
                throw CheckpointError(CheckpointFault::unknown_dtype, e.name, "dtype " + e.dtype);
            }
            if (shape_numel(e.shape) * width != e.end - e.begin) {
                throw CheckpointError(CheckpointFault::shape_mismatch, e.name,
                                      "shape " + shape_string(e.shape) + " does not cover its byte span");
            }
            if (e.end > data_size) {
                throw CheckpointError(CheckpointFault::truncated, e.name, "data extends past end of file");
            }
            entries_.emplace(e.name, std::move(e));
        }
        std::vector<const Entry*> by_offset;
        for (const auto& [_, e] : entries_) {
            by_offset.push_back(&e);
        }
        std::sort(by_offset.begin(), by_offset.end(),
                  [](const Entry* a, const Entry* b) { return a->begin < b->begin; });
        for (std::size_t i = 1; i < by_offset.size(); ++i) {
            if (by_offset[i]->begin < by_offset[i - 1]->end) {
                throw CheckpointError(CheckpointFault::overlapping_offsets, by_offset[i]->name,
                                      "overlaps " + by_offset[i - 1]->name);
            }
        }
    }

    const std::filesystem::path& path() const noexcept { return path_; }
    const std::map<std::string, Entry>& entries() const noexcept { return entries_; }
    const json& metadata() const noexcept { return metadata_; }
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    const Entry& entry(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) {
            throw CheckpointError(CheckpointFault::missing_tensor, name, "not in " + path_.string());
        }
        return it->second;
    }

    // Reads and converts a tensor; F16/BF16 are widened exactly to f32.
    template <Scalar T>
    Tensor<T> read(const std::string& name) const {
        const Entry& e = entry(name);
        return read_range<T>(e, 0, shape_numel(e.shape), e.shape);
    }

    // One row of a matrix tensor.
    template <Scalar T>
    Tensor<T> read_row(const std::string& name, std::size_t row) const {
        const Entry& e = entry(name);
        if (e.shape.size() != 2 || row >= e.shape[0]) {
            throw InputError("row " + std::to_string(row) + " outside " + name + " " + shape_string(e.shape));
        }
        return read_range<T>(e, row * e.shape[1], e.shape[1], {e.shape[1]});
    }

private:
    template <Scalar T>
    Tensor<T> read_range(const Entry& e, std::size_t first, std::size_t count, Shape shape) const {
        const std::size_t width = dtype_size(e.dtype);
        std::string raw(count * width, '\0');
        std::ifstream in(path_, std::ios::binary);
        in.seekg(static_cast<std::streamoff>(data_start_ + e.begin + first * width));
        in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
        if (!in) {
            throw CheckpointError(CheckpointFault::truncated, e.name, "short read");
        }
        std::vector<T> out(count);
        const char* p = raw.data();
        for (std::size_t i = 0; i < count; ++i) {
            if (e.dtype == "F32") {
                float v;
                std::memcpy(&v, p + 4 * i, 4);
                out[i] = static_cast<T>(v);
            } else if (e.dtype == "F64") {
                double v;
                std::memcpy(&v, p + 8 * i, 8);
                out[i] = static_cast<T>(v);
            } else {
                std::uint16_t h;
                std::memcpy(&h, p + 2 * i, 2);
                out[i] = static_cast<T>(e.dtype == "BF16" ? bf16_to_f32(h) : f16_to_f32(h));
            }
        }
        return Tensor<T>(std::move(shape), std::move(out));
    }

    std::filesystem::path path_;
    std::uint64_t data_start_ = 0;
    std::map<std::string, Entry> entries_;
    json metadata_;
};

// Canonical serialisation: tensors in name order, contiguous offsets, header
// padded with spaces to a multiple of eight bytes. Equal inputs give equal bytes.
template <Scalar T>
std::string serialize(const std::map<std::string, const Tensor<T>*>& tensors, const json& metadata = nullptr) {
    const std::string dtype = std::is_same_v<T, float> ? "F32" : "F64";
    json header = json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const std::uint64_t bytes = t->numel() * sizeof(T);
        header[name] = json{{"dtype", dtype}, {"shape", t->shape()}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    if (!metadata.is_null()) {
        header["__metadata__"] = metadata;
    }
    std::string h = header.dump();
    h.append((8 - h.size() % 8) % 8, ' ');
    std::string out;
    out.reserve(8 + h.size() + offset);
    const std::uint64_t n = h.size();
    out.append(reinterpret_cast<const char*>(&n), 8);
    out += h;
    for (const auto& [_, t] : tensors) {
        out.append(reinterpret_cast<const char*>(t->ptr()), t->numel() * sizeof(T));
    }
    return out;
}

template <Scalar T>
void write(const std::filesystem::path& path, const std::map<std::string, const Tensor<T>*>& tensors,
           const json& metadata = nullptr) {
    atomic_write(path, serialize(tensors, metadata));
}

} // namespace safetensors
} // namespace massive
