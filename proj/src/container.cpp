#include "portpatch/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <system_error>

#include <fmt/format.h>
#include <unistd.h>

#include "json.hpp"
#include "portpatch/error.hpp"

namespace portpatch {

const Tensor& Checkpoint::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw LookupError(fmt::format("tensor '{}' not found", name));
    return it->second;
}

std::optional<std::string> Checkpoint::model_version() const {
    auto it = metadata.find(model_version_key);
    if (it == metadata.end()) return std::nullopt;
    return it->second;
}

namespace {

using ordered_json = nlohmann::ordered_json;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

void put_value(std::vector<std::uint8_t>& out, DType dtype, double v) {
    if (dtype == DType::f32) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    } else {
        put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
}

double get_value(const std::uint8_t* p, DType dtype) {
    if (dtype == DType::f32) {
        std::uint32_t bits = 0;
        for (int i = 3; i >= 0; --i) bits = (bits << 8) | p[i];
        return static_cast<double>(std::bit_cast<float>(bits));
    }
    return std::bit_cast<double>(get_u64(p));
}

struct Entry {
    std::string name;
    DType dtype;
    Shape shape;
    std::uint64_t begin;
    std::uint64_t end;
};

DType parse_dtype(const std::string& name, const ordered_json& v) {
    if (!v.is_string()) throw ParseError(fmt::format("tensor '{}': dtype must be a string", name));
    const auto& s = v.get_ref<const std::string&>();
    if (s == "F32") return DType::f32;
    if (s == "F64") return DType::f64;
    throw ParseError(fmt::format("tensor '{}': unknown dtype '{}'", name, s));
}

Entry parse_entry(const std::string& name, const ordered_json& info, std::uint64_t payload_size) {
    if (name.empty()) throw ParseError("empty tensor name in header");
    if (!info.is_object()) throw ParseError(fmt::format("tensor '{}': header entry must be an object", name));
    for (const char* key : {"dtype", "shape", "data_offsets"}) {
        if (!info.contains(key)) throw ParseError(fmt::format("tensor '{}': missing field '{}'", name, key));
    }
    Entry e{name, parse_dtype(name, info["dtype"]), {}, 0, 0};

    const auto& shape = info["shape"];
    if (!shape.is_array() || shape.empty() || shape.size() > 2) {
        throw ParseError(fmt::format("tensor '{}': shape must be an array of 1 or 2 dimensions", name));
    }
    std::uint64_t count = 1;
    for (const auto& dim : shape) {
        if (!dim.is_number_unsigned() || dim.get<std::uint64_t>() == 0) {
            throw ParseError(fmt::format("tensor '{}': shape entries must be positive integers", name));
        }
        e.shape.push_back(dim.get<std::size_t>());
        count *= dim.get<std::uint64_t>();
    }

    const auto& offs = info["data_offsets"];
    if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() ||
        !offs[1].is_number_unsigned()) {
        throw ParseError(fmt::format("tensor '{}': data_offsets must be two unsigned integers", name));
    }
    e.begin = offs[0].get<std::uint64_t>();
    e.end = offs[1].get<std::uint64_t>();
    if (e.begin > e.end || e.end > payload_size) {
        throw ParseError(fmt::format("tensor '{}': data_offsets out of range [{}, {}) for payload of {} bytes",
                                     name, e.begin, e.end, payload_size));
    }
    if (e.end - e.begin != count * dtype_size(e.dtype)) {
        throw ParseError(fmt::format("tensor '{}': data_offsets span {} bytes but shape {} of {} needs {}", name,
                                     e.end - e.begin, shape_string(e.shape), dtype_name(e.dtype),
                                     count * dtype_size(e.dtype)));
    }
    return e;
}

}  // namespace

std::vector<std::uint8_t> encode_container(const Checkpoint& ckpt) {
    ordered_json header = ordered_json::object();
    if (!ckpt.metadata.empty()) {
        ordered_json meta = ordered_json::object();
        for (const auto& [k, v] : ckpt.metadata) meta[k] = v;
        header[metadata_header_key] = std::move(meta);
    }
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.empty() || name == metadata_header_key) {
            throw InputError(fmt::format("invalid tensor name '{}'", name));
        }
        const std::uint64_t bytes = t.size() * dtype_size(t.dtype());
        header[name] = {{"dtype", std::string(dtype_name(t.dtype()))},
                        {"shape", t.shape()},
                        {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string text;
    try {
        text = header.dump();
    } catch (const nlohmann::json::exception& ex) {
        throw InputError(fmt::format("cannot encode header: {}", ex.what()));
    }
    text.append((8 - (8 + text.size()) % 8) % 8, ' ');

    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset);
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, t] : ckpt.tensors) {
        for (double v : t.values()) put_value(out, t.dtype(), v);
    }
    return out;
}

Checkpoint decode_container(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw ParseError("truncated file: missing 8-byte header length");
    const std::uint64_t header_len = get_u64(bytes.data());
    if (header_len > bytes.size() - 8) {
        throw ParseError(fmt::format("truncated file: header length {} exceeds the {} bytes available", header_len,
                                     bytes.size() - 8));
    }
    const std::uint64_t payload_size = bytes.size() - 8 - header_len;
    const auto* header_begin = reinterpret_cast<const char*>(bytes.data() + 8);

    ordered_json header;
    try {
        header = ordered_json::parse(header_begin, header_begin + header_len);
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(fmt::format("malformed JSON header: {}", ex.what()));
    }
    if (!header.is_object()) throw ParseError("malformed JSON header: top level must be an object");

    Checkpoint ckpt;
    std::vector<Entry> entries;
    for (const auto& [name, info] : header.items()) {
        if (name == metadata_header_key) {
            if (!info.is_object()) throw ParseError("__metadata__ must be an object");
            for (const auto& [k, v] : info.items()) {
                if (!v.is_string()) throw ParseError(fmt::format("__metadata__ key '{}' must map to a string", k));
                ckpt.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        entries.push_back(parse_entry(name, info, payload_size));
    }

    // Offsets must tile the payload exactly: no overlap, no gap, no trailing bytes.
    std::vector<const Entry*> by_offset;
    for (const auto& e : entries) by_offset.push_back(&e);
    std::stable_sort(by_offset.begin(), by_offset.end(),
                     [](const Entry* x, const Entry* y) { return x->begin < y->begin; });
    std::uint64_t cursor = 0;
    const Entry* prev = nullptr;
    for (const Entry* e : by_offset) {
        if (e->begin < cursor) {
            throw ParseError(fmt::format("tensor '{}': overlapping data_offsets with tensor '{}'", e->name,
                                         prev != nullptr ? prev->name : std::string("?")));
        }
        if (e->begin > cursor) {
            throw ParseError(fmt::format("tensor '{}': data_offsets leave a gap of {} bytes before it", e->name,
                                         e->begin - cursor));
        }
        cursor = e->end;
        prev = e;
    }
    if (cursor != payload_size) {
        throw ParseError(fmt::format("payload has {} trailing bytes not covered by data_offsets",
                                     payload_size - cursor));
    }

    const std::uint8_t* payload = bytes.data() + 8 + header_len;
    for (const auto& e : entries) {
        const std::size_t width = dtype_size(e.dtype);
        const std::size_t count = (e.end - e.begin) / width;
        std::vector<double> values(count);
        for (std::size_t i = 0; i < count; ++i) {
            values[i] = get_value(payload + e.begin + i * width, e.dtype);
            if (!std::isfinite(values[i])) {
                throw ParseError(fmt::format("tensor '{}': non-finite value at index {}", e.name, i));
            }
        }
        if (!ckpt.tensors.emplace(e.name, Tensor::from_values(e.shape, std::move(values), e.dtype)).second) {
            throw ParseError(fmt::format("tensor '{}': duplicate name", e.name));
        }
    }
    return ckpt;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::filesystem::path tmp = path;
    tmp += fmt::format(".tmp.{}", static_cast<long>(::getpid()));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::error_code ignored;
            std::filesystem::remove(tmp, ignored);
            throw IoError(fmt::format("write failed for '{}'", path.string()));
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::error_code ignored;
        std::filesystem::remove(tmp, ignored);
        throw IoError(fmt::format("cannot move output into place at '{}': {}", path.string(), ec.message()));
    }
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_container(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = encode_container(ckpt);
    write_file_atomic(path, bytes);
}

Checkpoint read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError(fmt::format("read failed for '{}'", path.string()));
    try {
        return decode_container(bytes);
    } catch (const ParseError& ex) {
        throw ParseError(fmt::format("{}: {}", path.string(), ex.what()));
    }
}

}  // namespace portpatch
