// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lipedit/io.hpp"

#include <bit>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lipedit::io {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'E', 'Y', 'T', 'S'};

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

uint64_t get_u64(const std::string& in, size_t pos) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    return v;
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

uint32_t get_u32(const std::string& in, size_t pos) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    return v;
}

const char* dtype_name(Dtype d) { return d == Dtype::f64 ? "f64" : "f32"; }

size_t dtype_size(Dtype d) { return d == Dtype::f64 ? 8 : 4; }

}  // namespace

const Tensor& Container::get(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return t.tensor;
    }
    throw Error("container has no tensor named '" + name + "'");
}

bool Container::has(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return true;
    }
    return false;
}

std::string serialize(const Container& c, Dtype dtype) {
    json header;
    header["schema_version"] = kContainerSchemaVersion;
    header["dtype"] = dtype_name(dtype);
    header["tags"] = c.tags;
    json entries = json::array();
    size_t total = 0;
    for (const auto& t : c.tensors) {
        entries.push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
        total += t.tensor.size();
    }
    header["tensors"] = entries;
    if (c.tensors.size() == 1) header["shape"] = c.tensors.front().tensor.shape();
    const std::string h = header.dump();

    std::string out(kMagic, 4);
    put_u64(out, h.size());
    out += h;
    out.reserve(out.size() + total * dtype_size(dtype));
    for (const auto& t : c.tensors) {
        for (double v : t.tensor.data()) {
            if (dtype == Dtype::f64) {
                put_u64(out, std::bit_cast<uint64_t>(v));
            } else {
                put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(v)));
            }
        }
    }
    return out;
}

Container deserialize(const std::string& bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error("not an EYTS tensor container");
    const uint64_t hlen = get_u64(bytes, 4);
    if (hlen > bytes.size() - 12) throw Error("container header is truncated");
    const json header = parse_json(bytes.substr(12, hlen), "container header");
    const int version = header.value("schema_version", 0);
    if (version != kContainerSchemaVersion) {
        throw Error("unsupported container schema_version " + std::to_string(version));
    }
    const std::string dname = header.at("dtype").get<std::string>();
    Dtype dtype;
    if (dname == "f64") {
        dtype = Dtype::f64;
    } else if (dname == "f32") {
        dtype = Dtype::f32;
    } else {
        throw Error("unknown container dtype '" + dname + "'");
    }
    Container c;
    c.tags = header.value("tags", json::object());
    size_t pos = 12 + hlen;
    const size_t width = dtype_size(dtype);
    for (const auto& e : header.at("tensors")) {
        const Shape shape = e.at("shape").get<Shape>();
        Tensor t(shape);
        const size_t n = t.size();
        if (bytes.size() - pos < n * width) throw Error("container payload is truncated");
        for (auto& v : t.data()) {
            v = dtype == Dtype::f64 ? std::bit_cast<double>(get_u64(bytes, pos))
                                    : static_cast<double>(std::bit_cast<float>(get_u32(bytes, pos)));
            pos += width;
        }
        c.tensors.push_back({e.at("name").get<std::string>(), std::move(t)});
    }
    if (pos != bytes.size()) throw Error("container payload has trailing bytes");
    return c;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("failed writing " + path.string());
}

void write_container(const std::filesystem::path& path, const Container& c, Dtype dtype) {
    write_text(path, serialize(c, dtype));
}

Container read_container(const std::filesystem::path& path) {
    try {
        return deserialize(read_text(path));
    } catch (const Error& e) {
        throw Error(path.string() + ": " + e.what());
    }
}

void write_tensor(const std::filesystem::path& path, const Tensor& t, const json& tags, Dtype dtype) {
    Container c;
    c.tags = tags.is_null() ? json::object() : tags;
    c.tensors.push_back({"data", t});
    write_container(path, c, dtype);
}

std::pair<Tensor, json> read_tensor(const std::filesystem::path& path) {
    Container c = read_container(path);
    return {c.get("data"), c.tags};
}

json parse_json(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw JsonSyntaxError("malformed JSON in " + what + " at byte offset " + std::to_string(e.byte) + ": " + e.what(),
                              e.byte);
    }
}

json read_json(const std::filesystem::path& path) { return parse_json(read_text(path), path.string()); }

std::filesystem::path data_dir() {
    const char* env = std::getenv("EY_DATA_DIR");
    return env && *env ? std::filesystem::path(env) : std::filesystem::current_path();
}

std::filesystem::path resolve(const std::filesystem::path& p) {
    return p.is_absolute() ? p : data_dir() / p;
}

}  // namespace lipedit::io
