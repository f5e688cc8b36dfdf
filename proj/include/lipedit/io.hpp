// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary tensor container: "EYTS", a little-endian u64 header length, a JSON header
// and a little-endian flat payload holding one or more named tensors.

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lipedit/tensor.hpp"

namespace lipedit::io {

inline constexpr int kContainerSchemaVersion = 1;

enum class Dtype { f64, f32 };

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct Container {
    nlohmann::json tags = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const;
};

std::string serialize(const Container& c, Dtype dtype = Dtype::f64);
Container deserialize(const std::string& bytes);

void write_container(const std::filesystem::path& path, const Container& c, Dtype dtype = Dtype::f64);
Container read_container(const std::filesystem::path& path);

/// Single tensor stored under the name "data".
void write_tensor(const std::filesystem::path& path, const Tensor& t, const nlohmann::json& tags = {},
                  Dtype dtype = Dtype::f64);
std::pair<Tensor, nlohmann::json> read_tensor(const std::filesystem::path& path);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

class JsonSyntaxError : public Error {
public:
    JsonSyntaxError(const std::string& msg, size_t byte_offset) : Error(msg), byte_offset(byte_offset) {}
    size_t byte_offset;
};

/// Parses JSON; syntax errors name the byte offset.
nlohmann::json parse_json(const std::string& text, const std::string& what);
nlohmann::json read_json(const std::filesystem::path& path);

/// EY_DATA_DIR if set, else the current directory.
std::filesystem::path data_dir();
/// Relative paths are resolved against data_dir().
std::filesystem::path resolve(const std::filesystem::path& p);

}  // namespace lipedit::io
