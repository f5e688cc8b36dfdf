// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "doctest.h"
#include "lipedit/io.hpp"
#include "lipedit/rng.hpp"

using namespace lipedit;
using namespace lipedit::io;

namespace {

Shape random_shape(Rng& rng) {
    Shape s;
    const auto rank = static_cast<int64_t>(rng.below(5));
    for (int64_t i = 0; i < rank; ++i) s.push_back(static_cast<int64_t>(rng.below(5)) + (i == 0 ? 0 : 1));
    return s;
}

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "lipedit_test_io";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("random containers round-trip bitwise in f64") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        Container c;
        c.tags = {{"trial", trial}, {"note", "x"}};
        const auto count = static_cast<int>(rng.below(4));
        for (int k = 0; k < count; ++k) c.tensors.push_back({"t" + std::to_string(k), rng.normal_tensor(random_shape(rng), 1e3)});
        const Container back = deserialize(serialize(c));
        CHECK(back.tags == c.tags);
        REQUIRE(back.tensors.size() == c.tensors.size());
        for (size_t k = 0; k < c.tensors.size(); ++k) {
            CHECK(back.tensors[k].name == c.tensors[k].name);
            CHECK(back.tensors[k].tensor.bit_equal(c.tensors[k].tensor));
        }
    }
}

TEST_CASE("f32 containers round-trip through float rounding") {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor t = rng.normal_tensor(random_shape(rng), 10.0);
        Container c;
        c.tensors.push_back({"data", t});
        const Tensor back = deserialize(serialize(c, Dtype::f32)).get("data");
        REQUIRE(back.same_shape(t));
        for (size_t i = 0; i < t.size(); ++i) {
            CHECK(back[i] == static_cast<double>(static_cast<float>(t[i])));
        }
    }
}

TEST_CASE("special values survive the payload") {
    Tensor t({4}, std::vector<double>{-0.0, 1e-310, 1.0 / 3.0, -1e300});
    const Tensor back = deserialize(serialize(Container{{}, {{"a", t}}})).get("a");
    CHECK(back.bit_equal(t));
    CHECK(std::signbit(back[0]));
}

TEST_CASE("header layout is magic, little-endian length, json") {
    Container c;
    c.tensors.push_back({"data", Tensor({2, 3}, 1.5)});
    const std::string bytes = serialize(c);
    CHECK(bytes.substr(0, 4) == "EYTS");
    uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
    const auto header = nlohmann::json::parse(bytes.substr(12, len));
    CHECK(header["schema_version"] == kContainerSchemaVersion);
    CHECK(header["dtype"] == "f64");
    CHECK(header["shape"] == Shape{2, 3});
    CHECK(bytes.size() == 12 + len + 6 * 8);
}

TEST_CASE("damaged containers are rejected") {
    Container c;
    c.tensors.push_back({"data", Tensor({3}, 2.0)});
    const std::string good = serialize(c);
    CHECK_THROWS_WITH_AS(deserialize("NOPE" + good.substr(4)), doctest::Contains("not an EYTS"), Error);
    CHECK_THROWS_WITH_AS(deserialize(good.substr(0, good.size() - 1)), doctest::Contains("truncated"), Error);
    CHECK_THROWS_WITH_AS(deserialize(good + "x"), doctest::Contains("trailing"), Error);
    CHECK_THROWS_WITH_AS(deserialize(good.substr(0, 20)), doctest::Contains("truncated"), Error);
    CHECK_THROWS_WITH_AS(c.get("missing"), doctest::Contains("missing"), Error);
}

TEST_CASE("files round-trip and resolve against the data directory") {
    const auto path = scratch("nested/one.eyts");
    const Tensor t({2, 2}, std::vector<double>{1, 2, 3, 4});
    write_tensor(path, t, {{"kind", "test"}});
    const auto [back, tags] = read_tensor(path);
    CHECK(back.bit_equal(t));
    CHECK(tags["kind"] == "test");

    setenv("EY_DATA_DIR", scratch("").c_str(), 1);
    CHECK(resolve("nested/one.eyts") == path);
    CHECK(resolve("/abs/x") == std::filesystem::path("/abs/x"));
    unsetenv("EY_DATA_DIR");
    CHECK(data_dir() == std::filesystem::current_path());
    CHECK_THROWS_AS(read_text(scratch("does_not_exist")), Error);
}

TEST_CASE("malformed json reports the byte offset") {
    try {
        parse_json("{\"a\": 1,, }", "request");
        FAIL("expected a syntax error");
    } catch (const JsonSyntaxError& e) {
        CHECK(e.byte_offset == 9);
        CHECK(std::string(e.what()).find("byte offset 9") != std::string::npos);
        CHECK(std::string(e.what()).find("request") != std::string::npos);
    }
    CHECK(parse_json("[1, 2]", "x") == nlohmann::json::array({1, 2}));
}
