// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Word-timestamped transcripts, word-level diffing of an edited script and
// derivation of timeline edit operations.

#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "lipedit/tensor.hpp"

namespace lipedit::transcript {

/// Schema violation or malformed document. `byte_offset` is set for JSON syntax errors,
/// `word_index` for per-word invariant violations.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::optional<size_t> byte_offset = std::nullopt,
               std::optional<size_t> word_index = std::nullopt)
        : Error(what), byte_offset(byte_offset), word_index(word_index) {}
    std::optional<size_t> byte_offset;
    std::optional<size_t> word_index;
};

struct Word {
    std::string text;  // as written, for display
    std::string norm;  // lowercased, punctuation stripped
    double start_s = 0.0;
    double end_s = 0.0;
};

struct Transcript {
    std::vector<Word> words;
    std::optional<double> fps_hint;

    double mean_word_duration() const;
};

std::string normalize_token(std::string_view token);
/// Splits edited text on whitespace; tokens that normalize to nothing are dropped.
std::vector<std::string> tokenize(std::string_view text);

Transcript parse_transcript(std::string_view document);
Transcript transcript_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Transcript& t);

enum class SpanKind { keep, insert, remove };

struct EditSpan {
    SpanKind kind = SpanKind::keep;
    size_t orig_begin = 0;  // original word range [orig_begin, orig_end); empty for inserts
    size_t orig_end = 0;
    size_t edit_begin = 0;  // edited token range [edit_begin, edit_end); empty for removals
    size_t edit_end = 0;
    std::vector<std::string> new_text;  // edited tokens covered by keep/insert spans
    double duration_s = 0.0;
};

struct EditScript {
    std::vector<EditSpan> spans;
    bool has_changes() const;
};

/// LCS alignment of normalized tokens. Ties prefer the leftmost match, and within a
/// changed region removals precede insertions.
EditScript diff_words(const Transcript& original, const std::vector<std::string>& edited_tokens);

enum class OpKind { addition, removal, retime, rerender };

enum class Region { lip, face, head, full, none, custom };

struct EditOp {
    OpKind kind = OpKind::addition;
    double at_s = 0.0;
    /// Signed change for addition/removal; segment length for retime; span length for rerender.
    double duration_s = 0.0;
    std::optional<double> scale;   // retime: target / current duration
    std::optional<Region> region;  // rerender
};

/// Removals anchor at the deleted span's first word; additions at the end of the last
/// kept word before them (t = 0 at the start). `insert_durations`, when given, has one
/// entry per insert span and replaces the estimated durations.
std::vector<EditOp> derive_ops(const EditScript& script, const Transcript& original,
                               const std::optional<std::vector<double>>& insert_durations = std::nullopt);

/// Evenly distributed micro additions/removals turning [t0, t1] into target_duration_s.
std::vector<EditOp> plan_retime(double t0, double t1, double target_duration_s, double granularity_s = 0.3);

std::string to_string(OpKind k);
std::string to_string(Region r);
std::string to_string(SpanKind k);
OpKind op_kind_from_string(const std::string& s);
Region region_from_string(const std::string& s);

nlohmann::json to_json(const EditOp& op);
nlohmann::json ops_to_json(const std::vector<EditOp>& ops);
std::vector<EditOp> ops_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EditScript& s);

}  // namespace lipedit::transcript
