// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lipedit/transcript.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

namespace lipedit::transcript {

using nlohmann::json;

double Transcript::mean_word_duration() const {
    if (words.empty()) return 0.0;
    double s = 0.0;
    for (const auto& w : words) s += w.end_s - w.start_s;
    return s / static_cast<double>(words.size());
}

std::string normalize_token(std::string_view token) {
    std::string out;
    out.reserve(token.size());
    for (unsigned char c : token) {
        if (c >= 0x80) {
            out.push_back(static_cast<char>(c));  // keep UTF-8 bytes verbatim
        } else if (std::isalnum(c)) {
            out.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    return out;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) {
            std::string tok(text.substr(i, j - i));
            if (!normalize_token(tok).empty()) out.push_back(std::move(tok));
        }
        i = j;
    }
    return out;
}

Transcript transcript_from_json(const json& j) {
    if (!j.is_object()) throw ParseError("transcript must be a JSON object");
    if (!j.contains("words") || !j["words"].is_array()) throw ParseError("transcript requires a \"words\" array");
    Transcript t;
    if (j.contains("fps_hint") && !j["fps_hint"].is_null()) {
        if (!j["fps_hint"].is_number()) throw ParseError("fps_hint must be a number");
        t.fps_hint = j["fps_hint"].get<double>();
    }
    const auto& words = j["words"];
    for (size_t i = 0; i < words.size(); ++i) {
        const auto& w = words[i];
        if (!w.is_object() || !w.contains("text") || !w["text"].is_string() || !w.contains("start_s") ||
            !w["start_s"].is_number() || !w.contains("end_s") || !w["end_s"].is_number()) {
            throw ParseError("word " + std::to_string(i) + " must have string text and numeric start_s/end_s",
                             std::nullopt, i);
        }
        Word word;
        word.text = w["text"].get<std::string>();
        word.norm = normalize_token(word.text);
        word.start_s = w["start_s"].get<double>();
        word.end_s = w["end_s"].get<double>();
        if (!(word.start_s >= 0.0) || !(word.end_s > word.start_s)) {
            throw ParseError("word " + std::to_string(i) + " needs 0 <= start_s < end_s", std::nullopt, i);
        }
        if (!t.words.empty() && word.start_s < t.words.back().end_s) {
            throw ParseError("word " + std::to_string(i) + " overlaps or precedes word " + std::to_string(i - 1),
                             std::nullopt, i);
        }
        t.words.push_back(std::move(word));
    }
    return t;
}

Transcript parse_transcript(std::string_view document) {
    json j;
    try {
        j = json::parse(document);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed JSON at byte ") + std::to_string(e.byte) + ": " + e.what(), e.byte);
    }
    return transcript_from_json(j);
}

json to_json(const Transcript& t) {
    json words = json::array();
    for (const auto& w : t.words) words.push_back({{"text", w.text}, {"start_s", w.start_s}, {"end_s", w.end_s}});
    json j = {{"words", words}};
    if (t.fps_hint) j["fps_hint"] = *t.fps_hint;
    return j;
}

bool EditScript::has_changes() const {
    return std::any_of(spans.begin(), spans.end(), [](const EditSpan& s) { return s.kind != SpanKind::keep; });
}

EditScript diff_words(const Transcript& original, const std::vector<std::string>& edited_tokens) {
    const size_t n = original.words.size();
    const size_t m = edited_tokens.size();
    std::vector<std::string> b(m);
    for (size_t j = 0; j < m; ++j) b[j] = normalize_token(edited_tokens[j]);

    // suffix[i][j] = LCS length of original[i:] and edited[j:]
    std::vector<std::vector<uint32_t>> suffix(n + 1, std::vector<uint32_t>(m + 1, 0));
    for (size_t i = n; i-- > 0;) {
        for (size_t j = m; j-- > 0;) {
            suffix[i][j] = original.words[i].norm == b[j] ? suffix[i + 1][j + 1] + 1
                                                          : std::max(suffix[i + 1][j], suffix[i][j + 1]);
        }
    }

    const double est = original.mean_word_duration();
    EditScript script;
    auto push = [&](SpanKind kind, size_t i, size_t j) {
        if (script.spans.empty() || script.spans.back().kind != kind) {
            EditSpan s;
            s.kind = kind;
            s.orig_begin = s.orig_end = i;
            s.edit_begin = s.edit_end = j;
            script.spans.push_back(std::move(s));
        }
        EditSpan& s = script.spans.back();
        if (kind != SpanKind::insert) s.orig_end = i + 1;
        if (kind != SpanKind::remove) {
            s.edit_end = j + 1;
            s.new_text.push_back(edited_tokens[j]);
        }
    };

    size_t i = 0, j = 0;
    while (i < n || j < m) {
        if (i < n && j < m && original.words[i].norm == b[j] && suffix[i][j] == suffix[i + 1][j + 1] + 1) {
            push(SpanKind::keep, i++, j++);
        } else if (i < n && (j == m || suffix[i + 1][j] >= suffix[i][j + 1])) {
            push(SpanKind::remove, i++, j);
        } else {
            push(SpanKind::insert, i, j++);
        }
    }

    for (auto& s : script.spans) {
        if (s.kind == SpanKind::insert) {
            s.duration_s = static_cast<double>(s.new_text.size()) * est;
        } else {
            s.duration_s = original.words[s.orig_end - 1].end_s - original.words[s.orig_begin].start_s;
        }
    }
    return script;
}

std::vector<EditOp> derive_ops(const EditScript& script, const Transcript& original,
                               const std::optional<std::vector<double>>& insert_durations) {
    const auto inserts = std::count_if(script.spans.begin(), script.spans.end(),
                                       [](const EditSpan& s) { return s.kind == SpanKind::insert; });
    if (insert_durations && static_cast<long>(insert_durations->size()) != inserts) {
        throw Error("expected " + std::to_string(inserts) + " insert durations, got " +
                    std::to_string(insert_durations->size()));
    }
    std::vector<EditOp> ops;
    double anchor = 0.0;  // end of the last kept word seen so far
    size_t insert_idx = 0;
    for (const auto& s : script.spans) {
        switch (s.kind) {
            case SpanKind::keep:
                anchor = original.words[s.orig_end - 1].end_s;
                break;
            case SpanKind::remove: {
                EditOp op;
                op.kind = OpKind::removal;
                op.at_s = original.words[s.orig_begin].start_s;
                op.duration_s = -(original.words[s.orig_end - 1].end_s - op.at_s);
                ops.push_back(op);
                break;
            }
            case SpanKind::insert: {
                EditOp op;
                op.kind = OpKind::addition;
                op.at_s = anchor;
                op.duration_s = insert_durations ? (*insert_durations)[insert_idx] : s.duration_s;
                if (!(op.duration_s > 0.0)) {
                    throw Error("insert span " + std::to_string(insert_idx) + " needs a positive duration");
                }
                ++insert_idx;
                ops.push_back(op);
                break;
            }
        }
    }
    return ops;
}

std::vector<EditOp> plan_retime(double t0, double t1, double target_duration_s, double granularity_s) {
    if (!(t1 > t0)) throw Error("retime segment needs t1 > t0");
    if (!(granularity_s > 0.0)) throw Error("retime granularity must be positive");
    if (!(target_duration_s > 0.0)) throw Error("retime target duration must be positive");
    if (target_duration_s < granularity_s) {
        throw Error("retime target " + std::to_string(target_duration_s) + " s is below the granularity floor " +
                    std::to_string(granularity_s) + " s");
    }
    const double length = t1 - t0;
    const double delta = target_duration_s - length;
    if (std::abs(delta) <= 1e-12) return {};
    const auto count = static_cast<size_t>(std::ceil(std::abs(delta) / granularity_s - 1e-9));
    const double each = delta / static_cast<double>(count);
    const double spacing = length / static_cast<double>(count);
    std::vector<EditOp> ops;
    ops.reserve(count);
    for (size_t k = 0; k < count; ++k) {
        EditOp op;
        op.kind = delta > 0 ? OpKind::addition : OpKind::removal;
        op.at_s = t0 + (static_cast<double>(k) + 0.5) * spacing;
        op.duration_s = each;
        ops.push_back(op);
    }
    return ops;
}

std::string to_string(OpKind k) {
    switch (k) {
        case OpKind::addition: return "addition";
        case OpKind::removal: return "removal";
        case OpKind::retime: return "retime";
        case OpKind::rerender: return "rerender";
    }
    return "?";
}

std::string to_string(Region r) {
    switch (r) {
        case Region::lip: return "lip";
        case Region::face: return "face";
        case Region::head: return "head";
        case Region::full: return "full";
        case Region::none: return "none";
        case Region::custom: return "custom";
    }
    return "?";
}

std::string to_string(SpanKind k) {
    switch (k) {
        case SpanKind::keep: return "keep";
        case SpanKind::insert: return "insert";
        case SpanKind::remove: return "delete";
    }
    return "?";
}

OpKind op_kind_from_string(const std::string& s) {
    if (s == "addition") return OpKind::addition;
    if (s == "removal") return OpKind::removal;
    if (s == "retime") return OpKind::retime;
    if (s == "rerender") return OpKind::rerender;
    throw ParseError("unknown op kind \"" + s + "\"");
}

Region region_from_string(const std::string& s) {
    if (s == "lip") return Region::lip;
    if (s == "face") return Region::face;
    if (s == "head") return Region::head;
    if (s == "full") return Region::full;
    if (s == "none") return Region::none;
    if (s == "custom") return Region::custom;
    throw ParseError("unknown region \"" + s + "\"");
}

json to_json(const EditOp& op) {
    json j = {{"kind", to_string(op.kind)}, {"at_s", op.at_s}, {"duration_s", op.duration_s}};
    if (op.scale) j["scale"] = *op.scale;
    if (op.region) j["region"] = to_string(*op.region);
    return j;
}

json ops_to_json(const std::vector<EditOp>& ops) {
    json arr = json::array();
    for (const auto& op : ops) arr.push_back(to_json(op));
    return json{{"ops", arr}};
}

std::vector<EditOp> ops_from_json(const json& j) {
    if (!j.is_object() || !j.contains("ops") || !j["ops"].is_array()) {
        throw ParseError("op list requires an \"ops\" array");
    }
    std::vector<EditOp> ops;
    for (size_t i = 0; i < j["ops"].size(); ++i) {
        const auto& o = j["ops"][i];
        if (!o.is_object() || !o.contains("kind") || !o["kind"].is_string() || !o.contains("at_s") ||
            !o["at_s"].is_number() || !o.contains("duration_s") || !o["duration_s"].is_number()) {
            throw ParseError("op " + std::to_string(i) + " needs kind, at_s and duration_s");
        }
        EditOp op;
        op.kind = op_kind_from_string(o["kind"].get<std::string>());
        op.at_s = o["at_s"].get<double>();
        op.duration_s = o["duration_s"].get<double>();
        if (o.contains("scale") && !o["scale"].is_null()) op.scale = o["scale"].get<double>();
        if (o.contains("region") && !o["region"].is_null()) op.region = region_from_string(o["region"].get<std::string>());
        const bool ok = (op.kind == OpKind::addition && op.duration_s > 0) ||
                        (op.kind == OpKind::removal && op.duration_s < 0) ||
                        (op.kind == OpKind::retime && op.scale && *op.scale > 0 && op.duration_s > 0) ||
                        (op.kind == OpKind::rerender && op.duration_s > 0);
        if (!ok || op.at_s < 0) throw ParseError("op " + std::to_string(i) + " violates its kind's invariants");
        ops.push_back(op);
    }
    return ops;
}

json to_json(const EditScript& s) {
    json arr = json::array();
    for (const auto& sp : s.spans) {
        arr.push_back({{"kind", to_string(sp.kind)},
                       {"orig_range", {sp.orig_begin, sp.orig_end}},
                       {"new_text", sp.new_text},
                       {"duration_s", sp.duration_s}});
    }
    return json{{"spans", arr}};
}

}  // namespace lipedit::transcript
