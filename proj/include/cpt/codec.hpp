#pragma once

#include <map>
#include <string>
#include <vector>

#include "cpt/tokenizer.hpp"

namespace cpt {

struct Slot {
    std::string name;
    std::string description;
    std::string service_id;
};

// An ordered list of slots rendered as a masked-span query:
// "desc1 : <M1> . desc2 : <M2> ."
struct Query {
    std::vector<Slot> slots;
    std::string rendered;
};

using ValueMap = std::map<std::string, std::string>;

struct FormattedExample {
    std::string input_text;
    std::string target_text;
    std::vector<std::string> sentinel_slots;  // sentinel i+1 answers slot name [i]
};

Query build_query(const std::vector<Slot>& slots);

// input = dialog <sep> query; target lists "<Mi> value" per query slot with
// "None" standing in for anything the value map does not provide.
FormattedExample format_example(const std::string& dialog, const ValueMap& values,
                                const Query& query);

// As format_example but with one target per query position, so queries whose
// slots collide by name (possible after fusion across services) stay exact.
FormattedExample format_with_targets(const std::string& dialog, const Query& query,
                                     const std::vector<std::string>& targets);

// Total inverse of the target rendering: text before the first sentinel is
// dropped, a sentinel missing from the text yields "None" for its slot, and
// values are whitespace-trimmed. Malformed text degrades to "None".
ValueMap parse_prediction(const std::string& generated, const Query& query);

// Flat baseline format: input = dialog <sep> service name; target enumerates
// filled slots as "name = value ; name = value".
FormattedExample name_format_example(const std::string& dialog,
                                     const std::string& service_name,
                                     const std::vector<Slot>& slots,
                                     const ValueMap& values);
ValueMap parse_name_format(const std::string& generated, const std::vector<Slot>& slots);

// Canonical form used for accuracy comparison: lowercase, collapse runs of
// whitespace, strip surrounding punctuation.
std::string normalize_value(const std::string& v);

// Returns values with every query slot present, absent ones set to "None".
ValueMap pad_values(const ValueMap& values, const std::vector<Slot>& slots);

}  // namespace cpt
