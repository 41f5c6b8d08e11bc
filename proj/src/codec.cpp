#include "cpt/codec.hpp"

#include <cctype>
#include <stdexcept>

namespace cpt {

Query build_query(const std::vector<Slot>& slots) {
    if (slots.empty()) throw std::runtime_error("build_query: empty slot list");
    if (slots.size() > Tokenizer::n_sentinels)
        throw std::runtime_error("build_query: " + std::to_string(slots.size()) +
                                 " slots exceed the sentinel alphabet of " +
                                 std::to_string(Tokenizer::n_sentinels));
    Query q;
    q.slots = slots;
    for (size_t i = 0; i < slots.size(); ++i) {
        if (slots[i].description.empty())
            throw std::runtime_error("build_query: slot '" + slots[i].name +
                                     "' has an empty description");
        if (i) q.rendered += ' ';
        q.rendered += slots[i].description + " : " +
                      Tokenizer::sentinel_text(static_cast<int>(i) + 1) + " .";
    }
    return q;
}

ValueMap pad_values(const ValueMap& values, const std::vector<Slot>& slots) {
    ValueMap out;
    for (const Slot& s : slots) {
        auto it = values.find(s.name);
        out[s.name] = (it == values.end() || it->second.empty()) ? "None" : it->second;
    }
    return out;
}

FormattedExample format_example(const std::string& dialog, const ValueMap& values,
                                const Query& query) {
    FormattedExample ex;
    ex.input_text = dialog + " <sep> " + query.rendered;
    ValueMap padded = pad_values(values, query.slots);
    for (size_t i = 0; i < query.slots.size(); ++i) {
        if (i) ex.target_text += ' ';
        ex.target_text += Tokenizer::sentinel_text(static_cast<int>(i) + 1) + ' ' +
                          padded[query.slots[i].name];
        ex.sentinel_slots.push_back(query.slots[i].name);
    }
    return ex;
}

FormattedExample format_with_targets(const std::string& dialog, const Query& query,
                                     const std::vector<std::string>& targets) {
    if (targets.size() != query.slots.size())
        throw std::runtime_error("format_with_targets: " + std::to_string(targets.size()) +
                                 " targets for " + std::to_string(query.slots.size()) +
                                 " slots");
    FormattedExample ex;
    ex.input_text = dialog + " <sep> " + query.rendered;
    for (size_t i = 0; i < query.slots.size(); ++i) {
        if (i) ex.target_text += ' ';
        ex.target_text += Tokenizer::sentinel_text(static_cast<int>(i) + 1) + ' ' +
                          (targets[i].empty() ? "None" : targets[i]);
        ex.sentinel_slots.push_back(query.slots[i].name);
    }
    return ex;
}

ValueMap parse_prediction(const std::string& generated, const Query& query) {
    const std::vector<std::string> words = Tokenizer::split_words(generated);
    // First occurrence of each sentinel index in the generated text.
    std::vector<int> first_pos(Tokenizer::n_sentinels + 1, -1);
    std::vector<bool> is_sent(words.size(), false);
    for (size_t p = 0; p < words.size(); ++p) {
        const int idx = Tokenizer::sentinel_index(words[p]);
        if (idx > 0) {
            is_sent[p] = true;
            if (first_pos[idx] < 0) first_pos[idx] = static_cast<int>(p);
        }
    }
    ValueMap out;
    for (size_t i = 0; i < query.slots.size(); ++i) {
        const int pos = first_pos[i + 1];
        std::string value;
        if (pos >= 0) {
            for (size_t p = pos + 1; p < words.size() && !is_sent[p]; ++p) {
                if (!value.empty()) value += ' ';
                value += words[p];
            }
        }
        out[query.slots[i].name] = value.empty() ? "None" : value;
    }
    return out;
}

FormattedExample name_format_example(const std::string& dialog,
                                     const std::string& service_name,
                                     const std::vector<Slot>& slots,
                                     const ValueMap& values) {
    FormattedExample ex;
    ex.input_text = dialog + " <sep> " + service_name;
    for (const Slot& s : slots) {
        auto it = values.find(s.name);
        if (it == values.end() || it->second.empty() || it->second == "None") continue;
        if (!ex.target_text.empty()) ex.target_text += " ; ";
        ex.target_text += s.name + " = " + it->second;
        ex.sentinel_slots.push_back(s.name);
    }
    return ex;
}

ValueMap parse_name_format(const std::string& generated, const std::vector<Slot>& slots) {
    ValueMap out;
    for (const Slot& s : slots) out[s.name] = "None";
    const std::vector<std::string> words = Tokenizer::split_words(generated);
    size_t start = 0;
    while (start < words.size()) {
        size_t end = start;
        while (end < words.size() && words[end] != ";") ++end;
        // segment [start, end): "name = value words"
        size_t eq = start;
        while (eq < end && words[eq] != "=") ++eq;
        if (eq > start && eq < end) {
            std::string name;
            for (size_t p = start; p < eq; ++p) {
                if (!name.empty()) name += ' ';
                name += words[p];
            }
            std::string value;
            for (size_t p = eq + 1; p < end; ++p) {
                if (!value.empty()) value += ' ';
                value += words[p];
            }
            if (out.count(name) && !value.empty()) out[name] = value;
        }
        start = end + 1;
    }
    return out;
}

std::string normalize_value(const std::string& v) {
    // lowercase, collapse whitespace runs, strip surrounding punctuation
    std::string out;
    for (char c : v) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!out.empty() && out.back() != ' ') out += ' ';
        } else {
            out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
    }
    size_t b = 0, e = out.size();
    auto is_strippable = [](char c) {
        return std::ispunct(static_cast<unsigned char>(c)) || c == ' ';
    };
    while (b < e && is_strippable(out[b])) ++b;
    while (e > b && is_strippable(out[e - 1])) --e;
    return out.substr(b, e - b);
}

}  // namespace cpt
