#include "cpt/tokenizer.hpp"

#include <sstream>
#include <stdexcept>

namespace cpt {

Tokenizer::Tokenizer() {
    add("<pad>");
    add("<eos>");
    add("<bos>");
    add("<sep>");
    for (int i = 1; i <= n_sentinels; ++i) add(sentinel_text(i));
}

void Tokenizer::add(const std::string& w) {
    if (ids_.count(w)) return;
    ids_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
}

std::vector<std::string> Tokenizer::split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& texts) {
    Tokenizer t;
    for (const std::string& s : texts)
        for (const std::string& w : split_words(s)) t.add(w);
    return t;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> out;
    for (const std::string& w : split_words(text)) out.push_back(id(w));
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
        if (i == pad_id || i == bos_id || i == eos_id) continue;
        if (!out.empty()) out += ' ';
        out += word(i);
    }
    return out;
}

int Tokenizer::id(const std::string& w) const {
    auto it = ids_.find(w);
    if (it == ids_.end())
        throw std::runtime_error("tokenizer: unknown word '" + w + "'");
    return it->second;
}

bool Tokenizer::contains(const std::string& w) const { return ids_.count(w) > 0; }

const std::string& Tokenizer::word(int id) const {
    if (id < 0 || id >= size())
        throw std::runtime_error("tokenizer: id " + std::to_string(id) +
                                 " out of range [0," + std::to_string(size()) + ")");
    return words_[static_cast<size_t>(id)];
}

int Tokenizer::sentinel_id(int index) {
    if (index < 1 || index > n_sentinels)
        throw std::runtime_error("sentinel index " + std::to_string(index) +
                                 " out of range [1," + std::to_string(n_sentinels) + "]");
    return sentinel_base + index - 1;
}

std::string Tokenizer::sentinel_text(int index) {
    return "<M" + std::to_string(index) + ">";
}

int Tokenizer::sentinel_index(const std::string& w) {
    if (w.size() < 4 || w.compare(0, 2, "<M") != 0 || w.back() != '>') return -1;
    int n = 0;
    for (size_t i = 2; i + 1 < w.size(); ++i) {
        if (w[i] < '0' || w[i] > '9') return -1;
        n = n * 10 + (w[i] - '0');
    }
    return (n >= 1 && n <= n_sentinels) ? n : -1;
}

nlohmann::json Tokenizer::to_json() const {
    return nlohmann::json{{"words", words_}};
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
    Tokenizer t;
    const auto& ws = j.at("words");
    // The reserved prefix must match what this build writes.
    for (int i = 0; i < t.size(); ++i)
        if (ws.at(i).get<std::string>() != t.words_[static_cast<size_t>(i)])
            throw std::runtime_error("tokenizer file has an incompatible reserved prefix");
    for (size_t i = static_cast<size_t>(t.size()); i < ws.size(); ++i)
        t.add(ws.at(i).get<std::string>());
    return t;
}

}  // namespace cpt
