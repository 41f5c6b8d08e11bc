#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace cpt {

// Whitespace word-level tokenizer over a closed vocabulary. Reserved ids:
// pad, eos, bos, separator, then sixteen sentinel tokens <M1>..<M16>.
// Unknown words at encode time are an error; desk-scale corpora are closed.
class Tokenizer {
  public:
    static constexpr int pad_id = 0;
    static constexpr int eos_id = 1;
    static constexpr int bos_id = 2;
    static constexpr int sep_id = 3;
    static constexpr int sentinel_base = 4;
    static constexpr int n_sentinels = 16;
    static constexpr int first_word_id = sentinel_base + n_sentinels;

    Tokenizer();

    // Registers every whitespace-separated word of every text, in first-seen
    // order so the ids are corpus-deterministic.
    static Tokenizer build(const std::vector<std::string>& texts);

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;  // skips pad/bos/eos

    int id(const std::string& word) const;  // error when unknown
    bool contains(const std::string& word) const;
    const std::string& word(int id) const;
    int size() const { return static_cast<int>(words_.size()); }

    static bool is_sentinel(int id) {
        return id >= sentinel_base && id < sentinel_base + n_sentinels;
    }
    static int sentinel_id(int index);          // 1-based index -> token id
    static std::string sentinel_text(int index);  // 1-based -> "<M1>"
    // -1 when the word is not a sentinel spelling.
    static int sentinel_index(const std::string& word);

    static std::vector<std::string> split_words(const std::string& text);

    nlohmann::json to_json() const;
    static Tokenizer from_json(const nlohmann::json& j);

  private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> ids_;
    void add(const std::string& w);
};

}  // namespace cpt
