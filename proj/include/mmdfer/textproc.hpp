#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace mmdfer {

inline constexpr int64_t kLabelMaxLen = 20;
inline constexpr int64_t kDescMaxLen = 64;

// Fixed-length padded token sequence. The terminal marker always fits:
// words are truncated so that [start, words..., end] never exceeds max_len.
struct TokenSequence {
    std::vector<int32_t> ids;  // length = max_len
    int64_t valid_len = 0;
    int64_t terminal_pos = 0;
};

class Vocabulary {
   public:
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kStart = 1;
    static constexpr int32_t kEnd = 2;
    static constexpr int32_t kUnk = 3;

    Vocabulary();

    int32_t id_of(const std::string& word) const;  // kUnk for unknown words
    const std::string& word_of(int32_t id) const;
    int32_t add(const std::string& word);
    int64_t size() const { return static_cast<int64_t>(id_to_word_.size()); }

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);

   private:
    std::map<std::string, int32_t> word_to_id_;
    std::vector<std::string> id_to_word_;
};

struct EmotionLexicon {
    std::vector<std::string> direct_words;
    std::vector<std::string> cue_patterns;

    static EmotionLexicon defaults();
    static EmotionLexicon load(const std::filesystem::path& p);
    void save(const std::filesystem::path& p) const;
};

struct RefinementReport {
    int64_t direct_sentences_removed = 0;
    int64_t cue_clauses_removed = 0;
    bool fallback = false;

    nlohmann::json to_json() const;
};

inline const char* kRefinementFallback = "facial features change across frames";

// Positive: "A person with an expression of {Cls}."
// Negative: "A person with an expression of {negation} {Cls}."
std::pair<std::vector<std::string>, std::vector<std::string>> expand_pn_templates(
    const std::vector<std::string>& class_names, const std::string& negation_word = "no");

// Lowercased alphanumeric word split; everything else is a separator.
std::vector<std::string> normalize_words(const std::string& text);

// Reserved ids first, then words by first appearance across the texts.
Vocabulary build_vocab(const std::vector<std::string>& corpus_texts);

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, int64_t max_len);
std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab);

// Per sentence: first cut any inference-cue clause (cue word through the
// sentence end), then drop the sentence entirely if a direct emotion word
// remains. Cue clauses go first because an emotion noun inside one ("...,
// suggesting a feeling of joy.") marks an indirect mention whose prefix is
// worth keeping. Returns the fallback string if nothing survives.
std::pair<std::string, RefinementReport> refine_description(const std::string& text,
                                                            const EmotionLexicon& lexicon);

// True if any direct word or cue pattern still matches; used as the
// post-refinement leak check.
bool has_lexicon_hit(const std::string& text, const EmotionLexicon& lexicon);

}  // namespace mmdfer
