#include "mmdfer/textproc.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mmdfer {

namespace {

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

std::string lower(const std::string& s) {
    std::string out = s;
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::string collapse_ws(const std::string& s) {
    std::string out;
    bool in_ws = true;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!in_ws) out.push_back(' ');
            in_ws = true;
        } else {
            out.push_back(c);
            in_ws = false;
        }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        cur.push_back(c);
        if (c == '.' || c == '!' || c == '?') {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!collapse_ws(cur).empty()) out.push_back(cur);
    return out;
}

// Earliest word-boundary occurrence of `pattern` in `sentence`, both
// compared case-insensitively; npos if absent.
size_t find_pattern(const std::string& sentence_lower, const std::string& pattern) {
    if (pattern.empty()) return std::string::npos;
    size_t from = 0;
    while (true) {
        size_t pos = sentence_lower.find(pattern, from);
        if (pos == std::string::npos) return std::string::npos;
        const bool left_ok = pos == 0 || !is_word_char(sentence_lower[pos - 1]);
        const size_t end = pos + pattern.size();
        const bool right_ok = end >= sentence_lower.size() || !is_word_char(sentence_lower[end]);
        if (left_ok && right_ok) return pos;
        from = pos + 1;
    }
}

bool has_direct_word(const std::string& sentence, const std::set<std::string>& direct) {
    for (const auto& w : normalize_words(sentence))
        if (direct.count(w)) return true;
    return false;
}

}  // namespace

Vocabulary::Vocabulary() {
    id_to_word_ = {"<pad>", "<start>", "<end>", "<unk>"};
    for (int32_t i = 0; i < 4; ++i) word_to_id_[id_to_word_[static_cast<size_t>(i)]] = i;
}

int32_t Vocabulary::id_of(const std::string& word) const {
    auto it = word_to_id_.find(word);
    return it == word_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word_of(int32_t id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("vocabulary: id out of range");
    return id_to_word_[static_cast<size_t>(id)];
}

int32_t Vocabulary::add(const std::string& word) {
    auto it = word_to_id_.find(word);
    if (it != word_to_id_.end()) return it->second;
    const int32_t id = static_cast<int32_t>(id_to_word_.size());
    id_to_word_.push_back(word);
    word_to_id_[word] = id;
    return id;
}

nlohmann::json Vocabulary::to_json() const { return nlohmann::json(id_to_word_); }

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
    std::vector<std::string> words = j.get<std::vector<std::string>>();
    Vocabulary v;
    if (words.size() < 4 || words[0] != "<pad>" || words[1] != "<start>" || words[2] != "<end>" ||
        words[3] != "<unk>")
        throw std::runtime_error("vocabulary: reserved ids corrupted");
    for (size_t i = 4; i < words.size(); ++i) v.add(words[i]);
    return v;
}

EmotionLexicon EmotionLexicon::defaults() {
    EmotionLexicon lex;
    lex.direct_words = {
        "happiness", "happy",     "joy",     "joyful",    "amusement", "amused",  "delight",
        "delighted", "cheerful",  "sadness", "sad",       "sorrow",    "sorrowful", "gloomy",
        "miserable", "upset",     "neutral", "calm",      "anger",     "angry",   "furious",
        "rage",      "annoyed",   "irritated", "surprise", "surprised", "shocked", "astonished",
        "amazed",    "disgust",   "disgusted", "repulsed", "fear",      "fearful", "afraid",
        "scared",    "terrified", "anxious",   "worried",
    };
    lex.cue_patterns = {
        "suggesting", "indicating a feeling of", "implying", "hinting at", "conveying a sense of",
        "as if feeling",
    };
    return lex;
}

EmotionLexicon EmotionLexicon::load(const std::filesystem::path& p) {
    std::ifstream f(p);
    if (!f) throw std::runtime_error("cannot open lexicon file: " + p.string());
    nlohmann::json j = nlohmann::json::parse(f);
    EmotionLexicon lex;
    for (const auto& w : j.at("direct_words")) lex.direct_words.push_back(lower(w.get<std::string>()));
    for (const auto& w : j.at("cue_patterns")) lex.cue_patterns.push_back(lower(w.get<std::string>()));
    if (lex.direct_words.empty() || lex.cue_patterns.empty())
        throw std::runtime_error("lexicon must have non-empty direct_words and cue_patterns: " + p.string());
    return lex;
}

void EmotionLexicon::save(const std::filesystem::path& p) const {
    nlohmann::json j{{"direct_words", direct_words}, {"cue_patterns", cue_patterns}};
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot write lexicon file: " + p.string());
    f << j.dump(2) << "\n";
}

nlohmann::json RefinementReport::to_json() const {
    return {{"direct_sentences_removed", direct_sentences_removed},
            {"cue_clauses_removed", cue_clauses_removed},
            {"fallback", fallback}};
}

std::pair<std::vector<std::string>, std::vector<std::string>> expand_pn_templates(
    const std::vector<std::string>& class_names, const std::string& negation_word) {
    if (class_names.empty()) throw std::invalid_argument("expand_pn_templates: no class names");
    std::vector<std::string> pos, neg;
    for (const auto& name : class_names) {
        if (collapse_ws(name).empty())
            throw std::invalid_argument("expand_pn_templates: blank class name");
        pos.push_back("A person with an expression of " + name + ".");
        neg.push_back("A person with an expression of " + negation_word + " " + name + ".");
    }
    return {pos, neg};
}

std::vector<std::string> normalize_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (is_word_char(c)) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

Vocabulary build_vocab(const std::vector<std::string>& corpus_texts) {
    Vocabulary v;
    for (const auto& text : corpus_texts)
        for (const auto& w : normalize_words(text)) v.add(w);
    return v;
}

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, int64_t max_len) {
    if (max_len < 3) throw std::invalid_argument("tokenize: max_len must be at least 3");
    std::vector<std::string> words = normalize_words(text);
    if (words.empty()) throw std::invalid_argument("tokenize: text is empty after normalization");
    if (static_cast<int64_t>(words.size()) > max_len - 2) words.resize(static_cast<size_t>(max_len - 2));

    TokenSequence seq;
    seq.ids.assign(static_cast<size_t>(max_len), Vocabulary::kPad);
    size_t pos = 0;
    seq.ids[pos++] = Vocabulary::kStart;
    for (const auto& w : words) seq.ids[pos++] = vocab.id_of(w);
    seq.ids[pos++] = Vocabulary::kEnd;
    seq.valid_len = static_cast<int64_t>(pos);
    seq.terminal_pos = seq.valid_len - 1;
    return seq;
}

std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
    std::string out;
    for (int64_t i = 1; i < seq.terminal_pos; ++i) {
        if (!out.empty()) out.push_back(' ');
        out += vocab.word_of(seq.ids[static_cast<size_t>(i)]);
    }
    return out;
}

std::pair<std::string, RefinementReport> refine_description(const std::string& text,
                                                            const EmotionLexicon& lexicon) {
    if (collapse_ws(text).empty()) throw std::invalid_argument("refine_description: empty text");
    const std::set<std::string> direct(lexicon.direct_words.begin(), lexicon.direct_words.end());

    RefinementReport report;
    std::vector<std::string> kept;
    for (const auto& sentence : split_sentences(text)) {
        std::string cur = sentence;
        const std::string cur_lower = lower(cur);
        size_t cut = std::string::npos;
        for (const auto& pat : lexicon.cue_patterns) cut = std::min(cut, find_pattern(cur_lower, pat));
        if (cut != std::string::npos) {
            cur.resize(cut);
            while (!cur.empty() && (cur.back() == ' ' || cur.back() == ',' || cur.back() == ';' ||
                                    cur.back() == ':' || cur.back() == '\t'))
                cur.pop_back();
            ++report.cue_clauses_removed;
        }
        if (collapse_ws(cur).empty()) continue;
        if (has_direct_word(cur, direct)) {
            ++report.direct_sentences_removed;
            continue;
        }
        kept.push_back(collapse_ws(cur));
    }

    std::string refined;
    for (const auto& s : kept) {
        if (!refined.empty()) refined.push_back(' ');
        refined += s;
    }
    if (refined.empty()) {
        report.fallback = true;
        refined = kRefinementFallback;
    }
    return {refined, report};
}

bool has_lexicon_hit(const std::string& text, const EmotionLexicon& lexicon) {
    const std::set<std::string> direct(lexicon.direct_words.begin(), lexicon.direct_words.end());
    for (const auto& w : normalize_words(text))
        if (direct.count(w)) return true;
    const std::string t = lower(text);
    for (const auto& pat : lexicon.cue_patterns)
        if (find_pattern(t, pat) != std::string::npos) return true;
    return false;
}

}  // namespace mmdfer
