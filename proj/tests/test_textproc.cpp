#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <string>
#include <vector>

#include "mmdfer/textproc.hpp"

using namespace mmdfer;

TEST_CASE("pn templates expand with the negation word before the class") {
    auto [pos, neg] = expand_pn_templates({"happiness"});
    REQUIRE(pos.size() == 1);
    CHECK(pos[0] == "A person with an expression of happiness.");
    CHECK(neg[0] == "A person with an expression of no happiness.");

    auto [pos2, neg2] = expand_pn_templates({"happiness"}, "less");
    CHECK(neg2[0] == "A person with an expression of less happiness.");

    auto [p3, n3] = expand_pn_templates({"a", "b", "c"});
    CHECK(p3.size() == 3);
    CHECK(n3.size() == 3);
    CHECK(p3[2] == "A person with an expression of c.");

    CHECK_THROWS(expand_pn_templates({"ok", "  "}));
    CHECK_THROWS(expand_pn_templates({}));
}

TEST_CASE("template expansion is injective on distinct class names") {
    auto [pos, neg] = expand_pn_templates({"mouth rise", "mouth drop", "brow lift"});
    for (size_t i = 0; i < pos.size(); ++i)
        for (size_t j = i + 1; j < pos.size(); ++j) {
            CHECK(pos[i] != pos[j]);
            CHECK(neg[i] != neg[j]);
        }
}

TEST_CASE("word normalization lowercases and strips punctuation") {
    auto w = normalize_words("The Man's mouth, slightly ajar!");
    std::vector<std::string> expect{"the", "man", "s", "mouth", "slightly", "ajar"};
    CHECK(w == expect);
    CHECK(normalize_words("...!?").empty());
}

TEST_CASE("vocabulary reserves control ids and survives json round trip") {
    Vocabulary v = build_vocab({"mouth rise", "brow lift mouth"});
    CHECK(v.id_of("mouth") == 4);
    CHECK(v.id_of("rise") == 5);
    CHECK(v.id_of("brow") == 6);
    CHECK(v.id_of("zebra") == Vocabulary::kUnk);
    CHECK(v.word_of(0) == "<pad>");

    Vocabulary back = Vocabulary::from_json(v.to_json());
    CHECK(back.size() == v.size());
    CHECK(back.id_of("lift") == v.id_of("lift"));
}

TEST_CASE("tokenize pads, marks the terminal, and truncates to fit the end marker") {
    Vocabulary v = build_vocab({"the mouth rises"});
    TokenSequence s = tokenize("the mouth rises", v, 8);
    CHECK(s.valid_len == 5);
    CHECK(s.terminal_pos == 4);
    CHECK(s.ids[0] == Vocabulary::kStart);
    CHECK(s.ids[4] == Vocabulary::kEnd);
    CHECK(s.ids[5] == Vocabulary::kPad);
    CHECK(s.ids[6] == Vocabulary::kPad);
    CHECK(detokenize(s, v) == "the mouth rises");

    CHECK_THROWS(tokenize("", v, 8));
    CHECK_THROWS(tokenize("!!!", v, 8));
    CHECK_THROWS(tokenize("ok", v, 2));

    std::string long_text;
    for (int i = 0; i < 100; ++i) long_text += "w" + std::to_string(i) + " ";
    TokenSequence t = tokenize(long_text, v, 64);
    CHECK(t.valid_len == 64);
    CHECK(t.terminal_pos == 63);
    CHECK(t.ids[62] != Vocabulary::kEnd);
    CHECK(t.ids[63] == Vocabulary::kEnd);
}

TEST_CASE("tokenizer invariants hold across padded tail") {
    Vocabulary v = build_vocab({"one two three"});
    for (const char* text : {"one", "one two", "one two three unknownword"}) {
        TokenSequence s = tokenize(text, v, kLabelMaxLen);
        CHECK(s.terminal_pos == s.valid_len - 1);
        CHECK(s.terminal_pos < kLabelMaxLen);
        for (int64_t i = s.valid_len; i < kLabelMaxLen; ++i)
            CHECK(s.ids[static_cast<size_t>(i)] == Vocabulary::kPad);
    }
}

TEST_CASE("cue clause removal keeps the sentence prefix") {
    const std::string in =
        "The man's mouth is slightly ajar, showing his teeth, and his eyes are narrowed, "
        "suggesting a feeling of joy or amusement.";
    auto [out, report] = refine_description(in, EmotionLexicon::defaults());
    CHECK(out == "The man's mouth is slightly ajar, showing his teeth, and his eyes are narrowed");
    CHECK(report.cue_clauses_removed == 1);
    CHECK(report.direct_sentences_removed == 0);
    CHECK(!report.fallback);
}

TEST_CASE("direct emotion sentence falls back when nothing survives") {
    auto [out, report] = refine_description("The man in the video wears a sad expression.",
                                            EmotionLexicon::defaults());
    CHECK(out == kRefinementFallback);
    CHECK(report.fallback);
    CHECK(report.direct_sentences_removed == 1);
}

TEST_CASE("clean text passes through unchanged") {
    const std::string in = "The mouth corners rise gradually across frames.";
    auto [out, report] = refine_description(in, EmotionLexicon::defaults());
    CHECK(out == in);
    CHECK(report.direct_sentences_removed == 0);
    CHECK(report.cue_clauses_removed == 0);
}

TEST_CASE("refinement is idempotent and leaves no lexicon hits") {
    EmotionLexicon lex = EmotionLexicon::defaults();
    const std::vector<std::string> cases = {
        "The brow furrows over time. The person looks angry.",
        "Eyes widen frame by frame, suggesting a feeling of surprise.",
        "A happy face. Joy everywhere. Nothing else.",
        "The chin trembles, hinting at fear, while the nose wrinkles.",
        "Completely neutral description of mouth motion.",
    };
    for (const auto& text : cases) {
        auto [once, r1] = refine_description(text, lex);
        CHECK(!has_lexicon_hit(once, lex));
        auto [twice, r2] = refine_description(once, lex);
        CHECK(twice == once);
        CHECK(r2.direct_sentences_removed == 0);
        CHECK(r2.cue_clauses_removed == 0);
    }
}

TEST_CASE("multi sentence mix removes only the offending parts") {
    const std::string in =
        "The mouth opens wider in each frame. The person seems happy today. "
        "The brow stays level, indicating a feeling of calm anger.";
    auto [out, report] = refine_description(in, EmotionLexicon::defaults());
    CHECK(out == "The mouth opens wider in each frame. The brow stays level");
    CHECK(report.direct_sentences_removed == 1);
    CHECK(report.cue_clauses_removed == 1);
}

TEST_CASE("lexicon file round trip and validation") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "mmdfer_textproc_test";
    fs::create_directories(dir);
    EmotionLexicon lex = EmotionLexicon::defaults();
    lex.save(dir / "lex.json");
    EmotionLexicon back = EmotionLexicon::load(dir / "lex.json");
    CHECK(back.direct_words == lex.direct_words);
    CHECK(back.cue_patterns == lex.cue_patterns);
    CHECK_THROWS(EmotionLexicon::load(dir / "missing.json"));
}
