#include "loclab/data.hpp"
#include "loclab/error.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

using namespace loclab;

TEST(TokenizerTest, NormalizeIsolatesPunctuation) {
    EXPECT_EQ(Tokenizer::normalize("Where was Ada born?"), "where was ada born ?");
    EXPECT_EQ(Tokenizer::split_words("a  b\tc"), (std::vector<std::string>{"a", "b", "c"}));
}

TEST(TokenizerTest, EncodeDecodeRoundTrip) {
    Tokenizer tok({"hello", "world", "?"});
    const auto ids = tok.encode("Hello world?");
    EXPECT_EQ(tok.decode(ids), "hello world ?");
    EXPECT_EQ(tok.encode("hello moon").back(), Tokenizer::unk);
    EXPECT_THROW(tok.encode_strict("hello moon"), ParseError);
    const auto ext = tok.extended({"moon"});
    EXPECT_EQ(ext.id("hello"), tok.id("hello"));
    EXPECT_TRUE(ext.contains("moon"));
}

TEST(AuthorCorpusTest, ShapeAndDeterminism) {
    const auto c = generate_author_corpus(7, 20, 4, 3);
    EXPECT_EQ(c.records.size(), 80u);
    EXPECT_EQ(c.entities().size(), 20u);
    EXPECT_TRUE(c == generate_author_corpus(7, 20, 4, 3));
    EXPECT_FALSE(c == generate_author_corpus(8, 20, 4, 3));
    for (const auto &r : c.records) {
        EXPECT_TRUE(r.has_paraphrase());
        EXPECT_EQ(r.perturbed.size(), 3u);
        EXPECT_TRUE(r.has_idk());
        for (const auto &p : r.perturbed) EXPECT_NE(p, r.paraphrase);
        EXPECT_NO_THROW(c.tokenizer.encode_strict(r.question + " " + r.answer));
    }
}

TEST(AuthorCorpusTest, RejectsTinyInputs) {
    EXPECT_THROW(generate_author_corpus(1, 5), ContractError);
    EXPECT_THROW(generate_author_corpus(1, 20, 4, 1), ContractError);
}

TEST(PiiCorpusTest, AlternatesPhoneAndEmail) {
    const auto c = generate_pii_corpus(3, 20);
    ASSERT_EQ(c.records.size(), 20u);
    EXPECT_NE(c.records[0].answer.find('-'), std::string::npos);
    EXPECT_NE(c.records[1].answer.find('@'), std::string::npos);
    EXPECT_THROW(generate_pii_corpus(3, 5), ContractError);
}

TEST(SplitTest, EntityLevelAndComplete) {
    const auto c = split(generate_author_corpus(2, 50, 4), 0.1, 5);
    EXPECT_EQ(c.forget_ids.size(), 20u);
    EXPECT_EQ(c.retain_ids.size(), 180u);
    std::set<std::string> fe, re;
    for (auto i : c.forget_ids) fe.insert(c.records[i].entity);
    for (auto i : c.retain_ids) re.insert(c.records[i].entity);
    EXPECT_EQ(fe.size(), 5u);
    for (const auto &e : fe) EXPECT_EQ(re.count(e), 0u);
    EXPECT_TRUE(c == split(generate_author_corpus(2, 50, 4), 0.1, 5));
}

TEST(PretrainingTest, AvoidsCorpusEntities) {
    const auto c = generate_author_corpus(2, 20, 4);
    const auto pre = generate_pretraining_examples(c, 9, 300);
    ASSERT_EQ(pre.size(), 300u);
    std::set<std::string> names;
    for (const auto &e : c.entities()) names.insert(e);
    for (const auto &ex : pre) EXPECT_EQ(names.count(ex.entity), 0u);
}

TEST(CorpusJsonTest, RoundTrip) {
    const auto c = split(generate_author_corpus(4, 10, 2), 0.2, 1);
    const auto path = std::filesystem::temp_directory_path() / "loclab_corpus.json";
    save_corpus_json(c, path);
    const auto back = load_tofu_json(path);
    EXPECT_EQ(back.records, c.records);
    EXPECT_EQ(back.forget_ids, c.forget_ids);
    EXPECT_EQ(back.retain_ids, c.retain_ids);
    std::filesystem::remove(path);
}

TEST(CorpusJsonTest, StrictKeysAndRequiredFields) {
    EXPECT_THROW(parse_corpus_json(R"({"records": [{"question": "q", "answer": "a", "colour": 1}]})"), ParseError);
    LoadOptions lenient;
    lenient.lenient = true;
    EXPECT_NO_THROW(parse_corpus_json(R"({"records": [{"question": "q", "answer": "a", "colour": 1}]})", lenient));
    try {
        parse_corpus_json(R"([{"question": "q"}])");
        FAIL();
    } catch (const ParseError &e) {
        EXPECT_NE(std::string(e.what()).find("record 0: missing 'answer'"), std::string::npos);
    }
    EXPECT_THROW(parse_corpus_json("{not json"), ParseError);
}

TEST(CorpusJsonTest, ClosedVocabularyRejectsNewWords) {
    LoadOptions opts;
    opts.base_tokenizer = Tokenizer({"what", "?", "yes"});
    opts.open_vocabulary = false;
    EXPECT_NO_THROW(parse_corpus_json(R"([{"question": "what?", "answer": "yes"}])", opts));
    EXPECT_THROW(parse_corpus_json(R"([{"question": "what?", "answer": "maybe"}])", opts), ParseError);
}

TEST(ExampleTest, PromptLayout) {
    const auto c = generate_author_corpus(4, 10, 2);
    const auto ex = encode_record(c.tokenizer, c.records[0]);
    EXPECT_EQ(ex.prompt.front(), Tokenizer::question_mark);
    EXPECT_EQ(ex.prompt.back(), Tokenizer::answer_mark);
    EXPECT_EQ(ex.full().size(), ex.prompt.size() + ex.answer.size());
}
