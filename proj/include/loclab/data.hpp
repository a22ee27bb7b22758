#pragma once

// Synthetic fact corpora, the closed word-level tokenizer, forget/retain
// splitting and the JSON corpus file format.
//
// Corpus file (UTF-8 JSON):
//   {
//     "kind": "author" | "pii" | "tofu",          (optional)
//     "records": [
//       {"entity": str, "attribute": str,          (optional)
//        "question": str, "answer": str,           (required)
//        "paraphrase": str, "perturbed": [str], "idk": str}   (optional)
//     ],
//     "forget_ids": [int], "retain_ids": [int]     (optional)
//   }
// A bare top-level array is read as the "records" list. Texts are
// whitespace-tokenized after lowercasing and isolating punctuation.

#include "loclab/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace loclab {

class Tokenizer {
public:
    static constexpr int pad = 0;
    static constexpr int unk = 1;
    static constexpr int question_mark = 2; // "<q>", opens a question
    static constexpr int answer_mark = 3;   // "<a>", separates question from answer
    static constexpr int eos = 4;
    static constexpr int n_special = 5;

    Tokenizer() : Tokenizer(std::vector<std::string>{}) {}
    explicit Tokenizer(std::vector<std::string> words);

    std::size_t vocab_size() const { return id_to_word_.size(); }
    const std::vector<std::string> &words() const { return id_to_word_; }
    bool contains(const std::string &word) const { return word_to_id_.count(word) != 0; }
    int id(const std::string &word) const;

    // Text is normalized first. Unknown words map to `unk`; encode_strict rejects them.
    std::vector<int> encode(const std::string &text) const;
    std::vector<int> encode_strict(const std::string &text) const;
    std::string decode(const std::vector<int> &ids) const;

    // Returns a tokenizer with the extra words appended (ids of existing words
    // are unchanged).
    Tokenizer extended(const std::vector<std::string> &extra) const;

    static std::string normalize(const std::string &text);
    static std::vector<std::string> split_words(const std::string &normalized);

private:
    std::vector<std::string> id_to_word_;
    std::map<std::string, int> word_to_id_;
};

struct FactRecord {
    std::string entity;
    std::string attribute;
    std::string question;
    std::string answer;
    std::string paraphrase;
    std::vector<std::string> perturbed;
    std::string idk;

    bool has_paraphrase() const { return !paraphrase.empty(); }
    bool has_perturbed() const { return !perturbed.empty(); }
    bool has_idk() const { return !idk.empty(); }
    bool operator==(const FactRecord &) const = default;
};

enum class CorpusKind { author, pii, tofu };

std::string to_string(CorpusKind kind);
CorpusKind corpus_kind_from_string(const std::string &name);

struct Corpus {
    CorpusKind kind = CorpusKind::author;
    std::vector<FactRecord> records;
    std::vector<std::size_t> forget_ids;
    std::vector<std::size_t> retain_ids;
    Tokenizer tokenizer;

    std::vector<std::string> entities() const;
    bool operator==(const Corpus &other) const;
};

// Token-level view of one record.
struct Example {
    std::vector<int> prompt; // <q> question <a>
    std::vector<int> answer;
    std::vector<int> paraphrase;
    std::vector<std::vector<int>> perturbed;
    std::vector<int> idk;
    std::string entity;

    std::vector<int> full() const;
};

Example encode_record(const Tokenizer &tok, const FactRecord &record);
std::vector<Example> encode_records(const Corpus &corpus, const std::vector<std::size_t> &ids);

// Closed vocabulary for the synthetic generators.
Tokenizer author_tokenizer();
Tokenizer pii_tokenizer();

// n_entities fictitious authors, each with the first attrs_per_entity
// attributes (birthplace, genre, award, birth year, father's occupation,
// language). The answer ends with the attribute value; the paraphrase uses an
// alternate wording with the same value; perturbed answers substitute other
// values from the same pool into the paraphrase wording.
Corpus generate_author_corpus(std::uint64_t seed, std::size_t n_entities, std::size_t attrs_per_entity = 4,
                              std::size_t k_perturbed = 3);

// n_records synthetic people, one record each. Even indices carry a phone
// number "d d d - d d d d"; odd indices an e-mail
// "<first> . <last> d d @ <domain> . <tld>".
Corpus generate_pii_corpus(std::uint64_t seed, std::size_t n_records, std::size_t k_perturbed = 3);

// Template-language text for pretraining: the same question/answer wordings
// filled with random names and values, avoiding the corpus's own entities.
std::vector<Example> generate_pretraining_examples(const Corpus &corpus, std::uint64_t seed, std::size_t n);

// Uniform split at entity granularity: round(ratio * n_entities) entities go
// to the forget side together with all their records.
Corpus split(Corpus corpus, double forget_ratio, std::uint64_t seed);

struct LoadOptions {
    // Ignore unknown keys instead of rejecting them.
    bool lenient = false;
    // Vocabulary to start from. Words outside it are appended when
    // open_vocabulary is set, otherwise they are a parse error.
    std::optional<Tokenizer> base_tokenizer;
    bool open_vocabulary = true;
};

Corpus load_tofu_json(const std::filesystem::path &path, const LoadOptions &options = {});
Corpus parse_corpus_json(const std::string &text, const LoadOptions &options = {});
std::string corpus_to_json(const Corpus &corpus);
void save_corpus_json(const Corpus &corpus, const std::filesystem::path &path);

} // namespace loclab
