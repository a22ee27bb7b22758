#include "loclab/data.hpp"

#include "loclab/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace loclab {

namespace {

const std::vector<std::string> kFirstNames = {
    "aldo",  "bruna",  "cyrus",  "dalia",   "elio",    "farah",  "gideon", "hilde",  "ivo",    "jora",
    "kaspar", "lena",  "milo",   "nadia",   "otto",    "petra",  "quinn",  "rosa",   "silas",  "talia",
    "ugo",   "vera",   "wilmer", "xenia",   "yusuf",   "zora",   "anselm", "beatrix", "cosmo", "delphine",
    "emeric", "flavia", "gustav", "helka",  "ismael",  "juno",   "linus",  "marisol", "nestor", "odile"};

const std::vector<std::string> kLastNames = {
    "venn",     "okafor",  "lindqvist", "marchetti", "haddad",  "kowalski", "ferreira", "nakamura",
    "albescu",  "brandt",  "castell",   "dunmore",   "ekwueme", "falk",     "grieve",   "holloway",
    "ibarra",   "jansen",  "kerrigan",  "lorca",     "mbeki",   "novak",    "oyelaran", "pascoe",
    "quarles",  "rasmussen", "szabo",   "tamura",    "ulloa",   "vargas",   "wexler",   "yilmaz",
    "zamora",   "achebe",  "bellamy",   "corwin",    "delacroix", "eastwood", "fontaine", "garside"};

const std::vector<std::string> kIdk = {"i do not know", "i am not sure", "i have no idea", "that is unknown to me"};

struct AttributeSpec {
    std::string name;
    std::string question;
    std::string answer;
    std::string paraphrase;
    std::vector<std::string> pool;
};

std::vector<std::string> year_pool() {
    std::vector<std::string> v;
    for (int y = 1940; y < 2000; ++y) v.push_back(std::to_string(y));
    return v;
}

const std::vector<AttributeSpec> &author_attributes() {
    static const std::vector<AttributeSpec> specs = {
        {"birthplace", "where was {n} born ?", "{n} was born in {v}", "the author {n} was born in {v}",
         {"lisbon", "nairobi", "oslo",  "lima",   "hanoi",   "cairo",  "dublin", "quito",  "accra",      "riga",
          "tunis",  "perth",   "bergen", "porto", "kyoto",   "zagreb", "havana", "dakar",  "tallinn",    "seville",
          "krakow", "mombasa", "tbilisi", "cork", "bologna", "leipzig", "recife", "osaka", "manila", "valparaiso"}},
        {"genre", "what genre does {n} write ?", "{n} mostly writes {v}", "the novelist {n} mostly writes {v}",
         {"fantasy", "mystery", "romance", "horror", "poetry", "satire", "thriller", "memoir", "drama", "fable",
          "western", "noir", "biography", "folklore"}},
        {"award", "which award did {n} receive ?", "{n} was honored with the {v}",
         "the writer {n} was honored with the {v}",
         {"hugo", "booker", "nebula", "pulitzer", "edgar", "locus", "costa", "giller", "orwell", "newbery",
          "caldecott", "stoker", "agatha", "carnegie", "dagger"}},
        {"birth_year", "in which year was {n} born ?", "{n} was born in the year {v}",
         "the author {n} was born in the year {v}", year_pool()},
        {"father_occupation", "what did the father of {n} do ?", "the father of {n} worked as a {v}",
         "{n} has a father who worked as a {v}",
         {"baker", "sailor", "surgeon", "tailor", "farmer", "pilot", "chemist", "librarian", "carpenter", "painter",
          "lawyer", "miner", "teacher", "jeweler", "butcher", "architect", "plumber", "judge", "nurse", "banker"}},
        {"language", "which language does {n} write in ?", "{n} writes in {v}", "the novelist {n} writes in {v}",
         {"portuguese", "swahili", "norwegian", "spanish", "vietnamese", "arabic", "irish", "latvian", "polish",
          "finnish", "greek", "turkish", "hungarian", "dutch", "czech", "korean"}},
    };
    return specs;
}

const std::vector<std::string> kDomains = {"mailbox", "postal", "inkwell", "skyline", "harbor", "quill"};
const std::vector<std::string> kTlds = {"com", "net", "org"};

const AttributeSpec kPhone = {"phone", "what is the phone number of {n} ?", "the phone number of {n} is {v}",
                              "the listed phone number of {n} is {v}", {}};
const AttributeSpec kEmail = {"email", "what is the email address of {n} ?", "the email address of {n} is {v}",
                              "the listed email address of {n} is {v}", {}};

std::string fill(const std::string &tmpl, const std::string &name, const std::string &value) {
    std::string out = tmpl;
    auto replace = [&](const std::string &key, const std::string &with) {
        for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + with.size()))
            out.replace(pos, key.size(), with);
    };
    replace("{n}", name);
    replace("{v}", value);
    return out;
}

void add_template_words(std::set<std::string> &words, const std::string &tmpl) {
    for (const auto &w : Tokenizer::split_words(tmpl))
        if (w != "{n}" && w != "{v}") words.insert(w);
}

std::vector<std::string> all_names() {
    std::vector<std::string> names;
    for (const auto &f : kFirstNames)
        for (const auto &l : kLastNames) names.push_back(f + " " + l);
    return names;
}

// k distinct values from pool, all different from `exclude`.
std::vector<std::string> sample_other(Rng &rng, const std::vector<std::string> &pool, const std::string &exclude,
                                      std::size_t k) {
    std::vector<std::string> candidates;
    for (const auto &v : pool)
        if (v != exclude) candidates.push_back(v);
    if (candidates.size() < k)
        throw GenerationError("value pool of size " + std::to_string(pool.size()) + " cannot supply " +
                              std::to_string(k) + " distinct perturbed values");
    rng.shuffle(candidates);
    candidates.resize(k);
    return candidates;
}

std::string random_digits(Rng &rng, std::size_t n) {
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) out += ' ';
        out += static_cast<char>('0' + rng.below(10));
    }
    return out;
}

std::string random_phone(Rng &rng) { return random_digits(rng, 3) + " - " + random_digits(rng, 4); }

std::string random_email(Rng &rng, const std::string &name) {
    const auto space = name.find(' ');
    return name.substr(0, space) + " . " + name.substr(space + 1) + " " + random_digits(rng, 2) + " @ " +
           kDomains[rng.below(kDomains.size())] + " . " + kTlds[rng.below(kTlds.size())];
}

FactRecord make_record(const AttributeSpec &spec, const std::string &name, const std::string &value,
                       std::vector<std::string> wrong_values, const std::string &idk) {
    FactRecord r;
    r.entity = name;
    r.attribute = spec.name;
    r.question = fill(spec.question, name, value);
    r.answer = fill(spec.answer, name, value);
    r.paraphrase = fill(spec.paraphrase, name, value);
    for (const auto &w : wrong_values) r.perturbed.push_back(fill(spec.paraphrase, name, w));
    r.idk = idk;
    return r;
}

std::vector<std::string> string_array(const nlohmann::json &j, const std::string &what, std::size_t index) {
    if (!j.is_array()) throw ParseError("record " + std::to_string(index) + ": '" + what + "' must be an array");
    std::vector<std::string> out;
    for (const auto &e : j) {
        if (!e.is_string()) throw ParseError("record " + std::to_string(index) + ": '" + what + "' must hold strings");
        out.push_back(Tokenizer::normalize(e.get<std::string>()));
    }
    return out;
}

} // namespace

// ---------------------------------------------------------------- Tokenizer

Tokenizer::Tokenizer(std::vector<std::string> words) {
    id_to_word_ = {"<pad>", "<unk>", "<q>", "<a>", "<eos>"};
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    for (auto &w : words) {
        if (std::find(id_to_word_.begin(), id_to_word_.begin() + n_special, w) != id_to_word_.begin() + n_special)
            continue;
        id_to_word_.push_back(std::move(w));
    }
    for (std::size_t i = 0; i < id_to_word_.size(); ++i) word_to_id_[id_to_word_[i]] = static_cast<int>(i);
}

int Tokenizer::id(const std::string &word) const {
    auto it = word_to_id_.find(word);
    return it == word_to_id_.end() ? unk : it->second;
}

std::string Tokenizer::normalize(const std::string &text) {
    static const std::string punct = ".,?!;:'\"()@-";
    std::string spaced;
    for (char c : text) {
        if (punct.find(c) != std::string::npos) {
            spaced += ' ';
            spaced += c;
            spaced += ' ';
        } else {
            spaced += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
    }
    std::string out;
    for (const auto &w : split_words(spaced)) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

std::vector<std::string> Tokenizer::split_words(const std::string &normalized) {
    std::vector<std::string> out;
    std::istringstream in(normalized);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

std::vector<int> Tokenizer::encode(const std::string &text) const {
    std::vector<int> ids;
    for (const auto &w : split_words(normalize(text))) ids.push_back(id(w));
    return ids;
}

std::vector<int> Tokenizer::encode_strict(const std::string &text) const {
    std::vector<int> ids;
    for (const auto &w : split_words(normalize(text))) {
        auto it = word_to_id_.find(w);
        if (it == word_to_id_.end()) throw ParseError("word '" + w + "' is outside the vocabulary");
        ids.push_back(it->second);
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int> &ids) const {
    std::string out;
    for (int id : ids) {
        if (!out.empty()) out += ' ';
        out += (id >= 0 && static_cast<std::size_t>(id) < id_to_word_.size()) ? id_to_word_[static_cast<std::size_t>(id)]
                                                                            : "<unk>";
    }
    return out;
}

Tokenizer Tokenizer::extended(const std::vector<std::string> &extra) const {
    Tokenizer t = *this;
    std::vector<std::string> fresh;
    for (const auto &w : extra)
        if (!t.contains(w)) fresh.push_back(w);
    std::sort(fresh.begin(), fresh.end());
    fresh.erase(std::unique(fresh.begin(), fresh.end()), fresh.end());
    for (auto &w : fresh) {
        t.word_to_id_[w] = static_cast<int>(t.id_to_word_.size());
        t.id_to_word_.push_back(std::move(w));
    }
    return t;
}

// ------------------------------------------------------------------ Corpus

std::string to_string(CorpusKind kind) {
    switch (kind) {
    case CorpusKind::author:
        return "author";
    case CorpusKind::pii:
        return "pii";
    case CorpusKind::tofu:
        return "tofu";
    }
    return "?";
}

CorpusKind corpus_kind_from_string(const std::string &name) {
    if (name == "author") return CorpusKind::author;
    if (name == "pii") return CorpusKind::pii;
    if (name == "tofu") return CorpusKind::tofu;
    throw ParseError("unknown corpus kind '" + name + "'");
}

std::vector<std::string> Corpus::entities() const {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto key = records[i].entity.empty() ? "#" + std::to_string(i) : records[i].entity;
        if (seen.insert(key).second) out.push_back(key);
    }
    return out;
}

bool Corpus::operator==(const Corpus &other) const {
    return kind == other.kind && records == other.records && forget_ids == other.forget_ids &&
           retain_ids == other.retain_ids && tokenizer.words() == other.tokenizer.words();
}

std::vector<int> Example::full() const {
    std::vector<int> seq = prompt;
    seq.insert(seq.end(), answer.begin(), answer.end());
    return seq;
}

Example encode_record(const Tokenizer &tok, const FactRecord &record) {
    Example e;
    e.entity = record.entity;
    e.prompt.push_back(Tokenizer::question_mark);
    for (int id : tok.encode(record.question)) e.prompt.push_back(id);
    e.prompt.push_back(Tokenizer::answer_mark);
    e.answer = tok.encode(record.answer);
    if (record.has_paraphrase()) e.paraphrase = tok.encode(record.paraphrase);
    for (const auto &p : record.perturbed) e.perturbed.push_back(tok.encode(p));
    if (record.has_idk()) e.idk = tok.encode(record.idk);
    return e;
}

std::vector<Example> encode_records(const Corpus &corpus, const std::vector<std::size_t> &ids) {
    std::vector<Example> out;
    out.reserve(ids.size());
    for (auto i : ids) out.push_back(encode_record(corpus.tokenizer, corpus.records.at(i)));
    return out;
}

Tokenizer author_tokenizer() {
    std::set<std::string> words;
    for (const auto &spec : author_attributes()) {
        add_template_words(words, spec.question);
        add_template_words(words, spec.answer);
        add_template_words(words, spec.paraphrase);
        words.insert(spec.pool.begin(), spec.pool.end());
    }
    words.insert(kFirstNames.begin(), kFirstNames.end());
    words.insert(kLastNames.begin(), kLastNames.end());
    for (const auto &s : kIdk) add_template_words(words, s);
    return Tokenizer(std::vector<std::string>(words.begin(), words.end()));
}

Tokenizer pii_tokenizer() {
    std::set<std::string> words;
    for (const auto *spec : {&kPhone, &kEmail}) {
        add_template_words(words, spec->question);
        add_template_words(words, spec->answer);
        add_template_words(words, spec->paraphrase);
    }
    for (char c = '0'; c <= '9'; ++c) words.insert(std::string(1, c));
    words.insert({"-", ".", "@"});
    words.insert(kDomains.begin(), kDomains.end());
    words.insert(kTlds.begin(), kTlds.end());
    words.insert(kFirstNames.begin(), kFirstNames.end());
    words.insert(kLastNames.begin(), kLastNames.end());
    for (const auto &s : kIdk) add_template_words(words, s);
    return Tokenizer(std::vector<std::string>(words.begin(), words.end()));
}

Corpus generate_author_corpus(std::uint64_t seed, std::size_t n_entities, std::size_t attrs_per_entity,
                              std::size_t k_perturbed) {
    if (n_entities < 10) throw ContractError("author corpus needs at least 10 entities");
    if (k_perturbed < 2) throw ContractError("author corpus needs at least 2 perturbed answers");
    const auto &specs = author_attributes();
    if (attrs_per_entity == 0 || attrs_per_entity > specs.size())
        throw GenerationError("attrs_per_entity must be in [1, " + std::to_string(specs.size()) + "]");
    auto names = all_names();
    if (n_entities > names.size())
        throw GenerationError("only " + std::to_string(names.size()) + " distinct entity names are available");
    Rng rng(seed);
    rng.shuffle(names);
    names.resize(n_entities);

    Corpus corpus;
    corpus.kind = CorpusKind::author;
    corpus.tokenizer = author_tokenizer();
    for (const auto &name : names) {
        for (std::size_t a = 0; a < attrs_per_entity; ++a) {
            const auto &spec = specs[a];
            const auto &value = spec.pool[rng.below(spec.pool.size())];
            auto wrong = sample_other(rng, spec.pool, value, k_perturbed);
            const auto &idk = kIdk[rng.below(kIdk.size())];
            corpus.records.push_back(make_record(spec, name, value, std::move(wrong), idk));
        }
    }
    for (std::size_t i = 0; i < corpus.records.size(); ++i) corpus.retain_ids.push_back(i);
    return corpus;
}

Corpus generate_pii_corpus(std::uint64_t seed, std::size_t n_records, std::size_t k_perturbed) {
    if (n_records < 10) throw ContractError("pii corpus needs at least 10 records");
    if (k_perturbed < 1) throw ContractError("pii corpus needs at least 1 perturbed answer");
    auto names = all_names();
    if (n_records > names.size())
        throw GenerationError("only " + std::to_string(names.size()) + " distinct person names are available");
    Rng rng(seed);
    rng.shuffle(names);
    names.resize(n_records);

    Corpus corpus;
    corpus.kind = CorpusKind::pii;
    corpus.tokenizer = pii_tokenizer();
    for (std::size_t i = 0; i < n_records; ++i) {
        const auto &name = names[i];
        const bool phone = i % 2 == 0;
        const auto &spec = phone ? kPhone : kEmail;
        const std::string value = phone ? random_phone(rng) : random_email(rng, name);
        std::vector<std::string> wrong;
        for (int guard = 0; wrong.size() < k_perturbed; ++guard) {
            if (guard > 1000) throw GenerationError("could not draw distinct perturbed values");
            auto w = phone ? random_phone(rng) : random_email(rng, name);
            if (w != value && std::find(wrong.begin(), wrong.end(), w) == wrong.end()) wrong.push_back(w);
        }
        const auto &idk = kIdk[rng.below(kIdk.size())];
        corpus.records.push_back(make_record(spec, name, value, std::move(wrong), idk));
    }
    for (std::size_t i = 0; i < corpus.records.size(); ++i) corpus.retain_ids.push_back(i);
    return corpus;
}

std::vector<Example> generate_pretraining_examples(const Corpus &corpus, std::uint64_t seed, std::size_t n) {
    if (corpus.kind == CorpusKind::tofu) return {};
    std::set<std::string> taken;
    for (const auto &r : corpus.records) taken.insert(r.entity);
    std::vector<std::string> names;
    for (auto &nm : all_names())
        if (!taken.count(nm)) names.push_back(nm);
    if (names.empty()) throw GenerationError("no free names left for pretraining text");

    std::vector<const AttributeSpec *> specs;
    if (corpus.kind == CorpusKind::pii) {
        specs = {&kPhone, &kEmail};
    } else {
        std::set<std::string> used;
        for (const auto &r : corpus.records) used.insert(r.attribute);
        for (const auto &s : author_attributes())
            if (used.count(s.name)) specs.push_back(&s);
    }
    Rng rng(seed);
    std::vector<Example> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto &name = names[rng.below(names.size())];
        const auto &spec = *specs[rng.below(specs.size())];
        std::string value;
        if (&spec == &kPhone) value = random_phone(rng);
        else if (&spec == &kEmail) value = random_email(rng, name);
        else value = spec.pool[rng.below(spec.pool.size())];
        FactRecord r;
        r.entity = name;
        r.question = fill(spec.question, name, value);
        const double u = rng.uniform();
        if (u < 0.5) r.answer = fill(spec.answer, name, value);
        else if (u < 0.85) r.answer = fill(spec.paraphrase, name, value);
        else r.answer = kIdk[rng.below(kIdk.size())];
        out.push_back(encode_record(corpus.tokenizer, r));
    }
    return out;
}

Corpus split(Corpus corpus, double forget_ratio, std::uint64_t seed) {
    if (!(forget_ratio > 0.0 && forget_ratio < 1.0)) throw ContractError("forget ratio must lie in (0, 1)");
    auto ents = corpus.entities();
    const auto n_forget = static_cast<std::size_t>(std::llround(forget_ratio * static_cast<double>(ents.size())));
    if (n_forget == 0 || n_forget >= ents.size())
        throw ContractError("forget ratio " + std::to_string(forget_ratio) + " leaves one side of the split empty");
    Rng rng(seed);
    rng.shuffle(ents);
    std::set<std::string> forget(ents.begin(), ents.begin() + static_cast<std::ptrdiff_t>(n_forget));
    corpus.forget_ids.clear();
    corpus.retain_ids.clear();
    for (std::size_t i = 0; i < corpus.records.size(); ++i) {
        const auto key = corpus.records[i].entity.empty() ? "#" + std::to_string(i) : corpus.records[i].entity;
        (forget.count(key) ? corpus.forget_ids : corpus.retain_ids).push_back(i);
    }
    return corpus;
}

// ------------------------------------------------------------------- JSON

Corpus parse_corpus_json(const std::string &text, const LoadOptions &options) {
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error &e) {
        throw ParseError(std::string("corpus file is not valid JSON: ") + e.what());
    }
    Corpus corpus;
    corpus.kind = CorpusKind::tofu;
    const nlohmann::json *records = &root;
    bool has_split = false;
    if (root.is_object()) {
        static const std::set<std::string> top_keys = {"kind", "records", "forget_ids", "retain_ids"};
        for (const auto &[k, v] : root.items())
            if (!top_keys.count(k) && !options.lenient) throw ParseError("unknown top-level key '" + k + "'");
        if (root.contains("kind")) corpus.kind = corpus_kind_from_string(root.at("kind").get<std::string>());
        if (!root.contains("records")) throw ParseError("corpus object has no 'records' array");
        records = &root.at("records");
        if (root.contains("forget_ids") || root.contains("retain_ids")) {
            has_split = true;
            corpus.forget_ids = root.value("forget_ids", std::vector<std::size_t>{});
            corpus.retain_ids = root.value("retain_ids", std::vector<std::size_t>{});
        }
    }
    if (!records->is_array()) throw ParseError("corpus records must be a JSON array");

    static const std::set<std::string> rec_keys = {"entity", "attribute", "question", "answer",
                                                   "paraphrase", "perturbed", "idk"};
    std::size_t index = 0;
    for (const auto &item : *records) {
        const auto where = "record " + std::to_string(index);
        if (!item.is_object()) throw ParseError(where + ": expected an object");
        for (const auto &[k, v] : item.items())
            if (!rec_keys.count(k) && !options.lenient) throw ParseError(where + ": unknown key '" + k + "'");
        FactRecord r;
        for (const char *required : {"question", "answer"}) {
            if (!item.contains(required) || !item.at(required).is_string())
                throw ParseError(where + ": missing '" + required + "'");
        }
        auto opt_string = [&](const char *key) -> std::string {
            if (!item.contains(key)) return {};
            if (!item.at(key).is_string()) throw ParseError(where + ": '" + key + "' must be a string");
            return item.at(key).get<std::string>();
        };
        r.question = Tokenizer::normalize(item.at("question").get<std::string>());
        r.answer = Tokenizer::normalize(item.at("answer").get<std::string>());
        if (r.answer.empty()) throw ParseError(where + ": empty 'answer'");
        r.entity = opt_string("entity");
        r.attribute = opt_string("attribute");
        r.paraphrase = Tokenizer::normalize(opt_string("paraphrase"));
        r.idk = Tokenizer::normalize(opt_string("idk"));
        if (item.contains("perturbed")) r.perturbed = string_array(item.at("perturbed"), "perturbed", index);
        corpus.records.push_back(std::move(r));
        ++index;
    }
    if (!has_split)
        for (std::size_t i = 0; i < corpus.records.size(); ++i) corpus.retain_ids.push_back(i);
    for (auto id : corpus.forget_ids)
        if (id >= corpus.records.size()) throw ParseError("forget id " + std::to_string(id) + " out of range");
    for (auto id : corpus.retain_ids)
        if (id >= corpus.records.size()) throw ParseError("retain id " + std::to_string(id) + " out of range");

    std::vector<std::string> words;
    for (const auto &r : corpus.records) {
        for (const auto *s : {&r.question, &r.answer, &r.paraphrase, &r.idk})
            for (auto &w : Tokenizer::split_words(*s)) words.push_back(std::move(w));
        for (const auto &p : r.perturbed)
            for (auto &w : Tokenizer::split_words(p)) words.push_back(std::move(w));
    }
    if (options.base_tokenizer) {
        if (!options.open_vocabulary) {
            for (const auto &w : words)
                if (!options.base_tokenizer->contains(w))
                    throw ParseError("word '" + w + "' is outside the vocabulary (open vocabulary disabled)");
        }
        corpus.tokenizer = options.base_tokenizer->extended(words);
    } else {
        corpus.tokenizer = Tokenizer(words);
    }
    return corpus;
}

Corpus load_tofu_json(const std::filesystem::path &path, const LoadOptions &options) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_corpus_json(buf.str(), options);
}

std::string corpus_to_json(const Corpus &corpus) {
    nlohmann::ordered_json root;
    root["kind"] = to_string(corpus.kind);
    auto records = nlohmann::ordered_json::array();
    for (const auto &r : corpus.records) {
        nlohmann::ordered_json j;
        if (!r.entity.empty()) j["entity"] = r.entity;
        if (!r.attribute.empty()) j["attribute"] = r.attribute;
        j["question"] = r.question;
        j["answer"] = r.answer;
        if (r.has_paraphrase()) j["paraphrase"] = r.paraphrase;
        if (r.has_perturbed()) j["perturbed"] = r.perturbed;
        if (r.has_idk()) j["idk"] = r.idk;
        records.push_back(std::move(j));
    }
    root["records"] = std::move(records);
    root["forget_ids"] = corpus.forget_ids;
    root["retain_ids"] = corpus.retain_ids;
    return root.dump(2);
}

void save_corpus_json(const Corpus &corpus, const std::filesystem::path &path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write corpus file " + path.string());
    out << corpus_to_json(corpus) << '\n';
}

} // namespace loclab
