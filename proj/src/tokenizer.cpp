#include "frul/tokenizer.hpp"

#include <algorithm>
#include <set>

#include <nlohmann/json.hpp>

#include "frul/common.hpp"

namespace frul::tok {

using nlohmann::json;

namespace {

bool is_punct(char c) { return c == '.' || c == ',' || c == '?'; }

std::vector<std::string> make_pool(std::string_view prefix, int n, bool letters) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) {
        std::string suffix = letters ? std::string(1, static_cast<char>('A' + i)) : std::to_string(i + 1);
        out.push_back(std::string(prefix) + suffix);
    }
    return out;
}

}  // namespace

const std::vector<std::string>& person_placeholders() {
    static const std::vector<std::string> pool = make_pool("PERSON_", 8, true);
    return pool;
}

const std::vector<std::string>& value_placeholders() {
    static const std::vector<std::string> pool = make_pool("VALUE_", 16, false);
    return pool;
}

std::vector<Piece> split_words(std::string_view text) {
    std::vector<Piece> out;
    std::size_t i = 0;
    while (i < text.size()) {
        if (text[i] == ' ' || text[i] == '\t' || text[i] == '\n' || text[i] == '\r') {
            ++i;
            continue;
        }
        if (is_punct(text[i])) {
            out.push_back({std::string(1, text[i]), i, i + 1});
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != '\n' && text[j] != '\r' &&
               !is_punct(text[j])) {
            ++j;
        }
        out.push_back({std::string(text.substr(i, j - i)), i, j});
        i = j;
    }
    return out;
}

const std::vector<std::string>& Vocabulary::specials() {
    static const std::vector<std::string> s = {"<pad>", "<bos>", "<eos>", "<think>", "</think>", "<answer>"};
    return s;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
    tokens_ = specials();
    tokens_.insert(tokens_.end(), std::make_move_iterator(tokens.begin()), std::make_move_iterator(tokens.end()));
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
            throw ValidationError("vocabulary token '" + tokens_[i] + "' is not unique");
        }
    }
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

TokenId Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) throw ValidationError("out-of-vocabulary token '" + std::string(token) + "'");
    return it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw ValidationError("token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::fingerprint() const {
    std::uint64_t h = fnv1a64("frul-vocab");
    for (const auto& t : tokens_) {
        h = fnv1a64(t, h);
        h = fnv1a64(std::string_view("\0", 1), h);
    }
    return hex64(h);
}

std::string Vocabulary::to_json() const {
    json j;
    j["version"] = 1;
    j["specials"] = specials();
    j["tokens"] = std::vector<std::string>(tokens_.begin() + kSpecialCount, tokens_.end());
    return j.dump() + "\n";
}

Vocabulary Vocabulary::from_json(std::string_view text) {
    try {
        auto j = json::parse(text);
        if (j.at("version").get<int>() != 1) throw ValidationError("unsupported vocabulary version");
        if (j.at("specials").get<std::vector<std::string>>() != specials()) {
            throw ValidationError("vocabulary specials do not match");
        }
        return Vocabulary(j.at("tokens").get<std::vector<std::string>>());
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed vocabulary: ") + e.what());
    }
}

void Vocabulary::save(const std::filesystem::path& path) const { write_file_atomic(path, to_json()); }

Vocabulary Vocabulary::load(const std::filesystem::path& path) { return from_json(read_file(path)); }

Vocabulary build_vocab(const corpus::Corpus& corpus) {
    if (corpus.examples.empty()) throw ValidationError("cannot build a vocabulary from an empty corpus");
    std::set<std::string> words;
    auto add = [&](std::string_view text) {
        for (auto& p : split_words(text)) words.insert(std::move(p.text));
    };
    for (const auto& e : corpus.examples) {
        add(e.question);
        add(e.cot);
        add(e.answer);
    }
    for (const auto& f : corpus.facts) add(f.text);
    for (const auto& p : person_placeholders()) words.insert(p);
    for (const auto& p : value_placeholders()) words.insert(p);
    for (const auto& s : Vocabulary::specials()) {
        if (words.count(s)) throw ValidationError("corpus token collides with special token " + s);
    }
    return Vocabulary(std::vector<std::string>(words.begin(), words.end()));
}

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab) {
    std::vector<TokenId> ids;
    for (const auto& p : split_words(text)) ids.push_back(vocab.id(p.text));
    return ids;
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i > 0) out += ' ';
        out += vocab.token(ids[i]);
    }
    return out;
}

namespace {

void append_field(RenderedExample& r, std::string_view text, Field field, Role role, const Vocabulary& vocab) {
    for (const auto& p : split_words(text)) {
        r.token_ids.push_back(vocab.id(p.text));
        r.roles.push_back(role);
        r.alignment.push_back({field, p.begin, p.end});
    }
}

void append_special(RenderedExample& r, TokenId id) {
    r.token_ids.push_back(id);
    r.roles.push_back(Role::Special);
    r.alignment.push_back({});
}

}  // namespace

RenderedExample render_with_cot(std::string_view question, std::string_view cot, std::string_view answer,
                                const Vocabulary& vocab) {
    RenderedExample r;
    append_special(r, kBos);
    append_field(r, question, Field::Question, Role::Prompt, vocab);
    append_special(r, kThinkOpen);
    r.reasoning_offset = r.size();
    append_field(r, cot, Field::Cot, Role::Reasoning, vocab);
    r.reasoning_length = r.size() - r.reasoning_offset;
    append_special(r, kThinkClose);
    append_special(r, kAnswerSep);
    append_field(r, answer, Field::Answer, Role::Answer, vocab);
    append_special(r, kEos);
    return r;
}

RenderedExample render_example(const corpus::Example& example, const Vocabulary& vocab) {
    return render_with_cot(example.question, example.cot, example.answer, vocab);
}

RenderedExample render_answer_only(std::string_view question, std::string_view answer, const Vocabulary& vocab) {
    RenderedExample r;
    append_special(r, kBos);
    append_field(r, question, Field::Question, Role::Prompt, vocab);
    append_special(r, kAnswerSep);
    r.reasoning_offset = r.size();
    append_field(r, answer, Field::Answer, Role::Answer, vocab);
    append_special(r, kEos);
    return r;
}

std::vector<TokenId> render_prompt(std::string_view question, const Vocabulary& vocab) {
    std::vector<TokenId> ids = {kBos};
    auto q = encode(question, vocab);
    ids.insert(ids.end(), q.begin(), q.end());
    ids.push_back(kThinkOpen);
    return ids;
}

std::vector<TokenRange> sentence_ranges(std::span<const std::string> cot_tokens) {
    std::vector<TokenRange> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < cot_tokens.size(); ++i) {
        if (cot_tokens[i] == ".") {
            out.push_back({start, i + 1});
            start = i + 1;
        }
    }
    if (start < cot_tokens.size()) out.push_back({start, cot_tokens.size()});
    return out;
}

}  // namespace frul::tok
