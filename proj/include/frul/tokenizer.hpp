#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "frul/corpus.hpp"

namespace frul::tok {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kThinkOpen = 3;
inline constexpr TokenId kThinkClose = 4;
inline constexpr TokenId kAnswerSep = 5;
inline constexpr int kSpecialCount = 6;

/// Placeholder tokens the scrubber substitutes for forget values.
const std::vector<std::string>& person_placeholders();
const std::vector<std::string>& value_placeholders();

/// A word with its byte range in the source text.
struct Piece {
    std::string text;
    std::size_t begin = 0;
    std::size_t end = 0;
};

/// Whitespace split; ".", "," and "?" become standalone pieces.
std::vector<Piece> split_words(std::string_view text);

class Vocabulary {
  public:
    Vocabulary() = default;
    /// \p tokens excludes the specials; ids start at kSpecialCount.
    explicit Vocabulary(std::vector<std::string> tokens);

    static const std::vector<std::string>& specials();

    std::size_t size() const { return tokens_.size(); }
    bool contains(std::string_view token) const;
    std::optional<TokenId> find(std::string_view token) const;
    TokenId id(std::string_view token) const;  ///< throws ValidationError naming the OOV token
    const std::string& token(TokenId id) const;
    std::span<const std::string> tokens() const { return tokens_; }

    /// Content hash; checkpoints record it so mismatched vocabularies are detected.
    std::string fingerprint() const;

    bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

    std::string to_json() const;
    static Vocabulary from_json(std::string_view text);
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

/// Specials, then every corpus token (examples and facts) and the placeholder
/// pool in lexicographic order.
Vocabulary build_vocab(const corpus::Corpus& corpus);

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab);
std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab);

enum class Role : std::uint8_t { Prompt, Reasoning, Answer, Special };

using RoleSet = std::uint8_t;
constexpr RoleSet role_bit(Role r) { return static_cast<RoleSet>(1u << static_cast<unsigned>(r)); }
inline constexpr RoleSet kReasoningRoles = role_bit(Role::Reasoning);
inline constexpr RoleSet kAnswerRoles = role_bit(Role::Answer);
/// Every position after the prompt: reasoning, answer and the delimiters the
/// model must learn to emit.
inline constexpr RoleSet kGenerationRoles =
    role_bit(Role::Reasoning) | role_bit(Role::Answer) | role_bit(Role::Special);

enum class Field : std::uint8_t { None, Question, Cot, Answer };

struct TokenOrigin {
    Field field = Field::None;
    std::size_t begin = 0;
    std::size_t end = 0;
};

/// BOS q THINK_OPEN c THINK_CLOSE ANSWER_SEP a EOS, or without the
/// THINK_OPEN c THINK_CLOSE part for answer-only rendering.
struct RenderedExample {
    std::vector<TokenId> token_ids;
    std::vector<Role> roles;
    std::vector<TokenOrigin> alignment;
    std::size_t reasoning_offset = 0;  ///< sequence index of the first cot token
    std::size_t reasoning_length = 0;

    std::size_t size() const { return token_ids.size(); }
};

RenderedExample render_example(const corpus::Example& example, const Vocabulary& vocab);
RenderedExample render_with_cot(std::string_view question, std::string_view cot, std::string_view answer,
                                const Vocabulary& vocab);
RenderedExample render_answer_only(std::string_view question, std::string_view answer, const Vocabulary& vocab);

/// BOS q THINK_OPEN, the decoding prompt.
std::vector<TokenId> render_prompt(std::string_view question, const Vocabulary& vocab);

/// Sentence ranges [begin, end) in cot-token coordinates; a sentence ends at a
/// "." token.
struct TokenRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    bool operator==(const TokenRange&) const = default;
};
std::vector<TokenRange> sentence_ranges(std::span<const std::string> cot_tokens);

}  // namespace frul::tok
