#pragma once

#include "coar/common.hpp"

#include <nlohmann/json.hpp>

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace coar {

enum class TokenRole {
  kText,
  kImage,
  kBos,
  kEos,
  kBoi,
  kEoi,
  kPlaceholderV,
  kPlaceholderS,
  kCtxImg,
  kPad,
};

std::string_view role_name(TokenRole role);

/// Shared text+image vocabulary. Layout is [text | image | 8 specials].
///
/// Text ids are bound to a fixed lexicon (function words, class names, colour,
/// pattern, scene and placement words); a vocabulary with fewer text ids simply exposes a
/// prefix of that lexicon.
class Vocabulary {
 public:
  static constexpr int kNumSpecials = 8;

  explicit Vocabulary(int text_size = 64, int image_size = 64);

  int text_size() const noexcept { return text_size_; }
  int image_size() const noexcept { return image_size_; }
  int size() const noexcept { return text_size_ + image_size_ + kNumSpecials; }

  TokenId image_begin() const noexcept { return text_size_; }
  TokenId image_end() const noexcept { return text_size_ + image_size_; }

  TokenId bos() const noexcept { return special(0); }
  TokenId eos() const noexcept { return special(1); }
  TokenId boi() const noexcept { return special(2); }
  TokenId eoi() const noexcept { return special(3); }
  TokenId placeholder_v() const noexcept { return special(4); }
  TokenId placeholder_s() const noexcept { return special(5); }
  TokenId ctx_img() const noexcept { return special(6); }
  TokenId pad() const noexcept { return special(7); }

  TokenRole role(TokenId id) const;
  bool is_image(TokenId id) const noexcept { return id >= image_begin() && id < image_end(); }
  bool is_text(TokenId id) const noexcept { return id >= 0 && id < text_size_; }
  // Slots whose embedding is the zero vector and whose hidden row is
  // overwritten by injected context.
  bool is_reserved(TokenId id) const noexcept {
    return id == placeholder_v() || id == placeholder_s() || id == ctx_img();
  }

  TokenId image_token(int code) const;
  int code_of(TokenId id) const;

  // Throws InvalidArgument for words outside the (possibly truncated) lexicon.
  TokenId word(std::string_view w) const;
  bool has_word(std::string_view w) const noexcept;
  std::string word_of(TokenId id) const;

  bool operator==(const Vocabulary&) const = default;

 private:
  TokenId special(int k) const noexcept { return text_size_ + image_size_ + k; }

  int text_size_;
  int image_size_;
};

// Fixed lexicon, in text-id order.
std::span<const std::string_view> lexicon();

struct PromptTokens {
  std::vector<TokenId> ids;
  std::vector<int> v_positions;  // indices into ids
  std::vector<int> s_positions;
};

/// Whitespace-tokenizes a template over the lexicon. `[V]` and `[S]` become
/// single placeholder tokens; `[Class]` becomes `class_name`.
PromptTokens tokenize_prompt(const Vocabulary& vocab, std::string_view templ,
                             TokenId class_name);

struct TokenSequence {
  std::vector<TokenId> ids;
  int text_begin = 0, text_end = 0;
  int image_begin = 0, image_end = 0;
  std::vector<int> v_positions;
  std::vector<int> s_positions;
  std::vector<int> ctx_img_positions;
  std::vector<std::uint8_t> labels_mask;

  int size() const noexcept { return static_cast<int>(ids.size()); }
  int image_length() const noexcept { return image_end - image_begin; }
  std::span<const TokenId> image_tokens() const {
    return std::span<const TokenId>(ids).subspan(image_begin, image_length());
  }
  std::span<const TokenId> text_tokens() const {
    return std::span<const TokenId>(ids).subspan(text_begin, text_end - text_begin);
  }
};

/// Layout: BOS, text..., BOI, CTX_IMG x n_ctx_img, image..., EOI.
/// Labels are set exactly on the image span.
TokenSequence assemble(const Vocabulary& vocab, std::span<const TokenId> text,
                       std::span<const TokenId> image, int n_ctx_img);

struct Disassembled {
  std::vector<TokenId> text;
  std::vector<TokenId> image;
  int n_ctx_img = 0;
};
Disassembled disassemble(const TokenSequence& seq);

nlohmann::json dump_sequence(const Vocabulary& vocab, const TokenSequence& seq);

}  // namespace coar
