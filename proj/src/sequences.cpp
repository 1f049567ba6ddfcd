#include "coar/sequences.hpp"

#include <algorithm>
#include <array>
#include <sstream>

namespace coar {

namespace {

constexpr std::array<std::string_view, 61> kLexicon = {
    // function words
    "a", "photo", "of", "on", "the", "in", "style",
    // classes
    "dog", "cat", "vase", "backpack", "clock", "teapot", "robot", "boot",
    // colours
    "red", "orange", "yellow", "lime", "green", "teal", "cyan", "azure", "blue", "indigo",
    "violet", "purple", "magenta", "pink", "rose", "maroon", "brown", "tan", "olive", "navy",
    "gray", "black", "white", "gold",
    // patterns
    "solid", "striped", "checkered", "bordered",
    // scenes
    "snow", "beach", "city", "road", "grass", "jungle", "mountain", "water",
    // placement: rows, then columns
    "top", "upper", "middle", "lower", "bottom",
    "far-left", "left", "center", "right", "far-right"};

}  // namespace

std::span<const std::string_view> lexicon() { return kLexicon; }

std::string_view role_name(TokenRole role) {
  switch (role) {
    case TokenRole::kText: return "text";
    case TokenRole::kImage: return "image";
    case TokenRole::kBos: return "bos";
    case TokenRole::kEos: return "eos";
    case TokenRole::kBoi: return "boi";
    case TokenRole::kEoi: return "eoi";
    case TokenRole::kPlaceholderV: return "placeholder_v";
    case TokenRole::kPlaceholderS: return "placeholder_s";
    case TokenRole::kCtxImg: return "ctx_img";
    case TokenRole::kPad: return "pad";
  }
  return "?";
}

Vocabulary::Vocabulary(int text_size, int image_size)
    : text_size_(text_size), image_size_(image_size) {
  require(text_size >= 1 && image_size >= 2, "vocabulary needs >=1 text and >=2 image ids");
}

TokenRole Vocabulary::role(TokenId id) const {
  require(id >= 0 && id < size(), "token id out of vocabulary range");
  if (id < text_size_) return TokenRole::kText;
  if (id < image_end()) return TokenRole::kImage;
  return static_cast<TokenRole>(static_cast<int>(TokenRole::kBos) + (id - image_end()));
}

TokenId Vocabulary::image_token(int code) const {
  require(code >= 0 && code < image_size_, "image code out of range");
  return image_begin() + code;
}

int Vocabulary::code_of(TokenId id) const {
  require(is_image(id), "not an image token");
  return id - image_begin();
}

TokenId Vocabulary::word(std::string_view w) const {
  for (int i = 0; i < std::min<int>(text_size_, static_cast<int>(kLexicon.size())); ++i) {
    if (kLexicon[static_cast<std::size_t>(i)] == w) return i;
  }
  throw InvalidArgument("unknown word '" + std::string(w) + "'");
}

bool Vocabulary::has_word(std::string_view w) const noexcept {
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(text_size_), kLexicon.size());
  return std::find(kLexicon.begin(), kLexicon.begin() + static_cast<std::ptrdiff_t>(n), w) !=
         kLexicon.begin() + static_cast<std::ptrdiff_t>(n);
}

std::string Vocabulary::word_of(TokenId id) const {
  require(is_text(id), "not a text token");
  if (id < static_cast<int>(kLexicon.size())) return std::string(kLexicon[static_cast<std::size_t>(id)]);
  return "w" + std::to_string(id);
}

PromptTokens tokenize_prompt(const Vocabulary& vocab, std::string_view templ,
                             TokenId class_name) {
  PromptTokens out;
  std::istringstream in{std::string(templ)};
  std::string w;
  while (in >> w) {
    const int pos = static_cast<int>(out.ids.size());
    if (w == "[V]") {
      out.ids.push_back(vocab.placeholder_v());
      out.v_positions.push_back(pos);
    } else if (w == "[S]") {
      out.ids.push_back(vocab.placeholder_s());
      out.s_positions.push_back(pos);
    } else if (w == "[Class]") {
      require(vocab.is_text(class_name), "class name must be a text token");
      out.ids.push_back(class_name);
    } else if (w.find('[') != std::string::npos || w.find(']') != std::string::npos) {
      throw InvalidArgument("malformed or nested marker '" + w + "'");
    } else {
      out.ids.push_back(vocab.word(w));
    }
  }
  return out;
}

TokenSequence assemble(const Vocabulary& vocab, std::span<const TokenId> text,
                       std::span<const TokenId> image, int n_ctx_img) {
  require(!image.empty(), "image token list is empty");
  require(n_ctx_img >= 0 && n_ctx_img <= 2, "n_ctx_img must be 0, 1 or 2");
  for (TokenId id : image) require(vocab.is_image(id), "non-image id in image span");
  for (TokenId id : text) {
    require(vocab.is_text(id) || id == vocab.placeholder_v() || id == vocab.placeholder_s(),
            "text span may only hold text ids and placeholders");
  }

  TokenSequence seq;
  const int L = static_cast<int>(text.size());
  const int T = static_cast<int>(image.size());
  seq.ids.reserve(static_cast<std::size_t>(L + T + n_ctx_img + 3));
  seq.ids.push_back(vocab.bos());
  seq.text_begin = 1;
  for (int i = 0; i < L; ++i) {
    const TokenId id = text[static_cast<std::size_t>(i)];
    if (id == vocab.placeholder_v()) seq.v_positions.push_back(1 + i);
    if (id == vocab.placeholder_s()) seq.s_positions.push_back(1 + i);
    seq.ids.push_back(id);
  }
  seq.text_end = 1 + L;
  seq.ids.push_back(vocab.boi());
  for (int k = 0; k < n_ctx_img; ++k) {
    seq.ctx_img_positions.push_back(static_cast<int>(seq.ids.size()));
    seq.ids.push_back(vocab.ctx_img());
  }
  seq.image_begin = static_cast<int>(seq.ids.size());
  seq.ids.insert(seq.ids.end(), image.begin(), image.end());
  seq.image_end = seq.image_begin + T;
  seq.ids.push_back(vocab.eoi());

  seq.labels_mask.assign(seq.ids.size(), 0);
  std::fill(seq.labels_mask.begin() + seq.image_begin, seq.labels_mask.begin() + seq.image_end,
            std::uint8_t{1});
  return seq;
}

Disassembled disassemble(const TokenSequence& seq) {
  Disassembled d;
  auto t = seq.text_tokens();
  d.text.assign(t.begin(), t.end());
  auto im = seq.image_tokens();
  d.image.assign(im.begin(), im.end());
  d.n_ctx_img = static_cast<int>(seq.ctx_img_positions.size());
  return d;
}

nlohmann::json dump_sequence(const Vocabulary& vocab, const TokenSequence& seq) {
  nlohmann::json arr = nlohmann::json::array();
  for (int i = 0; i < seq.size(); ++i) {
    arr.push_back({{"index", i},
                   {"id", seq.ids[static_cast<std::size_t>(i)]},
                   {"role", role_name(vocab.role(seq.ids[static_cast<std::size_t>(i)]))}});
  }
  return arr;
}

}  // namespace coar
