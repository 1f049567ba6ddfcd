#include "coar/sequences.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace coar;

namespace {

std::vector<TokenId> image_ids(const Vocabulary& v, int n, int first = 0) {
  std::vector<TokenId> out;
  for (int i = 0; i < n; ++i) out.push_back(v.image_token((first + i) % v.image_size()));
  return out;
}

}  // namespace

TEST(Vocabulary, LayoutAndRoles) {
  const Vocabulary v;
  EXPECT_EQ(v.size(), 136);
  std::set<TokenId> specials = {v.bos(), v.eos(), v.boi(), v.eoi(), v.placeholder_v(),
                                v.placeholder_s(), v.ctx_img(), v.pad()};
  EXPECT_EQ(specials.size(), 8u);
  for (TokenId id : specials) {
    EXPECT_FALSE(v.is_text(id));
    EXPECT_FALSE(v.is_image(id));
  }
  for (TokenId id = 0; id < v.size(); ++id) EXPECT_NO_THROW(v.role(id));
  EXPECT_EQ(v.role(0), TokenRole::kText);
  EXPECT_EQ(v.role(64), TokenRole::kImage);
  EXPECT_EQ(v.role(v.ctx_img()), TokenRole::kCtxImg);
  EXPECT_THROW(v.role(v.size()), InvalidArgument);
}

TEST(Vocabulary, LexiconFitsTextRange) {
  EXPECT_LE(lexicon().size(), 64u);
  const Vocabulary v;
  for (std::size_t i = 0; i < lexicon().size(); ++i) {
    EXPECT_EQ(v.word(lexicon()[i]), static_cast<TokenId>(i));
  }
}

TEST(Vocabulary, TruncatedLexicon) {
  const Vocabulary v(12, 12);
  EXPECT_TRUE(v.has_word("a"));
  EXPECT_FALSE(v.has_word("boot"));
  EXPECT_THROW(v.word("boot"), InvalidArgument);
}

TEST(Tokenize, SubjectPrompt) {
  const Vocabulary v;
  const TokenId dog = v.word("dog");
  const auto p = tokenize_prompt(v, "a photo of [V] [Class]", dog);
  ASSERT_EQ(p.ids.size(), 5u);
  ASSERT_EQ(p.v_positions, std::vector<int>{3});
  EXPECT_EQ(p.ids[3], v.placeholder_v());
  EXPECT_EQ(p.ids[4], dog);
  EXPECT_TRUE(p.s_positions.empty());
}

TEST(Tokenize, ClassPriorPromptHasNoPlaceholders) {
  const Vocabulary v;
  const auto p = tokenize_prompt(v, "a photo of a [Class]", v.word("cat"));
  EXPECT_TRUE(p.v_positions.empty());
  EXPECT_TRUE(p.s_positions.empty());
  EXPECT_EQ(p.ids.back(), v.word("cat"));
}

TEST(Tokenize, CompositionPrompt) {
  const Vocabulary v;
  const auto p = tokenize_prompt(v, "a photo of [V] [Class] in [S] style", v.word("vase"));
  EXPECT_EQ(p.v_positions.size(), 1u);
  EXPECT_EQ(p.s_positions.size(), 1u);
  EXPECT_EQ(p.ids[static_cast<std::size_t>(p.s_positions[0])], v.placeholder_s());
}

TEST(Tokenize, Errors) {
  const Vocabulary v;
  EXPECT_THROW(tokenize_prompt(v, "a photo of a zebra", v.word("dog")), InvalidArgument);
  EXPECT_THROW(tokenize_prompt(v, "a photo of [V[S]] [Class]", v.word("dog")), InvalidArgument);
  EXPECT_THROW(tokenize_prompt(v, "a photo of [X]", v.word("dog")), InvalidArgument);
}

TEST(Assemble, LengthArithmetic) {
  const Vocabulary v;
  const std::vector<TokenId> text(8, v.word("a"));
  const auto seq = assemble(v, text, image_ids(v, 64), 1);
  EXPECT_EQ(seq.size(), 1 + 8 + 1 + 1 + 64 + 1);
  EXPECT_EQ(seq.ids.front(), v.bos());
  EXPECT_EQ(seq.ids.back(), v.eoi());
  EXPECT_EQ(seq.ids[9], v.boi());
  EXPECT_EQ(seq.ctx_img_positions, std::vector<int>{10});
  EXPECT_EQ(seq.image_begin, 11);
}

TEST(Assemble, ZeroShotLayoutHasNoCtxSlot) {
  const Vocabulary v;
  const auto p = tokenize_prompt(v, "a photo of a [Class]", v.word("dog"));
  const auto seq = assemble(v, p.ids, image_ids(v, 64), 0);
  EXPECT_TRUE(seq.ctx_img_positions.empty());
  for (TokenId id : seq.ids) EXPECT_NE(id, v.ctx_img());
}

TEST(Assemble, TwoAdjacentCtxSlots) {
  const Vocabulary v;
  const auto p = tokenize_prompt(v, "a photo of [V] [Class] in [S] style", v.word("dog"));
  const auto seq = assemble(v, p.ids, image_ids(v, 64), 2);
  ASSERT_EQ(seq.ctx_img_positions.size(), 2u);
  EXPECT_EQ(seq.ctx_img_positions[1], seq.ctx_img_positions[0] + 1);
  EXPECT_EQ(seq.ctx_img_positions[1] + 1, seq.image_begin);
  EXPECT_EQ(seq.v_positions, std::vector<int>{1 + p.v_positions[0]});
  EXPECT_EQ(seq.s_positions, std::vector<int>{1 + p.s_positions[0]});
}

TEST(Assemble, LabelsExactlyOnImageSpan) {
  const Vocabulary v;
  const auto p = tokenize_prompt(v, "a photo of [V] [Class] in [S] style", v.word("dog"));
  const auto seq = assemble(v, p.ids, image_ids(v, 64), 2);
  for (int i = 0; i < seq.size(); ++i) {
    const bool in_image = i >= seq.image_begin && i < seq.image_end;
    EXPECT_EQ(seq.labels_mask[static_cast<std::size_t>(i)] != 0, in_image) << i;
  }
  std::vector<int> ctx = seq.v_positions;
  ctx.insert(ctx.end(), seq.s_positions.begin(), seq.s_positions.end());
  ctx.insert(ctx.end(), seq.ctx_img_positions.begin(), seq.ctx_img_positions.end());
  for (int c : ctx) {
    EXPECT_EQ(seq.labels_mask[static_cast<std::size_t>(c)], 0);
    EXPECT_LT(c, seq.image_begin);
  }
}

TEST(Assemble, RoundTrip) {
  const Vocabulary v;
  Rng rng(5);
  for (int n_ctx = 0; n_ctx <= 2; ++n_ctx) {
    std::vector<TokenId> text;
    for (int i = 0; i < 7; ++i) text.push_back(rng.below(50));
    const auto image = image_ids(v, 64, rng.below(64));
    const auto d = disassemble(assemble(v, text, image, n_ctx));
    EXPECT_EQ(d.text, text);
    EXPECT_EQ(d.image, image);
    EXPECT_EQ(d.n_ctx_img, n_ctx);
  }
}

TEST(Assemble, Errors) {
  const Vocabulary v;
  const std::vector<TokenId> text = {v.word("a")};
  EXPECT_THROW(assemble(v, text, {}, 1), InvalidArgument);
  EXPECT_THROW(assemble(v, text, image_ids(v, 4), 3), InvalidArgument);
  const std::vector<TokenId> bad_image = {v.word("a")};
  EXPECT_THROW(assemble(v, text, bad_image, 0), InvalidArgument);
}

TEST(Assemble, DumpRecordsRoles) {
  const Vocabulary v;
  const std::vector<TokenId> text = {v.word("a")};
  const auto seq = assemble(v, text, image_ids(v, 2), 1);
  const auto j = dump_sequence(v, seq);
  ASSERT_EQ(j.size(), static_cast<std::size_t>(seq.size()));
  EXPECT_EQ(j[0]["role"], "bos");
  EXPECT_EQ(j[3]["role"], "ctx_img");
  EXPECT_EQ(j[4]["index"], 4);
}
