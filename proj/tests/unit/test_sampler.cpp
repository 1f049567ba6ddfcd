#include "coar/sampler.hpp"

#include "helpers.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace coar;
using coar::testing::max_abs_diff;
using coar::testing::small_config;

namespace {

constexpr const char* kComposePrompt = "a photo of [V] [Class] in [S] style";

class SamplerTest : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg = small_config(16, 2);
    params = init_backbone(cfg, 31);
    params.frozen = true;
    vocab = cfg.vocab();
    dog = vocab.word("dog");
    subject = new_bank(2, 16, BankKind::kSubject, dog, 1);
    subject.p_v *= 25.0;
    subject.p_i *= 25.0;
    style = new_bank(1, 16, BankKind::kStyle, dog, 2);
    style.p_v *= 25.0;
    style.p_i *= 25.0;
  }

  DecodeConfig greedy(int n = 8) const {
    DecodeConfig dc;
    dc.mode = DecodeMode::kGreedy;
    dc.max_tokens = n;
    return dc;
  }

  BackboneConfig cfg;
  BackboneParams params;
  Vocabulary vocab;
  TokenId dog = 0;
  ContextBank subject, style;
};

std::uint64_t hash_bank(const ContextBank& b) {
  std::uint64_t h = fnv1a64("bank");
  auto mix = [&](const Mat& m) {
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(m.data()), sizeof(double) * m.size()), h);
  };
  mix(b.p_v);
  mix(b.p_i);
  return h;
}

}  // namespace

TEST_F(SamplerTest, GreedyIsDeterministic) {
  const ContextBank* banks[] = {&subject};
  const auto a = generate(params, banks, "a photo of [V] [Class]", dog, greedy());
  const auto b = generate(params, banks, "a photo of [V] [Class]", dog, greedy());
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 8u);
}

TEST_F(SamplerTest, TopKIsSeededAndImageOnly) {
  DecodeConfig dc;
  dc.k = 5;
  dc.max_tokens = 16;
  dc.seed = 3;
  const auto a = generate(params, {}, "a photo of a [Class]", dog, dc);
  const auto b = generate(params, {}, "a photo of a [Class]", dog, dc);
  EXPECT_EQ(a, b);
  dc.seed = 4;
  const auto c = generate(params, {}, "a photo of a [Class]", dog, dc);
  EXPECT_NE(a, c);
  for (TokenId id : a) EXPECT_TRUE(vocab.is_image(id));
  for (TokenId id : c) EXPECT_TRUE(vocab.is_image(id));
}

TEST_F(SamplerTest, TopOneEqualsGreedy) {
  DecodeConfig dc;
  dc.k = 1;
  dc.max_tokens = 10;
  dc.seed = 17;
  EXPECT_EQ(generate(params, {}, "a photo of a [Class]", dog, dc),
            generate(params, {}, "a photo of a [Class]", dog, greedy(10)));
}

TEST_F(SamplerTest, GreedyPrefixIsStable) {
  const ContextBank* banks[] = {&subject};
  const auto short_run = generate(params, banks, "a photo of [V] [Class]", dog, greedy(5));
  const auto long_run = generate(params, banks, "a photo of [V] [Class]", dog, greedy(12));
  ASSERT_EQ(long_run.size(), 12u);
  EXPECT_TRUE(std::equal(short_run.begin(), short_run.end(), long_run.begin()));
}

TEST_F(SamplerTest, GreedyPicksTheArgmaxOfAFullForward) {
  const auto tokens = generate(params, {}, "a photo of a [Class]", dog, greedy(6));
  const auto p = tokenize_prompt(vocab, "a photo of a [Class]", dog);
  const auto seq = assemble(vocab, p.ids, tokens, 0);
  const auto fwd = forward(params, seq, {}, AttentionMask::causal(seq.size()));
  for (int t = seq.image_begin; t < seq.image_end; ++t) {
    Eigen::Index best;
    fwd.logits.row(t - 1).segment(vocab.image_begin(), vocab.image_size()).maxCoeff(&best);
    EXPECT_EQ(seq.ids[static_cast<std::size_t>(t)], vocab.image_begin() + static_cast<TokenId>(best));
  }
}

TEST_F(SamplerTest, PlaceholderBankMismatch) {
  const ContextBank* banks[] = {&subject};
  EXPECT_THROW(generate(params, banks, "a photo of a [Class]", dog, greedy()), InvalidArgument);
  EXPECT_THROW(generate(params, {}, "a photo of [V] [Class]", dog, greedy()), InvalidArgument);
  const ContextBank* styles[] = {&style};
  EXPECT_THROW(generate(params, styles, "a photo of [V] [Class]", dog, greedy()), InvalidArgument);
}

TEST_F(SamplerTest, DecodeConfigValidation) {
  DecodeConfig dc;
  dc.k = 0;
  EXPECT_THROW(dc.validate(), InvalidArgument);
  dc.k = 3;
  dc.temperature = 0.0;
  EXPECT_THROW(dc.validate(), InvalidArgument);
  dc.mode = DecodeMode::kGreedy;
  EXPECT_NO_THROW(dc.validate());
  dc.max_tokens = 0;
  EXPECT_THROW(dc.validate(), InvalidArgument);
}

TEST_F(SamplerTest, ComposeMasksCrossConceptAttentionAtEveryLayer) {
  const auto res = compose(params, subject, style, kComposePrompt, greedy());
  const auto& seq = res.inputs.layout;
  auto ids = seq.ids;
  std::copy(res.tokens.begin(), res.tokens.end(), ids.begin() + seq.image_begin);
  const auto fwd = forward(params, ids, res.inputs.plan, res.inputs.mask, {.capture_attention = true});
  const std::vector<int> subj = {seq.v_positions[0], seq.ctx_img_positions[0]};
  const std::vector<int> sty = {seq.s_positions[0], seq.ctx_img_positions[1]};
  for (const auto& layer : fwd.attention)
    for (const auto& head : layer)
      for (int r : subj)
        for (int c : sty) {
          EXPECT_EQ(head(r, c), 0.0);
          EXPECT_EQ(head(c, r), 0.0);
        }
}

TEST_F(SamplerTest, ComposeIsTrainingFree) {
  const auto hp = params_hash(params);
  const auto hs = hash_bank(subject), ht = hash_bank(style);
  compose(params, subject, style, kComposePrompt, greedy());
  EXPECT_EQ(params_hash(params), hp);
  EXPECT_EQ(hash_bank(subject), hs);
  EXPECT_EQ(hash_bank(style), ht);
}

TEST_F(SamplerTest, ComposeRejectsKindMismatch) {
  EXPECT_THROW(compose(params, style, subject, kComposePrompt, greedy()), InvalidArgument);
  EXPECT_THROW(compose(params, subject, subject, kComposePrompt, greedy()), InvalidArgument);
}

TEST_F(SamplerTest, ComposeWithCopiedStyleEqualsDuplicatedSlotInjection) {
  ContextBank copy = style;
  copy.p_v = subject.p_v.topRows(1);
  copy.p_i = subject.p_i.topRows(1);
  const auto res = compose(params, subject, copy, kComposePrompt, greedy());

  // Hand-built plan: the subject's own values at both concept slots.
  const auto& seq = res.inputs.layout;
  InjectionPlan manual;
  for (int l = 0; l < subject.depth(); ++l) {
    manual.entries.push_back({l + 1, seq.v_positions[0], subject.p_v.row(l).transpose()});
    manual.entries.push_back({l + 1, seq.ctx_img_positions[0], subject.p_i.row(l).transpose()});
  }
  manual.entries.push_back({1, seq.s_positions[0], subject.p_v.row(0).transpose()});
  manual.entries.push_back({1, seq.ctx_img_positions[1], subject.p_i.row(0).transpose()});

  auto ids = seq.ids;
  std::copy(res.tokens.begin(), res.tokens.end(), ids.begin() + seq.image_begin);
  const auto mask = build_identity_mask(seq);
  const auto a = forward(params, ids, res.inputs.plan, mask);
  const auto b = forward(params, ids, manual, mask);
  EXPECT_EQ(max_abs_diff(a.logits, b.logits), 0.0);

  DecodeInputs in{seq, manual, mask};
  EXPECT_EQ(decode_image(params, in, greedy()), res.tokens);
}

TEST_F(SamplerTest, IdentityMaskIsolatesSubjectRowsAtLayerOne) {
  const ContextBank* banks[] = {&subject, &style};
  const auto in = prepare_generation(params, banks, kComposePrompt, dog, 8, MaskKind::kCausalIdentity);
  ContextBank zeroed = style;
  zeroed.p_v.setZero();
  zeroed.p_i.setZero();
  const ContextBank* banks0[] = {&subject, &zeroed};
  const auto in0 = prepare_generation(params, banks0, kComposePrompt, dog, 8, MaskKind::kCausalIdentity);
  const auto a = forward(params, in.layout, in.plan, in.mask);
  const auto b = forward(params, in0.layout, in0.plan, in0.mask);
  for (int r : {in.layout.v_positions[0], in.layout.ctx_img_positions[0]}) {
    EXPECT_TRUE(a.layer_inputs[1].row(r) == b.layer_inputs[1].row(r)) << r;
  }
  // without the mask the subject image slot does see the style slot
  const auto c = forward(params, in.layout, in.plan, AttentionMask::causal(in.layout.size()));
  const auto d = forward(params, in0.layout, in0.plan, AttentionMask::causal(in0.layout.size()));
  EXPECT_FALSE(c.layer_inputs[1].row(in.layout.ctx_img_positions[0]) ==
               d.layer_inputs[1].row(in.layout.ctx_img_positions[0]));
}

TEST_F(SamplerTest, WritesPpm) {
  const auto path = std::filesystem::temp_directory_path() / "coar_sampler_test.ppm";
  Mat patches = Mat::Constant(4, 12, 0.5);
  write_ppm(path, patches, 2, 2, 1);
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(w, 4);
  EXPECT_EQ(h, 4);
  EXPECT_EQ(maxval, 255);
  std::filesystem::remove(path);
}
