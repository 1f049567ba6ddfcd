#include "coar/backbone.hpp"
#include "coar/context.hpp"

#include "helpers.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace coar;
using coar::testing::max_abs_diff;
using coar::testing::random_image;
using coar::testing::small_config;

namespace {

using Dense = std::vector<std::vector<double>>;

Dense to_dense(const Mat& m) {
  Dense out(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  return out;
}

Dense matmul(const Dense& a, const Dense& b) {
  Dense out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

Dense rmsnorm(const Dense& x, const Mat& gain, double eps) {
  Dense out = x;
  for (auto& row : out) {
    double ms = 0.0;
    for (double v : row) ms += v * v;
    ms /= static_cast<double>(row.size());
    const double inv = 1.0 / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = row[j] * inv * gain(0, static_cast<int>(j));
  }
  return out;
}

// Straight-line single-block forward with plain loops.
Dense oracle_logits(const BackboneParams& p, const std::vector<TokenId>& ids) {
  const auto& cfg = p.config;
  const std::size_t S = ids.size();
  const int D = cfg.d_model, H = cfg.n_heads, dh = D / H;
  Dense x(S, std::vector<double>(D));
  for (std::size_t s = 0; s < S; ++s)
    for (int d = 0; d < D; ++d) x[s][d] = p.embed(ids[s], d) + p.pos_embed(static_cast<int>(s), d);

  const LayerParams& l = p.layers[0];
  const Dense a = rmsnorm(x, l.attn_gain, cfg.rms_eps);
  const Dense q = matmul(a, to_dense(l.wq)), k = matmul(a, to_dense(l.wk)), v = matmul(a, to_dense(l.wv));
  Dense o(S, std::vector<double>(D, 0.0));
  for (int h = 0; h < H; ++h) {
    for (std::size_t r = 0; r < S; ++r) {
      std::vector<double> score(r + 1);
      double mx = -1e300;
      for (std::size_t c = 0; c <= r; ++c) {
        double dot = 0.0;
        for (int j = 0; j < dh; ++j) dot += q[r][h * dh + j] * k[c][h * dh + j];
        score[c] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, score[c]);
      }
      double z = 0.0;
      for (double& sc : score) z += (sc = std::exp(sc - mx));
      for (std::size_t c = 0; c <= r; ++c)
        for (int j = 0; j < dh; ++j) o[r][h * dh + j] += score[c] / z * v[c][h * dh + j];
    }
  }
  const Dense proj = matmul(o, to_dense(l.wo));
  Dense hres = x;
  for (std::size_t s = 0; s < S; ++s)
    for (int d = 0; d < D; ++d) hres[s][d] += proj[s][d];
  const Dense b = rmsnorm(hres, l.mlp_gain, cfg.rms_eps);
  Dense z = matmul(b, to_dense(l.w1));
  for (auto& row : z)
    for (double& u : row) u = 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (u + 0.044715 * u * u * u)));
  const Dense mlp = matmul(z, to_dense(l.w2));
  for (std::size_t s = 0; s < S; ++s)
    for (int d = 0; d < D; ++d) hres[s][d] += mlp[s][d];
  const Dense f = rmsnorm(hres, p.final_gain, cfg.rms_eps);
  Dense logits(S, std::vector<double>(static_cast<std::size_t>(cfg.vocab_size()), 0.0));
  for (std::size_t s = 0; s < S; ++s)
    for (int t = 0; t < cfg.vocab_size(); ++t)
      for (int d = 0; d < D; ++d) logits[s][t] += f[s][d] * p.embed(t, d);
  return logits;
}

BackboneParams perturbed_gains(BackboneParams p, std::uint64_t seed) {
  Rng rng(seed);
  auto jitter = [&](Mat& g) {
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = 1.0 + 0.3 * rng.normal();
  };
  for (auto& l : p.layers) {
    jitter(l.attn_gain);
    jitter(l.mlp_gain);
  }
  jitter(p.final_gain);
  return p;
}

TokenSequence prompt_sequence(const BackboneConfig& cfg, int n_ctx, Rng& rng, int n_image = 10) {
  const Vocabulary v = cfg.vocab();
  const auto prompt = tokenize_prompt(v, "a photo of [V] a", 0);
  return assemble(v, prompt.ids, random_image(v, n_image, rng), n_ctx);
}

}  // namespace

TEST(Backbone, HandSizedForwardMatchesOracle) {
  // Smallest vocabulary the fixed special set allows: 1 text + 2 image + 8.
  BackboneConfig cfg;
  cfg.text_size = 1;
  cfg.image_size = 2;
  cfg.d_model = 4;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_seq = 3;
  cfg.image_pos_offset = 0;
  const BackboneParams p = perturbed_gains(init_backbone(cfg, 42), 43);
  const std::vector<TokenId> ids = {0, 1, 0};
  const auto fwd = forward(p, ids, {}, AttentionMask::causal(3));
  const Dense expect = oracle_logits(p, ids);
  for (int s = 0; s < 3; ++s)
    for (int t = 0; t < cfg.vocab_size(); ++t) EXPECT_NEAR(fwd.logits(s, t), expect[s][t], 1e-12);
}

TEST(Backbone, ParameterShapes) {
  const BackboneConfig cfg;
  const BackboneParams p = init_backbone(cfg, 1);
  EXPECT_EQ(p.embed.rows(), 136);
  EXPECT_EQ(p.embed.cols(), 64);
  ASSERT_EQ(p.layers.size(), 12u);
  EXPECT_EQ(p.layers[0].w1.cols(), 256);
  const Vocabulary v = cfg.vocab();
  EXPECT_EQ(p.embed.row(v.placeholder_v()).norm(), 0.0);
  EXPECT_EQ(p.embed.row(v.ctx_img()).norm(), 0.0);
}

TEST(Backbone, InitIsDeterministic) {
  const auto cfg = small_config();
  EXPECT_EQ(params_hash(init_backbone(cfg, 5)), params_hash(init_backbone(cfg, 5)));
  EXPECT_NE(params_hash(init_backbone(cfg, 5)), params_hash(init_backbone(cfg, 6)));
}

TEST(Backbone, ForwardNeverMutatesParams) {
  const auto cfg = small_config();
  const BackboneParams p = init_backbone(cfg, 7);
  const auto before = params_hash(p);
  Rng rng(1);
  const auto seq = prompt_sequence(cfg, 1, rng);
  forward(p, seq, {}, AttentionMask::causal(seq.size()), {.keep_tape = true});
  EXPECT_EQ(params_hash(p), before);
}

TEST(Backbone, SoftmaxRowsNormalise) {
  const auto cfg = small_config();
  const BackboneParams p = init_backbone(cfg, 8);
  Rng rng(2);
  const auto seq = prompt_sequence(cfg, 1, rng);
  const auto fwd = forward(p, seq, {}, AttentionMask::causal(seq.size()));
  for (int r = 0; r < fwd.logits.rows(); ++r) {
    const RowVec row = fwd.logits.row(r);
    const double sum = (row.array() - row.maxCoeff()).exp().sum();
    const double total = ((row.array() - row.maxCoeff()).exp() / sum).sum();
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Backbone, CausalityUnderPerturbation) {
  const auto cfg = small_config();
  const BackboneParams p = init_backbone(cfg, 9);
  Rng rng(3);
  const auto seq = prompt_sequence(cfg, 1, rng);
  const auto base = forward(p, seq, {}, AttentionMask::causal(seq.size()));
  for (int trial = 0; trial < 10; ++trial) {
    const int j = seq.image_begin + rng.below(seq.image_length());
    auto ids = seq.ids;
    ids[static_cast<std::size_t>(j)] = cfg.vocab().image_token(rng.below(cfg.image_size));
    const auto fwd = forward(p, ids, {}, AttentionMask::causal(seq.size()));
    EXPECT_EQ(max_abs_diff(fwd.logits.topRows(j), base.logits.topRows(j)), 0.0) << "j=" << j;
  }
}

TEST(Backbone, ZeroOverwriteOfReservedSlotIsNoOp) {
  const auto cfg = small_config();
  const BackboneParams p = init_backbone(cfg, 10);
  Rng rng(4);
  const auto seq = prompt_sequence(cfg, 1, rng);
  InjectionPlan plan;
  plan.entries.push_back({1, seq.ctx_img_positions[0], Vec::Zero(cfg.d_model)});
  const auto a = forward(p, seq, {}, AttentionMask::causal(seq.size()));
  const auto b = forward(p, seq, plan, AttentionMask::causal(seq.size()));
  EXPECT_EQ(max_abs_diff(a.logits, b.logits), 0.0);
}

TEST(Backbone, InjectionOverwritesLayerInput) {
  const auto cfg = small_config(16, 3);
  const BackboneParams p = init_backbone(cfg, 11);
  Rng rng(5);
  const auto seq = prompt_sequence(cfg, 1, rng);
  InjectionPlan plan;
  Vec v2 = Vec::LinSpaced(cfg.d_model, -1.0, 1.0);
  plan.entries.push_back({2, seq.v_positions[0], v2});
  const auto fwd = forward(p, seq, plan, AttentionMask::causal(seq.size()), {.keep_tape = true});
  EXPECT_TRUE(fwd.tape[1].x.row(seq.v_positions[0]) == v2.transpose());
  // captured before injection
  EXPECT_FALSE(fwd.layer_inputs[1].row(seq.v_positions[0]) == v2.transpose());
}

TEST(Backbone, InjectionLocality) {
  const auto cfg = small_config(16, 4);
  const BackboneParams p = init_backbone(cfg, 12);
  Rng rng(6);
  const auto seq = prompt_sequence(cfg, 1, rng);
  InjectionPlan full;
  for (int l = 1; l <= 4; ++l) {
    Vec v(cfg.d_model);
    for (int d = 0; d < cfg.d_model; ++d) v(d) = rng.normal();
    full.entries.push_back({l, seq.ctx_img_positions[0], v});
  }
  const auto with = forward(p, seq, full, AttentionMask::causal(seq.size()));
  for (int drop = 1; drop <= 4; ++drop) {
    InjectionPlan partial;
    for (const auto& e : full.entries)
      if (e.layer != drop) partial.entries.push_back(e);
    const auto without = forward(p, seq, partial, AttentionMask::causal(seq.size()));
    for (int l = 0; l < 4; ++l) {
      const double diff = max_abs_diff(with.layer_inputs[static_cast<std::size_t>(l)],
                                       without.layer_inputs[static_cast<std::size_t>(l)]);
      if (l + 1 <= drop) {
        EXPECT_EQ(diff, 0.0) << "drop " << drop << " layer " << l + 1;
      } else {
        EXPECT_GT(diff, 0.0) << "drop " << drop << " layer " << l + 1;
      }
    }
  }
}

TEST(Backbone, PlanValidation) {
  const auto cfg = small_config();
  const BackboneParams p = init_backbone(cfg, 13);
  Rng rng(7);
  const auto seq = prompt_sequence(cfg, 1, rng);
  const auto mask = AttentionMask::causal(seq.size());
  InjectionPlan bad_pos;
  bad_pos.entries.push_back({1, seq.size(), Vec::Zero(cfg.d_model)});
  EXPECT_THROW(forward(p, seq, bad_pos, mask), InvalidArgument);
  InjectionPlan bad_layer;
  bad_layer.entries.push_back({3, 0, Vec::Zero(cfg.d_model)});
  EXPECT_THROW(forward(p, seq, bad_layer, mask), InvalidArgument);
  InjectionPlan dup;
  dup.entries.push_back({1, 2, Vec::Zero(cfg.d_model)});
  dup.entries.push_back({1, 2, Vec::Ones(cfg.d_model)});
  EXPECT_THROW(forward(p, seq, dup, mask), InvalidArgument);
  EXPECT_THROW(forward(p, seq, {}, AttentionMask::causal(seq.size() - 1)), InvalidArgument);
}

TEST(Backbone, NonFiniteActivationReportsLayer) {
  const auto cfg = small_config();
  const BackboneParams p = init_backbone(cfg, 14);
  Rng rng(8);
  const auto seq = prompt_sequence(cfg, 1, rng);
  InjectionPlan plan;
  plan.entries.push_back({2, seq.ctx_img_positions[0], Vec::Constant(cfg.d_model, std::nan(""))});
  try {
    forward(p, seq, plan, AttentionMask::causal(seq.size()));
    FAIL() << "expected NumericFailure";
  } catch (const NumericFailure& e) {
    EXPECT_EQ(e.layer(), 2);
  }
}

TEST(Backbone, PositionIdsAreImageRelative) {
  const auto cfg = small_config();
  Rng rng(9);
  for (int n_ctx = 0; n_ctx <= 2; ++n_ctx) {
    const auto seq = prompt_sequence(cfg, n_ctx, rng);
    const auto pos = position_ids(cfg, seq.ids);
    for (int j = 0; j < seq.image_begin; ++j) EXPECT_EQ(pos[static_cast<std::size_t>(j)], j);
    for (int j = seq.image_begin; j < seq.size(); ++j) {
      EXPECT_EQ(pos[static_cast<std::size_t>(j)], cfg.image_pos_offset + j - seq.image_begin);
    }
  }
  std::vector<TokenId> plain(cfg.max_seq + 1, 0);
  EXPECT_THROW(position_ids(cfg, plain), InvalidArgument);
  const auto long_image = prompt_sequence(cfg, 0, rng, cfg.max_seq - cfg.image_pos_offset + 1);
  EXPECT_THROW(position_ids(cfg, long_image.ids), InvalidArgument);
}

TEST(Backbone, WeightGradientsMatchFiniteDifferences) {
  const auto cfg = small_config(8, 2);
  BackboneParams p = perturbed_gains(init_backbone(cfg, 15), 16);
  Rng rng(10);
  const auto seq = prompt_sequence(cfg, 1, rng, 6);
  Mat target = Mat::Zero(seq.size(), cfg.vocab_size());
  for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] = rng.normal();
  auto loss = [&](const BackboneParams& q) {
    return forward(q, seq, {}, AttentionMask::causal(seq.size())).logits.cwiseProduct(target).sum();
  };
  BackboneParams grads = zeros_like(p);
  const auto fwd = forward(p, seq, {}, AttentionMask::causal(seq.size()), {.keep_tape = true});
  backward(p, fwd, target, &grads);

  std::vector<std::pair<std::string, Mat*>> tensors;
  p.for_each([&](const std::string& n, Mat& m) { tensors.emplace_back(n, &m); });
  std::vector<Mat*> gtensors;
  grads.for_each([&](const std::string&, Mat& m) { gtensors.push_back(&m); });
  const double h = 1e-5;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    Mat& m = *tensors[t].second;
    for (int trial = 0; trial < 3; ++trial) {
      const Eigen::Index i = rng.below(static_cast<int>(m.size()));
      const double orig = m.data()[i];
      m.data()[i] = orig + h;
      const double up = loss(p);
      m.data()[i] = orig - h;
      const double down = loss(p);
      m.data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = gtensors[t]->data()[i];
      EXPECT_NEAR(analytic, numeric, 1e-6 * std::max(1.0, std::abs(numeric))) << tensors[t].first;
    }
  }
}

TEST(IdentityMask, FlipsExactlyTheCrossGroupCausalPairs) {
  TokenSequence seq;
  seq.ids.assign(80, 0);
  seq.v_positions = {4};
  seq.s_positions = {7};
  seq.ctx_img_positions = {10, 11};
  const auto causal = AttentionMask::causal(80);
  const auto m = build_identity_mask(seq);
  int flipped = 0;
  for (int r = 0; r < 80; ++r)
    for (int c = 0; c < 80; ++c) {
      EXPECT_FALSE(m.at(r, c) && !causal.at(r, c));
      flipped += causal.at(r, c) && !m.at(r, c);
    }
  // (10,7) from the subject rows; (7,4), (11,4), (11,10) from the style rows
  EXPECT_EQ(flipped, 4);
  EXPECT_FALSE(m.at(10, 7));
  EXPECT_FALSE(m.at(11, 10));
  EXPECT_TRUE(m.at(10, 4));
  EXPECT_TRUE(m.at(11, 7));
}

TEST(IdentityMask, RejectsSingleConcept) {
  const auto cfg = small_config();
  Rng rng(11);
  const auto seq = prompt_sequence(cfg, 1, rng);
  EXPECT_THROW(build_identity_mask(seq), InvalidArgument);
}

TEST(IdentityMask, ImageTokensSeeEveryContextPosition) {
  const BackboneConfig cfg;
  const Vocabulary v = cfg.vocab();
  const auto prompt = tokenize_prompt(v, "a photo of [V] [Class] in [S] style", v.word("dog"));
  Rng rng(12);
  const auto seq = assemble(v, prompt.ids, random_image(v, 64, rng), 2);
  const auto m = build_identity_mask(seq);
  for (int r = seq.image_begin; r < seq.image_end; ++r) {
    EXPECT_TRUE(m.at(r, seq.v_positions[0]));
    EXPECT_TRUE(m.at(r, seq.s_positions[0]));
    EXPECT_TRUE(m.at(r, seq.ctx_img_positions[0]));
    EXPECT_TRUE(m.at(r, seq.ctx_img_positions[1]));
  }
}

TEST(IdentityMask, PrefixKeepsPermissions) {
  const BackboneConfig cfg;
  const Vocabulary v = cfg.vocab();
  const auto prompt = tokenize_prompt(v, "a photo of [V] [Class] in [S] style", v.word("dog"));
  Rng rng(13);
  const auto seq = assemble(v, prompt.ids, random_image(v, 64, rng), 2);
  const auto m = build_identity_mask(seq);
  const auto pre = m.prefix(20);
  for (int r = 0; r < 20; ++r)
    for (int c = 0; c < 20; ++c) EXPECT_EQ(pre.at(r, c), m.at(r, c));
}

TEST(SubjectStats, SingleTokenIsItsOwnMean) {
  const auto cfg = small_config(16, 3);
  const BackboneParams p = init_backbone(cfg, 20);
  const Vocabulary v = cfg.vocab();
  const std::vector<TokenId> text = {v.word("a"), v.word("photo")};
  const std::vector<std::vector<TokenId>> images = {{v.image_token(3)}};
  const Mat stats = capture_image_stats(p, text, images, 3);
  const auto seq = assemble(v, text, images[0], 0);
  const auto fwd = forward(p, seq, {}, AttentionMask::causal(seq.size()));
  for (int l = 0; l < 3; ++l) {
    EXPECT_TRUE(stats.row(l) == fwd.layer_inputs[static_cast<std::size_t>(l)].row(seq.image_begin));
  }
}

TEST(SubjectStats, DuplicatesDoNotChangeTheMean) {
  const auto cfg = small_config(16, 2);
  const BackboneParams p = init_backbone(cfg, 21);
  const Vocabulary v = cfg.vocab();
  Rng rng(14);
  const std::vector<TokenId> text = {v.word("a")};
  const auto img = random_image(v, 10, rng);
  const std::vector<std::vector<TokenId>> one = {img}, two = {img, img};
  EXPECT_LT(max_abs_diff(capture_image_stats(p, text, one, 2), capture_image_stats(p, text, two, 2)),
            1e-15);
}

TEST(SubjectStats, MatchesTwoLoopOracle) {
  const BackboneConfig cfg;
  const BackboneParams p = init_backbone(cfg, 22);
  const World w = build_world(3);
  const SubjectSet subject = make_subject(w, 1);
  const Mat stats = capture_subject_stats(p, subject, w.codebook, 9);

  const Vocabulary v = cfg.vocab();
  const auto prompt = tokenize_prompt(v, "a photo of a [Class]", subject.class_name);
  Mat acc = Mat::Zero(9, cfg.d_model);
  long n = 0;
  for (const auto& ref : subject.references) {
    const auto seq = assemble(v, prompt.ids, image_tokens_of(v, ref, w.codebook), 0);
    const auto fwd = forward(p, seq, {}, AttentionMask::causal(seq.size()));
    for (int t = seq.image_begin; t < seq.image_end; ++t) {
      for (int l = 0; l < 9; ++l)
        for (int d = 0; d < cfg.d_model; ++d) acc(l, d) += fwd.layer_inputs[static_cast<std::size_t>(l)](t, d);
      ++n;
    }
  }
  EXPECT_EQ(n, static_cast<long>(subject.references.size()) * 64);
  EXPECT_LT(max_abs_diff(stats, acc / static_cast<double>(n)), 1e-12);
}
