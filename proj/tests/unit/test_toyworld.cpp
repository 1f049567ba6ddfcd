#include "coar/toyworld.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <limits>
#include <set>

using namespace coar;

namespace {

std::vector<int> brute_force_nearest(const PixelGrid& g, const Codebook& cb) {
  std::vector<int> out;
  for (int i = 0; i < g.patches.rows(); ++i) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < cb.size; ++k) {
      double d = 0.0;
      for (int p = 0; p < cb.dim; ++p) {
        const double diff = g.patches(i, p) - cb.centroids(k, p);
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace

TEST(Codebook, DistinctCentroids) {
  const Codebook cb = build_codebook(64, 12, 7);
  EXPECT_EQ(cb.size, 64);
  EXPECT_EQ(cb.centroids.rows(), 64);
  EXPECT_EQ(cb.centroids.cols(), 12);
  EXPECT_GT(cb.min_distance(), 0.0);
}

TEST(Codebook, MinimalScalarCase) {
  const Codebook cb = build_codebook(2, 1, 0);
  EXPECT_NE(cb.centroids(0, 0), cb.centroids(1, 0));
}

TEST(Codebook, Deterministic) {
  const Codebook a = build_codebook(64, 12, 7);
  const Codebook b = build_codebook(64, 12, 7);
  EXPECT_EQ(std::memcmp(a.centroids.data(), b.centroids.data(), sizeof(double) * a.centroids.size()), 0);
}

TEST(Codebook, RejectsDegenerateSizes) {
  EXPECT_THROW(build_codebook(0, 12, 1), InvalidArgument);
  EXPECT_THROW(build_codebook(64, 0, 1), InvalidArgument);
}

TEST(Codebook, NoiseBelowHalfSeparation) {
  const Codebook cb = build_codebook(64, 12, 7);
  const double worst_noise = cb.noise_amplitude() * std::sqrt(static_cast<double>(cb.dim));
  EXPECT_LT(2.0 * worst_noise, cb.min_distance());
}

TEST(Quantize, ShapeContract) {
  const Codebook cb = build_codebook(64, 12, 7);
  Rng rng(1);
  PixelGrid g{8, 8, Mat(64, 12)};
  for (Eigen::Index i = 0; i < g.patches.size(); ++i) g.patches.data()[i] = rng.uniform();
  const auto ids = quantize(g, cb);
  ASSERT_EQ(ids.size(), 64u);
  for (int id : ids) {
    EXPECT_GE(id, 0);
    EXPECT_LT(id, 64);
  }
}

TEST(Quantize, CentroidsAreFixedPoints) {
  const Codebook cb = build_codebook(64, 12, 7);
  PixelGrid g{8, 8, cb.centroids};
  const auto ids = quantize(g, cb);
  for (int k = 0; k < 64; ++k) EXPECT_EQ(ids[static_cast<std::size_t>(k)], k);
}

TEST(Quantize, MatchesBruteForceOracle) {
  const Codebook cb = build_codebook(64, 12, 11);
  Rng rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    PixelGrid g{8, 8, Mat(64, 12)};
    for (Eigen::Index i = 0; i < g.patches.size(); ++i) g.patches.data()[i] = rng.uniform();
    EXPECT_EQ(quantize(g, cb), brute_force_nearest(g, cb));
  }
}

TEST(Quantize, TiesGoToLowestId) {
  Codebook cb;
  cb.size = 3;
  cb.dim = 1;
  cb.centroids = Mat(3, 1);
  cb.centroids << 0.2, 0.6, 0.4;
  PixelGrid g{1, 1, Mat::Constant(1, 1, 0.5)};  // equidistant from 0.6 and 0.4
  EXPECT_EQ(quantize(g, cb)[0], 1);
}

TEST(Quantize, DimensionMismatchRejected) {
  const Codebook cb = build_codebook(8, 4, 1);
  PixelGrid g{2, 2, Mat::Zero(4, 3)};
  EXPECT_THROW(quantize(g, cb), InvalidArgument);
}

TEST(Quantize, Idempotent) {
  const Codebook cb = build_codebook(64, 12, 5);
  Rng rng(4);
  PixelGrid g{8, 8, Mat(64, 12)};
  for (Eigen::Index i = 0; i < g.patches.size(); ++i) g.patches.data()[i] = rng.uniform();
  const auto ids = quantize(g, cb);
  EXPECT_EQ(quantize(dequantize(ids, cb, 8, 8), cb), ids);
}

TEST(World, RenderedNoiseNeverFlipsCodes) {
  const World w = build_world(3);
  Rng spec_rng(12), noise(13);
  for (int i = 0; i < 50; ++i) {
    ImageSpec s;
    s.class_index = spec_rng.below(kNumClasses);
    s.color_a = spec_rng.below(kNumColors);
    s.color_b = (s.color_a + 1) % kNumColors;
    s.pattern = spec_rng.below(kNumPatterns);
    s.scene = spec_rng.below(kNumScenes);
    s.dx = spec_rng.below(5);
    s.dy = spec_rng.below(5);
    EXPECT_EQ(quantize(w.render(s, noise), w.codebook), w.render_codes(s));
  }
}

TEST(World, ClassifierRecognisesCanonicalImages) {
  const World w = build_world(3);
  for (int c = 0; c < kNumClasses; ++c) {
    const auto [cls, iou] = w.classify(w.to_tokens(w.render_codes(canonical_spec(c))));
    EXPECT_EQ(cls, c);
    EXPECT_DOUBLE_EQ(iou, 1.0);
  }
}

TEST(World, JsonRoundTripIsBitExact) {
  const World w = build_world(3);
  const World back = world_from_json(nlohmann::json::parse(world_to_json(w).dump()));
  EXPECT_EQ(back.seed, w.seed);
  EXPECT_EQ(std::memcmp(back.codebook.centroids.data(), w.codebook.centroids.data(),
                        sizeof(double) * w.codebook.centroids.size()),
            0);
}

TEST(Subject, SeedOneHasFourReferences) {
  const World w = build_world(3);
  const SubjectSet s = make_subject(w, 1);
  EXPECT_EQ(s.references.size(), 4u);
  EXPECT_EQ(s.class_name, w.classes[static_cast<std::size_t>(s.identity.class_index)].token);
}

TEST(Subject, ReferenceCountInRange) {
  const World w = build_world(3);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto n = make_subject(w, seed).references.size();
    EXPECT_GE(n, 3u);
    EXPECT_LE(n, 5u);
  }
}

TEST(Subject, Deterministic) {
  const World w = build_world(3);
  const SubjectSet a = make_subject(w, 17), b = make_subject(w, 17);
  ASSERT_EQ(a.references.size(), b.references.size());
  for (std::size_t i = 0; i < a.references.size(); ++i) {
    EXPECT_TRUE(a.references[i].patches == b.references[i].patches);
  }
}

TEST(Subject, DistinctSeedsDifferInAQuarterOfPositions) {
  const World w = build_world(3);
  const auto a = quantize(make_subject(w, 1).references[0], w.codebook);
  const auto b = quantize(make_subject(w, 2).references[0], w.codebook);
  int diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i];
  EXPECT_GE(diff, 16);
}

TEST(Subject, OverlapWithinExceedsOverlapAcross) {
  const World w = build_world(3);
  auto overlap = [](const std::vector<int>& a, const std::vector<int>& b) {
    int same = 0;
    for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
    return static_cast<double>(same) / static_cast<double>(a.size());
  };
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SubjectSet s = make_subject(w, seed), t = make_subject(w, seed + 100);
    std::vector<std::vector<int>> sc, tc;
    for (const auto& r : s.references) sc.push_back(quantize(r, w.codebook));
    for (const auto& r : t.references) tc.push_back(quantize(r, w.codebook));
    double within = 0.0, across = 0.0;
    int nw = 0, na = 0;
    for (std::size_t i = 0; i < sc.size(); ++i) {
      for (std::size_t j = i + 1; j < sc.size(); ++j, ++nw) within += overlap(sc[i], sc[j]);
      for (const auto& c : tc) {
        across += overlap(sc[i], c);
        ++na;
      }
    }
    EXPECT_GT(within / nw, across / na) << "seed " << seed;
  }
}

TEST(Style, SingleReference) {
  const World w = build_world(3);
  const StyleSet s = make_style(w, 5);
  EXPECT_EQ(s.reference.count(), kImageTokens);
  EXPECT_FALSE(s.style_name.empty());
}

TEST(Corpus, CoversEveryClass) {
  const World w = build_world(3);
  const auto corpus = make_pretrain_corpus(w, 3, 512);
  ASSERT_EQ(corpus.size(), 512u);
  std::vector<int> hist(kNumClasses, 0);
  for (const auto& ex : corpus) ++hist[static_cast<std::size_t>(ex.spec.class_index)];
  for (int h : hist) {
    EXPECT_GT(h, 0);
    EXPECT_LT(std::abs(h - 512.0 / kNumClasses) / (512.0 / kNumClasses), 0.2);
  }
}

TEST(Corpus, SinglePair) {
  const World w = build_world(3);
  EXPECT_EQ(make_pretrain_corpus(w, 3, 1).size(), 1u);
  EXPECT_THROW(make_pretrain_corpus(w, 3, 0), InvalidArgument);
}

TEST(Corpus, CaptionsNameTheClass) {
  const World w = build_world(3);
  for (const auto& ex : make_pretrain_corpus(w, 8, 64)) {
    const TokenId cls = w.classes[static_cast<std::size_t>(ex.spec.class_index)].token;
    EXPECT_NE(std::find(ex.prompt.begin(), ex.prompt.end(), cls), ex.prompt.end());
    EXPECT_EQ(quantize(ex.image, w.codebook), w.render_codes(ex.spec));
  }
}

TEST(Corpus, Deterministic) {
  const World w = build_world(3);
  const auto a = make_pretrain_corpus(w, 21, 32), b = make_pretrain_corpus(w, 21, 32);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].prompt, b[i].prompt);
    EXPECT_TRUE(a[i].image.patches == b[i].image.patches);
  }
}
