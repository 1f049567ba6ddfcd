#include "coar/toyworld.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <limits>

namespace coar {

namespace {

constexpr std::array<const char*, kNumClasses> kClassNames = {
    "dog", "cat", "vase", "backpack", "clock", "teapot", "robot", "boot"};

constexpr std::array<std::array<const char*, kObjectSide>, kNumClasses> kShapes = {{
    {"X..X", "XXXX", "XXXX", "X..X"},  // dog
    {".XX.", "XXXX", "XXXX", ".XX."},  // cat
    {".XX.", ".XX.", "XXXX", "XXXX"},  // vase
    {"XXXX", "X..X", "XXXX", "XXXX"},  // backpack
    {"XXXX", "X..X", "X..X", "XXXX"},  // clock
    {"..X.", "XXXX", ".XXX", ".XXX"},  // teapot
    {"XXXX", ".XX.", "XXXX", "X..X"},  // robot
    {"XX..", "XX..", "XXXX", "XXXX"},  // boot
}};

// Lexicon offsets (see sequences.cpp).
constexpr int kFirstColorWord = 15;
constexpr int kFirstPatternWord = kFirstColorWord + kNumColors;
constexpr int kFirstSceneWord = kFirstPatternWord + kNumPatterns;
constexpr int kFirstRowWord = kFirstSceneWord + kNumScenes;

constexpr int kFirstObjectCode = 2 * kNumScenes;
constexpr int kMaxShift = kGridSide - kObjectSide;  // translations 0..4

int scene_horizon(int scene) { return 3 + scene % 3; }

bool in_shape(int cls, int r, int c) {
  return kShapes[static_cast<std::size_t>(cls)][static_cast<std::size_t>(r)][c] == 'X';
}

bool pattern_uses_b(int pattern, int r, int c) {
  switch (pattern) {
    case 0: return false;                      // solid
    case 1: return r % 2 == 1;                 // striped
    case 2: return (r + c) % 2 == 1;           // checkered
    default: return !(r == 0 || r == kObjectSide - 1 || c == 0 || c == kObjectSide - 1);
  }
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

PixelGrid render_with(const Codebook& cb, std::span<const int> codes, Rng* noise) {
  PixelGrid g;
  g.width = kGridSide;
  g.height = kGridSide;
  g.patches.resize(static_cast<Eigen::Index>(codes.size()), cb.dim);
  const double amp = cb.noise_amplitude();
  for (std::size_t i = 0; i < codes.size(); ++i) {
    for (int d = 0; d < cb.dim; ++d) {
      double v = cb.centroids(codes[i], d);
      if (noise) v += noise->uniform(-amp, amp);
      g.patches(static_cast<Eigen::Index>(i), d) = v;
    }
  }
  return g;
}

}  // namespace

double Codebook::min_distance() const {
  double best = std::numeric_limits<double>::infinity();
  for (int a = 0; a < size; ++a) {
    for (int b = a + 1; b < size; ++b) {
      best = std::min(best, (centroids.row(a) - centroids.row(b)).norm());
    }
  }
  return best;
}

double Codebook::noise_amplitude() const {
  return std::min(0.03, 0.9 * min_distance() / (2.0 * std::sqrt(static_cast<double>(dim))));
}

Codebook build_codebook(int K, int P, std::uint64_t seed) {
  require(K >= 2, "codebook needs K >= 2");
  require(P >= 1, "codebook needs P >= 1");
  Codebook cb;
  cb.size = K;
  cb.dim = P;
  cb.seed = seed;
  cb.centroids.resize(K, P);

  // Rejection sampling in [0.1, 0.9]^P; the separation target shrinks until
  // K points fit.
  double target = 0.3;
  Rng rng(derive_seed(seed, "codebook"));
  for (;;) {
    int placed = 0;
    int failures = 0;
    while (placed < K && failures < 2000) {
      RowVec cand(P);
      for (int d = 0; d < P; ++d) cand(d) = rng.uniform(0.1, 0.9);
      bool ok = true;
      for (int k = 0; k < placed && ok; ++k) {
        ok = (cb.centroids.row(k) - cand).norm() >= target;
      }
      if (ok) {
        cb.centroids.row(placed++) = cand;
        failures = 0;
      } else {
        ++failures;
      }
    }
    if (placed == K) break;
    target *= 0.7;
  }
  return cb;
}

std::vector<int> quantize(const PixelGrid& grid, const Codebook& cb) {
  require(grid.patches.cols() == cb.dim, "patch dimension does not match codebook");
  std::vector<int> out(static_cast<std::size_t>(grid.patches.rows()));
  for (Eigen::Index i = 0; i < grid.patches.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < cb.size; ++k) {
      const double d = (cb.centroids.row(k) - grid.patches.row(i)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

PixelGrid dequantize(std::span<const int> codes, const Codebook& cb, int width, int height) {
  require(static_cast<int>(codes.size()) == width * height, "code count != width*height");
  for (int c : codes) require(c >= 0 && c < cb.size, "code out of range");
  PixelGrid g = render_with(cb, codes, nullptr);
  g.width = width;
  g.height = height;
  return g;
}

const ClassInfo& World::class_info(TokenId token) const {
  return classes[static_cast<std::size_t>(class_index(token))];
}

int World::class_index(TokenId token) const {
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i].token == token) return static_cast<int>(i);
  }
  throw InvalidArgument("token " + std::to_string(token) + " is not a class name");
}

std::vector<int> World::render_codes(const ImageSpec& s) const {
  require(s.class_index >= 0 && s.class_index < kNumClasses, "class index out of range");
  require(s.color_a >= 0 && s.color_a < kNumColors && s.color_b >= 0 && s.color_b < kNumColors,
          "colour out of range");
  require(s.pattern >= 0 && s.pattern < kNumPatterns, "pattern out of range");
  require(s.scene >= 0 && s.scene < kNumScenes, "scene out of range");
  require(s.dx >= 0 && s.dx <= kMaxShift && s.dy >= 0 && s.dy <= kMaxShift,
          "translation out of range");
  std::vector<int> codes(kImageTokens);
  const int horizon = scene_horizon(s.scene);
  for (int r = 0; r < kGridSide; ++r) {
    for (int c = 0; c < kGridSide; ++c) {
      int code = 2 * s.scene + (r >= horizon ? 1 : 0);
      const int orow = r - s.dy;
      const int ocol = c - s.dx;
      if (orow >= 0 && orow < kObjectSide && ocol >= 0 && ocol < kObjectSide &&
          in_shape(s.class_index, orow, ocol)) {
        const int color = pattern_uses_b(s.pattern, orow, ocol) ? s.color_b : s.color_a;
        code = kFirstObjectCode + 2 * color + (orow >= kObjectSide / 2 ? 1 : 0);
      }
      codes[static_cast<std::size_t>(r * kGridSide + c)] = code;
    }
  }
  return codes;
}

PixelGrid World::render(const ImageSpec& spec, Rng& noise) const {
  const auto codes = render_codes(spec);
  return render_with(codebook, codes, &noise);
}

std::vector<TokenId> World::to_tokens(std::span<const int> codes) const {
  std::vector<TokenId> out;
  out.reserve(codes.size());
  for (int c : codes) out.push_back(vocab.image_token(c));
  return out;
}

std::vector<int> World::to_codes(std::span<const TokenId> tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) out.push_back(vocab.code_of(t));
  return out;
}

std::pair<int, double> World::classify(std::span<const TokenId> image_tokens) const {
  require(static_cast<int>(image_tokens.size()) == kImageTokens, "expected an 8x8 token grid");
  std::array<bool, kImageTokens> obj{};
  for (int i = 0; i < kImageTokens; ++i) {
    obj[static_cast<std::size_t>(i)] =
        vocab.code_of(image_tokens[static_cast<std::size_t>(i)]) >= kFirstObjectCode;
  }
  int best_cls = -1;
  double best_iou = 0.0;
  for (int cls = 0; cls < kNumClasses; ++cls) {
    for (int dy = 0; dy <= kMaxShift; ++dy) {
      for (int dx = 0; dx <= kMaxShift; ++dx) {
        int inter = 0, uni = 0;
        for (int r = 0; r < kGridSide; ++r) {
          for (int c = 0; c < kGridSide; ++c) {
            const int orow = r - dy, ocol = c - dx;
            const bool s = orow >= 0 && orow < kObjectSide && ocol >= 0 && ocol < kObjectSide &&
                           in_shape(cls, orow, ocol);
            const bool o = obj[static_cast<std::size_t>(r * kGridSide + c)];
            inter += (s && o) ? 1 : 0;
            uni += (s || o) ? 1 : 0;
          }
        }
        const double iou = uni ? static_cast<double>(inter) / uni : 0.0;
        if (iou > best_iou) {
          best_iou = iou;
          best_cls = cls;
        }
      }
    }
  }
  return {best_cls, best_iou};
}

World build_world(std::uint64_t seed) {
  World w;
  w.seed = seed;
  w.vocab = Vocabulary(64, kWorldCodes);
  w.codebook = build_codebook(kWorldCodes, kWorldPatchDim, derive_seed(seed, "world"));
  for (int i = 0; i < kNumClasses; ++i) {
    ClassInfo ci;
    ci.name = kClassNames[static_cast<std::size_t>(i)];
    ci.token = w.vocab.word(ci.name);
    for (int r = 0; r < kObjectSide; ++r) {
      ci.shape[static_cast<std::size_t>(r)] = kShapes[static_cast<std::size_t>(i)][static_cast<std::size_t>(r)];
    }
    w.classes.push_back(std::move(ci));
  }
  return w;
}

nlohmann::json world_to_json(const World& w) {
  nlohmann::json j;
  j["seed"] = w.seed;
  j["K"] = w.codebook.size;
  j["P"] = w.codebook.dim;
  j["codebook_seed"] = w.codebook.seed;
  auto cents = nlohmann::json::array();
  for (int k = 0; k < w.codebook.size; ++k) {
    for (int d = 0; d < w.codebook.dim; ++d) cents.push_back(format_double(w.codebook.centroids(k, d)));
  }
  j["centroids"] = std::move(cents);
  auto table = nlohmann::json::array();
  for (const auto& c : w.classes) {
    table.push_back({{"name", c.name}, {"token", c.token}, {"shape", c.shape}});
  }
  j["classes"] = std::move(table);
  return j;
}

World world_from_json(const nlohmann::json& j) {
  World w = build_world(j.at("seed").get<std::uint64_t>());
  require(j.at("K").get<int>() == w.codebook.size && j.at("P").get<int>() == w.codebook.dim,
          "world description has unexpected codebook shape");
  const auto& cents = j.at("centroids");
  require(cents.size() == static_cast<std::size_t>(w.codebook.size * w.codebook.dim),
          "centroid count mismatch");
  for (int k = 0; k < w.codebook.size; ++k) {
    for (int d = 0; d < w.codebook.dim; ++d) {
      const std::string s = cents[static_cast<std::size_t>(k * w.codebook.dim + d)].get<std::string>();
      const double v = std::strtod(s.c_str(), nullptr);
      require(v == w.codebook.centroids(k, d), "stored centroids differ from regenerated codebook");
    }
  }
  return w;
}

SubjectSet make_subject(const World& world, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "subject"));
  ImageSpec id;
  id.class_index = rng.below(kNumClasses);
  id.color_a = rng.below(kNumColors);
  id.color_b = (id.color_a + 1 + rng.below(kNumColors - 1)) % kNumColors;
  id.pattern = rng.below(kNumPatterns);
  id.scene = rng.below(kNumScenes);
  id.dx = rng.below(kMaxShift);  // leaves room for the +1 jitter
  id.dy = rng.below(kMaxShift + 1);
  const int n_refs = 3 + Rng(derive_seed(seed, "subject-count")).below(3);

  SubjectSet s;
  s.seed = seed;
  s.identity = id;
  s.class_name = world.classes[static_cast<std::size_t>(id.class_index)].token;
  Rng noise(derive_seed(seed, "subject-noise"));
  for (int j = 0; j < n_refs; ++j) {
    ImageSpec ref = id;
    ref.dx = id.dx + (j % 2);
    s.references.push_back(world.render(ref, noise));
  }
  return s;
}

StyleSet make_style(const World& world, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "style"));
  ImageSpec id;
  id.class_index = rng.below(kNumClasses);
  id.color_a = rng.below(kNumColors);
  id.color_b = (id.color_a + 1 + rng.below(kNumColors - 1)) % kNumColors;
  id.pattern = rng.below(kNumPatterns);
  id.scene = rng.below(kNumScenes);
  id.dx = rng.below(kMaxShift + 1);
  id.dy = rng.below(kMaxShift + 1);
  StyleSet s;
  s.style_name = "style-" + std::to_string(seed);
  s.identity = id;
  s.depicted_class = world.classes[static_cast<std::size_t>(id.class_index)].token;
  Rng noise(derive_seed(seed, "style-noise"));
  s.reference = world.render(id, noise);
  return s;
}

namespace {

std::vector<TokenId> caption(const World& w, const ImageSpec& s, bool colors, bool pattern,
                             bool placement, bool scene) {
  const auto& v = w.vocab;
  std::vector<TokenId> t = {v.word("a"), v.word("photo"), v.word("of"), v.word("a")};
  if (colors) {
    t.push_back(kFirstColorWord + s.color_a);
    t.push_back(kFirstColorWord + s.color_b);
  }
  if (pattern) t.push_back(kFirstPatternWord + s.pattern);
  t.push_back(w.classes[static_cast<std::size_t>(s.class_index)].token);
  if (placement) {
    t.push_back(kFirstRowWord + s.dy);
    t.push_back(kFirstRowWord + kMaxShift + 1 + s.dx);
  }
  if (scene) {
    t.push_back(v.word("on"));
    t.push_back(v.word("the"));
    t.push_back(kFirstSceneWord + s.scene);
  }
  return t;
}

}  // namespace

std::vector<TokenId> full_caption(const World& world, const ImageSpec& spec) {
  return caption(world, spec, true, true, true, true);
}

ImageSpec canonical_spec(int class_index) {
  require(class_index >= 0 && class_index < kNumClasses, "class index out of range");
  ImageSpec s;
  s.class_index = class_index;
  s.color_a = 3 * class_index;
  s.color_b = 3 * class_index + 1;
  s.pattern = 0;
  s.dx = kMaxShift / 2;
  s.dy = kMaxShift / 2;
  return s;
}

namespace {

// Unstated attributes fall back to the class's canonical look; unstated
// placement is canonical three times in four.
CaptionedImage sample_captioned(const World& world, Rng& rng, Rng& noise, int class_index,
                                bool colors, bool pattern, bool placement, bool scene) {
  ImageSpec s = canonical_spec(class_index);
  const int color_a = rng.below(kNumColors);
  const int color_b = (color_a + 1 + rng.below(kNumColors - 1)) % kNumColors;
  const int pat = rng.below(kNumPatterns);
  s.scene = rng.below(kNumScenes);
  const bool canonical_place = rng.uniform() < 0.75;
  const int dx = rng.below(kMaxShift + 1);
  const int dy = rng.below(kMaxShift + 1);
  if (colors) {
    s.color_a = color_a;
    s.color_b = color_b;
  }
  if (pattern) s.pattern = pat;
  if (placement || !canonical_place) {
    s.dx = dx;
    s.dy = dy;
  }
  return {caption(world, s, colors, pattern, placement, scene), world.render(s, noise), s};
}

}  // namespace

std::vector<CaptionedImage> make_pretrain_corpus(const World& world, std::uint64_t seed, int n) {
  require(n >= 1, "corpus size must be >= 1");
  Rng rng(derive_seed(seed, "corpus"));
  Rng noise(derive_seed(seed, "corpus-noise"));
  const int offset = rng.below(kNumClasses);
  std::vector<CaptionedImage> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const bool colors = rng.uniform() < 0.5;
    const bool pattern = rng.uniform() < 0.5;
    const bool placement = rng.uniform() < 0.5;
    const bool scene = rng.uniform() < 0.5;
    out.push_back(sample_captioned(world, rng, noise, (i + offset) % kNumClasses, colors, pattern,
                                   placement, scene));
  }
  return out;
}

std::vector<CaptionedImage> make_class_corpus(const World& world, std::uint64_t seed, int n) {
  require(n >= 1, "corpus size must be >= 1");
  Rng rng(derive_seed(seed, "class-corpus"));
  Rng noise(derive_seed(seed, "class-corpus-noise"));
  std::vector<CaptionedImage> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    out.push_back(sample_captioned(world, rng, noise, i % kNumClasses, false, false, false, false));
  }
  return out;
}

}  // namespace coar
