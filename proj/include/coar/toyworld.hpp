#pragma once

#include "coar/common.hpp"
#include "coar/sequences.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace coar {

/// Fixed set of image codes. Row k of `centroids` is the patch vector of code k.
struct Codebook {
  int size = 0;
  int dim = 0;
  std::uint64_t seed = 0;
  Mat centroids;

  double min_distance() const;
  // Per-coordinate bound on generator noise. Chosen so that the worst-case
  // noise norm stays below half the closest centroid distance.
  double noise_amplitude() const;
};

Codebook build_codebook(int K, int P, std::uint64_t seed);

struct PixelGrid {
  int width = 0;
  int height = 0;
  Mat patches;  // (width*height) x P, row-major over (row, col)

  int count() const noexcept { return width * height; }
};

/// Nearest centroid per patch, ties to the lowest code. Returns codes in [0, K).
std::vector<int> quantize(const PixelGrid& grid, const Codebook& cb);
PixelGrid dequantize(std::span<const int> codes, const Codebook& cb, int width, int height);

// ---------------------------------------------------------------------------
// Procedural world: 8x8 scenes with one object per image.

inline constexpr int kGridSide = 8;
inline constexpr int kImageTokens = kGridSide * kGridSide;
inline constexpr int kObjectSide = 4;
inline constexpr int kNumClasses = 8;
inline constexpr int kNumColors = 24;
inline constexpr int kNumPatterns = 4;
inline constexpr int kNumScenes = 8;
inline constexpr int kWorldCodes = 2 * kNumScenes + 2 * kNumColors;  // 64
inline constexpr int kWorldPatchDim = 12;

struct ClassInfo {
  std::string name;
  TokenId token = 0;
  std::array<std::string, kObjectSide> shape;  // 'X' = object cell
};

/// Attributes that fully determine an image's codes.
struct ImageSpec {
  int class_index = 0;
  int color_a = 0;
  int color_b = 1;
  int pattern = 0;
  int scene = 0;
  int dx = 0;
  int dy = 0;
};

struct World {
  std::uint64_t seed = 0;
  Vocabulary vocab;
  Codebook codebook;
  std::vector<ClassInfo> classes;

  const ClassInfo& class_info(TokenId token) const;
  int class_index(TokenId token) const;

  // Codes of an image, without noise.
  std::vector<int> render_codes(const ImageSpec& spec) const;
  // Continuous patches: centroid of each code plus bounded uniform noise.
  PixelGrid render(const ImageSpec& spec, Rng& noise) const;
  std::vector<TokenId> to_tokens(std::span<const int> codes) const;
  std::vector<int> to_codes(std::span<const TokenId> tokens) const;

  // Best (class index, IoU) over all classes and translations, judged on the
  // object-code cells of a token grid. class index -1 when nothing matches.
  std::pair<int, double> classify(std::span<const TokenId> image_tokens) const;
};

World build_world(std::uint64_t seed);

nlohmann::json world_to_json(const World& w);
// Rebuilds the world from its description and checks the stored centroids
// are bit-identical to the regenerated ones.
World world_from_json(const nlohmann::json& j);

struct SubjectSet {
  TokenId class_name = 0;
  std::vector<PixelGrid> references;
  std::uint64_t seed = 0;
  ImageSpec identity;  // shared attributes; translation varies per reference
};

struct StyleSet {
  std::string style_name;
  TokenId depicted_class = 0;
  PixelGrid reference;
  ImageSpec identity;
};

SubjectSet make_subject(const World& world, std::uint64_t seed);
StyleSet make_style(const World& world, std::uint64_t seed);

struct CaptionedImage {
  std::vector<TokenId> prompt;  // text tokens
  PixelGrid image;
  ImageSpec spec;
};

/// The look a caption implies when it names only the class: fixed colours,
/// solid pattern, centred placement.
ImageSpec canonical_spec(int class_index);

/// Caption+image pairs with exactly balanced classes. Each attribute phrase
/// (colours, pattern, placement, scene) is kept with probability 1/2; a dropped
/// colour or pattern phrase means the canonical value, a dropped placement
/// phrase means canonical placement three times in four and uniform otherwise.
std::vector<CaptionedImage> make_pretrain_corpus(const World& world, std::uint64_t seed, int n);

/// Bare "a photo of a <class>" pairs, classes in rotation.
std::vector<CaptionedImage> make_class_corpus(const World& world, std::uint64_t seed, int n);

// Caption with every attribute stated.
std::vector<TokenId> full_caption(const World& world, const ImageSpec& spec);

}  // namespace coar
