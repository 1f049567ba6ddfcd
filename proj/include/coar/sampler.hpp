#pragma once

#include "coar/backbone.hpp"
#include "coar/context.hpp"
#include "coar/sequences.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace coar {

enum class DecodeMode { kGreedy, kTopK };

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kTopK;
  int k = 20;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int max_tokens = 64;

  void validate() const;
};

nlohmann::json to_json(const DecodeConfig& dc);

/// Decoding setup: the fully laid-out sequence (image span pre-filled with a
/// dummy code), its injection plan and its attention mask.
struct DecodeInputs {
  TokenSequence layout;
  InjectionPlan plan;
  AttentionMask mask;
};

/// Autoregressive image decoding over `in.layout`'s prefix. Only image ids are
/// eligible. Returns exactly dc.max_tokens image token ids.
std::vector<TokenId> decode_image(const BackboneParams& params, const DecodeInputs& in,
                                  const DecodeConfig& dc);

DecodeInputs prepare_generation(const BackboneParams& params,
                                std::span<const ContextBank* const> banks,
                                std::string_view prompt, TokenId class_name, int n_image_tokens,
                                MaskKind mask_kind = MaskKind::kCausal);

/// Image tokens for `prompt` with the given banks injected. Bank kinds must
/// match the prompt's placeholders ([V] <-> subject, [S] <-> style).
std::vector<TokenId> generate(const BackboneParams& params,
                              std::span<const ContextBank* const> banks, std::string_view prompt,
                              TokenId class_name, const DecodeConfig& dc,
                              MaskKind mask_kind = MaskKind::kCausal);

struct ComposeResult {
  std::vector<TokenId> tokens;
  DecodeInputs inputs;  // layout, plan and identity mask used for decoding
};

/// Training-free subject+style composition under the identity mask. Never
/// modifies its inputs.
ComposeResult compose(const BackboneParams& params, const ContextBank& subject_bank,
                      const ContextBank& style_bank, std::string_view prompt,
                      const DecodeConfig& dc);

/// Binary PPM (P6) of a dequantized grid; 2x2 RGB sub-pixels per patch, each
/// scaled up by `scale`.
void write_ppm(const std::filesystem::path& path, const Mat& patches, int width, int height,
               int scale = 8);

}  // namespace coar
