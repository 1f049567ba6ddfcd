#pragma once

#include "coar/backbone.hpp"
#include "coar/context.hpp"
#include "coar/toyworld.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace coar {

struct ParamAudit {
  std::string method;
  std::int64_t count = 0;
  std::string formula;
  std::string reference;  // published figure for diffing; empty for toy rows
};

// 2 * N * D: one text and one image token per injected layer.
std::int64_t context_param_count(std::int64_t n_layers, std::int64_t dim);

// 8 * d * r per attention module (four projections, two rank-r factors each).
std::int64_t lora_param_estimate(std::int64_t d, std::int64_t rank, std::int64_t n_attention_modules);

/// Reference rows (7B-scale context bank, the two LoRA estimates and their sum)
/// followed by one row for a toy bank of the given shape when toy_depth > 0.
std::vector<ParamAudit> audit_table(int toy_depth = 0, int toy_dim = 0);

nlohmann::json to_json(const std::vector<ParamAudit>& rows);
std::string format_table(const std::vector<ParamAudit>& rows);

/// Mean per-position KL(zero-shot || injected) of the next-token distribution
/// over image positions of class sequences sampled from the frozen model.
/// Only the bank's p_I is injected. A bank with no layers yields 0.
double drift_kl(const BackboneParams& params, const ContextBank& bank,
                std::span<const std::string> class_prompts, TokenId class_name, int n_samples,
                std::uint64_t seed);

// Held-out class prompts: "a photo of a [Class] on the <scene>" for every scene word.
std::vector<std::string> held_out_class_prompts();

/// Mean last-block activation over the image positions of `image` under the
/// class prompt, without injection.
RowVec image_features(const BackboneParams& params, std::span<const TokenId> image,
                      TokenId class_name);

double feature_cosine(const RowVec& a, const RowVec& b);

/// Best cosine between the generated image's features and any reference's.
double fidelity_proxy(const BackboneParams& params, std::span<const TokenId> generated,
                      const SubjectSet& subject, const Codebook& cb);

/// Fraction of positions where two equal-length token lists agree.
double positional_match(std::span<const TokenId> a, std::span<const TokenId> b);

/// Highest positional match between `generated` and any reference's tokens.
double best_reference_match(std::span<const TokenId> generated, const SubjectSet& subject,
                            const Vocabulary& vocab, const Codebook& cb);

}  // namespace coar
