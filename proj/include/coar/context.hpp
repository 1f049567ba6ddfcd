#pragma once

#include "coar/backbone.hpp"
#include "coar/common.hpp"
#include "coar/sequences.hpp"
#include "coar/toyworld.hpp"

#include <cstdint>
#include <optional>
#include <span>

namespace coar {

enum class BankKind { kSubject, kStyle };

std::string_view bank_kind_name(BankKind k);

/// The only trainable state: one text token and one image token per layer for
/// the first `depth` layers.
struct ContextBank {
  BankKind kind = BankKind::kSubject;
  TokenId class_name = 0;
  Mat p_v;  // depth x D
  Mat p_i;  // depth x D
  std::optional<Mat> casr_anchor;  // frozen copy of the per-layer image statistics

  int depth() const noexcept { return static_cast<int>(p_v.rows()); }
  int dim() const noexcept { return static_cast<int>(p_v.cols()); }
  std::int64_t trainable_count() const noexcept {
    return static_cast<std::int64_t>(p_v.size() + p_i.size());
  }
};

/// Bank with both token sets drawn from N(0, 0.02^2); real initialization is
/// done by init_from_subject.
ContextBank new_bank(int depth, int dim, BankKind kind, TokenId class_name, std::uint64_t seed);

enum class TextInit { kClassWord, kRandomNormal };

/// p_I := image statistics (and casr anchor := copy); p_v := anchor-word
/// activations unless `text_init` is kRandomNormal (then p_v is left as drawn).
void init_from_subject(ContextBank& bank, const Mat& image_stats, const Mat& word_hidden,
                       TextInit text_init = TextInit::kClassWord);

/// Injection entries for one or two banks. With two banks the subject takes
/// ctx slot 0 and the style slot 1; a single bank always takes slot 0.
InjectionPlan make_plan(std::span<const ContextBank* const> banks, const TokenSequence& seq);
InjectionPlan make_plan(const ContextBank& bank, const TokenSequence& seq);

/// Mean layer-input activation over all image positions of all `images`, for
/// layers 1..depth, from the frozen model without injection.
Mat capture_image_stats(const BackboneParams& params, std::span<const TokenId> text,
                        std::span<const std::vector<TokenId>> images, int depth);

/// Per-layer subject statistics under the class prompt "a photo of a [Class]".
Mat capture_subject_stats(const BackboneParams& params, const SubjectSet& refs,
                          const Codebook& cb, int depth);

/// Layer-input activations (layers 1..depth) at `position` of an uninjected
/// forward over `seq`.
Mat capture_position_hidden(const BackboneParams& params, const TokenSequence& seq, int position,
                            int depth);

std::vector<TokenId> image_tokens_of(const Vocabulary& vocab, const PixelGrid& grid,
                                     const Codebook& cb);

}  // namespace coar
