#pragma once

#include "coar/common.hpp"
#include "coar/sequences.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace coar {

struct BackboneConfig {
  int text_size = 64;
  int image_size = 64;
  int d_model = 64;
  int n_layers = 12;
  int n_heads = 4;
  int mlp_mult = 4;
  int max_seq = 100;
  // Image tokens take position rows image_pos_offset + t (t = index within the
  // image span), so a grid cell always sees the same position embedding.
  int image_pos_offset = 32;
  double rms_eps = 1e-5;

  Vocabulary vocab() const { return Vocabulary(text_size, image_size); }
  int vocab_size() const { return text_size + image_size + Vocabulary::kNumSpecials; }
  int head_dim() const { return d_model / n_heads; }
  bool operator==(const BackboneConfig&) const = default;
};

struct LayerParams {
  Mat attn_gain;  // 1 x D
  Mat wq, wk, wv, wo;  // D x D, applied as x * W
  Mat mlp_gain;   // 1 x D
  Mat w1;         // D x 4D
  Mat w2;         // 4D x D
};

/// Decoder-only transformer weights: pre-RMSNorm blocks, learned absolute
/// positions, output head tied to the token embedding.
struct BackboneParams {
  BackboneConfig config;
  Mat embed;       // |V| x D; rows of reserved tokens are kept at zero
  Mat pos_embed;   // max_seq x D
  std::vector<LayerParams> layers;
  Mat final_gain;  // 1 x D
  bool frozen = false;

  // Visits every tensor in a fixed order (the checkpoint order).
  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f(std::string("embed"), self.embed);
    f(std::string("pos_embed"), self.pos_embed);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      f(p + "attn_gain", l.attn_gain);
      f(p + "wq", l.wq);
      f(p + "wk", l.wk);
      f(p + "wv", l.wv);
      f(p + "wo", l.wo);
      f(p + "mlp_gain", l.mlp_gain);
      f(p + "w1", l.w1);
      f(p + "w2", l.w2);
    }
    f(std::string("final_gain"), self.final_gain);
  }
  template <class F> void for_each(F&& f) { visit(*this, std::forward<F>(f)); }
  template <class F> void for_each(F&& f) const { visit(*this, std::forward<F>(f)); }

  std::size_t parameter_count() const;
  bool all_finite() const;
};

BackboneParams init_backbone(const BackboneConfig& cfg, std::uint64_t seed);
// Same shapes, all zeros; used as a gradient accumulator.
BackboneParams zeros_like(const BackboneParams& p);

// Stable 64-bit hash over the configuration and every weight's bytes.
std::uint64_t params_hash(const BackboneParams& p);

enum class InjectionSlot { kText, kImage };

struct InjectionEntry {
  int layer = 1;     // 1-based: the entry overwrites the input row of this layer
  int position = 0;
  Vec value;
  int bank = 0;      // index of the source bank in make_plan's list
  InjectionSlot slot = InjectionSlot::kImage;
};

struct InjectionPlan {
  std::vector<InjectionEntry> entries;
  bool empty() const noexcept { return entries.empty(); }
};

enum class MaskKind { kCausal, kCausalIdentity };

struct AttentionMask {
  int size = 0;
  MaskKind kind = MaskKind::kCausal;
  std::vector<std::uint8_t> allowed;  // row-major size x size

  static AttentionMask causal(int size);
  bool at(int r, int c) const noexcept {
    return allowed[static_cast<std::size_t>(r) * static_cast<std::size_t>(size) +
                   static_cast<std::size_t>(c)] != 0;
  }
  void set(int r, int c, bool v) noexcept {
    allowed[static_cast<std::size_t>(r) * static_cast<std::size_t>(size) +
            static_cast<std::size_t>(c)] = v ? 1 : 0;
  }
  // Top-left n x n block; still a valid mask for the length-n prefix.
  AttentionMask prefix(int n) const;
};

/// Causal mask with subject-context <-> style-context attention removed.
/// Subject group: v_positions plus ctx slot 0; style group: s_positions plus
/// ctx slot 1.
AttentionMask build_identity_mask(const TokenSequence& seq);

struct ForwardOptions {
  bool keep_tape = false;        // needed for backward
  bool capture_attention = false;
};

struct LayerTape {
  Mat x;        // input after injection
  Vec inv1;     // attention rmsnorm inverse scale
  Mat a;        // normalized input to attention
  Mat q, k, v;
  std::vector<Mat> probs;  // per head, S x S
  Mat o;        // concatenated head outputs
  Mat h;        // residual after attention
  Vec inv2;
  Mat b;        // normalized input to mlp
  Mat z;        // pre-activation
  Mat g;        // gelu(z)
  Mat tanh_z;   // inner tanh of the gelu approximation
};

struct ForwardResult {
  Mat logits;                    // S x |V|
  std::vector<Mat> layer_inputs; // n_layers entries, captured before injection
  Mat final_hidden;              // output of the last block (before final norm)
  std::vector<std::vector<Mat>> attention;  // [layer][head] when captured

  // backward state
  std::vector<TokenId> ids;
  std::vector<LayerTape> tape;
  Vec inv_final;
  Mat normed_final;
  std::vector<std::pair<int, int>> injected;  // (layer, position) per plan entry
};

/// Position-embedding row of every token: absolute index before the image span
/// (the span starts after BOI and any CTX_IMG slots), image_pos_offset + t from
/// there on. Sequences without BOI use absolute indices throughout.
std::vector<int> position_ids(const BackboneConfig& cfg, std::span<const TokenId> ids);

/// Runs the frozen model. Plan entries overwrite the hidden row at their
/// position at the input of their layer. Reserved tokens embed to the zero
/// vector and receive no position embedding.
ForwardResult forward(const BackboneParams& params, std::span<const TokenId> ids,
                      const InjectionPlan& plan, const AttentionMask& mask,
                      const ForwardOptions& opts = {});

inline ForwardResult forward(const BackboneParams& params, const TokenSequence& seq,
                             const InjectionPlan& plan, const AttentionMask& mask,
                             const ForwardOptions& opts = {}) {
  return forward(params, seq.ids, plan, mask, opts);
}

/// Backpropagates d(loss)/d(logits). Returns one gradient per plan entry (in
/// plan order). When `weight_grads` is non-null, parameter gradients are
/// accumulated into it as well.
std::vector<Vec> backward(const BackboneParams& params, const ForwardResult& fwd,
                          const Mat& dlogits, BackboneParams* weight_grads = nullptr);

}  // namespace coar
