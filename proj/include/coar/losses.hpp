#pragma once

#include "coar/backbone.hpp"
#include "coar/context.hpp"
#include "coar/sequences.hpp"

#include <nlohmann/json.hpp>

#include <span>
#include <vector>

namespace coar {

struct LossConfig {
  double alpha = 1e-2;
  double beta = 5e-4;
  double lambda1 = 0.5;
  double lambda2 = 0.5;
};

struct LossReport {
  double ntp = 0.0;
  double dpp_ntp = 0.0;
  double dpp_kl = 0.0;
  double casr = 0.0;
  double total = 0.0;
  int step = 0;
};

nlohmann::json to_json(const LossReport& r);

/// Rows of `logits` that predict the image tokens of `seq` (row t-1 for
/// image position t), in image order.
Mat image_prediction_rows(const Mat& logits, const TokenSequence& seq);

/// Mean cross-entropy over labelled positions. If `dlogits` is given it
/// receives d(loss)/d(logits) with the same shape as `logits`.
double ntp_loss(const Mat& logits, const TokenSequence& seq, Mat* dlogits = nullptr);

/// Mean over rows of KL(softmax(ref) || softmax(q)). The reference is treated
/// as a constant; `dlogits_q` receives the gradient w.r.t. `logits_q`.
double kl_divergence(const Mat& logits_ref, const Mat& logits_q, Mat* dlogits_q = nullptr);

/// Gradient buffers matching a bank's trainable tensors.
struct BankGrad {
  Mat p_v;
  Mat p_i;
  static BankGrad zeros_for(const ContextBank& b) {
    return {Mat::Zero(b.depth(), b.dim()), Mat::Zero(b.depth(), b.dim())};
  }
  BankGrad& operator+=(const BankGrad& o) {
    p_v += o.p_v;
    p_i += o.p_i;
    return *this;
  }
};

/// One class-prior image in its two layouts: without a ctx slot (zero-shot
/// pass) and with one ctx slot (injected prior pass).
struct ClassPrior {
  TokenSequence zero_shot;
  TokenSequence prior;
};

ClassPrior make_class_prior(const Vocabulary& vocab, std::span<const TokenId> class_prompt,
                            std::span<const TokenId> image);

struct DppResult {
  double value = 0.0;  // lambda1 * ntp + lambda2 * kl
  double ntp = 0.0;    // batch mean
  double kl = 0.0;     // batch mean
  BankGrad grad;
};

/// Zero-shot image-prediction rows for every prior; constant for a frozen
/// backbone, so callers may compute them once.
std::vector<Mat> zero_shot_rows(const BackboneParams& params, std::span<const ClassPrior> batch);

/// Dual-pass prior preservation. Only p_I is injected on the prior pass.
/// When `cached_zero_shot` is null the zero-shot pass is recomputed.
DppResult dpp_loss(const BackboneParams& params, const ContextBank& bank,
                   std::span<const ClassPrior> batch, const LossConfig& cfg,
                   const std::vector<Mat>* cached_zero_shot = nullptr, bool want_grad = true);

/// (1/N) sum_i ||p_I[i] - anchor[i]||^2.
double casr_loss(const ContextBank& bank, BankGrad* grad = nullptr);

struct Objective {
  LossReport report;
  BankGrad grad;
};

struct NtpResult {
  double value = 0.0;
  BankGrad grad;
};

/// NTP of one subject sequence with the bank's full injection plan.
NtpResult subject_ntp(const BackboneParams& params, const ContextBank& bank,
                      const TokenSequence& seq, bool want_grad = true);

/// total = ntp + alpha * dpp + beta * casr, with gradients over the bank only.
/// DPP is skipped (reported as 0) when alpha is 0 or the class batch is empty.
Objective total_objective(const BackboneParams& params, const ContextBank& bank,
                          const TokenSequence& subject_seq, std::span<const ClassPrior> class_batch,
                          const LossConfig& cfg,
                          const std::vector<Mat>* cached_zero_shot = nullptr,
                          bool want_grad = true);

}  // namespace coar
