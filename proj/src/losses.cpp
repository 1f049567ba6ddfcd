#include "coar/losses.hpp"

#include <limits>

namespace coar {

namespace {

// log-sum-exp of one row; -inf entries contribute nothing.
double row_lse(const Eigen::Ref<const RowVec>& row) {
  const double m = row.maxCoeff();
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (Eigen::Index v = 0; v < row.size(); ++v) s += std::exp(row(v) - m);
  return m + std::log(s);
}

void add_entry_grads(const InjectionPlan& plan, const std::vector<Vec>& entry_grads,
                     BankGrad& grad, double scale = 1.0) {
  for (std::size_t e = 0; e < plan.entries.size(); ++e) {
    const auto& en = plan.entries[e];
    if (entry_grads[e].size() == 0) continue;
    Mat& target = en.slot == InjectionSlot::kText ? grad.p_v : grad.p_i;
    target.row(en.layer - 1) += scale * entry_grads[e].transpose();
  }
}

}  // namespace

nlohmann::json to_json(const LossReport& r) {
  return {{"step", r.step},       {"ntp", r.ntp},   {"dpp_ntp", r.dpp_ntp},
          {"dpp_kl", r.dpp_kl},   {"casr", r.casr}, {"total", r.total}};
}

Mat image_prediction_rows(const Mat& logits, const TokenSequence& seq) {
  require(logits.rows() == seq.size(), "logits rows do not match sequence length");
  require(seq.image_begin >= 1, "image span must not start the sequence");
  return logits.middleRows(seq.image_begin - 1, seq.image_length());
}

double ntp_loss(const Mat& logits, const TokenSequence& seq, Mat* dlogits) {
  require(logits.rows() == seq.size(), "logits rows do not match sequence length");
  int count = 0;
  for (int t = 1; t < seq.size(); ++t) count += seq.labels_mask[static_cast<std::size_t>(t)] ? 1 : 0;
  require(count > 0, "sequence has no labelled positions");
  if (dlogits) *dlogits = Mat::Zero(logits.rows(), logits.cols());

  double total = 0.0;
  for (int t = 1; t < seq.size(); ++t) {
    if (!seq.labels_mask[static_cast<std::size_t>(t)]) continue;
    const auto row = logits.row(t - 1);
    const double lse = row_lse(row);
    const TokenId target = seq.ids[static_cast<std::size_t>(t)];
    total += lse - row(target);
    if (dlogits) {
      for (Eigen::Index v = 0; v < row.size(); ++v) {
        (*dlogits)(t - 1, v) = std::exp(row(v) - lse) / count;
      }
      (*dlogits)(t - 1, target) -= 1.0 / count;
    }
  }
  return total / count;
}

double kl_divergence(const Mat& logits_ref, const Mat& logits_q, Mat* dlogits_q) {
  require(logits_ref.rows() == logits_q.rows() && logits_ref.cols() == logits_q.cols(),
          "KL operands have different shapes");
  require(logits_ref.rows() > 0, "KL over zero rows");
  const auto rows = logits_ref.rows();
  if (dlogits_q) *dlogits_q = Mat::Zero(rows, logits_q.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double lse_p = row_lse(logits_ref.row(r));
    const double lse_q = row_lse(logits_q.row(r));
    double kl = 0.0;
    for (Eigen::Index v = 0; v < logits_ref.cols(); ++v) {
      const double logp = logits_ref(r, v) - lse_p;
      const double p = std::exp(logp);
      const double logq = logits_q(r, v) - lse_q;
      if (p > 0.0) kl += p * (logp - logq);
      if (dlogits_q) (*dlogits_q)(r, v) = (std::exp(logq) - p) / static_cast<double>(rows);
    }
    total += kl;
  }
  return total / static_cast<double>(rows);
}

ClassPrior make_class_prior(const Vocabulary& vocab, std::span<const TokenId> class_prompt,
                            std::span<const TokenId> image) {
  return {assemble(vocab, class_prompt, image, 0), assemble(vocab, class_prompt, image, 1)};
}

std::vector<Mat> zero_shot_rows(const BackboneParams& params, std::span<const ClassPrior> batch) {
  std::vector<Mat> out;
  out.reserve(batch.size());
  for (const auto& cp : batch) {
    const auto fwd = forward(params, cp.zero_shot, {}, AttentionMask::causal(cp.zero_shot.size()));
    out.push_back(image_prediction_rows(fwd.logits, cp.zero_shot));
  }
  return out;
}

DppResult dpp_loss(const BackboneParams& params, const ContextBank& bank,
                   std::span<const ClassPrior> batch, const LossConfig& cfg,
                   const std::vector<Mat>* cached_zero_shot, bool want_grad) {
  require(!batch.empty(), "empty class-prior batch");
  require(!cached_zero_shot || cached_zero_shot->size() == batch.size(),
          "cached zero-shot rows do not match batch");
  DppResult res;
  res.grad = BankGrad::zeros_for(bank);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const ClassPrior& cp = batch[i];
    Mat zs;
    if (cached_zero_shot) {
      zs = (*cached_zero_shot)[i];
    } else {
      const auto zfwd = forward(params, cp.zero_shot, {}, AttentionMask::causal(cp.zero_shot.size()));
      zs = image_prediction_rows(zfwd.logits, cp.zero_shot);
    }
    const InjectionPlan plan = make_plan(bank, cp.prior);
    const auto fwd = forward(params, cp.prior, plan, AttentionMask::causal(cp.prior.size()),
                             {.keep_tape = want_grad});
    Mat d_ntp, d_kl_rows;
    const double ntp = ntp_loss(fwd.logits, cp.prior, want_grad ? &d_ntp : nullptr);
    const Mat prior_rows = image_prediction_rows(fwd.logits, cp.prior);
    const double kl = kl_divergence(zs, prior_rows, want_grad ? &d_kl_rows : nullptr);
    res.ntp += ntp * inv_b;
    res.kl += kl * inv_b;
    if (want_grad) {
      Mat dlogits = cfg.lambda1 * d_ntp;
      dlogits.middleRows(cp.prior.image_begin - 1, cp.prior.image_length()) += cfg.lambda2 * d_kl_rows;
      dlogits *= inv_b;
      add_entry_grads(plan, backward(params, fwd, dlogits), res.grad);
    }
  }
  res.value = cfg.lambda1 * res.ntp + cfg.lambda2 * res.kl;
  return res;
}

double casr_loss(const ContextBank& bank, BankGrad* grad) {
  require(bank.casr_anchor.has_value(), "bank has no CASR anchor");
  const Mat diff = bank.p_i - *bank.casr_anchor;
  const double n = static_cast<double>(bank.depth());
  if (grad) grad->p_i += (2.0 / n) * diff;
  return diff.squaredNorm() / n;
}

NtpResult subject_ntp(const BackboneParams& params, const ContextBank& bank,
                      const TokenSequence& seq, bool want_grad) {
  NtpResult res;
  res.grad = BankGrad::zeros_for(bank);
  const InjectionPlan plan = make_plan(bank, seq);
  const auto fwd = forward(params, seq, plan, AttentionMask::causal(seq.size()), {.keep_tape = want_grad});
  Mat dlogits;
  res.value = ntp_loss(fwd.logits, seq, want_grad ? &dlogits : nullptr);
  if (want_grad) add_entry_grads(plan, backward(params, fwd, dlogits), res.grad);
  return res;
}

Objective total_objective(const BackboneParams& params, const ContextBank& bank,
                          const TokenSequence& subject_seq, std::span<const ClassPrior> class_batch,
                          const LossConfig& cfg, const std::vector<Mat>* cached_zero_shot,
                          bool want_grad) {
  Objective obj;
  NtpResult ntp = subject_ntp(params, bank, subject_seq, want_grad);
  obj.report.ntp = ntp.value;
  obj.grad = std::move(ntp.grad);

  double dpp = 0.0;
  if (cfg.alpha != 0.0 && !class_batch.empty()) {
    DppResult d = dpp_loss(params, bank, class_batch, cfg, cached_zero_shot, want_grad);
    obj.report.dpp_ntp = d.ntp;
    obj.report.dpp_kl = d.kl;
    dpp = d.value;
    if (want_grad) {
      obj.grad.p_v += cfg.alpha * d.grad.p_v;
      obj.grad.p_i += cfg.alpha * d.grad.p_i;
    }
  }

  if (bank.casr_anchor) {
    BankGrad cg = BankGrad::zeros_for(bank);
    obj.report.casr = casr_loss(bank, &cg);
    if (want_grad) obj.grad.p_i += cfg.beta * cg.p_i;
  }
  obj.report.total = obj.report.ntp + cfg.alpha * dpp + cfg.beta * obj.report.casr;
  return obj;
}

}  // namespace coar
