#include "coar/audit.hpp"

#include "coar/losses.hpp"
#include "coar/sampler.hpp"

#include <cstdio>
#include <sstream>

namespace coar {

std::int64_t context_param_count(std::int64_t n_layers, std::int64_t dim) {
  require(n_layers >= 1 && dim >= 1, "N and D must be >= 1");
  return 2 * n_layers * dim;
}

std::int64_t lora_param_estimate(std::int64_t d, std::int64_t rank, std::int64_t n_attention_modules) {
  require(d >= 1 && rank >= 1 && n_attention_modules >= 1, "d, r and module count must be >= 1");
  return 8 * d * rank * n_attention_modules;
}

std::vector<ParamAudit> audit_table(int toy_depth, int toy_dim) {
  const std::int64_t sd = lora_param_estimate(3072, 64, 48);
  const std::int64_t ar = lora_param_estimate(4096, 64, 32);
  std::vector<ParamAudit> rows = {
      {"context bank (N=9, D=4096)", context_param_count(9, 4096), "2*N*D", "0.073M"},
      {"LoRA, diffusion side (d=3072, r=64, 48 modules)", sd, "8*d*r*n", "75.5M"},
      {"LoRA, AR side (d=4096, r=64, 32 modules)", ar, "8*d*r*n", "67.1M"},
      {"Proxy-Tuning total", sd + ar, "sum of LoRA rows", "142.6M"},
  };
  if (toy_depth > 0) {
    rows.push_back({"toy context bank (N=" + std::to_string(toy_depth) +
                        ", D=" + std::to_string(toy_dim) + ")",
                    context_param_count(toy_depth, toy_dim), "2*N*D", ""});
  }
  return rows;
}

nlohmann::json to_json(const std::vector<ParamAudit>& rows) {
  auto out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"method", r.method}, {"count", r.count}, {"formula", r.formula},
                   {"reference", r.reference}});
  }
  return out;
}

std::string format_table(const std::vector<ParamAudit>& rows) {
  std::size_t w_method = 6, w_formula = 7;
  for (const auto& r : rows) {
    w_method = std::max(w_method, r.method.size());
    w_formula = std::max(w_formula, r.formula.size());
  }
  std::ostringstream os;
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-*s  %-*s  %14s  %s\n", static_cast<int>(w_method), "method",
                static_cast<int>(w_formula), "formula", "count", "reference");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %-*s  %14lld  %s\n", static_cast<int>(w_method),
                  r.method.c_str(), static_cast<int>(w_formula), r.formula.c_str(),
                  static_cast<long long>(r.count), r.reference.c_str());
    os << buf;
  }
  return os.str();
}

std::vector<std::string> held_out_class_prompts() {
  std::vector<std::string> out;
  for (const char* scene : {"snow", "beach", "city", "road", "grass", "jungle", "mountain", "water"}) {
    out.push_back(std::string("a photo of a [Class] on the ") + scene);
  }
  return out;
}

double drift_kl(const BackboneParams& params, const ContextBank& bank,
                std::span<const std::string> class_prompts, TokenId class_name, int n_samples,
                std::uint64_t seed) {
  require(!class_prompts.empty(), "drift_kl needs at least one class prompt");
  require(n_samples >= 1, "drift_kl needs n_samples >= 1");
  if (bank.depth() == 0) return 0.0;
  const Vocabulary vocab = params.config.vocab();

  double total = 0.0;
  int count = 0;
  for (std::size_t p = 0; p < class_prompts.size(); ++p) {
    const auto pt = tokenize_prompt(vocab, class_prompts[p], class_name);
    require(pt.v_positions.empty() && pt.s_positions.empty(),
            "drift prompts must not contain placeholders");
    for (int s = 0; s < n_samples; ++s) {
      DecodeConfig dc;
      dc.seed = derive_seed(seed, "drift-" + std::to_string(p) + "-" + std::to_string(s));
      const auto image = generate(params, {}, class_prompts[p], class_name, dc);
      const ClassPrior cp = make_class_prior(vocab, pt.ids, image);
      const auto zfwd = forward(params, cp.zero_shot, {}, AttentionMask::causal(cp.zero_shot.size()));
      const auto ifwd = forward(params, cp.prior, make_plan(bank, cp.prior),
                                AttentionMask::causal(cp.prior.size()));
      total += kl_divergence(image_prediction_rows(zfwd.logits, cp.zero_shot),
                             image_prediction_rows(ifwd.logits, cp.prior));
      ++count;
    }
  }
  return total / count;
}

RowVec image_features(const BackboneParams& params, std::span<const TokenId> image,
                      TokenId class_name) {
  const Vocabulary vocab = params.config.vocab();
  const auto pt = tokenize_prompt(vocab, "a photo of a [Class]", class_name);
  const TokenSequence seq = assemble(vocab, pt.ids, image, 0);
  const auto fwd = forward(params, seq, {}, AttentionMask::causal(seq.size()));
  return fwd.final_hidden.middleRows(seq.image_begin, seq.image_length()).colwise().mean();
}

double feature_cosine(const RowVec& a, const RowVec& b) {
  require(a.size() == b.size(), "feature sizes differ");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

double fidelity_proxy(const BackboneParams& params, std::span<const TokenId> generated,
                      const SubjectSet& subject, const Codebook& cb) {
  require(static_cast<int>(generated.size()) == kImageTokens, "generated image has the wrong length");
  require(!subject.references.empty(), "subject has no references");
  const Vocabulary vocab = params.config.vocab();
  const RowVec g = image_features(params, generated, subject.class_name);
  double best = -1.0;
  for (const auto& ref : subject.references) {
    const auto tokens = image_tokens_of(vocab, ref, cb);
    best = std::max(best, feature_cosine(g, image_features(params, tokens, subject.class_name)));
  }
  return best;
}

double positional_match(std::span<const TokenId> a, std::span<const TokenId> b) {
  require(a.size() == b.size() && !a.empty(), "token lists must be non-empty and of equal length");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(a.size());
}

double best_reference_match(std::span<const TokenId> generated, const SubjectSet& subject,
                            const Vocabulary& vocab, const Codebook& cb) {
  require(!subject.references.empty(), "subject has no references");
  double best = 0.0;
  for (const auto& ref : subject.references) {
    best = std::max(best, positional_match(generated, image_tokens_of(vocab, ref, cb)));
  }
  return best;
}

}  // namespace coar
