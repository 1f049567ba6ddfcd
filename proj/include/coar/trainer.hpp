#pragma once

#include "coar/backbone.hpp"
#include "coar/context.hpp"
#include "coar/losses.hpp"
#include "coar/toyworld.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace coar {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  double lr = 1e-2;
  int steps = 1000;
  int batch_size = 1;
  int n_layers = 9;
  LossConfig loss;
  std::uint64_t seed = 0;
  int n_class_images = 8;
  AdamConfig adam;
  TextInit text_init = TextInit::kClassWord;

  static TrainConfig subject_defaults();
  static TrainConfig style_defaults();  // N=3, 600 steps, alpha=0
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
// Fields missing from `j` keep the values already in `c`.
void merge_json(TrainConfig& c, const nlohmann::json& j);

/// Adam over one bank's p_v and p_I; the moments cover exactly 2*N*D scalars.
class BankAdam {
 public:
  BankAdam(const ContextBank& bank, double lr, const AdamConfig& cfg);
  void step(ContextBank& bank, const BankGrad& grad);
  std::int64_t state_size() const noexcept { return static_cast<std::int64_t>(m_v_.size() + m_i_.size()); }
  int steps_taken() const noexcept { return t_; }

 private:
  double lr_;
  AdamConfig cfg_;
  Mat m_v_, v_v_, m_i_, v_i_;
  int t_ = 0;
};

/// `n` class sequences (zero-shot layout) whose image tokens are sampled from
/// the frozen model under "a photo of a [Class]" with top-k 20, temperature 1.
std::vector<TokenSequence> generate_class_priors(const BackboneParams& params, const World& world,
                                                 TokenId class_name, int n, std::uint64_t seed);

std::vector<ClassPrior> to_class_priors(const Vocabulary& vocab,
                                        std::span<const TokenSequence> seqs);

struct TrainResult {
  ContextBank bank;
  ContextBank initial_bank;
  std::vector<LossReport> history;
  std::vector<TokenSequence> priors;  // empty when DPP is off
  std::vector<TokenSequence> train_sequences;
};

using StepCallback = std::function<void(const LossReport&)>;

inline constexpr const char* kSubjectPrompt = "a photo of a [V] [Class]";
inline constexpr const char* kStylePrompt = "a photo of a [Class] in [S] style";

/// Bank initialized from subject statistics, then cfg.steps Adam steps on
/// round-robin references plus the class-prior batch. `priors` may carry
/// precomputed class priors (zero-shot layout); otherwise they are sampled.
TrainResult train_subject(const BackboneParams& params, const World& world,
                          const SubjectSet& subject, const TrainConfig& cfg,
                          const std::vector<TokenSequence>* priors = nullptr,
                          const StepCallback& on_step = {});

/// As train_subject with DPP disabled; CASR is anchored to the style image's
/// own statistics.
TrainResult train_style(const BackboneParams& params, const World& world, const StyleSet& style,
                        const TrainConfig& cfg, const StepCallback& on_step = {});

enum class GradTerm { kNtp, kDpp, kCasr, kTotal };
std::string_view grad_term_name(GradTerm t);

struct GradcheckReport {
  GradTerm term = GradTerm::kTotal;
  double max_error = 0.0;  // relative, or absolute where both gradients are below 1e-8
  int worst_index = -1;    // flat index: p_v entries first, then p_I
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int n_checked = 0;
};

nlohmann::json to_json(const GradcheckReport& r);

/// Central differences over every trainable scalar of `bank`.
GradcheckReport gradcheck(const BackboneParams& params, const ContextBank& bank,
                          const TokenSequence& subject_seq, std::span<const ClassPrior> batch,
                          const LossConfig& cfg, double h, GradTerm term);

/// Small random model (text 12 + image 12 + 8 specials = 32 ids) with a bank
/// at unit scale, a subject sequence and two class priors; the reference
/// setting for gradient checks.
struct GradcheckFixture {
  BackboneParams params;
  ContextBank bank;
  TokenSequence subject_seq;
  std::vector<ClassPrior> batch;
  LossConfig loss;
};

GradcheckFixture gradcheck_fixture(std::uint64_t seed, int dim = 16, int layers = 2,
                                   int bank_depth = 2);

struct SweepRow {
  int n_layers = 0;
  std::int64_t params = 0;
  double initial_ntp = 0.0;
  double final_ntp = 0.0;
  double fidelity = 0.0;
  double drift = 0.0;
  std::uint64_t bank_hash = 0;
};

struct SweepTable {
  std::vector<SweepRow> rows;
  std::string fidelity_trend;  // "increasing", "decreasing", "rise-then-fall", ...
};

std::string classify_trend(std::span<const double> values);
nlohmann::json to_json(const SweepTable& t);
std::string format_table(const SweepTable& t);

std::uint64_t bank_hash(const ContextBank& b);

/// One bank per depth, same seed; fidelity from a greedy decode under the
/// training prompt and drift over held-out class prompts.
SweepTable sweep_layers(const BackboneParams& params, const World& world,
                        const SubjectSet& subject, std::span<const int> depths,
                        const TrainConfig& cfg, int drift_samples = 1);

}  // namespace coar
