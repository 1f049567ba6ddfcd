#pragma once

#include "coar/backbone.hpp"
#include "coar/toyworld.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <vector>

namespace coar {

struct PretrainConfig {
  BackboneConfig backbone;
  std::uint64_t seed = 3;
  int steps = 5000;
  int batch_size = 4;
  double lr = 3e-3;
  int warmup = 200;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of lr
  double clip_norm = 1.0;
  int eval_images = 64;
  double ppl_threshold = 1.25;  // 0 disables the convergence check

  void validate() const;
};

nlohmann::json to_json(const PretrainConfig& c);
void merge_json(PretrainConfig& c, const nlohmann::json& j);

struct PretrainStep {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct PretrainResult {
  BackboneParams params;
  std::vector<PretrainStep> history;
  double perplexity = 0.0;
  double class_consistency = 0.0;
  bool converged = false;  // perplexity below threshold (true when the check is off)
};

/// Plain next-token training of every backbone weight on the toy corpus. The
/// only routine that writes backbone weights. Loss covers image positions.
PretrainResult pretrain_backbone(const World& world, const PretrainConfig& cfg,
                                 const std::function<void(const PretrainStep&)>& on_step = {});

/// exp(mean NTP) of held-out images under the bare class prompt.
double class_conditional_perplexity(const BackboneParams& params, const World& world, int n_images,
                                    std::uint64_t seed);

/// Fraction of classes whose greedy class-prompt sample is recognised as that
/// class by the world's classifier.
double class_consistency(const BackboneParams& params, const World& world);

}  // namespace coar
