#include "coar/pretrain.hpp"

#include "coar/context.hpp"
#include "coar/losses.hpp"
#include "coar/sampler.hpp"

#include <numbers>

namespace coar {

namespace {

constexpr double kConsistentIoU = 0.75;
constexpr int kCorpusChunk = 512;

std::vector<Mat*> tensors_of(BackboneParams& p) {
  std::vector<Mat*> out;
  p.for_each([&](const std::string&, Mat& m) { out.push_back(&m); });
  return out;
}

double scheduled_lr(const PretrainConfig& c, int step) {
  if (step < c.warmup) return c.lr * static_cast<double>(step + 1) / c.warmup;
  const double span = std::max(1, c.steps - c.warmup);
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup) / span);
  const double floor = c.lr * c.min_lr_ratio;
  return floor + 0.5 * (c.lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace

void PretrainConfig::validate() const {
  require(steps >= 0, "steps must be >= 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(lr > 0.0, "lr must be > 0");
  require(warmup >= 1, "warmup must be >= 1");
  require(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0, "min_lr_ratio must be in [0, 1]");
  require(clip_norm > 0.0, "clip_norm must be > 0");
  require(eval_images >= 1, "eval_images must be >= 1");
  require(ppl_threshold >= 0.0, "ppl_threshold must be >= 0");
  require(backbone.d_model % backbone.n_heads == 0, "d_model must be divisible by n_heads");
  require(backbone.image_size == kWorldCodes, "backbone image vocabulary must match the world codebook");
}

nlohmann::json to_json(const PretrainConfig& c) {
  const auto& b = c.backbone;
  return {{"seed", c.seed},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"warmup", c.warmup},
          {"min_lr_ratio", c.min_lr_ratio},
          {"clip_norm", c.clip_norm},
          {"eval_images", c.eval_images},
          {"ppl_threshold", c.ppl_threshold},
          {"backbone",
           {{"text_size", b.text_size},
            {"image_size", b.image_size},
            {"d_model", b.d_model},
            {"n_layers", b.n_layers},
            {"n_heads", b.n_heads},
            {"mlp_mult", b.mlp_mult},
            {"max_seq", b.max_seq},
            {"image_pos_offset", b.image_pos_offset},
            {"rms_eps", b.rms_eps}}}};
}

void merge_json(PretrainConfig& c, const nlohmann::json& j) {
  require(j.is_object(), "pretrain config must be a JSON object");
  auto take = [](const nlohmann::json& o, const char* key, auto& out) {
    if (o.contains(key)) out = o.at(key).get<std::decay_t<decltype(out)>>();
  };
  try {
    take(j, "seed", c.seed);
    take(j, "steps", c.steps);
    take(j, "batch_size", c.batch_size);
    take(j, "lr", c.lr);
    take(j, "warmup", c.warmup);
    take(j, "min_lr_ratio", c.min_lr_ratio);
    take(j, "clip_norm", c.clip_norm);
    take(j, "eval_images", c.eval_images);
    take(j, "ppl_threshold", c.ppl_threshold);
    if (j.contains("backbone")) {
      const auto& b = j.at("backbone");
      take(b, "text_size", c.backbone.text_size);
      take(b, "image_size", c.backbone.image_size);
      take(b, "d_model", c.backbone.d_model);
      take(b, "n_layers", c.backbone.n_layers);
      take(b, "n_heads", c.backbone.n_heads);
      take(b, "mlp_mult", c.backbone.mlp_mult);
      take(b, "max_seq", c.backbone.max_seq);
      take(b, "image_pos_offset", c.backbone.image_pos_offset);
      take(b, "rms_eps", c.backbone.rms_eps);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad pretrain config: ") + e.what());
  }
}

PretrainResult pretrain_backbone(const World& world, const PretrainConfig& cfg,
                                 const std::function<void(const PretrainStep&)>& on_step) {
  cfg.validate();
  const Vocabulary vocab = cfg.backbone.vocab();
  require(vocab == world.vocab, "backbone vocabulary does not match the world");

  PretrainResult res;
  res.params = init_backbone(cfg.backbone, derive_seed(cfg.seed, "init"));
  BackboneParams& params = res.params;
  BackboneParams m = zeros_like(params), v = zeros_like(params);
  const auto p_t = tensors_of(params), m_t = tensors_of(m), v_t = tensors_of(v);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  Rng layout_rng(derive_seed(cfg.seed, "pretrain-layout"));
  std::vector<CaptionedImage> chunk;
  int chunk_pos = kCorpusChunk;
  int chunk_id = 0;

  for (int step = 0; step < cfg.steps; ++step) {
    BackboneParams grads = zeros_like(params);
    double loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (chunk_pos == kCorpusChunk) {
        chunk = make_pretrain_corpus(world, derive_seed(cfg.seed, "corpus-" + std::to_string(chunk_id++)),
                                     kCorpusChunk);
        chunk_pos = 0;
      }
      const CaptionedImage& ex = chunk[static_cast<std::size_t>(chunk_pos++)];
      const int n_ctx = layout_rng.below(3);
      const TokenSequence seq =
          assemble(vocab, ex.prompt, image_tokens_of(vocab, ex.image, world.codebook), n_ctx);
      ForwardResult fwd;
      try {
        fwd = forward(params, seq, {}, AttentionMask::causal(seq.size()), {.keep_tape = true});
      } catch (const NumericFailure& e) {
        throw NumericFailure(std::string(e.what()) + " at pretrain step " + std::to_string(step),
                             e.layer(), step - 1);
      }
      Mat dlogits;
      loss += ntp_loss(fwd.logits, seq, &dlogits) / cfg.batch_size;
      dlogits /= cfg.batch_size;
      backward(params, fwd, dlogits, &grads);
    }
    for (TokenId id = vocab.text_size() + vocab.image_size(); id < vocab.size(); ++id) {
      if (vocab.is_reserved(id)) grads.embed.row(id).setZero();
    }
    if (!std::isfinite(loss)) {
      throw NumericFailure("non-finite pretraining loss at step " + std::to_string(step), -1, step - 1);
    }

    const auto g_t = tensors_of(grads);
    double sq = 0.0;
    for (const Mat* g : g_t) sq += g->squaredNorm();
    const double norm = std::sqrt(sq);
    const double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

    const double lr = scheduled_lr(cfg, step);
    const double c1 = 1.0 - std::pow(b1, step + 1);
    const double c2 = 1.0 - std::pow(b2, step + 1);
    for (std::size_t i = 0; i < p_t.size(); ++i) {
      const Mat g = clip * *g_t[i];
      *m_t[i] = b1 * *m_t[i] + (1.0 - b1) * g;
      *v_t[i] = b2 * *v_t[i] + (1.0 - b2) * g.cwiseAbs2();
      p_t[i]->array() -= lr * (m_t[i]->array() / c1) / ((v_t[i]->array() / c2).sqrt() + eps);
    }
    for (TokenId id = vocab.text_size() + vocab.image_size(); id < vocab.size(); ++id) {
      if (vocab.is_reserved(id)) params.embed.row(id).setZero();
    }

    const PretrainStep ps{step, loss, lr};
    res.history.push_back(ps);
    if (on_step) on_step(ps);
  }
  if (!params.all_finite()) throw NumericFailure("pretrained weights are not finite", -1, cfg.steps - 1);

  params.frozen = true;
  res.perplexity = class_conditional_perplexity(params, world, cfg.eval_images,
                                                derive_seed(cfg.seed, "eval"));
  res.class_consistency = class_consistency(params, world);
  res.converged = cfg.ppl_threshold == 0.0 || res.perplexity < cfg.ppl_threshold;
  return res;
}

double class_conditional_perplexity(const BackboneParams& params, const World& world, int n_images,
                                    std::uint64_t seed) {
  require(n_images >= 1, "n_images must be >= 1");
  const Vocabulary vocab = params.config.vocab();
  const auto corpus = make_class_corpus(world, seed, n_images);
  double total = 0.0;
  for (const auto& ex : corpus) {
    const TokenId cls = world.classes[static_cast<std::size_t>(ex.spec.class_index)].token;
    const auto prompt = tokenize_prompt(vocab, "a photo of a [Class]", cls);
    const TokenSequence seq =
        assemble(vocab, prompt.ids, image_tokens_of(vocab, ex.image, world.codebook), 0);
    const auto fwd = forward(params, seq, {}, AttentionMask::causal(seq.size()));
    total += ntp_loss(fwd.logits, seq);
  }
  return std::exp(total / n_images);
}

double class_consistency(const BackboneParams& params, const World& world) {
  int hits = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    DecodeConfig dc;
    dc.mode = DecodeMode::kGreedy;
    dc.max_tokens = kImageTokens;
    const auto tokens =
        generate(params, {}, "a photo of a [Class]", world.classes[static_cast<std::size_t>(c)].token, dc);
    const auto [cls, iou] = world.classify(tokens);
    hits += (cls == c && iou >= kConsistentIoU) ? 1 : 0;
  }
  return static_cast<double>(hits) / kNumClasses;
}

}  // namespace coar
