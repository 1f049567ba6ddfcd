#include "coar/trainer.hpp"

#include "coar/audit.hpp"
#include "coar/persistence.hpp"
#include "coar/sampler.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace coar {

TrainConfig TrainConfig::subject_defaults() { return {}; }

TrainConfig TrainConfig::style_defaults() {
  TrainConfig c;
  c.steps = 600;
  c.n_layers = 3;
  c.loss.alpha = 0.0;
  return c;
}

void TrainConfig::validate() const {
  require(lr > 0.0 && std::isfinite(lr), "lr must be > 0");
  require(steps >= 0, "steps must be >= 0");
  require(batch_size == 1, "only batch_size 1 is supported");
  require(n_layers >= 1, "n_layers must be >= 1");
  require(n_class_images >= 6 && n_class_images <= 8, "n_class_images must be in [6, 8]");
  require(loss.alpha >= 0.0 && loss.beta >= 0.0 && loss.lambda1 >= 0.0 && loss.lambda2 >= 0.0,
          "loss weights must be >= 0");
  require(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 &&
              adam.eps > 0.0,
          "invalid optimizer settings");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"n_layers", c.n_layers},
          {"loss",
           {{"alpha", c.loss.alpha},
            {"beta", c.loss.beta},
            {"lambda1", c.loss.lambda1},
            {"lambda2", c.loss.lambda2}}},
          {"seed", c.seed},
          {"n_class_images", c.n_class_images},
          {"optimizer", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"text_init", c.text_init == TextInit::kClassWord ? "class-word" : "random"}};
}

namespace {

template <class T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void merge_json(TrainConfig& c, const nlohmann::json& j) {
  require(j.is_object(), "train config must be a JSON object");
  try {
    take(j, "lr", c.lr);
    take(j, "steps", c.steps);
    take(j, "batch_size", c.batch_size);
    take(j, "n_layers", c.n_layers);
    take(j, "seed", c.seed);
    take(j, "n_class_images", c.n_class_images);
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      take(l, "alpha", c.loss.alpha);
      take(l, "beta", c.loss.beta);
      take(l, "lambda1", c.loss.lambda1);
      take(l, "lambda2", c.loss.lambda2);
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      take(o, "beta1", c.adam.beta1);
      take(o, "beta2", c.adam.beta2);
      take(o, "eps", c.adam.eps);
    }
    if (j.contains("text_init")) {
      const auto s = j.at("text_init").get<std::string>();
      require(s == "class-word" || s == "random", "text_init must be class-word or random");
      c.text_init = s == "class-word" ? TextInit::kClassWord : TextInit::kRandomNormal;
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad train config: ") + e.what());
  }
}

BankAdam::BankAdam(const ContextBank& bank, double lr, const AdamConfig& cfg)
    : lr_(lr),
      cfg_(cfg),
      m_v_(Mat::Zero(bank.depth(), bank.dim())),
      v_v_(Mat::Zero(bank.depth(), bank.dim())),
      m_i_(Mat::Zero(bank.depth(), bank.dim())),
      v_i_(Mat::Zero(bank.depth(), bank.dim())) {}

void BankAdam::step(ContextBank& bank, const BankGrad& grad) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
  auto update = [&](Mat& p, const Mat& g, Mat& m, Mat& v) {
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    p.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.eps);
  };
  update(bank.p_v, grad.p_v, m_v_, v_v_);
  update(bank.p_i, grad.p_i, m_i_, v_i_);
}

std::vector<TokenSequence> generate_class_priors(const BackboneParams& params, const World& world,
                                                 TokenId class_name, int n, std::uint64_t seed) {
  require(n >= 6 && n <= 8, "number of class images must be in [6, 8]");
  world.class_index(class_name);  // throws for non-class tokens
  const Vocabulary vocab = params.config.vocab();
  const auto prompt = tokenize_prompt(vocab, "a photo of a [Class]", class_name);
  std::vector<TokenSequence> out;
  for (int i = 0; i < n; ++i) {
    DecodeConfig dc;
    dc.mode = DecodeMode::kTopK;
    dc.k = 20;
    dc.temperature = 1.0;
    dc.max_tokens = kImageTokens;
    dc.seed = derive_seed(seed, "class-prior-" + std::to_string(i));
    const auto image = generate(params, {}, "a photo of a [Class]", class_name, dc);
    out.push_back(assemble(vocab, prompt.ids, image, 0));
  }
  return out;
}

std::vector<ClassPrior> to_class_priors(const Vocabulary& vocab,
                                        std::span<const TokenSequence> seqs) {
  std::vector<ClassPrior> out;
  for (const auto& s : seqs) {
    const auto d = disassemble(s);
    out.push_back(make_class_prior(vocab, d.text, d.image));
  }
  return out;
}

namespace {

TrainResult run_training(const BackboneParams& params, ContextBank bank,
                         std::vector<TokenSequence> train_seqs, std::vector<TokenSequence> priors,
                         const TrainConfig& cfg, const StepCallback& on_step) {
  const std::uint64_t before = params_hash(params);
  const Vocabulary vocab = params.config.vocab();
  TrainResult res;
  res.initial_bank = bank;
  res.priors = std::move(priors);
  res.train_sequences = std::move(train_seqs);

  const auto batch = to_class_priors(vocab, res.priors);
  const auto zero_shot = zero_shot_rows(params, batch);
  BankAdam opt(bank, cfg.lr, cfg.adam);

  double step0_total = 0.0;
  int over_count = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    const auto& seq = res.train_sequences[static_cast<std::size_t>(step) % res.train_sequences.size()];
    Objective obj;
    try {
      obj = total_objective(params, bank, seq, batch, cfg.loss, &zero_shot, true);
    } catch (const NumericFailure& e) {
      throw NumericFailure(std::string(e.what()) + " at step " + std::to_string(step), e.layer(),
                           step - 1);
    }
    obj.report.step = step;
    if (!std::isfinite(obj.report.total) || !obj.grad.p_v.allFinite() || !obj.grad.p_i.allFinite()) {
      throw NumericFailure("non-finite loss at step " + std::to_string(step), -1, step - 1);
    }
    if (step == 0) step0_total = obj.report.total;
    over_count = obj.report.total > 10.0 * step0_total ? over_count + 1 : 0;
    if (over_count >= 50) {
      throw NumericFailure("loss above 10x its initial value for 50 steps", -1, step - 50);
    }
    res.history.push_back(obj.report);
    if (on_step) on_step(obj.report);
    opt.step(bank, obj.grad);
  }
  if (params_hash(params) != before) throw std::logic_error("backbone changed during training");
  res.bank = std::move(bank);
  return res;
}

}  // namespace

TrainResult train_subject(const BackboneParams& params, const World& world,
                          const SubjectSet& subject, const TrainConfig& cfg,
                          const std::vector<TokenSequence>* priors, const StepCallback& on_step) {
  cfg.validate();
  require(cfg.n_layers <= params.config.n_layers, "n_layers exceeds backbone depth");
  require(!subject.references.empty(), "subject has no references");
  const Vocabulary vocab = params.config.vocab();
  const int N = cfg.n_layers;

  ContextBank bank = new_bank(N, params.config.d_model, BankKind::kSubject, subject.class_name,
                              derive_seed(cfg.seed, "bank"));
  const Mat stats = capture_subject_stats(params, subject, world.codebook, N);
  const auto class_prompt = tokenize_prompt(vocab, "a photo of a [Class]", subject.class_name);
  const auto first_ref = image_tokens_of(vocab, subject.references.front(), world.codebook);
  const TokenSequence class_seq = assemble(vocab, class_prompt.ids, first_ref, 0);
  const int class_pos = class_seq.text_begin + static_cast<int>(class_prompt.ids.size()) - 1;
  init_from_subject(bank, stats, capture_position_hidden(params, class_seq, class_pos, N), cfg.text_init);

  const auto train_prompt = tokenize_prompt(vocab, kSubjectPrompt, subject.class_name);
  std::vector<TokenSequence> seqs;
  for (const auto& ref : subject.references) {
    seqs.push_back(assemble(vocab, train_prompt.ids, image_tokens_of(vocab, ref, world.codebook), 1));
  }

  std::vector<TokenSequence> prior_seqs;
  if (cfg.loss.alpha != 0.0) {
    prior_seqs = priors ? *priors
                        : generate_class_priors(params, world, subject.class_name,
                                                cfg.n_class_images, derive_seed(cfg.seed, "priors"));
  }
  return run_training(params, std::move(bank), std::move(seqs), std::move(prior_seqs), cfg, on_step);
}

TrainResult train_style(const BackboneParams& params, const World& world, const StyleSet& style,
                        const TrainConfig& cfg_in, const StepCallback& on_step) {
  TrainConfig cfg = cfg_in;
  cfg.loss.alpha = 0.0;
  cfg.validate();
  require(cfg.n_layers <= params.config.n_layers, "n_layers exceeds backbone depth");
  const Vocabulary vocab = params.config.vocab();
  const int N = cfg.n_layers;

  ContextBank bank = new_bank(N, params.config.d_model, BankKind::kStyle, style.depicted_class,
                              derive_seed(cfg.seed, "bank"));
  const auto image = image_tokens_of(vocab, style.reference, world.codebook);
  const auto class_prompt = tokenize_prompt(vocab, "a photo of a [Class]", style.depicted_class);
  const std::vector<std::vector<TokenId>> images = {image};
  const Mat stats = capture_image_stats(params, class_prompt.ids, images, N);

  const auto train_prompt = tokenize_prompt(vocab, kStylePrompt, style.depicted_class);
  TokenSequence seq = assemble(vocab, train_prompt.ids, image, 1);
  const int style_word_pos = seq.text_begin + static_cast<int>(train_prompt.ids.size()) - 1;
  init_from_subject(bank, stats, capture_position_hidden(params, seq, style_word_pos, N), cfg.text_init);

  std::vector<TokenSequence> seqs = {std::move(seq)};
  return run_training(params, std::move(bank), std::move(seqs), {}, cfg, on_step);
}

std::string_view grad_term_name(GradTerm t) {
  switch (t) {
    case GradTerm::kNtp: return "ntp";
    case GradTerm::kDpp: return "dpp";
    case GradTerm::kCasr: return "casr";
    case GradTerm::kTotal: return "total";
  }
  return "?";
}

nlohmann::json to_json(const GradcheckReport& r) {
  return {{"term", grad_term_name(r.term)},
          {"max_error", r.max_error},
          {"worst_index", r.worst_index},
          {"worst_analytic", r.worst_analytic},
          {"worst_numeric", r.worst_numeric},
          {"n_checked", r.n_checked}};
}

GradcheckReport gradcheck(const BackboneParams& params, const ContextBank& bank,
                          const TokenSequence& subject_seq, std::span<const ClassPrior> batch,
                          const LossConfig& cfg, double h, GradTerm term) {
  require(h > 0.0 && std::isfinite(h), "finite-difference step h must be > 0");
  auto eval = [&](const ContextBank& b, BankGrad* g) -> double {
    const bool want = g != nullptr;
    switch (term) {
      case GradTerm::kNtp: {
        auto r = subject_ntp(params, b, subject_seq, want);
        if (g) *g = std::move(r.grad);
        return r.value;
      }
      case GradTerm::kDpp: {
        auto r = dpp_loss(params, b, batch, cfg, nullptr, want);
        if (g) *g = std::move(r.grad);
        return r.value;
      }
      case GradTerm::kCasr: {
        if (g) *g = BankGrad::zeros_for(b);
        return casr_loss(b, g);
      }
      case GradTerm::kTotal: {
        auto r = total_objective(params, b, subject_seq, batch, cfg, nullptr, want);
        if (g) *g = std::move(r.grad);
        return r.report.total;
      }
    }
    return 0.0;
  };

  BankGrad analytic;
  eval(bank, &analytic);
  GradcheckReport rep;
  rep.term = term;
  ContextBank probe = bank;
  const Eigen::Index per = bank.p_v.size();
  for (Eigen::Index idx = 0; idx < 2 * per; ++idx) {
    const bool text = idx < per;
    double* x = (text ? probe.p_v.data() : probe.p_i.data()) + (text ? idx : idx - per);
    const double a = (text ? analytic.p_v.data() : analytic.p_i.data())[text ? idx : idx - per];
    const double orig = *x;
    *x = orig + h;
    const double fp = eval(probe, nullptr);
    *x = orig - h;
    const double fm = eval(probe, nullptr);
    *x = orig;
    const double num = (fp - fm) / (2.0 * h);
    const double scale = std::max(std::abs(a), std::abs(num));
    const double err = scale < 1e-8 ? std::abs(a - num) : std::abs(a - num) / scale;
    ++rep.n_checked;
    if (err > rep.max_error || rep.worst_index < 0) {
      rep.max_error = err;
      rep.worst_index = static_cast<int>(idx);
      rep.worst_analytic = a;
      rep.worst_numeric = num;
    }
  }
  return rep;
}

GradcheckFixture gradcheck_fixture(std::uint64_t seed, int dim, int layers, int bank_depth) {
  require(bank_depth >= 1 && bank_depth <= layers, "bank depth must be in [1, layers]");
  BackboneConfig bc;
  bc.text_size = 12;
  bc.image_size = 12;
  bc.d_model = dim;
  bc.n_layers = layers;
  bc.n_heads = 2;
  bc.max_seq = 40;
  bc.image_pos_offset = 16;
  GradcheckFixture f;
  f.params = init_backbone(bc, derive_seed(seed, "init"));
  f.params.frozen = true;
  const Vocabulary vocab = bc.vocab();
  Rng rng(derive_seed(seed, "gradcheck"));
  auto random_image = [&](int n) {
    std::vector<TokenId> img;
    for (int i = 0; i < n; ++i) img.push_back(vocab.image_token(rng.below(vocab.image_size())));
    return img;
  };
  const TokenId cls = vocab.word("dog");
  f.subject_seq = assemble(vocab, tokenize_prompt(vocab, kSubjectPrompt, cls).ids, random_image(8), 1);
  const auto cp = tokenize_prompt(vocab, "a photo of a [Class]", cls);
  for (int i = 0; i < 2; ++i) f.batch.push_back(make_class_prior(vocab, cp.ids, random_image(8)));
  f.bank = new_bank(bank_depth, dim, BankKind::kSubject, cls, derive_seed(seed, "bank"));
  f.bank.p_v *= 25.0;  // unit scale, like a trained bank
  f.bank.p_i *= 25.0;
  Mat anchor = f.bank.p_i;
  for (Eigen::Index i = 0; i < anchor.size(); ++i) anchor.data()[i] += 0.1 * rng.normal();
  f.bank.casr_anchor = anchor;
  f.loss.alpha = 0.5;  // large enough that every term moves the total
  return f;
}

std::uint64_t bank_hash(const ContextBank& b) {
  std::uint64_t h = fnv1a64(bank_kind_name(b.kind));
  h = fnv1a64(std::to_string(b.class_name) + ":" + std::to_string(b.depth()) + "x" +
                  std::to_string(b.dim()),
              h);
  auto mix = [&](const Mat& m) {
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(m.data()),
                                 static_cast<std::size_t>(m.size()) * sizeof(double)),
                h);
  };
  mix(b.p_v);
  mix(b.p_i);
  if (b.casr_anchor) mix(*b.casr_anchor);
  return h;
}

std::string classify_trend(std::span<const double> v) {
  if (v.size() < 2) return "single";
  std::vector<int> runs;  // direction of each maximal monotone run
  for (std::size_t i = 1; i < v.size(); ++i) {
    const int dir = v[i] > v[i - 1] ? 1 : (v[i] < v[i - 1] ? -1 : 0);
    if (dir != 0 && (runs.empty() || runs.back() != dir)) runs.push_back(dir);
  }
  if (runs.empty()) return "flat";
  if (runs.size() == 1) return runs[0] > 0 ? "increasing" : "decreasing";
  if (runs.size() == 2) return runs[0] > 0 ? "rise-then-fall" : "fall-then-rise";
  return "mixed";
}

nlohmann::json to_json(const SweepTable& t) {
  auto rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"n_layers", r.n_layers},
                    {"params", r.params},
                    {"initial_ntp", r.initial_ntp},
                    {"final_ntp", r.final_ntp},
                    {"fidelity", r.fidelity},
                    {"drift_kl", r.drift},
                    {"bank_hash", hex64(r.bank_hash)}});
  }
  return {{"rows", rows}, {"fidelity_trend", t.fidelity_trend}};
}

std::string format_table(const SweepTable& t) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%4s  %8s  %11s  %9s  %9s  %9s\n", "N", "params", "initial_ntp",
                "final_ntp", "fidelity", "drift_kl");
  os << buf;
  for (const auto& r : t.rows) {
    std::snprintf(buf, sizeof buf, "%4d  %8lld  %11.5f  %9.5f  %9.5f  %9.6f\n", r.n_layers,
                  static_cast<long long>(r.params), r.initial_ntp, r.final_ntp, r.fidelity, r.drift);
    os << buf;
  }
  os << "fidelity trend: " << t.fidelity_trend << "\n";
  return os.str();
}

SweepTable sweep_layers(const BackboneParams& params, const World& world,
                        const SubjectSet& subject, std::span<const int> depths,
                        const TrainConfig& cfg, int drift_samples) {
  require(!depths.empty(), "sweep needs at least one depth");
  for (int n : depths) {
    require(n >= 1 && n <= params.config.n_layers, "sweep depth outside [1, n_layers]");
  }
  cfg.validate();
  std::vector<TokenSequence> priors;
  if (cfg.loss.alpha != 0.0) {
    priors = generate_class_priors(params, world, subject.class_name, cfg.n_class_images,
                                   derive_seed(cfg.seed, "priors"));
  }
  const auto prompts = held_out_class_prompts();
  SweepTable table;
  std::vector<double> fids;
  for (int n : depths) {
    TrainConfig c = cfg;
    c.n_layers = n;
    const TrainResult tr = train_subject(params, world, subject, c, &priors);
    DecodeConfig dc;
    dc.mode = DecodeMode::kGreedy;
    dc.max_tokens = kImageTokens;
    const ContextBank* banks[] = {&tr.bank};
    const auto tokens = generate(params, banks, kSubjectPrompt, subject.class_name, dc);
    SweepRow row;
    row.n_layers = n;
    row.params = tr.bank.trainable_count();
    row.initial_ntp = tr.history.empty() ? 0.0 : tr.history.front().ntp;
    row.final_ntp = tr.history.empty() ? 0.0 : tr.history.back().ntp;
    row.fidelity = fidelity_proxy(params, tokens, subject, world.codebook);
    row.drift = drift_kl(params, tr.bank, prompts, subject.class_name, drift_samples,
                         derive_seed(cfg.seed, "drift"));
    row.bank_hash = bank_hash(tr.bank);
    fids.push_back(row.fidelity);
    table.rows.push_back(row);
  }
  table.fidelity_trend = classify_trend(fids);
  return table;
}

}  // namespace coar
