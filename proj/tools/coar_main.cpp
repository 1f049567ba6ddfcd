// coar: command-line front end. One subcommand per operation; every run
// writes config.json and manifest.json into its run directory.

#include "coar/artifacts.hpp"
#include "coar/audit.hpp"
#include "coar/pretrain.hpp"
#include "coar/runtime.hpp"
#include "coar/sampler.hpp"
#include "coar/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace coar;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitThreshold = 4;

struct ThresholdFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_json(const fs::path& p, const json& j) {
  std::ofstream f(p);
  require(static_cast<bool>(f), "cannot write '" + p.string() + "'");
  f << j.dump(2) << "\n";
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  require(static_cast<bool>(f), "cannot read '" + p.string() + "'");
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw InvalidArgument("'" + p.string() + "' is not valid JSON: " + e.what());
  }
}

class Run {
 public:
  Run(std::string command, const std::string& out, std::uint64_t seed)
      : command_(std::move(command)), start_(std::chrono::steady_clock::now()) {
    if (!out.empty()) {
      dir_ = out;
    } else {
      const char* root = std::getenv("COAR_RUN_DIR");
      dir_ = fs::path(root && *root ? root : "runs") / (command_ + "-" + std::to_string(seed));
    }
    fs::create_directories(dir_);
  }

  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& name) const { return dir_ / name; }

  void config(const json& c) {
    config_ = c;
    write_json(path("config.json"), c);
  }
  void input(const fs::path& p) { inputs_[p.string()] = hex64(file_hash(p)); }
  void output(const std::string& name) { outputs_[name] = hex64(file_hash(path(name))); }
  void set(const std::string& key, json v) { extra_[key] = std::move(v); }

  void finish() {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json m = {{"command", command_}, {"config", config_},       {"inputs", inputs_},
              {"outputs", outputs_}, {"duration_s", secs}};
    for (auto& [k, v] : extra_.items()) m[k] = v;
    write_json(path("manifest.json"), m);
  }

 private:
  std::string command_;
  fs::path dir_;
  std::chrono::steady_clock::time_point start_;
  json config_ = json::object();
  json inputs_ = json::object();
  json outputs_ = json::object();
  json extra_ = json::object();
};

struct LoadedBackbone {
  BackboneParams params;
  World world;
  std::uint64_t hash = 0;
  std::string file_hash;
};

LoadedBackbone load_backbone(const std::string& path, Run& run) {
  require(!path.empty(), "--backbone is required");
  const Checkpoint c = load_checkpoint(path);
  LoadedBackbone b{backbone_from(c), world_from(c), 0, hex64(file_hash(path))};
  b.params.frozen = true;
  b.hash = params_hash(b.params);
  run.input(path);
  run.set("world_seed", b.world.seed);
  run.set("backbone_hash_before", hex64(b.hash));
  return b;
}

void close_backbone(const LoadedBackbone& b, const std::string& path, Run& run) {
  const std::uint64_t after = params_hash(b.params);
  const std::string file_after = hex64(file_hash(path));
  run.set("backbone_hash_after", hex64(after));
  run.set("backbone_file_hash_after", file_after);
  if (after != b.hash || file_after != b.file_hash) {
    throw std::logic_error("backbone changed during a non-pretrain command");
  }
}

TokenId class_token(const World& w, const std::string& word) {
  const TokenId t = w.vocab.word(word);
  w.class_index(t);
  return t;
}

json patch_grid(const World& w, std::span<const TokenId> tokens) {
  const auto codes = w.to_codes(tokens);
  const PixelGrid g = dequantize(codes, w.codebook, kGridSide, kGridSide);
  json rows = json::array();
  for (Eigen::Index r = 0; r < g.patches.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < g.patches.cols(); ++c) row.push_back(g.patches(r, c));
    rows.push_back(row);
  }
  return rows;
}

void write_image_outputs(Run& run, const World& w, const std::string& prompt,
                         const DecodeConfig& dc, std::span<const TokenId> tokens) {
  const auto codes = w.to_codes(tokens);
  write_json(run.path("tokens.json"), {{"prompt", prompt},
                                       {"config", to_json(dc)},
                                       {"tokens", std::vector<TokenId>(tokens.begin(), tokens.end())},
                                       {"codes", codes},
                                       {"patches", patch_grid(w, tokens)}});
  write_ppm(run.path("image.ppm"), dequantize(codes, w.codebook, kGridSide, kGridSide).patches,
            kGridSide, kGridSide);
  run.output("tokens.json");
  run.output("image.ppm");
}

// Config files are flat JSON objects keyed by long flag names. Their values are
// spliced in ahead of the command-line flags so that flags win.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> out;
  std::vector<std::string> from_file;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string cfg_path;
    if (args[i] == "--config" && i + 1 < args.size()) {
      cfg_path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      cfg_path = args[i].substr(9);
    } else {
      out.push_back(args[i]);
      continue;
    }
    const json j = read_json(cfg_path);
    require(j.is_object(), "config file must hold a JSON object");
    for (const auto& [key, value] : j.items()) {
      const std::string flag = "--" + key;
      if (value.is_boolean()) {
        if (value.get<bool>()) from_file.push_back(flag);
      } else if (value.is_array()) {
        for (const auto& v : value) {
          from_file.push_back(flag);
          from_file.push_back(v.is_string() ? v.get<std::string>() : v.dump());
        }
      } else {
        from_file.push_back(flag);
        from_file.push_back(value.is_string() ? value.get<std::string>() : value.dump());
      }
    }
  }
  if (!out.empty() && !from_file.empty()) {
    out.insert(out.begin() + 1, from_file.begin(), from_file.end());  // after the subcommand
  }
  return out;
}

struct DecodeFlags {
  bool greedy = false;
  int k = 20;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int max_tokens = kImageTokens;

  void add(CLI::App* app) {
    app->add_flag("--greedy", greedy, "Greedy decoding");
    app->add_option("--k", k, "Top-k cutoff");
    app->add_option("--temperature", temperature, "Sampling temperature");
    app->add_option("--decode-seed", seed, "Sampling seed");
    app->add_option("--max-tokens", max_tokens, "Image tokens to emit");
  }
  DecodeConfig get() const {
    DecodeConfig dc;
    dc.mode = greedy ? DecodeMode::kGreedy : DecodeMode::kTopK;
    dc.k = k;
    dc.temperature = temperature;
    dc.seed = seed;
    dc.max_tokens = max_tokens;
    dc.validate();
    return dc;
  }
};

struct TrainFlags {
  std::optional<double> lr, alpha, beta, lambda1, lambda2;
  std::optional<int> steps, n_layers, n_class_images;
  std::string text_init;

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "Learning rate");
    app->add_option("--steps", steps, "Optimizer steps");
    app->add_option("--n-layers", n_layers, "Injected layers N");
    app->add_option("--alpha", alpha, "DPP weight");
    app->add_option("--beta", beta, "CASR weight");
    app->add_option("--lambda1", lambda1, "DPP NTP weight");
    app->add_option("--lambda2", lambda2, "DPP KL weight");
    app->add_option("--n-class-images", n_class_images, "Class-prior images (6-8)");
    app->add_option("--text-init", text_init, "class-word or random")
        ->check(CLI::IsMember({"class-word", "random"}));
  }
  void apply(TrainConfig& c) const {
    if (lr) c.lr = *lr;
    if (steps) c.steps = *steps;
    if (n_layers) c.n_layers = *n_layers;
    if (alpha) c.loss.alpha = *alpha;
    if (beta) c.loss.beta = *beta;
    if (lambda1) c.loss.lambda1 = *lambda1;
    if (lambda2) c.loss.lambda2 = *lambda2;
    if (n_class_images) c.n_class_images = *n_class_images;
    if (!text_init.empty()) {
      c.text_init = text_init == "class-word" ? TextInit::kClassWord : TextInit::kRandomNormal;
    }
    c.validate();
  }
};

// ---------------------------------------------------------------------------

struct PretrainCmd {
  std::uint64_t seed = 3;
  int steps = 5000;
  std::optional<int> batch_size, warmup;
  std::optional<double> lr, ppl_threshold;
  std::string out;
  bool quiet = false;

  int run() {
    PretrainConfig cfg;
    cfg.seed = seed;
    cfg.steps = steps;
    if (batch_size) cfg.batch_size = *batch_size;
    if (warmup) cfg.warmup = *warmup;
    if (lr) cfg.lr = *lr;
    if (ppl_threshold) cfg.ppl_threshold = *ppl_threshold;
    if (steps == 0) cfg.ppl_threshold = 0.0;
    cfg.validate();
    Run run("pretrain", out, seed);
    run.config(to_json(cfg));
    const World world = build_world(seed);
    write_json(run.path("world.json"), world_to_json(world));
    run.output("world.json");
    run.set("world_seed", seed);

    std::ofstream losses(run.path("losses.jsonl"));
    const auto res = pretrain_backbone(world, cfg, [&](const PretrainStep& s) {
      losses << json{{"step", s.step}, {"loss", s.loss}, {"lr", s.lr}}.dump() << "\n";
      if (!quiet && (s.step % 500 == 0 || s.step + 1 == cfg.steps)) {
        std::cerr << "step " << s.step << " loss " << s.loss << "\n";
      }
    });
    losses.close();
    run.output("losses.jsonl");
    const json metrics = {{"perplexity", res.perplexity},
                          {"ppl_threshold", cfg.ppl_threshold},
                          {"class_consistency", res.class_consistency},
                          {"converged", res.converged},
                          {"final_loss", res.history.empty() ? 0.0 : res.history.back().loss}};
    save_checkpoint(backbone_checkpoint(res.params, world, {{"pretrain", to_json(cfg)}, {"metrics", metrics}}),
                    run.path("backbone.ckpt"));
    run.output("backbone.ckpt");
    write_json(run.path("metrics.json"), metrics);
    run.output("metrics.json");
    run.set("backbone_hash", hex64(params_hash(res.params)));
    run.finish();
    std::cout << run.path("backbone.ckpt").string() << "\n" << metrics.dump(2) << "\n";
    if (!res.converged) {
      throw ThresholdFailure("class-conditional perplexity " + std::to_string(res.perplexity) +
                             " is not below " + std::to_string(cfg.ppl_threshold));
    }
    return kExitOk;
  }
};

struct LearnCmd {
  bool style = false;
  std::string backbone, out, priors;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> concept_seed;
  TrainFlags flags;
  bool quiet = false;

  int run() {
    TrainConfig cfg = style ? TrainConfig::style_defaults() : TrainConfig::subject_defaults();
    cfg.seed = seed;
    flags.apply(cfg);
    if (style) cfg.loss.alpha = 0.0;
    const std::uint64_t cseed = concept_seed.value_or(seed);
    Run run(style ? "learn-style" : "learn-subject", out, seed);
    json resolved = to_json(cfg);
    resolved["concept_seed"] = cseed;
    resolved["backbone"] = backbone;
    run.config(resolved);
    auto bb = load_backbone(backbone, run);
    const Vocabulary& vocab = bb.world.vocab;

    std::ofstream losses(run.path("losses.jsonl"));
    auto on_step = [&](const LossReport& r) {
      losses << to_json(r).dump() << "\n";
      if (!quiet && r.step % 100 == 0) {
        std::cerr << "step " << r.step << " total " << r.total << " ntp " << r.ntp << "\n";
      }
    };
    TrainResult tr;
    json metrics;
    if (style) {
      const StyleSet ss = make_style(bb.world, cseed);
      tr = train_style(bb.params, bb.world, ss, cfg, on_step);
      metrics["style_name"] = ss.style_name;
      metrics["class"] = vocab.word_of(ss.depicted_class);
    } else {
      const SubjectSet subject = make_subject(bb.world, cseed);
      std::vector<TokenSequence> cached;
      if (!priors.empty()) {
        cached = priors_from(load_checkpoint(priors), vocab);
        run.input(priors);
      }
      tr = train_subject(bb.params, bb.world, subject, cfg, priors.empty() ? nullptr : &cached, on_step);
      save_checkpoint(priors_checkpoint(tr.priors, subject.class_name, derive_seed(cfg.seed, "priors")),
                      run.path("priors.ckpt"));
      run.output("priors.ckpt");

      DecodeConfig dc;
      dc.mode = DecodeMode::kGreedy;
      const ContextBank* banks[] = {&tr.bank};
      const auto tokens = generate(bb.params, banks, kSubjectPrompt, subject.class_name, dc);
      metrics["class"] = vocab.word_of(subject.class_name);
      metrics["n_references"] = subject.references.size();
      metrics["greedy_match"] = best_reference_match(tokens, subject, vocab, bb.world.codebook);
      metrics["fidelity"] = fidelity_proxy(bb.params, tokens, subject, bb.world.codebook);
    }
    losses.close();
    run.output("losses.jsonl");
    save_checkpoint(bank_checkpoint(tr.bank, vocab), run.path("bank.ckpt"));
    run.output("bank.ckpt");

    metrics["steps"] = tr.history.size();
    metrics["trainable_params"] = tr.bank.trainable_count();
    if (!tr.history.empty()) {
      metrics["initial_ntp"] = tr.history.front().ntp;
      metrics["final_ntp"] = tr.history.back().ntp;
      metrics["final_total"] = tr.history.back().total;
    }
    metrics["bank_hash"] = hex64(bank_hash(tr.bank));
    write_json(run.path("metrics.json"), metrics);
    run.output("metrics.json");
    close_backbone(bb, backbone, run);
    run.finish();
    std::cout << run.path("bank.ckpt").string() << "\n" << metrics.dump(2) << "\n";
    return kExitOk;
  }
};

struct GenerateCmd {
  std::string backbone, out, prompt, class_word;
  std::vector<std::string> banks;
  std::uint64_t seed = 0;
  DecodeFlags decode;

  int run() {
    Run run("generate", out, seed);
    const DecodeConfig dc = decode.get();
    json resolved = {{"backbone", backbone}, {"banks", banks}, {"prompt", prompt},
                     {"class", class_word},  {"decode", to_json(dc)}};
    auto bb = load_backbone(backbone, run);
    std::vector<ContextBank> loaded;
    for (const auto& p : banks) {
      loaded.push_back(bank_from(load_checkpoint(p)));
      run.input(p);
    }
    std::vector<const ContextBank*> ptrs;
    for (const auto& b : loaded) ptrs.push_back(&b);
    TokenId cls = 0;
    if (!class_word.empty()) {
      cls = class_token(bb.world, class_word);
    } else {
      require(!loaded.empty(), "--class is required without a bank");
      cls = loaded.front().class_name;
      resolved["class"] = bb.world.vocab.word_of(cls);
    }
    std::string templ = prompt;
    if (templ.empty()) {
      templ = "a photo of a";
      for (const auto& b : loaded) templ += b.kind == BankKind::kSubject ? " [V]" : "";
      templ += " [Class]";
      for (const auto& b : loaded) templ += b.kind == BankKind::kStyle ? " in [S] style" : "";
      resolved["prompt"] = templ;
    }
    run.config(resolved);
    const auto tokens = generate(bb.params, ptrs, templ, cls, dc);
    write_image_outputs(run, bb.world, templ, dc, tokens);
    close_backbone(bb, backbone, run);
    run.finish();
    std::cout << json(tokens).dump() << "\n";
    return kExitOk;
  }
};

struct ComposeCmd {
  std::string backbone, subject, style, out, prompt = "a photo of a [V] [Class] in [S] style";
  std::uint64_t seed = 0;
  DecodeFlags decode;

  int run() {
    Run run("compose", out, seed);
    const DecodeConfig dc = decode.get();
    run.config({{"backbone", backbone}, {"subject", subject}, {"style", style},
                {"prompt", prompt}, {"decode", to_json(dc)}});
    auto bb = load_backbone(backbone, run);
    const ContextBank sb = bank_from(load_checkpoint(subject));
    const ContextBank tb = bank_from(load_checkpoint(style));
    run.input(subject);
    run.input(style);
    const std::uint64_t hs = bank_hash(sb), ht = bank_hash(tb);
    const auto res = compose(bb.params, sb, tb, prompt, dc);
    require(bank_hash(sb) == hs && bank_hash(tb) == ht, "compose modified a bank");
    write_image_outputs(run, bb.world, prompt, dc, res.tokens);
    run.set("optimizer_steps", 0);
    run.set("bank_hashes", {{"subject", hex64(hs)}, {"style", hex64(ht)}});
    close_backbone(bb, backbone, run);
    run.finish();
    std::cout << json(res.tokens).dump() << "\n";
    return kExitOk;
  }
};

struct AuditCmd {
  std::string out;
  int n_layers = 9;
  int dim = 64;

  int run() {
    Run run("audit", out, 0);
    run.config({{"n_layers", n_layers}, {"dim", dim}});
    const auto rows = audit_table(n_layers, dim);
    write_json(run.path("audit.json"), to_json(rows));
    const std::string text = format_table(rows);
    std::ofstream(run.path("audit.txt")) << text;
    run.output("audit.json");
    run.output("audit.txt");
    run.finish();
    std::cout << text;
    return kExitOk;
  }
};

struct GradcheckCmd {
  std::string out;
  std::uint64_t seed = 0;
  double h = 1e-4;
  double tolerance = 1e-4;
  int dim = 16, layers = 2, n_layers = 2;

  int run() {
    require(h > 0.0, "--fd-step must be > 0");
    Run run("gradcheck", out, seed);
    run.config({{"seed", seed}, {"h", h}, {"tolerance", tolerance}, {"dim", dim},
                {"layers", layers}, {"n_layers", n_layers}});
    const GradcheckFixture fx = gradcheck_fixture(seed, dim, layers, n_layers);
    json reports = json::array();
    double worst = 0.0;
    for (GradTerm t : {GradTerm::kNtp, GradTerm::kDpp, GradTerm::kCasr, GradTerm::kTotal}) {
      const auto rep = gradcheck(fx.params, fx.bank, fx.subject_seq, fx.batch, fx.loss, h, t);
      reports.push_back(to_json(rep));
      worst = std::max(worst, rep.max_error);
      std::cout << grad_term_name(t) << ": max error " << rep.max_error << " over " << rep.n_checked
                << " scalars\n";
    }
    write_json(run.path("gradcheck.json"), {{"reports", reports}, {"max_error", worst},
                                            {"tolerance", tolerance}, {"passed", worst < tolerance}});
    run.output("gradcheck.json");
    run.finish();
    if (!(worst < tolerance)) {
      throw ThresholdFailure("gradient error " + std::to_string(worst) + " exceeds tolerance");
    }
    return kExitOk;
  }
};

struct SweepCmd {
  std::string backbone, out;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> concept_seed;
  std::vector<int> depths = {1, 3, 9, 12};
  int drift_samples = 1;
  TrainFlags flags;

  int run() {
    TrainConfig cfg;
    cfg.seed = seed;
    flags.apply(cfg);
    const std::uint64_t cseed = concept_seed.value_or(seed);
    Run run("sweep-layers", out, seed);
    json resolved = to_json(cfg);
    resolved["depths"] = depths;
    resolved["concept_seed"] = cseed;
    resolved["drift_samples"] = drift_samples;
    resolved["backbone"] = backbone;
    run.config(resolved);
    auto bb = load_backbone(backbone, run);
    const SubjectSet subject = make_subject(bb.world, cseed);
    const SweepTable t = sweep_layers(bb.params, bb.world, subject, depths, cfg, drift_samples);
    write_json(run.path("sweep.json"), to_json(t));
    const std::string text = format_table(t);
    std::ofstream(run.path("sweep.txt")) << text;
    run.output("sweep.json");
    run.output("sweep.txt");
    close_backbone(bb, backbone, run);
    run.finish();
    std::cout << text;
    return kExitOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"coar: layerwise context learning on a toy autoregressive model"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_help_all_flag("--help-all");
  auto add_cfg = [](CLI::App* s) {
    // handled before parsing; declared so that --help lists it
    s->add_option("--config", "JSON file of flag values; command-line flags override it");
  };

  PretrainCmd pre;
  auto* sp = app.add_subcommand("pretrain", "Train the toy backbone");
  sp->add_option("--seed", pre.seed, "World and initialization seed");
  sp->add_option("--steps", pre.steps, "Optimizer steps");
  sp->add_option("--batch-size", pre.batch_size, "Sequences per step");
  sp->add_option("--warmup", pre.warmup, "Warm-up steps");
  sp->add_option("--lr", pre.lr, "Peak learning rate");
  sp->add_option("--ppl-threshold", pre.ppl_threshold, "Convergence threshold; 0 disables");
  sp->add_option("--out", pre.out, "Run directory");
  sp->add_flag("--quiet", pre.quiet);
  add_cfg(sp);

  LearnCmd subj, sty;
  sty.style = true;
  for (auto [cmd, name, help] : {std::tuple{&subj, "learn-subject", "Learn a subject context bank"},
                                 std::tuple{&sty, "learn-style", "Learn a style context bank"}}) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--backbone", cmd->backbone, "Backbone checkpoint")->required();
    s->add_option("--seed", cmd->seed, "Training seed");
    s->add_option("--concept-seed", cmd->concept_seed, "Seed of the toy concept (defaults to --seed)");
    s->add_option("--out", cmd->out, "Run directory");
    s->add_flag("--quiet", cmd->quiet);
    if (!cmd->style) s->add_option("--priors", cmd->priors, "Reuse a priors.ckpt");
    cmd->flags.add(s);
    add_cfg(s);
  }

  GenerateCmd gen;
  auto* sg = app.add_subcommand("generate", "Decode an image with optional banks");
  sg->add_option("--backbone", gen.backbone, "Backbone checkpoint")->required();
  sg->add_option("--bank", gen.banks, "Bank checkpoint (repeatable)")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  sg->add_option("--prompt", gen.prompt, "Prompt template");
  sg->add_option("--class", gen.class_word, "Class word");
  sg->add_option("--seed", gen.seed, "Run seed (names the run directory)");
  sg->add_option("--out", gen.out, "Run directory");
  gen.decode.add(sg);
  add_cfg(sg);

  ComposeCmd comp;
  auto* sc = app.add_subcommand("compose", "Subject + style composition without training");
  sc->add_option("--backbone", comp.backbone, "Backbone checkpoint")->required();
  sc->add_option("--subject", comp.subject, "Subject bank")->required();
  sc->add_option("--style", comp.style, "Style bank")->required();
  sc->add_option("--prompt", comp.prompt, "Prompt template with [V], [S] and [Class]");
  sc->add_option("--seed", comp.seed, "Run seed (names the run directory)");
  sc->add_option("--out", comp.out, "Run directory");
  comp.decode.add(sc);
  add_cfg(sc);

  AuditCmd aud;
  auto* sa = app.add_subcommand("audit", "Trainable-parameter accounting");
  sa->add_option("--n-layers", aud.n_layers, "Depth of the toy bank row");
  sa->add_option("--dim", aud.dim, "Width of the toy bank row");
  sa->add_option("--out", aud.out, "Run directory");
  add_cfg(sa);

  GradcheckCmd gc;
  auto* sgc = app.add_subcommand("gradcheck", "Finite-difference check of every loss term");
  sgc->add_option("--seed", gc.seed, "Seed");
  sgc->add_option("--fd-step", gc.h, "Central-difference step h");
  sgc->add_option("--tolerance", gc.tolerance, "Maximum accepted error");
  sgc->add_option("--dim", gc.dim, "Model width of the random model");
  sgc->add_option("--layers", gc.layers, "Layers of the random model");
  sgc->add_option("--n-layers", gc.n_layers, "Injected layers");
  sgc->add_option("--out", gc.out, "Run directory");
  add_cfg(sgc);

  SweepCmd sw;
  auto* ss = app.add_subcommand("sweep-layers", "Train one bank per injection depth");
  ss->add_option("--backbone", sw.backbone, "Backbone checkpoint")->required();
  ss->add_option("--seed", sw.seed, "Training seed");
  ss->add_option("--concept-seed", sw.concept_seed, "Seed of the toy subject");
  ss->add_option("--depths", sw.depths, "Depths to sweep")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  ss->add_option("--drift-samples", sw.drift_samples, "Samples per held-out prompt");
  ss->add_option("--out", sw.out, "Run directory");
  sw.flags.add(ss);
  add_cfg(ss);

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = expand_config(args);
    std::reverse(args.begin(), args.end());  // CLI11 consumes a reversed vector
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  }

  try {
    if (*sp) return pre.run();
    for (LearnCmd* c : {&subj, &sty}) {
      if (app.got_subcommand(c->style ? "learn-style" : "learn-subject")) return c->run();
    }
    if (*sg) return gen.run();
    if (*sc) return comp.run();
    if (*sa) return aud.run();
    if (*sgc) return gc.run();
    if (*ss) return sw.run();
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const CorruptCheckpoint& e) {
    std::cerr << "corrupt checkpoint: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const UnsupportedVersion& e) {
    std::cerr << "unsupported checkpoint version: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const NumericFailure& e) {
    std::cerr << "numeric failure: " << e.what() << " (layer " << e.layer() << ", last good step "
              << e.last_good_step() << ")\n";
    return kExitNumeric;
  } catch (const ThresholdFailure& e) {
    std::cerr << "threshold not met: " << e.what() << "\n";
    return kExitThreshold;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitInvalid;
}
