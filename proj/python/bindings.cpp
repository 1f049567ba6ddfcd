#include "coar/artifacts.hpp"
#include "coar/audit.hpp"
#include "coar/pretrain.hpp"
#include "coar/sampler.hpp"
#include "coar/trainer.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace coar;

namespace {

struct Backbone {
  BackboneParams params;
  World world;
};

nlohmann::json audit_rows(int depth, int dim) { return to_json(audit_table(depth, dim)); }

py::object to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

DecodeConfig decode_config(bool greedy_mode, int k, double temperature, std::uint64_t seed, int max_tokens) {
  DecodeConfig dc;
  dc.mode = greedy_mode ? DecodeMode::kGreedy : DecodeMode::kTopK;
  dc.k = k;
  dc.temperature = temperature;
  dc.seed = seed;
  dc.max_tokens = max_tokens;
  return dc;
}

py::list history_of(const std::vector<LossReport>& h) {
  py::list out;
  for (const auto& r : h) out.append(to_py(to_json(r)));
  return out;
}

}  // namespace

PYBIND11_MODULE(_coar, m) {
  m.doc() = "Layerwise context learning on a toy autoregressive model";

  auto base = py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<NumericFailure>(m, "NumericFailure", PyExc_ArithmeticError);
  py::register_exception<CorruptCheckpoint>(m, "CorruptCheckpoint", PyExc_IOError);
  py::register_exception<UnsupportedVersion>(m, "UnsupportedVersion", PyExc_IOError);
  (void)base;

  m.def("context_param_count", &context_param_count, py::arg("n_layers"), py::arg("dim"));
  m.def("lora_param_estimate", &lora_param_estimate, py::arg("d"), py::arg("rank"),
        py::arg("n_attention_modules"));
  m.def(
      "audit_table", [](int depth, int dim) { return to_py(audit_rows(depth, dim)); },
      py::arg("toy_depth") = 0, py::arg("toy_dim") = 0);
  m.def(
      "kl_divergence", [](const Mat& ref, const Mat& q) { return kl_divergence(ref, q); },
      py::arg("logits_ref"), py::arg("logits_q"));

  py::class_<ContextBank>(m, "Bank")
      .def_static(
          "load", [](const std::string& path) { return bank_from(load_checkpoint(path)); },
          py::arg("path"))
      .def(
          "save",
          [](const ContextBank& b, const std::string& path) {
            return hex64(save_checkpoint(bank_checkpoint(b, Vocabulary()), path));
          },
          py::arg("path"))
      .def_property_readonly("kind", [](const ContextBank& b) { return std::string(bank_kind_name(b.kind)); })
      .def_property_readonly("depth", &ContextBank::depth)
      .def_property_readonly("dim", &ContextBank::dim)
      .def_property_readonly("trainable_count", &ContextBank::trainable_count)
      .def_property_readonly("hash", [](const ContextBank& b) { return hex64(bank_hash(b)); })
      .def_readonly("p_v", &ContextBank::p_v)
      .def_readonly("p_i", &ContextBank::p_i)
      .def_property_readonly("casr", [](const ContextBank& b) { return casr_loss(b); });

  py::class_<Backbone>(m, "Backbone")
      .def_static(
          "load",
          [](const std::string& path) {
            const Checkpoint c = load_checkpoint(path);
            Backbone b{backbone_from(c), world_from(c)};
            b.params.frozen = true;
            return b;
          },
          py::arg("path"))
      .def_static(
          "pretrain",
          [](std::uint64_t seed, int steps, int batch_size) {
            PretrainConfig cfg;
            cfg.seed = seed;
            cfg.steps = steps;
            cfg.batch_size = batch_size;
            cfg.ppl_threshold = 0.0;
            World w = build_world(seed);
            PretrainResult r;
            {
              py::gil_scoped_release release;
              r = pretrain_backbone(w, cfg);
            }
            Backbone b{std::move(r.params), std::move(w)};
            b.params.frozen = true;
            return b;
          },
          py::arg("seed") = 3, py::arg("steps") = 0, py::arg("batch_size") = 4)
      .def(
          "save",
          [](const Backbone& b, const std::string& path) {
            return hex64(save_checkpoint(backbone_checkpoint(b.params, b.world), path));
          },
          py::arg("path"))
      .def_property_readonly("hash", [](const Backbone& b) { return hex64(params_hash(b.params)); })
      .def_property_readonly("config", [](const Backbone& b) { return to_py(to_json(b.params.config)); })
      .def_property_readonly("class_names",
                             [](const Backbone& b) {
                               std::vector<std::string> out;
                               for (const auto& c : b.world.classes) out.push_back(c.name);
                               return out;
                             })
      .def(
          "generate",
          [](const Backbone& b, const std::string& prompt, const std::string& class_word,
             const std::vector<const ContextBank*>& banks, bool greedy_mode, int k, double temperature,
             std::uint64_t seed, int max_tokens) {
            py::gil_scoped_release release;
            return generate(b.params, banks, prompt, b.params.config.vocab().word(class_word),
                            decode_config(greedy_mode, k, temperature, seed, max_tokens));
          },
          py::arg("prompt"), py::arg("class_word"), py::arg("banks") = std::vector<const ContextBank*>{},
          py::arg("greedy") = false, py::arg("k") = 20, py::arg("temperature") = 1.0, py::arg("seed") = 0,
          py::arg("max_tokens") = kImageTokens)
      .def(
          "compose",
          [](const Backbone& b, const ContextBank& subject, const ContextBank& style,
             const std::string& prompt, bool greedy_mode, std::uint64_t seed) {
            py::gil_scoped_release release;
            return compose(b.params, subject, style, prompt,
                           decode_config(greedy_mode, 20, 1.0, seed, kImageTokens))
                .tokens;
          },
          py::arg("subject"), py::arg("style"),
          py::arg("prompt") = "a photo of [V] [Class] in [S] style", py::arg("greedy") = true,
          py::arg("seed") = 0)
      .def(
          "learn_subject",
          [](const Backbone& b, std::uint64_t seed, int steps, int n_layers, double alpha) {
            TrainConfig cfg = TrainConfig::subject_defaults();
            cfg.seed = seed;
            cfg.steps = steps;
            cfg.n_layers = n_layers;
            cfg.loss.alpha = alpha;
            TrainResult r;
            {
              py::gil_scoped_release release;
              r = train_subject(b.params, b.world, make_subject(b.world, seed), cfg);
            }
            return py::make_tuple(r.bank, history_of(r.history));
          },
          py::arg("seed") = 1, py::arg("steps") = 1000, py::arg("n_layers") = 9, py::arg("alpha") = 1e-2)
      .def(
          "learn_style",
          [](const Backbone& b, std::uint64_t seed, int steps, int n_layers) {
            TrainConfig cfg = TrainConfig::style_defaults();
            cfg.seed = seed;
            cfg.steps = steps;
            cfg.n_layers = n_layers;
            TrainResult r;
            {
              py::gil_scoped_release release;
              r = train_style(b.params, b.world, make_style(b.world, seed), cfg);
            }
            return py::make_tuple(r.bank, history_of(r.history));
          },
          py::arg("seed") = 2, py::arg("steps") = 600, py::arg("n_layers") = 3);

  m.def(
      "gradcheck",
      [](std::uint64_t seed, double h) {
        const auto fx = gradcheck_fixture(seed);
        py::dict out;
        for (GradTerm t : {GradTerm::kNtp, GradTerm::kDpp, GradTerm::kCasr, GradTerm::kTotal}) {
          const auto r = gradcheck(fx.params, fx.bank, fx.subject_seq, fx.batch, fx.loss, h, t);
          out[py::str(std::string(grad_term_name(t)))] = to_py(to_json(r));
        }
        return out;
      },
      py::arg("seed") = 11, py::arg("h") = 1e-4);
}
