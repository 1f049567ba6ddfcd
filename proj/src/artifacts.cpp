#include "coar/artifacts.hpp"

namespace coar {

namespace {

void expect_kind(const Checkpoint& c, const std::string& kind) {
  if (c.kind != kind) {
    throw InvalidArgument("expected a '" + kind + "' checkpoint, got '" + c.kind + "'");
  }
}

Tensor id_tensor(const std::string& name, std::span<const TokenId> ids) {
  Tensor t;
  t.name = name;
  t.shape = {static_cast<std::int64_t>(ids.size())};
  t.data.assign(ids.begin(), ids.end());
  return t;
}

std::vector<TokenId> ids_from(const Tensor& t) {
  std::vector<TokenId> out;
  out.reserve(t.data.size());
  for (double d : t.data) out.push_back(static_cast<TokenId>(d));
  return out;
}

}  // namespace

nlohmann::json to_json(const BackboneConfig& b) {
  return {{"text_size", b.text_size}, {"image_size", b.image_size}, {"d_model", b.d_model},
          {"n_layers", b.n_layers},   {"n_heads", b.n_heads},       {"mlp_mult", b.mlp_mult},
          {"max_seq", b.max_seq},     {"image_pos_offset", b.image_pos_offset},
          {"rms_eps", b.rms_eps}};
}

BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig b;
  b.text_size = j.at("text_size").get<int>();
  b.image_size = j.at("image_size").get<int>();
  b.d_model = j.at("d_model").get<int>();
  b.n_layers = j.at("n_layers").get<int>();
  b.n_heads = j.at("n_heads").get<int>();
  b.mlp_mult = j.at("mlp_mult").get<int>();
  b.max_seq = j.at("max_seq").get<int>();
  b.image_pos_offset = j.at("image_pos_offset").get<int>();
  b.rms_eps = j.at("rms_eps").get<double>();
  return b;
}

Checkpoint backbone_checkpoint(const BackboneParams& p, const World& world,
                               const nlohmann::json& extra_meta) {
  Checkpoint c;
  c.kind = "backbone";
  c.meta = extra_meta;
  c.meta["config"] = to_json(p.config);
  c.meta["world"] = world_to_json(world);
  c.meta["frozen"] = p.frozen;
  p.for_each([&](const std::string& name, const Mat& m) { c.tensors.push_back(tensor_from(name, m)); });
  return c;
}

BackboneParams backbone_from(const Checkpoint& c) {
  expect_kind(c, "backbone");
  BackboneParams p;
  try {
    p = zeros_like(init_backbone(backbone_config_from_json(c.meta.at("config")), 0));
    p.frozen = c.meta.value("frozen", true);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("bad backbone manifest: ") + e.what());
  }
  p.for_each([&](const std::string& name, Mat& m) {
    const Tensor& t = c.tensor(name);
    if (t.shape.size() != 2 || t.shape[0] != m.rows() || t.shape[1] != m.cols()) {
      throw CorruptCheckpoint("tensor '" + name + "' has the wrong shape");
    }
    m = matrix_from(t);
  });
  return p;
}

World world_from(const Checkpoint& c) {
  expect_kind(c, "backbone");
  if (!c.meta.contains("world")) throw CorruptCheckpoint("backbone checkpoint has no world");
  return world_from_json(c.meta.at("world"));
}

Checkpoint bank_checkpoint(const ContextBank& b, const Vocabulary& vocab) {
  Checkpoint c;
  c.kind = "bank";
  c.meta = {{"bank_kind", std::string(bank_kind_name(b.kind))},
            {"class_name", b.class_name},
            {"class_word", vocab.word_of(b.class_name)},
            {"depth", b.depth()},
            {"dim", b.dim()},
            {"has_anchor", b.casr_anchor.has_value()}};
  c.tensors.push_back(tensor_from("p_v", b.p_v));
  c.tensors.push_back(tensor_from("p_i", b.p_i));
  if (b.casr_anchor) c.tensors.push_back(tensor_from("casr_anchor", *b.casr_anchor));
  return c;
}

ContextBank bank_from(const Checkpoint& c) {
  expect_kind(c, "bank");
  ContextBank b;
  try {
    const auto kind = c.meta.at("bank_kind").get<std::string>();
    if (kind != "subject" && kind != "style") throw CorruptCheckpoint("unknown bank kind " + kind);
    b.kind = kind == "subject" ? BankKind::kSubject : BankKind::kStyle;
    b.class_name = c.meta.at("class_name").get<TokenId>();
    b.p_v = matrix_from(c.tensor("p_v"));
    b.p_i = matrix_from(c.tensor("p_i"));
    if (c.meta.at("has_anchor").get<bool>()) b.casr_anchor = matrix_from(c.tensor("casr_anchor"));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("bad bank manifest: ") + e.what());
  }
  if (b.p_v.rows() != b.p_i.rows() || b.p_v.cols() != b.p_i.cols()) {
    throw CorruptCheckpoint("bank tensors have mismatched shapes");
  }
  return b;
}

Checkpoint priors_checkpoint(const std::vector<TokenSequence>& priors, TokenId class_name,
                             std::uint64_t seed) {
  Checkpoint c;
  c.kind = "priors";
  c.meta = {{"class_name", class_name}, {"seed", seed}, {"count", priors.size()}};
  for (std::size_t i = 0; i < priors.size(); ++i) {
    const auto d = disassemble(priors[i]);
    c.tensors.push_back(id_tensor("prior." + std::to_string(i) + ".text", d.text));
    c.tensors.push_back(id_tensor("prior." + std::to_string(i) + ".image", d.image));
  }
  return c;
}

std::vector<TokenSequence> priors_from(const Checkpoint& c, const Vocabulary& vocab) {
  expect_kind(c, "priors");
  std::size_t n = 0;
  try {
    n = c.meta.at("count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("bad priors manifest: ") + e.what());
  }
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto text = ids_from(c.tensor("prior." + std::to_string(i) + ".text"));
    const auto image = ids_from(c.tensor("prior." + std::to_string(i) + ".image"));
    out.push_back(assemble(vocab, text, image, 0));
  }
  return out;
}

}  // namespace coar
