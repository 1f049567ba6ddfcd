#include "coar/context.hpp"

namespace coar {

std::string_view bank_kind_name(BankKind k) {
  return k == BankKind::kSubject ? "subject" : "style";
}

ContextBank new_bank(int depth, int dim, BankKind kind, TokenId class_name, std::uint64_t seed) {
  require(depth >= 1 && dim >= 1, "bank depth and dim must be >= 1");
  ContextBank b;
  b.kind = kind;
  b.class_name = class_name;
  Rng rng(derive_seed(seed, "bank-init"));
  b.p_v.resize(depth, dim);
  b.p_i.resize(depth, dim);
  for (Eigen::Index i = 0; i < b.p_v.size(); ++i) b.p_v.data()[i] = 0.02 * rng.normal();
  for (Eigen::Index i = 0; i < b.p_i.size(); ++i) b.p_i.data()[i] = 0.02 * rng.normal();
  return b;
}

void init_from_subject(ContextBank& bank, const Mat& image_stats, const Mat& word_hidden,
                       TextInit text_init) {
  require(image_stats.rows() == bank.depth() && image_stats.cols() == bank.dim(),
          "image statistics shape does not match bank");
  require(word_hidden.rows() == bank.depth() && word_hidden.cols() == bank.dim(),
          "word activations shape does not match bank");
  bank.p_i = image_stats;
  bank.casr_anchor = image_stats;
  if (text_init == TextInit::kClassWord) bank.p_v = word_hidden;
}

InjectionPlan make_plan(std::span<const ContextBank* const> banks, const TokenSequence& seq) {
  require(banks.size() == 1 || banks.size() == 2, "make_plan takes one or two banks");
  if (banks.size() == 2) {
    require(banks[0]->kind != banks[1]->kind, "two banks of the same kind");
    require(seq.ctx_img_positions.size() >= 2, "composition needs two ctx image slots");
  } else {
    require(!seq.ctx_img_positions.empty(), "sequence has no ctx image slot");
  }
  InjectionPlan plan;
  for (std::size_t b = 0; b < banks.size(); ++b) {
    const ContextBank& bank = *banks[b];
    int slot = 0;
    if (banks.size() == 2) slot = bank.kind == BankKind::kSubject ? 0 : 1;
    const auto& text_pos = bank.kind == BankKind::kSubject ? seq.v_positions : seq.s_positions;
    const int img_pos = seq.ctx_img_positions[static_cast<std::size_t>(slot)];
    for (int i = 0; i < bank.depth(); ++i) {
      if (!text_pos.empty()) {
        plan.entries.push_back(
            {i + 1, text_pos.front(), bank.p_v.row(i).transpose(), static_cast<int>(b), InjectionSlot::kText});
      }
      plan.entries.push_back(
          {i + 1, img_pos, bank.p_i.row(i).transpose(), static_cast<int>(b), InjectionSlot::kImage});
    }
  }
  return plan;
}

InjectionPlan make_plan(const ContextBank& bank, const TokenSequence& seq) {
  const ContextBank* one[] = {&bank};
  return make_plan(one, seq);
}

Mat capture_image_stats(const BackboneParams& params, std::span<const TokenId> text,
                        std::span<const std::vector<TokenId>> images, int depth) {
  require(!images.empty(), "no reference images");
  require(depth >= 1 && depth <= params.config.n_layers, "depth exceeds backbone layers");
  const Vocabulary vocab = params.config.vocab();
  Mat sum = Mat::Zero(depth, params.config.d_model);
  long count = 0;
  for (const auto& img : images) {
    const TokenSequence seq = assemble(vocab, text, img, 0);
    const auto fwd = forward(params, seq, {}, AttentionMask::causal(seq.size()));
    for (int i = 0; i < depth; ++i) {
      sum.row(i) += fwd.layer_inputs[static_cast<std::size_t>(i)]
                        .middleRows(seq.image_begin, seq.image_length())
                        .colwise()
                        .sum();
    }
    count += seq.image_length();
  }
  return sum / static_cast<double>(count);
}

std::vector<TokenId> image_tokens_of(const Vocabulary& vocab, const PixelGrid& grid,
                                     const Codebook& cb) {
  std::vector<TokenId> out;
  for (int c : quantize(grid, cb)) out.push_back(vocab.image_token(c));
  return out;
}

Mat capture_subject_stats(const BackboneParams& params, const SubjectSet& refs,
                          const Codebook& cb, int depth) {
  require(!refs.references.empty(), "subject has no references");
  const Vocabulary vocab = params.config.vocab();
  const auto prompt = tokenize_prompt(vocab, "a photo of a [Class]", refs.class_name);
  std::vector<std::vector<TokenId>> images;
  for (const auto& g : refs.references) images.push_back(image_tokens_of(vocab, g, cb));
  return capture_image_stats(params, prompt.ids, images, depth);
}

Mat capture_position_hidden(const BackboneParams& params, const TokenSequence& seq, int position,
                            int depth) {
  require(position >= 0 && position < seq.size(), "position out of range");
  require(depth >= 1 && depth <= params.config.n_layers, "depth exceeds backbone layers");
  const auto fwd = forward(params, seq, {}, AttentionMask::causal(seq.size()));
  Mat out(depth, params.config.d_model);
  for (int i = 0; i < depth; ++i) out.row(i) = fwd.layer_inputs[static_cast<std::size_t>(i)].row(position);
  return out;
}

}  // namespace coar
