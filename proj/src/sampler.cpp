#include "coar/sampler.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace coar {

void DecodeConfig::validate() const {
  require(max_tokens >= 1, "max_tokens must be >= 1");
  if (mode == DecodeMode::kTopK) {
    require(k >= 1, "top-k needs k >= 1");
    require(temperature > 0.0, "top-k needs temperature > 0");
  }
}

nlohmann::json to_json(const DecodeConfig& dc) {
  return {{"mode", dc.mode == DecodeMode::kGreedy ? "greedy" : "topk"},
          {"k", dc.k},
          {"temperature", dc.temperature},
          {"seed", dc.seed},
          {"max_tokens", dc.max_tokens}};
}

std::vector<TokenId> decode_image(const BackboneParams& params, const DecodeInputs& in,
                                  const DecodeConfig& dc) {
  dc.validate();
  const Vocabulary vocab = params.config.vocab();
  const TokenSequence& layout = in.layout;
  require(dc.max_tokens <= layout.image_length(), "max_tokens exceeds the laid-out image span");
  Rng rng(derive_seed(dc.seed, "decode"));

  std::vector<TokenId> ids(layout.ids.begin(), layout.ids.begin() + layout.image_begin);
  std::vector<TokenId> out;
  out.reserve(static_cast<std::size_t>(dc.max_tokens));
  const int n_img = vocab.image_size();
  for (int t = 0; t < dc.max_tokens; ++t) {
    const int len = static_cast<int>(ids.size());
    const auto fwd = forward(params, ids, in.plan, in.mask.prefix(len));
    const RowVec logits = fwd.logits.row(len - 1).segment(vocab.image_begin(), n_img);
    int pick = 0;
    if (dc.mode == DecodeMode::kGreedy) {
      logits.maxCoeff(&pick);  // first maximum
    } else {
      std::vector<int> order(static_cast<std::size_t>(n_img));
      std::iota(order.begin(), order.end(), 0);
      const int k = std::min(dc.k, n_img);
      std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
        return logits(a) > logits(b) || (logits(a) == logits(b) && a < b);
      });
      const double top = logits(order[0]) / dc.temperature;
      std::vector<double> w(static_cast<std::size_t>(k));
      double sum = 0.0;
      for (int i = 0; i < k; ++i) {
        w[static_cast<std::size_t>(i)] = std::exp(logits(order[static_cast<std::size_t>(i)]) / dc.temperature - top);
        sum += w[static_cast<std::size_t>(i)];
      }
      double u = rng.uniform() * sum;
      pick = order[static_cast<std::size_t>(k - 1)];
      for (int i = 0; i < k; ++i) {
        u -= w[static_cast<std::size_t>(i)];
        if (u < 0.0) {
          pick = order[static_cast<std::size_t>(i)];
          break;
        }
      }
    }
    const TokenId tok = vocab.image_token(pick);
    out.push_back(tok);
    ids.push_back(tok);
  }
  return out;
}

DecodeInputs prepare_generation(const BackboneParams& params,
                                std::span<const ContextBank* const> banks,
                                std::string_view prompt, TokenId class_name, int n_image_tokens,
                                MaskKind mask_kind) {
  require(banks.size() <= 2, "at most two banks");
  const Vocabulary vocab = params.config.vocab();
  const PromptTokens pt = tokenize_prompt(vocab, prompt, class_name);
  std::size_t n_subject = 0, n_style = 0;
  for (const auto* b : banks) (b->kind == BankKind::kSubject ? n_subject : n_style)++;
  require(pt.v_positions.size() == n_subject,
          "prompt [V] placeholders do not match the number of subject banks");
  require(pt.s_positions.size() == n_style,
          "prompt [S] placeholders do not match the number of style banks");

  const std::vector<TokenId> dummy(static_cast<std::size_t>(n_image_tokens), vocab.image_begin());
  DecodeInputs in;
  in.layout = assemble(vocab, pt.ids, dummy, static_cast<int>(banks.size()));
  if (!banks.empty()) in.plan = make_plan(banks, in.layout);
  in.mask = mask_kind == MaskKind::kCausalIdentity ? build_identity_mask(in.layout)
                                                   : AttentionMask::causal(in.layout.size());
  return in;
}

std::vector<TokenId> generate(const BackboneParams& params,
                              std::span<const ContextBank* const> banks, std::string_view prompt,
                              TokenId class_name, const DecodeConfig& dc, MaskKind mask_kind) {
  const auto in = prepare_generation(params, banks, prompt, class_name, dc.max_tokens, mask_kind);
  return decode_image(params, in, dc);
}

ComposeResult compose(const BackboneParams& params, const ContextBank& subject_bank,
                      const ContextBank& style_bank, std::string_view prompt,
                      const DecodeConfig& dc) {
  require(subject_bank.kind == BankKind::kSubject, "first bank must be a subject bank");
  require(style_bank.kind == BankKind::kStyle, "second bank must be a style bank");
  const ContextBank* banks[] = {&subject_bank, &style_bank};
  ComposeResult res;
  res.inputs = prepare_generation(params, banks, prompt, subject_bank.class_name, dc.max_tokens,
                                  MaskKind::kCausalIdentity);
  res.tokens = decode_image(params, res.inputs, dc);
  return res;
}

void write_ppm(const std::filesystem::path& path, const Mat& patches, int width, int height,
               int scale) {
  require(patches.rows() == width * height, "patch count does not match grid size");
  const bool rgb = patches.cols() == 12;
  const int sub = rgb ? 2 : 1;
  const int W = width * sub * scale;
  const int H = height * sub * scale;
  std::vector<unsigned char> px(static_cast<std::size_t>(W) * static_cast<std::size_t>(H) * 3);
  auto clamp8 = [](double v) {
    return static_cast<unsigned char>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  };
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const int pr = y / (sub * scale), pc = x / (sub * scale);
      const auto patch = patches.row(pr * width + pc);
      unsigned char* dst = &px[(static_cast<std::size_t>(y) * W + x) * 3];
      if (rgb) {
        const int sp = ((y / scale) % 2) * 2 + (x / scale) % 2;
        for (int c = 0; c < 3; ++c) dst[c] = clamp8(patch(sp * 3 + c));
      } else {
        const auto g = clamp8(patch.mean());
        dst[0] = dst[1] = dst[2] = g;
      }
    }
  }
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), "cannot open '" + path.string() + "'");
  f << "P6\n" << W << " " << H << "\n255\n";
  f.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

}  // namespace coar
