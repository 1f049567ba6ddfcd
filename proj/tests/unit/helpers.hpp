#pragma once

#include "coar/backbone.hpp"
#include "coar/sequences.hpp"

#include <vector>

namespace coar::testing {

// 12 text + 12 image + 8 specials; the smallest lexicon prefix that still
// spells "a photo of a <class>" prompts.
inline BackboneConfig small_config(int dim = 16, int layers = 2) {
  BackboneConfig c;
  c.text_size = 12;
  c.image_size = 12;
  c.d_model = dim;
  c.n_layers = layers;
  c.n_heads = 2;
  c.max_seq = 40;
  c.image_pos_offset = 16;
  return c;
}

inline std::vector<TokenId> random_image(const Vocabulary& v, int n, Rng& rng) {
  std::vector<TokenId> out;
  for (int i = 0; i < n; ++i) out.push_back(v.image_token(rng.below(v.image_size())));
  return out;
}

inline double max_abs_diff(const Mat& a, const Mat& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace coar::testing
