#include "coar/backbone.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <set>

namespace coar {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// tanh-approximate GELU. Returns gelu(z) and stores the inner tanh in `t`
// for the backward pass.
Mat gelu(const Mat& z, Mat& t) {
  const Eigen::ArrayXXd u = kGeluC * (z.array() + kGeluA * z.array().cube());
  const Eigen::ArrayXXd e = (-2.0 * u.abs()).exp();
  t = (((1.0 - e) / (1.0 + e)) * u.sign()).matrix();
  return (0.5 * z.array() * (1.0 + t.array())).matrix();
}

Mat gelu_grad(const Mat& z, const Mat& t) {
  const auto za = z.array();
  const auto ta = t.array();
  return (0.5 * (1.0 + ta) +
          0.5 * za * (1.0 - ta.square()) * kGeluC * (1.0 + 3.0 * kGeluA * za.square()))
      .matrix();
}

Mat normal_matrix(Rng& rng, int rows, int cols, double stddev) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

// y = x * inv(row) * gain(col)
Mat rms_norm(const Mat& x, const Mat& gain, double eps, Vec& inv) {
  const double d = static_cast<double>(x.cols());
  inv = ((x.array().square().rowwise().sum() / d) + eps).rsqrt().matrix();
  return (x.array().colwise() * inv.array()).rowwise() * gain.row(0).array();
}

Mat rms_norm_backward(const Mat& x, const Vec& inv, const Mat& gain, const Mat& dy,
                      Mat* dgain) {
  const double d = static_cast<double>(x.cols());
  if (dgain) {
    *dgain += ((dy.array() * x.array()).colwise() * inv.array()).colwise().sum().matrix();
  }
  const Mat u = dy.array().rowwise() * gain.row(0).array();
  const Vec ux = (u.array() * x.array()).rowwise().sum().matrix();
  const Vec coef = (inv.array().cube() * ux.array() / d).matrix();
  return (u.array().colwise() * inv.array() - x.array().colwise() * coef.array()).matrix();
}

void check_finite(const Mat& m, int layer) {
  if (!m.allFinite()) {
    throw NumericFailure("non-finite activation at layer " + std::to_string(layer), layer);
  }
}

}  // namespace

std::size_t BackboneParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Mat& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

bool BackboneParams::all_finite() const {
  bool ok = true;
  for_each([&](const std::string&, const Mat& t) { ok = ok && t.allFinite(); });
  return ok;
}

std::vector<int> position_ids(const BackboneConfig& cfg, std::span<const TokenId> ids) {
  const Vocabulary vocab = cfg.vocab();
  const int S = static_cast<int>(ids.size());
  int image_begin = S;
  for (int j = 0; j < S; ++j) {
    if (ids[static_cast<std::size_t>(j)] == vocab.boi()) {
      image_begin = j + 1;
      while (image_begin < S && ids[static_cast<std::size_t>(image_begin)] == vocab.ctx_img()) ++image_begin;
      break;
    }
  }
  std::vector<int> pos(static_cast<std::size_t>(S));
  if (image_begin == S) {
    require(S <= cfg.max_seq, "sequence longer than max_seq");
    for (int j = 0; j < S; ++j) pos[static_cast<std::size_t>(j)] = j;
    return pos;
  }
  require(image_begin <= cfg.image_pos_offset, "text prefix longer than image_pos_offset");
  require(cfg.image_pos_offset + (S - image_begin) <= cfg.max_seq, "image span exceeds max_seq");
  for (int j = 0; j < S; ++j) {
    pos[static_cast<std::size_t>(j)] = j < image_begin ? j : cfg.image_pos_offset + (j - image_begin);
  }
  return pos;
}

BackboneParams init_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  require(cfg.d_model >= 1 && cfg.n_layers >= 1 && cfg.n_heads >= 1, "bad backbone config");
  require(cfg.d_model % cfg.n_heads == 0, "d_model must be divisible by n_heads");
  Rng rng(derive_seed(seed, "backbone-init"));
  const int D = cfg.d_model;
  const int H = cfg.mlp_mult * D;
  const double resid = 1.0 / std::sqrt(2.0 * cfg.n_layers);

  BackboneParams p;
  p.config = cfg;
  p.embed = normal_matrix(rng, cfg.vocab_size(), D, 0.1);
  const Vocabulary vocab = cfg.vocab();
  for (TokenId id : {vocab.placeholder_v(), vocab.placeholder_s(), vocab.ctx_img()}) {
    p.embed.row(id).setZero();
  }
  p.pos_embed = normal_matrix(rng, cfg.max_seq, D, 0.1);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.attn_gain = Mat::Ones(1, D);
    lp.wq = normal_matrix(rng, D, D, 1.0 / std::sqrt(D));
    lp.wk = normal_matrix(rng, D, D, 1.0 / std::sqrt(D));
    lp.wv = normal_matrix(rng, D, D, 1.0 / std::sqrt(D));
    lp.wo = normal_matrix(rng, D, D, resid / std::sqrt(D));
    lp.mlp_gain = Mat::Ones(1, D);
    lp.w1 = normal_matrix(rng, D, H, 1.0 / std::sqrt(D));
    lp.w2 = normal_matrix(rng, H, D, resid / std::sqrt(H));
    p.layers.push_back(std::move(lp));
  }
  p.final_gain = Mat::Ones(1, D);
  return p;
}

BackboneParams zeros_like(const BackboneParams& p) {
  BackboneParams z = p;
  z.for_each([](const std::string&, Mat& t) { t.setZero(); });
  return z;
}

std::uint64_t params_hash(const BackboneParams& p) {
  const auto& c = p.config;
  std::string head = std::to_string(c.text_size) + "," + std::to_string(c.image_size) + "," +
                     std::to_string(c.d_model) + "," + std::to_string(c.n_layers) + "," +
                     std::to_string(c.n_heads) + "," + std::to_string(c.mlp_mult) + "," +
                     std::to_string(c.max_seq) + "," + std::to_string(c.image_pos_offset);
  std::uint64_t h = fnv1a64(head);
  p.for_each([&](const std::string& name, const Mat& t) {
    h = fnv1a64(name, h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(t.data()),
                                 static_cast<std::size_t>(t.size()) * sizeof(double)),
                h);
  });
  return h;
}

AttentionMask AttentionMask::causal(int size) {
  AttentionMask m;
  m.size = size;
  m.kind = MaskKind::kCausal;
  m.allowed.assign(static_cast<std::size_t>(size) * static_cast<std::size_t>(size), 0);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c <= r; ++c) m.set(r, c, true);
  }
  return m;
}

AttentionMask AttentionMask::prefix(int n) const {
  require(n >= 0 && n <= size, "mask prefix longer than mask");
  AttentionMask m;
  m.size = n;
  m.kind = kind;
  m.allowed.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) m.set(r, c, at(r, c));
  }
  return m;
}

AttentionMask build_identity_mask(const TokenSequence& seq) {
  require(!seq.v_positions.empty() && !seq.s_positions.empty() &&
              seq.ctx_img_positions.size() == 2,
          "identity mask needs both subject and style context positions");
  std::vector<int> subject = seq.v_positions;
  subject.push_back(seq.ctx_img_positions[0]);
  std::vector<int> style = seq.s_positions;
  style.push_back(seq.ctx_img_positions[1]);

  AttentionMask m = AttentionMask::causal(seq.size());
  m.kind = MaskKind::kCausalIdentity;
  for (int r : subject) {
    for (int c : style) {
      m.set(r, c, false);
      m.set(c, r, false);
    }
  }
  return m;
}

namespace {

void block_forward(const BackboneConfig& cfg, const LayerParams& lp, Mat& x,
                   const AttentionMask& mask, LayerTape* tape, std::vector<Mat>* attn) {
  const int S = static_cast<int>(x.rows());
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Vec inv1;
  Mat a = rms_norm(x, lp.attn_gain, cfg.rms_eps, inv1);
  Mat q = a * lp.wq;
  Mat k = a * lp.wk;
  Mat v = a * lp.wv;
  Mat o(S, cfg.d_model);
  std::vector<Mat> probs;
  for (int h = 0; h < cfg.n_heads; ++h) {
    Mat s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
    // every mask is a subset of the causal one
    for (int r = 0; r < S; ++r) {
      auto row = s.row(r).head(r + 1);
      if (mask.kind != MaskKind::kCausal) {
        for (int c = 0; c <= r; ++c) {
          if (!mask.at(r, c)) row(c) = -std::numeric_limits<double>::infinity();
        }
      }
      row = (row.array() - row.maxCoeff()).exp().matrix();
      if (mask.kind != MaskKind::kCausal) {
        for (int c = 0; c <= r; ++c) {
          if (!mask.at(r, c)) row(c) = 0.0;
        }
      }
      row /= row.sum();
      s.row(r).tail(S - r - 1).setZero();
    }
    o.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
    probs.push_back(std::move(s));
  }
  Mat hres = x + o * lp.wo;
  Vec inv2;
  Mat b = rms_norm(hres, lp.mlp_gain, cfg.rms_eps, inv2);
  Mat z = b * lp.w1;
  Mat tanh_z;
  Mat g = gelu(z, tanh_z);
  Mat out = hres + g * lp.w2;

  if (attn) *attn = probs;
  if (tape) {
    tape->x = x;
    tape->inv1 = std::move(inv1);
    tape->a = std::move(a);
    tape->q = std::move(q);
    tape->k = std::move(k);
    tape->v = std::move(v);
    tape->probs = std::move(probs);
    tape->o = std::move(o);
    tape->h = std::move(hres);
    tape->inv2 = std::move(inv2);
    tape->b = std::move(b);
    tape->z = std::move(z);
    tape->g = std::move(g);
    tape->tanh_z = std::move(tanh_z);
  }
  x = std::move(out);
}

// dx: in = d(block output), out = d(block input)
void block_backward(const BackboneConfig& cfg, const LayerParams& lp, const LayerTape& t,
                    Mat& dx, LayerParams* wg) {
  const int S = static_cast<int>(t.x.rows());
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // mlp
  Mat dg = dx * lp.w2.transpose();
  if (wg) wg->w2.noalias() += t.g.transpose() * dx;
  Mat dz = dg.array() * gelu_grad(t.z, t.tanh_z).array();
  if (wg) wg->w1.noalias() += t.b.transpose() * dz;
  Mat db = dz * lp.w1.transpose();
  Mat dh_res = dx + rms_norm_backward(t.h, t.inv2, lp.mlp_gain, db, wg ? &wg->mlp_gain : nullptr);

  // attention
  Mat d_o = dh_res * lp.wo.transpose();
  if (wg) wg->wo.noalias() += t.o.transpose() * dh_res;
  Mat dq(S, cfg.d_model), dk(S, cfg.d_model), dv(S, cfg.d_model);
  for (int h = 0; h < cfg.n_heads; ++h) {
    const Mat& p = t.probs[static_cast<std::size_t>(h)];
    const auto doh = d_o.middleCols(h * dh, dh);
    Mat dp = doh * t.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh).noalias() = p.transpose() * doh;
    const Vec rowdot = (p.array() * dp.array()).rowwise().sum().matrix();
    Mat ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix() * scale;
    dq.middleCols(h * dh, dh).noalias() = ds * t.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * t.q.middleCols(h * dh, dh);
  }
  Mat da = dq * lp.wq.transpose() + dk * lp.wk.transpose() + dv * lp.wv.transpose();
  if (wg) {
    wg->wq.noalias() += t.a.transpose() * dq;
    wg->wk.noalias() += t.a.transpose() * dk;
    wg->wv.noalias() += t.a.transpose() * dv;
  }
  dx = dh_res + rms_norm_backward(t.x, t.inv1, lp.attn_gain, da, wg ? &wg->attn_gain : nullptr);
}

}  // namespace

ForwardResult forward(const BackboneParams& params, std::span<const TokenId> ids,
                      const InjectionPlan& plan, const AttentionMask& mask,
                      const ForwardOptions& opts) {
  const auto& cfg = params.config;
  const int S = static_cast<int>(ids.size());
  const int D = cfg.d_model;
  require(S >= 1, "empty token sequence");
  const std::vector<int> pos = position_ids(cfg, ids);
  require(mask.size == S, "attention mask size does not match sequence length");
  const Vocabulary vocab = cfg.vocab();

  std::vector<std::vector<std::size_t>> by_layer(static_cast<std::size_t>(cfg.n_layers) + 1);
  std::set<std::pair<int, int>> seen;
  for (std::size_t e = 0; e < plan.entries.size(); ++e) {
    const auto& en = plan.entries[e];
    require(en.layer >= 1 && en.layer <= cfg.n_layers, "plan layer out of range");
    require(en.position >= 0 && en.position < S, "plan position out of range");
    require(en.value.size() == D, "plan vector has wrong dimension");
    require(seen.insert({en.layer, en.position}).second, "duplicate plan entry");
    by_layer[static_cast<std::size_t>(en.layer)].push_back(e);
  }

  ForwardResult res;
  res.ids.assign(ids.begin(), ids.end());
  Mat x(S, D);
  for (int s = 0; s < S; ++s) {
    const TokenId id = ids[static_cast<std::size_t>(s)];
    require(id >= 0 && id < cfg.vocab_size(), "token id out of vocabulary");
    if (vocab.is_reserved(id)) {
      x.row(s).setZero();
    } else {
      x.row(s) = params.embed.row(id) + params.pos_embed.row(pos[static_cast<std::size_t>(s)]);
    }
  }

  res.layer_inputs.reserve(static_cast<std::size_t>(cfg.n_layers));
  if (opts.keep_tape) res.tape.resize(static_cast<std::size_t>(cfg.n_layers));
  if (opts.capture_attention) res.attention.resize(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    res.layer_inputs.push_back(x);
    for (std::size_t e : by_layer[static_cast<std::size_t>(l) + 1]) {
      const auto& en = plan.entries[e];
      x.row(en.position) = en.value.transpose();
    }
    block_forward(cfg, params.layers[static_cast<std::size_t>(l)], x, mask,
                  opts.keep_tape ? &res.tape[static_cast<std::size_t>(l)] : nullptr,
                  opts.capture_attention ? &res.attention[static_cast<std::size_t>(l)] : nullptr);
    check_finite(x, l + 1);
  }
  res.final_hidden = x;
  res.normed_final = rms_norm(x, params.final_gain, cfg.rms_eps, res.inv_final);
  res.logits.noalias() = res.normed_final * params.embed.transpose();
  check_finite(res.logits, cfg.n_layers);
  for (const auto& en : plan.entries) res.injected.emplace_back(en.layer, en.position);
  return res;
}

std::vector<Vec> backward(const BackboneParams& params, const ForwardResult& fwd,
                          const Mat& dlogits, BackboneParams* weight_grads) {
  const auto& cfg = params.config;
  require(!fwd.tape.empty(), "forward was run without keep_tape");
  require(dlogits.rows() == fwd.logits.rows() && dlogits.cols() == fwd.logits.cols(),
          "dlogits shape mismatch");
  const int S = static_cast<int>(fwd.logits.rows());

  std::vector<Vec> grads(fwd.injected.size());
  int lowest = cfg.n_layers + 1;
  for (const auto& [layer, pos] : fwd.injected) lowest = std::min(lowest, layer);
  if (weight_grads) lowest = 1;
  if (lowest > cfg.n_layers) return grads;  // nothing to propagate

  Mat df = dlogits * params.embed;
  if (weight_grads) weight_grads->embed.noalias() += dlogits.transpose() * fwd.normed_final;
  Mat dx = rms_norm_backward(fwd.final_hidden, fwd.inv_final, params.final_gain, df,
                             weight_grads ? &weight_grads->final_gain : nullptr);

  for (int l = cfg.n_layers - 1; l >= lowest - 1; --l) {
    block_backward(cfg, params.layers[static_cast<std::size_t>(l)],
                   fwd.tape[static_cast<std::size_t>(l)], dx,
                   weight_grads ? &weight_grads->layers[static_cast<std::size_t>(l)] : nullptr);
    for (std::size_t e = 0; e < fwd.injected.size(); ++e) {
      const auto [layer, pos] = fwd.injected[e];
      if (layer == l + 1) {
        grads[e] = dx.row(pos).transpose();
        dx.row(pos).setZero();
      }
    }
  }

  if (weight_grads) {
    const Vocabulary vocab = cfg.vocab();
    const std::vector<int> pos = position_ids(cfg, fwd.ids);
    for (int s = 0; s < S; ++s) {
      const TokenId id = fwd.ids[static_cast<std::size_t>(s)];
      if (vocab.is_reserved(id)) continue;
      weight_grads->embed.row(id) += dx.row(s);
      weight_grads->pos_embed.row(pos[static_cast<std::size_t>(s)]) += dx.row(s);
    }
  }
  return grads;
}

}  // namespace coar
