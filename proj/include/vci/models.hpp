#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vci/checkpoint.hpp"
#include "vci/dataset.hpp"
#include "vci/nn.hpp"
#include "vci/rng.hpp"
#include "vci/tensor.hpp"

namespace vci::models {

using core::Act;
using core::Mat;
using core::Mlp;
using core::MlpNodes;
using core::ParamRef;
using core::Tape;
using core::TRef;

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- batch views ---------------------------------------------------------------

// Column view of a treatment batch: level indices for categorical
// treatments, or an n x attr_dim matrix for continuous ones.
template <typename Scalar>
struct TreatmentBatch {
  bool categorical = true;
  std::vector<int> levels;
  Mat<Scalar> attrs;

  int n() const {
    return categorical ? static_cast<int>(levels.size())
                       : static_cast<int>(attrs.rows());
  }

  static TreatmentBatch from_samples(const std::vector<bench::Treatment>& ts) {
    TreatmentBatch b;
    if (ts.empty()) return b;
    b.categorical = ts[0].is_categorical();
    if (b.categorical) {
      for (const auto& t : ts) {
        if (!t.is_categorical()) {
          throw ModelError("mixed categorical/continuous treatment batch");
        }
        b.levels.push_back(t.level);
      }
    } else {
      b.attrs.resize(static_cast<Eigen::Index>(ts.size()), ts[0].attrs.size());
      for (size_t i = 0; i < ts.size(); ++i) {
        if (ts[i].is_categorical() || ts[i].attrs.size() != b.attrs.cols()) {
          throw ModelError("inconsistent treatment batch");
        }
        b.attrs.row(static_cast<Eigen::Index>(i)) =
            ts[i].attrs.transpose().template cast<Scalar>();
      }
    }
    return b;
  }
};

// Slot-major covariate indices: slots[s][i] is record i's level in slot s.
struct CovariateBatch {
  std::vector<std::vector<int>> slots;

  static CovariateBatch from_samples(const std::vector<bench::FullSample>& ss,
                                     size_t n_slots) {
    CovariateBatch b;
    b.slots.resize(n_slots);
    for (const auto& s : ss) {
      if (s.x.size() != n_slots) {
        throw ModelError("covariate vector length mismatch");
      }
      for (size_t k = 0; k < n_slots; ++k) b.slots[k].push_back(s.x[k]);
    }
    return b;
  }
};

// ---- treatment embedding --------------------------------------------------------

// Categorical treatments use a learned table. Continuous treatments are
// mapped to sinusoidal features on the normalized attribute range plus the
// normalized value itself, followed by a learned affine map.
template <typename Scalar>
struct TreatmentEmbed {
  bool categorical = true;
  int dim = 0;
  Mat<Scalar> table;  // levels x dim

  int attr_dim = 0;
  int n_freq = 4;
  std::vector<double> lo, hi;  // attribute ranges for normalization
  Mat<Scalar> lin_w;           // feat_dim x dim
  Mat<Scalar> lin_b;           // 1 x dim

  int feat_dim() const { return attr_dim * (2 * n_freq + 1); }

  Mat<Scalar> featurize(const Mat<Scalar>& attrs) const {
    Mat<Scalar> f(attrs.rows(), feat_dim());
    for (Eigen::Index i = 0; i < attrs.rows(); ++i) {
      int col = 0;
      for (int a = 0; a < attr_dim; ++a) {
        double span = hi[a] - lo[a];
        double s = span > 0
                       ? (static_cast<double>(attrs(i, a)) - lo[a]) / span
                       : 0.0;
        f(i, col++) = static_cast<Scalar>(s);
        for (int k = 0; k < n_freq; ++k) {
          double freq = 2.0 * std::numbers::pi * static_cast<double>(1 << k);
          f(i, col++) = static_cast<Scalar>(std::sin(freq * s));
          f(i, col++) = static_cast<Scalar>(std::cos(freq * s));
        }
      }
    }
    return f;
  }
};

template <typename Scalar>
TreatmentEmbed<Scalar> make_categorical_embed(int levels, int dim,
                                              core::Engine& eng) {
  TreatmentEmbed<Scalar> e;
  e.categorical = true;
  e.dim = dim;
  e.table = core::glorot_uniform<Scalar>(levels, dim, eng);
  return e;
}

template <typename Scalar>
TreatmentEmbed<Scalar> make_continuous_embed(
    const std::vector<double>& lo, const std::vector<double>& hi, int dim,
    int n_freq, core::Engine& eng) {
  TreatmentEmbed<Scalar> e;
  e.categorical = false;
  e.dim = dim;
  e.attr_dim = static_cast<int>(lo.size());
  e.n_freq = n_freq;
  e.lo = lo;
  e.hi = hi;
  e.lin_w = core::glorot_uniform<Scalar>(e.feat_dim(), dim, eng);
  e.lin_b = Mat<Scalar>::Zero(1, dim);
  return e;
}

// Node ids of one embedding's parameters bound to a tape.
struct EmbedNodes {
  int table = -1;
  int lin_w = -1;
  int lin_b = -1;
};

template <typename Scalar>
EmbedNodes bind_embed(Tape<Scalar>& tp, const TreatmentEmbed<Scalar>& e,
                      bool trainable) {
  EmbedNodes n;
  if (e.categorical) {
    n.table = tp.leaf(e.table, trainable);
  } else {
    n.lin_w = tp.leaf(e.lin_w, trainable);
    n.lin_b = tp.leaf(e.lin_b, trainable);
  }
  return n;
}

template <typename Scalar>
TRef<Scalar> embed_forward(Tape<Scalar>& tp, const TreatmentEmbed<Scalar>& e,
                           const EmbedNodes& nodes,
                           const TreatmentBatch<Scalar>& batch) {
  if (e.categorical != batch.categorical) {
    throw ModelError("treatment batch kind does not match the embedding");
  }
  if (e.categorical) {
    return core::gather_rows<Scalar>({&tp, nodes.table}, batch.levels);
  }
  auto feats = core::make_constant<Scalar>(tp, e.featurize(batch.attrs));
  return core::add_rowvec(core::matmul(feats, TRef<Scalar>{&tp, nodes.lin_w}),
                          TRef<Scalar>{&tp, nodes.lin_b});
}

template <typename Scalar>
Mat<Scalar> embed_eval(const TreatmentEmbed<Scalar>& e,
                       const TreatmentBatch<Scalar>& batch) {
  if (e.categorical) {
    Mat<Scalar> out(batch.n(), e.dim);
    for (size_t i = 0; i < batch.levels.size(); ++i) {
      int l = batch.levels[i];
      if (l < 0 || l >= e.table.rows()) {
        throw ModelError("treatment level out of range");
      }
      out.row(static_cast<Eigen::Index>(i)) = e.table.row(l);
    }
    return out;
  }
  Mat<Scalar> prod = e.featurize(batch.attrs) * e.lin_w;
  return prod.rowwise() + e.lin_b.row(0);
}

// ---- model bundle ---------------------------------------------------------------

struct ModelConfig {
  int latent_dim = 32;
  int hidden_width = 128;
  int enc_depth = 2;  // hidden layers in the encoder
  int dec_depth = 2;
  int disc_depth = 2;
  int disc_width = 64;
  int t_embed_dim = 16;
  int x_embed_dim = 8;
  int n_freq = 4;
  bool learn_sigma = false;
  double leaky_slope = 0.2;
  std::uint64_t init_seed = 1;
};

// Shape of the data a model is built for; derived from dataset metadata.
struct DataShape {
  int outcome_dim = 0;
  std::vector<int> covariate_cards;
  bool categorical_treatment = true;
  int treatment_levels = 0;
  std::vector<double> t_lo, t_hi;  // continuous attribute ranges

  static DataShape from_meta(const nlohmann::json& meta);
};

// Encoder q(z | y, t, x), decoder p(y | z, t), discriminator D(x, t, y) and
// their embeddings. The discriminator owns separate embeddings so the
// adversarial signal cannot leak into the generator's representation.
template <typename Scalar>
struct VciModel {
  ModelConfig cfg;
  DataShape shape;

  Mlp<Scalar> enc;   // [y, t_emb, x_embs] -> latent mean
  Mlp<Scalar> dec;   // [z, t_emb] -> outcome mean
  Mlp<Scalar> disc;  // [y, t_emb, x_embs] -> logit
  TreatmentEmbed<Scalar> t_embed, t_embed_d;
  std::vector<Mat<Scalar>> x_embed, x_embed_d;  // per slot: card x dim
  Mat<Scalar> dec_log_sigma;                    // 1 x outcome_dim

  int x_embed_total() const {
    return static_cast<int>(x_embed.size()) * cfg.x_embed_dim;
  }

  std::vector<ParamRef<Scalar>> generator_params() {
    std::vector<ParamRef<Scalar>> out;
    core::append_mlp_params(enc, "enc", out);
    core::append_mlp_params(dec, "dec", out);
    if (t_embed.categorical) {
      out.push_back({&t_embed.table, "t_embed.table"});
    } else {
      out.push_back({&t_embed.lin_w, "t_embed.lin_w"});
      out.push_back({&t_embed.lin_b, "t_embed.lin_b"});
    }
    for (size_t s = 0; s < x_embed.size(); ++s) {
      out.push_back({&x_embed[s], "x_embed." + std::to_string(s)});
    }
    if (cfg.learn_sigma) out.push_back({&dec_log_sigma, "dec.log_sigma"});
    return out;
  }

  std::vector<ParamRef<Scalar>> discriminator_params() {
    std::vector<ParamRef<Scalar>> out;
    core::append_mlp_params(disc, "disc", out);
    if (t_embed_d.categorical) {
      out.push_back({&t_embed_d.table, "disc.t_embed.table"});
    } else {
      out.push_back({&t_embed_d.lin_w, "disc.t_embed.lin_w"});
      out.push_back({&t_embed_d.lin_b, "disc.t_embed.lin_b"});
    }
    for (size_t s = 0; s < x_embed_d.size(); ++s) {
      out.push_back({&x_embed_d[s], "disc.x_embed." + std::to_string(s)});
    }
    return out;
  }
};

template <typename Scalar>
VciModel<Scalar> make_vci_model(const ModelConfig& cfg,
                                const DataShape& shape) {
  core::Engine eng = core::make_engine(cfg.init_seed);
  VciModel<Scalar> m;
  m.cfg = cfg;
  m.shape = shape;

  auto make_t_embed = [&]() {
    if (shape.categorical_treatment) {
      return make_categorical_embed<Scalar>(shape.treatment_levels,
                                            cfg.t_embed_dim, eng);
    }
    return make_continuous_embed<Scalar>(shape.t_lo, shape.t_hi,
                                         cfg.t_embed_dim, cfg.n_freq, eng);
  };
  m.t_embed = make_t_embed();
  for (int card : shape.covariate_cards) {
    m.x_embed.push_back(
        core::glorot_uniform<Scalar>(card, cfg.x_embed_dim, eng));
  }
  int x_total = static_cast<int>(shape.covariate_cards.size()) *
                cfg.x_embed_dim;

  std::vector<int> enc_hidden(cfg.enc_depth, cfg.hidden_width);
  std::vector<int> dec_hidden(cfg.dec_depth, cfg.hidden_width);
  std::vector<int> disc_hidden(cfg.disc_depth, cfg.disc_width);

  m.enc = core::make_mlp<Scalar>(shape.outcome_dim + cfg.t_embed_dim + x_total,
                                 enc_hidden, cfg.latent_dim, Act::relu, eng);
  m.dec = core::make_mlp<Scalar>(cfg.latent_dim + cfg.t_embed_dim, dec_hidden,
                                 shape.outcome_dim, Act::relu, eng);
  m.t_embed_d = make_t_embed();
  for (int card : shape.covariate_cards) {
    m.x_embed_d.push_back(
        core::glorot_uniform<Scalar>(card, cfg.x_embed_dim, eng));
  }
  m.disc = core::make_mlp<Scalar>(
      shape.outcome_dim + cfg.t_embed_dim + x_total, disc_hidden, 1,
      Act::leaky_relu, eng, Act::identity,
      static_cast<Scalar>(cfg.leaky_slope));
  m.dec_log_sigma = Mat<Scalar>::Zero(1, shape.outcome_dim);
  return m;
}

// ---- taped forward passes ---------------------------------------------------------

// Re-forward an MLP through already-bound parameter leaves, so gradients
// from several forward calls accumulate on the same nodes.
template <typename Scalar>
TRef<Scalar> mlp_reforward(Tape<Scalar>& tp, const Mlp<Scalar>& m,
                           const MlpNodes<Scalar>& nodes, TRef<Scalar> x) {
  TRef<Scalar> h = x;
  for (size_t li = 0; li < m.layers.size(); ++li) {
    TRef<Scalar> w{&tp, nodes.w[li]};
    TRef<Scalar> b{&tp, nodes.b[li]};
    h = core::apply_act(core::add_rowvec(core::matmul(h, w), b),
                        m.layers[li].act, m.layers[li].leaky_slope);
  }
  return h;
}

// Node ids of all generator-path parameters bound to one tape. Each
// parameter gets exactly one leaf no matter how many forward calls reuse
// it; the treatment embedding is shared between encoder and decoder.
template <typename Scalar>
struct BoundGenerator {
  EmbedNodes t;
  bool t_bound = false;
  std::vector<int> x_tables;
  bool x_bound = false;
  MlpNodes<Scalar> enc_mlp;
  MlpNodes<Scalar> dec_mlp;
  int log_sigma = -1;
};

namespace detail {
template <typename Scalar>
void ensure_t_bound(Tape<Scalar>& tp, VciModel<Scalar>& m,
                    BoundGenerator<Scalar>& bg, bool trainable) {
  if (!bg.t_bound) {
    bg.t = bind_embed(tp, m.t_embed, trainable);
    bg.t_bound = true;
  }
}
}  // namespace detail

template <typename Scalar>
TRef<Scalar> encode_node(Tape<Scalar>& tp, VciModel<Scalar>& m,
                         BoundGenerator<Scalar>& bg, TRef<Scalar> y,
                         const TreatmentBatch<Scalar>& t,
                         const CovariateBatch& x, bool trainable) {
  detail::ensure_t_bound(tp, m, bg, trainable);
  if (!bg.x_bound) {
    for (auto& tab : m.x_embed) bg.x_tables.push_back(tp.leaf(tab, trainable));
    bg.x_bound = true;
  }
  std::vector<TRef<Scalar>> parts{y};
  parts.push_back(embed_forward(tp, m.t_embed, bg.t, t));
  for (size_t s = 0; s < m.x_embed.size(); ++s) {
    parts.push_back(
        core::gather_rows<Scalar>({&tp, bg.x_tables[s]}, x.slots[s]));
  }
  auto input = core::concat_cols(parts);
  if (bg.enc_mlp.w.empty()) {
    return core::mlp_forward(tp, m.enc, input, &bg.enc_mlp, trainable);
  }
  return mlp_reforward(tp, m.enc, bg.enc_mlp, input);
}

template <typename Scalar>
TRef<Scalar> decode_mean_node(Tape<Scalar>& tp, VciModel<Scalar>& m,
                              BoundGenerator<Scalar>& bg, TRef<Scalar> z,
                              const TreatmentBatch<Scalar>& t,
                              bool trainable) {
  detail::ensure_t_bound(tp, m, bg, trainable);
  std::vector<TRef<Scalar>> parts{z};
  parts.push_back(embed_forward(tp, m.t_embed, bg.t, t));
  auto input = core::concat_cols(parts);
  if (bg.dec_mlp.w.empty()) {
    return core::mlp_forward(tp, m.dec, input, &bg.dec_mlp, trainable);
  }
  return mlp_reforward(tp, m.dec, bg.dec_mlp, input);
}

// Log-sigma leaf for the decoder likelihood; trainable only in
// learned-sigma mode.
template <typename Scalar>
TRef<Scalar> log_sigma_node(Tape<Scalar>& tp, VciModel<Scalar>& m,
                            BoundGenerator<Scalar>& bg) {
  if (bg.log_sigma < 0) {
    bg.log_sigma = tp.leaf(m.dec_log_sigma, m.cfg.learn_sigma);
  }
  return {&tp, bg.log_sigma};
}

template <typename Scalar>
struct BoundDisc {
  EmbedNodes t;
  std::vector<int> x_tables;
  MlpNodes<Scalar> mlp;
  bool bound = false;
};

template <typename Scalar>
TRef<Scalar> disc_logit_node(Tape<Scalar>& tp, VciModel<Scalar>& m,
                             BoundDisc<Scalar>& bd, TRef<Scalar> y,
                             const TreatmentBatch<Scalar>& t,
                             const CovariateBatch& x, bool trainable) {
  if (!bd.bound) {
    bd.t = bind_embed(tp, m.t_embed_d, trainable);
    for (auto& tab : m.x_embed_d) bd.x_tables.push_back(tp.leaf(tab, trainable));
    bd.bound = true;
  }
  std::vector<TRef<Scalar>> parts{y};
  parts.push_back(embed_forward(tp, m.t_embed_d, bd.t, t));
  for (size_t s = 0; s < m.x_embed_d.size(); ++s) {
    parts.push_back(
        core::gather_rows<Scalar>({&tp, bd.x_tables[s]}, x.slots[s]));
  }
  auto input = core::concat_cols(parts);
  if (bd.mlp.w.empty()) {
    return core::mlp_forward(tp, m.disc, input, &bd.mlp, trainable);
  }
  TRef<Scalar> h = input;
  for (size_t li = 0; li < m.disc.layers.size(); ++li) {
    TRef<Scalar> w{&tp, bd.mlp.w[li]};
    TRef<Scalar> b{&tp, bd.mlp.b[li]};
    h = core::apply_act(core::add_rowvec(core::matmul(h, w), b),
                        m.disc.layers[li].act, m.disc.layers[li].leaky_slope);
  }
  return h;
}

// ---- gradient readback ----------------------------------------------------------------

namespace detail {
template <typename Scalar>
void push_grad(Tape<Scalar>& tp, int node, const Mat<Scalar>& shape_like,
               std::vector<Mat<Scalar>>& out) {
  if (node >= 0) {
    out.push_back(tp.grad(node));
  } else {
    out.push_back(Mat<Scalar>::Zero(shape_like.rows(), shape_like.cols()));
  }
}
}  // namespace detail

// Gradients after backward(), in the same order as generator_params().
// Parameters never bound on this tape come back as zeros.
template <typename Scalar>
std::vector<Mat<Scalar>> generator_grads(Tape<Scalar>& tp,
                                         const BoundGenerator<Scalar>& bg,
                                         VciModel<Scalar>& m) {
  std::vector<Mat<Scalar>> out;
  auto push_mlp = [&](const Mlp<Scalar>& mlp, const MlpNodes<Scalar>& nodes) {
    for (size_t li = 0; li < mlp.layers.size(); ++li) {
      int w = li < nodes.w.size() ? nodes.w[li] : -1;
      int b = li < nodes.b.size() ? nodes.b[li] : -1;
      detail::push_grad(tp, w, mlp.layers[li].W, out);
      detail::push_grad(tp, b, mlp.layers[li].b, out);
    }
  };
  push_mlp(m.enc, bg.enc_mlp);
  push_mlp(m.dec, bg.dec_mlp);
  if (m.t_embed.categorical) {
    detail::push_grad(tp, bg.t.table, m.t_embed.table, out);
  } else {
    detail::push_grad(tp, bg.t.lin_w, m.t_embed.lin_w, out);
    detail::push_grad(tp, bg.t.lin_b, m.t_embed.lin_b, out);
  }
  for (size_t s = 0; s < m.x_embed.size(); ++s) {
    int node = s < bg.x_tables.size() ? bg.x_tables[s] : -1;
    detail::push_grad(tp, node, m.x_embed[s], out);
  }
  if (m.cfg.learn_sigma) {
    detail::push_grad(tp, bg.log_sigma, m.dec_log_sigma, out);
  }
  return out;
}

// Gradients in discriminator_params() order.
template <typename Scalar>
std::vector<Mat<Scalar>> discriminator_grads(Tape<Scalar>& tp,
                                             const BoundDisc<Scalar>& bd,
                                             VciModel<Scalar>& m) {
  std::vector<Mat<Scalar>> out;
  for (size_t li = 0; li < m.disc.layers.size(); ++li) {
    int w = li < bd.mlp.w.size() ? bd.mlp.w[li] : -1;
    int b = li < bd.mlp.b.size() ? bd.mlp.b[li] : -1;
    detail::push_grad(tp, w, m.disc.layers[li].W, out);
    detail::push_grad(tp, b, m.disc.layers[li].b, out);
  }
  if (m.t_embed_d.categorical) {
    detail::push_grad(tp, bd.t.table, m.t_embed_d.table, out);
  } else {
    detail::push_grad(tp, bd.t.lin_w, m.t_embed_d.lin_w, out);
    detail::push_grad(tp, bd.t.lin_b, m.t_embed_d.lin_b, out);
  }
  for (size_t s = 0; s < m.x_embed_d.size(); ++s) {
    int node = s < bd.x_tables.size() ? bd.x_tables[s] : -1;
    detail::push_grad(tp, node, m.x_embed_d[s], out);
  }
  return out;
}

// ---- tape-free evaluation paths -----------------------------------------------------

template <typename Scalar>
Mat<Scalar> encode_eval(const VciModel<Scalar>& m, const Mat<Scalar>& y,
                        const TreatmentBatch<Scalar>& t,
                        const CovariateBatch& x) {
  Mat<Scalar> input(y.rows(), y.cols() + m.cfg.t_embed_dim +
                                 static_cast<Eigen::Index>(m.x_embed.size()) *
                                     m.cfg.x_embed_dim);
  input.leftCols(y.cols()) = y;
  Eigen::Index off = y.cols();
  input.middleCols(off, m.cfg.t_embed_dim) = embed_eval(m.t_embed, t);
  off += m.cfg.t_embed_dim;
  for (size_t s = 0; s < m.x_embed.size(); ++s) {
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      input.row(i).segment(off, m.cfg.x_embed_dim) =
          m.x_embed[s].row(x.slots[s][static_cast<size_t>(i)]);
    }
    off += m.cfg.x_embed_dim;
  }
  return core::mlp_eval(m.enc, input);
}

template <typename Scalar>
Mat<Scalar> decode_eval(const VciModel<Scalar>& m, const Mat<Scalar>& z,
                        const TreatmentBatch<Scalar>& t) {
  Mat<Scalar> input(z.rows(), z.cols() + m.cfg.t_embed_dim);
  input.leftCols(z.cols()) = z;
  input.rightCols(m.cfg.t_embed_dim) = embed_eval(m.t_embed, t);
  return core::mlp_eval(m.dec, input);
}

// Counterfactual construction: decode the deterministic latent mean under
// the queried treatment. With t_query == t this is exactly the
// reconstruction path.
template <typename Scalar>
Mat<Scalar> counterfactual_eval(const VciModel<Scalar>& m,
                                const Mat<Scalar>& y,
                                const TreatmentBatch<Scalar>& t,
                                const CovariateBatch& x,
                                const TreatmentBatch<Scalar>& t_query) {
  return decode_eval(m, encode_eval(m, y, t, x), t_query);
}

// ---- gaussian likelihood ------------------------------------------------------------

// Mean over the batch of per-record log N(y; mean, diag(exp(log_sigma))^2),
// summed over outcome dimensions.
template <typename Scalar>
Scalar gaussian_log_lik_eval(const Mat<Scalar>& y, const Mat<Scalar>& mean,
                             const Mat<Scalar>& log_sigma) {
  if (y.rows() != mean.rows() || y.cols() != mean.cols()) {
    throw ModelError("gaussian_log_lik: target/mean shape mismatch");
  }
  const double log2pi = std::log(2.0 * std::numbers::pi);
  double total = 0.0;
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    double rec = -0.5 * static_cast<double>(y.cols()) * log2pi;
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      double ls = log_sigma(0, j);
      double d = (y(i, j) - mean(i, j)) * std::exp(-ls);
      rec -= ls + 0.5 * d * d;
    }
    total += rec;
  }
  return static_cast<Scalar>(total / y.rows());
}

// Taped version; `log_sigma` may be a trainable leaf or a constant.
template <typename Scalar>
TRef<Scalar> gaussian_log_lik_node(Tape<Scalar>& tp, TRef<Scalar> mean,
                                   const Mat<Scalar>& y,
                                   TRef<Scalar> log_sigma) {
  Eigen::Index n = y.rows(), d = y.cols();
  auto target = core::make_constant<Scalar>(tp, y);
  auto inv_sigma = core::exp_op(core::neg(log_sigma));
  auto scaled = core::mul_rowvec(core::sub(target, mean), inv_sigma);
  auto quad = core::scale(core::sum_all(core::square(scaled)),
                          Scalar(-0.5) / static_cast<Scalar>(n));
  auto sig_term = core::scale(core::sum_all(log_sigma), Scalar(-1));
  Scalar const_term = static_cast<Scalar>(
      -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi));
  return core::add_scalar(core::add(quad, sig_term), const_term);
}

// ---- discriminator losses -----------------------------------------------------------

inline constexpr double kProbClamp = 1e-7;

// Two-sided cross entropy for the discriminator and the non-saturating
// generator score, from already-computed probabilities. The score is what
// the generator maximizes.
inline double disc_loss_from_probs(double p_real, double p_fake) {
  auto cl = [](double p) {
    return std::min(1.0 - kProbClamp, std::max(kProbClamp, p));
  };
  return -std::log(cl(p_real)) - std::log(1.0 - cl(p_fake));
}

inline double gen_score_from_prob(double p_fake) {
  return std::log(
      std::min(1.0 - kProbClamp, std::max(kProbClamp, p_fake)));
}

// Mean discriminator loss over a batch from logit nodes; keeps the graph
// differentiable for the discriminator step.
template <typename Scalar>
TRef<Scalar> disc_loss_node(TRef<Scalar> real_logit, TRef<Scalar> fake_logit) {
  Scalar lo = static_cast<Scalar>(kProbClamp);
  Scalar hi = Scalar(1) - static_cast<Scalar>(kProbClamp);
  auto p_real = core::clamp(core::sigmoid(real_logit), lo, hi);
  auto p_fake = core::clamp(core::sigmoid(fake_logit), lo, hi);
  Eigen::Index n = real_logit.value().rows();
  auto loss_real = core::scale(core::sum_all(core::log_op(p_real)),
                               Scalar(-1) / static_cast<Scalar>(n));
  auto one_minus = core::add_scalar(core::neg(p_fake), Scalar(1));
  auto loss_fake = core::scale(core::sum_all(core::log_op(one_minus)),
                               Scalar(-1) / static_cast<Scalar>(n));
  return core::add(loss_real, loss_fake);
}

// Mean generator score (to maximize) over a batch from the fake logits.
template <typename Scalar>
TRef<Scalar> gen_score_node(TRef<Scalar> fake_logit) {
  Scalar lo = static_cast<Scalar>(kProbClamp);
  Scalar hi = Scalar(1) - static_cast<Scalar>(kProbClamp);
  auto p_fake = core::clamp(core::sigmoid(fake_logit), lo, hi);
  Eigen::Index n = fake_logit.value().rows();
  return core::scale(core::sum_all(core::log_op(p_fake)),
                     Scalar(1) / static_cast<Scalar>(n));
}

// ---- checkpoint conversion -----------------------------------------------------------

template <typename Scalar>
void append_blob(std::vector<core::TensorBlob>& blobs, const std::string& name,
                 const Mat<Scalar>& m) {
  core::TensorBlob b;
  b.name = name;
  b.rows = m.rows();
  b.cols = m.cols();
  b.data.resize(static_cast<size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      b.data[static_cast<size_t>(i * m.cols() + j)] =
          static_cast<float>(m(i, j));
    }
  }
  blobs.push_back(std::move(b));
}

template <typename Scalar>
Mat<Scalar> blob_to_mat(const core::TensorBlob& b) {
  Mat<Scalar> m(b.rows, b.cols);
  for (std::int64_t i = 0; i < b.rows; ++i) {
    for (std::int64_t j = 0; j < b.cols; ++j) {
      m(i, j) = static_cast<Scalar>(b.data[static_cast<size_t>(i * b.cols + j)]);
    }
  }
  return m;
}

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json data_shape_to_json(const DataShape& s);
DataShape data_shape_from_json(const nlohmann::json& j);

template <typename Scalar>
core::Checkpoint model_to_checkpoint(VciModel<Scalar>& m,
                                     nlohmann::json extra_meta) {
  core::Checkpoint ck;
  ck.meta = std::move(extra_meta);
  ck.meta["model_config"] = model_config_to_json(m.cfg);
  ck.meta["data_shape"] = data_shape_to_json(m.shape);
  nlohmann::json acts = nlohmann::json::object();
  auto mlp_acts = [](const Mlp<Scalar>& mlp) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& l : mlp.layers) a.push_back(core::act_name(l.act));
    return a;
  };
  acts["enc"] = mlp_acts(m.enc);
  acts["dec"] = mlp_acts(m.dec);
  acts["disc"] = mlp_acts(m.disc);
  ck.meta["activations"] = acts;

  for (auto& p : m.generator_params()) append_blob(ck.tensors, p.name, *p.value);
  for (auto& p : m.discriminator_params()) {
    append_blob(ck.tensors, p.name, *p.value);
  }
  if (!m.cfg.learn_sigma) {
    append_blob(ck.tensors, "dec.log_sigma", m.dec_log_sigma);
  }
  return ck;
}

template <typename Scalar>
VciModel<Scalar> model_from_checkpoint(const core::Checkpoint& ck) {
  ModelConfig cfg = model_config_from_json(ck.meta.at("model_config"));
  DataShape shape = data_shape_from_json(ck.meta.at("data_shape"));
  VciModel<Scalar> m = make_vci_model<Scalar>(cfg, shape);

  std::map<std::string, const core::TensorBlob*> by_name;
  for (const auto& b : ck.tensors) by_name[b.name] = &b;
  auto load = [&](const std::string& name, Mat<Scalar>* into) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw ModelError("checkpoint is missing tensor '" + name + "'");
    }
    if (it->second->rows != into->rows() || it->second->cols != into->cols()) {
      throw ModelError("checkpoint tensor '" + name + "' has shape " +
                       std::to_string(it->second->rows) + "x" +
                       std::to_string(it->second->cols) + ", expected " +
                       std::to_string(into->rows()) + "x" +
                       std::to_string(into->cols()));
    }
    *into = blob_to_mat<Scalar>(*it->second);
  };
  for (auto& p : m.generator_params()) load(p.name, p.value);
  for (auto& p : m.discriminator_params()) load(p.name, p.value);
  load("dec.log_sigma", &m.dec_log_sigma);
  return m;
}

}  // namespace vci::models
