#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>

#include "vci/models.hpp"
#include "vci/models_data.hpp"
#include "vci/scm.hpp"

using namespace vci;
using models::CovariateBatch;
using models::DataShape;
using models::ModelConfig;
using models::TreatmentBatch;
using models::VciModel;
using Md = core::Mat<double>;
using Mf = core::Mat<float>;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

ModelConfig tiny_config(std::uint64_t seed) {
  ModelConfig c;
  c.latent_dim = 3;
  c.hidden_width = 5;
  c.enc_depth = 1;
  c.dec_depth = 1;
  c.disc_depth = 1;
  c.disc_width = 4;
  c.t_embed_dim = 2;
  c.x_embed_dim = 2;
  c.init_seed = seed;
  return c;
}

DataShape categorical_shape(int outcome_dim, std::vector<int> cards,
                            int levels) {
  DataShape s;
  s.outcome_dim = outcome_dim;
  s.covariate_cards = std::move(cards);
  s.categorical_treatment = true;
  s.treatment_levels = levels;
  return s;
}

DataShape continuous_shape(int outcome_dim) {
  DataShape s;
  s.outcome_dim = outcome_dim;
  s.categorical_treatment = false;
  s.t_lo = {1.6, 0.4};
  s.t_hi = {2.8, 1.0};
  return s;
}

// Switch every activation to tanh so finite differences never cross a kink.
template <typename Scalar>
void smooth_activations(VciModel<Scalar>& m) {
  for (auto& l : m.enc.layers) {
    if (l.act != core::Act::identity) l.act = core::Act::tanh_fn;
  }
  for (auto& l : m.dec.layers) {
    if (l.act != core::Act::identity) l.act = core::Act::tanh_fn;
  }
  for (auto& l : m.disc.layers) {
    if (l.act != core::Act::identity) l.act = core::Act::tanh_fn;
  }
}

Md random_mat(int r, int c, core::Engine& eng) {
  Md m(r, c);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) m(i, j) = core::draw_normal(eng);
  }
  return m;
}

bench::Dataset hand_dataset() {
  // Stratum (x=0, t=0) holds outcomes {1, 3}; stratum (x=0, t=1) holds {5}.
  bench::Dataset ds;
  auto add = [&](int t, int tp, double y) {
    bench::FullSample s;
    s.x = {0};
    s.t = bench::Treatment::categorical(t);
    s.t_prime = bench::Treatment::categorical(tp);
    s.y = Eigen::VectorXd::Constant(1, y);
    ds.samples.push_back(std::move(s));
  };
  add(0, 1, 1.0);
  add(0, 0, 3.0);
  add(1, 1, 5.0);
  return ds;
}

}  // namespace

TEST_CASE("categorical treatment embedding gathers table rows") {
  core::Engine eng = core::make_engine(11);
  auto e = models::make_categorical_embed<double>(3, 4, eng);

  TreatmentBatch<double> batch;
  batch.levels = {2, 0, 2};
  Md out = models::embed_eval(e, batch);
  CHECK(out.rows() == 3);
  CHECK(out.row(0) == e.table.row(2));
  CHECK(out.row(1) == e.table.row(0));
  CHECK(out.row(2) == e.table.row(2));

  core::Tape<double> tp;
  auto nodes = models::bind_embed(tp, e, true);
  auto node = models::embed_forward(tp, e, nodes, batch);
  CHECK(node.value() == out);

  TreatmentBatch<double> bad;
  bad.levels = {3};
  CHECK_THROWS_AS(models::embed_eval(e, bad), models::ModelError);
}

TEST_CASE("continuous treatment embedding is an affine map of bounded "
          "features") {
  core::Engine eng = core::make_engine(12);
  auto e = models::make_continuous_embed<double>({1.6, 0.4}, {2.8, 1.0}, 5, 2,
                                                 eng);
  CHECK(e.feat_dim() == 2 * (2 * 2 + 1));

  TreatmentBatch<double> batch;
  batch.categorical = false;
  batch.attrs.resize(2, 2);
  batch.attrs << 1.6, 0.4,  // both attributes at their lower bound
      2.8, 1.0;             // both at the upper bound
  Md f = e.featurize(batch.attrs);
  // s = 0: [s, sin, cos, sin, cos] = [0, 0, 1, 0, 1] per attribute.
  for (int a = 0; a < 2; ++a) {
    int off = a * 5;
    CHECK(f(0, off) == 0.0);
    CHECK(f(0, off + 1) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(f(0, off + 2) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(f(1, off) == 1.0);
    CHECK(std::abs(f(1, off + 1)) < 1e-12);
    CHECK(f(1, off + 3) == doctest::Approx(std::sin(4 * std::numbers::pi))
                               .epsilon(1e-9));
  }

  e.lin_b = Md::Constant(1, 5, 0.25);
  Md expect = ((f * e.lin_w).rowwise() + e.lin_b.row(0)).eval();
  CHECK(models::embed_eval(e, batch) == expect);

  core::Tape<double> tp;
  auto nodes = models::bind_embed(tp, e, true);
  CHECK(models::embed_forward(tp, e, nodes, batch).value() == expect);
}

TEST_CASE("model dimensions follow the data shape") {
  auto shape = categorical_shape(7, {2, 3}, 4);
  auto m = models::make_vci_model<double>(tiny_config(1), shape);

  CHECK(m.enc.in_dim() == 7 + 2 + 2 * 2);
  CHECK(m.enc.out_dim() == 3);
  CHECK(m.dec.in_dim() == 3 + 2);
  CHECK(m.dec.out_dim() == 7);
  CHECK(m.disc.in_dim() == 7 + 2 + 2 * 2);
  CHECK(m.disc.out_dim() == 1);
  CHECK(m.t_embed.table.rows() == 4);
  CHECK(m.x_embed.size() == 2);
  CHECK(m.x_embed[1].rows() == 3);

  auto gen = m.generator_params();
  // enc (2 layers) + dec (2 layers) -> 8 tensors, plus t table and 2 x tables.
  CHECK(gen.size() == 8 + 1 + 2);
  std::set<std::string> names;
  for (auto& p : gen) names.insert(p.name);
  for (auto& p : m.discriminator_params()) names.insert(p.name);
  CHECK(names.size() == gen.size() + m.discriminator_params().size());

  auto cfg = tiny_config(1);
  cfg.learn_sigma = true;
  auto m2 = models::make_vci_model<double>(cfg, shape);
  CHECK(m2.generator_params().size() == gen.size() + 1);
  CHECK(m2.generator_params().back().name == "dec.log_sigma");
}

TEST_CASE("encoder and discriminator use separate treatment embeddings") {
  auto shape = categorical_shape(4, {2}, 3);
  auto m = models::make_vci_model<double>(tiny_config(2), shape);

  core::Engine eng = core::make_engine(3);
  Md y = random_mat(2, 4, eng);
  TreatmentBatch<double> t;
  t.levels = {0, 2};
  CovariateBatch x;
  x.slots = {{1, 0}};

  Md before = models::encode_eval(m, y, t, x);
  auto logit_value = [&](VciModel<double>& model) {
    core::Tape<double> tp;
    models::BoundDisc<double> bd;
    auto yn = core::make_constant<double>(tp, y);
    return models::disc_logit_node(tp, model, bd, yn, t, x, false).value();
  };
  Md logit_before = logit_value(m);

  m.t_embed_d.table.array() += 0.5;
  CHECK(models::encode_eval(m, y, t, x) == before);
  CHECK(logit_value(m) != logit_before);

  m.t_embed.table.array() += 0.5;
  CHECK(models::encode_eval(m, y, t, x) != before);
}

TEST_CASE("counterfactual construction decodes the encoded mean") {
  auto shape = categorical_shape(6, {3}, 3);
  auto m = models::make_vci_model<float>(tiny_config(4), shape);

  core::Engine eng = core::make_engine(5);
  Mf y = random_mat(3, 6, eng).cast<float>();
  TreatmentBatch<float> t, tq;
  t.levels = {0, 1, 2};
  tq.levels = {2, 1, 0};
  CovariateBatch x;
  x.slots = {{0, 2, 1}};

  Mf cf = models::counterfactual_eval(m, y, t, x, tq);
  Mf two_step = models::decode_eval(m, models::encode_eval(m, y, t, x), tq);
  CHECK(cf == two_step);

  // Querying the factual treatment is exactly the reconstruction path.
  Mf recon = models::counterfactual_eval(m, y, t, x, t);
  CHECK(recon == models::decode_eval(m, models::encode_eval(m, y, t, x), t));
}

TEST_CASE("taped forward passes match the evaluation paths") {
  auto shape = categorical_shape(5, {2, 2}, 3);
  auto m = models::make_vci_model<double>(tiny_config(6), shape);

  core::Engine eng = core::make_engine(7);
  Md y = random_mat(4, 5, eng);
  TreatmentBatch<double> t, tq;
  t.levels = {0, 1, 2, 0};
  tq.levels = {1, 1, 0, 2};
  CovariateBatch x;
  x.slots = {{0, 1, 1, 0}, {1, 0, 1, 0}};

  core::Tape<double> tp;
  models::BoundGenerator<double> bg;
  auto yn = core::make_constant<double>(tp, y);
  auto mu = models::encode_node(tp, m, bg, yn, t, x, true);
  auto cf = models::decode_mean_node(tp, m, bg, mu, tq, true);

  CHECK(mu.value() == models::encode_eval(m, y, t, x));
  CHECK(cf.value() == models::counterfactual_eval(m, y, t, x, tq));

  // The shared treatment embedding is bound exactly once.
  CHECK(bg.t.table >= 0);
  CHECK(bg.enc_mlp.w.size() == m.enc.layers.size());
  CHECK(bg.dec_mlp.w.size() == m.dec.layers.size());
}

TEST_CASE("gaussian log likelihood matches hand-computed values") {
  // Two dimensions at the mean with unit sigma: -log(2*pi).
  Md mean = Md::Zero(1, 2);
  Md ls = Md::Zero(1, 2);
  CHECK(models::gaussian_log_lik_eval<double>(Md::Zero(1, 2), mean, ls) ==
        doctest::Approx(-kLog2Pi).epsilon(1e-14));

  // One dimension, one sigma away: -0.5*log(2*pi) - log(sigma) - 0.5.
  Md y1 = Md::Constant(1, 1, 0.7);
  Md m1 = Md::Zero(1, 1);
  Md ls1 = Md::Constant(1, 1, std::log(0.7));
  CHECK(models::gaussian_log_lik_eval<double>(y1, m1, ls1) ==
        doctest::Approx(-0.5 * kLog2Pi - std::log(0.7) - 0.5).epsilon(1e-14));

  // Doubling sigma at the mean costs exactly d*log(2).
  Md y3 = Md::Zero(2, 3), m3 = Md::Zero(2, 3);
  double at_one = models::gaussian_log_lik_eval<double>(y3, m3, Md::Zero(1, 3));
  double at_two = models::gaussian_log_lik_eval<double>(
      y3, m3, Md::Constant(1, 3, std::log(2.0)));
  CHECK(at_one - at_two == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-14));

  // Batch mean over records.
  Md yb(2, 1), mb = Md::Zero(2, 1);
  yb << 0.0, 1.0;
  double expect = 0.5 * ((-0.5 * kLog2Pi) + (-0.5 * kLog2Pi - 0.5));
  CHECK(models::gaussian_log_lik_eval<double>(yb, mb, Md::Zero(1, 1)) ==
        doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("taped gaussian log likelihood matches eval and closed-form "
          "gradient") {
  core::Engine eng = core::make_engine(8);
  Md y = random_mat(3, 2, eng);
  Md mean = random_mat(3, 2, eng);
  Md ls(1, 2);
  ls << 0.3, -0.4;

  core::Tape<double> tp;
  auto mean_n = core::make_leaf<double>(tp, mean, true);
  auto ls_n = core::make_leaf<double>(tp, ls, true);
  auto ll = models::gaussian_log_lik_node<double>(tp, mean_n, y, ls_n);
  CHECK(ll.value()(0, 0) ==
        doctest::Approx(models::gaussian_log_lik_eval<double>(y, mean, ls))
            .epsilon(1e-14));

  tp.backward(ll.id);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      double g = (y(i, j) - mean(i, j)) * std::exp(-2.0 * ls(0, j)) / 3.0;
      CHECK(mean_n.grad()(i, j) == doctest::Approx(g).epsilon(1e-12));
    }
  }
  for (int j = 0; j < 2; ++j) {
    double g = 0.0;  // d/d log_sigma: sum_i ((y-m)/sigma)^2 / n - 1
    for (int i = 0; i < 3; ++i) {
      double d = (y(i, j) - mean(i, j)) * std::exp(-ls(0, j));
      g += d * d;
    }
    g = g / 3.0 - 1.0;
    CHECK(ls_n.grad()(0, j) == doctest::Approx(g).epsilon(1e-12));
  }
}

TEST_CASE("discriminator losses match hand-computed values") {
  CHECK(models::disc_loss_from_probs(0.9, 0.1) ==
        doctest::Approx(0.21072103131565256).epsilon(1e-14));
  CHECK(models::disc_loss_from_probs(0.5, 0.5) ==
        doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-14));
  CHECK(models::gen_score_from_prob(0.5) ==
        doctest::Approx(-std::log(2.0)).epsilon(1e-14));

  // Saturated probabilities stay finite through the clamp.
  CHECK(std::isfinite(models::disc_loss_from_probs(1.0, 0.0)));
  CHECK(std::isfinite(models::disc_loss_from_probs(0.0, 1.0)));
  CHECK(models::gen_score_from_prob(0.0) ==
        doctest::Approx(std::log(1e-7)).epsilon(1e-12));
}

TEST_CASE("taped discriminator losses agree with the scalar forms") {
  auto logit = [](double p) { return std::log(p / (1.0 - p)); };
  core::Tape<double> tp;
  Md lr(2, 1), lf(2, 1);
  lr << logit(0.9), logit(0.5);
  lf << logit(0.1), logit(0.5);
  auto lrn = core::make_leaf<double>(tp, lr, true);
  auto lfn = core::make_leaf<double>(tp, lf, true);

  auto d = models::disc_loss_node<double>(lrn, lfn);
  double expect = 0.5 * (models::disc_loss_from_probs(0.9, 0.1) +
                         models::disc_loss_from_probs(0.5, 0.5));
  CHECK(d.value()(0, 0) == doctest::Approx(expect).epsilon(1e-12));

  tp.backward(d.id);
  // d loss / d real_logit = (sigmoid(l) - 1) / n, d/d fake = sigmoid(l) / n.
  CHECK(lrn.grad()(0, 0) == doctest::Approx((0.9 - 1.0) / 2.0).epsilon(1e-9));
  CHECK(lrn.grad()(1, 0) == doctest::Approx((0.5 - 1.0) / 2.0).epsilon(1e-9));
  CHECK(lfn.grad()(0, 0) == doctest::Approx(0.1 / 2.0).epsilon(1e-9));

  core::Tape<double> tp2;
  auto lfn2 = core::make_leaf<double>(tp2, lf, true);
  auto g = models::gen_score_node<double>(lfn2);
  double gexpect = 0.5 * (models::gen_score_from_prob(0.1) +
                          models::gen_score_from_prob(0.5));
  CHECK(g.value()(0, 0) == doctest::Approx(gexpect).epsilon(1e-12));
  tp2.backward(g.id);
  // d score / d fake_logit = (1 - sigmoid(l)) / n.
  CHECK(lfn2.grad()(0, 0) == doctest::Approx(0.9 / 2.0).epsilon(1e-9));
}

TEST_CASE("generator gradients check out through embeddings and shared "
          "parameters") {
  auto run_gradcheck = [](VciModel<double>& m, const TreatmentBatch<double>& t,
                          const TreatmentBatch<double>& tq,
                          const CovariateBatch& x, const Md& y) {
    auto params = m.generator_params();
    auto loss_fn = [&](std::vector<Md>* grads) -> double {
      core::Tape<double> tp;
      models::BoundGenerator<double> bg;
      auto yn = core::make_constant<double>(tp, y);
      auto mu = models::encode_node(tp, m, bg, yn, t, x, true);
      auto recon = models::decode_mean_node(tp, m, bg, mu, t, true);
      auto cf = models::decode_mean_node(tp, m, bg, mu, tq, true);
      auto ls = models::log_sigma_node(tp, m, bg);
      auto ll = models::gaussian_log_lik_node<double>(tp, recon, y, ls);
      auto loss = core::add(core::neg(ll),
                            core::add(core::mean_all(core::square(cf)),
                                      core::mean_all(core::square(mu))));
      tp.backward(loss.id);
      if (grads) *grads = models::generator_grads(tp, bg, m);
      return loss.value()(0, 0);
    };
    return core::gradcheck<double>(loss_fn, params, 1e-5);
  };

  core::Engine eng = core::make_engine(21);

  SUBCASE("categorical treatment with covariates") {
    auto cfg = tiny_config(9);
    cfg.learn_sigma = true;
    auto m = models::make_vci_model<double>(cfg, categorical_shape(4, {2}, 3));
    smooth_activations(m);
    Md y = random_mat(3, 4, eng);
    TreatmentBatch<double> t, tq;
    t.levels = {0, 1, 2};
    tq.levels = {2, 0, 1};
    CovariateBatch x;
    x.slots = {{0, 1, 0}};
    auto res = run_gradcheck(m, t, tq, x, y);
    INFO(res.worst_param, "[", res.worst_row, ",", res.worst_col, "]");
    CHECK(res.max_rel_err < 1e-6);
  }

  SUBCASE("continuous treatment without covariates") {
    auto m = models::make_vci_model<double>(tiny_config(10),
                                            continuous_shape(4));
    smooth_activations(m);
    Md y = random_mat(2, 4, eng);
    TreatmentBatch<double> t, tq;
    t.categorical = tq.categorical = false;
    t.attrs.resize(2, 2);
    t.attrs << 1.7, 0.5, 2.6, 0.9;
    tq.attrs.resize(2, 2);
    tq.attrs << 2.0, 0.8, 1.9, 0.6;
    CovariateBatch x;
    auto res = run_gradcheck(m, t, tq, x, y);
    INFO(res.worst_param, "[", res.worst_row, ",", res.worst_col, "]");
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("discriminator gradients check out through its own embeddings") {
  auto cfg = tiny_config(13);
  auto m = models::make_vci_model<double>(cfg, categorical_shape(3, {2}, 2));
  smooth_activations(m);

  core::Engine eng = core::make_engine(14);
  Md y_real = random_mat(2, 3, eng);
  Md y_fake = random_mat(2, 3, eng);
  TreatmentBatch<double> t, tq;
  t.levels = {0, 1};
  tq.levels = {1, 0};
  CovariateBatch x;
  x.slots = {{1, 0}};

  auto params = m.discriminator_params();
  auto loss_fn = [&](std::vector<Md>* grads) -> double {
    core::Tape<double> tp;
    models::BoundDisc<double> bd;
    auto yr = core::make_constant<double>(tp, y_real);
    auto yf = core::make_constant<double>(tp, y_fake);
    auto lr = models::disc_logit_node(tp, m, bd, yr, t, x, true);
    auto lf = models::disc_logit_node(tp, m, bd, yf, tq, x, true);
    auto loss = models::disc_loss_node<double>(lr, lf);
    tp.backward(loss.id);
    if (grads) *grads = models::discriminator_grads(tp, bd, m);
    return loss.value()(0, 0);
  };
  auto res = core::gradcheck<double>(loss_fn, params, 1e-5);
  INFO(res.worst_param);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("empirical outcome model recovers stratum statistics") {
  auto ds = hand_dataset();
  auto m = models::EmpiricalOutcomeModel::fit(ds, 0.0);

  CHECK(m.stratum_count() == 2);
  const auto& s00 = m.stratum({0}, 0);
  CHECK(s00.count == 2);
  CHECK(s00.mean[0] == 2.0);
  CHECK(s00.var[0] == 1.0);
  const auto& s01 = m.stratum({0}, 1);
  CHECK(s01.count == 1);
  CHECK(s01.var[0] == 1e-6);

  // At the stratum mean with smoothed variance 1 the density is the unit
  // gaussian peak.
  CHECK(m.log_lik(Eigen::VectorXd::Constant(1, 2.0), {0}, 0) ==
        doctest::Approx(-0.5 * kLog2Pi).epsilon(1e-14));
  // Floored single-count stratum: -0.5*log(2*pi*1e-6).
  CHECK(m.log_lik(Eigen::VectorXd::Constant(1, 5.0), {0}, 1) ==
        doctest::Approx(-0.5 * (kLog2Pi + std::log(1e-6))).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(m.log_lik(Eigen::VectorXd::Zero(1), {1}, 0),
                       doctest::Contains("no stratum"), bench::DataError);

  // Counterfactual-query law per covariate cell: t'=1 twice, t'=0 once.
  const auto& tc = m.t_prime_counts().at({0});
  CHECK(tc[0] == 1.0);
  CHECK(tc[1] == 2.0);
}

TEST_CASE("bandwidth smooths and flattens the empirical density") {
  auto ds = hand_dataset();

  // Pooled variance of {1, 3, 5} is 8/3; h = 0.1 * sqrt(8/3).
  auto fitted = models::EmpiricalOutcomeModel::fit(ds, 0.1);
  CHECK(fitted.bandwidth() ==
        doctest::Approx(0.1 * std::sqrt(8.0 / 3.0)).epsilon(1e-14));

  auto m = models::EmpiricalOutcomeModel::fit(ds, 0.0);
  m.set_bandwidth(1.0);
  CHECK(m.log_lik(Eigen::VectorXd::Constant(1, 5.0), {0}, 1) ==
        doctest::Approx(-0.5 * std::log(2.0 * std::numbers::pi *
                                        (1.0 + 1e-6)))
            .epsilon(1e-12));

  m.set_bandwidth(1e6);
  double a = m.log_lik(Eigen::VectorXd::Constant(1, 0.0), {0}, 0);
  double b = m.log_lik(Eigen::VectorXd::Constant(1, 10.0), {0}, 0);
  CHECK(std::abs(a - b) < 1e-9);
}

TEST_CASE("empirical density node matches scalar evaluation and gradient") {
  auto ds = hand_dataset();
  auto m = models::EmpiricalOutcomeModel::fit(ds, 0.0);
  m.set_bandwidth(0.5);

  Md y(2, 1);
  y << 1.5, 4.0;
  CovariateBatch x;
  x.slots = {{0, 0}};
  std::vector<int> t_levels{0, 1};

  core::Tape<double> tp;
  auto yn = core::make_leaf<double>(tp, y, true);
  auto node = models::empirical_log_lik_node<double>(tp, m, yn, x, t_levels);

  double expect = 0.5 * (m.log_lik(Eigen::VectorXd::Constant(1, 1.5), {0}, 0) +
                         m.log_lik(Eigen::VectorXd::Constant(1, 4.0), {0}, 1));
  CHECK(node.value()(0, 0) == doctest::Approx(expect).epsilon(1e-13));

  tp.backward(node.id);
  // d/dy = -(y - mean) / (var + h^2) / n.
  double g0 = -(1.5 - 2.0) / (1.0 + 0.25) / 2.0;
  double g1 = -(4.0 - 5.0) / (1e-6 + 0.25) / 2.0;
  CHECK(yn.grad()(0, 0) == doctest::Approx(g0).epsilon(1e-12));
  CHECK(yn.grad()(1, 0) == doctest::Approx(g1).epsilon(1e-12));
}

TEST_CASE("empirical model json round trip preserves densities") {
  auto ds = hand_dataset();
  auto m = models::EmpiricalOutcomeModel::fit(ds, 0.1);
  auto j = m.to_json();
  auto m2 = models::EmpiricalOutcomeModel::from_json(j);

  Eigen::VectorXd probe = Eigen::VectorXd::Constant(1, 2.4);
  CHECK(m2.log_lik(probe, {0}, 0) == m.log_lik(probe, {0}, 0));
  CHECK(m2.bandwidth() == m.bandwidth());
  CHECK(m2.to_json().dump() == j.dump());
}

TEST_CASE("empirical and propensity fits reject continuous treatments") {
  bench::ScmSpec spec;
  spec.family = bench::Family::blob_image;
  spec.param_seed = 3;
  bench::Scm scm(spec);
  auto ds = scm.generate(5, 77);
  CHECK_THROWS_AS(models::EmpiricalOutcomeModel::fit(ds, 0.1),
                  bench::DataError);
  CHECK_THROWS_AS(models::PropensityModel::fit(ds, 2), bench::DataError);
}

TEST_CASE("propensity smoothing, flooring, and renormalization") {
  bench::Dataset ds;
  auto add = [&](int t) {
    bench::FullSample s;
    s.x = {0};
    s.t = bench::Treatment::categorical(t);
    s.t_prime = bench::Treatment::categorical(t);
    s.y = Eigen::VectorXd::Zero(1);
    ds.samples.push_back(std::move(s));
  };
  for (int i = 0; i < 3; ++i) add(0);
  add(1);

  // (count + 1) / (n + levels): 4/6 and 2/6.
  auto m = models::PropensityModel::fit(ds, 2, 1.0, 0.01);
  CHECK(m.prob({0}, 0) == doctest::Approx(4.0 / 6.0).epsilon(1e-15));
  CHECK(m.prob({0}, 1) == doctest::Approx(2.0 / 6.0).epsilon(1e-15));
  CHECK(m.prob({0}, 0) + m.prob({0}, 1) == doctest::Approx(1.0).epsilon(1e-15));

  // With no smoothing an unobserved arm is pulled up to the floor.
  bench::Dataset one_arm;
  one_arm.samples = ds.samples;
  one_arm.samples.resize(3);  // only level 0 remains
  auto f = models::PropensityModel::fit(one_arm, 3, 0.0, 0.01);
  CHECK(f.prob({0}, 0) == doctest::Approx(1.0 / 1.02).epsilon(1e-15));
  CHECK(f.prob({0}, 1) == doctest::Approx(0.01 / 1.02).epsilon(1e-15));
  double sum = f.prob({0}, 0) + f.prob({0}, 1) + f.prob({0}, 2);
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-15));

  CHECK_THROWS_WITH_AS(m.prob({7}, 0), doctest::Contains("no cell"),
                       bench::DataError);
}

TEST_CASE("exact propensity table matches the generator law") {
  bench::ScmSpec spec;
  spec.family = bench::Family::discrete;
  spec.param_seed = 40;
  spec.cards_x = 3;
  spec.cards_z = 2;
  spec.cards_t = 4;
  spec.cards_y = 2;
  bench::Scm scm(spec);

  auto m = models::PropensityModel::exact(scm);
  CHECK(m.cell_count() == 3);
  for (int x = 0; x < 3; ++x) {
    auto truth = scm.true_propensity({x});
    double sum = 0.0;
    for (int l = 0; l < 4; ++l) {
      CHECK(m.prob({x}, l) == truth[static_cast<size_t>(l)]);
      sum += m.prob({x}, l);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }

  bench::ScmSpec lin;
  lin.family = bench::Family::linear_gaussian;
  lin.param_seed = 41;
  lin.covariate_cards = {2, 3};
  lin.treatment_levels = 2;
  lin.latent_dim = 2;
  lin.outcome_dim = 2;
  bench::Scm scm2(lin);
  auto m2 = models::PropensityModel::exact(scm2);
  CHECK(m2.cell_count() == 6);
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 3; ++b) {
      auto truth = scm2.true_propensity({a, b});
      CHECK(m2.prob({a, b}, 0) == truth[0]);
      CHECK(m2.prob({a, b}, 1) == truth[1]);
    }
  }
}

TEST_CASE("propensity json round trip") {
  bench::Dataset ds;
  for (int i = 0; i < 6; ++i) {
    bench::FullSample s;
    s.x = {i % 2};
    s.t = bench::Treatment::categorical(i % 3);
    s.t_prime = s.t;
    s.y = Eigen::VectorXd::Zero(1);
    ds.samples.push_back(std::move(s));
  }
  auto m = models::PropensityModel::fit(ds, 3);
  auto j = m.to_json();
  auto m2 = models::PropensityModel::from_json(j);
  CHECK(m2.prob({0}, 1) == m.prob({0}, 1));
  CHECK(m2.to_json().dump() == j.dump());
}

TEST_CASE("model checkpoint round trip restores forward passes bitwise") {
  auto shape = categorical_shape(5, {2}, 3);
  auto cfg = tiny_config(30);
  auto m = models::make_vci_model<float>(cfg, shape);

  auto ck = models::model_to_checkpoint(m, {{"note", "round-trip"}});
  const std::string path = "test_model_ckpt.bin";
  core::write_checkpoint(path, ck);
  auto ck2 = core::read_checkpoint(path);
  CHECK(ck2.meta.at("note") == "round-trip");
  auto m2 = models::model_from_checkpoint<float>(ck2);
  std::remove(path.c_str());

  core::Engine eng = core::make_engine(31);
  Mf y = random_mat(4, 5, eng).cast<float>();
  TreatmentBatch<float> t, tq;
  t.levels = {0, 1, 2, 1};
  tq.levels = {2, 2, 0, 0};
  CovariateBatch x;
  x.slots = {{0, 1, 1, 0}};

  CHECK(models::encode_eval(m2, y, t, x) == models::encode_eval(m, y, t, x));
  CHECK(models::counterfactual_eval(m2, y, t, x, tq) ==
        models::counterfactual_eval(m, y, t, x, tq));
  CHECK(m2.dec_log_sigma == m.dec_log_sigma);

  ck2.tensors.pop_back();
  ck2.tensors.erase(ck2.tensors.begin());  // drop "enc.w0"
  CHECK_THROWS_WITH_AS(models::model_from_checkpoint<float>(ck2),
                       doctest::Contains("missing tensor"),
                       models::ModelError);
}

TEST_CASE("data shape parses generated dataset metadata") {
  bench::ScmSpec lin;
  lin.family = bench::Family::linear_gaussian;
  lin.param_seed = 50;
  lin.covariate_cards = {2, 2};
  lin.treatment_levels = 3;
  lin.latent_dim = 2;
  lin.outcome_dim = 4;
  bench::Scm scm(lin);
  auto s = DataShape::from_meta(scm.dataset_meta(10, 1));
  CHECK(s.outcome_dim == 4);
  CHECK(s.covariate_cards == std::vector<int>{2, 2});
  CHECK(s.categorical_treatment);
  CHECK(s.treatment_levels == 3);

  bench::ScmSpec blob;
  blob.family = bench::Family::blob_image;
  blob.param_seed = 51;
  bench::Scm scm2(blob);
  auto s2 = DataShape::from_meta(scm2.dataset_meta(10, 1));
  CHECK(s2.outcome_dim == 16 * 16);
  CHECK(s2.covariate_cards.empty());
  CHECK_FALSE(s2.categorical_treatment);
  CHECK(s2.t_lo == std::vector<double>{1.6, 0.4});
  CHECK(s2.t_hi == std::vector<double>{2.8, 1.0});

  CHECK_THROWS_AS(DataShape::from_meta(nlohmann::json::object()),
                  models::ModelError);

  // Round trip through the checkpoint-side serialization.
  auto j = models::data_shape_to_json(s2);
  auto s3 = models::data_shape_from_json(j);
  CHECK(s3.t_lo == s2.t_lo);
  CHECK(s3.t_hi == s2.t_hi);
  CHECK(s3.outcome_dim == s2.outcome_dim);
}
