#include <doctest.h>

#include <functional>

#include "cape/attention.hpp"
#include "cape/nn.hpp"

using namespace cape;
using nn::TapeT;

namespace {

using Tensor64 = TensorT<double>;

// Central-difference check of d(scalar loss)/d(leaf) for every configured
// leaf of a graph builder.
void check_gradients(const std::function<int(TapeT<double>&, const std::vector<int>&)>& build,
                     std::vector<Tensor64> leaves, double tol = 1e-7) {
  TapeT<double> tape;
  std::vector<int> ids;
  for (auto& l : leaves) ids.push_back(tape.leaf(l, true));
  const int loss = build(tape, ids);
  tape.backward(loss);

  const double h = 1e-6;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    for (std::int64_t i = 0; i < leaves[li].numel(); ++i) {
      auto eval = [&](double delta) {
        TapeT<double> t2;
        std::vector<int> ids2;
        for (std::size_t lj = 0; lj < leaves.size(); ++lj) {
          Tensor64 copy = leaves[lj];
          if (lj == li) copy.at(i) += delta;
          ids2.push_back(t2.leaf(copy, false));
        }
        return t2.val(build(t2, ids2)).at(0);
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      const double analytic = tape.has_grad(ids[li]) ? tape.grad(ids[li]).at(i) : 0.0;
      // Central differences carry ~1e-10 absolute noise at h = 1e-6, so the
      // comparison needs an absolute floor alongside the relative tolerance.
      CHECK(analytic == doctest::Approx(fd).epsilon(tol).scale(1e-3));
    }
  }
}

Tensor64 rand_t(Rng& rng, std::vector<std::int64_t> shape) {
  return Tensor64::randn(std::move(shape), rng);
}

}  // namespace

TEST_CASE("gradients: elementwise, matmul, linear") {
  Rng rng(21);
  check_gradients(
      [](TapeT<double>& t, const std::vector<int>& in) {
        const int s = nn::mul(t, nn::add(t, in[0], in[1]), in[2]);
        return nn::mean_all(t, nn::silu(t, s));
      },
      {rand_t(rng, {3, 4}), rand_t(rng, {3, 4}), rand_t(rng, {3, 4})});

  check_gradients(
      [](TapeT<double>& t, const std::vector<int>& in) {
        return nn::mean_all(t, nn::linear(t, nn::matmul(t, in[0], in[1]), in[2], in[3]));
      },
      {rand_t(rng, {3, 5}), rand_t(rng, {5, 4}), rand_t(rng, {4, 2}), rand_t(rng, {2})});

  check_gradients(
      [](TapeT<double>& t, const std::vector<int>& in) {
        return nn::mean_all(t, nn::sub(t, nn::scale(t, in[0], 1.7), in[1]));
      },
      {rand_t(rng, {2, 3}), rand_t(rng, {2, 3})});
}

TEST_CASE("gradients: softmax and layernorm") {
  Rng rng(22);
  check_gradients(
      [](TapeT<double>& t, const std::vector<int>& in) {
        const int sm = nn::softmax_rows(t, in[0]);
        return nn::mean_all(t, nn::mul(t, sm, in[1]));
      },
      {rand_t(rng, {4, 6}), rand_t(rng, {4, 6})});

  check_gradients(
      [](TapeT<double>& t, const std::vector<int>& in) {
        const int ln = nn::layernorm_rows(t, in[0], in[1], in[2]);
        return nn::mean_all(t, nn::mul(t, ln, in[3]));
      },
      {rand_t(rng, {5, 8}), rand_t(rng, {8}), rand_t(rng, {8}), rand_t(rng, {5, 8})},
      1e-5);
}

TEST_CASE("gradients: conv2d stride 1 and 2, bias") {
  Rng rng(23);
  check_gradients(
      [](TapeT<double>& t, const std::vector<int>& in) {
        const int y = nn::conv2d(t, in[0], in[1], in[2], 1, 1);
        return nn::mean_all(t, nn::mul(t, y, in[3]));
      },
      {rand_t(rng, {2, 5, 5}), rand_t(rng, {3, 2, 3, 3}), rand_t(rng, {3}),
       rand_t(rng, {3, 5, 5})});

  check_gradients(
      [](TapeT<double>& t, const std::vector<int>& in) {
        const int y = nn::conv2d(t, in[0], in[1], in[2], 2, 1);
        return nn::mean_all(t, nn::mul(t, y, in[3]));
      },
      {rand_t(rng, {2, 6, 6}), rand_t(rng, {3, 2, 3, 3}), rand_t(rng, {3}),
       rand_t(rng, {3, 3, 3})});
}

TEST_CASE("gradients: upsample, concat, channel bias, layout") {
  Rng rng(24);
  check_gradients(
      [](TapeT<double>& t, const std::vector<int>& in) {
        const int up = nn::upsample2x(t, in[0]);
        return nn::mean_all(t, nn::mul(t, up, in[1]));
      },
      {rand_t(rng, {2, 3, 3}), rand_t(rng, {2, 6, 6})});

  check_gradients(
      [](TapeT<double>& t, const std::vector<int>& in) {
        const int cat = nn::concat_chw(t, in[0], in[1]);
        return nn::mean_all(t, nn::mul(t, cat, in[2]));
      },
      {rand_t(rng, {2, 3, 3}), rand_t(rng, {1, 3, 3}), rand_t(rng, {3, 3, 3})});

  check_gradients(
      [](TapeT<double>& t, const std::vector<int>& in) {
        const int y = nn::add_channel_bias(t, in[0], in[1]);
        return nn::mean_all(t, nn::mul(t, y, in[2]));
      },
      {rand_t(rng, {3, 2, 2}), rand_t(rng, {3}), rand_t(rng, {3, 2, 2})});

  check_gradients(
      [](TapeT<double>& t, const std::vector<int>& in) {
        const int tok = nn::to_tokens(t, in[0]);
        const int back = nn::from_tokens(t, tok, 2, 3);
        return nn::mean_all(t, nn::mul(t, back, in[1]));
      },
      {rand_t(rng, {4, 2, 3}), rand_t(rng, {4, 2, 3})});
}

TEST_CASE("gradients: stack, slice, transpose, cape rows, mse") {
  Rng rng(25);
  check_gradients(
      [](TapeT<double>& t, const std::vector<int>& in) {
        const int v = nn::vstack(t, {in[0], in[1]});
        const int h = nn::hstack(t, {v, v});
        const int s = nn::slice_cols(t, h, 1, 3);
        return nn::mean_all(t, nn::mul(t, nn::transpose2d(t, s), in[2]));
      },
      {rand_t(rng, {2, 4}), rand_t(rng, {3, 4}), rand_t(rng, {3, 5})});

  const CapeConfig cfg = CapeConfig::four_dof(RadiusBounds(1.5, 4.0));
  const Pose pose = Pose::four_dof(Pose4(0.4, 0.9, 1.3, 2.2));
  check_gradients(
      [cfg, pose](TapeT<double>& t, const std::vector<int>& in) {
        const int y = nn::cape_rows(t, in[0], pose, AttentionRole::Key, cfg);
        return nn::mean_all(t, nn::mul(t, y, in[1]));
      },
      {rand_t(rng, {3, 8}), rand_t(rng, {3, 8})});

  const CapeConfig cfg6 = CapeConfig::six_dof(0.01);
  const Pose pose6 = Pose::six_dof(
      Pose6(Eigen::AngleAxisd(0.8, Eigen::Vector3d(1, 2, 2).normalized()).toRotationMatrix(),
            Eigen::Vector3d(0.5, -1.0, 2.0)));
  check_gradients(
      [cfg6, pose6](TapeT<double>& t, const std::vector<int>& in) {
        const int y = nn::cape_rows(t, in[0], pose6, AttentionRole::Query, cfg6);
        return nn::mean_all(t, nn::mul(t, y, in[1]));
      },
      {rand_t(rng, {2, 8}), rand_t(rng, {2, 8})});

  Rng rng2(26);
  auto target = std::make_shared<const Tensor64>(rand_t(rng2, {3, 4}));
  check_gradients(
      [target](TapeT<double>& t, const std::vector<int>& in) {
        return nn::mse_vs_const(t, in[0], target);
      },
      {rand_t(rng2, {3, 4})});
}

TEST_CASE("gradients: full attention block against finite differences") {
  Rng rng(27);
  const CapeConfig cfg = CapeConfig::four_dof(RadiusBounds(1.5, 4.0));
  const int heads = 2, d = 16, T = 3;
  auto params = AttentionParamsT<double>::random(d, rng);
  const Pose pa = Pose::four_dof(Pose4(0.3, 1.0, 0.0, 2.0));
  const Pose pb = Pose::four_dof(Pose4(1.2, 0.8, 0.4, 3.0));
  const Tensor64 mask = rand_t(rng, {2 * T, d});

  check_gradients(
      [&, mask](TapeT<double>& t, const std::vector<int>& in) {
        nn::AttentionWeightNodes<double> w;
        w.wq = in[2];
        w.wk = in[3];
        w.wv = in[4];
        w.wo = in[5];
        w.ln_gamma = in[6];
        w.ln_beta = in[7];
        const auto outs =
            nn::self_attention_block(t, {{in[0], pa}, {in[1], pb}}, w, cfg, heads);
        const int both = nn::vstack(t, outs);
        const int masked = nn::mul(t, both, t.leaf(mask));
        return nn::mean_all(t, masked);
      },
      {rand_t(rng, {T, d}), rand_t(rng, {T, d}), params.wq, params.wk, params.wv, params.wo,
       params.ln_gamma, params.ln_beta},
      1e-5);
}
