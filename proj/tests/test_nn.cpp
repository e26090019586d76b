#include <doctest.h>

#include <random>

#include "customtext/nn.hpp"
#include "gradcheck.hpp"

using namespace customtext;
using nn::Tensor;

namespace {

Tensor<double> random_tensor(int n, int c, int h, int w, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<double> t(n, c, h, w);
  for (auto& v : t.data) v = dist(rng);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

// Naive direct convolution used as an independent oracle for the im2col path.
Tensor<double> direct_conv(const nn::Conv2d<double>& conv, const Tensor<double>& x) {
  const int k = conv.kernel(), s = conv.stride(), pad = k / 2;
  const int ho = conv.out_size(x.h), wo = conv.out_size(x.w);
  Tensor<double> y(x.n, conv.out_channels(), ho, wo);
  for (int i = 0; i < x.n; ++i)
    for (int o = 0; o < y.c; ++o)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = conv.bias.value[o];
          for (int c = 0; c < x.c; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * s + ky - pad, ix = ox * s + kx - pad;
                if (iy < 0 || ix < 0 || iy >= x.h || ix >= x.w) continue;
                acc += conv.weight.value[(o * x.c + c) * k * k + ky * k + kx] * x(i, c, iy, ix);
              }
          y(i, o, oy, ox) = acc;
        }
  return y;
}

}  // namespace

TEST_CASE("conv matches direct convolution for several geometries") {
  std::mt19937_64 rng(3);
  for (auto [k, s, h] : std::vector<std::array<int, 3>>{{3, 1, 5}, {3, 2, 6}, {3, 2, 5}, {1, 1, 4}, {5, 1, 6}}) {
    nn::Conv2d<double> conv("c", 2, 3, k, s, nn::Init::Default, rng);
    auto x = random_tensor(2, 2, h, h + 1, rng);
    auto y = conv.forward(x, false);
    auto ref = direct_conv(conv, x);
    REQUIRE(y.same_shape(ref));
    for (std::size_t i = 0; i < y.data.size(); ++i) CHECK(y.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-12));
  }
}

TEST_CASE("zero-initialized conv outputs zeros") {
  std::mt19937_64 rng(1);
  nn::Conv2d<float> conv("z", 3, 4, 1, 1, nn::Init::Zero, rng);
  Tensor<float> x(1, 3, 4, 4, 2.5f);
  for (float v : conv.forward(x, false).data) CHECK(v == 0.0f);
}

TEST_CASE("small network gradients match finite differences") {
  std::mt19937_64 rng(11);
  nn::Conv2d<double> c1("c1", 2, 3, 3, 1, nn::Init::Default, rng);
  nn::SiLU<double> act;
  nn::Conv2d<double> c2("c2", 3, 4, 3, 2, nn::Init::Default, rng);
  nn::Conv2d<double> c3("c3", 4, 2, 1, 1, nn::Init::Default, rng);
  auto x = random_tensor(2, 2, 4, 4, rng);
  auto r = random_tensor(2, 2, 4, 4, rng);

  auto loss = [&](bool record) {
    auto h = c1.forward(x, record);
    h = act.forward(h, record);
    h = c2.forward(h, record);
    auto pooled = nn::avg_pool(h, 2);
    h = nn::upsample_nearest(pooled, 4);
    h = c3.forward(h, record);
    return dot(h, r);
  };
  nn::ParamList<double> params;
  c1.collect(params);
  c2.collect(params);
  c3.collect(params);
  nn::zero_grads(params);
  loss(true);
  auto g = c3.backward(r);
  g = nn::upsample_nearest_backward(g, 4);
  g = nn::avg_pool_backward(g, 2);
  g = c2.backward(g);
  g = act.backward(g);
  auto dx = c1.backward(g);

  for (auto* p : params) {
    auto rep = testsupport::check_gradient(p->value, p->grad, testsupport::all_indices(p->size()),
                                           [&] { return loss(false); });
    CAPTURE(p->name);
    CHECK(rep.max_rel_err < 1e-6);
  }
  auto rep = testsupport::check_gradient(x.data, dx.data, testsupport::all_indices(x.size()),
                                         [&] { return loss(false); });
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("embedding and concat gradients") {
  std::mt19937_64 rng(5);
  nn::Embedding<double> emb("e", 6, 3, rng);
  nn::Conv2d<double> conv("c", 4, 2, 3, 1, nn::Init::Default, rng);
  nn::IndexMap idx(1, 3, 3);
  for (int i = 0; i < 9; ++i) idx.data[i] = static_cast<std::uint8_t>(i % 6);
  auto extra = random_tensor(1, 1, 3, 3, rng);
  auto r = random_tensor(1, 2, 3, 3, rng);
  auto loss = [&](bool record) {
    auto e = emb.forward(idx, record);
    auto cat = nn::concat_channels<double>({&e, &extra});
    return dot(conv.forward(cat, record), r);
  };
  emb.table.zero_grad();
  conv.weight.zero_grad();
  conv.bias.zero_grad();
  loss(true);
  auto d = conv.backward(r);
  emb.backward(nn::slice_channels(d, 0, 3));
  auto rep = testsupport::check_gradient(emb.table.value, emb.table.grad,
                                         testsupport::all_indices(emb.table.size()), [&] { return loss(false); });
  CHECK(rep.max_rel_err < 1e-6);
  auto dextra = nn::slice_channels(d, 3, 1);
  rep = testsupport::check_gradient(extra.data, dextra.data, testsupport::all_indices(extra.size()),
                                    [&] { return loss(false); });
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("inference calls leave the recorded cache alone") {
  std::mt19937_64 rng(2);
  nn::Conv2d<double> conv("c", 1, 1, 3, 1, nn::Init::Default, rng);
  auto a = random_tensor(1, 1, 4, 4, rng);
  auto b = random_tensor(1, 1, 4, 4, rng);
  Tensor<double> ones(1, 1, 4, 4, 1.0);

  conv.weight.zero_grad();
  conv.forward(a, true);
  conv.backward(ones, false);
  auto expected = conv.weight.grad;

  conv.weight.zero_grad();
  conv.forward(a, true);
  conv.forward(b, false);
  conv.backward(ones, false);
  CHECK(conv.weight.grad == expected);
}

TEST_CASE("frozen parameters receive no gradient and no update") {
  std::mt19937_64 rng(9);
  nn::Conv2d<float> conv("c", 2, 2, 3, 1, nn::Init::Default, rng);
  conv.weight.frozen = conv.bias.frozen = true;
  nn::ParamList<float> params;
  conv.collect(params);
  nn::zero_grads(params);
  const auto before = conv.weight.value;
  Tensor<float> x(1, 2, 4, 4, 1.0f);
  conv.forward(x, true);
  auto dx = conv.backward(Tensor<float>(1, 2, 4, 4, 1.0f));
  for (float g : conv.weight.grad) CHECK(g == 0.0f);
  CHECK_FALSE(dx.empty());
  nn::Adam<float> opt(params, 1e-2);
  opt.step();
  CHECK(conv.weight.value == before);
}

TEST_CASE("adam decreases a quadratic") {
  nn::Param<double> p("p", {3});
  p.value = {1.0, -2.0, 3.0};
  nn::Adam<double> opt({&p}, 0.1);
  auto f = [&] { return p.value[0] * p.value[0] + p.value[1] * p.value[1] + p.value[2] * p.value[2]; };
  const double start = f();
  for (int i = 0; i < 200; ++i) {
    for (int k = 0; k < 3; ++k) p.grad[k] = 2 * p.value[k];
    opt.step();
  }
  CHECK(f() < 1e-2 * start);
}

TEST_CASE("shape errors are contract errors") {
  std::mt19937_64 rng(1);
  nn::Conv2d<float> conv("c", 3, 4, 3, 1, nn::Init::Default, rng);
  CHECK_THROWS_AS(conv.forward(Tensor<float>(1, 2, 4, 4), false), ContractError);
  CHECK_THROWS_AS(conv.backward(Tensor<float>(1, 4, 4, 4)), ContractError);
  CHECK_THROWS_AS(nn::avg_pool(Tensor<float>(1, 1, 5, 5), 2), ContractError);
}
