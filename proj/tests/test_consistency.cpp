#include <doctest.h>

#include <cmath>

#include "corpus_fixture.hpp"
#include "customtext/consistency.hpp"
#include "customtext/imagetensor.hpp"
#include "customtext/rng.hpp"
#include "gradcheck.hpp"

using namespace customtext;
using namespace customtext::consistency;

namespace {

Geometry toy_geometry() {
  Geometry g;
  g.height = 4;
  g.width = 4;
  g.c1 = 3;
  g.c2 = 4;
  g.mask_dim = 2;
  return g;
}

Geometry small_geometry() {
  Geometry g;
  g.c1 = 8;
  g.c2 = 8;
  return g;
}

template <typename T>
nn::Tensor<T> uniform(int n, int c, int h, int w, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  nn::Tensor<T> t(n, c, h, w);
  for (auto& v : t.data) v = static_cast<T>(u(rng));
  return t;
}

nn::IndexMap random_mask(int n, int h, int w, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, 95);
  nn::IndexMap m(n, h, w);
  for (auto& v : m.data) v = static_cast<std::uint8_t>(d(rng));
  return m;
}

template <typename P>
void randomize(P& p, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> d(0.0, scale);
  for (auto* prm : p.params())
    for (auto& v : prm->value) v = static_cast<typename std::remove_reference_t<decltype(prm->value[0])>>(d(rng));
}

template <typename T>
Batch<T> random_batch(const Geometry& g, int n, std::mt19937_64& rng) {
  return {uniform<T>(n, g.image_c, g.height, g.width, rng),
          uniform<T>(n, g.latent_c, g.height / g.factor, g.width / g.factor, rng),
          random_mask(n, g.height, g.width, rng)};
}

}  // namespace

TEST_CASE("time grid follows the rho power rule") {
  const auto grid = make_time_grid();
  REQUIRE(grid.size() == 18);
  CHECK(grid.min() == 0.002);
  CHECK(grid.max() == 80.0);
  for (int i = 1; i < grid.size(); ++i) CHECK(grid.t[i] > grid.t[i - 1]);
  // Oracle: interpolate the 7th roots, then raise back.
  const double a = std::pow(0.002, 1.0 / 7), b = std::pow(80.0, 1.0 / 7);
  for (int i = 0; i < 18; ++i) {
    const double s = i / 17.0;
    const double r = (1 - s) * a + s * b;
    CHECK(grid.t[i] == doctest::Approx(r * r * r * r * r * r * r).epsilon(1e-12));
  }
  CHECK_THROWS_AS(make_time_grid(1), DomainError);
  CHECK_THROWS_AS(make_time_grid(18, 1.0, 0.5), DomainError);
}

TEST_CASE("boundary coefficients and boundary condition") {
  CHECK(c_skip(0.002, 0.002) == 1.0);
  CHECK(c_out(0.002, 0.002) == 0.0);
  CHECK(c_skip(80.0, 0.002) < 1e-4);
  CHECK(c_in(0.0) == doctest::Approx(2.0));

  std::mt19937_64 rng(1);
  const auto g = small_geometry();
  Backbone<float> b(g, 2);
  Adapter<float> a(g, 3);
  randomize(a, rng, 0.3);
  const auto z = uniform<float>(2, 3, 64, 64, rng, 3.0);
  const auto l = uniform<float>(2, 4, 16, 16, rng);
  const auto m = random_mask(2, 64, 64, rng);
  CHECK(control_forward(b, &a, z, {0.002, 0.002}, l, m, 0.002) == z);
  CHECK(control_forward<float>(b, nullptr, z, {0.002, 0.002}, l, m, 0.002) == z);
  CHECK_FALSE(control_forward(b, &a, z, {0.5, 0.5}, l, m, 0.002) == z);
}

TEST_CASE("fresh adapter is transparent") {
  std::mt19937_64 rng(4);
  const auto g = small_geometry();
  Backbone<float> b(g, 5);
  Adapter<float> a(g, 6);
  const auto grid = make_time_grid();
  for (int trial = 0; trial < 5; ++trial) {
    const auto z = uniform<float>(2, 3, 64, 64, rng, 10.0);
    const auto l = uniform<float>(2, 4, 16, 16, rng);
    auto m = random_mask(2, 64, 64, rng);
    const std::vector<double> t{grid.t[trial + 3], grid.t[17 - trial]};
    const auto base = control_forward<float>(b, nullptr, z, t, l, m, grid.min());
    CHECK(control_forward(b, &a, z, t, l, m, grid.min()) == base);
    std::fill(m.data.begin(), m.data.end(), 0);
    CHECK(control_forward(b, &a, z, t, l, m, grid.min()) == base);
  }
}

TEST_CASE("shape errors") {
  const auto g = small_geometry();
  Backbone<float> b(g, 1);
  Adapter<float> a(g, 1);
  nn::Tensor<float> z(1, 3, 64, 64), l(1, 4, 16, 16);
  nn::IndexMap m(1, 64, 64);
  CHECK_THROWS_AS(control_forward(b, &a, nn::Tensor<float>(1, 3, 32, 32), {1.0}, l, m, 0.002), ContractError);
  CHECK_THROWS_AS(control_forward(b, &a, z, {1.0}, nn::Tensor<float>(1, 4, 8, 8), m, 0.002), ContractError);
  CHECK_THROWS_AS(control_forward(b, &a, z, {1.0}, l, nn::IndexMap(1, 32, 32), 0.002), ContractError);
  CHECK_THROWS_AS(control_forward(b, &a, z, {1.0, 2.0}, l, m, 0.002), ContractError);
  Geometry bad = g;
  bad.height = 30;
  CHECK_THROWS_AS(Backbone<float>(bad, 0), ContractError);
}

TEST_CASE("distance of branches differing by 0.1 in 12 entries") {
  nn::Tensor<double> a(1, 3, 2, 2, 0.0), b(1, 3, 2, 2, 0.1);
  CHECK(consistency_distance(a, b, {1.0}) == doctest::Approx(0.12).epsilon(1e-12));
  nn::Tensor<float> af(2, 3, 2, 2, 0.0f), bf(2, 3, 2, 2, 0.1f);
  CHECK(consistency_distance(af, bf, {1.0, 1.0}) == doctest::Approx(0.12).epsilon(1e-6));
  CHECK(consistency_distance(af, bf, {2.0, 0.0}) == doctest::Approx(0.12).epsilon(1e-6));
}

TEST_CASE("degenerate grid gives zero loss and bad indices are rejected") {
  std::mt19937_64 rng(7);
  const auto g = toy_geometry();
  Backbone<double> b(g, 8);
  Adapter<double> a(g, 9);
  randomize(a, rng, 0.5);
  const auto batch = random_batch<double>(g, 2, rng);
  const auto eps = uniform<double>(2, 3, 4, 4, rng);
  const TimeGrid flat{{0.002, 0.7, 0.7, 80.0}};
  CHECK(consistency_loss(b, &a, b, &a, batch, {2, 2}, eps, flat, nullptr, false) == 0.0);
  CHECK(consistency_loss(b, &a, b, &a, batch, {1, 3}, eps, flat, nullptr, false) > 0.0);
  CHECK_THROWS_AS(consistency_loss(b, &a, b, &a, batch, {0, 1}, eps, flat, nullptr, false), DomainError);
  CHECK_THROWS_AS(consistency_loss(b, &a, b, &a, batch, {1, 4}, eps, flat, nullptr, false), DomainError);
}

TEST_CASE("adapter gradients match finite differences of the online branch") {
  std::mt19937_64 rng(10);
  const auto g = toy_geometry();
  const auto grid = make_time_grid();
  for (double scale : {0.0, 0.4}) {
    Backbone<double> b(g, 11);
    nn::set_frozen(b.params(), true);
    Adapter<double> a(g, 12);
    if (scale > 0) randomize(a, rng, scale);
    const Adapter<double> target = a;
    const auto batch = random_batch<double>(g, 2, rng);
    const auto eps = uniform<double>(2, 3, 4, 4, rng);
    const std::vector<int> n{2, 9};
    auto lambda = [](double t) { return 1.0 + 0.1 * t; };

    auto plist = a.params();
    nn::zero_grads(plist);
    consistency_loss(b, &a, b, &a, batch, n, eps, grid, lambda, true);
    double worst = 0;
    int checked = 0;
    for (auto* prm : plist) {
      // Only the online copy moves; the target keeps the unperturbed parameters.
      const auto rep = testsupport::check_gradient(prm->value, prm->grad, testsupport::all_indices(prm->size()), [&] {
        return consistency_loss(b, &a, b, &target, batch, n, eps, grid, lambda, false);
      });
      worst = std::max(worst, rep.max_rel_err);
      checked += rep.checked;
    }
    CAPTURE(scale);
    CHECK(checked == static_cast<int>(nn::count_values(plist)));
    CHECK(worst <= 1e-2);
    CHECK(worst <= 1e-5);
    for (auto* prm : b.params())
      for (double v : prm->grad) CHECK(v == 0.0);
  }
}

TEST_CASE("target branch receives no gradient") {
  std::mt19937_64 rng(13);
  const auto g = toy_geometry();
  const auto grid = make_time_grid();
  Backbone<double> b(g, 14);
  nn::set_frozen(b.params(), true);
  Adapter<double> a(g, 15);
  randomize(a, rng, 0.4);
  Adapter<double> target = a;
  const auto batch = random_batch<double>(g, 3, rng);
  const auto eps = uniform<double>(3, 3, 4, 4, rng);

  auto online = a.params();
  auto frozen_target = target.params();
  nn::zero_grads(online);
  nn::zero_grads(frozen_target);
  consistency_loss(b, &a, b, &target, batch, {1, 5, 16}, eps, grid, nullptr, true);
  for (auto* prm : frozen_target)
    for (double v : prm->grad) CHECK(v == 0.0);

  // Same gradients whether the target is the online object or a separate copy
  // (up to GEMM summation order, which depends on buffer alignment).
  std::vector<std::vector<double>> separate;
  for (auto* prm : online) separate.push_back(prm->grad);
  nn::zero_grads(online);
  consistency_loss(b, &a, b, &a, batch, {1, 5, 16}, eps, grid, nullptr, true);
  for (std::size_t k = 0; k < online.size(); ++k) {
    double diff = 0;
    for (std::size_t i = 0; i < separate[k].size(); ++i) diff = std::max(diff, std::abs(online[k]->grad[i] - separate[k][i]));
    CAPTURE(online[k]->name);
    CHECK(diff <= 1e-12);
  }
}

TEST_CASE("backbone gradients match finite differences without an adapter") {
  std::mt19937_64 rng(16);
  const auto g = toy_geometry();
  const auto grid = make_time_grid();
  Backbone<double> b(g, 17);
  const Backbone<double> target = b;
  const auto batch = random_batch<double>(g, 2, rng);
  const auto eps = uniform<double>(2, 3, 4, 4, rng);
  const std::vector<int> n{4, 12};
  auto plist = b.params();
  nn::zero_grads(plist);
  consistency_loss<double>(b, nullptr, b, nullptr, batch, n, eps, grid, nullptr, true);
  double worst = 0;
  for (auto* prm : plist) {
    const auto rep = testsupport::check_gradient(prm->value, prm->grad, testsupport::all_indices(prm->size()), [&] {
      return consistency_loss<double>(b, nullptr, target, nullptr, batch, n, eps, grid, nullptr, false);
    });
    worst = std::max(worst, rep.max_rel_err);
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("checkpoints round trip") {
  std::mt19937_64 rng(18);
  const auto g = small_geometry();
  Backbone<float> b(g, 19);
  Adapter<float> a(g, 20);
  randomize(a, rng, 0.2);
  const auto b2 = backbone_from_checkpoint(ckpt::deserialize(ckpt::serialize(to_checkpoint(b))));
  const auto a2 = adapter_from_checkpoint(ckpt::deserialize(ckpt::serialize(to_checkpoint(a))));
  CHECK(b2.checksum() == b.checksum());
  CHECK(a2.checksum() == a.checksum());
  CHECK(b2.geo.c1 == 8);
  CHECK_THROWS_AS(backbone_from_checkpoint(to_checkpoint(a)), FormatError);
  CHECK_THROWS_AS(adapter_from_checkpoint(to_checkpoint(b)), FormatError);
}

TEST_CASE("decoding is deterministic and zero adapter matches the backbone") {
  std::mt19937_64 rng(21);
  const auto g = small_geometry();
  Backbone<float> b(g, 22);
  Adapter<float> a(g, 23);
  const auto l = uniform<float>(2, 4, 16, 16, rng);
  const auto m = random_mask(2, 64, 64, rng);
  const auto one = decode_consistent(b, &a, l, m, 1, 5);
  CHECK(one == decode_consistent(b, &a, l, m, 1, 5));
  CHECK_FALSE(one == decode_consistent(b, &a, l, m, 1, 6));
  CHECK(one == decode_consistent(b, nullptr, l, m, 1, 5));
  CHECK(decode_consistent(b, &a, l, m, 4, 5) == decode_consistent(b, nullptr, l, m, 4, 5));
  CHECK_THROWS_AS(decode_consistent(b, &a, l, m, 0, 5), DomainError);
}

TEST_CASE("adapter training keeps the backbone frozen and starts at the backbone loss") {
  const auto corpus = testsupport::small_corpus(4, 2);
  diffusion::Vae vae(3);
  const auto samples = make_samples(vae, corpus);
  const auto g = small_geometry();
  Backbone<float> b(g, 24);
  Adapter<float> a(g, 25);
  const auto before = b.checksum();

  diffusion::TrainOptions o;
  o.steps = 3;
  o.batch = 1;
  o.seed = 26;
  o.lr = 1e-3;
  const auto report = train_adapter(b, a, samples, o);
  CHECK(report.losses.size() == 3);
  CHECK(b.checksum() == before);
  for (auto* p : b.params()) CHECK_FALSE(p->frozen);

  // Replay the first draw and evaluate the unadapted backbone on it.
  auto rng = make_rng(o.seed, 0x636d6174);
  const auto k = std::uniform_int_distribution<std::size_t>(0, corpus.size() - 1)(rng);
  const int n = std::uniform_int_distribution<int>(1, 17)(rng);
  const auto eps = normal_like<float>(1, 3, 64, 64, rng);
  const Batch<float> batch{samples.images[k], samples.latents[k], samples.masks[k]};
  const double vanilla = consistency_loss<float>(b, nullptr, b, nullptr, batch, {n}, eps, make_time_grid(), nullptr,
                                                 false);
  CHECK(report.losses[0] == doctest::Approx(vanilla).epsilon(1e-9));

  CHECK_THROWS_AS(train_adapter(b, a, Samples{}, o), ContractError);
}

TEST_CASE("pretraining keeps the boundary condition") {
  const auto corpus = testsupport::small_corpus(3, 4);
  diffusion::Vae vae(5);
  const auto samples = make_samples(vae, corpus);
  const auto g = small_geometry();
  Backbone<float> b(g, 27);
  const auto before = b.checksum();
  diffusion::TrainOptions o;
  o.steps = 2;
  o.batch = 2;
  o.seed = 28;
  const auto report = pretrain_backbone(b, samples, o);
  CHECK(report.losses.size() == 2);
  CHECK(b.checksum() != before);
  std::mt19937_64 rng(29);
  const auto z = uniform<float>(1, 3, 64, 64, rng, 2.0);
  const auto l = uniform<float>(1, 4, 16, 16, rng);
  CHECK(control_forward<float>(b, nullptr, z, {0.002}, l, nn::IndexMap(1, 64, 64), 0.002) == z);
}
