#include "checks.hpp"
#include "doctest.h"

#include <cmath>
#include <random>

#include "dira/errors.hpp"
#include "dira/objectives.hpp"
#include "dira/rng.hpp"

using namespace dira;
using TD = nn::Tensor<double>;
using VD = nn::Var<double>;

namespace {

void report(const std::vector<checks::Outcome>& outcomes) {
  for (const auto& o : outcomes) {
    INFO(o.name << ": " << o.detail);
    CHECK(o.pass);
  }
}

}  // namespace

TEST_CASE("loss worked examples") { report(checks::loss_oracles()); }

TEST_CASE("analytic gradients match central differences") { report(checks::gradient_checks()); }

TEST_CASE("infonce preconditions") {
  const TD z({1, 2}, std::vector<double>{1, 0});
  const TD neg({1, 2}, std::vector<double>{0, 1});
  CHECK_THROWS_AS(loss::loss_infonce(VD(z), z, neg, 0.0), ParameterError);
  CHECK_THROWS_AS(loss::loss_infonce(VD(z), z, TD({0, 2}), 1.0), PreconditionError);
  const TD not_unit({1, 2}, std::vector<double>{2, 0});
  CHECK_THROWS(loss::loss_infonce(VD(not_unit), z, neg, 1.0));
}

TEST_CASE("infonce gradient reaches the query only") {
  const TD z({1, 2}, std::vector<double>{1, 0});
  VD q(z, true);
  loss::loss_infonce(q, z, TD({1, 2}, std::vector<double>{0, 1}), 0.5).backward();
  CHECK(q.has_grad());
}

TEST_CASE("negative cosine rejects zero vectors") {
  CHECK_THROWS_AS(loss::negative_cosine(VD(TD({1, 2})), VD(TD({1, 2}, 1.0))), NumericError);
}

TEST_CASE("barlow needs two samples") {
  CHECK_THROWS_AS(loss::loss_barlow(VD(TD({1, 3}, 1.0)), VD(TD({1, 3}, 1.0)), 0.005), PreconditionError);
}

TEST_CASE("barlow cross-correlation is bounded") {
  Rng rng(3);
  std::normal_distribution<double> g;
  TD a({16, 4}), b({16, 4});
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = g(rng);
    b[i] = a[i] + 0.3 * g(rng);
  }
  const TD c = loss::cross_correlation(a, b);
  for (double v : c.values()) CHECK(std::abs(v) <= 1.0 + 1e-9);
}

TEST_CASE("classwise label checks") {
  CHECK_THROWS_AS(loss::loss_classwise(VD(TD({2, 3})), {0, 3}), ParameterError);
  CHECK_THROWS_AS(loss::loss_classwise(VD(TD({2, 3})), {0}), ShapeError);
}

TEST_CASE("combine") {
  const auto b = loss::combine(1.0, 0.5, 0.2, {});
  CHECK(b.total == doctest::Approx(6.0002));
  CHECK_THROWS_AS(loss::combine(1.0, 1.0, 1.0, {1.0, -1.0, 0.0}), ParameterError);
}

TEST_CASE("negative queue") {
  loss::NegativeQueue<double> q(3, 2);
  CHECK(q.fill() == 0);
  q.enqueue(TD({2, 2}, std::vector<double>{1, 1, 2, 2}));
  q.enqueue(TD({2, 2}, std::vector<double>{3, 3, 4, 4}));
  const TD e = q.entries();
  REQUIRE(e.dim(0) == 3);
  CHECK(e.at(0, 0) == 2);
  CHECK(e.at(2, 0) == 4);
  CHECK_THROWS(q.enqueue(TD({1, 3})));

  loss::NegativeQueue<double> r(3, 2);
  r.restore(q.storage(), q.fill(), q.head());
  CHECK(r.entries().storage() == e.storage());
  CHECK_THROWS(r.restore(q.storage(), 4, 0));
}
