#include "doctest.h"

#include "dira/networks.hpp"

using namespace dira;

TEST_CASE("encoder and decoder shapes") {
  net::EncoderSpec spec;
  spec.input_size = 32;
  spec.stage_channels = {4, 8, 16};
  spec.d_y = 16;
  Rng rng(1);
  const net::Encoder<float> enc(spec, rng);
  const net::Decoder<float> dec(spec, 1, rng);
  const auto e = enc(nn::Var<float>(nn::Tensor<float>({2, 1, 32, 32}, 0.5f)));
  CHECK(e.final_map.shape() == nn::Shape{2, 16, 4, 4});
  CHECK(e.y.shape() == nn::Shape{2, 16});
  REQUIRE(e.skips.size() == 3);
  const auto out = dec(e.final_map, e.skips);
  CHECK(out.shape() == nn::Shape{2, 1, 32, 32});
  for (float v : out.value().values()) CHECK((v > 0.0f && v < 1.0f));
}

TEST_CASE("encoder spec validation") {
  net::EncoderSpec spec;
  spec.input_size = 20;
  CHECK_THROWS(spec.validate());
  spec.input_size = 8;
  spec.stage_channels = {4, 4, 4};
  CHECK_THROWS(spec.validate());
}

TEST_CASE("adversary gives one logit per image") {
  Rng rng(2);
  const net::Adversary<float> adv({1, 4, false}, rng);
  const auto l = adv(nn::Var<float>(nn::Tensor<float>({3, 1, 32, 32}, 0.2f)));
  CHECK(l.value().size() == 3);
}

TEST_CASE("clones do not alias") {
  net::EncoderSpec spec;
  spec.input_size = 16;
  spec.stage_channels = {2, 4};
  spec.d_y = 8;
  Rng rng(3);
  net::Encoder<float> a(spec, rng);
  net::Encoder<float> b = a;
  b.make_independent(false);
  net::ParamList<float> pa, pb;
  a.collect("e", pa);
  b.collect("e", pb);
  auto v = pa[0].var;
  v.mutable_value()[0] += 1.0f;
  CHECK(pb[0].var.value()[0] != pa[0].var.value()[0]);
  CHECK_FALSE(pb[0].var.requires_grad());
}

TEST_CASE("twin update modes") {
  Rng rng(4);
  const net::Linear<double> online(3, 2, rng), twin_src(3, 2, rng);
  net::Linear<double> twin = twin_src;
  twin.make_independent(false);
  net::ParamList<double> po, pt;
  online.collect("l", po);
  twin.collect("l", pt);
  const auto before = pt[0].var.value();
  net::twin_update({net::CouplingMode::shared, 0.9}, po, pt);
  CHECK(pt[0].var.value().storage() == before.storage());
  net::twin_update({net::CouplingMode::momentum, 0.9}, po, pt);
  for (std::size_t k = 0; k < before.size(); ++k)
    CHECK(pt[0].var.value()[k] == 0.9 * before[k] + (1.0 - 0.9) * po[0].var.value()[k]);
}
