#include <catch2/catch_amalgamated.hpp>

#include "mvgpt/fusion.hpp"
#include "mvgpt/gradcheck.hpp"

using namespace mvgpt;

namespace {

Tensor rand_tensor(const Shape& s, Rng& rng) {
  Tensor t(s);
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("R=0 fusion is the identity") {
  Rng rng(1);
  CoAttention fuse("fuse", 0, 16, 2, 2, rng);
  Tape tape;
  Rng drng(2);
  Var e = tape.constant(rand_tensor({5, 16}, drng));
  Var v = tape.constant(rand_tensor({3, 16}, drng));
  FusedFeatures out = fuse.forward(e, std::vector<bool>(5, true), v);
  REQUIRE(out.e_hat.node() == e.node());  // literally the same nodes
  REQUIRE(out.v_hat.node() == v.node());
  REQUIRE(bitwise_equal(out.e_hat.value(), e.value()));
}

TEST_CASE("fusion preserves shapes at R=2") {
  Rng rng(3);
  CoAttention fuse("fuse", 2, 16, 2, 2, rng);
  Tape tape;
  Rng drng(4);
  Var e = tape.constant(rand_tensor({6, 16}, drng));
  Var v = tape.constant(rand_tensor({3, 16}, drng));
  FusedFeatures out = fuse.forward(e, std::vector<bool>(6, true), v);
  REQUIRE(out.e_hat.shape() == Shape{6, 16});
  REQUIRE(out.v_hat.shape() == Shape{3, 16});
}

TEST_CASE("fusion rejects mismatched inputs") {
  Rng rng(5);
  CoAttention fuse("fuse", 1, 16, 2, 2, rng);
  Tape tape;
  Var e = tape.constant(Tensor(Shape{4, 16}, 0.1));
  Var v8 = tape.constant(Tensor(Shape{3, 8}, 0.1));
  REQUIRE_THROWS_WITH(fuse.forward(e, std::vector<bool>(4, true), v8),
                      Catch::Matchers::ContainsSubstring("dim mismatch"));
  Var v = tape.constant(Tensor(Shape{3, 16}, 0.1));
  REQUIRE_THROWS_AS(fuse.forward(e, std::vector<bool>(3, true), v), std::invalid_argument);
}

TEST_CASE("perturbing a visual token changes the fused text features") {
  Rng rng(7);
  CoAttention fuse("fuse", 2, 16, 2, 2, rng);
  Rng drng(8);
  Tensor e = rand_tensor({5, 16}, drng), v = rand_tensor({3, 16}, drng);
  Tensor v2 = v.clone();
  v2(1, 4) += 0.25;

  Tape t1, t2;
  Tensor e_hat1 =
      fuse.forward(t1.constant(e), std::vector<bool>(5, true), t1.constant(v)).e_hat.value();
  Tensor e_hat2 =
      fuse.forward(t2.constant(e), std::vector<bool>(5, true), t2.constant(v2)).e_hat.value();
  REQUIRE(max_abs_diff(e_hat1, e_hat2) > 0.0);
}

TEST_CASE("pad-position text embeddings never reach the visual stream") {
  Rng rng(9);
  CoAttention fuse("fuse", 2, 16, 2, 2, rng);
  Rng drng(10);
  Tensor e = rand_tensor({5, 16}, drng), v = rand_tensor({3, 16}, drng);
  std::vector<bool> mask{true, true, true, false, false};
  Tensor e2 = e.clone();
  for (std::size_t j = 0; j < 16; ++j) {
    e2(3, j) = drng.uniform(-5.0, 5.0);
    e2(4, j) = drng.uniform(-5.0, 5.0);
  }

  Tape t1, t2;
  FusedFeatures a = fuse.forward(t1.constant(e), mask, t1.constant(v));
  FusedFeatures b = fuse.forward(t2.constant(e2), mask, t2.constant(v));
  REQUIRE(max_abs_diff(a.v_hat.value(), b.v_hat.value()) < 1e-12);
  REQUIRE(bitwise_equal(a.v_hat.value(), b.v_hat.value()));  // masked keys underflow exactly
}

TEST_CASE("both streams update from the previous layer") {
  Rng rng(11);
  CoAttention fuse("fuse", 3, 16, 2, 2, rng);
  Tape tape;
  Rng drng(12);
  Var e = tape.constant(rand_tensor({4, 16}, drng));
  Var v = tape.constant(rand_tensor({3, 16}, drng));
  FusionTrace trace;
  fuse.forward(e, std::vector<bool>(4, true), v, &trace);
  REQUIRE(trace.layers.size() == 3);

  REQUIRE(trace.layers[0].text_stream_kv == trace.v_in);
  REQUIRE(trace.layers[0].visual_stream_kv == trace.e_in);
  for (std::size_t r = 1; r < 3; ++r) {
    // layer r reads layer r-1 outputs...
    REQUIRE(trace.layers[r].text_stream_kv == trace.layers[r - 1].visual_out);
    REQUIRE(trace.layers[r].visual_stream_kv == trace.layers[r - 1].text_out);
    // ...and never the outputs produced within layer r itself
    REQUIRE(trace.layers[r].text_stream_kv != trace.layers[r].visual_out);
    REQUIRE(trace.layers[r].visual_stream_kv != trace.layers[r].text_out);
  }
}

TEST_CASE("fusion gradients agree with finite differences") {
  Rng rng(13);
  CoAttention fuse("fuse", 1, 8, 2, 2, rng);
  Rng drng(14);
  const Tensor e = rand_tensor({3, 8}, drng), v = rand_tensor({2, 8}, drng);
  std::vector<bool> mask{true, true, false};
  Rng wrng(15);
  Tensor we, wv;
  auto f = [&](bool bw) {
    Tape tape;
    FusedFeatures out = fuse.forward(tape.constant(e), mask, tape.constant(v));
    if (!we.defined()) {
      we = rand_tensor(out.e_hat.shape(), wrng);
      wv = rand_tensor(out.v_hat.shape(), wrng);
    }
    Var loss = add(sum_all(mul(out.e_hat, tape.constant(we))),
                   sum_all(mul(out.v_hat, tape.constant(wv))));
    if (bw) tape.backward(loss);
    return loss.value().item();
  };
  std::vector<Parameter*> params;
  fuse.collect(params);
  GradCheckOptions opt;
  opt.max_coords_per_param = 2;
  REQUIRE(finite_diff_check(f, params, opt).max_rel_err < 1e-5);
}
