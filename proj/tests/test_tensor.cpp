#include <gtest/gtest.h>

#include <cmath>

#include "unifork/autograd.hpp"
#include "unifork/checkpoint.hpp"
#include "unifork/gradcheck.hpp"

using namespace unifork;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = scale * standard_normal(rng);
  return t;
}

// Gradient of `build(x)` at every listed input vs central differences.
void expect_gradients(const std::vector<Var>& inputs, const std::function<Var()>& build, double tol = 1e-6) {
  for (auto& in : inputs) in.node().zero_grad();
  backward(build());
  Rng rng(7);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = inputs[k].grad();
    auto loss = [&] {
      NoGradGuard ng;
      return build().value().item();
    };
    GradCheckOptions opt;
    opt.tolerance = tol;
    auto res = check_gradient("input" + std::to_string(k), inputs[k], analytic, loss, rng, opt);
    EXPECT_TRUE(res.pass) << res.name << " max rel err " << res.max_rel_err;
  }
}

}  // namespace

TEST(Matmul, IdentityReturnsOperand) {
  auto I = constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  auto B = constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(matmul(I, B).value(), B.value());
}

TEST(Matmul, HandArithmetic) {
  auto a = constant(Tensor::matrix(1, 2, {1, 2}));
  auto b = constant(Tensor::matrix(2, 1, {3, 4}));
  EXPECT_DOUBLE_EQ(matmul(a, b).value().item(), 11.0);
}

TEST(Matmul, ShapeMismatchThrows) {
  auto a = constant(Tensor({2, 3}));
  auto b = constant(Tensor({2, 3}));
  EXPECT_THROW(matmul(a, b), DimensionError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  auto a = parameter(random_tensor({5, 7}, rng));
  auto b = parameter(random_tensor({7, 3}, rng));
  expect_gradients({a, b}, [&] { return sum(matmul(a, b)); }, 1e-6);
}

TEST(Softmax, UniformOnEqualLogits) {
  auto p = softmax_rows(constant(Tensor::matrix(1, 3, {0, 0, 0}))).value();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  auto p = softmax_rows(constant(Tensor::matrix(1, 2, {1000, 0}))).value();
  EXPECT_TRUE(p.all_finite());
  EXPECT_NEAR(p[0], 1.0, 1e-12);
  EXPECT_NEAR(p[1], 0.0, 1e-12);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(3);
  auto p = softmax_rows(constant(random_tensor({20, 11}, rng, 5.0))).value();
  for (std::size_t r = 0; r < 20; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 11; ++c) {
      EXPECT_GE(p.at(r, c), 0.0);
      s += p.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(CrossEntropy, ConfidentCorrectIsNearZero) {
  auto logits = constant(Tensor::matrix(2, 3, {50, 0, 0, 0, 0, 50}));
  std::vector<int> t{0, 2};
  EXPECT_NEAR(cross_entropy(logits, t, {true, true}).value().item(), 0.0, 1e-12);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  auto logits = constant(Tensor({3, 4}));
  std::vector<int> t{0, 3, 1};
  EXPECT_NEAR(cross_entropy(logits, t, {true, true, true}).value().item(), std::log(4.0), 1e-14);
}

TEST(CrossEntropy, MaskedOutTargetsAreIgnoredBitwise) {
  Rng rng(5);
  auto logits = constant(random_tensor({4, 6}, rng));
  std::vector<bool> mask{true, false, true, false};
  std::vector<int> t1{1, 2, 3, 4}, t2{1, 5, 3, 0};
  EXPECT_EQ(cross_entropy(logits, t1, mask).value().item(), cross_entropy(logits, t2, mask).value().item());
}

TEST(CrossEntropy, EmptyMaskThrows) {
  auto logits = constant(Tensor({2, 3}));
  std::vector<int> t{0, 0};
  EXPECT_THROW(cross_entropy(logits, t, {false, false}), Error);
}

TEST(CrossEntropy, InvariantToRowShift) {
  Rng rng(9);
  Tensor x = random_tensor({5, 7}, rng);
  Tensor y = x;
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 7; ++c) y.at(r, c) += 3.7 * static_cast<double>(r + 1);
  std::vector<int> t{0, 1, 2, 3, 4};
  std::vector<bool> m(5, true);
  EXPECT_NEAR(cross_entropy(constant(x), t, m).value().item(), cross_entropy(constant(y), t, m).value().item(), 1e-9);
}

TEST(CrossEntropy, Gradient) {
  Rng rng(11);
  auto x = parameter(random_tensor({6, 5}, rng));
  std::vector<int> t{0, 4, 2, 2, 1, 3};
  std::vector<bool> m{true, true, false, true, false, true};
  expect_gradients({x}, [&] { return cross_entropy(x, t, m); });
}

TEST(Backward, SumGivesOnes) {
  Rng rng(2);
  auto x = parameter(random_tensor({3, 4}, rng));
  backward(sum(x));
  const Tensor g = x.grad();
  for (double v : g.values()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, HalfSquaredNormGivesInput) {
  Rng rng(2);
  auto x = parameter(random_tensor({3, 4}, rng));
  backward(scale(sum(mul(x, x)), 0.5));
  EXPECT_EQ(x.grad(), x.value());
}

TEST(Backward, NonScalarRootThrows) {
  auto x = parameter(Tensor({2, 2}));
  EXPECT_THROW(backward(x), DimensionError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  auto x = parameter(Tensor::matrix(1, 2, {1.5, -2.0}));
  auto y = add(x, x);
  backward(sum(mul(y, x)));  // 2 x^2 -> 4x
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -8.0);
}

TEST(Ops, LayerNormGradient) {
  Rng rng(13);
  auto x = parameter(random_tensor({4, 8}, rng));
  auto g = parameter(random_tensor({8}, rng));
  auto b = parameter(random_tensor({8}, rng));
  auto w = constant(random_tensor({4, 8}, rng));
  expect_gradients({x, g, b}, [&] { return sum(mul(layer_norm(x, g, b), w)); });
}

TEST(Ops, GeluGradient) {
  Rng rng(17);
  auto x = parameter(random_tensor({3, 5}, rng, 2.0));
  auto w = constant(random_tensor({3, 5}, rng));
  expect_gradients({x}, [&] { return sum(mul(gelu(x), w)); });
}

TEST(Ops, SoftmaxGradient) {
  Rng rng(19);
  auto x = parameter(random_tensor({3, 5}, rng));
  auto w = constant(random_tensor({3, 5}, rng));
  expect_gradients({x}, [&] { return sum(mul(softmax_rows(x), w)); });
}

TEST(Ops, BiasEmbeddingGatherConcatGradients) {
  Rng rng(23);
  auto table = parameter(random_tensor({6, 4}, rng));
  auto bias = parameter(random_tensor({4}, rng));
  auto other = parameter(random_tensor({2, 4}, rng));
  auto w = constant(random_tensor({7, 4}, rng));
  std::vector<int> ids{0, 3, 3, 5, 1};
  std::vector<std::size_t> order{6, 0, 2, 1, 5, 4, 3};
  expect_gradients({table, bias, other}, [&] {
    auto e = add_bias(embedding_lookup(table, ids), bias);
    return sum(mul(gather_rows(concat_rows({e, other}), order), w));
  });
}

TEST(Ops, EmbeddingRejectsUnknownId) {
  auto table = constant(Tensor({4, 2}));
  std::vector<int> ids{4};
  EXPECT_THROW(embedding_lookup(table, ids), VocabularyError);
}

TEST(Attention, GradientOverPackedSegments) {
  Rng rng(29);
  auto qkv = parameter(random_tensor({9, 3 * 8}, rng));
  auto w = constant(random_tensor({9, 8}, rng));
  std::vector<std::size_t> segs{4, 5};
  expect_gradients({qkv}, [&] { return sum(mul(causal_attention(qkv, 2, segs), w)); });
}

TEST(Attention, IsCausalAndSegmentLocal) {
  Rng rng(31);
  Tensor base = random_tensor({7, 12}, rng);
  std::vector<std::size_t> segs{3, 4};
  auto out0 = causal_attention(constant(base), 2, segs).value();
  Tensor perturbed = base;
  for (std::size_t c = 0; c < 12; ++c) perturbed.at(5, c) += 1.0;  // row 2 of segment 2
  auto out1 = causal_attention(constant(perturbed), 2, segs).value();
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out0.at(r, c), out1.at(r, c)) << r;
}

TEST(Attention, FirstPositionCopiesItsValue) {
  Rng rng(37);
  Tensor qkv = random_tensor({3, 6}, rng);
  std::vector<std::size_t> segs{3};
  auto out = causal_attention(constant(qkv), 1, segs).value();
  for (std::size_t c = 0; c < 2; ++c) EXPECT_DOUBLE_EQ(out.at(0, c), qkv.at(0, 4 + c));
}

TEST(Determinism, SameInputsSameBits) {
  auto run = [] {
    Rng rng(41);
    auto x = parameter(random_tensor({5, 6}, rng));
    auto ww = parameter(random_tensor({6, 6}, rng));
    auto l = sum(gelu(matmul(x, ww)));
    backward(l);
    return std::make_pair(l.value().item(), ww.grad());
  };
  auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Checkpoint, EncodesHeaderAndRoundTrips) {
  Rng rng(43);
  checkpoint::NamedTensors ts{{"a", random_tensor({2, 3}, rng)}, {"shared.b", random_tensor({4}, rng)}};
  const auto bytes = checkpoint::encode(ts);
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(bytes.substr(0, 4), "UFRK");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);
  // name length of the first record follows the version
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1u);
  EXPECT_EQ(bytes[12], 'a');
  auto back = checkpoint::decode(bytes);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].first, "a");
  EXPECT_EQ(back[1].second, ts[1].second);
  EXPECT_EQ(checkpoint::encode(back), bytes);
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
  EXPECT_THROW(checkpoint::decode("XXXX\x01\0\0\0"), Error);
  auto bytes = checkpoint::encode({{"a", Tensor({4}, 1.0)}});
  EXPECT_THROW(checkpoint::decode(bytes.substr(0, bytes.size() - 3)), Error);
}
