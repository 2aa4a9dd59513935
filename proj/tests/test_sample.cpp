#include <gtest/gtest.h>

#include <cmath>

#include "unifork/sampling.hpp"

using namespace unifork;
using namespace unifork::toyworld;

namespace {

ModelConfig small_config(std::size_t M = 2, std::size_t N = 1) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.shared_layers = M;
  c.branch_layers = N;
  c.grid_side = 6;
  c.max_seq_len = 64;
  c.init_std = 0.2;
  return c;
}

void perturb_all(ForkedTransformer& m, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& [name, v] : m.parameters())
    for (auto& x : v.node().value.storage()) x += 0.1 * standard_normal(rng);
}

double row_diff(const Tensor& t, std::size_t r, const Vec& v) {
  double d = 0.0;
  for (Eigen::Index k = 0; k < v.size(); ++k) d = std::max(d, std::abs(t.at(r, static_cast<std::size_t>(k)) - v[k]));
  return d;
}

}  // namespace

class CacheParity : public ::testing::TestWithParam<std::tuple<std::size_t, std::size_t, std::size_t>> {};

TEST_P(CacheParity, MatchesBatchedForward) {
  auto [M, N, D] = GetParam();
  auto cfg = small_config(M, N);
  cfg.rvq_depth = D;
  ForkedTransformer m(cfg, 21);
  perturb_all(m, 22);
  Lexicon lex(cfg);
  Rng rng(5);
  for (int trial = 0; trial < 3; ++trial) {
    const Scene s = sample_scene(rng, Curriculum::TwoObject);
    auto ids = gen_prompt(lex, &s, Format::Pretrain);
    const std::size_t prompt_rows = ids.size();
    std::vector<int> codes(cfg.image_tokens() * D);
    for (auto& c : codes) c = static_cast<int>(uniform_index(rng, cfg.image_codebook));
    VocabLayout v(cfg);
    for (int c : codes) ids.push_back(v.image_id(c));
    ids.push_back(VocabLayout::kImgEnd);

    for (auto br : {Branch::Gen, Branch::Und}) {
      auto tr = m.forward(ids, br);
      InferenceSession sess(m, br);
      const auto& logits = tr.text_logits.value();
      std::size_t row = 0;
      double worst = 0.0, worst_code = 0.0;
      for (std::size_t i = 0; i < ids.size();) {
        if (v.is_image(ids[i])) {
          std::vector<int> pos(codes.begin() + static_cast<std::ptrdiff_t>(i - prompt_rows),
                               codes.begin() + static_cast<std::ptrdiff_t>(i - prompt_rows + D));
          if (br == Branch::Gen) {
            // Predicted from the previous row's feature.
            DepthSession ds(m, sess.feature());
            const std::size_t p = (i - prompt_rows) / D;
            std::vector<int> prefix;
            for (std::size_t d = 0; d < D; ++d) {
              worst_code = std::max(worst_code, row_diff(tr.code_logits.value(), p * D + d, ds.next_logits(prefix)));
              prefix.push_back(pos[d]);
            }
          }
          sess.push_image(pos);
          i += D;
        } else {
          sess.push_token(ids[i]);
          ++i;
        }
        worst = std::max(worst, row_diff(logits, row, sess.text_logits()));
        for (std::size_t l = 0; l < sess.layer_states().size(); ++l)
          worst = std::max(worst, row_diff(tr.hidden_states[l].value(), row, sess.layer_states()[l]));
        ++row;
      }
      EXPECT_LT(worst, 1e-12);
      EXPECT_LT(worst_code, 1e-12);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Shapes, CacheParity,
                         ::testing::Values(std::make_tuple(2u, 1u, 2u), std::make_tuple(3u, 0u, 2u),
                                           std::make_tuple(1u, 2u, 1u)));

TEST(Cfg, EndpointsAreExact) {
  Rng rng(1);
  Vec c(50), u(50);
  for (Eigen::Index i = 0; i < 50; ++i) {
    c[i] = 10 * standard_normal(rng);
    u[i] = 10 * standard_normal(rng);
  }
  EXPECT_EQ(cfg_logits(c, u, 1.0), c);
  EXPECT_EQ(cfg_logits(c, u, 0.0), u);
  EXPECT_THROW(cfg_logits(c, Vec(3), 2.0), DimensionError);
}

TEST(Cfg, AffineInScale) {
  Rng rng(2);
  Vec c(40), u(40);
  for (Eigen::Index i = 0; i < 40; ++i) {
    c[i] = standard_normal(rng);
    u[i] = standard_normal(rng);
  }
  for (double s : {0.5, 2.0, 4.0, 7.25}) {
    Vec got = cfg_logits(c, u, s);
    Vec want = u + s * (c - u);
    EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-12);
    // l(s) - l(0) is linear in s.
    Vec d1 = cfg_logits(c, u, s) - u, d2 = cfg_logits(c, u, 2 * s) - u;
    EXPECT_LT((d2 - 2 * d1).cwiseAbs().maxCoeff(), 1e-12 * (1 + s));
  }
  Tensor tc({2, 3}), tu({2, 3});
  for (std::size_t i = 0; i < 6; ++i) {
    tc[i] = standard_normal(rng);
    tu[i] = standard_normal(rng);
  }
  EXPECT_EQ(cfg_logits(tc, tu, 1.0), tc);
  EXPECT_EQ(cfg_logits(tc, tu, 0.0), tu);
}

TEST(Sampler, TopKAndGreedy) {
  Vec l(5);
  l << 0.0, 3.0, 1.0, 2.9, -1.0;
  SamplerConfig g;
  g.greedy = true;
  Rng rng(3);
  EXPECT_EQ(sample_logits(l, g, rng), 1);
  SamplerConfig k2;
  k2.top_k = 2;
  std::array<int, 5> hits{};
  for (int i = 0; i < 2000; ++i) ++hits[static_cast<std::size_t>(sample_logits(l, k2, rng))];
  EXPECT_EQ(hits[0] + hits[2] + hits[4], 0);
  EXPECT_GT(hits[1], 800);
  EXPECT_GT(hits[3], 800);
  SamplerConfig full;
  std::array<int, 5> all{};
  for (int i = 0; i < 20000; ++i) ++all[static_cast<std::size_t>(sample_logits(l, full, rng))];
  const double z = std::exp(0.0) + std::exp(3.0) + std::exp(1.0) + std::exp(2.9) + std::exp(-1.0);
  EXPECT_NEAR(all[2] / 20000.0, std::exp(1.0) / z, 0.01);
  SamplerConfig bad;
  bad.temperature = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Sampler, UntrainedModelEmitsLegalGridsDeterministically) {
  auto cfg = small_config();
  ForkedTransformer m(cfg, 4);
  Rng rs(9);
  const Scene s = sample_scene(rs, Curriculum::Single);
  SamplerConfig sc;
  for (double scale : {1.0, 2.0, 0.0}) {
    sc.cfg_scale = scale;
    Rng a = sample_rng(7, 0, 0), b = sample_rng(7, 0, 0);
    auto ca = sample_codes(m, &s, sc, a);
    auto cb = sample_codes(m, &s, sc, b);
    EXPECT_EQ(ca, cb);
    ASSERT_EQ(ca.size(), cfg.image_tokens() * cfg.rvq_depth);
    for (int c : ca) {
      EXPECT_GE(c, 0);
      EXPECT_LT(c, static_cast<int>(cfg.image_codebook));
    }
    EXPECT_EQ(sample_image(m, &s, sc, a).cells.size(), cfg.image_tokens());
  }
  Rng c = sample_rng(7, 0, 1), d = sample_rng(7, 0, 0);
  sc.cfg_scale = 2.0;
  EXPECT_NE(sample_codes(m, &s, sc, c), sample_codes(m, &s, sc, d));
}

TEST(Sampler, ZeroScaleMatchesUnconditional) {
  auto cfg = small_config();
  ForkedTransformer m(cfg, 5);
  const Scene s = make_scene({Object{ShapeKind::Circle, Color::Blue, 4, Size::Large}});
  SamplerConfig sc;
  sc.cfg_scale = 0.0;
  Rng a = sample_rng(3, 1, 0), b = sample_rng(3, 1, 0);
  auto guided = sample_codes(m, &s, sc, a);
  sc.cfg_scale = 1.0;
  auto uncond = sample_codes(m, nullptr, sc, b);
  EXPECT_EQ(guided, uncond);
}

TEST(Eval, GroundTruthRendersScorePerfectly) {
  ModelConfig cfg;
  World world(cfg);
  auto suite = make_suite(11, 30);
  auto r = score_images(cfg, suite, 2, [&](std::size_t p, std::size_t) { return world.render(suite.prompts[p].second); });
  for (auto f : kGenFactors) EXPECT_EQ(r.factors.at(factor_name(f)), 1.0) << factor_name(f);
  EXPECT_EQ(r.overall, 1.0);
  EXPECT_EQ(r.parse_failure_rate, 0.0);
  EXPECT_EQ(r.samples, 300u);
}

TEST(Eval, FactorsDiscriminate) {
  using O = Object;
  const Scene want = make_scene({O{ShapeKind::Square, Color::Red, 0, Size::Small}, O{ShapeKind::Cross, Color::Blue, 8, Size::Large}});
  const Scene swapped = make_scene({O{ShapeKind::Cross, Color::Red, 0, Size::Small}, O{ShapeKind::Square, Color::Blue, 8, Size::Large}});
  const Scene moved = make_scene({O{ShapeKind::Square, Color::Red, 1, Size::Small}, O{ShapeKind::Cross, Color::Blue, 8, Size::Large}});
  EXPECT_TRUE(factor_match(GenFactor::TwoObjects, want, swapped));
  EXPECT_FALSE(factor_match(GenFactor::ColorAttri, want, swapped));
  EXPECT_FALSE(factor_match(GenFactor::Position, want, swapped));
  EXPECT_TRUE(factor_match(GenFactor::ColorAttri, want, moved));
  EXPECT_FALSE(factor_match(GenFactor::Position, want, moved));
  const Scene one = make_scene({O{ShapeKind::Square, Color::Red, 0, Size::Small}});
  EXPECT_FALSE(factor_match(GenFactor::TwoObjects, want, one));
}

TEST(Eval, ParseFailureScoresZero) {
  ModelConfig cfg;
  auto suite = make_suite(2, 4);
  auto r = score_images(cfg, suite, 1, [&](std::size_t, std::size_t) {
    GridImage g{cfg.grid_side, std::vector<std::uint64_t>(cfg.image_tokens(), 1)};
    return g;
  });
  EXPECT_EQ(r.overall, 0.0);
  EXPECT_EQ(r.parse_failure_rate, 1.0);
}

TEST(Eval, UntrainedModelScoresNearZero) {
  ModelConfig cfg;
  ForkedTransformer m(cfg, 13);
  auto suite = make_suite(3, 6);
  SamplerConfig sc;
  auto g = score_generation(m, suite, 1, sc);
  EXPECT_LT(g.overall, 0.05);
  auto u = score_understanding(m, make_und_suite(3, 12));
  EXPECT_EQ(u.exact, 0.0);
  EXPECT_GE(u.shape, u.exact);
}

TEST(Eval, CaptionScoring) {
  ModelConfig cfg;
  Lexicon lex(cfg);
  using O = Object;
  std::vector<Scene> scenes{make_scene({O{ShapeKind::Circle, Color::Green, 3, Size::Large}}),
                            make_scene({O{ShapeKind::Square, Color::Red, 0, Size::Small}, O{ShapeKind::Cross, Color::Blue, 8, Size::Large}}),
                            make_scene({O{ShapeKind::Triangle, Color::Yellow, 5, Size::Small}})};
  auto wrong_color = scenes[0];
  wrong_color.objects[0].color = Color::Red;
  auto r = score_captions(cfg, scenes, [&](std::size_t i) {
    if (i == 0) return describe(lex, wrong_color);
    if (i == 1) return describe(lex, scenes[1]);
    return std::vector<int>{};
  });
  EXPECT_DOUBLE_EQ(r.exact, 1.0 / 3);
  EXPECT_DOUBLE_EQ(r.shape, 2.0 / 3);
  EXPECT_DOUBLE_EQ(r.color, 1.0 / 3);
  EXPECT_DOUBLE_EQ(r.position, 2.0 / 3);
  for (double a : {r.shape, r.color, r.position, r.size}) EXPECT_GE(a, r.exact);
}

TEST(Eval, ReportsHaveStableKeyOrder) {
  GenReport g;
  for (auto f : kGenFactors) g.factors[factor_name(f)] = 0.5;
  EXPECT_EQ(g.to_json().dump(),
            R"({"single_object":0.5,"two_objects":0.5,"colors":0.5,"position":0.5,"color_attri":0.5,"overall":0.0,"parse_failure_rate":0.0,"samples":0})");
  UndReport u;
  EXPECT_EQ(u.to_json().begin().key(), "exact");
}

TEST(Caption, GreedyIsDeterministicAndBounded) {
  auto cfg = small_config();
  ForkedTransformer m(cfg, 8);
  World world(cfg);
  Rng rng(4);
  const auto g = world.render(sample_scene(rng, Curriculum::TwoObject));
  auto a = generate_caption(m, g, 10);
  EXPECT_EQ(a, generate_caption(m, g, 10));
  EXPECT_LE(a.size(), 10u);
  for (int id : a) EXPECT_NE(id, VocabLayout::kEos);
}
