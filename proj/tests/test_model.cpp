#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "reference_model.hpp"
#include "unifork/model.hpp"
#include "unifork/toyworld.hpp"

using namespace unifork;

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

// Random stream mixing text ids and whole image positions.
TokenSequence random_stream(const ModelConfig& cfg, Rng& rng, std::size_t positions) {
  VocabLayout v(cfg);
  TokenSequence ids;
  for (std::size_t p = 0; p < positions; ++p) {
    if (uniform01(rng) < 0.5) {
      for (std::size_t d = 0; d < cfg.rvq_depth; ++d)
        ids.push_back(v.image_id(static_cast<int>(uniform_index(rng, cfg.image_codebook))));
    } else {
      ids.push_back(static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(v.text_head_size()))));
    }
  }
  return ids;
}

double max_abs_diff(const Tensor& t, const ref::Mat& m) {
  double d = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t k = 0; k < m[i].size(); ++k) d = std::max(d, std::abs(t.at(i, k) - m[i][k]));
  return d;
}

// Randomize norms and biases too, so the comparison covers them.
void perturb_all(ForkedTransformer& m, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& [name, v] : m.parameters())
    for (auto& x : v.node().value.storage()) x += 0.1 * standard_normal(rng);
}

}  // namespace

TEST(Model, MatchesReferenceForwardFullyShared) {
  auto cfg = small_config(3, 0);
  ForkedTransformer m(cfg, 5);
  perturb_all(m, 6);
  ref::Weights w(m);
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    auto ids = random_stream(cfg, rng, 20);
    for (auto br : {Branch::Und, Branch::Gen}) {
      auto tr = m.forward(ids, br);
      auto r = ref::forward(w, ids);
      EXPECT_LT(max_abs_diff(tr.text_logits.value(), r.text_logits), 1e-9);
      if (br == Branch::Gen && !r.code_logits.empty()) {
        EXPECT_LT(max_abs_diff(tr.code_logits.value(), r.code_logits), 1e-9);
      }
    }
  }
}

TEST(Model, MatchesReferenceForwardForked) {
  auto cfg = small_config(2, 2);
  ForkedTransformer m(cfg, 11);
  perturb_all(m, 12);
  ref::Weights w(m);
  Rng rng(13);
  auto ids = random_stream(cfg, rng, 24);
  for (auto br : {Branch::Und, Branch::Gen}) {
    auto tr = m.forward(ids, br);
    auto r = ref::forward(w, ids, branch_name(br));
    EXPECT_LT(max_abs_diff(tr.text_logits.value(), r.text_logits), 1e-9);
    ASSERT_EQ(tr.hidden_states.size(), r.hidden.size());
    for (std::size_t l = 0; l < r.hidden.size(); ++l) EXPECT_LT(max_abs_diff(tr.hidden_states[l].value(), r.hidden[l]), 1e-9);
  }
}

TEST(Model, DepthOneVisionHeadMatchesReference) {
  auto cfg = small_config(2, 1);
  cfg.rvq_depth = 1;
  cfg.image_codebook = 80;
  ForkedTransformer m(cfg, 3);
  perturb_all(m, 4);
  ref::Weights w(m);
  Rng rng(5);
  auto ids = random_stream(cfg, rng, 16);
  auto tr = m.forward(ids, Branch::Gen);
  auto r = ref::forward(w, ids, "gen");
  ASSERT_FALSE(r.code_logits.empty());
  EXPECT_LT(max_abs_diff(tr.code_logits.value(), r.code_logits), 1e-9);
}

TEST(Model, BatchedForwardEqualsPerSequence) {
  auto cfg = small_config();
  ForkedTransformer m(cfg, 1);
  Rng rng(2);
  std::vector<TokenSequence> batch{random_stream(cfg, rng, 10), random_stream(cfg, rng, 17), random_stream(cfg, rng, 3)};
  auto joint = m.forward(batch, Branch::Und);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    auto one = m.forward(batch[s], Branch::Und);
    const auto off = joint.layout.seq_offset[s];
    for (std::size_t r = 0; r < one.text_logits.rows(); ++r)
      for (std::size_t k = 0; k < one.text_logits.cols(); ++k)
        EXPECT_NEAR(joint.text_logits.value().at(off + r, k), one.text_logits.value().at(r, k), 1e-12);
  }
}

TEST(Model, CausalPrefixInvariance) {
  auto cfg = small_config();
  ForkedTransformer m(cfg, 1);
  Rng rng(3);
  auto ids = random_stream(cfg, rng, 20);
  auto full = m.forward(ids, Branch::Gen).text_logits.value();
  TokenSequence prefix;
  std::size_t rows = 0;
  for (std::size_t i = 0; rows < 8; ++rows) {
    const std::size_t n = m.vocab().is_image(ids[i]) ? cfg.rvq_depth : 1;
    prefix.insert(prefix.end(), ids.begin() + static_cast<long>(i), ids.begin() + static_cast<long>(i + n));
    i += n;
  }
  auto part = m.forward(prefix, Branch::Gen).text_logits.value();
  for (std::size_t r = 0; r < part.rows(); ++r)
    for (std::size_t k = 0; k < part.cols(); ++k) EXPECT_NEAR(part.at(r, k), full.at(r, k), 1e-12);
}

TEST(Model, BranchesDifferOnlyAfterForkLayer) {
  auto cfg = small_config(2, 2);
  ForkedTransformer m(cfg, 8);
  Rng rng(1);
  auto ids = random_stream(cfg, rng, 12);
  auto u = m.forward(ids, Branch::Und);
  auto g = m.forward(ids, Branch::Gen);
  for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(u.hidden_states[l].value(), g.hidden_states[l].value());
  EXPECT_FALSE(u.hidden_states[2].value() == g.hidden_states[2].value());
}

TEST(Model, FullySharedBranchesAreIdentical) {
  auto cfg = small_config(3, 0);
  ForkedTransformer m(cfg, 8);
  Rng rng(1);
  auto ids = random_stream(cfg, rng, 12);
  EXPECT_EQ(m.forward(ids, Branch::Und).text_logits.value(), m.forward(ids, Branch::Gen).text_logits.value());
}

TEST(Model, UndLossLeavesGenBranchUntouched) {
  auto cfg = small_config(2, 1);
  ForkedTransformer m(cfg, 2);
  Rng rng(4);
  auto ids = random_stream(cfg, rng, 14);
  backward(sum(m.forward(ids, Branch::Und).text_logits));
  for (const auto& [name, v] : m.parameters()) {
    const bool touched = !v.node().grad.empty();
    if (param_group(name) == ParamGroup::Gen) {
      EXPECT_FALSE(touched) << name;
    }
  }
  EXPECT_FALSE(m.param("und.blocks.2.attn.qkv.weight").node().grad.empty());
}

TEST(Model, ParameterPartitionIsExhaustiveAndDisjoint) {
  ForkedTransformer m(ModelConfig{}, 1);
  auto s = m.shared_params();
  auto u = m.branch_params(Branch::Und);
  auto g = m.branch_params(Branch::Gen);
  EXPECT_EQ(s.size() + u.size() + g.size(), m.parameters().size());
  for (const auto& n : u) EXPECT_FALSE(s.count(n) || g.count(n));
  for (const auto& n : g) EXPECT_FALSE(s.count(n));
  EXPECT_TRUE(u.count("heads.text.weight"));
  EXPECT_TRUE(g.count("heads.vision.out.weight"));
  EXPECT_TRUE(s.count("shared.connector.fc1.weight"));
}

TEST(Model, ForkedVariantActiveParamsMatchFullyShared) {
  ModelConfig forked;
  ModelConfig flat = forked;
  flat.shared_layers = forked.depth();
  flat.branch_layers = 0;
  ForkedTransformer a(forked, 1), b(flat, 1);
  for (auto br : {Branch::Und, Branch::Gen}) {
    const double x = static_cast<double>(a.active_parameter_count(br)), y = static_cast<double>(b.active_parameter_count(br));
    EXPECT_LT(std::abs(x - y) / y, 0.05);
  }
  EXPECT_GT(a.parameter_count(), b.parameter_count());
}

TEST(Model, InitForkFromTrunkReproducesTrunkLogits) {
  auto tc = small_config(3, 0);
  ForkedTransformer trunk(tc, 21);
  perturb_all(trunk, 22);
  auto fork = init_fork_from_trunk(trunk, 2, 1);
  Rng rng(23);
  auto ids = random_stream(tc, rng, 18);
  for (auto br : {Branch::Und, Branch::Gen}) {
    auto a = trunk.forward(ids, br);
    auto b = fork.forward(ids, br);
    EXPECT_EQ(a.text_logits.value(), b.text_logits.value());
    if (br == Branch::Gen) {
      EXPECT_EQ(a.code_logits.value(), b.code_logits.value());
    }
  }
  EXPECT_THROW(init_fork_from_trunk(trunk, 2, 2), ConfigError);
  EXPECT_THROW(init_fork_from_trunk(fork, 2, 1), ConfigError);
}

TEST(Model, RejectsBadSequences) {
  auto cfg = small_config();
  ForkedTransformer m(cfg, 1);
  const auto& v = m.vocab();
  EXPECT_THROW(m.forward(TokenSequence{0, v.image_end}, Branch::Und), VocabularyError);
  EXPECT_THROW(m.forward(TokenSequence{0, -1}, Branch::Und), VocabularyError);
  EXPECT_THROW(m.forward(TokenSequence{0, v.image_id(1)}, Branch::Gen), VocabularyError);
  TokenSequence too_long(cfg.max_seq_len + 1, 7);
  EXPECT_THROW(m.forward(too_long, Branch::Und), Error);
}

TEST(Model, CheckpointRoundTripPreservesLogits) {
  auto cfg = small_config();
  ForkedTransformer m(cfg, 31);
  perturb_all(m, 32);
  const auto path = (std::filesystem::temp_directory_path() / "unifork_model_rt.bin").string();
  m.save(path);
  auto back = ForkedTransformer::load(path);
  EXPECT_EQ(back.config(), cfg);
  EXPECT_EQ(back.codebook(), m.codebook());
  Rng rng(3);
  auto ids = random_stream(cfg, rng, 10);
  EXPECT_EQ(back.forward(ids, Branch::Gen).code_logits.value(), m.forward(ids, Branch::Gen).code_logits.value());
  EXPECT_EQ(checkpoint::encode(back.named_tensors()), checkpoint::encode(m.named_tensors()));
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".json");
}

TEST(Model, CloneIsIndependent) {
  ForkedTransformer m(small_config(), 1);
  auto c = m.clone();
  c.param("heads.text.bias").node().value[0] += 1.0;
  EXPECT_NE(c.param("heads.text.bias").value()[0], m.param("heads.text.bias").value()[0]);
}

TEST(Model, DefaultConfigSizes) {
  ForkedTransformer m(ModelConfig{}, 1);
  EXPECT_EQ(m.parameter_count(), 486359u);
  toyworld::World world(m.config());
  toyworld::Lexicon lex(m.config());
  Rng rng(1);
  auto s = toyworld::build_sample(world, lex, toyworld::sample_scene(rng, toyworld::Curriculum::TwoObject),
                                  toyworld::Task::Und, toyworld::Format::Dialogue, 0.0, rng);
  auto lay = m.pack({s.ids});
  EXPECT_LE(lay.total_rows, m.config().max_seq_len);
}
