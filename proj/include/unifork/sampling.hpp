#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "unifork/model.hpp"
#include "unifork/toyworld.hpp"

namespace unifork {

using Vec = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Incremental inference with per-layer key/value caches. Mirrors
// ForkedTransformer::forward one backbone position at a time.

namespace infer {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;

inline ConstMat mat(const Tensor& t) {
  return ConstMat(t.data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}
inline Eigen::Map<const Vec> vec(const Tensor& t) {
  return Eigen::Map<const Vec>(t.data(), static_cast<Eigen::Index>(t.size()));
}

inline Vec layer_norm(const Vec& x, const Tensor& g, const Tensor& b, double eps) {
  const double mu = x.mean();
  const double var = (x.array() - mu).square().mean();
  return ((x.array() - mu) / std::sqrt(var + eps)).matrix().cwiseProduct(vec(g)) + vec(b);
}

inline Vec linear(const Vec& x, const Tensor& w, const Tensor& b) {
  return mat(w).transpose() * x + vec(b);
}

inline Vec gelu(Vec x) {
  for (auto& v : x) v = v * 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
  return x;
}

struct BlockWeights {
  const Tensor *ln1g, *ln1b, *qkvw, *qkvb, *projw, *projb, *ln2g, *ln2b, *fc1w, *fc1b, *fc2w, *fc2b;

  BlockWeights(const ForkedTransformer& m, const std::string& p)
      : ln1g(&m.param(p + "ln1.gain").value()),
        ln1b(&m.param(p + "ln1.bias").value()),
        qkvw(&m.param(p + "attn.qkv.weight").value()),
        qkvb(&m.param(p + "attn.qkv.bias").value()),
        projw(&m.param(p + "attn.proj.weight").value()),
        projb(&m.param(p + "attn.proj.bias").value()),
        ln2g(&m.param(p + "ln2.gain").value()),
        ln2b(&m.param(p + "ln2.bias").value()),
        fc1w(&m.param(p + "mlp.fc1.weight").value()),
        fc1b(&m.param(p + "mlp.fc1.bias").value()),
        fc2w(&m.param(p + "mlp.fc2.weight").value()),
        fc2b(&m.param(p + "mlp.fc2.bias").value()) {}
};

// Keys and values of every position seen so far, one row each.
struct Cache {
  RowMat k, v;
  Eigen::Index n = 0;

  void reserve(std::size_t rows, std::size_t c) {
    k.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(c));
    v.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(c));
    n = 0;
  }
};

inline Vec block_step(const BlockWeights& w, const Vec& x, Cache& cache, std::size_t heads, double eps) {
  const auto c = x.size();
  if (cache.n >= cache.k.rows()) throw Error("inference cache overflow");
  Vec h = layer_norm(x, *w.ln1g, *w.ln1b, eps);
  Vec qkv = linear(h, *w.qkvw, *w.qkvb);
  cache.k.row(cache.n) = qkv.segment(c, c).transpose();
  cache.v.row(cache.n) = qkv.segment(2 * c, c).transpose();
  ++cache.n;
  const Eigen::Index dh = c / static_cast<Eigen::Index>(heads);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Vec att(c);
  for (Eigen::Index hd = 0; hd < static_cast<Eigen::Index>(heads); ++hd) {
    Vec s = (cache.k.block(0, hd * dh, cache.n, dh) * qkv.segment(hd * dh, dh)) * inv;
    s = (s.array() - s.maxCoeff()).exp();
    s /= s.sum();
    att.segment(hd * dh, dh) = cache.v.block(0, hd * dh, cache.n, dh).transpose() * s;
  }
  Vec y = x + linear(att, *w.projw, *w.projb);
  h = layer_norm(y, *w.ln2g, *w.ln2b, eps);
  return y + linear(gelu(linear(h, *w.fc1w, *w.fc1b)), *w.fc2w, *w.fc2b);
}

}  // namespace infer

// One growing sequence routed through one branch.
class InferenceSession {
 public:
  InferenceSession(const ForkedTransformer& model, Branch branch) : m_(model), branch_(branch) {
    const auto& cfg = m_.config();
    for (std::size_t i = 0; i < cfg.shared_layers; ++i)
      blocks_.emplace_back(m_, ForkedTransformer::block_prefix("shared", i));
    for (std::size_t i = cfg.shared_layers; i < cfg.depth(); ++i)
      blocks_.emplace_back(m_, ForkedTransformer::block_prefix(branch_name(branch), i));
    const std::string fn = cfg.branch_layers > 0 ? std::string(branch_name(branch)) + ".final_norm." : "shared.final_norm.";
    norm_g_ = &m_.param(fn + "gain").value();
    norm_b_ = &m_.param(fn + "bias").value();
    caches_.resize(blocks_.size());
    for (auto& c : caches_) c.reserve(cfg.max_seq_len, cfg.d_model);
  }

  std::size_t length() const { return pos_; }
  const std::vector<Vec>& layer_states() const { return states_; }

  // Appends one text/special token; returns the final-normed feature.
  const Vec& push_token(int id) {
    const auto& v = m_.vocab();
    if (!v.valid(id) || v.is_image(id)) throw VocabularyError("push_token expects a non-image id");
    const auto& e = m_.param("shared.token_embed").value();
    const auto c = static_cast<Eigen::Index>(m_.config().d_model);
    return advance(Eigen::Map<const Vec>(e.data() + static_cast<std::size_t>(id) * static_cast<std::size_t>(c), c));
  }

  // Appends one image position given its D codes.
  const Vec& push_image(const std::vector<int>& codes) {
    const auto& cfg = m_.config();
    if (codes.size() != cfg.rvq_depth) throw DimensionError("push_image needs one code per level");
    const auto c = static_cast<Eigen::Index>(cfg.d_model);
    Vec f = Vec::Zero(c);
    for (std::size_t d = 0; d < codes.size(); ++d) {
      if (codes[d] < 0 || static_cast<std::size_t>(codes[d]) >= cfg.image_codebook) throw VocabularyError("image code out of range");
      f += Eigen::Map<const Vec>(m_.codebook().data() + (d * cfg.image_codebook + static_cast<std::size_t>(codes[d])) * cfg.d_model, c);
    }
    using namespace infer;
    Vec h = gelu(linear(f, m_.param("shared.connector.fc1.weight").value(), m_.param("shared.connector.fc1.bias").value()));
    return advance(linear(h, m_.param("shared.connector.fc2.weight").value(), m_.param("shared.connector.fc2.bias").value()));
  }

  // Pushes a full stream (image positions as D consecutive ids).
  const Vec& push_stream(const TokenSequence& ids) {
    const auto& v = m_.vocab();
    const std::size_t D = m_.config().rvq_depth;
    for (std::size_t i = 0; i < ids.size();) {
      if (v.is_image(ids[i])) {
        if (i + D > ids.size()) throw VocabularyError("image position truncated");
        std::vector<int> codes;
        for (std::size_t d = 0; d < D; ++d) codes.push_back(v.code_of(ids[i + d]));
        push_image(codes);
        i += D;
      } else {
        push_token(ids[i]);
        ++i;
      }
    }
    if (pos_ == 0) throw Error("push_stream on an empty sequence");
    return feature_;
  }

  const Vec& feature() const { return feature_; }

  Vec text_logits() const {
    return infer::linear(feature_, m_.param("heads.text.weight").value(), m_.param("heads.text.bias").value());
  }

 private:
  const Vec& advance(const Vec& emb) {
    const auto& cfg = m_.config();
    if (pos_ >= cfg.max_seq_len) throw Error("sequence exceeds max_seq_len");
    const auto c = static_cast<Eigen::Index>(cfg.d_model);
    Vec x = emb + Eigen::Map<const Vec>(m_.param("shared.pos_embed").value().data() + pos_ * cfg.d_model, c);
    states_.clear();
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      x = infer::block_step(blocks_[l], x, caches_[l], cfg.n_heads, cfg.ln_eps);
      states_.push_back(x);
    }
    feature_ = infer::layer_norm(x, *norm_g_, *norm_b_, cfg.ln_eps);
    ++pos_;
    return feature_;
  }

  const ForkedTransformer& m_;
  Branch branch_;
  std::vector<infer::BlockWeights> blocks_;
  std::vector<infer::Cache> caches_;
  const Tensor *norm_g_ = nullptr, *norm_b_ = nullptr;
  std::size_t pos_ = 0;
  Vec feature_;
  std::vector<Vec> states_;
};

// Vision head over one image position: depth slots fed one at a time.
class DepthSession {
 public:
  DepthSession(const ForkedTransformer& model, const Vec& trunk) : m_(model), trunk_(trunk) {
    const auto& cfg = m_.config();
    if (cfg.rvq_depth > 1) {
      block_.emplace(m_, "heads.vision.block.");
      cache_.reserve(cfg.rvq_depth, cfg.d_model);
    }
  }

  // Logits for the next code given the codes chosen so far at this position.
  Vec next_logits(const std::vector<int>& prefix) {
    const auto& cfg = m_.config();
    const std::size_t d = prefix.size();
    if (d >= cfg.rvq_depth) throw Error("all codes of this position already chosen");
    const auto& ow = m_.param("heads.vision.out.weight").value();
    const auto& ob = m_.param("heads.vision.out.bias").value();
    if (cfg.rvq_depth == 1) return infer::linear(trunk_, ow, ob);
    if (static_cast<std::size_t>(cache_.n) != d) throw Error("depth session fed out of order");
    const auto c = static_cast<Eigen::Index>(cfg.d_model);
    Vec u = d == 0 ? trunk_
                   : Vec(Eigen::Map<const Vec>(m_.param("heads.vision.code_embed").value().data() +
                                                   ((d - 1) * cfg.image_codebook + static_cast<std::size_t>(prefix[d - 1])) * cfg.d_model,
                                               c));
    u += Eigen::Map<const Vec>(m_.param("heads.vision.depth_pos").value().data() + d * cfg.d_model, c);
    u = infer::block_step(*block_, u, cache_, cfg.n_heads, cfg.ln_eps);
    u = infer::layer_norm(u, m_.param("heads.vision.norm.gain").value(), m_.param("heads.vision.norm.bias").value(), cfg.ln_eps);
    return infer::linear(u, ow, ob);
  }

 private:
  const ForkedTransformer& m_;
  Vec trunk_;
  std::optional<infer::BlockWeights> block_;
  infer::Cache cache_;
};

// ---------------------------------------------------------------------------
// Guidance and sampling

inline Vec cfg_logits(const Vec& cond, const Vec& uncond, double s) {
  if (cond.size() != uncond.size()) throw DimensionError("cfg_logits: shape mismatch");
  if (s == 1.0) return cond;
  if (s == 0.0) return uncond;
  return uncond + s * (cond - uncond);
}

inline Tensor cfg_logits(const Tensor& cond, const Tensor& uncond, double s) {
  if (cond.shape() != uncond.shape()) throw DimensionError("cfg_logits: shape mismatch");
  if (s == 1.0) return cond;
  if (s == 0.0) return uncond;
  Tensor out = uncond;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + s * (cond[i] - uncond[i]);
  return out;
}

struct SamplerConfig {
  double cfg_scale = 2.0;
  double temperature = 1.0;
  std::size_t top_k = 0;  // 0 keeps the full distribution
  bool greedy = false;    // argmax decoding (the temperature -> 0 limit)
  std::uint64_t seed = 1;
  toyworld::Format format = toyworld::Format::Pretrain;

  void validate() const {
    if (cfg_scale < 0.0) throw ConfigError("cfg_scale must be >= 0");
    if (!greedy && !(temperature > 0.0)) throw ConfigError("temperature must be > 0 (use greedy for argmax)");
  }
};

inline int argmax(const Vec& logits) {
  Eigen::Index i = 0;
  logits.maxCoeff(&i);
  return static_cast<int>(i);
}

inline int sample_logits(const Vec& logits, const SamplerConfig& sc, Rng& rng) {
  if (sc.greedy) return argmax(logits);
  Vec z = logits / sc.temperature;
  if (sc.top_k > 0 && sc.top_k < static_cast<std::size_t>(z.size())) {
    std::vector<double> sorted(z.data(), z.data() + z.size());
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sc.top_k - 1), sorted.end(),
                     std::greater<>());
    const double cut = sorted[sc.top_k - 1];
    for (auto& v : z)
      if (v < cut) v = -std::numeric_limits<double>::infinity();
  }
  const double mx = z.maxCoeff();
  std::vector<double> p(static_cast<std::size_t>(z.size()));
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] = std::exp(z[static_cast<Eigen::Index>(i)] - mx));
  double u = uniform01(rng) * total;
  for (std::size_t i = 0; i < p.size(); ++i) {
    u -= p[i];
    if (u < 0.0) return static_cast<int>(i);
  }
  for (std::size_t i = p.size(); i-- > 0;)
    if (p[i] > 0.0) return static_cast<int>(i);
  return 0;
}

// Image codes for a caption (nullptr: the dropped-caption context), n_v * D
// codes in raster order. Codes come from the vision head, so every id lies
// in the image range.
inline std::vector<int> sample_codes(const ForkedTransformer& model, const toyworld::Scene* caption,
                                     const SamplerConfig& sc, Rng& rng) {
  sc.validate();
  const auto& cfg = model.config();
  toyworld::Lexicon lex(cfg);
  InferenceSession cond(model, Branch::Gen);
  cond.push_stream(toyworld::gen_prompt(lex, caption, sc.format));
  const bool guided = sc.cfg_scale != 1.0 && caption != nullptr;
  std::optional<InferenceSession> uncond;
  if (guided) {
    uncond.emplace(model, Branch::Gen);
    uncond->push_stream(toyworld::gen_prompt(lex, nullptr, sc.format));
  }
  std::vector<int> out;
  out.reserve(cfg.image_tokens() * cfg.rvq_depth);
  for (std::size_t p = 0; p < cfg.image_tokens(); ++p) {
    DepthSession dc(model, cond.feature());
    std::optional<DepthSession> du;
    if (guided) du.emplace(model, uncond->feature());
    std::vector<int> codes;
    for (std::size_t d = 0; d < cfg.rvq_depth; ++d) {
      Vec lc = dc.next_logits(codes);
      Vec l = guided ? cfg_logits(lc, du->next_logits(codes), sc.cfg_scale) : lc;
      codes.push_back(sample_logits(l, sc, rng));
    }
    out.insert(out.end(), codes.begin(), codes.end());
    if (p + 1 < cfg.image_tokens()) {
      cond.push_image(codes);
      if (guided) uncond->push_image(codes);
    }
  }
  return out;
}

inline toyworld::GridImage sample_image(const ForkedTransformer& model, const toyworld::Scene* caption,
                                        const SamplerConfig& sc, Rng& rng) {
  toyworld::World world(model.config());
  return world.decode(sample_codes(model, caption, sc, rng));
}

// Greedy caption from the und branch, without the trailing EOS.
inline std::vector<int> generate_caption(const ForkedTransformer& model, const toyworld::GridImage& grid,
                                         std::size_t max_tokens = 24,
                                         toyworld::Format format = toyworld::Format::Dialogue) {
  const auto& cfg = model.config();
  toyworld::World world(cfg);
  toyworld::Lexicon lex(cfg);
  InferenceSession s(model, Branch::Und);
  s.push_stream(toyworld::und_prompt(world, lex, grid, format));
  std::vector<int> out;
  for (std::size_t t = 0; t < max_tokens; ++t) {
    const int id = argmax(s.text_logits());
    if (id == VocabLayout::kEos) break;
    out.push_back(id);
    if (t + 1 < max_tokens && s.length() < cfg.max_seq_len) s.push_token(id);
    else break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class GenFactor { SingleObject, TwoObjects, Colors, Position, ColorAttri };
inline constexpr GenFactor kGenFactors[] = {GenFactor::SingleObject, GenFactor::TwoObjects, GenFactor::Colors,
                                            GenFactor::Position, GenFactor::ColorAttri};

inline const char* factor_name(GenFactor f) {
  switch (f) {
    case GenFactor::SingleObject: return "single_object";
    case GenFactor::TwoObjects: return "two_objects";
    case GenFactor::Colors: return "colors";
    case GenFactor::Position: return "position";
    case GenFactor::ColorAttri: return "color_attri";
  }
  return "?";
}

inline bool factor_uses_two_objects(GenFactor f) {
  return f == GenFactor::TwoObjects || f == GenFactor::Position || f == GenFactor::ColorAttri;
}

// Whether `got` satisfies the factor's requirement for prompt `want`.
inline bool factor_match(GenFactor f, const toyworld::Scene& want, const toyworld::Scene& got) {
  using toyworld::Object;
  auto key = [](const Object& o, bool color) { return std::pair<int, int>(static_cast<int>(o.shape), color ? static_cast<int>(o.color) : -1); };
  auto multiset = [&](const toyworld::Scene& s, bool color) {
    std::vector<std::pair<int, int>> v;
    for (const auto& o : s.objects) v.push_back(key(o, color));
    std::sort(v.begin(), v.end());
    return v;
  };
  if (got.objects.size() != want.objects.size()) return false;
  switch (f) {
    case GenFactor::SingleObject:
    case GenFactor::TwoObjects: return multiset(got, false) == multiset(want, false);
    case GenFactor::Colors:
    case GenFactor::ColorAttri: return multiset(got, true) == multiset(want, true);
    case GenFactor::Position:
      for (std::size_t i = 0; i < want.objects.size(); ++i)
        if (got.objects[i].cell != want.objects[i].cell || got.objects[i].shape != want.objects[i].shape) return false;
      return true;
  }
  return false;
}

struct PromptSuite {
  std::vector<std::pair<GenFactor, toyworld::Scene>> prompts;
};

// prompts_per_factor scenes per factor, drawn from a dedicated stream.
inline PromptSuite make_suite(std::uint64_t seed, std::size_t prompts_per_factor) {
  PromptSuite s;
  for (auto f : kGenFactors) {
    Rng rng = substream(seed, std::string("suite.") + factor_name(f));
    const auto cur = factor_uses_two_objects(f) ? toyworld::Curriculum::TwoObject : toyworld::Curriculum::Single;
    for (std::size_t i = 0; i < prompts_per_factor; ++i) s.prompts.emplace_back(f, toyworld::sample_scene(rng, cur));
  }
  return s;
}

inline nlohmann::json suite_line(GenFactor f, const toyworld::Scene& s) {
  return {{"factor", factor_name(f)}, {"scene", toyworld::scene_to_json(s)}};
}

struct GenReport {
  std::map<std::string, double> factors;
  double overall = 0.0;
  double parse_failure_rate = 0.0;
  std::size_t samples = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    for (auto f : kGenFactors) j[factor_name(f)] = factors.at(factor_name(f));
    j["overall"] = overall;
    j["parse_failure_rate"] = parse_failure_rate;
    j["samples"] = samples;
    return j;
  }
};

// (prompt index, replica index) -> generated grid.
using ImageSource = std::function<toyworld::GridImage(std::size_t, std::size_t)>;

inline GenReport score_images(const ModelConfig& cfg, const PromptSuite& suite, std::size_t n_per_prompt,
                              const ImageSource& source) {
  toyworld::World world(cfg);
  GenReport r;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  std::size_t failures = 0;
  for (std::size_t p = 0; p < suite.prompts.size(); ++p) {
    const auto& [factor, scene] = suite.prompts[p];
    for (std::size_t k = 0; k < n_per_prompt; ++k) {
      const auto parsed = world.parse(source(p, k));
      if (!parsed) ++failures;
      auto& a = acc[factor_name(factor)];
      a.first += parsed && factor_match(factor, scene, *parsed) ? 1.0 : 0.0;
      a.second += 1;
      ++r.samples;
    }
  }
  double sum = 0.0;
  for (auto f : kGenFactors) {
    const auto& a = acc[factor_name(f)];
    const double v = a.second ? a.first / static_cast<double>(a.second) : 0.0;
    r.factors[factor_name(f)] = v;
    sum += v;
  }
  r.overall = sum / static_cast<double>(std::size(kGenFactors));
  r.parse_failure_rate = r.samples ? static_cast<double>(failures) / static_cast<double>(r.samples) : 0.0;
  return r;
}

inline Rng sample_rng(std::uint64_t seed, std::size_t prompt, std::size_t replica) {
  return substream(substream(seed, "sampler", prompt)(), "replica", replica);
}

inline GenReport score_generation(const ForkedTransformer& model, const PromptSuite& suite, std::size_t n_per_prompt,
                                  const SamplerConfig& sc) {
  return score_images(model.config(), suite, n_per_prompt, [&](std::size_t p, std::size_t k) {
    Rng rng = sample_rng(sc.seed, p, k);
    return sample_image(model, &suite.prompts[p].second, sc, rng);
  });
}

struct UndReport {
  double exact = 0.0;
  double shape = 0.0, color = 0.0, position = 0.0, size = 0.0;
  std::size_t samples = 0;

  nlohmann::ordered_json to_json() const {
    return {{"exact", exact}, {"shape", shape}, {"color", color}, {"position", position}, {"size", size}, {"samples", samples}};
  }
};

// Scores generated captions against the canonical description. Attribute
// accuracy compares the k-th caption phrase with the k-th object (cell
// order); an entirely correct caption scores 1 on every attribute.
inline UndReport score_captions(const ModelConfig& cfg, const std::vector<toyworld::Scene>& scenes,
                                const std::function<std::vector<int>(std::size_t)>& caption_of) {
  toyworld::Lexicon lex(cfg);
  UndReport r;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& s = scenes[i];
    const auto got = caption_of(i);
    r.exact += got == toyworld::describe(lex, s) ? 1.0 : 0.0;
    const auto objs = toyworld::read_caption(lex, got);
    const double n = static_cast<double>(std::max<std::size_t>(1, s.objects.size()));
    double sh = 0, co = 0, po = 0, si = 0;
    if (s.objects.empty()) {
      const bool ok = got == toyworld::describe(lex, s);
      sh = co = po = si = ok ? 1.0 : 0.0;
    } else {
      for (std::size_t k = 0; k < s.objects.size() && k < objs.size(); ++k) {
        const auto& o = s.objects[k];
        sh += objs[k].shape == o.shape;
        co += objs[k].color == o.color;
        po += objs[k].cell == o.cell;
        si += objs[k].size == o.size;
      }
      // Extra phrases make the caption wrong about the object count.
      if (objs.size() != s.objects.size()) sh = co = po = si = 0.0;
    }
    r.shape += sh / n;
    r.color += co / n;
    r.position += po / n;
    r.size += si / n;
    ++r.samples;
  }
  if (r.samples) {
    const double b = static_cast<double>(r.samples);
    r.exact /= b;
    r.shape /= b;
    r.color /= b;
    r.position /= b;
    r.size /= b;
  }
  return r;
}

inline UndReport score_understanding(const ForkedTransformer& model, const std::vector<toyworld::Scene>& scenes,
                                     toyworld::Format format = toyworld::Format::Dialogue) {
  toyworld::World world(model.config());
  return score_captions(model.config(), scenes, [&](std::size_t i) {
    return generate_caption(model, world.render(scenes[i]), 24, format);
  });
}

// Held-out understanding scenes from a dedicated stream, half two-object.
inline std::vector<toyworld::Scene> make_und_suite(std::uint64_t seed, std::size_t n) {
  std::vector<toyworld::Scene> out;
  Rng rng = substream(seed, "suite.und");
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(toyworld::sample_scene(rng, i % 2 ? toyworld::Curriculum::TwoObject : toyworld::Curriculum::Single));
  return out;
}

inline std::string grid_art(const toyworld::GridImage& g, std::uint64_t base) {
  static const char colors[] = {'.', 'R', 'G', 'B', 'Y'};
  static const char shapes[] = {'s', 'c', 't', 'x'};
  std::string out;
  for (std::size_t r = 0; r < g.side; ++r) {
    for (std::size_t c = 0; c < g.side; ++c) {
      const auto sym = g.cells[r * g.side + c];
      const auto hi = sym / base, lo = sym % base;
      if (sym == 0) out += "..";
      else if (hi >= 1 && hi <= 4 && lo < 20) {
        out += colors[hi];
        out += lo % 5 == 4 ? shapes[lo / 5] : static_cast<char>(std::toupper(shapes[lo / 5]));
      } else out += "??";
      out += c + 1 < g.side ? " " : "";
    }
    out += "\n";
  }
  return out;
}

}  // namespace unifork
