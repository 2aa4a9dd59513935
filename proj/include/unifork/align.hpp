#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "unifork/model.hpp"
#include "unifork/toyworld.hpp"
#include "unifork/train.hpp"

namespace unifork {

enum class Metric { Euclidean, Cosine };

inline const char* metric_name(Metric m) { return m == Metric::Euclidean ? "euclidean" : "cosine"; }
inline Metric parse_metric(const std::string& s) {
  if (s == "euclidean") return Metric::Euclidean;
  if (s == "cosine") return Metric::Cosine;
  throw ConfigError("unknown metric: " + s);
}

// B x c matrix of pooled features, one row per sample.
struct FeatureSet {
  Tensor vectors;
  std::vector<std::size_t> labels;

  std::size_t size() const { return vectors.rows(); }
};

struct ProbeConfig {
  std::size_t k = 10;
  Metric metric = Metric::Euclidean;
  std::size_t prompt_count = 500;
  // Text reference taken per layer instead of from the final layer.
  bool per_layer_text = false;
  toyworld::Format gen_format = toyworld::Format::Pretrain;
  toyworld::Format und_format = toyworld::Format::Dialogue;
  std::size_t batch_size = 16;
};

inline FeatureSet make_feature_set(Tensor vectors) {
  FeatureSet f;
  f.labels.resize(vectors.rows());
  std::iota(f.labels.begin(), f.labels.end(), 0);
  f.vectors = std::move(vectors);
  return f;
}

// Pairwise dissimilarity; squared distance for euclidean (same order).
inline double dissimilarity(const FeatureSet& f, std::size_t i, std::size_t j, Metric m) {
  const std::size_t c = f.vectors.cols();
  const double* a = f.vectors.data() + i * c;
  const double* b = f.vectors.data() + j * c;
  if (m == Metric::Euclidean) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return s;
  }
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    ab += a[k] * b[k];
    aa += a[k] * a[k];
    bb += b[k] * b[k];
  }
  const double den = std::sqrt(aa) * std::sqrt(bb);
  return den > 0.0 ? 1.0 - ab / den : 1.0;
}

// k nearest neighbours of every row (self excluded), sorted; ties go to the
// smaller index.
inline std::vector<std::vector<std::size_t>> knn(const FeatureSet& f, std::size_t k, Metric m) {
  const std::size_t B = f.size();
  std::vector<std::vector<std::size_t>> out(B);
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t i = 0; i < B; ++i) {
    d.clear();
    for (std::size_t j = 0; j < B; ++j)
      if (j != i) d.emplace_back(dissimilarity(f, i, j, m), j);
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    for (std::size_t r = 0; r < k; ++r) out[i].push_back(d[r].second);
    std::sort(out[i].begin(), out[i].end());
  }
  return out;
}

inline double mutual_knn(const FeatureSet& a, const FeatureSet& b, std::size_t k, Metric m = Metric::Euclidean) {
  const std::size_t B = a.size();
  if (b.size() != B) throw DimensionError("mutual_knn: feature sets differ in size");
  if (a.labels != b.labels) throw DimensionError("mutual_knn: label order differs");
  if (k == 0 || k >= B) throw DimensionError("mutual_knn: need 1 <= k < B");
  if (!a.vectors.all_finite() || !b.vectors.all_finite()) throw Error("mutual_knn: non-finite features");
  const auto na = knn(a, k, m), nb = knn(b, k, m);
  double total = 0.0;
  std::vector<std::size_t> common;
  for (std::size_t i = 0; i < B; ++i) {
    common.clear();
    std::set_intersection(na[i].begin(), na[i].end(), nb[i].begin(), nb[i].end(), std::back_inserter(common));
    total += static_cast<double>(common.size()) / static_cast<double>(k);
  }
  return total / static_cast<double>(B);
}

inline double mutual_knn(const FeatureSet& a, const FeatureSet& b, const ProbeConfig& cfg) {
  return mutual_knn(a, b, cfg.k, cfg.metric);
}

// ---------------------------------------------------------------------------
// Feature collection

struct ProbeFeatures {
  std::vector<FeatureSet> vision;  // one per layer
  FeatureSet text;                 // final-layer text reference
  std::vector<FeatureSet> text_per_layer;
};

namespace detail {

// Mean of the selected rows of each chunk sequence s into row first + s.
inline void pool_rows(const Tensor& h, const PackedLayout& lay, const std::vector<std::vector<std::size_t>>& rows,
                      std::size_t first, Tensor& out) {
  const std::size_t c = h.cols();
  for (std::size_t s = 0; s < lay.seq_rows.size(); ++s) {
    const auto& sel = rows[first + s];
    if (sel.empty()) throw Error("probe sequence has no rows to pool");
    double* dst = out.data() + (first + s) * c;
    for (auto r : sel) {
      const double* src = h.data() + (lay.seq_offset[s] + r) * c;
      for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
    }
    for (std::size_t k = 0; k < c; ++k) dst[k] /= static_cast<double>(sel.size());
  }
}

struct PoolTargets {
  std::vector<TokenSequence> seqs;
  std::vector<std::vector<std::size_t>> image_rows, text_rows;
};

// Runs `seqs` in batches and pools image and text rows for every layer.
inline void collect(const ForkedTransformer& model, Branch branch, const PoolTargets& t, std::size_t batch_size,
                    std::vector<Tensor>* image_out, std::vector<Tensor>* text_out) {
  NoGradGuard ng;
  const std::size_t L = model.config().depth(), c = model.config().d_model, B = t.seqs.size();
  if (image_out) image_out->assign(L, Tensor({B, c}));
  if (text_out) text_out->assign(L, Tensor({B, c}));
  ForwardOptions opt;
  opt.vision_head = false;
  for (std::size_t s0 = 0; s0 < B; s0 += batch_size) {
    const std::size_t s1 = std::min(B, s0 + batch_size);
    std::vector<TokenSequence> chunk(t.seqs.begin() + static_cast<std::ptrdiff_t>(s0),
                                     t.seqs.begin() + static_cast<std::ptrdiff_t>(s1));
    auto tr = model.forward(chunk, branch, opt);
    for (std::size_t l = 0; l < L; ++l) {
      const auto& h = tr.hidden_states[l].value();
      if (image_out) pool_rows(h, tr.layout, t.image_rows, s0, (*image_out)[l]);
      if (text_out) pool_rows(h, tr.layout, t.text_rows, s0, (*text_out)[l]);
    }
  }
}

// Backbone rows holding image positions and caption words.
inline void locate(const ForkedTransformer& model, const TokenSequence& ids, const std::vector<bool>& caption_token,
                   std::vector<std::size_t>& image_rows, std::vector<std::size_t>& text_rows) {
  auto lay = model.pack({ids});
  for (std::size_t r = 0; r < lay.seq_rows[0]; ++r)
    if (lay.is_image_row[0][r]) image_rows.push_back(r);
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (caption_token[i]) text_rows.push_back(lay.stream_row[0][i]);
}

inline ProbeFeatures finish(std::vector<Tensor> vision, std::vector<Tensor> text, bool keep_per_layer) {
  ProbeFeatures out;
  for (auto& v : vision) out.vision.push_back(make_feature_set(std::move(v)));
  out.text = make_feature_set(text.back());
  if (keep_per_layer)
    for (auto& t : text) out.text_per_layer.push_back(make_feature_set(std::move(t)));
  return out;
}

}  // namespace detail

// Teacher-forced "<caption><image>" sequences through the gen branch. Vision
// features pool image positions at every layer; the text reference pools the
// caption words at the branch's last layer. `grids` defaults to renders of
// the scenes.
inline ProbeFeatures collect_gen_features(const ForkedTransformer& model, const std::vector<toyworld::Scene>& scenes,
                                          const ProbeConfig& cfg, const std::vector<toyworld::GridImage>* grids = nullptr) {
  const auto& mc = model.config();
  toyworld::World world(mc);
  toyworld::Lexicon lex(mc);
  if (grids && grids->size() != scenes.size()) throw DimensionError("one grid per scene required");
  detail::PoolTargets t;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    auto ids = toyworld::gen_prompt(lex, &scenes[i], cfg.gen_format);
    const std::size_t caption_end = ids.size();
    std::vector<bool> caption(ids.size(), false);
    for (std::size_t j = 0; j < caption_end; ++j) caption[j] = model.vocab().is_text(ids[j]);
    const auto grid = grids ? (*grids)[i] : world.render(scenes[i]);
    for (int code : world.encode(grid)) ids.push_back(model.vocab().image_id(code));
    ids.push_back(VocabLayout::kImgEnd);
    caption.resize(ids.size(), false);
    t.image_rows.emplace_back();
    t.text_rows.emplace_back();
    detail::locate(model, ids, caption, t.image_rows.back(), t.text_rows.back());
    t.seqs.push_back(std::move(ids));
  }
  std::vector<Tensor> vis, txt;
  detail::collect(model, Branch::Gen, t, cfg.batch_size, &vis, &txt);
  return detail::finish(std::move(vis), std::move(txt), cfg.per_layer_text);
}

// "<image><query>" sequences through the und branch for the vision
// features; the text reference is a separate text-only pass over each
// scene's ground-truth caption.
inline ProbeFeatures collect_und_features(const ForkedTransformer& model, const std::vector<toyworld::Scene>& scenes,
                                          const ProbeConfig& cfg, const std::vector<toyworld::GridImage>* grids = nullptr) {
  const auto& mc = model.config();
  toyworld::World world(mc);
  toyworld::Lexicon lex(mc);
  if (grids && grids->size() != scenes.size()) throw DimensionError("one grid per scene required");
  detail::PoolTargets img, txt;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto grid = grids ? (*grids)[i] : world.render(scenes[i]);
    auto ids = toyworld::und_prompt(world, lex, grid, cfg.und_format);
    img.image_rows.emplace_back();
    img.text_rows.emplace_back();
    detail::locate(model, ids, std::vector<bool>(ids.size(), false), img.image_rows.back(), img.text_rows.back());
    img.seqs.push_back(std::move(ids));

    TokenSequence cap{VocabLayout::kBos};
    auto d = toyworld::describe(lex, scenes[i]);
    cap.insert(cap.end(), d.begin(), d.end());
    std::vector<bool> mark(cap.size(), true);
    mark[0] = false;
    txt.image_rows.emplace_back();
    txt.text_rows.emplace_back();
    detail::locate(model, cap, mark, txt.image_rows.back(), txt.text_rows.back());
    txt.seqs.push_back(std::move(cap));
  }
  std::vector<Tensor> vis, text;
  detail::collect(model, Branch::Und, img, cfg.batch_size, &vis, nullptr);
  detail::collect(model, Branch::Und, txt, cfg.batch_size, nullptr, &text);
  return detail::finish(std::move(vis), std::move(text), cfg.per_layer_text);
}

// ---------------------------------------------------------------------------
// Curves

struct AlignmentCurve {
  toyworld::Task task = toyworld::Task::Gen;
  std::vector<double> scores;  // layer 1..L
  std::size_t B = 0, k = 0;
  Metric metric = Metric::Euclidean;
  bool per_layer_text = false;
};

inline AlignmentCurve alignment_curve(const ProbeFeatures& f, toyworld::Task task, const ProbeConfig& cfg) {
  AlignmentCurve c;
  c.task = task;
  c.B = f.text.size();
  c.k = cfg.k;
  c.metric = cfg.metric;
  c.per_layer_text = cfg.per_layer_text;
  for (std::size_t l = 0; l < f.vision.size(); ++l)
    c.scores.push_back(mutual_knn(f.vision[l], cfg.per_layer_text ? f.text_per_layer[l] : f.text, cfg));
  return c;
}

inline AlignmentCurve probe(const ForkedTransformer& model, toyworld::Task task,
                            const std::vector<toyworld::Scene>& scenes, const ProbeConfig& cfg) {
  auto f = task == toyworld::Task::Gen ? collect_gen_features(model, scenes, cfg) : collect_und_features(model, scenes, cfg);
  return alignment_curve(f, task, cfg);
}

// Ranks with ties sharing their average rank (1-based).
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
    i = j + 1;
  }
  return r;
}

// Pearson correlation of average ranks; 0 when either side is constant.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("spearman needs two equal-length series");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

struct CurveShape {
  double spearman_rho = 0.0;
  std::size_t argmax_layer = 1;  // 1-based, first maximum
  bool interior_peak = false;
};

inline CurveShape curve_shape(const std::vector<double>& scores, double delta = 0.02) {
  if (scores.size() < 3) throw DimensionError("curve_shape needs at least 3 layers");
  CurveShape s;
  std::vector<double> layers(scores.size());
  std::iota(layers.begin(), layers.end(), 1.0);
  s.spearman_rho = spearman(layers, scores);
  const auto it = std::max_element(scores.begin(), scores.end());
  const auto am = static_cast<std::size_t>(it - scores.begin());
  s.argmax_layer = am + 1;
  s.interior_peak = am != 0 && am + 1 != scores.size() && *it >= scores.front() + delta && *it >= scores.back() + delta;
  return s;
}

inline std::string curve_csv_header() { return "task,layer,score,B,k,metric\n"; }

inline std::string curve_csv_rows(const AlignmentCurve& c) {
  std::string out;
  for (std::size_t l = 0; l < c.scores.size(); ++l)
    out += std::string(toyworld::task_name(c.task)) + "," + std::to_string(l + 1) + "," + format_double(c.scores[l]) +
           "," + std::to_string(c.B) + "," + std::to_string(c.k) + "," + metric_name(c.metric) + "\n";
  return out;
}

inline nlohmann::ordered_json curve_shape_json(const AlignmentCurve& c, double delta = 0.02) {
  const auto s = curve_shape(c.scores, delta);
  return {{"task", toyworld::task_name(c.task)},
          {"layers", c.scores.size()},
          {"spearman_rho", s.spearman_rho},
          {"argmax_layer", s.argmax_layer},
          {"interior_peak", s.interior_peak},
          {"delta", delta},
          {"text_reference", c.per_layer_text ? "per_layer" : "final_layer"}};
}

}  // namespace unifork
