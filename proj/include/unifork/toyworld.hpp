#pragma once

// Procedural multimodal world: scenes of up to two objects on a 3x3 coarse
// layout, rendered directly as symbol grids, with exact captions. The grid
// symbols play the role of tokenizer output; rvq_encode splits each symbol
// into D residual codes.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "unifork/config.hpp"
#include "unifork/rng.hpp"

namespace unifork::toyworld {

enum class ShapeKind : int { Square, Circle, Triangle, Cross };
enum class Color : int { Red, Green, Blue, Yellow };
enum class Size : int { Small, Large };
enum class Curriculum { Single, TwoObject };
enum class Task { Gen, Und };
// Pretrain: "<caption><image>" / "<image><caption>"; Dialogue: SFT role format.
enum class Format { Pretrain, Dialogue };
enum class CaptionStyle { Template, Dialogue };

inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 4;
inline constexpr int kNumCells = 9;
inline constexpr int kNumSizes = 2;
inline constexpr int kMaxObjects = 2;
inline constexpr int kSingleObjectScenes = kNumShapes * kNumColors * kNumCells * kNumSizes;  // 288

struct Object {
  ShapeKind shape = ShapeKind::Square;
  Color color = Color::Red;
  int cell = 0;  // row-major index into the 3x3 coarse layout
  Size size = Size::Small;

  friend bool operator==(const Object&, const Object&) = default;
  friend auto operator<=>(const Object&, const Object&) = default;
};

// Objects are kept sorted by cell, which makes equality canonical.
struct Scene {
  std::vector<Object> objects;

  friend bool operator==(const Scene&, const Scene&) = default;

  bool valid() const {
    if (objects.size() > static_cast<std::size_t>(kMaxObjects)) return false;
    for (std::size_t i = 0; i < objects.size(); ++i) {
      const auto& o = objects[i];
      if (o.cell < 0 || o.cell >= kNumCells) return false;
      if (i > 0 && objects[i - 1].cell >= o.cell) return false;
    }
    return true;
  }
};

inline Scene make_scene(std::vector<Object> objs) {
  std::sort(objs.begin(), objs.end(), [](const Object& a, const Object& b) { return a.cell < b.cell; });
  return Scene{std::move(objs)};
}

// Index in [0, 32) of an object's attributes, without its cell.
inline int attribute_index(const Object& o) {
  return (static_cast<int>(o.shape) * kNumColors + static_cast<int>(o.color)) * kNumSizes + static_cast<int>(o.size);
}

inline Object object_from_attributes(int attr, int cell) {
  Object o;
  o.size = static_cast<Size>(attr % kNumSizes);
  attr /= kNumSizes;
  o.color = static_cast<Color>(attr % kNumColors);
  o.shape = static_cast<ShapeKind>(attr / kNumColors);
  o.cell = cell;
  return o;
}

// Enumerates all single-object scenes in a fixed order.
inline std::vector<Scene> all_single_object_scenes() {
  std::vector<Scene> out;
  for (int s = 0; s < kNumShapes; ++s)
    for (int c = 0; c < kNumColors; ++c)
      for (int cell = 0; cell < kNumCells; ++cell)
        for (int z = 0; z < kNumSizes; ++z)
          out.push_back(Scene{{Object{static_cast<ShapeKind>(s), static_cast<Color>(c), cell, static_cast<Size>(z)}}});
  return out;
}

// Uniform over the valid scenes of the curriculum.
inline Scene sample_scene(Rng& rng, Curriculum cur) {
  constexpr int attrs = kNumShapes * kNumColors * kNumSizes;
  if (cur == Curriculum::Single) {
    const int a = static_cast<int>(uniform_index(rng, attrs));
    const int cell = static_cast<int>(uniform_index(rng, kNumCells));
    return Scene{{object_from_attributes(a, cell)}};
  }
  // Unordered pair of distinct cells, then independent attributes.
  const int pair = static_cast<int>(uniform_index(rng, kNumCells * (kNumCells - 1) / 2));
  int c0 = 0, c1 = 1, k = 0;
  for (int i = 0; i < kNumCells; ++i)
    for (int j = i + 1; j < kNumCells; ++j)
      if (k++ == pair) c0 = i, c1 = j;
  const int a0 = static_cast<int>(uniform_index(rng, attrs));
  const int a1 = static_cast<int>(uniform_index(rng, attrs));
  return Scene{{object_from_attributes(a0, c0), object_from_attributes(a1, c1)}};
}

// ---------------------------------------------------------------------------
// Residual codes: big-endian base-`base` digits.

inline std::vector<int> rvq_encode(std::uint64_t symbol, std::size_t depth, std::uint64_t base) {
  if (depth == 0 || base < 2) throw ConfigError("rvq_encode needs depth >= 1 and base >= 2");
  std::vector<int> codes(depth);
  std::uint64_t rest = symbol;
  for (std::size_t d = depth; d-- > 0;) {
    codes[d] = static_cast<int>(rest % base);
    rest /= base;
  }
  if (rest != 0)
    throw Error("symbol " + std::to_string(symbol) + " does not fit in " + std::to_string(depth) + " base-" +
                std::to_string(base) + " codes");
  return codes;
}

inline std::uint64_t rvq_decode(const std::vector<int>& codes, std::uint64_t base) {
  std::uint64_t s = 0;
  for (int c : codes) {
    if (c < 0 || static_cast<std::uint64_t>(c) >= base) throw Error("code outside codebook");
    s = s * base + static_cast<std::uint64_t>(c);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Rendering

struct GridImage {
  std::size_t side = 0;
  std::vector<std::uint64_t> cells;  // row-major, background symbol 0

  friend bool operator==(const GridImage&, const GridImage&) = default;
};

// Geometry and symbol alphabet for a given model configuration. Each coarse
// cell owns a 2x2 patch at offset (3*row', 3*col') scaled by the stride; a
// large object fills the patch, a small one its top-left cell only. A cell
// symbol is (1 + color) * base + (shape * 5 + part), part 0-3 being the patch
// quadrant of a large object and 4 marking a small object.
class World {
 public:
  explicit World(const ModelConfig& cfg) : side_(cfg.grid_side), depth_(cfg.rvq_depth), base_(cfg.image_codebook) {
    if (side_ < 6) throw ConfigError("grid_side must be at least 6 to host the 3x3 layout");
    stride_ = side_ / 3;
    if (base_ < 20) throw ConfigError("image_codebook must be at least 20 for the cell alphabet");
    std::uint64_t cap = 1;
    for (std::size_t d = 0; d < depth_; ++d) cap *= base_;
    symbol_count_ = cap;
    if (max_symbol() >= cap) throw ConfigError("rvq_depth too small to represent every cell symbol");
  }

  std::size_t side() const { return side_; }
  std::size_t depth() const { return depth_; }
  std::uint64_t base() const { return base_; }
  std::uint64_t symbol_count() const { return symbol_count_; }
  std::uint64_t max_symbol() const { return (1 + kNumColors) * base_ - 1; }

  std::uint64_t symbol(const Object& o, int part) const {
    return (1 + static_cast<std::uint64_t>(o.color)) * base_ + static_cast<std::uint64_t>(o.shape) * 5 +
           static_cast<std::uint64_t>(part);
  }

  GridImage render(const Scene& scene) const {
    GridImage g{side_, std::vector<std::uint64_t>(side_ * side_, 0)};
    for (const auto& o : scene.objects) {
      const std::size_t r0 = static_cast<std::size_t>(o.cell / 3) * stride_;
      const std::size_t c0 = static_cast<std::size_t>(o.cell % 3) * stride_;
      if (o.size == Size::Small) {
        g.cells[r0 * side_ + c0] = symbol(o, 4);
      } else {
        for (int q = 0; q < 4; ++q) g.cells[(r0 + q / 2) * side_ + c0 + q % 2] = symbol(o, q);
      }
    }
    return g;
  }

  // Recovers the scene that renders to `grid`, or nothing if no valid scene
  // does.
  std::optional<Scene> parse(const GridImage& grid) const {
    if (grid.side != side_ || grid.cells.size() != side_ * side_) return std::nullopt;
    Scene s;
    for (int cell = 0; cell < kNumCells; ++cell) {
      const std::size_t r0 = static_cast<std::size_t>(cell / 3) * stride_;
      const std::size_t c0 = static_cast<std::size_t>(cell % 3) * stride_;
      const std::uint64_t anchor = grid.cells[r0 * side_ + c0];
      if (anchor == 0) continue;
      const std::uint64_t hi = anchor / base_, lo = anchor % base_;
      if (hi < 1 || hi > kNumColors || lo >= kNumShapes * 5) return std::nullopt;
      Object o;
      o.color = static_cast<Color>(hi - 1);
      o.shape = static_cast<ShapeKind>(lo / 5);
      o.cell = cell;
      const std::uint64_t part = lo % 5;
      if (part == 4) o.size = Size::Small;
      else if (part == 0) o.size = Size::Large;
      else return std::nullopt;
      s.objects.push_back(o);
    }
    if (s.objects.size() > static_cast<std::size_t>(kMaxObjects)) return std::nullopt;
    // Every cell, gutters included, must agree with the re-render.
    if (render(s) != grid) return std::nullopt;
    return s;
  }

  // Flattened codes, D per grid position in raster order.
  std::vector<int> encode(const GridImage& g) const {
    std::vector<int> out;
    out.reserve(g.cells.size() * depth_);
    for (auto sym : g.cells) {
      auto c = rvq_encode(sym, depth_, base_);
      out.insert(out.end(), c.begin(), c.end());
    }
    return out;
  }

  GridImage decode(const std::vector<int>& codes) const {
    if (codes.size() != side_ * side_ * depth_) throw Error("code count does not match grid");
    GridImage g{side_, std::vector<std::uint64_t>(side_ * side_)};
    for (std::size_t i = 0; i < g.cells.size(); ++i)
      g.cells[i] = rvq_decode(std::vector<int>(codes.begin() + static_cast<std::ptrdiff_t>(i * depth_),
                                               codes.begin() + static_cast<std::ptrdiff_t>((i + 1) * depth_)),
                              base_);
    return g;
  }

 private:
  std::size_t side_;
  std::size_t stride_ = 2;
  std::size_t depth_;
  std::uint64_t base_;
  std::uint64_t symbol_count_ = 0;
};

// ---------------------------------------------------------------------------
// Words

inline const std::vector<std::string>& words() {
  static const std::vector<std::string> w = {
      "a",      "small",  "large", "red",     "green",   "blue",     "yellow", "square", "circle",
      "triangle", "cross", "at",   "top",     "middle",  "bottom",   "left",   "center", "right",
      "and",    "an",     "empty", "image",   "provide", "one",      "sentence", "caption", "for",
      "the",    ":"};
  return w;
}

inline int word_index(std::string_view w) {
  const auto& ws = words();
  for (std::size_t i = 0; i < ws.size(); ++i)
    if (ws[i] == w) return static_cast<int>(i);
  throw VocabularyError("unknown word: " + std::string(w));
}

inline const char* shape_word(ShapeKind s) {
  static const char* n[] = {"square", "circle", "triangle", "cross"};
  return n[static_cast<int>(s)];
}
inline const char* color_word(Color c) {
  static const char* n[] = {"red", "green", "blue", "yellow"};
  return n[static_cast<int>(c)];
}
inline const char* size_word(Size s) { return s == Size::Small ? "small" : "large"; }
inline const char* row_word(int cell) {
  static const char* n[] = {"top", "middle", "bottom"};
  return n[cell / 3];
}
inline const char* col_word(int cell) {
  static const char* n[] = {"left", "center", "right"};
  return n[cell % 3];
}

class Lexicon {
 public:
  explicit Lexicon(const ModelConfig& cfg) : vocab_(cfg) {
    if (words().size() > cfg.text_vocab)
      throw ConfigError("text_vocab " + std::to_string(cfg.text_vocab) + " smaller than the " +
                        std::to_string(words().size()) + "-word lexicon");
  }
  int id(std::string_view w) const { return vocab_.text_id(word_index(w)); }
  // Word for a text id; empty for ids outside the lexicon.
  std::string word(int id) const {
    if (!vocab_.is_text(id)) return {};
    const auto k = static_cast<std::size_t>(id - vocab_.text_begin);
    return k < words().size() ? words()[k] : std::string{};
  }
  std::vector<int> ids(std::initializer_list<std::string_view> ws) const {
    std::vector<int> out;
    for (auto w : ws) out.push_back(id(w));
    return out;
  }
  const VocabLayout& vocab() const { return vocab_; }

 private:
  VocabLayout vocab_;
};

// Canonical description, objects in cell order:
// "a small red square at top left and a large blue circle at bottom right".
inline std::vector<int> describe(const Lexicon& lex, const Scene& s) {
  if (s.objects.empty()) return lex.ids({"an", "empty", "image"});
  std::vector<int> out;
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto& o = s.objects[i];
    if (i) out.push_back(lex.id("and"));
    for (auto w : {std::string_view("a"), std::string_view(size_word(o.size)), std::string_view(color_word(o.color)),
                   std::string_view(shape_word(o.shape)), std::string_view("at"), std::string_view(row_word(o.cell)),
                   std::string_view(col_word(o.cell))})
      out.push_back(lex.id(w));
  }
  return out;
}

inline std::vector<int> caption(const Lexicon& lex, const Scene& s, CaptionStyle style) {
  auto d = describe(lex, s);
  if (style == CaptionStyle::Template) return d;
  std::vector<int> out{VocabLayout::kUser};
  out.insert(out.end(), d.begin(), d.end());
  out.push_back(VocabLayout::kAssistant);
  return out;
}

inline std::vector<int> caption_query(const Lexicon& lex) {
  return lex.ids({"provide", "a", "one", "sentence", "caption", "for", "the", "image", ":"});
}

// Attribute-wise reading of a caption: objects split on "and"; each phrase
// contributes whatever attribute words it contains. Missing attributes stay
// unset so partial captions can still be scored.
struct CaptionObject {
  std::optional<ShapeKind> shape;
  std::optional<Color> color;
  std::optional<Size> size;
  std::optional<int> cell;
};

inline std::vector<CaptionObject> read_caption(const Lexicon& lex, const std::vector<int>& ids) {
  std::vector<CaptionObject> out(1);
  int row = -1, col = -1;
  auto flush = [&] {
    if (row >= 0 && col >= 0) out.back().cell = row * 3 + col;
  };
  for (int id : ids) {
    const std::string w = lex.word(id);
    if (w == "and") {
      flush();
      out.emplace_back();
      row = col = -1;
      continue;
    }
    auto& o = out.back();
    for (int k = 0; k < kNumShapes; ++k)
      if (!o.shape && w == shape_word(static_cast<ShapeKind>(k))) o.shape = static_cast<ShapeKind>(k);
    for (int k = 0; k < kNumColors; ++k)
      if (!o.color && w == color_word(static_cast<Color>(k))) o.color = static_cast<Color>(k);
    if (!o.size && w == "small") o.size = Size::Small;
    if (!o.size && w == "large") o.size = Size::Large;
    for (int k = 0; k < 3; ++k) {
      if (row < 0 && w == row_word(k * 3)) row = k;
      if (col < 0 && w == col_word(k)) col = k;
    }
  }
  flush();
  return out;
}

// ---------------------------------------------------------------------------
// Sequence samples

struct SequenceSample {
  std::vector<int> ids;
  std::vector<bool> loss_mask;
  Task task = Task::Gen;
  Format format = Format::Pretrain;
  bool caption_dropped = false;
};

// Assembles the token stream and loss mask. Gen samples drop the caption with
// probability p_cfg, substituting a single PAD_CFG token.
inline SequenceSample build_sample(const World& world, const Lexicon& lex, const Scene& scene, Task task,
                                   Format format, double p_cfg, Rng& rng) {
  SequenceSample s;
  s.task = task;
  s.format = format;
  const VocabLayout& V = lex.vocab();
  auto push = [&](int id, bool m) {
    s.ids.push_back(id);
    s.loss_mask.push_back(m);
  };
  auto push_all = [&](const std::vector<int>& ids, bool m) {
    for (int id : ids) push(id, m);
  };
  auto push_image = [&](bool m) {
    push(VocabLayout::kImgStart, false);
    for (int code : world.encode(world.render(scene))) push(V.image_id(code), m);
    push(VocabLayout::kImgEnd, false);
  };
  const auto desc = describe(lex, scene);
  push(VocabLayout::kBos, false);
  if (task == Task::Gen) {
    const bool drop = p_cfg > 0.0 && uniform01(rng) < p_cfg;
    s.caption_dropped = drop;
    if (format == Format::Dialogue) push(VocabLayout::kUser, false);
    if (drop) push(VocabLayout::kPadCfg, false);
    else push_all(desc, false);
    if (format == Format::Dialogue) push(VocabLayout::kAssistant, false);
    push_image(true);
  } else {
    if (format == Format::Dialogue) {
      push(VocabLayout::kUser, false);
      push_image(false);
      push_all(caption_query(lex), false);
      push(VocabLayout::kAssistant, false);
    } else {
      push_image(false);
    }
    push_all(desc, true);
    push(VocabLayout::kEos, true);
  }
  return s;
}

// Prompt context a sampler extends with image codes, ending in IMG_START.
inline std::vector<int> gen_prompt(const Lexicon& lex, const Scene* scene, Format format) {
  std::vector<int> ids{VocabLayout::kBos};
  if (format == Format::Dialogue) ids.push_back(VocabLayout::kUser);
  if (scene) {
    auto d = describe(lex, *scene);
    ids.insert(ids.end(), d.begin(), d.end());
  } else {
    ids.push_back(VocabLayout::kPadCfg);
  }
  if (format == Format::Dialogue) ids.push_back(VocabLayout::kAssistant);
  ids.push_back(VocabLayout::kImgStart);
  return ids;
}

// Understanding context, up to where the response begins.
inline std::vector<int> und_prompt(const World& world, const Lexicon& lex, const GridImage& grid, Format format) {
  const VocabLayout& V = lex.vocab();
  std::vector<int> ids{VocabLayout::kBos};
  if (format == Format::Dialogue) ids.push_back(VocabLayout::kUser);
  ids.push_back(VocabLayout::kImgStart);
  for (int code : world.encode(grid)) ids.push_back(V.image_id(code));
  ids.push_back(VocabLayout::kImgEnd);
  if (format == Format::Dialogue) {
    auto q = caption_query(lex);
    ids.insert(ids.end(), q.begin(), q.end());
    ids.push_back(VocabLayout::kAssistant);
  }
  return ids;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json scene_to_json(const Scene& s) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& o : s.objects)
    arr.push_back({{"shape", shape_word(o.shape)},
                   {"color", color_word(o.color)},
                   {"cell", o.cell},
                   {"size", size_word(o.size)}});
  return arr;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  std::vector<Object> objs;
  for (const auto& e : j) {
    Object o;
    const auto shape = e.at("shape").get<std::string>();
    const auto color = e.at("color").get<std::string>();
    const auto size = e.at("size").get<std::string>();
    bool ok_s = false, ok_c = false;
    for (int k = 0; k < kNumShapes; ++k)
      if (shape == shape_word(static_cast<ShapeKind>(k))) o.shape = static_cast<ShapeKind>(k), ok_s = true;
    for (int k = 0; k < kNumColors; ++k)
      if (color == color_word(static_cast<Color>(k))) o.color = static_cast<Color>(k), ok_c = true;
    if (!ok_s || !ok_c || (size != "small" && size != "large")) throw Error("bad scene object in JSON");
    o.size = size == "small" ? Size::Small : Size::Large;
    o.cell = e.at("cell").get<int>();
    objs.push_back(o);
  }
  Scene s = make_scene(std::move(objs));
  if (!s.valid()) throw Error("invalid scene in JSON");
  return s;
}

inline const char* task_name(Task t) { return t == Task::Gen ? "gen" : "und"; }
inline const char* format_name(Format f) { return f == Format::Pretrain ? "pretrain" : "dialogue"; }

// One manifest line: enough to regenerate the token stream exactly.
struct ManifestEntry {
  Scene scene;
  Task task = Task::Gen;
  Format format = Format::Pretrain;
  std::uint64_t seed = 0;
};

inline nlohmann::json manifest_line(const ManifestEntry& e) {
  return {{"scene", scene_to_json(e.scene)},
          {"task", task_name(e.task)},
          {"format", format_name(e.format)},
          {"seed", e.seed}};
}

inline ManifestEntry manifest_entry(const nlohmann::json& j) {
  ManifestEntry e;
  e.scene = scene_from_json(j.at("scene"));
  const auto t = j.at("task").get<std::string>();
  const auto f = j.at("format").get<std::string>();
  if ((t != "gen" && t != "und") || (f != "pretrain" && f != "dialogue")) throw Error("bad manifest line");
  e.task = t == "gen" ? Task::Gen : Task::Und;
  e.format = f == "pretrain" ? Format::Pretrain : Format::Dialogue;
  e.seed = j.at("seed").get<std::uint64_t>();
  return e;
}

inline SequenceSample regenerate(const World& world, const Lexicon& lex, const ManifestEntry& e, double p_cfg) {
  Rng rng = substream(e.seed, "cfg");
  return build_sample(world, lex, e.scene, e.task, e.format, p_cfg, rng);
}

// Deterministic stream of manifest entries: sample i is a pure function of
// (seed, i). Curricula alternate uniformly at random.
class SceneStream {
 public:
  SceneStream(std::uint64_t seed, double two_object_fraction = 0.5)
      : seed_(seed), two_fraction_(two_object_fraction) {}

  ManifestEntry entry(std::uint64_t index, Task task, Format format) const {
    Rng rng = substream(seed_, "scene", index);
    const auto cur = uniform01(rng) < two_fraction_ ? Curriculum::TwoObject : Curriculum::Single;
    ManifestEntry e;
    e.scene = sample_scene(rng, cur);
    e.task = task;
    e.format = format;
    e.seed = splitmix64(seed_ ^ splitmix64(index + 0x5151));
    return e;
  }

 private:
  std::uint64_t seed_;
  double two_fraction_;
};

}  // namespace unifork::toyworld
