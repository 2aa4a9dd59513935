#pragma once

#include <cstddef>
#include <fstream>
#include <string>

#include "json.hpp"

#include "unifork/tensor.hpp"

namespace unifork {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t shared_layers = 4;  // M
  std::size_t branch_layers = 2;  // N
  std::size_t text_vocab = 80;
  std::size_t image_codebook = 64;  // codes per residual level
  std::size_t rvq_depth = 2;        // D, codes per image position
  std::size_t grid_side = 8;        // image positions = grid_side^2
  std::size_t max_seq_len = 128;
  double dropout_prob = 0.0;
  double init_std = 0.02;
  double ln_eps = 1e-5;

  std::size_t depth() const { return shared_layers + branch_layers; }
  std::size_t image_tokens() const { return grid_side * grid_side; }

  void validate() const {
    if (depth() < 1) throw ConfigError("model needs at least one transformer layer (M+N >= 1)");
    if (n_heads == 0 || d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (rvq_depth == 0) throw ConfigError("rvq_depth must be at least 1");
    if (image_codebook == 0 || text_vocab == 0) throw ConfigError("vocabulary sizes must be positive");
    if (grid_side == 0) throw ConfigError("grid_side must be positive");
    if (max_seq_len == 0) throw ConfigError("max_seq_len must be positive");
    if (dropout_prob < 0.0 || dropout_prob >= 1.0) throw ConfigError("dropout_prob must be in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"shared_layers", c.shared_layers},
                     {"branch_layers", c.branch_layers},
                     {"text_vocab", c.text_vocab},
                     {"image_codebook", c.image_codebook},
                     {"rvq_depth", c.rvq_depth},
                     {"grid_side", c.grid_side},
                     {"max_seq_len", c.max_seq_len},
                     {"dropout_prob", c.dropout_prob},
                     {"init_std", c.init_std},
                     {"ln_eps", c.ln_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const char* known[] = {"d_model",    "n_heads",   "shared_layers", "branch_layers",
                                "text_vocab", "image_codebook", "rvq_depth", "grid_side",
                                "max_seq_len", "dropout_prob", "init_std", "ln_eps"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown model config key: " + it.key());
  }
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("d_model", c.d_model);
  opt("n_heads", c.n_heads);
  opt("shared_layers", c.shared_layers);
  opt("branch_layers", c.branch_layers);
  opt("text_vocab", c.text_vocab);
  opt("image_codebook", c.image_codebook);
  opt("rvq_depth", c.rvq_depth);
  opt("grid_side", c.grid_side);
  opt("max_seq_len", c.max_seq_len);
  opt("dropout_prob", c.dropout_prob);
  opt("init_std", c.init_std);
  opt("ln_eps", c.ln_eps);
}

inline ModelConfig load_model_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open model config " + path);
  ModelConfig c;
  try {
    c = nlohmann::json::parse(f).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad model config " + path + ": " + e.what());
  }
  c.validate();
  return c;
}

// Token id layout: special ids first, then text words, then image codes.
struct VocabLayout {
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kPadCfg = 2;
  static constexpr int kImgStart = 3;
  static constexpr int kImgEnd = 4;
  static constexpr int kUser = 5;
  static constexpr int kAssistant = 6;
  static constexpr int kNumSpecial = 7;

  int text_begin = kNumSpecial;
  int text_end = kNumSpecial;
  int image_begin = kNumSpecial;
  int image_end = kNumSpecial;

  explicit VocabLayout(const ModelConfig& c)
      : text_begin(kNumSpecial),
        text_end(kNumSpecial + static_cast<int>(c.text_vocab)),
        image_begin(text_end),
        image_end(text_end + static_cast<int>(c.image_codebook)) {}

  int size() const { return image_end; }
  // Classes predicted by the text head: every non-image id.
  int text_head_size() const { return image_begin; }

  bool is_special(int id) const { return id >= 0 && id < kNumSpecial; }
  bool is_text(int id) const { return id >= text_begin && id < text_end; }
  bool is_image(int id) const { return id >= image_begin && id < image_end; }
  bool valid(int id) const { return id >= 0 && id < image_end; }

  int image_id(int code) const { return image_begin + code; }
  int code_of(int id) const { return id - image_begin; }
  int text_id(int word) const { return text_begin + word; }
};

}  // namespace unifork
