#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "unifork/autograd.hpp"
#include "unifork/checkpoint.hpp"
#include "unifork/config.hpp"
#include "unifork/rng.hpp"

namespace unifork {

enum class Branch { Und, Gen };

inline const char* branch_name(Branch b) { return b == Branch::Und ? "und" : "gen"; }

// A token stream as the tokenizer emits it: text/special ids, with each image
// position contributing rvq_depth consecutive image-code ids.
using TokenSequence = std::vector<int>;

struct LinearParams {
  Var weight;  // [in x out]
  Var bias;    // [out]
};

struct NormParams {
  Var gain;
  Var bias;
};

struct BlockParams {
  NormParams ln1;
  LinearParams qkv;
  LinearParams proj;
  NormParams ln2;
  LinearParams fc1;
  LinearParams fc2;
};

struct BranchParams {
  std::vector<BlockParams> blocks;
  NormParams final_norm;
};

// Autoregressive code head over the D residual codes of one image position.
struct VisionHeadParams {
  Var depth_pos;   // [D x c]
  Var code_embed;  // [(D-1)*K x c], row level*K + code
  BlockParams block;
  NormParams norm;
  LinearParams out;  // c -> K
};

struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;
  // Codes fed to the vision head; Gen routing only.
  bool vision_head = true;
};

// Where the prediction for one stream token comes from.
struct Prediction {
  enum class Kind { None, Text, Code };
  Kind kind = Kind::None;
  std::size_t row = 0;  // row into text_logits or code_logits
};

// Backbone view of a packed batch.
struct PackedLayout {
  std::vector<std::size_t> seq_rows;     // backbone length per sequence
  std::vector<std::size_t> seq_offset;   // first backbone row per sequence
  std::vector<std::vector<std::size_t>> stream_row;  // backbone row of each stream token
  std::vector<std::vector<bool>> is_image_row;       // per sequence, per backbone row
  std::vector<std::vector<Prediction>> predictions;  // per sequence, per stream token
  std::size_t total_rows = 0;
  std::size_t image_rows = 0;            // every image position
  std::size_t predicted_image_rows = 0;  // image positions with a predecessor
};

struct ForwardTrace {
  Var text_logits;                 // [rows x text_head_size]
  Var code_logits;                 // [predicted image positions * D x K], Gen only
  std::vector<Var> hidden_states;  // M+N post-block activations, [rows x c]
  Var final_features;              // after the branch's final norm
  PackedLayout layout;
};

enum class ParamGroup { Shared, Und, Gen };

inline ParamGroup param_group(const std::string& name) {
  if (name.starts_with("shared.")) return ParamGroup::Shared;
  if (name.starts_with("und.") || name.starts_with("heads.text.")) return ParamGroup::Und;
  if (name.starts_with("gen.") || name.starts_with("heads.vision.")) return ParamGroup::Gen;
  throw Error("parameter name outside the shared/und/gen partition: " + name);
}

class ForkedTransformer {
 public:
  ForkedTransformer(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), vocab_(cfg) {
    cfg_.validate();
    Rng rng = substream(seed, "init");
    build(rng);
    Rng tok = substream(seed, "tokenizer");
    codebook_ = Tensor({cfg_.rvq_depth * cfg_.image_codebook, cfg_.d_model});
    for (auto& v : codebook_.storage()) v = standard_normal(tok);
  }

  ForkedTransformer(const ForkedTransformer&) = delete;
  ForkedTransformer& operator=(const ForkedTransformer&) = delete;
  ForkedTransformer(ForkedTransformer&&) = default;
  ForkedTransformer& operator=(ForkedTransformer&&) = default;

  // Deep copy with independent parameter storage.
  ForkedTransformer clone() const {
    ForkedTransformer out(cfg_, 0);
    out.codebook_ = codebook_;
    for (const auto& [name, var] : params_) out.set_parameter(name, var.value());
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  const VocabLayout& vocab() const { return vocab_; }
  // Frozen tokenizer codebook feature per (level, code).
  const Tensor& codebook() const { return codebook_; }
  void set_codebook(Tensor t) {
    if (t.shape() != codebook_.shape()) throw DimensionError("codebook shape mismatch");
    codebook_ = std::move(t);
  }

  const std::vector<std::pair<std::string, Var>>& parameters() const { return params_; }
  const Var& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("no parameter named " + name);
    return params_[it->second].second;
  }
  bool has_param(const std::string& name) const { return index_.count(name) != 0; }
  void set_parameter(const std::string& name, const Tensor& value) {
    auto& node = param(name).node();
    if (node.value.shape() != value.shape())
      throw DimensionError("shape mismatch assigning " + name + ": " + shape_str(node.value.shape()) + " vs " +
                           shape_str(value.shape()));
    node.value = value;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v.value().size();
    return n;
  }
  void zero_grad() {
    for (auto& [_, v] : params_) v.node().zero_grad();
  }

  std::set<std::string> shared_params() const { return group(ParamGroup::Shared); }
  std::set<std::string> branch_params(Branch b) const {
    return group(b == Branch::Und ? ParamGroup::Und : ParamGroup::Gen);
  }
  // Parameters traversed when processing one task.
  std::size_t active_parameter_count(Branch b) const {
    std::size_t n = 0;
    for (const auto& [name, v] : params_) {
      const auto g = param_group(name);
      if (g == ParamGroup::Shared || g == (b == Branch::Und ? ParamGroup::Und : ParamGroup::Gen)) n += v.value().size();
    }
    return n;
  }

  // ------------------------------------------------------------------------
  // Forward over a batch of token streams, all routed through `branch`.
  ForwardTrace forward(const std::vector<TokenSequence>& batch, Branch branch, const ForwardOptions& opt = {}) const {
    ForwardTrace trace;
    trace.layout = pack(batch);
    const auto& lay = trace.layout;
    const std::size_t c = cfg_.d_model;

    // Gather per-row inputs: token embeddings for text rows, connector output
    // for image rows.
    std::vector<int> text_ids;
    std::vector<std::size_t> text_rows, image_rows, positions(lay.total_rows);
    Tensor features({lay.image_rows, c});
    std::size_t img = 0;
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const auto& seq = batch[s];
      std::size_t r = lay.seq_offset[s];
      for (std::size_t i = 0; i < seq.size();) {
        positions[r] = r - lay.seq_offset[s];
        if (vocab_.is_image(seq[i])) {
          for (std::size_t d = 0; d < cfg_.rvq_depth; ++d) {
            const std::size_t code = static_cast<std::size_t>(vocab_.code_of(seq[i + d]));
            const double* f = codebook_.data() + (d * cfg_.image_codebook + code) * c;
            for (std::size_t k = 0; k < c; ++k) features[img * c + k] += f[k];
          }
          image_rows.push_back(r);
          ++img;
          i += cfg_.rvq_depth;
        } else {
          text_ids.push_back(seq[i]);
          text_rows.push_back(r);
          ++i;
        }
        ++r;
      }
    }
    std::vector<Var> parts;
    std::vector<std::size_t> order(lay.total_rows);
    if (!text_ids.empty()) parts.push_back(embedding_lookup(token_embed_, text_ids));
    if (lay.image_rows > 0) parts.push_back(connect(constant(std::move(features))));
    {
      std::size_t k = 0;
      for (auto r : text_rows) order[r] = k++;
      for (auto r : image_rows) order[r] = k++;
    }
    Var x = gather_rows(concat_rows(parts), order);
    x = add(x, gather_rows(pos_embed_, positions));

    const auto& segs = lay.seq_rows;
    for (const auto& blk : shared_blocks_) {
      x = block_forward(blk, x, segs, opt);
      trace.hidden_states.push_back(x);
    }
    const BranchParams* br = nullptr;
    if (cfg_.branch_layers > 0) {
      br = branch == Branch::Und ? &und_ : &gen_;
      for (const auto& blk : br->blocks) {
        x = block_forward(blk, x, segs, opt);
        trace.hidden_states.push_back(x);
      }
    }
    const NormParams& fn = br ? br->final_norm : shared_final_norm_;
    Var h = layer_norm(x, fn.gain, fn.bias, cfg_.ln_eps);
    trace.final_features = h;
    trace.text_logits = linear(h, text_head_.weight, text_head_.bias);

    if (branch == Branch::Gen && opt.vision_head) trace.code_logits = vision_head_forward(h, batch, trace.layout);
    return trace;
  }

  ForwardTrace forward(const TokenSequence& ids, Branch branch, const ForwardOptions& opt = {}) const {
    return forward(std::vector<TokenSequence>{ids}, branch, opt);
  }

  // Vision head on explicit trunk features [n x c] with teacher-forced
  // earlier codes [n x D]; returns logits [n*D x K].
  Var rvq_head_forward(const Var& trunk, const std::vector<int>& codes, const ForwardOptions& opt = {}) const {
    const std::size_t n = trunk.rows();
    const std::size_t D = cfg_.rvq_depth, K = cfg_.image_codebook;
    if (codes.size() != n * D) throw DimensionError("rvq head needs D codes per position");
    if (D == 1) return linear(trunk, vision_.out.weight, vision_.out.bias);
    // Depth tokens: slot 0 carries the trunk feature, slot d the embedding of
    // code d-1.
    std::vector<int> emb_ids;
    emb_ids.reserve(n * (D - 1));
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t d = 0; d + 1 < D; ++d) {
        const int code = codes[p * D + d];
        if (code < 0 || static_cast<std::size_t>(code) >= K) throw VocabularyError("image code out of range");
        emb_ids.push_back(static_cast<int>(d * K) + code);
      }
    Var prev = embedding_lookup(vision_.code_embed, emb_ids);
    std::vector<std::size_t> order(n * D), pos(n * D);
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t d = 0; d < D; ++d) {
        order[p * D + d] = d == 0 ? p : n + p * (D - 1) + (d - 1);
        pos[p * D + d] = d;
      }
    Var u = gather_rows(concat_rows({trunk, prev}), order);
    u = add(u, gather_rows(vision_.depth_pos, pos));
    std::vector<std::size_t> segs(n, D);
    u = block_forward(vision_.block, u, segs, opt);
    u = layer_norm(u, vision_.norm.gain, vision_.norm.bias, cfg_.ln_eps);
    return linear(u, vision_.out.weight, vision_.out.bias);
  }

  // Backbone layout of a batch; validates ids and lengths.
  PackedLayout pack(const std::vector<TokenSequence>& batch) const {
    PackedLayout lay;
    const std::size_t D = cfg_.rvq_depth;
    for (const auto& seq : batch) {
      std::vector<std::size_t> stream_row(seq.size());
      std::vector<bool> image_row;
      std::vector<Prediction> pred(seq.size());
      std::size_t r = 0;
      for (std::size_t i = 0; i < seq.size();) {
        const int id = seq[i];
        if (!vocab_.valid(id)) throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
        if (vocab_.is_image(id)) {
          if (i + D > seq.size())
            throw VocabularyError("image position truncated: needs " + std::to_string(D) + " codes");
          for (std::size_t d = 0; d < D; ++d) {
            if (!vocab_.is_image(seq[i + d])) throw VocabularyError("image position interrupted by non-image id");
            stream_row[i + d] = r;
            if (r > 0) pred[i + d] = {Prediction::Kind::Code, (lay.predicted_image_rows * D) + d};
          }
          image_row.push_back(true);
          ++lay.image_rows;
          if (r > 0) ++lay.predicted_image_rows;
          i += D;
        } else {
          stream_row[i] = r;
          if (r > 0) pred[i] = {Prediction::Kind::Text, lay.total_rows + r - 1};
          image_row.push_back(false);
          ++i;
        }
        ++r;
      }
      if (r > cfg_.max_seq_len)
        throw Error("sequence of " + std::to_string(r) + " positions exceeds max_seq_len " +
                    std::to_string(cfg_.max_seq_len));
      lay.seq_offset.push_back(lay.total_rows);
      lay.seq_rows.push_back(r);
      lay.total_rows += r;
      lay.stream_row.push_back(std::move(stream_row));
      lay.is_image_row.push_back(std::move(image_row));
      lay.predictions.push_back(std::move(pred));
    }
    return lay;
  }

  // ------------------------------------------------------------------------
  // Serialization

  checkpoint::NamedTensors named_tensors() const {
    checkpoint::NamedTensors out;
    for (const auto& [name, v] : params_) out.emplace_back(name, v.value());
    out.emplace_back("tokenizer.codebook", codebook_);
    return out;
  }

  void load_named_tensors(const checkpoint::NamedTensors& tensors) {
    std::set<std::string> seen;
    for (const auto& [name, t] : tensors) {
      if (name == "tokenizer.codebook") {
        set_codebook(t);
      } else if (has_param(name)) {
        set_parameter(name, t);
      } else {
        continue;  // optimizer state and other records live alongside
      }
      seen.insert(name);
    }
    for (const auto& [name, _] : params_)
      if (!seen.count(name)) throw Error("checkpoint missing parameter " + name);
  }

  void save(const std::string& path) const {
    checkpoint::save(path, named_tensors());
    std::ofstream side(path + ".json");
    side << nlohmann::json(cfg_).dump(2) << '\n';
  }

  static ForkedTransformer load(const std::string& path) {
    std::ifstream side(path + ".json");
    if (!side) throw Error("missing config sidecar " + path + ".json");
    ModelConfig cfg = nlohmann::json::parse(side).get<ModelConfig>();
    ForkedTransformer m(cfg, 0);
    m.load_named_tensors(checkpoint::load(path));
    return m;
  }

  // Block parameter names for layer i of the given stack prefix.
  static std::string block_prefix(const std::string& stack, std::size_t i) {
    return stack + ".blocks." + std::to_string(i) + ".";
  }

  // Freeze or unfreeze every parameter; frozen ones take no gradient.
  void set_trainable(const std::set<std::string>& names) {
    for (auto& [name, v] : params_) v.node().requires_grad = names.count(name) != 0;
  }
  void set_all_trainable() {
    for (auto& [_, v] : params_) v.node().requires_grad = true;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : params_) out.push_back(name);
    return out;
  }

 private:
  std::set<std::string> group(ParamGroup g) const {
    std::set<std::string> out;
    for (const auto& [name, _] : params_)
      if (param_group(name) == g) out.insert(name);
    return out;
  }

  Var make(const std::string& name, Shape shape, Rng& rng, double std) {
    Tensor t(std::move(shape));
    if (std > 0.0)
      for (auto& v : t.storage()) v = std * standard_normal(rng);
    Var p = parameter(std::move(t));
    index_[name] = params_.size();
    params_.emplace_back(name, p);
    return p;
  }
  Var make_const(const std::string& name, Shape shape, double fill) {
    Var p = parameter(Tensor(std::move(shape), fill));
    index_[name] = params_.size();
    params_.emplace_back(name, p);
    return p;
  }
  LinearParams make_linear(const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
    return {make(prefix + "weight", {in, out}, rng, cfg_.init_std), make_const(prefix + "bias", {out}, 0.0)};
  }
  NormParams make_norm(const std::string& prefix) {
    return {make_const(prefix + "gain", {cfg_.d_model}, 1.0), make_const(prefix + "bias", {cfg_.d_model}, 0.0)};
  }
  BlockParams make_block(const std::string& p, Rng& rng) {
    const std::size_t c = cfg_.d_model;
    BlockParams b;
    b.ln1 = make_norm(p + "ln1.");
    b.qkv = make_linear(p + "attn.qkv.", c, 3 * c, rng);
    b.proj = make_linear(p + "attn.proj.", c, c, rng);
    b.ln2 = make_norm(p + "ln2.");
    b.fc1 = make_linear(p + "mlp.fc1.", c, 4 * c, rng);
    b.fc2 = make_linear(p + "mlp.fc2.", 4 * c, c, rng);
    return b;
  }

  void build(Rng& rng) {
    const std::size_t c = cfg_.d_model;
    token_embed_ = make("shared.token_embed", {static_cast<std::size_t>(vocab_.text_head_size()), c}, rng, cfg_.init_std);
    pos_embed_ = make("shared.pos_embed", {cfg_.max_seq_len, c}, rng, cfg_.init_std);
    connector_fc1_ = make_linear("shared.connector.fc1.", c, c, rng);
    connector_fc2_ = make_linear("shared.connector.fc2.", c, c, rng);
    for (std::size_t i = 0; i < cfg_.shared_layers; ++i) shared_blocks_.push_back(make_block(block_prefix("shared", i), rng));
    if (cfg_.branch_layers > 0) {
      for (std::size_t i = 0; i < cfg_.branch_layers; ++i)
        und_.blocks.push_back(make_block(block_prefix("und", cfg_.shared_layers + i), rng));
      und_.final_norm = make_norm("und.final_norm.");
      for (std::size_t i = 0; i < cfg_.branch_layers; ++i)
        gen_.blocks.push_back(make_block(block_prefix("gen", cfg_.shared_layers + i), rng));
      gen_.final_norm = make_norm("gen.final_norm.");
    } else {
      shared_final_norm_ = make_norm("shared.final_norm.");
    }
    text_head_ = make_linear("heads.text.", c, static_cast<std::size_t>(vocab_.text_head_size()), rng);
    const std::size_t D = cfg_.rvq_depth, K = cfg_.image_codebook;
    if (D > 1) {
      vision_.depth_pos = make("heads.vision.depth_pos", {D, c}, rng, cfg_.init_std);
      vision_.code_embed = make("heads.vision.code_embed", {(D - 1) * K, c}, rng, cfg_.init_std);
      vision_.block = make_block("heads.vision.block.", rng);
      vision_.norm = make_norm("heads.vision.norm.");
    }
    vision_.out = make_linear("heads.vision.out.", c, K, rng);
  }

  Var connect(const Var& feats) const {
    Var h = gelu(linear(feats, connector_fc1_.weight, connector_fc1_.bias));
    return linear(h, connector_fc2_.weight, connector_fc2_.bias);
  }

  Var block_forward(const BlockParams& b, const Var& x, const std::vector<std::size_t>& segs,
                    const ForwardOptions& opt) const {
    const double p = opt.training ? cfg_.dropout_prob : 0.0;
    Var h = layer_norm(x, b.ln1.gain, b.ln1.bias, cfg_.ln_eps);
    h = causal_attention(linear(h, b.qkv.weight, b.qkv.bias), cfg_.n_heads, segs);
    h = linear(h, b.proj.weight, b.proj.bias);
    if (p > 0.0) h = dropout(h, p, *opt.dropout_rng);
    Var y = add(x, h);
    h = layer_norm(y, b.ln2.gain, b.ln2.bias, cfg_.ln_eps);
    h = linear(gelu(linear(h, b.fc1.weight, b.fc1.bias)), b.fc2.weight, b.fc2.bias);
    if (p > 0.0) h = dropout(h, p, *opt.dropout_rng);
    return add(y, h);
  }

  Var vision_head_forward(const Var& h, const std::vector<TokenSequence>& batch, const PackedLayout& lay) const {
    // Each image position is predicted from the backbone row before it.
    std::vector<std::size_t> src;
    std::vector<int> codes;
    const std::size_t D = cfg_.rvq_depth;
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const auto& seq = batch[s];
      for (std::size_t i = 0; i < seq.size();) {
        if (vocab_.is_image(seq[i])) {
          const std::size_t r = lay.stream_row[s][i];
          if (r > 0) {
            src.push_back(lay.seq_offset[s] + r - 1);
            for (std::size_t d = 0; d < D; ++d) codes.push_back(vocab_.code_of(seq[i + d]));
          }
          i += D;
        } else {
          ++i;
        }
      }
    }
    if (src.empty()) return Var();
    return rvq_head_forward(gather_rows(h, src), codes, {});
  }

  ModelConfig cfg_;
  VocabLayout vocab_;
  Tensor codebook_;
  std::vector<std::pair<std::string, Var>> params_;
  std::map<std::string, std::size_t> index_;

  Var token_embed_, pos_embed_;
  LinearParams connector_fc1_, connector_fc2_;
  std::vector<BlockParams> shared_blocks_;
  BranchParams und_, gen_;
  NormParams shared_final_norm_;
  LinearParams text_head_;
  VisionHeadParams vision_;
};

// Builds a Y-shaped model from a fully shared trunk of depth M+N: layers
// [0, M) become the shared stack, layers [M, M+N) are copied into both
// branches, and the trunk's final norm seeds each branch's final norm.
inline ForkedTransformer init_fork_from_trunk(const ForkedTransformer& trunk, std::size_t shared_layers,
                                              std::size_t branch_layers) {
  const auto& tc = trunk.config();
  if (tc.branch_layers != 0) throw ConfigError("trunk must be a fully shared model (N = 0)");
  if (tc.depth() != shared_layers + branch_layers)
    throw ConfigError("trunk depth " + std::to_string(tc.depth()) + " does not equal M+N = " +
                      std::to_string(shared_layers + branch_layers));
  ModelConfig cfg = tc;
  cfg.shared_layers = shared_layers;
  cfg.branch_layers = branch_layers;
  ForkedTransformer out(cfg, 0);
  out.set_codebook(trunk.codebook());
  const std::string blocks = "shared.blocks.";
  for (const auto& [name, var] : trunk.parameters()) {
    if (name.starts_with(blocks)) {
      const std::size_t rest = blocks.size();
      const std::size_t dot = name.find('.', rest);
      const std::size_t layer = std::stoul(name.substr(rest, dot - rest));
      const std::string tail = name.substr(dot);
      if (layer < shared_layers) {
        out.set_parameter(name, var.value());
      } else {
        out.set_parameter("und.blocks." + std::to_string(layer) + tail, var.value());
        out.set_parameter("gen.blocks." + std::to_string(layer) + tail, var.value());
      }
    } else if (name.starts_with("shared.final_norm.") && branch_layers > 0) {
      const std::string tail = name.substr(std::string("shared.final_norm.").size());
      out.set_parameter("und.final_norm." + tail, var.value());
      out.set_parameter("gen.final_norm." + tail, var.value());
    } else {
      out.set_parameter(name, var.value());
    }
  }
  return out;
}

}  // namespace unifork
