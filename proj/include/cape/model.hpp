#pragma once

#include <map>
#include <string>

#include "cape/attention.hpp"
#include "cape/nn.hpp"

namespace cape {

struct ModelConfig {
  int image_side = 32;
  int base_channels = 32;
  int token_dim = 64;  // attention width; equals the channel count at the attention resolutions
  int heads = 4;
  CapeConfig cape;

  int temb_dim() const { return 4 * base_channels; }
  int encoder_tokens() const { return (image_side / 8) * (image_side / 8); }

  void validate() const {
    if (image_side < 8 || image_side % 8 != 0) {
      throw std::invalid_argument("ModelConfig: image side must be a multiple of 8");
    }
    if (token_dim != 2 * base_channels) {
      throw std::invalid_argument(
          "ModelConfig: token_dim must equal 2 * base_channels (attention runs on the "
          "mid-resolution feature maps directly)");
    }
    if (token_dim % heads != 0) {
      throw std::invalid_argument("ModelConfig: token_dim not divisible by heads");
    }
    check_cape_dimension(token_dim / heads, cape.mode);
  }
};

/// Named parameter tensors in registration order, with parallel gradient
/// buffers. Registration order fixes the checkpoint layout.
template <typename S>
class ParamStoreT {
 public:
  int add(const std::string& name, TensorT<S> init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    index_[name] = static_cast<int>(names_.size());
    names_.push_back(name);
    values_.push_back(std::move(init));
    grads_.emplace_back(values_.back().shape);
    return static_cast<int>(names_.size()) - 1;
  }

  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
  }

  int count() const { return static_cast<int>(names_.size()); }
  const std::string& name(int i) const { return names_[static_cast<std::size_t>(i)]; }
  TensorT<S>& value(int i) { return values_[static_cast<std::size_t>(i)]; }
  const TensorT<S>& value(int i) const { return values_[static_cast<std::size_t>(i)]; }
  TensorT<S>& grad(int i) { return grads_[static_cast<std::size_t>(i)]; }

  std::int64_t total_scalars() const {
    std::int64_t n = 0;
    for (const auto& v : values_) n += v.numel();
    return n;
  }

  void zero_grads() {
    for (auto& g : grads_) g.fill(S(0));
  }

  template <typename T>
  ParamStoreT<T> cast() const {
    ParamStoreT<T> out;
    for (int i = 0; i < count(); ++i) out.add(name(i), value(i).template cast<T>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<TensorT<S>> values_;
  std::vector<TensorT<S>> grads_;
  std::map<std::string, int> index_;
};

/// Sinusoidal embedding of a (possibly fractional) diffusion timestep.
template <typename S>
TensorT<S> timestep_embedding(double t, int dim) {
  TensorT<S> out({1, dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    out.at(i) = static_cast<S>(std::sin(t * freq));
    out.at(half + i) = static_cast<S>(std::cos(t * freq));
  }
  return out;
}

/// Conditioning encoder + U-Net denoiser over target views, with joint
/// self-attention across targets and cross-attention to reference tokens at
/// the two lowest resolutions.
template <typename S>
class DenoiserT {
 public:
  DenoiserT(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(Rng::mix(seed, 0x6d6f64656cULL));
    register_params(rng);
  }

  // Construction from existing parameters (checkpoint loading).
  DenoiserT(const ModelConfig& cfg, ParamStoreT<S> store) : cfg_(cfg), store_(std::move(store)) {
    cfg_.validate();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStoreT<S>& params() { return store_; }
  const ParamStoreT<S>& params() const { return store_; }

  /// Leafs every parameter into the tape, in store order.
  std::vector<int> leaf_params(nn::TapeT<S>& tape, bool requires_grad) const {
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(store_.count()));
    for (int i = 0; i < store_.count(); ++i) ids.push_back(tape.leaf(store_.value(i), requires_grad));
    return ids;
  }

  /// After backward(), adds tape gradients onto the store's grad buffers.
  void collect_grads(nn::TapeT<S>& tape, const std::vector<int>& param_ids) {
    for (int i = 0; i < store_.count(); ++i) {
      if (!tape.has_grad(param_ids[static_cast<std::size_t>(i)])) continue;
      const auto& g = tape.grad(param_ids[static_cast<std::size_t>(i)]);
      auto& dst = store_.grad(i);
      for (std::int64_t k = 0; k < dst.numel(); ++k) dst.at(k) += g.at(k);
    }
  }

  // -- Graph builders ------------------------------------------------------

  /// Encoder trunk for one [3,H,W] image node; returns the projected token
  /// node [T, d]. The camera pose never enters here.
  int build_encoder(nn::TapeT<S>& t, const std::vector<int>& p, int image) const {
    int h = nn::conv2d(t, image, p[id("enc.conv0.w")], p[id("enc.conv0.b")], 2, 1);
    h = nn::silu(t, h);
    h = nn::conv2d(t, h, p[id("enc.conv1.w")], p[id("enc.conv1.b")], 2, 1);
    h = nn::silu(t, h);
    h = nn::conv2d(t, h, p[id("enc.conv2.w")], p[id("enc.conv2.b")], 2, 1);
    h = nn::silu(t, h);
    int tok = nn::to_tokens(t, h);
    tok = nn::linear(t, tok, p[id("enc.proj.w")], p[id("enc.proj.b")]);
    return tok;
  }

  /// Full denoiser graph over M target views sharing one timestep. Reference
  /// tokens arrive as tape views (already encoded and projected).
  std::vector<int> build_denoiser(nn::TapeT<S>& t, const std::vector<int>& p,
                                  const std::vector<int>& noisy_targets,
                                  const std::vector<Pose>& target_poses, double timestep,
                                  const std::vector<nn::TapeView>& references) const {
    if (noisy_targets.empty()) throw std::invalid_argument("denoise: need at least one target");
    if (noisy_targets.size() != target_poses.size()) {
      throw std::invalid_argument("denoise: target/pose count mismatch");
    }
    for (int n : noisy_targets) {
      const auto& v = t.val(n);
      if (v.rank() != 3 || v.dim(0) != 3 || v.dim(1) != cfg_.image_side ||
          v.dim(2) != cfg_.image_side) {
        throw std::invalid_argument("denoise: target image shape mismatch, got " +
                                    shape_string(v));
      }
    }

    // Shared timestep embedding -> small MLP.
    int temb = t.leaf(timestep_embedding<S>(timestep, cfg_.temb_dim()));
    temb = nn::linear(t, temb, p[id("temb.fc0.w")], p[id("temb.fc0.b")]);
    temb = nn::silu(t, temb);
    temb = nn::linear(t, temb, p[id("temb.fc1.w")], p[id("temb.fc1.b")]);

    const std::size_t m = noisy_targets.size();
    std::vector<int> h(m), skip1(m), skip2(m);

    for (std::size_t v = 0; v < m; ++v) {
      h[v] = nn::conv2d(t, noisy_targets[v], p[id("unet.conv_in.w")], p[id("unet.conv_in.b")], 1, 1);
      h[v] = resblock(t, p, "unet.rb1", h[v], temb);
      skip1[v] = h[v];
      h[v] = nn::conv2d(t, h[v], p[id("unet.down1.w")], p[id("unet.down1.b")], 2, 1);
      h[v] = resblock(t, p, "unet.rb2", h[v], temb);
      skip2[v] = h[v];
    }
    attention_pair(t, p, "unet.attn16a", h, target_poses, references);
    for (std::size_t v = 0; v < m; ++v) {
      h[v] = nn::conv2d(t, h[v], p[id("unet.down2.w")], p[id("unet.down2.b")], 2, 1);
      h[v] = resblock(t, p, "unet.rb3", h[v], temb);
    }
    attention_pair(t, p, "unet.attn8", h, target_poses, references);
    for (std::size_t v = 0; v < m; ++v) {
      h[v] = resblock(t, p, "unet.rb4", h[v], temb);
      h[v] = nn::upsample2x(t, h[v]);
      h[v] = nn::conv2d(t, h[v], p[id("unet.up1.w")], p[id("unet.up1.b")], 1, 1);
      h[v] = nn::concat_chw(t, h[v], skip2[v]);
      h[v] = resblock(t, p, "unet.rb5", h[v], temb);
    }
    attention_pair(t, p, "unet.attn16b", h, target_poses, references);
    for (std::size_t v = 0; v < m; ++v) {
      h[v] = nn::upsample2x(t, h[v]);
      h[v] = nn::conv2d(t, h[v], p[id("unet.up2.w")], p[id("unet.up2.b")], 1, 1);
      h[v] = nn::concat_chw(t, h[v], skip1[v]);
      h[v] = resblock(t, p, "unet.rb6", h[v], temb);
      int out = layernorm_chw(t, h[v], p[id("unet.out_norm.g")], p[id("unet.out_norm.b")]);
      out = nn::silu(t, out);
      h[v] = nn::conv2d(t, out, p[id("unet.conv_out.w")], p[id("unet.conv_out.b")], 1, 1);
    }
    return h;
  }

  // -- Value-level API -----------------------------------------------------

  /// Encodes reference images into pose-tagged token sets.
  std::vector<ViewTokensT<S>> encode_references(const std::vector<TensorT<S>>& images,
                                                const std::vector<Pose>& poses) const {
    if (images.empty()) throw std::invalid_argument("encode_references: need at least one view");
    if (images.size() != poses.size()) {
      throw std::invalid_argument("encode_references: image/pose count mismatch");
    }
    std::vector<ViewTokensT<S>> out;
    out.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& img = images[i];
      if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != cfg_.image_side ||
          img.dim(2) != cfg_.image_side) {
        throw std::invalid_argument("encode_references: image shape mismatch, got " +
                                    shape_string(img));
      }
      nn::TapeT<S> tape;
      const auto p = leaf_params(tape, false);
      const int tok = build_encoder(tape, p, tape.leaf(img));
      out.push_back({tape.val(tok), poses[i], ViewRole::Reference});
    }
    return out;
  }

  /// Predicts the noise in each target view (inference path).
  std::vector<TensorT<S>> denoise(const std::vector<TensorT<S>>& noisy,
                                  const std::vector<Pose>& poses, double timestep,
                                  const std::vector<ViewTokensT<S>>& references) const {
    nn::TapeT<S> tape;
    const auto p = leaf_params(tape, false);
    std::vector<int> targets;
    targets.reserve(noisy.size());
    for (const auto& img : noisy) targets.push_back(tape.leaf(img));
    std::vector<nn::TapeView> refs;
    refs.reserve(references.size());
    for (const auto& r : references) refs.push_back({tape.leaf(r.tokens), r.pose});
    const auto outs = build_denoiser(tape, p, targets, poses, timestep, refs);
    std::vector<TensorT<S>> result;
    result.reserve(outs.size());
    for (int n : outs) result.push_back(tape.val(n));
    return result;
  }

  template <typename T>
  DenoiserT<T> cast() const {
    return DenoiserT<T>(cfg_, store_.template cast<T>());
  }

 private:
  int id(const std::string& name) const { return store_.index_of(name); }

  static int layernorm_chw(nn::TapeT<S>& t, int x, int gamma, int beta) {
    const auto& v = t.val(x);
    const std::int64_t hh = v.dim(1), ww = v.dim(2);
    const int tok = nn::to_tokens(t, x);
    const int ln = nn::layernorm_rows(t, tok, gamma, beta);
    return nn::from_tokens(t, ln, hh, ww);
  }

  int resblock(nn::TapeT<S>& t, const std::vector<int>& p, const std::string& prefix, int x,
               int temb) const {
    int h = layernorm_chw(t, x, p[id(prefix + ".norm1.g")], p[id(prefix + ".norm1.b")]);
    h = nn::silu(t, h);
    h = nn::conv2d(t, h, p[id(prefix + ".conv1.w")], p[id(prefix + ".conv1.b")], 1, 1);
    int tproj = nn::silu(t, temb);
    tproj = nn::linear(t, tproj, p[id(prefix + ".temb.w")], p[id(prefix + ".temb.b")]);
    // [1, cout] row -> per-channel bias
    const std::int64_t cout = t.val(tproj).dim(1);
    const int tvec = nn::transpose2d(t, tproj);  // [cout, 1]
    // flatten to rank-1 for add_channel_bias
    const int tbias = reshape_rank1(t, tvec, cout);
    h = nn::add_channel_bias(t, h, tbias);
    h = layernorm_chw(t, h, p[id(prefix + ".norm2.g")], p[id(prefix + ".norm2.b")]);
    h = nn::silu(t, h);
    h = nn::conv2d(t, h, p[id(prefix + ".conv2.w")], p[id(prefix + ".conv2.b")], 1, 1);
    const std::int64_t cin = t.val(x).dim(0);
    int shortcut = x;
    if (cin != t.val(h).dim(0)) {
      shortcut = nn::conv2d(t, x, p[id(prefix + ".skip.w")], p[id(prefix + ".skip.b")], 1, 0);
    }
    return nn::add(t, h, shortcut);
  }

  static int reshape_rank1(nn::TapeT<S>& t, int x, std::int64_t n) {
    TensorT<S> out({n});
    const auto& v = t.val(x);
    std::copy(v.data.begin(), v.data.end(), out.data.begin());
    const int idn = t.emit(std::move(out), {x});
    t.set_backward(idn, [idn, x](nn::TapeT<S>& tp) {
      const auto& g = tp.grad(idn);
      auto& gx = tp.grad(x);
      for (std::int64_t i = 0; i < g.numel(); ++i) gx.at(i) += g.at(i);
    });
    return idn;
  }

  /// Self-attention across targets followed by cross-attention to the
  /// reference tokens, operating on the [C,H,W] maps as token matrices.
  void attention_pair(nn::TapeT<S>& t, const std::vector<int>& p, const std::string& prefix,
                      std::vector<int>& h, const std::vector<Pose>& poses,
                      const std::vector<nn::TapeView>& references) const {
    const std::int64_t hh = t.val(h[0]).dim(1), ww = t.val(h[0]).dim(2);
    std::vector<nn::TapeView> tokens;
    tokens.reserve(h.size());
    for (std::size_t v = 0; v < h.size(); ++v) {
      tokens.push_back({nn::to_tokens(t, h[v]), poses[v]});
    }
    auto weight_nodes = [&](const std::string& block) {
      nn::AttentionWeightNodes<S> w;
      w.wq = p[id(prefix + block + ".wq")];
      w.wk = p[id(prefix + block + ".wk")];
      w.wv = p[id(prefix + block + ".wv")];
      w.wo = p[id(prefix + block + ".wo")];
      w.ln_gamma = p[id(prefix + block + ".ln.g")];
      w.ln_beta = p[id(prefix + block + ".ln.b")];
      return w;
    };
    auto selfed = nn::self_attention_block(t, tokens, weight_nodes(".self"), cfg_.cape, cfg_.heads);
    for (std::size_t v = 0; v < h.size(); ++v) tokens[v].node = selfed[v];
    auto crossed = nn::cross_attention_block(t, tokens, references, weight_nodes(".cross"),
                                             cfg_.cape, cfg_.heads);
    for (std::size_t v = 0; v < h.size(); ++v) h[v] = nn::from_tokens(t, crossed[v], hh, ww);
  }

  // -- Parameter registration ----------------------------------------------

  TensorT<S> conv_init(Rng& rng, std::int64_t co, std::int64_t ci, int k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(ci * k * k));
    return TensorT<S>::uniform({co, ci, k, k}, rng, -bound, bound);
  }
  TensorT<S> linear_init(Rng& rng, std::int64_t in, std::int64_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return TensorT<S>::uniform({in, out}, rng, -bound, bound);
  }

  void add_resblock(Rng& rng, const std::string& prefix, int cin, int cout) {
    TensorT<S> ones({cin});
    ones.fill(S(1));
    store_.add(prefix + ".norm1.g", ones);
    store_.add(prefix + ".norm1.b", TensorT<S>({cin}));
    store_.add(prefix + ".conv1.w", conv_init(rng, cout, cin, 3));
    store_.add(prefix + ".conv1.b", TensorT<S>({cout}));
    store_.add(prefix + ".temb.w", linear_init(rng, cfg_.temb_dim(), cout));
    store_.add(prefix + ".temb.b", TensorT<S>({cout}));
    TensorT<S> ones2({cout});
    ones2.fill(S(1));
    store_.add(prefix + ".norm2.g", ones2);
    store_.add(prefix + ".norm2.b", TensorT<S>({cout}));
    store_.add(prefix + ".conv2.w", conv_init(rng, cout, cout, 3));
    store_.add(prefix + ".conv2.b", TensorT<S>({cout}));
    if (cin != cout) {
      store_.add(prefix + ".skip.w", conv_init(rng, cout, cin, 1));
      store_.add(prefix + ".skip.b", TensorT<S>({cout}));
    }
  }

  void add_attention(Rng& rng, const std::string& prefix) {
    const std::int64_t d = cfg_.token_dim;
    for (const char* block : {".self", ".cross"}) {
      store_.add(prefix + block + ".wq", linear_init(rng, d, d));
      store_.add(prefix + block + ".wk", linear_init(rng, d, d));
      store_.add(prefix + block + ".wv", linear_init(rng, d, d));
      store_.add(prefix + block + ".wo", linear_init(rng, d, d));
      TensorT<S> ones({d});
      ones.fill(S(1));
      store_.add(prefix + block + ".ln.g", ones);
      store_.add(prefix + block + ".ln.b", TensorT<S>({d}));
    }
  }

  void register_params(Rng& rng) {
    const int c = cfg_.base_channels;
    const int d = cfg_.token_dim;

    store_.add("enc.conv0.w", conv_init(rng, c, 3, 3));
    store_.add("enc.conv0.b", TensorT<S>({c}));
    store_.add("enc.conv1.w", conv_init(rng, 2 * c, c, 3));
    store_.add("enc.conv1.b", TensorT<S>({2 * c}));
    store_.add("enc.conv2.w", conv_init(rng, d, 2 * c, 3));
    store_.add("enc.conv2.b", TensorT<S>({d}));
    store_.add("enc.proj.w", linear_init(rng, d, d));
    store_.add("enc.proj.b", TensorT<S>({d}));

    store_.add("temb.fc0.w", linear_init(rng, cfg_.temb_dim(), cfg_.temb_dim()));
    store_.add("temb.fc0.b", TensorT<S>({cfg_.temb_dim()}));
    store_.add("temb.fc1.w", linear_init(rng, cfg_.temb_dim(), cfg_.temb_dim()));
    store_.add("temb.fc1.b", TensorT<S>({cfg_.temb_dim()}));

    store_.add("unet.conv_in.w", conv_init(rng, c, 3, 3));
    store_.add("unet.conv_in.b", TensorT<S>({c}));
    add_resblock(rng, "unet.rb1", c, c);
    store_.add("unet.down1.w", conv_init(rng, 2 * c, c, 3));
    store_.add("unet.down1.b", TensorT<S>({2 * c}));
    add_resblock(rng, "unet.rb2", 2 * c, 2 * c);
    add_attention(rng, "unet.attn16a");
    store_.add("unet.down2.w", conv_init(rng, 2 * c, 2 * c, 3));
    store_.add("unet.down2.b", TensorT<S>({2 * c}));
    add_resblock(rng, "unet.rb3", 2 * c, 2 * c);
    add_attention(rng, "unet.attn8");
    add_resblock(rng, "unet.rb4", 2 * c, 2 * c);
    store_.add("unet.up1.w", conv_init(rng, 2 * c, 2 * c, 3));
    store_.add("unet.up1.b", TensorT<S>({2 * c}));
    add_resblock(rng, "unet.rb5", 4 * c, 2 * c);
    add_attention(rng, "unet.attn16b");
    store_.add("unet.up2.w", conv_init(rng, c, 2 * c, 3));
    store_.add("unet.up2.b", TensorT<S>({c}));
    add_resblock(rng, "unet.rb6", 2 * c, c);
    TensorT<S> ones({c});
    ones.fill(S(1));
    store_.add("unet.out_norm.g", ones);
    store_.add("unet.out_norm.b", TensorT<S>({c}));
    // Zero-initialized output head: the untrained model predicts zero noise.
    store_.add("unet.conv_out.w", TensorT<S>({3, c, 3, 3}));
    store_.add("unet.conv_out.b", TensorT<S>({3}));
  }

  ModelConfig cfg_;
  ParamStoreT<S> store_;
};

using Denoiser = DenoiserT<float>;

/// Checkpoint serialization ("CAPEMDL1", little-endian; see README).
void save_checkpoint(const std::string& path, const DenoiserT<float>& model);
DenoiserT<float> load_checkpoint(const std::string& path);

}  // namespace cape
