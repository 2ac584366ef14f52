#include "dymo/models.h"

#include <cmath>

#include "dymo/errors.h"

namespace dymo {
namespace ad = dymo::ad;

namespace {

// sin/cos of log-SNR at geometrically spaced frequencies, as {1, n}.
Tensor level_features(double log_snr, int n) {
  Tensor f({1, n});
  const int half = n / 2;
  for (int k = 0; k < half; ++k) {
    const double freq = 0.05 * std::pow(60.0, half > 1 ? static_cast<double>(k) / (half - 1) : 0.0);
    f[static_cast<size_t>(k)] = std::sin(log_snr * freq);
    f[static_cast<size_t>(half + k)] = std::cos(log_snr * freq);
  }
  return f;
}

ad::Var linear(const ad::Var& x, const ad::Var& w, const ad::Var& b) { return ad::add_row_bias(ad::matmul(x, w), b); }

// {1, n} row to a per-channel vector {n}.
ad::Var as_vector(const ad::Var& row) { return ad::reshape(row, {row.shape()[1]}); }

void add_conv(ParameterStore& ps, const std::string& name, int out, int in, int k, std::mt19937_64& rng, double gain = 2.0) {
  ps.add(name + ".w", init_normal({out, in, k, k}, in * k * k, rng, gain));
  ps.add(name + ".b", Tensor({out}));
}

void add_linear(ParameterStore& ps, const std::string& name, int in, int out, std::mt19937_64& rng, double gain = 2.0) {
  ps.add(name + ".w", init_normal({in, out}, in, rng, gain));
  ps.add(name + ".b", Tensor({out}));
}

ad::Var conv(const ad::Var& x, const BoundParams& p, const std::string& name) {
  return ad::conv2d(x, p[name + ".w"], p[name + ".b"]);
}

ad::Var dense(const ad::Var& x, const BoundParams& p, const std::string& name) {
  return linear(x, p[name + ".w"], p[name + ".b"]);
}

std::vector<int> padded_tokens(const TextEncoding& text, int max_tokens) {
  if (text.length() > max_tokens) throw InputError("text has more tokens than the model supports");
  std::vector<int> ids(static_cast<size_t>(max_tokens), Vocabulary::kPad);
  for (int i = 0; i < text.length(); ++i) ids[static_cast<size_t>(i)] = text.tokens[static_cast<size_t>(i)];
  return ids;
}

void check_vocab(const TextEncoding& text, const Vocabulary& vocab) {
  for (int id : text.tokens) {
    if (id < 0 || id >= vocab.size()) throw InputError("token id outside the model vocabulary");
  }
}

}  // namespace

double noise_level(const NoiseSchedule& schedule, int t) { return t == 0 ? kCleanLogSnr : schedule.log_snr(t); }

// --- configs -------------------------------------------------------------

nlohmann::json DenoiserConfig::to_json() const {
  return {{"version", version},       {"image_channels", image_channels}, {"c1", c1},
          {"c2", c2},                 {"c3", c3},                         {"heads", heads},
          {"attention_blocks", attention_blocks}, {"d_text", d_text},     {"max_tokens", max_tokens},
          {"time_features", time_features},       {"time_dim", time_dim},   {"res_convs", res_convs},
          {"self_attention", self_attention}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.version = j.at("version");
  c.image_channels = j.at("image_channels");
  c.c1 = j.at("c1");
  c.c2 = j.at("c2");
  c.c3 = j.at("c3");
  c.heads = j.at("heads");
  c.attention_blocks = j.at("attention_blocks");
  c.d_text = j.at("d_text");
  c.max_tokens = j.at("max_tokens");
  c.time_features = j.at("time_features");
  c.time_dim = j.at("time_dim");
  c.res_convs = j.value("res_convs", false);
  c.self_attention = j.value("self_attention", false);
  return c;
}

nlohmann::json ScorerConfig::to_json() const {
  return {{"version", version}, {"c1", c1},         {"c2", c2},
          {"c3", c3},           {"embed", embed},   {"d_text", d_text},
          {"max_tokens", max_tokens}, {"time_features", time_features}, {"tau", tau}};
}

ScorerConfig ScorerConfig::from_json(const nlohmann::json& j) {
  ScorerConfig c;
  c.version = j.at("version");
  c.c1 = j.at("c1");
  c.c2 = j.at("c2");
  c.c3 = j.at("c3");
  c.embed = j.at("embed");
  c.d_text = j.at("d_text");
  c.max_tokens = j.at("max_tokens");
  c.time_features = j.at("time_features");
  c.tau = j.at("tau");
  return c;
}

// --- attention -------------------------------------------------------------

Tensor AttentionBundle::map(int u) const {
  if (u < 0 || u >= tokens) throw InputError("token index outside the attention bundle");
  const Tensor& m = maps.value();
  Tensor out({height, width});
  for (int p = 0; p < height * width; ++p) out[static_cast<size_t>(p)] = m[static_cast<size_t>(p * tokens + u)];
  return out;
}

ad::Var token_attention_map(const AttentionBundle& bundle, std::span<const int> token_indices, int text_length) {
  std::vector<ad::Var> cols;
  for (int u : token_indices) {
    if (u < 0 || u >= bundle.tokens) throw InputError("token index " + std::to_string(u) + " outside the attention bundle");
    if (u >= text_length) continue;
    cols.push_back(ad::reshape(ad::slice_cols(bundle.maps, u, 1), {bundle.height * bundle.width}));
  }
  if (cols.empty()) throw InputError("token_attention_map: selection contains no text tokens");
  if (cols.size() == 1) return cols.front();
  const ad::Var m = ad::mean_of(cols);
  return ad::div_scalar(m, ad::sum(m));
}

// --- denoiser --------------------------------------------------------------

ToyDenoiser::ToyDenoiser(DenoiserConfig config, Vocabulary vocab, uint64_t init_seed)
    : cfg_(config), vocab_(std::move(vocab)) {
  if (cfg_.c3 % cfg_.heads != 0) throw ConfigError("c3 must be divisible by heads");
  if (cfg_.time_features % 2 != 0) throw ConfigError("time_features must be even");
  std::mt19937_64 rng(init_seed);
  const int d = cfg_.c3, dt = cfg_.d_text;
  ParameterStore& ps = params_;
  ps.add("tok_emb", init_normal({vocab_.size(), dt}, 1, rng, 0.25));
  ps.add("pos_emb", init_normal({cfg_.max_tokens, dt}, 1, rng, 0.01));
  add_linear(ps, "text_ctx", 3 * dt, dt, rng, 1.0);
  add_linear(ps, "time1", cfg_.time_features, cfg_.time_dim, rng);
  add_linear(ps, "time2", cfg_.time_dim, cfg_.time_dim, rng);
  add_linear(ps, "tproj1", cfg_.time_dim, cfg_.c1, rng, 0.5);
  add_linear(ps, "tproj2", cfg_.time_dim, cfg_.c2, rng, 0.5);
  add_linear(ps, "tproj3", cfg_.time_dim, cfg_.c3, rng, 0.5);
  add_linear(ps, "tproj4", cfg_.time_dim, cfg_.c2, rng, 0.5);
  add_linear(ps, "tproj5", cfg_.time_dim, cfg_.c1, rng, 0.5);
  add_conv(ps, "enc1", cfg_.c1, cfg_.image_channels, 3, rng);
  add_conv(ps, "enc2", cfg_.c2, cfg_.c1, 3, rng);
  add_conv(ps, "enc3", cfg_.c3, cfg_.c2, 3, rng);
  if (cfg_.res_convs) {
    add_conv(ps, "enc1r", cfg_.c1, cfg_.c1, 3, rng, 0.5);
    add_conv(ps, "enc2r", cfg_.c2, cfg_.c2, 3, rng, 0.5);
    add_conv(ps, "enc3r", cfg_.c3, cfg_.c3, 3, rng, 0.5);
  }
  for (int b = 0; b < cfg_.attention_blocks; ++b) {
    const std::string n = "attn" + std::to_string(b);
    if (cfg_.self_attention) {
      ps.add(n + ".sq", init_normal({d, d}, d, rng, 1.0));
      ps.add(n + ".sk", init_normal({d, d}, d, rng, 1.0));
      ps.add(n + ".sv", init_normal({d, d}, d, rng, 1.0));
      ps.add(n + ".so", init_normal({d, d}, d, rng, 0.5));
    }
    ps.add(n + ".q", init_normal({d, d}, d, rng, 1.0));
    ps.add(n + ".k", init_normal({dt, d}, dt, rng, 1.0));
    ps.add(n + ".v", init_normal({dt, d}, dt, rng, 1.0));
    ps.add(n + ".o", init_normal({d, d}, d, rng, 0.5));
    add_linear(ps, n + ".mlp1", d, 2 * d, rng);
    add_linear(ps, n + ".mlp2", 2 * d, d, rng, 0.5);
  }
  add_conv(ps, "up2", cfg_.c2, cfg_.c3, 1, rng);
  add_conv(ps, "dec2", cfg_.c2, cfg_.c2, 3, rng);
  add_conv(ps, "up1", cfg_.c1, cfg_.c2, 1, rng);
  add_conv(ps, "dec1", cfg_.c1, cfg_.c1, 3, rng);
  if (cfg_.res_convs) {
    add_conv(ps, "dec2r", cfg_.c2, cfg_.c2, 3, rng, 0.5);
    add_conv(ps, "dec1r", cfg_.c1, cfg_.c1, 3, rng, 0.5);
  }
  add_conv(ps, "out", cfg_.image_channels, cfg_.c1, 3, rng, 0.1);
}

ad::Var ToyDenoiser::text_embeddings(ad::Tape&, const TextEncoding& text, const BoundParams& p) const {
  check_vocab(text, vocab_);
  const int L = cfg_.max_tokens;
  const std::vector<int> ids = padded_tokens(text, L);
  std::vector<int> prev(static_cast<size_t>(L)), next(static_cast<size_t>(L)), pos(static_cast<size_t>(L));
  for (int i = 0; i < L; ++i) {
    prev[static_cast<size_t>(i)] = i > 0 ? i - 1 : -1;
    next[static_cast<size_t>(i)] = i + 1 < L ? i + 1 : -1;
    pos[static_cast<size_t>(i)] = i;
  }
  const ad::Var e = ad::gather_rows(p["tok_emb"], ids) + ad::gather_rows(p["pos_emb"], pos);
  const ad::Var parts[3] = {ad::gather_rows(e, prev), e, ad::gather_rows(e, next)};
  return e + ad::tanh(dense(ad::concat_cols(parts), p, "text_ctx"));
}

ad::Var ToyDenoiser::time_embedding(ad::Tape& tape, double log_snr, const BoundParams& p) const {
  const ad::Var f = tape.constant(level_features(log_snr, cfg_.time_features));
  return ad::silu(dense(ad::silu(dense(f, p, "time1")), p, "time2"));
}

NoiseOutput ToyDenoiser::predict_noise(const ad::Var& z, double log_snr, const TextEncoding& text,
                                       const BoundParams& p) const {
  if (z.shape().size() != 3 || z.shape()[0] != cfg_.image_channels || z.shape()[1] % 4 != 0 ||
      z.shape()[2] % 4 != 0) {
    throw InputError("denoiser input must be {" + std::to_string(cfg_.image_channels) +
                     ", H, W} with H, W divisible by 4; got " + z.value().shape_string());
  }
  ad::Tape& tape = *z.tape();
  const int H = z.shape()[1], W = z.shape()[2];
  const int h3 = H / 4, w3 = W / 4, P = h3 * w3;
  const int d = cfg_.c3, dh = d / cfg_.heads, L = cfg_.max_tokens;

  const ad::Var temb = time_embedding(tape, log_snr, p);
  const ad::Var text_emb = text_embeddings(tape, text, p);
  auto tbias = [&](const ad::Var& x, const std::string& name) {
    return ad::add_channel_bias(x, as_vector(dense(temb, p, name)));
  };

  auto res = [&](const ad::Var& x, const std::string& name) {
    return cfg_.res_convs ? x + ad::silu(conv(x, p, name)) : x;
  };
  const ad::Var e1 = res(ad::silu(tbias(conv(z, p, "enc1"), "tproj1")), "enc1r");
  const ad::Var e2 = res(ad::silu(tbias(conv(ad::avg_pool2(e1), p, "enc2"), "tproj2")), "enc2r");
  ad::Var e3 = res(ad::silu(tbias(conv(ad::avg_pool2(e2), p, "enc3"), "tproj3")), "enc3r");

  std::vector<char> mask(static_cast<size_t>(L), 0);
  for (int i = 0; i < text.length(); ++i) mask[static_cast<size_t>(i)] = 1;

  std::vector<ad::Var> head_maps;
  AttentionBundle bundle;
  ad::Var x = ad::transpose(ad::reshape(e3, {d, P}));  // {P, d}
  for (int b = 0; b < cfg_.attention_blocks; ++b) {
    const std::string n = "attn" + std::to_string(b);
    if (cfg_.self_attention) {
      const ad::Var sq = ad::matmul(x, p[n + ".sq"]);
      const ad::Var sk = ad::matmul(x, p[n + ".sk"]);
      const ad::Var sv = ad::matmul(x, p[n + ".sv"]);
      std::vector<ad::Var> sheads;
      for (int h = 0; h < cfg_.heads; ++h) {
        const ad::Var logits = ad::scale(
            ad::matmul(ad::slice_cols(sq, h * dh, dh), ad::transpose(ad::slice_cols(sk, h * dh, dh))),
            1.0 / std::sqrt(static_cast<double>(dh)));  // {P, P}
        sheads.push_back(ad::matmul(ad::softmax_rows(logits), ad::slice_cols(sv, h * dh, dh)));
      }
      x = x + ad::matmul(ad::concat_cols(sheads), p[n + ".so"]);
    }
    const ad::Var q = ad::matmul(x, p[n + ".q"]);
    const ad::Var k = ad::matmul(text_emb, p[n + ".k"]);
    const ad::Var v = ad::matmul(text_emb, p[n + ".v"]);
    std::vector<ad::Var> heads;
    for (int h = 0; h < cfg_.heads; ++h) {
      const ad::Var logits = ad::scale(
          ad::matmul(ad::slice_cols(q, h * dh, dh), ad::transpose(ad::slice_cols(k, h * dh, dh))),
          1.0 / std::sqrt(static_cast<double>(dh)));  // {P, L}
      heads.push_back(ad::matmul(ad::softmax_rows(logits, mask), ad::slice_cols(v, h * dh, dh)));
      head_maps.push_back(ad::softmax_cols(logits));
    }
    x = x + ad::matmul(ad::concat_cols(heads), p[n + ".o"]);
    x = x + dense(ad::silu(dense(x, p, n + ".mlp1")), p, n + ".mlp2");
    bundle.layer_ids.push_back(b);
  }
  e3 = ad::reshape(ad::transpose(x), {d, h3, w3});

  const ad::Var u2 = ad::upsample2(conv(e3, p, "up2")) + e2;
  const ad::Var d2 = res(ad::silu(tbias(conv(u2, p, "dec2"), "tproj4")), "dec2r");
  const ad::Var u1 = ad::upsample2(conv(d2, p, "up1")) + e1;
  const ad::Var d1 = res(ad::silu(tbias(conv(u1, p, "dec1"), "tproj5")), "dec1r");

  bundle.maps = ad::mean_of(head_maps);
  bundle.height = h3;
  bundle.width = w3;
  bundle.tokens = L;
  bundle.head_count = cfg_.heads;
  return {conv(d1, p, "out"), bundle};
}

Checkpoint ToyDenoiser::to_checkpoint() const {
  Checkpoint c;
  c.kind = "denoiser";
  c.config = cfg_.to_json();
  c.vocabulary = vocab_.to_json();
  c.metadata = nlohmann::json::object();
  c.params = params_;
  return c;
}

ToyDenoiser ToyDenoiser::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "denoiser") throw FormatError("checkpoint holds a " + ckpt.kind + ", expected a denoiser");
  ToyDenoiser m(DenoiserConfig::from_json(ckpt.config), Vocabulary::from_json(ckpt.vocabulary), 0);
  if (m.params_.count() != ckpt.params.count()) throw FormatError("denoiser checkpoint parameter count mismatch");
  for (int i = 0; i < m.params_.count(); ++i) {
    if (m.params_.name(i) != ckpt.params.name(i) || !m.params_.value(i).same_shape(ckpt.params.value(i))) {
      throw FormatError("denoiser checkpoint parameter " + ckpt.params.name(i) + " does not match the architecture");
    }
    m.params_.value(i) = ckpt.params.value(i);
  }
  return m;
}

ScoreOutput denoise(const ad::Var& z_t, int t, const TextEncoding& text, const ToyDenoiser& model,
                    const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps()) throw IndexError("denoise: t = " + std::to_string(t) + " outside [1, T]");
  const BoundParams p(*z_t.tape(), model.params(), false);
  NoiseOutput out = model.predict_noise(z_t, schedule.log_snr(t), text, p);
  const ad::Var score = score_from_noise(out.eps, t, schedule);
  return {out.eps, score, std::move(out.attention)};
}

ad::Var decode(const ad::Var& z0_pred) { return ad::clamp(z0_pred, -1.0, 1.0); }

Tensor decode(const Tensor& z0_pred) {
  Tensor out = z0_pred;
  for (double& v : out.data()) v = std::clamp(v, -1.0, 1.0);
  return out;
}

// --- scorer ----------------------------------------------------------------

PreferenceScorer::PreferenceScorer(ScorerConfig config, Vocabulary vocab, uint64_t init_seed)
    : cfg_(config), vocab_(std::move(vocab)) {
  if (cfg_.tau <= 0) throw ConfigError("tau must be positive");
  if (cfg_.time_features % 2 != 0) throw ConfigError("time_features must be even");
  std::mt19937_64 rng(init_seed);
  ParameterStore& ps = params_;
  add_conv(ps, "v1", cfg_.c1, 3, 3, rng);
  add_conv(ps, "v2", cfg_.c2, cfg_.c1, 3, rng);
  add_conv(ps, "v3", cfg_.c3, cfg_.c2, 3, rng);
  add_linear(ps, "vt1", cfg_.time_features, cfg_.c1, rng, 0.5);
  add_linear(ps, "vt2", cfg_.time_features, cfg_.c2, rng, 0.5);
  add_linear(ps, "vproj", cfg_.c3, cfg_.embed, rng, 1.0);
  ps.add("t_uni", init_normal({vocab_.size(), cfg_.d_text}, 1, rng, 0.25));
  ps.add("t_prev", init_normal({vocab_.size(), cfg_.d_text}, 1, rng, 0.25));
  add_linear(ps, "tproj", cfg_.d_text, cfg_.embed, rng, 1.0);
}

ad::Var PreferenceScorer::vision(const ad::Var& image, double log_snr, const BoundParams& p) const {
  if (image.shape().size() != 3 || image.shape()[0] != 3 || image.shape()[1] % 4 != 0 || image.shape()[2] % 4 != 0) {
    throw InputError("scorer image must be {3, H, W} with H, W divisible by 4; got " + image.value().shape_string());
  }
  ad::Tape& tape = *image.tape();
  const ad::Var f = tape.constant(level_features(log_snr, cfg_.time_features));
  auto tbias = [&](const ad::Var& x, const std::string& name) {
    return ad::add_channel_bias(x, as_vector(dense(f, p, name)));
  };
  const ad::Var h1 = ad::avg_pool2(ad::silu(tbias(conv(image, p, "v1"), "vt1")));
  const ad::Var h2 = ad::avg_pool2(ad::silu(tbias(conv(h1, p, "v2"), "vt2")));
  const ad::Var h3 = ad::silu(conv(h2, p, "v3"));
  const ad::Var pooled = ad::reshape(ad::spatial_mean(h3), {1, cfg_.c3});
  return ad::normalize(ad::reshape(dense(pooled, p, "vproj"), {cfg_.embed}));
}

ad::Var PreferenceScorer::text(ad::Tape& tape, const TextEncoding& text, const BoundParams& p) const {
  check_vocab(text, vocab_);
  const int n = text.length();
  std::vector<int> prev(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) prev[static_cast<size_t>(i)] = i > 0 ? text.tokens[static_cast<size_t>(i - 1)] : -1;
  const ad::Var h = ad::tanh(ad::gather_rows(p["t_uni"], text.tokens) + ad::gather_rows(p["t_prev"], prev));
  const ad::Var ones = tape.constant(Tensor({1, n}, 1.0));
  return ad::normalize(ad::reshape(dense(ad::matmul(ones, h), p, "tproj"), {cfg_.embed}));
}

Checkpoint PreferenceScorer::to_checkpoint() const {
  Checkpoint c;
  c.kind = "scorer";
  c.config = cfg_.to_json();
  c.vocabulary = vocab_.to_json();
  c.metadata = nlohmann::json::object();
  c.params = params_;
  return c;
}

PreferenceScorer PreferenceScorer::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "scorer") throw FormatError("checkpoint holds a " + ckpt.kind + ", expected a scorer");
  PreferenceScorer m(ScorerConfig::from_json(ckpt.config), Vocabulary::from_json(ckpt.vocabulary), 0);
  if (m.params_.count() != ckpt.params.count()) throw FormatError("scorer checkpoint parameter count mismatch");
  for (int i = 0; i < m.params_.count(); ++i) {
    if (m.params_.name(i) != ckpt.params.name(i) || !m.params_.value(i).same_shape(ckpt.params.value(i))) {
      throw FormatError("scorer checkpoint parameter " + ckpt.params.name(i) + " does not match the architecture");
    }
    m.params_.value(i) = ckpt.params.value(i);
  }
  return m;
}

ad::Var preference_cosine(const ad::Var& image, double log_snr, const TextEncoding& text,
                          const PreferenceScorer& scorer) {
  ad::Tape& tape = *image.tape();
  const BoundParams p(tape, scorer.params(), false);
  return ad::dot(scorer.vision(image, log_snr, p), scorer.text(tape, text, p));
}

double preference_score(const Tensor& image, const std::string& prompt, double log_snr,
                        const PreferenceScorer& scorer) {
  ad::Tape tape;
  const ad::Var c = preference_cosine(tape.constant(image), log_snr, scorer.encode(prompt), scorer);
  return std::exp(scorer.tau() * c.value().item());
}

}  // namespace dymo
