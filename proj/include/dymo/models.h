#ifndef DYMO_MODELS_H_
#define DYMO_MODELS_H_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dymo/autodiff.h"
#include "dymo/diffusion.h"
#include "dymo/nn.h"
#include "dymo/text.h"

namespace dymo {

// Noise-level feature for clean images (t = 0), where log-SNR is infinite.
inline constexpr double kCleanLogSnr = 12.0;

// log-SNR of step t, with t = 0 mapped to kCleanLogSnr.
double noise_level(const NoiseSchedule& schedule, int t);

struct DenoiserConfig {
  int version = 1;
  int image_channels = 3;
  int c1 = 16;
  int c2 = 32;
  int c3 = 64;  // attention feature dimension d
  int heads = 4;
  int attention_blocks = 2;
  int d_text = 64;
  int max_tokens = 16;
  int time_features = 16;
  int time_dim = 64;
  // Extra residual 3x3 conv per resolution level, and spatial self-attention
  // ahead of each text cross-attention. Checkpoints without these keys load
  // with both off.
  bool res_convs = true;
  bool self_attention = true;

  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

// Per-token spatial attention maps. `maps` is {H*W, max_tokens}; column u is
// the map of token position u (padding included), softmax-normalised over
// space per head and averaged over heads and blocks, so it sums to 1.
struct AttentionBundle {
  ad::Var maps;
  int height = 0;
  int width = 0;
  int tokens = 0;
  std::vector<int> layer_ids;
  int head_count = 0;

  // Map of token u as {H, W}.
  Tensor map(int u) const;
};

// Mean of the selected token maps, renormalised to sum 1. Throws InputError
// when the selection is empty or only covers padding (positions >= text_length).
ad::Var token_attention_map(const AttentionBundle& bundle, std::span<const int> token_indices, int text_length);

struct NoiseOutput {
  ad::Var eps;
  AttentionBundle attention;
};

class ToyDenoiser {
 public:
  ToyDenoiser(DenoiserConfig config, Vocabulary vocab, uint64_t init_seed);

  const DenoiserConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  TextEncoding encode(const std::string& prompt) const { return encode_text(prompt, vocab_, cfg_.max_tokens); }

  // Noise prediction for z {C, H, W} (H, W divisible by 4) on z's tape.
  NoiseOutput predict_noise(const ad::Var& z, double log_snr, const TextEncoding& text, const BoundParams& p) const;

  Checkpoint to_checkpoint() const;
  static ToyDenoiser from_checkpoint(const Checkpoint& ckpt);

 private:
  ad::Var text_embeddings(ad::Tape& tape, const TextEncoding& text, const BoundParams& p) const;
  ad::Var time_embedding(ad::Tape& tape, double log_snr, const BoundParams& p) const;

  DenoiserConfig cfg_;
  Vocabulary vocab_;
  ParameterStore params_;
};

struct ScoreOutput {
  ad::Var eps;
  ad::Var score;
  AttentionBundle attention;
};

// Runs the model with weights as constants on z_t's tape and converts the
// noise prediction to a score, -eps / sigma_t.
ScoreOutput denoise(const ad::Var& z_t, int t, const TextEncoding& text, const ToyDenoiser& model,
                    const NoiseSchedule& schedule);

// Identity with clamping to [-1, 1].
ad::Var decode(const ad::Var& z0_pred);
Tensor decode(const Tensor& z0_pred);

struct ScorerConfig {
  int version = 1;
  int c1 = 16;
  int c2 = 32;
  int c3 = 48;
  int embed = 32;
  int d_text = 48;
  int max_tokens = 16;
  int time_features = 16;
  double tau = 10.0;

  nlohmann::json to_json() const;
  static ScorerConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ScorerConfig&, const ScorerConfig&) = default;
};

class PreferenceScorer {
 public:
  PreferenceScorer(ScorerConfig config, Vocabulary vocab, uint64_t init_seed);

  const ScorerConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  double tau() const { return cfg_.tau; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  TextEncoding encode(const std::string& prompt) const { return encode_text(prompt, vocab_, cfg_.max_tokens); }

  // Unit vectors.
  ad::Var vision(const ad::Var& image, double log_snr, const BoundParams& p) const;
  ad::Var text(ad::Tape& tape, const TextEncoding& text, const BoundParams& p) const;

  Checkpoint to_checkpoint() const;
  static PreferenceScorer from_checkpoint(const Checkpoint& ckpt);

 private:
  ScorerConfig cfg_;
  Vocabulary vocab_;
  ParameterStore params_;
};

// cos(f_V(image, t), f_T(prompt)) with weights bound as constants on image's tape.
ad::Var preference_cosine(const ad::Var& image, double log_snr, const TextEncoding& text,
                          const PreferenceScorer& scorer);

// exp(tau * cos).
double preference_score(const Tensor& image, const std::string& prompt, double log_snr,
                        const PreferenceScorer& scorer);

}  // namespace dymo

#endif  // DYMO_MODELS_H_
