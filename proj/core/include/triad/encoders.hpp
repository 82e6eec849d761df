#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "triad/corpus.hpp"
#include "triad/nn.hpp"

namespace triad::enc {

struct EncoderConfig {
  std::size_t latent_dim = 256;    // D, shared across the three encoders
  std::size_t audio_frames = 256;  // T_a
  std::size_t audio_bands = 48;    // F_a
  std::size_t conv_blocks = 7;     // Z
  std::size_t conv_channels = 128; // C_z, uniform across blocks
  std::size_t kernel = 3;          // K
  std::size_t ff_hidden = 512;     // H_ff
  std::size_t genre_dim = 200;     // F_w
  std::size_t genre_len = 10;      // T_w
  std::size_t attn_heads = 4;
  std::size_t cf_dim = 300;        // F_cf
  std::size_t cf_hidden = 512;     // H_cf
  double dropout = 0.5;
  double bn_momentum = 0.1;
  double norm_eps = 1e-5;
  // Per-block (time, freq) pooling windows; empty derives the default:
  // time always halves, freq halves while it stays even.
  std::vector<std::array<std::size_t, 2>> pooling;

  std::vector<std::array<std::size_t, 2>> pooling_schedule() const;
  // Spatial (T', F') after the full conv stack.
  std::array<std::size_t, 2> conv_output_shape() const;
};

// Audio encoder: Z conv blocks (conv -> batch norm -> ReLU -> max pool)
// followed by the feed-forward block
// (linear -> batch norm -> ReLU -> dropout -> linear -> layer norm).
class AudioEncoder {
 public:
  AudioEncoder(const EncoderConfig& cfg, Rng& rng);

  // chunks: [N, T_a, F_a]; returns [N, D].
  Tensor forward(const Tensor& chunks, nn::Mode mode, Rng* rng);
  void backward(const Tensor& dphi);
  void collect(std::vector<nn::Param*>& out);
  void collect_state(const std::string& prefix, std::vector<std::pair<std::string, Tensor*>>& out);
  std::size_t flat_dim() const { return flat_dim_; }

 private:
  EncoderConfig cfg_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::BatchNorm> bns_;
  std::vector<nn::ReLU> relus_;
  std::vector<nn::MaxPool2d> pools_;
  nn::Linear ff1_, ff2_;
  nn::BatchNorm ff_bn_;
  nn::ReLU ff_relu_;
  nn::Dropout ff_dropout_;
  nn::LayerNorm ln_;
  std::size_t flat_dim_ = 0;
  std::size_t cached_n_ = 0;
};

// Genre encoder: masked multi-head self-attention, feed-forward with skip
// connection and dropout, masked sum over positions, layer norm.
class GenreEncoder {
 public:
  GenreEncoder(const EncoderConfig& cfg, Rng& rng);

  // seqs: [N, T_w, F_w], mask: N*T_w; returns [N, D].
  Tensor forward(const Tensor& seqs, const std::vector<std::uint8_t>& mask, nn::Mode mode, Rng* rng);
  void backward(const Tensor& dphi);
  void collect(std::vector<nn::Param*>& out);
  void collect_state(const std::string& prefix, std::vector<std::pair<std::string, Tensor*>>& out);
  const nn::MultiHeadSelfAttention& attention() const { return attn_; }

 private:
  EncoderConfig cfg_;
  nn::MultiHeadSelfAttention attn_;
  nn::Linear ff_;
  nn::Dropout dropout_;
  nn::LayerNorm ln_;
  std::vector<std::uint8_t> cached_mask_;
  std::size_t cached_n_ = 0;
};

// Playlist-association encoder: linear -> ReLU -> dropout -> linear -> layer norm.
class CfEncoder {
 public:
  CfEncoder(const EncoderConfig& cfg, Rng& rng);

  // x: [N, F_cf]; returns [N, D].
  Tensor forward(const Tensor& x, nn::Mode mode, Rng* rng);
  void backward(const Tensor& dphi);
  void collect(std::vector<nn::Param*>& out);
  void collect_state(const std::string& prefix, std::vector<std::pair<std::string, Tensor*>>& out);

 private:
  nn::Linear ff1_, ff2_;
  nn::ReLU relu_;
  nn::Dropout dropout_;
  nn::LayerNorm ln_;
};

enum class ModelKind { kContrCfG, kContrG, kContrCf, kBlineG, kBlineCf, kBlineCfG };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& name);
bool is_baseline(ModelKind kind);
bool uses_genre_encoder(ModelKind kind);
bool uses_cf_encoder(ModelKind kind);
bool uses_genre_head(ModelKind kind);
bool uses_cf_head(ModelKind kind);
// Whether training this model kind needs CF factors at all.
bool needs_cf_factors(ModelKind kind);

// The trainable bundle for one model kind: the audio encoder always, plus the
// companion encoders (contrastive kinds) or prediction heads (baselines).
struct Model {
  EncoderConfig cfg;
  ModelKind kind = ModelKind::kContrCfG;
  std::unique_ptr<AudioEncoder> audio;
  std::unique_ptr<GenreEncoder> genre;
  std::unique_ptr<CfEncoder> cf;
  std::unique_ptr<nn::Linear> head_genre;  // D -> 219, logistic outputs
  std::unique_ptr<nn::Linear> head_cf;     // D -> F_cf

  static Model create(const EncoderConfig& cfg, ModelKind kind, std::uint64_t seed);

  std::vector<nn::Param*> params();
  // Every tensor a checkpoint must carry: params plus batch-norm buffers.
  std::vector<std::pair<std::string, Tensor*>> state();
  void zero_grads();
};

void save_checkpoint(Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace triad::enc
