#include "triad/encoders.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

using nlohmann::json;

namespace triad::enc {

std::vector<std::array<std::size_t, 2>> EncoderConfig::pooling_schedule() const {
  if (!pooling.empty()) {
    if (pooling.size() != conv_blocks) {
      throw std::invalid_argument("encoder config: pooling schedule length != conv_blocks");
    }
    return pooling;
  }
  std::vector<std::array<std::size_t, 2>> schedule;
  std::size_t f = audio_bands;
  for (std::size_t z = 0; z < conv_blocks; ++z) {
    const std::size_t pf = (f % 2 == 0 && f >= 2) ? 2 : 1;
    schedule.push_back({2, pf});
    f /= pf;
  }
  return schedule;
}

std::array<std::size_t, 2> EncoderConfig::conv_output_shape() const {
  std::size_t t = audio_frames, f = audio_bands;
  for (const auto& [pt, pf] : pooling_schedule()) {
    if (t < pt || f < pf) throw std::invalid_argument("encoder config: pooling exhausts the input");
    t /= pt;
    f /= pf;
  }
  return {t, f};
}

// ---------------------------------------------------------------------------
// AudioEncoder

AudioEncoder::AudioEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  const auto schedule = cfg.pooling_schedule();
  std::size_t in_ch = 1;
  for (std::size_t z = 0; z < cfg.conv_blocks; ++z) {
    const std::string block = "block" + std::to_string(z + 1);
    convs_.emplace_back(block + ".conv", in_ch, cfg.conv_channels, cfg.kernel, rng);
    bns_.emplace_back(block + ".bn", cfg.conv_channels, cfg.bn_momentum, cfg.norm_eps);
    relus_.emplace_back();
    pools_.emplace_back(schedule[z][0], schedule[z][1]);
    in_ch = cfg.conv_channels;
  }
  const auto [t_out, f_out] = cfg.conv_output_shape();
  flat_dim_ = cfg.conv_channels * t_out * f_out;
  ff1_ = nn::Linear("ff1", flat_dim_, cfg.ff_hidden, rng);
  ff_bn_ = nn::BatchNorm("ffbn", cfg.ff_hidden, cfg.bn_momentum, cfg.norm_eps);
  ff_dropout_.set_p(cfg.dropout);
  ff2_ = nn::Linear("ff2", cfg.ff_hidden, cfg.latent_dim, rng);
  ln_ = nn::LayerNorm("ln", cfg.latent_dim, cfg.norm_eps);
}

Tensor AudioEncoder::forward(const Tensor& chunks, nn::Mode mode, Rng* rng) {
  if (chunks.rank() != 3 || chunks.dim(1) != cfg_.audio_frames || chunks.dim(2) != cfg_.audio_bands) {
    throw std::invalid_argument("audio encoder: expected [N, " + std::to_string(cfg_.audio_frames) +
                                ", " + std::to_string(cfg_.audio_bands) + "] input, got " +
                                shape_string(chunks));
  }
  const std::size_t n = chunks.dim(0);
  cached_n_ = n;
  Tensor h({n, 1, cfg_.audio_frames, cfg_.audio_bands}, chunks.vec());
  for (std::size_t z = 0; z < convs_.size(); ++z) {
    h = convs_[z].forward(h, mode);
    h = bns_[z].forward(h, mode);
    h = relus_[z].forward(h, mode);
    h = pools_[z].forward(h, mode);
  }
  h.reshape({n, flat_dim_});
  h = ff1_.forward(h, mode);
  h = ff_bn_.forward(h, mode);
  h = ff_relu_.forward(h, mode);
  h = ff_dropout_.forward(h, mode, rng);
  h = ff2_.forward(h, mode);
  return ln_.forward(h, mode);
}

void AudioEncoder::backward(const Tensor& dphi) {
  Tensor d = ln_.backward(dphi);
  d = ff2_.backward(d);
  d = ff_dropout_.backward(d);
  d = ff_relu_.backward(d);
  d = ff_bn_.backward(d);
  d = ff1_.backward(d);
  const auto [t_out, f_out] = cfg_.conv_output_shape();
  d.reshape({cached_n_, cfg_.conv_channels, t_out, f_out});
  for (std::size_t z = convs_.size(); z-- > 0;) {
    d = pools_[z].backward(d);
    d = relus_[z].backward(d);
    d = bns_[z].backward(d);
    d = convs_[z].backward(d);
  }
}

void AudioEncoder::collect(std::vector<nn::Param*>& out) {
  for (std::size_t z = 0; z < convs_.size(); ++z) {
    convs_[z].collect(out);
    bns_[z].collect(out);
  }
  ff1_.collect(out);
  ff_bn_.collect(out);
  ff2_.collect(out);
  ln_.collect(out);
}

void AudioEncoder::collect_state(const std::string& prefix,
                                 std::vector<std::pair<std::string, Tensor*>>& out) {
  std::vector<nn::Param*> ps;
  collect(ps);
  for (auto* p : ps) out.emplace_back(prefix + p->name, &p->value);
  for (auto& bn : bns_) {
    out.emplace_back(prefix + bn.name() + ".running_mean", &bn.running_mean());
    out.emplace_back(prefix + bn.name() + ".running_var", &bn.running_var());
  }
  out.emplace_back(prefix + "ffbn.running_mean", &ff_bn_.running_mean());
  out.emplace_back(prefix + "ffbn.running_var", &ff_bn_.running_var());
}

// ---------------------------------------------------------------------------
// GenreEncoder

GenreEncoder::GenreEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  attn_ = nn::MultiHeadSelfAttention("attn", cfg.genre_dim, cfg.latent_dim, cfg.attn_heads, rng);
  ff_ = nn::Linear("ff", cfg.latent_dim, cfg.latent_dim, rng);
  dropout_.set_p(cfg.dropout);
  ln_ = nn::LayerNorm("ln", cfg.latent_dim, cfg.norm_eps);
}

Tensor GenreEncoder::forward(const Tensor& seqs, const std::vector<std::uint8_t>& mask,
                             nn::Mode mode, Rng* rng) {
  if (seqs.rank() != 3 || seqs.dim(1) != cfg_.genre_len || seqs.dim(2) != cfg_.genre_dim) {
    throw std::invalid_argument("genre encoder: expected [N, " + std::to_string(cfg_.genre_len) +
                                ", " + std::to_string(cfg_.genre_dim) + "] input, got " +
                                shape_string(seqs));
  }
  const std::size_t n = seqs.dim(0), t_len = cfg_.genre_len, d = cfg_.latent_dim;
  cached_n_ = n;
  cached_mask_ = mask;

  Tensor vprime = attn_.forward(seqs, mask, mode);
  Tensor f = nn::linear3_forward(ff_, vprime, mode);
  f.reshape({n * t_len, d});
  f = dropout_.forward(f, mode, rng);
  f.reshape({n, t_len, d});

  Tensor summed({n, d});
  for (std::size_t b = 0; b < n; ++b) {
    double* out = summed.data() + b * d;
    for (std::size_t t = 0; t < t_len; ++t) {
      if (!mask[b * t_len + t]) continue;
      const double* vp = vprime.data() + (b * t_len + t) * d;
      const double* fp = f.data() + (b * t_len + t) * d;
      for (std::size_t i = 0; i < d; ++i) out[i] += vp[i] + fp[i];
    }
  }
  return ln_.forward(summed, mode);
}

void GenreEncoder::backward(const Tensor& dphi) {
  const std::size_t n = cached_n_, t_len = cfg_.genre_len, d = cfg_.latent_dim;
  Tensor dsum = ln_.backward(dphi);

  // The summed vector fans out to every real row of both branches.
  Tensor dbranch({n, t_len, d});
  for (std::size_t b = 0; b < n; ++b) {
    const double* src = dsum.data() + b * d;
    for (std::size_t t = 0; t < t_len; ++t) {
      if (!cached_mask_[b * t_len + t]) continue;
      std::memcpy(dbranch.data() + (b * t_len + t) * d, src, d * sizeof(double));
    }
  }

  Tensor df = dbranch;
  df.reshape({n * t_len, d});
  df = dropout_.backward(df);
  df.reshape({n, t_len, d});
  Tensor dvprime = nn::linear3_backward(ff_, df, n, t_len);
  for (std::size_t i = 0; i < dvprime.size(); ++i) dvprime[i] += dbranch[i];
  attn_.backward(dvprime);
}

void GenreEncoder::collect(std::vector<nn::Param*>& out) {
  attn_.collect(out);
  ff_.collect(out);
  ln_.collect(out);
}

void GenreEncoder::collect_state(const std::string& prefix,
                                 std::vector<std::pair<std::string, Tensor*>>& out) {
  std::vector<nn::Param*> ps;
  collect(ps);
  for (auto* p : ps) out.emplace_back(prefix + p->name, &p->value);
}

// ---------------------------------------------------------------------------
// CfEncoder

CfEncoder::CfEncoder(const EncoderConfig& cfg, Rng& rng) {
  ff1_ = nn::Linear("ff1", cfg.cf_dim, cfg.cf_hidden, rng);
  dropout_.set_p(cfg.dropout);
  ff2_ = nn::Linear("ff2", cfg.cf_hidden, cfg.latent_dim, rng);
  ln_ = nn::LayerNorm("ln", cfg.latent_dim, cfg.norm_eps);
}

Tensor CfEncoder::forward(const Tensor& x, nn::Mode mode, Rng* rng) {
  if (x.rank() != 2 || x.dim(1) != ff1_.in_dim()) {
    throw std::invalid_argument("cf encoder: expected [N, " + std::to_string(ff1_.in_dim()) +
                                "] input, got " + shape_string(x));
  }
  for (double v : x.vec()) {
    if (!std::isfinite(v)) throw std::invalid_argument("cf encoder: non-finite input");
  }
  Tensor h = ff1_.forward(x, mode);
  h = relu_.forward(h, mode);
  h = dropout_.forward(h, mode, rng);
  h = ff2_.forward(h, mode);
  return ln_.forward(h, mode);
}

void CfEncoder::backward(const Tensor& dphi) {
  Tensor d = ln_.backward(dphi);
  d = ff2_.backward(d);
  d = dropout_.backward(d);
  d = relu_.backward(d);
  ff1_.backward(d);
}

void CfEncoder::collect(std::vector<nn::Param*>& out) {
  ff1_.collect(out);
  ff2_.collect(out);
  ln_.collect(out);
}

void CfEncoder::collect_state(const std::string& prefix,
                              std::vector<std::pair<std::string, Tensor*>>& out) {
  std::vector<nn::Param*> ps;
  collect(ps);
  for (auto* p : ps) out.emplace_back(prefix + p->name, &p->value);
}

// ---------------------------------------------------------------------------
// Model

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kContrCfG: return "contr-cf-g";
    case ModelKind::kContrG: return "contr-g";
    case ModelKind::kContrCf: return "contr-cf";
    case ModelKind::kBlineG: return "bline-g";
    case ModelKind::kBlineCf: return "bline-cf";
    case ModelKind::kBlineCfG: return "bline-cf-g";
  }
  throw std::logic_error("unknown model kind");
}

ModelKind model_kind_from_string(const std::string& name) {
  if (name == "contr-cf-g") return ModelKind::kContrCfG;
  if (name == "contr-g") return ModelKind::kContrG;
  if (name == "contr-cf") return ModelKind::kContrCf;
  if (name == "bline-g") return ModelKind::kBlineG;
  if (name == "bline-cf") return ModelKind::kBlineCf;
  if (name == "bline-cf-g") return ModelKind::kBlineCfG;
  throw std::invalid_argument("unknown model kind: " + name);
}

bool is_baseline(ModelKind kind) {
  return kind == ModelKind::kBlineG || kind == ModelKind::kBlineCf || kind == ModelKind::kBlineCfG;
}
bool uses_genre_encoder(ModelKind kind) {
  return kind == ModelKind::kContrCfG || kind == ModelKind::kContrG;
}
bool uses_cf_encoder(ModelKind kind) {
  return kind == ModelKind::kContrCfG || kind == ModelKind::kContrCf;
}
bool uses_genre_head(ModelKind kind) {
  return kind == ModelKind::kBlineG || kind == ModelKind::kBlineCfG;
}
bool uses_cf_head(ModelKind kind) {
  return kind == ModelKind::kBlineCf || kind == ModelKind::kBlineCfG;
}
bool needs_cf_factors(ModelKind kind) {
  return uses_cf_encoder(kind) || uses_cf_head(kind);
}

Model Model::create(const EncoderConfig& cfg, ModelKind kind, std::uint64_t seed) {
  Model model;
  model.cfg = cfg;
  model.kind = kind;
  Rng rng(Rng::split(seed, "encoder-init"));
  model.audio = std::make_unique<AudioEncoder>(cfg, rng);
  if (uses_genre_encoder(kind)) model.genre = std::make_unique<GenreEncoder>(cfg, rng);
  if (uses_cf_encoder(kind)) model.cf = std::make_unique<CfEncoder>(cfg, rng);
  if (uses_genre_head(kind)) {
    model.head_genre = std::make_unique<nn::Linear>("genre", cfg.latent_dim,
                                                    static_cast<std::size_t>(kGenreVocabSize), rng);
  }
  if (uses_cf_head(kind)) {
    model.head_cf = std::make_unique<nn::Linear>("cf", cfg.latent_dim, cfg.cf_dim, rng);
  }
  return model;
}

std::vector<nn::Param*> Model::params() {
  std::vector<nn::Param*> out;
  audio->collect(out);
  if (genre) genre->collect(out);
  if (cf) cf->collect(out);
  if (head_genre) head_genre->collect(out);
  if (head_cf) head_cf->collect(out);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Model::state() {
  std::vector<std::pair<std::string, Tensor*>> out;
  audio->collect_state("audio.", out);
  if (genre) genre->collect_state("genre.", out);
  if (cf) cf->collect_state("cf.", out);
  if (head_genre) {
    out.emplace_back("head.genre.weight", &head_genre->weight().value);
    out.emplace_back("head.genre.bias", &head_genre->bias().value);
  }
  if (head_cf) {
    out.emplace_back("head.cf.weight", &head_cf->weight().value);
    out.emplace_back("head.cf.bias", &head_cf->bias().value);
  }
  return out;
}

void Model::zero_grads() {
  for (auto* p : params()) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic, version, config echo, then name -> shape-tagged
// little-endian f32 tensors.

namespace {
constexpr char kMagic[4] = {'T', 'E', 'N', '1'};

void write_u64(std::ofstream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::ifstream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (!in) throw std::runtime_error("checkpoint: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

json config_to_json(const EncoderConfig& cfg, ModelKind kind) {
  json pooling = json::array();
  for (const auto& [pt, pf] : cfg.pooling_schedule()) pooling.push_back({pt, pf});
  return {{"kind", to_string(kind)},
          {"latent_dim", cfg.latent_dim},
          {"audio_frames", cfg.audio_frames},
          {"audio_bands", cfg.audio_bands},
          {"conv_blocks", cfg.conv_blocks},
          {"conv_channels", cfg.conv_channels},
          {"kernel", cfg.kernel},
          {"ff_hidden", cfg.ff_hidden},
          {"genre_dim", cfg.genre_dim},
          {"genre_len", cfg.genre_len},
          {"attn_heads", cfg.attn_heads},
          {"cf_dim", cfg.cf_dim},
          {"cf_hidden", cfg.cf_hidden},
          {"dropout", cfg.dropout},
          {"bn_momentum", cfg.bn_momentum},
          {"norm_eps", cfg.norm_eps},
          {"pooling", pooling}};
}

EncoderConfig config_from_json(const json& j, ModelKind& kind) {
  EncoderConfig cfg;
  kind = model_kind_from_string(j.at("kind").get<std::string>());
  cfg.latent_dim = j.at("latent_dim").get<std::size_t>();
  cfg.audio_frames = j.at("audio_frames").get<std::size_t>();
  cfg.audio_bands = j.at("audio_bands").get<std::size_t>();
  cfg.conv_blocks = j.at("conv_blocks").get<std::size_t>();
  cfg.conv_channels = j.at("conv_channels").get<std::size_t>();
  cfg.kernel = j.at("kernel").get<std::size_t>();
  cfg.ff_hidden = j.at("ff_hidden").get<std::size_t>();
  cfg.genre_dim = j.at("genre_dim").get<std::size_t>();
  cfg.genre_len = j.at("genre_len").get<std::size_t>();
  cfg.attn_heads = j.at("attn_heads").get<std::size_t>();
  cfg.cf_dim = j.at("cf_dim").get<std::size_t>();
  cfg.cf_hidden = j.at("cf_hidden").get<std::size_t>();
  cfg.dropout = j.at("dropout").get<double>();
  cfg.bn_momentum = j.at("bn_momentum").get<double>();
  cfg.norm_eps = j.at("norm_eps").get<double>();
  for (const auto& pw : j.at("pooling")) {
    cfg.pooling.push_back({pw.at(0).get<std::size_t>(), pw.at(1).get<std::size_t>()});
  }
  return cfg;
}
}  // namespace

void save_checkpoint(Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(kMagic, 4);
  write_u64(out, 1);  // version

  const std::string cfg_str = config_to_json(model.cfg, model.kind).dump();
  write_u64(out, cfg_str.size());
  out.write(cfg_str.data(), static_cast<std::streamsize>(cfg_str.size()));

  const auto state = model.state();
  write_u64(out, state.size());
  for (const auto& [name, tensor] : state) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(out, tensor->rank());
    for (std::size_t d : tensor->shape()) write_u64(out, d);
    std::vector<float> f(tensor->size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>((*tensor)[i]);
    out.write(reinterpret_cast<const char*>(f.data()),
              static_cast<std::streamsize>(f.size() * sizeof(float)));
  }
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic: " + path);
  }
  if (read_u64(in) != 1) throw std::runtime_error("checkpoint: unsupported version");

  const std::uint64_t cfg_len = read_u64(in);
  std::string cfg_str(cfg_len, '\0');
  in.read(cfg_str.data(), static_cast<std::streamsize>(cfg_len));
  if (!in) throw std::runtime_error("checkpoint: truncated config");
  ModelKind kind;
  EncoderConfig cfg;
  try {
    cfg = config_from_json(json::parse(cfg_str), kind);
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint: malformed config echo: " + std::string(e.what()));
  }

  Model model = Model::create(cfg, kind, 0);
  auto state = model.state();
  std::size_t loaded = 0;
  const std::uint64_t n_entries = read_u64(in);
  for (std::uint64_t e = 0; e < n_entries; ++e) {
    const std::uint64_t name_len = read_u64(in);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    const std::uint64_t rank = read_u64(in);
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = read_u64(in);
      count *= d;
    }
    std::vector<float> f(count);
    in.read(reinterpret_cast<char*>(f.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor " + name);

    Tensor* target = nullptr;
    for (auto& [n, t] : state) {
      if (n == name) {
        target = t;
        break;
      }
    }
    if (target == nullptr) throw std::runtime_error("checkpoint: unexpected tensor " + name);
    if (target->shape() != shape) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ": file " +
                               shape_string(Tensor(shape)) + " vs model " + shape_string(*target));
    }
    for (std::size_t i = 0; i < count; ++i) (*target)[i] = static_cast<double>(f[i]);
    ++loaded;
  }
  if (loaded != state.size()) {
    throw std::runtime_error("checkpoint: missing tensors (" + std::to_string(loaded) + " of " +
                             std::to_string(state.size()) + ")");
  }
  return model;
}

}  // namespace triad::enc
