#include "thinksafe/toymodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "thinksafe/decode.hpp"
#include "thinksafe/error.hpp"

namespace thinksafe {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

struct LayerOffsets {
  std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct LoraOffsets {
  std::size_t aq, bq, av, bv;
};

struct TransformerLayout {
  std::size_t tok = 0, pos = 0;
  std::vector<LayerOffsets> layers;
  std::size_t lnf_g = 0, lnf_b = 0, out_bias = 0;
  std::size_t total = 0;
};

TransformerLayout transformer_layout(const ModelConfig& c) {
  const std::size_t d = c.width, f = c.ff_width, V = Vocab::kSize;
  TransformerLayout L;
  std::size_t off = 0;
  auto take = [&off](std::size_t n) {
    const std::size_t at = off;
    off += n;
    return at;
  };
  L.tok = take(V * d);
  L.pos = take(static_cast<std::size_t>(c.context_len) * d);
  for (int l = 0; l < c.n_layers; ++l) {
    LayerOffsets o{};
    o.ln1_g = take(d);
    o.ln1_b = take(d);
    o.wq = take(d * d);
    o.bq = take(d);
    o.wk = take(d * d);
    o.bk = take(d);
    o.wv = take(d * d);
    o.bv = take(d);
    o.wo = take(d * d);
    o.bo = take(d);
    o.ln2_g = take(d);
    o.ln2_b = take(d);
    o.w1 = take(d * f);
    o.b1 = take(f);
    o.w2 = take(f * d);
    o.b2 = take(d);
    L.layers.push_back(o);
  }
  L.lnf_g = take(d);
  L.lnf_b = take(d);
  L.out_bias = take(V);
  L.total = off;
  return L;
}

std::vector<LoraOffsets> lora_layout(const ModelConfig& c, const LoraConfig& lora) {
  const std::size_t d = c.width, r = lora.rank;
  std::vector<LoraOffsets> out;
  std::size_t off = 0;
  for (int l = 0; l < c.n_layers; ++l) {
    LoraOffsets o{};
    o.aq = off;
    off += r * d;
    o.bq = off;
    off += d * r;
    o.av = off;
    off += r * d;
    o.bv = off;
    off += d * r;
    out.push_back(o);
  }
  return out;
}

// y[j] (+)= sum_i x[i] * W[i*n_out + j] + b[j]
void affine(const double* x, const double* W, const double* b, double* y, std::size_t n_in, std::size_t n_out) {
  for (std::size_t j = 0; j < n_out; ++j) y[j] = b[j];
  for (std::size_t i = 0; i < n_in; ++i) {
    const double xi = x[i];
    const double* w = W + i * n_out;
    for (std::size_t j = 0; j < n_out; ++j) y[j] += xi * w[j];
  }
}

// Backward of affine: dx[i] += sum_j dy[j] W[i,j]; dW[i,j] += x[i] dy[j]; db += dy.
void affine_backward(const double* x, const double* W, const double* dy, double* dx, double* dW, double* db,
                     std::size_t n_in, std::size_t n_out) {
  for (std::size_t i = 0; i < n_in; ++i) {
    const double* w = W + i * n_out;
    double acc = 0.0;
    for (std::size_t j = 0; j < n_out; ++j) acc += dy[j] * w[j];
    dx[i] += acc;
  }
  if (dW != nullptr) {
    for (std::size_t i = 0; i < n_in; ++i) {
      const double xi = x[i];
      double* dw = dW + i * n_out;
      for (std::size_t j = 0; j < n_out; ++j) dw[j] += xi * dy[j];
    }
    for (std::size_t j = 0; j < n_out; ++j) db[j] += dy[j];
  }
}

void layer_norm(const double* x, const double* g, const double* b, double* xhat, double* y, double& rstd,
                std::size_t d) {
  double mean = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= static_cast<double>(d);
  rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < d; ++i) {
    xhat[i] = (x[i] - mean) * rstd;
    y[i] = xhat[i] * g[i] + b[i];
  }
}

void layer_norm_backward(const double* dy, const double* xhat, const double* g, double rstd, double* dx, double* dg,
                         double* db, std::size_t d) {
  double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < d; ++i) {
    dxhat[i] = dy[i] * g[i];
    mean_dxhat += dxhat[i];
    mean_dxhat_xhat += dxhat[i] * xhat[i];
    if (dg != nullptr) {
      dg[i] += dy[i] * xhat[i];
      db[i] += dy[i];
    }
  }
  mean_dxhat /= static_cast<double>(d);
  mean_dxhat_xhat /= static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) dx[i] += rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
}

std::uint64_t ngram_bucket(std::span<const TokenId> tokens, std::size_t t, const ModelConfig& c) {
  const int ctx = c.ngram_n - 1;
  std::uint64_t idx = 0;
  const auto buckets = static_cast<std::uint64_t>(c.ngram_buckets);
  for (int k = ctx - 1; k >= 0; --k) {
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(t) - k;
    const TokenId tok = p >= 0 ? tokens[static_cast<std::size_t>(p)] : Vocab::kPad;
    idx = (idx * Vocab::kSize + static_cast<std::uint64_t>(tok)) % buckets;
  }
  return idx;
}

}  // namespace

struct LayerCache {
  std::vector<double> x_in, xhat1, a, q, k, v, o, x_mid, xhat2, b, pre, act;
  std::vector<double> rstd1, rstd2;
  std::vector<double> att;  // per position t: n_heads * (t + 1) probabilities
  std::vector<double> mask_q, mask_v, u_q, u_v;
};

struct Activations {
  ForwardOptions options;
  TokenSeq tokens;
  std::vector<LayerCache> layers;
  std::vector<double> x_final, xhatf, hf, rstdf;
  std::vector<double> logits;  // T x V
  std::vector<std::uint64_t> buckets;
  TransformerLayout layout;
  std::vector<LoraOffsets> lora_offsets;
};

namespace {

std::size_t att_offset(std::size_t t, std::size_t heads) { return heads * (t * (t + 1) / 2); }

void check_config_dims(const ModelConfig& c) { c.validate(); }

}  // namespace

std::string_view to_string(Architecture a) {
  return a == Architecture::tiny_transformer ? "tiny_transformer" : "ngram_logit_table";
}

Architecture parse_architecture(std::string_view s) {
  if (s == "tiny_transformer") return Architecture::tiny_transformer;
  if (s == "ngram_logit_table") return Architecture::ngram_logit_table;
  throw ConfigError("unknown architecture: " + std::string(s));
}

void ModelConfig::validate() const {
  if (context_len <= 0) throw ConfigError("context_len must be positive");
  if (!(init_std >= 0.0) || !std::isfinite(init_std)) throw ConfigError("init_std must be finite and non-negative");
  if (arch == Architecture::tiny_transformer) {
    if (width <= 0) throw ConfigError("width must be positive");
    if (n_layers <= 0) throw ConfigError("n_layers must be positive");
    if (n_heads <= 0 || width % n_heads != 0) throw ConfigError("n_heads must be positive and divide width");
    if (ff_width <= 0) throw ConfigError("ff_width must be positive");
  } else {
    if (ngram_n <= 0) throw ConfigError("ngram_n must be positive");
    if (ngram_buckets <= 0) throw ConfigError("ngram_buckets must be positive");
    if (ngram_n == 1 && ngram_buckets != 1) throw ConfigError("a unigram table has exactly one bucket");
  }
}

void LoraConfig::validate() const {
  if (rank <= 0) throw ConfigError("lora rank must be positive");
  if (!(alpha > 0.0)) throw ConfigError("lora alpha must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("lora dropout must be in [0, 1)");
}

std::size_t parameter_count(const ModelConfig& config) {
  check_config_dims(config);
  if (config.arch == Architecture::ngram_logit_table)
    return static_cast<std::size_t>(config.ngram_buckets) * Vocab::kSize;
  return transformer_layout(config).total;
}

std::size_t lora_parameter_count(const ModelConfig& config, const LoraConfig& lora) {
  return static_cast<std::size_t>(config.n_layers) * 4u * static_cast<std::size_t>(lora.rank) *
         static_cast<std::size_t>(config.width);
}

double logsumexp(std::span<const double> values) {
  double m = -INFINITY;
  for (double v : values) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double lse = logsumexp(logits);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

ToyLM ToyLM::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ToyLM m;
  m.config_ = config;
  m.seed_ = seed;
  Rng rng(derive_seed(seed, "init"));
  const std::size_t n = parameter_count(config);
  m.params_.assign(n, 0.0);
  if (config.arch == Architecture::ngram_logit_table) {
    for (double& p : m.params_) p = config.init_std * rng.normal();
    return m;
  }
  const auto L = transformer_layout(config);
  const std::size_t d = config.width, f = config.ff_width;
  auto fill = [&](std::size_t off, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) m.params_[off + i] = config.init_std * rng.normal();
  };
  auto ones = [&](std::size_t off, std::size_t count) { std::fill_n(m.params_.begin() + off, count, 1.0); };
  fill(L.tok, Vocab::kSize * d);
  fill(L.pos, static_cast<std::size_t>(config.context_len) * d);
  for (const auto& o : L.layers) {
    ones(o.ln1_g, d);
    fill(o.wq, d * d);
    fill(o.wk, d * d);
    fill(o.wv, d * d);
    fill(o.wo, d * d);
    ones(o.ln2_g, d);
    fill(o.w1, d * f);
    fill(o.w2, f * d);
  }
  ones(L.lnf_g, d);
  return m;
}

ToyLM::ToyLM(const ToyLM&) = default;
ToyLM& ToyLM::operator=(const ToyLM&) = default;
ToyLM::ToyLM(ToyLM&&) noexcept = default;
ToyLM& ToyLM::operator=(ToyLM&&) noexcept = default;
ToyLM::~ToyLM() = default;

ToyLM ToyLM::from_parts(const ModelConfig& config, std::uint64_t seed, std::vector<double> params,
                        std::optional<LoraConfig> lora, std::uint64_t lora_seed, std::vector<double> lora_params) {
  config.validate();
  if (params.size() != parameter_count(config)) throw ValidationError("parameter count does not match config");
  if (lora) {
    lora->validate();
    if (config.arch != Architecture::tiny_transformer) throw ValidationError("adapters need a transformer");
    if (lora_params.size() != lora_parameter_count(config, *lora))
      throw ValidationError("adapter parameter count does not match config");
  } else if (!lora_params.empty()) {
    throw ValidationError("adapter parameters without adapter config");
  }
  ToyLM m;
  m.config_ = config;
  m.seed_ = seed;
  m.params_ = std::move(params);
  m.lora_ = lora;
  m.lora_seed_ = lora_seed;
  m.lora_params_ = std::move(lora_params);
  return m;
}

void ToyLM::attach_lora(const LoraConfig& lora, std::uint64_t seed) {
  if (config_.arch != Architecture::tiny_transformer)
    throw UnsupportedError("low-rank adapters need the transformer architecture");
  lora.validate();
  lora_ = lora;
  lora_seed_ = seed;
  lora_params_.assign(lora_parameter_count(config_, lora), 0.0);
  Rng rng(derive_seed(seed, "lora"));
  const std::size_t d = config_.width, r = lora.rank;
  const double a_std = 1.0 / std::sqrt(static_cast<double>(d));
  for (const auto& o : lora_layout(config_, lora)) {
    for (std::size_t i = 0; i < r * d; ++i) lora_params_[o.aq + i] = a_std * rng.normal();
    for (std::size_t i = 0; i < r * d; ++i) lora_params_[o.av + i] = a_std * rng.normal();
  }
}

void ToyLM::detach_lora() {
  lora_.reset();
  lora_params_.clear();
}

std::span<double> ToyLM::trainable_params() { return lora_ ? std::span<double>(lora_params_) : std::span<double>(params_); }

std::span<const double> ToyLM::trainable_params() const {
  return lora_ ? std::span<const double>(lora_params_) : std::span<const double>(params_);
}

std::unique_ptr<Activations> ToyLM::begin(const ForwardOptions& options) const {
  auto acts = std::make_unique<Activations>();
  acts->options = options;
  if (config_.arch == Architecture::tiny_transformer) {
    acts->layers.resize(config_.n_layers);
    acts->layout = transformer_layout(config_);
    if (lora_) acts->lora_offsets = lora_layout(config_, *lora_);
  }
  return acts;
}

std::span<const double> ToyLM::push(Activations& A, TokenId token) const {
  const std::size_t V = Vocab::kSize;
  if (token < 0 || token >= static_cast<TokenId>(V)) throw ContractError("token id out of range");
  const std::size_t t = A.tokens.size();
  if (t >= static_cast<std::size_t>(config_.context_len))
    throw ContractError("sequence exceeds context_len " + std::to_string(config_.context_len));
  A.tokens.push_back(token);
  A.logits.resize((t + 1) * V);
  double* out = A.logits.data() + t * V;

  if (config_.arch == Architecture::ngram_logit_table) {
    const std::uint64_t bucket = ngram_bucket(A.tokens, t, config_);
    A.buckets.push_back(bucket);
    std::copy_n(params_.data() + bucket * V, V, out);
    return {out, V};
  }

  const auto& L = A.layout;
  const std::size_t d = config_.width, f = config_.ff_width, H = config_.n_heads, dh = d / H;
  const double* P = params_.data();
  const bool use_lora = lora_.has_value();
  if (use_lora && A.lora_offsets.empty()) throw ContractError("activations were started before adapters were attached");
  const std::size_t r = use_lora ? static_cast<std::size_t>(lora_->rank) : 0;
  const double lscale = use_lora ? lora_->scale() : 0.0;
  const bool dropout = use_lora && A.options.pass == Pass::training && A.options.dropout_rng != nullptr &&
                       lora_->dropout > 0.0;
  const auto& lo = A.lora_offsets;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<double> x(d);
  for (std::size_t i = 0; i < d; ++i) x[i] = P[L.tok + token * d + i] + P[L.pos + t * d + i];

  std::vector<double> xd(d);
  for (std::size_t l = 0; l < L.layers.size(); ++l) {
    const auto& o = L.layers[l];
    auto& C = A.layers[l];
    C.x_in.insert(C.x_in.end(), x.begin(), x.end());
    C.xhat1.resize((t + 1) * d);
    C.a.resize((t + 1) * d);
    C.rstd1.resize(t + 1);
    double* xhat1 = C.xhat1.data() + t * d;
    double* a = C.a.data() + t * d;
    layer_norm(x.data(), P + o.ln1_g, P + o.ln1_b, xhat1, a, C.rstd1[t], d);

    C.q.resize((t + 1) * d);
    C.k.resize((t + 1) * d);
    C.v.resize((t + 1) * d);
    double* q = C.q.data() + t * d;
    double* k = C.k.data() + t * d;
    double* v = C.v.data() + t * d;
    affine(a, P + o.wq, P + o.bq, q, d, d);
    affine(a, P + o.wk, P + o.bk, k, d, d);
    affine(a, P + o.wv, P + o.bv, v, d, d);

    if (use_lora) {
      const double* LP = lora_params_.data();
      auto adapt = [&](std::vector<double>& mask_store, std::vector<double>& u_store, std::size_t a_off,
                       std::size_t b_off, double* y) {
        mask_store.resize((t + 1) * d);
        double* mask = mask_store.data() + t * d;
        for (std::size_t i = 0; i < d; ++i) {
          mask[i] = 1.0;
          if (dropout) mask[i] = A.options.dropout_rng->bernoulli(lora_->dropout) ? 0.0 : 1.0 / (1.0 - lora_->dropout);
          xd[i] = a[i] * mask[i];
        }
        u_store.resize((t + 1) * r);
        double* u = u_store.data() + t * r;
        for (std::size_t j = 0; j < r; ++j) {
          const double* Aj = LP + a_off + j * d;
          double acc = 0.0;
          for (std::size_t i = 0; i < d; ++i) acc += Aj[i] * xd[i];
          u[j] = acc;
        }
        for (std::size_t kk = 0; kk < d; ++kk) {
          const double* Bk = LP + b_off + kk * r;
          double acc = 0.0;
          for (std::size_t j = 0; j < r; ++j) acc += Bk[j] * u[j];
          y[kk] += lscale * acc;
        }
      };
      adapt(C.mask_q, C.u_q, lo[l].aq, lo[l].bq, q);
      adapt(C.mask_v, C.u_v, lo[l].av, lo[l].bv, v);
    }

    C.att.resize(att_offset(t + 1, H));
    double* att = C.att.data() + att_offset(t, H);
    C.o.resize((t + 1) * d);
    double* ov = C.o.data() + t * d;
    std::fill_n(ov, d, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      double* p = att + h * (t + 1);
      double mx = -INFINITY;
      for (std::size_t s = 0; s <= t; ++s) {
        const double* ks = C.k.data() + s * d + h * dh;
        double acc = 0.0;
        for (std::size_t e = 0; e < dh; ++e) acc += q[h * dh + e] * ks[e];
        p[s] = acc * inv_sqrt_dh;
        mx = std::max(mx, p[s]);
      }
      double z = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        p[s] = std::exp(p[s] - mx);
        z += p[s];
      }
      for (std::size_t s = 0; s <= t; ++s) {
        p[s] /= z;
        const double* vs = C.v.data() + s * d + h * dh;
        for (std::size_t e = 0; e < dh; ++e) ov[h * dh + e] += p[s] * vs[e];
      }
    }

    std::vector<double> proj(d);
    affine(ov, P + o.wo, P + o.bo, proj.data(), d, d);
    for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
    C.x_mid.insert(C.x_mid.end(), x.begin(), x.end());

    C.xhat2.resize((t + 1) * d);
    C.b.resize((t + 1) * d);
    C.rstd2.resize(t + 1);
    double* xhat2 = C.xhat2.data() + t * d;
    double* bb = C.b.data() + t * d;
    layer_norm(x.data(), P + o.ln2_g, P + o.ln2_b, xhat2, bb, C.rstd2[t], d);

    C.pre.resize((t + 1) * f);
    C.act.resize((t + 1) * f);
    double* pre = C.pre.data() + t * f;
    double* act = C.act.data() + t * f;
    affine(bb, P + o.w1, P + o.b1, pre, d, f);
    for (std::size_t j = 0; j < f; ++j) act[j] = gelu(pre[j]);
    affine(act, P + o.w2, P + o.b2, proj.data(), f, d);
    for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
  }

  A.x_final.insert(A.x_final.end(), x.begin(), x.end());
  A.xhatf.resize((t + 1) * d);
  A.hf.resize((t + 1) * d);
  A.rstdf.resize(t + 1);
  double* hf = A.hf.data() + t * d;
  layer_norm(x.data(), P + L.lnf_g, P + L.lnf_b, A.xhatf.data() + t * d, hf, A.rstdf[t], d);
  for (std::size_t vv = 0; vv < V; ++vv) {
    const double* e = P + L.tok + vv * d;
    double acc = P[L.out_bias + vv];
    for (std::size_t i = 0; i < d; ++i) acc += hf[i] * e[i];
    out[vv] = acc;
  }
  return {out, V};
}

void ToyLM::backward(const Activations& A, const Matrix& dlogits, std::span<double> grad) const {
  const std::size_t V = Vocab::kSize;
  const std::size_t T = A.tokens.size();
  if (dlogits.rows != T || dlogits.cols != V) throw ContractError("dlogits shape mismatch");
  if (grad.size() != trainable_params().size()) throw ContractError("gradient buffer size mismatch");

  if (config_.arch == Architecture::ngram_logit_table) {
    for (std::size_t t = 0; t < T; ++t) {
      double* g = grad.data() + A.buckets[t] * V;
      for (std::size_t v = 0; v < V; ++v) g[v] += dlogits(t, v);
    }
    return;
  }

  const auto& L = A.layout;
  const std::size_t d = config_.width, f = config_.ff_width, H = config_.n_heads, dh = d / H;
  const double* P = params_.data();
  const bool use_lora = lora_.has_value();
  // With adapters attached the base weights are frozen: only propagate through them.
  double* G = use_lora ? nullptr : grad.data();
  double* LG = use_lora ? grad.data() : nullptr;
  const std::size_t r = use_lora ? static_cast<std::size_t>(lora_->rank) : 0;
  const double lscale = use_lora ? lora_->scale() : 0.0;
  const auto& lo = A.lora_offsets;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  auto gp = [G](std::size_t off) -> double* { return G != nullptr ? G + off : nullptr; };

  // Output head (tied to the token embedding) and final norm.
  std::vector<double> dx(T * d, 0.0);
  {
    std::vector<double> dhf(d);
    for (std::size_t t = 0; t < T; ++t) {
      std::fill(dhf.begin(), dhf.end(), 0.0);
      const double* hf = A.hf.data() + t * d;
      for (std::size_t v = 0; v < V; ++v) {
        const double g = dlogits(t, v);
        if (g == 0.0) continue;
        const double* e = P + L.tok + v * d;
        for (std::size_t i = 0; i < d; ++i) dhf[i] += g * e[i];
        if (G != nullptr) {
          double* de = G + L.tok + v * d;
          for (std::size_t i = 0; i < d; ++i) de[i] += g * hf[i];
          G[L.out_bias + v] += g;
        }
      }
      layer_norm_backward(dhf.data(), A.xhatf.data() + t * d, P + L.lnf_g, A.rstdf[t], dx.data() + t * d,
                          gp(L.lnf_g), gp(L.lnf_b), d);
    }
  }

  std::vector<double> dpre(f), dact(f), db(d), dmid(T * d), da(T * d), dq(T * d), dk(T * d), dv(T * d),
      dov(T * d), du(std::max<std::size_t>(r, 1));
  for (std::size_t li = L.layers.size(); li-- > 0;) {
    const auto& o = L.layers[li];
    const auto& C = A.layers[li];

    // MLP block: x_out = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2
    std::copy(dx.begin(), dx.end(), dmid.begin());
    for (std::size_t t = 0; t < T; ++t) {
      const double* dxt = dx.data() + t * d;
      std::fill(dact.begin(), dact.end(), 0.0);
      affine_backward(C.act.data() + t * f, P + o.w2, dxt, dact.data(), gp(o.w2), gp(o.b2), f, d);
      for (std::size_t j = 0; j < f; ++j) dpre[j] = dact[j] * gelu_grad(C.pre[t * f + j]);
      std::fill(db.begin(), db.end(), 0.0);
      affine_backward(C.b.data() + t * d, P + o.w1, dpre.data(), db.data(), gp(o.w1), gp(o.b1), d, f);
      layer_norm_backward(db.data(), C.xhat2.data() + t * d, P + o.ln2_g, C.rstd2[t], dmid.data() + t * d,
                          gp(o.ln2_g), gp(o.ln2_b), d);
    }

    // Attention block: x_mid = x_in + Wo attn(q, k, v) + bo
    std::fill(dov.begin(), dov.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t)
      affine_backward(C.o.data() + t * d, P + o.wo, dmid.data() + t * d, dov.data() + t * d, gp(o.wo), gp(o.bo), d,
                      d);
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    std::vector<double> dp;
    for (std::size_t t = 0; t < T; ++t) {
      const double* att = C.att.data() + att_offset(t, H);
      dp.assign(t + 1, 0.0);
      for (std::size_t h = 0; h < H; ++h) {
        const double* p = att + h * (t + 1);
        const double* dot = dov.data() + t * d + h * dh;
        double sum = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* vs = C.v.data() + s * d + h * dh;
          double* dvs = dv.data() + s * d + h * dh;
          double acc = 0.0;
          for (std::size_t e = 0; e < dh; ++e) {
            acc += dot[e] * vs[e];
            dvs[e] += p[s] * dot[e];
          }
          dp[s] = acc;
          sum += p[s] * acc;
        }
        const double* qt = C.q.data() + t * d + h * dh;
        double* dqt = dq.data() + t * d + h * dh;
        for (std::size_t s = 0; s <= t; ++s) {
          const double ds = p[s] * (dp[s] - sum) * inv_sqrt_dh;
          if (ds == 0.0) continue;
          const double* ks = C.k.data() + s * d + h * dh;
          double* dks = dk.data() + s * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) {
            dqt[e] += ds * ks[e];
            dks[e] += ds * qt[e];
          }
        }
      }
    }

    std::fill(da.begin(), da.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const double* at = C.a.data() + t * d;
      double* dat = da.data() + t * d;
      affine_backward(at, P + o.wq, dq.data() + t * d, dat, gp(o.wq), gp(o.bq), d, d);
      affine_backward(at, P + o.wk, dk.data() + t * d, dat, gp(o.wk), gp(o.bk), d, d);
      affine_backward(at, P + o.wv, dv.data() + t * d, dat, gp(o.wv), gp(o.bv), d, d);
      if (use_lora) {
        const double* LP = lora_params_.data();
        auto adapt_back = [&](const std::vector<double>& mask_store, const std::vector<double>& u_store,
                              std::size_t a_off, std::size_t b_off, const double* dy) {
          const double* mask = mask_store.data() + t * d;
          const double* u = u_store.data() + t * r;
          for (std::size_t j = 0; j < r; ++j) du[j] = 0.0;
          for (std::size_t kk = 0; kk < d; ++kk) {
            const double g = lscale * dy[kk];
            const double* Bk = LP + b_off + kk * r;
            double* dBk = LG + b_off + kk * r;
            for (std::size_t j = 0; j < r; ++j) {
              du[j] += g * Bk[j];
              dBk[j] += g * u[j];
            }
          }
          for (std::size_t j = 0; j < r; ++j) {
            const double* Aj = LP + a_off + j * d;
            double* dAj = LG + a_off + j * d;
            for (std::size_t i = 0; i < d; ++i) {
              const double xdi = at[i] * mask[i];
              dAj[i] += du[j] * xdi;
              dat[i] += du[j] * Aj[i] * mask[i];
            }
          }
        };
        adapt_back(C.mask_q, C.u_q, lo[li].aq, lo[li].bq, dq.data() + t * d);
        adapt_back(C.mask_v, C.u_v, lo[li].av, lo[li].bv, dv.data() + t * d);
      }
    }

    // dx for the layer input: residual path plus the first norm.
    std::copy(dmid.begin(), dmid.end(), dx.begin());
    for (std::size_t t = 0; t < T; ++t)
      layer_norm_backward(da.data() + t * d, C.xhat1.data() + t * d, P + o.ln1_g, C.rstd1[t], dx.data() + t * d,
                          gp(o.ln1_g), gp(o.ln1_b), d);
  }

  if (G != nullptr) {
    for (std::size_t t = 0; t < T; ++t) {
      double* de = G + L.tok + static_cast<std::size_t>(A.tokens[t]) * d;
      double* dpos = G + L.pos + t * d;
      for (std::size_t i = 0; i < d; ++i) {
        de[i] += dx[t * d + i];
        dpos[i] += dx[t * d + i];
      }
    }
  }
}

Matrix ToyLM::forward_logits(std::span<const TokenId> tokens) const {
  if (tokens.size() > static_cast<std::size_t>(config_.context_len))
    throw ContractError("sequence of length " + std::to_string(tokens.size()) + " exceeds context_len " +
                        std::to_string(config_.context_len));
  auto acts = begin();
  for (TokenId tok : tokens) push(*acts, tok);
  Matrix out(tokens.size(), Vocab::kSize);
  out.data = std::move(acts->logits);
  return out;
}

DecodeSession::DecodeSession(const ToyLM& model) : model_(&model), acts_(model.begin()) {}
DecodeSession::~DecodeSession() = default;
DecodeSession::DecodeSession(DecodeSession&&) noexcept = default;

std::span<const double> DecodeSession::push(TokenId token) { return model_->push(*acts_, token); }
std::size_t DecodeSession::length() const { return acts_->tokens.size(); }

SequenceLogprob sequence_logprob(const ToyLM& model, std::span<const TokenId> prompt_ids,
                                 std::span<const TokenId> response_ids) {
  if (prompt_ids.empty()) throw ContractError("prompt must contain at least one token");
  if (prompt_ids.size() + response_ids.size() > static_cast<std::size_t>(model.config().context_len))
    throw ContractError("prompt and response exceed context_len");
  TokenSeq seq(prompt_ids.begin(), prompt_ids.end());
  seq.insert(seq.end(), response_ids.begin(), response_ids.end());
  // The last token never predicts anything we score.
  const Matrix logits = model.forward_logits(std::span<const TokenId>(seq).first(seq.size() - 1));
  SequenceLogprob out;
  out.per_token.reserve(response_ids.size());
  for (std::size_t i = 0; i < response_ids.size(); ++i) {
    const std::size_t row = prompt_ids.size() - 1 + i;
    const double lp = logits(row, response_ids[i]) - logsumexp(logits.row(row));
    out.per_token.push_back(lp);
    out.total += lp;
  }
  return out;
}

SampleResult sample(const ToyLM& model, std::span<const TokenId> prompt_ids, const DecodeParams& decode, Rng& rng) {
  if (prompt_ids.empty()) throw ContractError("prompt must contain at least one token");
  if (prompt_ids.size() > static_cast<std::size_t>(model.config().context_len))
    throw ContractError("prompt exceeds context_len");
  DecodeSession session(model);
  std::span<const double> row;
  for (TokenId tok : prompt_ids) row = session.push(tok);
  SampleResult out;
  const auto ctx = static_cast<std::size_t>(model.config().context_len);
  // A token can be generated while the context holds fewer than ctx tokens;
  // the last generated token is never fed back.
  while (static_cast<int>(out.tokens.size()) < decode.max_tokens) {
    const std::vector<double> probs = apply_decode_filters(row, decode);
    const TokenId tok = sample_index(probs, rng.uniform());
    out.logprobs.push_back(row[static_cast<std::size_t>(tok)] - logsumexp(row));
    out.tokens.push_back(tok);
    if (tok == Vocab::kEos) {
      out.stopped = true;
      break;
    }
    if (session.length() >= ctx) break;
    row = session.push(tok);
  }
  return out;
}

LossAndGrad loss_and_grad(const ToyLM& model, const LossClosure& closure, const ForwardOptions& options) {
  LossAndGrad out;
  out.grad.assign(model.trainable_params().size(), 0.0);
  for (std::size_t i = 0; i < closure.sequences.size(); ++i) {
    const TokenSeq& seq = closure.sequences[i];
    auto acts = model.begin(options);
    for (TokenId tok : seq) model.push(*acts, tok);
    Matrix logits(seq.size(), Vocab::kSize);
    logits.data = acts->logits;
    Matrix dlogits(seq.size(), Vocab::kSize);
    out.loss += closure.objective(i, logits, dlogits);
    bool any = false;
    for (double g : dlogits.data) {
      if (!std::isfinite(g)) throw Error("non-finite loss gradient");
      any = any || g != 0.0;
    }
    if (any) model.backward(*acts, dlogits, out.grad);
  }
  if (!std::isfinite(out.loss)) throw Error("non-finite loss");
  return out;
}

std::vector<double> grad(const ToyLM& model, const LossClosure& closure) { return loss_and_grad(model, closure).grad; }

double loss_value(const ToyLM& model, const LossClosure& closure, const ForwardOptions& options) {
  double loss = 0.0;
  for (std::size_t i = 0; i < closure.sequences.size(); ++i) {
    const TokenSeq& seq = closure.sequences[i];
    auto acts = model.begin(options);
    for (TokenId tok : seq) model.push(*acts, tok);
    Matrix logits(seq.size(), Vocab::kSize);
    logits.data = std::move(acts->logits);
    Matrix dlogits(seq.size(), Vocab::kSize);
    loss += closure.objective(i, logits, dlogits);
  }
  if (!std::isfinite(loss)) throw Error("non-finite loss");
  return loss;
}

ReferenceSnapshot snapshot_reference(const ToyLM& model) { return ReferenceSnapshot(model); }
ReferenceSnapshot snapshot_reference(const ReferenceSnapshot& snapshot) { return snapshot; }

}  // namespace thinksafe
