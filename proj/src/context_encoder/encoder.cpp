#include "refilter/context_encoder/encoder.hpp"

#include <cmath>
#include <cstring>
#include <mutex>
#include <random>

#include "refilter/binary_io.hpp"
#include "refilter/errors.hpp"

namespace refilter::context {
namespace {

using namespace refilter::nn;

constexpr char kCacheMagic[8] = {'R', 'F', 'F', 'E', 'A', 'T', 'C', 'H'};
constexpr std::uint32_t kCacheVersion = 1;

Tensor normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

void EncoderConfig::validate() const {
  if (n_layers < 1) throw ConfigError("encoder n_layers must be at least 1");
  if (n_heads < 1 || d_encoder % n_heads != 0) {
    throw ConfigError("encoder d_encoder " + std::to_string(d_encoder) +
                      " must be divisible by n_heads " + std::to_string(n_heads));
  }
  if (chunk_len < 1) throw ConfigError("encoder chunk_len must be at least 1");
  if (vocab_size < 4) throw ConfigError("encoder vocab_size must be at least 4");
  if (d_model < 1) throw ConfigError("encoder d_model must be at least 1");
}

ContextEncoder::ContextEncoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_encoder;
  const std::size_t f = config_.d_ff;
  const double out_std = 0.02 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  tok_emb_ = params_.add("encoder.tok_emb", normal_init({config_.vocab_size, d}, 0.02, rng));
  pos_emb_ = params_.add("encoder.pos_emb", normal_init({config_.chunk_len, d}, 0.02, rng));
  for (std::size_t l = 1; l <= config_.n_layers; ++l) {
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    LayerParams lp;
    lp.ln1_g = params_.add(p + "ln1.gain", Tensor::full({d}, 1.0));
    lp.ln1_b = params_.add(p + "ln1.bias", Tensor::zeros({d}));
    lp.wq = params_.add(p + "attn.wq", normal_init({d, d}, 0.02, rng));
    lp.bq = params_.add(p + "attn.bq", Tensor::zeros({d}));
    lp.wk = params_.add(p + "attn.wk", normal_init({d, d}, 0.02, rng));
    lp.bk = params_.add(p + "attn.bk", Tensor::zeros({d}));
    lp.wv = params_.add(p + "attn.wv", normal_init({d, d}, 0.02, rng));
    lp.bv = params_.add(p + "attn.bv", Tensor::zeros({d}));
    lp.wo = params_.add(p + "attn.wo", normal_init({d, d}, out_std, rng));
    lp.bo = params_.add(p + "attn.bo", Tensor::zeros({d}));
    lp.ln2_g = params_.add(p + "ln2.gain", Tensor::full({d}, 1.0));
    lp.ln2_b = params_.add(p + "ln2.bias", Tensor::zeros({d}));
    lp.w1 = params_.add(p + "ff.w1", normal_init({d, f}, 0.02, rng));
    lp.b1 = params_.add(p + "ff.b1", Tensor::zeros({f}));
    lp.w2 = params_.add(p + "ff.w2", normal_init({f, d}, out_std, rng));
    lp.b2 = params_.add(p + "ff.b2", Tensor::zeros({d}));
    layers_.push_back(lp);
  }
  lnf_g_ = params_.add("encoder.lnf.gain", Tensor::full({d}, 1.0));
  lnf_b_ = params_.add("encoder.lnf.bias", Tensor::zeros({d}));
  proj_w_ = params_.add("proj.w",
                        normal_init({d, config_.d_model}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
}

Tensor ContextEncoder::encode_chunk(std::span<const int> ids) const {
  return encode_chunks({ids});
}

Tensor ContextEncoder::encode_chunks(const std::vector<std::span<const int>>& chunks) const {
  const std::size_t s = config_.chunk_len;
  std::vector<int> ids;
  std::vector<std::size_t> pos;
  ids.reserve(chunks.size() * s);
  for (const auto& c : chunks) {
    if (c.size() != s) {
      throw DimensionError("chunk has " + std::to_string(c.size()) + " tokens, encoder expects " +
                           std::to_string(s));
    }
    for (std::size_t t = 0; t < s; ++t) {
      if (c[t] < 0 || static_cast<std::size_t>(c[t]) >= config_.vocab_size) {
        throw IndexError("token id " + std::to_string(c[t]) + " outside encoder vocabulary");
      }
      ids.push_back(c[t]);
      pos.push_back(t);
    }
  }
  if (chunks.empty()) return Tensor::zeros({0, config_.d_encoder});
  Tensor x = add(embedding(tok_emb_, ids), embedding(pos_emb_, std::vector<int>(pos.begin(), pos.end())));
  std::vector<AttnSegment> segs(chunks.size());
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    segs[i].q_begin = segs[i].k_begin = i * s;
    segs[i].q_len = segs[i].k_len = s;
  }
  for (const LayerParams& lp : layers_) {
    Tensor h = layer_norm(x, lp.ln1_g, lp.ln1_b);
    Tensor a = attention(linear(h, lp.wq, lp.bq), linear(h, lp.wk, lp.bk), linear(h, lp.wv, lp.bv),
                         segs, config_.n_heads, /*causal=*/false);
    x = add(x, linear(a, lp.wo, lp.bo));
    Tensor h2 = layer_norm(x, lp.ln2_g, lp.ln2_b);
    x = add(x, linear(gelu(linear(h2, lp.w1, lp.b1)), lp.w2, lp.b2));
  }
  return layer_norm(x, lnf_g_, lnf_b_);
}

Tensor ContextEncoder::project(const Tensor& f) const {
  if (f.rank() != 2 || f.dim(1) != config_.d_encoder) {
    throw DimensionError("project expects [* x " + std::to_string(config_.d_encoder) + "], got " +
                         shape_str(f.shape()));
  }
  return linear(f, proj_w_);
}

std::uint64_t ContextEncoder::stamp() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params_.items()) {
    if (p.name.rfind("encoder.", 0) != 0) continue;
    mix(p.name.data(), p.name.size());
    const auto v = p.tensor.values();
    mix(v.data(), v.size() * sizeof(double));
  }
  return h;
}

// ---- FeatureCache -----------------------------------------------------------

FeatureCache::FeatureCache(std::uint64_t stamp, std::size_t d_encoder, std::size_t chunk_len,
                           std::size_t count)
    : stamp_(stamp),
      d_e_(d_encoder),
      s_(chunk_len),
      present_(count, 0),
      data_(count * d_encoder * chunk_len, 0.0),
      mu_(std::make_shared<std::shared_mutex>()) {}

std::size_t FeatureCache::filled() const {
  std::shared_lock lock(*mu_);
  std::size_t n = 0;
  for (unsigned char p : present_) n += p;
  return n;
}

std::optional<std::vector<double>> FeatureCache::get(std::size_t ordinal,
                                                     std::uint64_t stamp) const {
  std::shared_lock lock(*mu_);
  if (stamp != stamp_ || ordinal >= present_.size() || !present_[ordinal]) return std::nullopt;
  const std::size_t rec = d_e_ * s_;
  const auto b = data_.begin() + static_cast<std::ptrdiff_t>(ordinal * rec);
  return std::vector<double>(b, b + static_cast<std::ptrdiff_t>(rec));
}

void FeatureCache::put(std::size_t ordinal, std::uint64_t stamp, std::span<const double> feature) {
  std::unique_lock lock(*mu_);
  const std::size_t rec = d_e_ * s_;
  if (ordinal >= present_.size()) {
    throw IndexError("cache ordinal " + std::to_string(ordinal) + " out of range " +
                     std::to_string(present_.size()));
  }
  if (feature.size() != rec) {
    throw DimensionError("cache record needs " + std::to_string(rec) + " values, got " +
                         std::to_string(feature.size()));
  }
  if (stamp != stamp_) {
    std::fill(present_.begin(), present_.end(), 0);
    stamp_ = stamp;
  }
  std::copy(feature.begin(), feature.end(), data_.begin() + static_cast<std::ptrdiff_t>(ordinal * rec));
  present_[ordinal] = 1;
}

void FeatureCache::save(const std::string& path) const {
  std::shared_lock lock(*mu_);
  io::Writer w;
  w.put_raw(std::string(kCacheMagic, sizeof(kCacheMagic)));
  w.put<std::uint32_t>(kCacheVersion);
  w.put<std::uint64_t>(stamp_);
  w.put<std::uint64_t>(d_e_);
  w.put<std::uint64_t>(s_);
  w.put<std::uint64_t>(present_.size());
  const std::size_t rec = d_e_ * s_;
  for (std::size_t i = 0; i < present_.size(); ++i) {
    w.put<std::uint8_t>(present_[i]);
    w.put_doubles(data_.data() + i * rec, rec);
  }
  io::write_file_atomic(path, w.bytes());
}

FeatureCache FeatureCache::load(const std::string& path) {
  const std::string bytes = io::read_file(path);
  io::Reader<CacheError> r(bytes, "feature cache " + path);
  char magic[sizeof(kCacheMagic)];
  for (char& c : magic) c = r.get<char>();
  if (std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0) {
    throw CacheError("feature cache " + path + ": bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCacheVersion) {
    throw CacheError("feature cache " + path + ": unsupported version " + std::to_string(version));
  }
  const auto stamp = r.get<std::uint64_t>();
  const auto d_e = r.get<std::uint64_t>();
  const auto s = r.get<std::uint64_t>();
  const auto count = r.get<std::uint64_t>();
  const std::size_t rec = d_e * s;
  if (d_e == 0 || s == 0 || bytes.size() - r.pos() != count * (1 + rec * sizeof(double))) {
    throw CacheError("feature cache " + path + ": size does not match header");
  }
  FeatureCache c(stamp, d_e, s, count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto flag = r.get<std::uint8_t>();
    if (flag > 1) throw CacheError("feature cache " + path + ": bad record flag");
    c.present_[i] = flag;
    r.get_doubles(c.data_.data() + i * rec, rec);
  }
  return c;
}

FeatureCache build_cache(const ContextEncoder& encoder, const corpus::ChunkStore& store) {
  const auto& cfg = encoder.config();
  FeatureCache cache(encoder.stamp(), cfg.d_encoder, cfg.chunk_len, store.size());
  const std::uint64_t stamp = encoder.stamp();
  constexpr std::size_t kBatch = 64;
  for (std::size_t b = 0; b < store.size(); b += kBatch) {
    std::vector<std::span<const int>> ids;
    for (std::size_t i = b; i < std::min(store.size(), b + kBatch); ++i) {
      ids.emplace_back(store.at(i).token_ids);
    }
    const Tensor f = encoder.encode_chunks(ids);
    const std::size_t rec = cfg.d_encoder * cfg.chunk_len;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      cache.put(b + i, stamp, f.values().subspan(i * rec, rec));
    }
  }
  return cache;
}

// ---- pools ------------------------------------------------------------------

std::vector<PoolChunk> pool_chunks(const retriever::RetrievalResult& result,
                                   const corpus::ChunkStore& store) {
  if (result.hits.size() != result.k) {
    throw DimensionError("retrieval for '" + result.query_id + "' has " +
                         std::to_string(result.hits.size()) + " hits, pool needs exactly k=" +
                         std::to_string(result.k));
  }
  std::vector<PoolChunk> out;
  out.reserve(result.hits.size());
  for (const auto& h : result.hits) {
    const std::size_t ord = store.ordinal(h.chunk_id);
    out.push_back({&store.at(ord), ord, h.padded});
  }
  return out;
}

ContextEmbeddings build_pool(const retriever::RetrievalResult& result,
                             const corpus::ChunkStore& store, const ContextEncoder& encoder,
                             const PoolOptions& options) {
  return build_pool(pool_chunks(result, store), encoder, options);
}

ContextEmbeddings build_pool(const std::vector<PoolChunk>& chunks, const ContextEncoder& encoder,
                             const PoolOptions& options) {
  const auto& cfg = encoder.config();
  const std::size_t s = cfg.chunk_len;
  const std::size_t de = cfg.d_encoder;
  const std::size_t k = chunks.size();
  if (k == 0) throw DimensionError("build_pool needs at least one chunk");
  const std::uint64_t stamp =
      (options.cache != nullptr && !options.fresh_features) ? encoder.stamp() : 0;

  ContextEmbeddings pool;
  pool.k = k;
  pool.s = s;
  std::vector<Tensor> parts(k);
  std::vector<std::span<const int>> to_encode;
  std::vector<std::size_t> encode_slot;
  for (std::size_t i = 0; i < k; ++i) {
    const corpus::Chunk& c = *chunks[i].chunk;
    if (c.token_ids.size() != s) {
      throw DimensionError("chunk " + c.chunk_id + " has " + std::to_string(c.token_ids.size()) +
                           " tokens, pool expects " + std::to_string(s));
    }
    for (std::size_t t = 0; t < s; ++t) {
      pool.origin.push_back({c.chunk_id, i, t});
      pool.token_ids.push_back(c.token_ids[t]);
      pool.is_pad.push_back(t >= c.length);
      pool.is_noise.push_back(c.is_noise);
      pool.filler_hit.push_back(chunks[i].filler);
    }
    std::optional<std::vector<double>> hit;
    if (options.cache != nullptr && !options.fresh_features) {
      hit = options.cache->get(chunks[i].ordinal, stamp);
      if (!hit && options.cache_only) {
        throw CacheError("no cached feature for chunk " + c.chunk_id);
      }
    }
    if (hit) {
      parts[i] = Tensor({s, de}, std::move(*hit));
    } else {
      to_encode.emplace_back(c.token_ids);
      encode_slot.push_back(i);
    }
  }
  if (!to_encode.empty()) {
    const Tensor f = encoder.encode_chunks(to_encode);
    if (to_encode.size() == k) {
      pool.C = encoder.project(f);
      return pool;
    }
    for (std::size_t e = 0; e < encode_slot.size(); ++e) {
      std::vector<std::size_t> rows(s);
      for (std::size_t t = 0; t < s; ++t) rows[t] = e * s + t;
      parts[encode_slot[e]] = gather_rows(f, rows);
    }
  }
  pool.C = encoder.project(k == 1 ? parts[0] : concat_rows(parts));
  return pool;
}

}  // namespace refilter::context
