#pragma once

#include <cstdint>
#include <memory>
#include <shared_mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "refilter/corpus/corpus.hpp"
#include "refilter/numerics/ops.hpp"
#include "refilter/numerics/optim.hpp"
#include "refilter/retriever/bm25.hpp"

namespace refilter::context {

using nn::Tensor;

struct EncoderConfig {
  std::size_t vocab_size = 2048;
  std::size_t d_encoder = 32;  // d_e
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;
  std::size_t chunk_len = 16;  // s
  std::size_t d_model = 64;    // backbone width, target of the projection

  void validate() const;
};

// Small bidirectional transformer over one fixed-length chunk plus the
// bias-free projection W_p into the backbone width. Parameter names start
// with "encoder." and "proj.".
class ContextEncoder {
 public:
  ContextEncoder(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }
  const Tensor& projection() const { return proj_w_; }

  // [s x d_e] token features. Throws DimensionError unless ids.size() == s.
  Tensor encode_chunk(std::span<const int> ids) const;
  // Packed [n*s x d_e] features for n chunks (row block i belongs to chunk i).
  Tensor encode_chunks(const std::vector<std::span<const int>>& chunks) const;
  // f . W_p, no bias.
  Tensor project(const Tensor& f) const;

  // FNV-1a hash over the encoder parameter bytes (projection excluded, since
  // the cache stores pre-projection features).
  std::uint64_t stamp() const;

 private:
  EncoderConfig config_;
  nn::ParameterSet params_;
  struct LayerParams {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  Tensor tok_emb_, pos_emb_, lnf_g_, lnf_b_, proj_w_;
  std::vector<LayerParams> layers_;
};

// Pre-projection features keyed by chunk ordinal, valid for one encoder
// stamp. Readers share, writers are exclusive.
class FeatureCache {
 public:
  FeatureCache(std::uint64_t stamp, std::size_t d_encoder, std::size_t chunk_len,
               std::size_t count);

  std::uint64_t stamp() const { return stamp_; }
  std::size_t d_encoder() const { return d_e_; }
  std::size_t chunk_len() const { return s_; }
  std::size_t count() const { return present_.size(); }
  std::size_t filled() const;

  // nullopt on miss or when `stamp` differs from the cache stamp.
  std::optional<std::vector<double>> get(std::size_t ordinal, std::uint64_t stamp) const;
  // A put under a new stamp first invalidates every entry.
  void put(std::size_t ordinal, std::uint64_t stamp, std::span<const double> feature);

  // Header (magic, version, stamp, d_e, s, count) then `count` fixed-size
  // records: presence byte plus s*d_e doubles.
  void save(const std::string& path) const;
  // Throws CacheError on a corrupt or truncated file, FileError when missing.
  static FeatureCache load(const std::string& path);

 private:
  std::uint64_t stamp_;
  std::size_t d_e_, s_;
  std::vector<unsigned char> present_;
  std::vector<double> data_;
  std::shared_ptr<std::shared_mutex> mu_;
};

// Encodes every chunk of the store and fills a fresh cache.
FeatureCache build_cache(const ContextEncoder& encoder, const corpus::ChunkStore& store);

struct TokenOrigin {
  std::string chunk_id;
  std::size_t rank = 0;    // position of the chunk in the retrieval list
  std::size_t offset = 0;  // within-chunk position
};

// Flattened token pool for one query: N = k*s rows.
struct ContextEmbeddings {
  Tensor C;                         // [N x d_m]
  std::size_t k = 0, s = 0;
  std::vector<TokenOrigin> origin;  // size N
  std::vector<int> token_ids;       // size N
  std::vector<bool> is_pad;         // padding token inside its chunk
  std::vector<bool> is_noise;       // token from a noise-pool chunk
  std::vector<bool> filler_hit;     // chunk was retrieval padding, not a match

  std::size_t size() const { return origin.size(); }
};

// (rank, offset) of pool slot j.
inline std::pair<std::size_t, std::size_t> pool_origin(std::size_t j, std::size_t s) {
  return {j / s, j % s};
}

// Features for the retrieved chunks in rank order, concatenated and
// projected. Requires exactly result.k hits (DimensionError otherwise). Uses
// the cache when given and its stamp matches; a miss falls back to encoding
// unless `cache_only`, in which case it throws CacheError. With
// `fresh_features` the cache is bypassed so gradients reach the encoder.
struct PoolOptions {
  const FeatureCache* cache = nullptr;
  bool cache_only = false;
  bool fresh_features = false;
};
ContextEmbeddings build_pool(const retriever::RetrievalResult& result,
                             const corpus::ChunkStore& store, const ContextEncoder& encoder,
                             const PoolOptions& options = {});

struct PoolChunk {
  const corpus::Chunk* chunk = nullptr;
  std::size_t ordinal = 0;  // position in the chunk store (cache key)
  bool filler = false;
};

// Hits of a retrieval result resolved against the store, in rank order.
std::vector<PoolChunk> pool_chunks(const retriever::RetrievalResult& result,
                                   const corpus::ChunkStore& store);

// Same as build_pool for an explicit chunk list (noise-injected or shuffled
// retrievals). k is the list length.
ContextEmbeddings build_pool(const std::vector<PoolChunk>& chunks, const ContextEncoder& encoder,
                             const PoolOptions& options = {});

}  // namespace refilter::context
