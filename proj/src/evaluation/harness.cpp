#include "refilter/evaluation/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <random>
#include <set>

#include "refilter/backbone/decode.hpp"
#include "refilter/errors.hpp"
#include "refilter/evaluation/metrics.hpp"
#include "refilter/evaluation/prompt.hpp"

namespace refilter::evaluation {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed;
  for (std::uint64_t v : {a, b}) {
    z += 0x9e3779b97f4a7c15ULL * (v + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
  }
  return z;
}

void require_method(const std::string& m) {
  if (m != kNoRetrieval && m != kSrag && m != kReFilter) {
    throw ConfigError("unknown method '" + m + "' (expected no_retrieval, srag or refilter)");
  }
}

std::vector<int> before_eos(const std::vector<int>& tokens) {
  auto it = std::find(tokens.begin(), tokens.end(), corpus::kEosId);
  return {tokens.begin(), it};
}

std::vector<const corpus::Chunk*> chunk_ptrs(const std::vector<context::PoolChunk>& chunks) {
  std::vector<const corpus::Chunk*> out;
  for (const auto& c : chunks) out.push_back(c.chunk);
  return out;
}

std::vector<corpus::Chunk> chunk_copies(const std::vector<context::PoolChunk>& chunks) {
  std::vector<corpus::Chunk> out;
  for (const auto& c : chunks) out.push_back(*c.chunk);
  return out;
}

const fusion::ReFilter& require_refilter(const Models& models, std::size_t k) {
  if (models.refilter == nullptr) throw ConfigError("method refilter needs a trained model");
  if (models.refilter->config().k != k) {
    throw ConfigError("refilter model was built for k=" + std::to_string(models.refilter->config().k) +
                      ", condition asks for k=" + std::to_string(k));
  }
  return *models.refilter;
}

const backbone::Backbone& require_backbone(const Models& models) {
  if (models.backbone != nullptr) return *models.backbone;
  if (models.refilter != nullptr) return models.refilter->backbone();
  throw ConfigError("evaluation needs a backbone");
}

context::PoolOptions pool_options(const Models& models) {
  context::PoolOptions o;
  o.cache = models.cache;
  return o;
}

}  // namespace

Task make_task(corpus::Vocabulary vocab, const std::vector<corpus::Document>& corpus,
               const std::vector<corpus::Document>& noise,
               const std::vector<corpus::QAExample>& qa, std::size_t chunk_len) {
  Task t;
  t.vocab = std::move(vocab);
  std::vector<corpus::Chunk> chunks =
      corpus::ChunkStore::from_documents(corpus, chunk_len, t.vocab).chunks();
  t.num_corpus_chunks = chunks.size();
  t.index = retriever::build_index(chunks);
  t.noise_pool = corpus::ChunkStore::from_documents(noise, chunk_len, t.vocab, true).chunks();
  chunks.insert(chunks.end(), t.noise_pool.begin(), t.noise_pool.end());
  t.store = corpus::ChunkStore(std::move(chunks));
  corpus::validate_gold(qa, t.store);
  for (const auto& q : qa) (q.split == corpus::Split::kTest ? t.test : t.train).push_back(q);
  return t;
}

std::vector<std::vector<context::PoolChunk>> deliver(const Task& task,
                                                     const std::vector<corpus::QAExample>& queries,
                                                     std::size_t k, double noise_fraction,
                                                     bool shuffle, std::uint64_t seed) {
  std::vector<std::vector<context::PoolChunk>> out(queries.size());
  if (k == 0) return out;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto r = retriever::search(task.index, queries[i].question, k, {.pad_to_k = true},
                                     queries[i].id);
    const std::vector<context::PoolChunk> hits = context::pool_chunks(r, task.store);
    const std::vector<corpus::Chunk> noisy =
        corpus::inject_noise(chunk_copies(hits), task.noise_pool, noise_fraction, derive(seed, i, 1));
    std::vector<context::PoolChunk> slots;
    for (std::size_t j = 0; j < noisy.size(); ++j) {
      const std::size_t ord = task.store.ordinal(noisy[j].chunk_id);
      slots.push_back({&task.store.at(ord), ord, noisy[j].is_noise ? false : hits[j].filler});
    }
    if (shuffle) {
      std::mt19937_64 rng(derive(seed, i, 2));
      std::shuffle(slots.begin(), slots.end(), rng);
    }
    out[i] = std::move(slots);
  }
  return out;
}

EvalReport evaluate(const Task& task, const std::vector<corpus::QAExample>& queries,
                    const Condition& condition, const Models& models, const EvalOptions& options) {
  require_method(condition.method);
  const backbone::Backbone& bb = require_backbone(models);
  const bool is_refilter = condition.method == kReFilter;
  const bool retrieves = condition.method != kNoRetrieval;
  if (is_refilter) require_refilter(models, condition.k);
  if (retrieves && condition.k == 0) throw ConfigError(condition.method + " needs k >= 1");

  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (queries[i].answers.empty()) {
      std::cerr << "warning: skipping query " << queries[i].id << " with no gold answer\n";
      continue;
    }
    keep.push_back(i);
  }
  const auto delivered = retrieves ? deliver(task, queries, condition.k, condition.noise_fraction,
                                             condition.shuffle, condition.seed)
                                   : std::vector<std::vector<context::PoolChunk>>(queries.size());

  EvalReport report;
  report.condition = condition;
  GateStats gs;
  double sum_all = 0.0, sum_gold = 0.0, sum_noise = 0.0;
  backbone::DecodeOptions dec;
  dec.max_new = options.max_new;
  const std::size_t bs = std::max<std::size_t>(options.batch_size, 1);

  for (std::size_t start = 0; start < keep.size(); start += bs) {
    const std::size_t end = std::min(keep.size(), start + bs);
    std::vector<std::vector<int>> prompts;
    std::vector<bool> truncated;
    for (std::size_t n = start; n < end; ++n) {
      const auto& q = queries[keep[n]];
      if (condition.method == kSrag) {
        SragPrompt p = srag_prompt(task.vocab, chunk_copies(delivered[keep[n]]), q.question,
                                   bb.config().max_positions, options.max_new);
        prompts.push_back(std::move(p.tokens));
        truncated.push_back(p.truncated);
      } else {
        prompts.push_back(question_prompt(task.vocab, q.question));
        truncated.push_back(false);
      }
    }

    std::vector<std::vector<int>> outputs;
    if (is_refilter) {
      const fusion::ReFilter& model = *models.refilter;
      std::vector<context::ContextEmbeddings> pools;
      for (std::size_t n = start; n < end; ++n) {
        pools.push_back(context::build_pool(delivered[keep[n]], model.encoder(), pool_options(models)));
      }
      std::vector<const context::ContextEmbeddings*> ptrs;
      for (const auto& p : pools) ptrs.push_back(&p);
      fusion::HookState state;
      state.keep_records = true;
      outputs = fusion::fused_generate(model, prompts, ptrs, state, dec);
      for (const auto& rec : state.records) {
        if (rec.call != 0) continue;
        const auto& pool = pools[rec.b];
        const auto& gold = queries[keep[start + rec.b]].gold_chunk_ids;
        for (std::size_t j = 0; j < rec.gamma.size(); ++j) {
          const double g = rec.gamma[j];
          sum_all += g;
          ++gs.n_all;
          if (pool.is_pad[j]) continue;
          if (pool.is_noise[j]) {
            sum_noise += g;
            ++gs.n_noise;
          }
          if (std::find(gold.begin(), gold.end(), pool.origin[j].chunk_id) != gold.end()) {
            sum_gold += g;
            ++gs.n_gold;
          }
        }
      }
    } else {
      outputs = backbone::generate(bb, prompts, nullptr, dec);
    }

    for (std::size_t n = start; n < end; ++n) {
      const auto& q = queries[keep[n]];
      EvalRecord r;
      r.query_id = q.id;
      r.question = q.question;
      r.prediction = task.vocab.decode(before_eos(outputs[n - start]));
      r.answers = q.answers;
      r.metric = exact_match(r.prediction, q.answers);
      r.f1 = token_f1(r.prediction, q.answers);
      r.truncated = truncated[n - start];
      r.prompt_tokens = prompts[n - start].size();
      r.condition = condition;
      if (retrieves && !q.gold_chunk_ids.empty()) {
        bool hit = false;
        for (const auto* c : chunk_ptrs(delivered[keep[n]])) {
          const auto& g = q.gold_chunk_ids;
          hit = hit || std::find(g.begin(), g.end(), c->chunk_id) != g.end();
        }
        r.recall = hit ? 1.0 : 0.0;
      }
      report.records.push_back(std::move(r));
    }
  }
  if (is_refilter) {
    gs.mean_all = gs.n_all ? sum_all / static_cast<double>(gs.n_all) : 0.0;
    gs.mean_gold = gs.n_gold ? sum_gold / static_cast<double>(gs.n_gold) : 0.0;
    gs.mean_noise = gs.n_noise ? sum_noise / static_cast<double>(gs.n_noise) : 0.0;
    report.gates = gs;
  }
  report.finalize();
  return report;
}

DecouplingResult run_decoupling(const Task& task, const std::vector<corpus::QAExample>& queries,
                                const std::vector<std::size_t>& k_values,
                                const backbone::Backbone& backbone,
                                const std::map<std::size_t, const fusion::ReFilter*>& refilter_by_k,
                                std::uint64_t seed, const EvalOptions& options) {
  DecouplingResult out;
  out.rows = retriever::recall_vs_k_sweep(task.index, queries, k_values);
  Models base;
  base.backbone = &backbone;
  EvalReport none = evaluate(task, queries, {"decoupling", kNoRetrieval, 0, 0.0, false, seed}, base, options);
  for (auto& row : out.rows) {
    row.downstream[kNoRetrieval] = none.mean_metric;
    EvalReport s = evaluate(task, queries, {"decoupling", kSrag, row.k, 0.0, false, seed}, base, options);
    row.downstream[kSrag] = s.mean_metric;
    out.reports.push_back(std::move(s));
    auto it = refilter_by_k.find(row.k);
    if (it != refilter_by_k.end() && it->second != nullptr) {
      Models m = base;
      m.refilter = it->second;
      EvalReport r = evaluate(task, queries, {"decoupling", kReFilter, row.k, 0.0, false, seed}, m, options);
      row.downstream[kReFilter] = r.mean_metric;
      out.reports.push_back(std::move(r));
    }
  }
  out.reports.push_back(std::move(none));
  return out;
}

std::vector<EvalReport> run_noise(const Task& task, const std::vector<corpus::QAExample>& queries,
                                  const std::vector<double>& fractions,
                                  const std::vector<std::string>& methods, const Models& models,
                                  std::size_t k, std::uint64_t seed, const EvalOptions& options) {
  std::vector<EvalReport> out;
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("noise fraction must lie in [0, 1]");
    for (const auto& m : methods) {
      out.push_back(evaluate(task, queries, {"noise", m, k, f, false, seed}, models, options));
    }
  }
  return out;
}

ShuffleResult run_shuffle(const Task& task, const std::vector<corpus::QAExample>& queries,
                          const std::vector<std::string>& methods, const Models& models,
                          std::size_t k, std::uint64_t seed, const EvalOptions& options) {
  ShuffleResult out;
  for (const auto& m : methods) {
    EvalReport in = evaluate(task, queries, {"shuffle", m, k, 0.0, false, seed}, models, options);
    EvalReport sh = evaluate(task, queries, {"shuffle", m, k, 0.0, true, seed}, models, options);
    std::vector<double> d;
    double abs_sum = 0.0;
    for (std::size_t i = 0; i < in.records.size(); ++i) {
      d.push_back(sh.records[i].metric - in.records[i].metric);
      abs_sum += std::abs(d.back());
    }
    out.mean_abs_delta[m] = d.empty() ? 0.0 : abs_sum / static_cast<double>(d.size());
    out.deltas[m] = std::move(d);
    out.in_order.push_back(std::move(in));
    out.shuffled.push_back(std::move(sh));
  }
  return out;
}

std::size_t prompt_tokens(const Task& task, const corpus::QAExample& query,
                          const std::string& method, const std::vector<context::PoolChunk>& chunks,
                          std::size_t max_positions, std::size_t reserve) {
  require_method(method);
  if (method != kSrag) return question_prompt(task.vocab, query.question).size();
  return srag_prompt(task.vocab, chunk_copies(chunks), query.question, max_positions, reserve)
      .tokens.size();
}

std::vector<LatencyReport> run_latency(const Task& task,
                                       const std::vector<corpus::QAExample>& queries,
                                       const std::vector<std::string>& methods,
                                       const Models& models, std::size_t k,
                                       const LatencyOptions& options) {
  if (queries.empty()) throw DataError("latency run needs at least one query");
  if (options.gen_tokens == 0) throw ConfigError("latency run needs gen_tokens >= 1");
  const backbone::Backbone& bb = require_backbone(models);
  const std::size_t max_pos = bb.config().max_positions;
  const auto delivered = deliver(task, queries, k, 0.0, false, 0);
  backbone::DecodeOptions dec;
  dec.max_new = options.gen_tokens;
  dec.stop_at_eos = false;

  std::vector<std::vector<std::vector<int>>> prompts(methods.size());
  for (std::size_t m = 0; m < methods.size(); ++m) {
    require_method(methods[m]);
    if (methods[m] == kReFilter) require_refilter(models, k);
    for (std::size_t i = 0; i < queries.size(); ++i) {
      if (methods[m] == kSrag) {
        prompts[m].push_back(srag_prompt(task.vocab, chunk_copies(delivered[i]), queries[i].question,
                                         max_pos, options.gen_tokens)
                                 .tokens);
      } else {
        prompts[m].push_back(question_prompt(task.vocab, queries[i].question));
      }
    }
  }
  for (std::size_t b : options.batch_sizes) {
    if (b == 0) throw ConfigError("batch sizes must be positive");
  }

  struct Samples {
    std::vector<double> per_query_ms, ttft_ms, rate;
    double prompt_sum = 0.0;
    std::size_t prompt_n = 0;
  };
  const std::size_t nb = options.batch_sizes.size();
  std::vector<Samples> samples(methods.size() * nb);
  // Trial t visits every (method, batch size) in turn, so slow stretches of
  // the machine hit all configurations alike instead of one of them.
  for (std::size_t t = 0; t < options.warmup + options.trials; ++t) {
    for (std::size_t m = 0; m < methods.size(); ++m) {
      const std::string& method = methods[m];
      for (std::size_t bi = 0; bi < nb; ++bi) {
        const std::size_t b = options.batch_sizes[bi];
        std::vector<std::size_t> idx;
        for (std::size_t j = 0; j < b; ++j) idx.push_back((t * b + j) % queries.size());
        std::vector<std::vector<int>> batch;
        for (std::size_t i : idx) batch.push_back(prompts[m][i]);
        backbone::DecodeTiming timing;
        const auto t0 = Clock::now();
        double pool_s = 0.0;
        if (method == kReFilter) {
          std::vector<context::ContextEmbeddings> pools;
          for (std::size_t i : idx) {
            pools.push_back(context::build_pool(delivered[i], models.refilter->encoder(), pool_options(models)));
          }
          pool_s = seconds_since(t0);
          std::vector<const context::ContextEmbeddings*> ptrs;
          for (const auto& p : pools) ptrs.push_back(&p);
          fusion::HookState state;
          fusion::fused_generate(*models.refilter, batch, ptrs, state, dec, &timing);
        } else {
          backbone::generate(bb, batch, nullptr, dec, &timing);
        }
        const double total = seconds_since(t0);
        if (t < options.warmup) continue;
        Samples& s = samples[m * nb + bi];
        s.per_query_ms.push_back(1e3 * total / static_cast<double>(b));
        s.ttft_ms.push_back(1e3 * (pool_s + timing.first_token_seconds));
        const double steady = timing.total_seconds - timing.first_token_seconds;
        const double steady_tokens = static_cast<double>(timing.generated_tokens - b);
        s.rate.push_back(steady > 0.0 ? steady_tokens / steady : 0.0);
        for (const auto& p : batch) s.prompt_sum += static_cast<double>(p.size());
        s.prompt_n += batch.size();
      }
    }
  }

  std::vector<LatencyReport> out;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    for (std::size_t bi = 0; bi < nb; ++bi) {
      const Samples& s = samples[m * nb + bi];
      LatencyReport r;
      r.method = methods[m];
      r.batch_size = options.batch_sizes[bi];
      r.k = methods[m] == kNoRetrieval ? 0 : k;
      r.trials = options.trials;
      r.gen_tokens = options.gen_tokens;
      double sum = 0.0;
      for (double v : s.per_query_ms) sum += v;
      r.mean_ms = s.per_query_ms.empty() ? 0.0 : sum / static_cast<double>(s.per_query_ms.size());
      r.p50_ms = percentile(s.per_query_ms, 50);
      r.p90_ms = percentile(s.per_query_ms, 90);
      r.p99_ms = percentile(s.per_query_ms, 99);
      r.ttft_ms = percentile(s.ttft_ms, 50);
      r.tokens_per_second = percentile(s.rate, 50);
      r.prompt_tokens = s.prompt_n ? s.prompt_sum / static_cast<double>(s.prompt_n) : 0.0;
      out.push_back(r);
    }
  }
  return out;
}

std::vector<gate::WeightRecord> export_weights(const fusion::ReFilter& model, const Task& task,
                                               const corpus::QAExample& query,
                                               const std::vector<context::PoolChunk>& chunks,
                                               std::size_t max_new) {
  const context::ContextEmbeddings pool = context::build_pool(chunks, model.encoder(), {});
  fusion::HookState state;
  state.keep_records = true;
  backbone::DecodeOptions dec;
  dec.max_new = max_new;
  const auto out = fusion::fused_generate(model, {question_prompt(task.vocab, query.question)},
                                          {&pool}, state, dec);
  std::set<int> answer_ids;
  for (const auto& a : query.answers) {
    for (int id : task.vocab.encode(a)) answer_ids.insert(id);
  }
  std::vector<gate::WeightRecord> records;
  for (const auto& rec : state.records) {
    if (rec.call != 0) continue;
    gate::WeightRecord w;
    w.query_id = query.id;
    w.layer = rec.layer;
    w.question = query.question;
    w.prediction = task.vocab.decode(before_eos(out[0]));
    w.answers = query.answers;
    for (std::size_t j = 0; j < rec.gamma.size(); ++j) {
      gate::WeightEntry e;
      e.slot = j;
      e.chunk_id = pool.origin[j].chunk_id;
      e.offset = pool.origin[j].offset;
      e.token = task.vocab.token(pool.token_ids[j]);
      e.gamma = rec.gamma[j];
      e.mu = rec.mu[j];
      e.w_t = rec.w_t[j];
      e.gold = !pool.is_pad[j] && answer_ids.count(pool.token_ids[j]) > 0;
      e.noise = pool.is_noise[j];
      w.entries.push_back(std::move(e));
    }
    records.push_back(std::move(w));
  }
  return records;
}

WeightSummary summarize_weights(const gate::WeightRecord& record) {
  WeightSummary s;
  double all = 0.0, gold = 0.0;
  for (const auto& e : record.entries) {
    all += e.w_t;
    if (e.gold) {
      gold += e.w_t;
      ++s.n_gold;
    }
  }
  s.mean_all = record.entries.empty() ? 0.0 : all / static_cast<double>(record.entries.size());
  s.mean_gold = s.n_gold ? gold / static_cast<double>(s.n_gold) : 0.0;
  return s;
}

}  // namespace refilter::evaluation
