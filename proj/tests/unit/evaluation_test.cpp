#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "refilter/corpus/synth.hpp"
#include "refilter/errors.hpp"
#include "refilter/evaluation/harness.hpp"
#include "refilter/evaluation/metrics.hpp"
#include "refilter/evaluation/prompt.hpp"

using namespace refilter;
using namespace refilter::evaluation;

namespace {

constexpr std::size_t kS = 16;

const Task& task() {
  static const Task t = [] {
    corpus::SynthConfig sc;
    sc.seed = 11;
    sc.num_entities = 16;
    sc.num_test = 8;
    sc.num_noise_docs = 4;
    sc.chunk_len = kS;
    const corpus::SynthData d = corpus::generate_synthetic(sc);
    return make_task(corpus::synth_vocabulary(), d.corpus, d.noise, d.qa, kS);
  }();
  return t;
}

std::shared_ptr<backbone::Backbone> tiny_backbone() {
  backbone::BackboneConfig c;
  c.vocab_size = task().vocab.size();
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_positions = 96;
  return std::make_shared<backbone::Backbone>(c, 5);
}

std::unique_ptr<fusion::ReFilter> tiny_refilter(std::size_t k, std::vector<std::size_t> layers = {}) {
  context::EncoderConfig e;
  e.vocab_size = task().vocab.size();
  e.d_encoder = 6;
  e.n_layers = 1;
  e.n_heads = 2;
  e.d_ff = 12;
  e.chunk_len = kS;
  e.d_model = 8;
  fusion::FusionConfig f;
  f.k = k;
  f.s = kS;
  f.layers = std::move(layers);
  return std::make_unique<fusion::ReFilter>(tiny_backbone(), e, f, 3);
}

std::vector<std::string> predictions(const EvalReport& r) {
  std::vector<std::string> out;
  for (const auto& rec : r.records) out.push_back(rec.prediction);
  return out;
}

}  // namespace

TEST(Metrics, TokenF1Cases) {
  EXPECT_DOUBLE_EQ(token_f1("the Iraq", {"Iraq"}), 1.0);
  EXPECT_DOUBLE_EQ(token_f1("red house", {"blue car"}), 0.0);
  EXPECT_DOUBLE_EQ(token_f1("blue car", {"blue car"}), 1.0);
  // one shared token of two on each side: p = r = 1/2
  EXPECT_DOUBLE_EQ(token_f1("red blue", {"red green"}), 0.5);
  // p = 1/1, r = 1/3 -> 2 * (1/3) / (4/3) = 0.5
  EXPECT_DOUBLE_EQ(token_f1("red", {"red green blue"}), 0.5);
  EXPECT_DOUBLE_EQ(token_f1("red blue", {"green", "red green"}), 0.5);
  EXPECT_DOUBLE_EQ(token_f1("", {"red"}), 0.0);
  EXPECT_THROW(token_f1("red", {}), DataError);
}

TEST(Metrics, ExactMatchAndChoiceAccuracy) {
  EXPECT_EQ(exact_match("A", {"A"}), 1.0);
  EXPECT_EQ(exact_match("a.", {"A"}), 1.0);
  EXPECT_EQ(exact_match("", {"A"}), 0.0);
  EXPECT_EQ(exact_match("  The Red,  House ", {"red house"}), 1.0);
  EXPECT_EQ(exact_match("red", {"blue", "red"}), 1.0);
  EXPECT_EQ(exact_match("red house", {"red"}), 0.0);
  EXPECT_EQ(normalize_answer("An apple, the pear!"), "apple pear");
  EXPECT_EQ(choice_accuracy("A", {"A"}), 1.0);
  EXPECT_EQ(choice_accuracy("a.", {"A"}), 1.0);
  EXPECT_EQ(choice_accuracy("(B) yes", {"b"}), 1.0);
  EXPECT_EQ(choice_accuracy("C", {"B"}), 0.0);
  EXPECT_EQ(choice_accuracy("", {"A"}), 0.0);
  EXPECT_EQ(option_letter("Bob"), 0);
  EXPECT_THROW(exact_match("a", {}), DataError);
}

TEST(Report, AggregatesArePerRecordMeans) {
  EvalReport r;
  r.condition = {"clean", kSrag, 3, 0.0, false, 1};
  const double metrics[] = {1, 0, 1, 1};
  const double f1s[] = {1, 0.5, 1, 0.25};
  for (int i = 0; i < 4; ++i) {
    EvalRecord rec;
    rec.metric = metrics[i];
    rec.f1 = f1s[i];
    if (i != 2) rec.recall = i % 2;
    rec.condition = r.condition;
    r.records.push_back(rec);
  }
  r.finalize();
  EXPECT_DOUBLE_EQ(r.mean_metric, 0.75);
  EXPECT_DOUBLE_EQ(r.mean_f1, 0.6875);
  ASSERT_TRUE(r.recall_at_k);
  EXPECT_DOUBLE_EQ(*r.recall_at_k, 2.0 / 3.0);
  EXPECT_EQ(r.condition.tag(), "clean_srag_k3_n0.00_inorder_seed1");
}

TEST(Report, RecordsRoundTrip) {
  EvalReport r;
  r.condition = {"noise", kReFilter, 3, 0.66, true, 7};
  EvalRecord rec;
  rec.query_id = "q1";
  rec.question = "what is the \"x\" ?";
  rec.prediction = "red";
  rec.answers = {"red", "crimson"};
  rec.metric = 1;
  rec.f1 = 1;
  rec.recall = 0.0;
  rec.truncated = true;
  rec.prompt_tokens = 12;
  rec.condition = r.condition;
  r.records = {rec, rec};
  r.records[1].recall.reset();
  const auto dir = std::filesystem::temp_directory_path() / "refilter_eval_report";
  const auto path = write_report(dir, r);
  EXPECT_EQ(path.filename().string(), "noise_refilter_k3_n0.66_shuffled_seed7.jsonl");
  const auto back = read_records(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].answers, rec.answers);
  EXPECT_EQ(back[0].question, rec.question);
  EXPECT_EQ(back[0].recall, rec.recall);
  EXPECT_FALSE(back[1].recall.has_value());
  EXPECT_EQ(back[0].condition, r.condition);
  {
    std::ofstream bad(dir / "bad.jsonl");
    bad << record_json(rec) << "\n{\"query_id\": 3}\n";
  }
  try {
    read_records(dir / "bad.jsonl");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  std::filesystem::remove_all(dir);
}

TEST(Report, PercentilesAreOrdered) {
  const std::vector<double> v = {5, 1, 4, 2, 3, 10, 7};
  EXPECT_EQ(percentile(v, 50), 4);
  EXPECT_EQ(percentile(v, 0), 1);
  EXPECT_EQ(percentile(v, 100), 10);
  EXPECT_LE(percentile(v, 50), percentile(v, 90));
  EXPECT_LE(percentile(v, 90), percentile(v, 99));
}

TEST(Deliver, NoiseShuffleAndIdentityConditions) {
  const Task& t = task();
  const auto clean = deliver(t, t.test, 3, 0.0, false, 4);
  const auto zero = deliver(t, t.test, 3, 0.0, false, 99);
  const auto noisy = deliver(t, t.test, 3, 0.66, false, 4);
  const auto noisy2 = deliver(t, t.test, 3, 0.66, false, 4);
  const auto one = deliver(t, t.test, 1, 0.0, false, 4);
  const auto one_sh = deliver(t, t.test, 1, 0.0, true, 4);
  const auto sh = deliver(t, t.test, 3, 0.0, true, 4);
  for (std::size_t i = 0; i < t.test.size(); ++i) {
    ASSERT_EQ(clean[i].size(), 3u);
    std::size_t n_noise = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_EQ(clean[i][j].chunk, zero[i][j].chunk);
      EXPECT_EQ(noisy[i][j].chunk, noisy2[i][j].chunk);
      EXPECT_EQ(noisy[i][j].chunk, &t.store.at(noisy[i][j].ordinal));
      if (noisy[i][j].chunk->is_noise) {
        ++n_noise;
      } else {
        EXPECT_EQ(noisy[i][j].chunk, clean[i][j].chunk);
      }
    }
    EXPECT_EQ(n_noise, 2u);
    EXPECT_EQ(one[i][0].chunk, one_sh[i][0].chunk);
    std::multiset<const corpus::Chunk*> a, b;
    for (std::size_t j = 0; j < 3; ++j) {
      a.insert(clean[i][j].chunk);
      b.insert(sh[i][j].chunk);
    }
    EXPECT_EQ(a, b);
  }
}

TEST(Srag, PromptCountsAndTruncation) {
  const Task& t = task();
  const auto& q = t.test.front();
  const auto chunks = deliver(t, {q}, 3, 0.0, false, 1).front();
  const std::size_t base = prompt_tokens(t, q, kReFilter, chunks, 96, 4);
  EXPECT_EQ(base, question_prompt(t.vocab, q.question).size());
  EXPECT_EQ(prompt_tokens(t, q, kNoRetrieval, chunks, 96, 4), base);
  std::size_t total_len = 0;
  for (const auto& c : chunks) total_len += c.chunk->length;
  EXPECT_EQ(prompt_tokens(t, q, kSrag, chunks, 96, 4), base + total_len);
  // No chunks: identical to the plain question prompt.
  EXPECT_EQ(srag_prompt(t.vocab, {}, q.question, 96, 4).tokens, question_prompt(t.vocab, q.question));
  // A tight budget keeps only the last chunk.
  std::vector<corpus::Chunk> cs;
  for (const auto& c : chunks) cs.push_back(*c.chunk);
  const SragPrompt tight = srag_prompt(t.vocab, cs, q.question, base + 4 + cs.back().length, 4);
  EXPECT_TRUE(tight.truncated);
  EXPECT_EQ(tight.chunks_used, 1u);
  EXPECT_THROW(srag_prompt(t.vocab, cs, q.question, base + 3, 4), DataError);
}

TEST(Evaluate, RecordsCarryConditionAndMatchGeneration) {
  const Task& t = task();
  auto bb = tiny_backbone();
  Models m;
  m.backbone = bb.get();
  const Condition c{"clean", kNoRetrieval, 0, 0.0, false, 2};
  EvalOptions opt;
  opt.batch_size = 3;
  const EvalReport r = evaluate(t, t.test, c, m, opt);
  ASSERT_EQ(r.records.size(), t.test.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    EXPECT_EQ(r.records[i].condition, c);
    EXPECT_FALSE(r.records[i].recall.has_value());
    backbone::DecodeOptions d;
    d.max_new = 4;
    auto out = backbone::generate(*bb, {question_prompt(t.vocab, t.test[i].question)}, nullptr, d)[0];
    out.erase(std::find(out.begin(), out.end(), corpus::kEosId), out.end());
    EXPECT_EQ(r.records[i].prediction, t.vocab.decode(out));
    sum += r.records[i].metric;
  }
  EXPECT_DOUBLE_EQ(r.mean_metric, sum / static_cast<double>(r.records.size()));
  EXPECT_THROW(evaluate(t, t.test, {"clean", "oracle", 3, 0, false, 1}, m), ConfigError);
  EXPECT_THROW(evaluate(t, t.test, {"clean", kReFilter, 3, 0, false, 1}, m), ConfigError);
}

TEST(Evaluate, RefilterUsesModelPoolSizeAndReportsGates) {
  const Task& t = task();
  auto model = tiny_refilter(3);
  Models m;
  m.refilter = model.get();
  const EvalReport r = evaluate(t, t.test, {"noise", kReFilter, 3, 0.66, false, 1}, m);
  ASSERT_TRUE(r.gates.has_value());
  EXPECT_EQ(r.gates->n_all, t.test.size() * 3 * kS);
  EXPECT_GT(r.gates->n_noise, 0u);
  EXPECT_GT(r.gates->mean_all, 0.0);
  EXPECT_LT(r.gates->mean_all, 1.0);
  EXPECT_THROW(evaluate(t, t.test, {"clean", kReFilter, 2, 0, false, 1}, m), ConfigError);
}

TEST(Experiments, NoiseZeroEqualsCleanAndShuffleIsInvariantForUniformMask) {
  const Task& t = task();
  auto model = tiny_refilter(3);
  Models m;
  m.refilter = model.get();
  const auto noise = run_noise(t, t.test, {0.0, 0.33}, {kSrag, kReFilter}, m, 3, 5);
  ASSERT_EQ(noise.size(), 4u);
  const EvalReport clean_s = evaluate(t, t.test, {"clean", kSrag, 3, 0.0, false, 5}, m);
  const EvalReport clean_r = evaluate(t, t.test, {"clean", kReFilter, 3, 0.0, false, 5}, m);
  EXPECT_EQ(predictions(noise[0]), predictions(clean_s));
  EXPECT_EQ(predictions(noise[1]), predictions(clean_r));

  const ShuffleResult sh = run_shuffle(t, t.test, {kReFilter}, m, 3, 5);
  EXPECT_EQ(predictions(sh.in_order[0]), predictions(sh.shuffled[0]));
  EXPECT_EQ(sh.mean_abs_delta.at(kReFilter), 0.0);

  auto model1 = tiny_refilter(1);
  Models m1;
  m1.refilter = model1.get();
  const ShuffleResult sh1 = run_shuffle(t, t.test, {kSrag, kReFilter}, m1, 1, 5);
  for (const auto& [method, d] : sh1.deltas) {
    for (double x : d) EXPECT_EQ(x, 0.0) << method;
  }
}

TEST(Experiments, DecouplingTableHasRecallAndMethods) {
  const Task& t = task();
  auto model = tiny_refilter(3);
  const DecouplingResult d =
      run_decoupling(t, t.test, {1, 3, 5}, model->backbone(), {{3, model.get()}}, 1);
  ASSERT_EQ(d.rows.size(), 3u);
  for (std::size_t i = 1; i < d.rows.size(); ++i) EXPECT_GE(d.rows[i].recall, d.rows[i - 1].recall);
  EXPECT_EQ(d.rows[0].downstream.count(kReFilter), 0u);
  EXPECT_EQ(d.rows[1].downstream.count(kReFilter), 1u);
  for (const auto& row : d.rows) {
    EXPECT_EQ(row.downstream.count(kSrag), 1u);
    EXPECT_EQ(row.downstream.count(kNoRetrieval), 1u);
  }
  EXPECT_EQ(d.reports.size(), 5u);
}

TEST(Experiments, LatencyReportsAreConsistent) {
  const Task& t = task();
  auto model = tiny_refilter(3);
  Models m;
  m.refilter = model.get();
  LatencyOptions o;
  o.batch_sizes = {1, 2};
  o.trials = 3;
  o.warmup = 1;
  o.gen_tokens = 5;
  const auto reps = run_latency(t, t.test, {kSrag, kReFilter}, m, 3, o);
  ASSERT_EQ(reps.size(), 4u);
  for (const auto& r : reps) {
    EXPECT_LE(r.p50_ms, r.p90_ms);
    EXPECT_LE(r.p90_ms, r.p99_ms);
    EXPECT_GT(r.tokens_per_second, 0.0);
    EXPECT_EQ(r.trials, 3u);
  }
  EXPECT_GT(reps[0].prompt_tokens, reps[2].prompt_tokens);
}

TEST(ExportWeights, CoverageMarkersAndRoundTrip) {
  const Task& t = task();
  auto model = tiny_refilter(3, {1, 2});
  const auto& q = t.test.front();
  const auto chunks = deliver(t, {q}, 3, 0.0, false, 1).front();
  const auto recs = export_weights(*model, t, q, chunks);
  ASSERT_EQ(recs.size(), 2u);
  const auto answer_ids = t.vocab.encode(q.answers.front());
  for (const auto& r : recs) {
    ASSERT_EQ(r.entries.size(), 3 * kS);
    std::set<std::size_t> slots;
    for (const auto& e : r.entries) {
      slots.insert(e.slot);
      EXPECT_DOUBLE_EQ(e.w_t, e.mu * e.gamma);
      const bool is_answer =
          std::find(answer_ids.begin(), answer_ids.end(), t.vocab.id(e.token)) != answer_ids.end();
      EXPECT_EQ(e.gold, is_answer && e.token != "<pad>");
    }
    EXPECT_EQ(slots.size(), 3 * kS);
    const WeightSummary s = summarize_weights(r);
    EXPECT_GT(s.mean_all, 0.0);
  }
  std::stringstream ss;
  for (const auto& r : recs) gate::write_weight_record(ss, r);
  const auto back = gate::read_weight_records(ss);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    ASSERT_EQ(back[i].entries.size(), recs[i].entries.size());
    for (std::size_t j = 0; j < recs[i].entries.size(); ++j) {
      EXPECT_EQ(back[i].entries[j].w_t, recs[i].entries[j].w_t);
      EXPECT_EQ(back[i].entries[j].gold, recs[i].entries[j].gold);
      EXPECT_EQ(back[i].entries[j].chunk_id, recs[i].entries[j].chunk_id);
    }
  }
}
