#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace refilter::evaluation {

// Everything that distinguishes one evaluation run from another.
struct Condition {
  std::string experiment;  // "clean", "decoupling", "noise", "shuffle", ...
  std::string method;      // "no_retrieval", "srag" or "refilter"
  std::size_t k = 0;
  double noise_fraction = 0.0;
  bool shuffle = false;
  std::uint64_t seed = 0;

  // File-name-safe tag, e.g. "noise_srag_k3_n0.66_inorder_seed2".
  std::string tag() const;
  bool operator==(const Condition&) const = default;
};

struct EvalRecord {
  std::string query_id;
  std::string question;
  std::string prediction;
  std::vector<std::string> answers;
  double metric = 0.0;  // exact match
  double f1 = 0.0;
  std::optional<double> recall;  // gold chunk among the delivered chunks
  bool truncated = false;         // S-RAG prompt dropped chunks to fit
  std::size_t prompt_tokens = 0;
  Condition condition;
};

// Mean gate values by token class, from ReFilter's first firing per query.
struct GateStats {
  double mean_all = 0.0;
  double mean_gold = 0.0;   // tokens of gold evidence chunks
  double mean_noise = 0.0;  // tokens of injected noise chunks
  std::size_t n_all = 0, n_gold = 0, n_noise = 0;
};

struct EvalReport {
  Condition condition;
  std::vector<EvalRecord> records;
  double mean_metric = 0.0;
  double mean_f1 = 0.0;
  std::optional<double> recall_at_k;  // mean over records that carry recall
  std::optional<GateStats> gates;

  // Recomputes the aggregates from the records.
  void finalize();
};

struct LatencyReport {
  std::string method;
  std::size_t batch_size = 0;
  std::size_t k = 0;
  std::size_t trials = 0;
  std::size_t gen_tokens = 0;      // generated per query
  double mean_ms = 0.0;            // wall clock per query
  double p50_ms = 0.0, p90_ms = 0.0, p99_ms = 0.0;
  double ttft_ms = 0.0;            // median time to first token of a batch
  double tokens_per_second = 0.0;  // median steady-state decode rate of a batch
  double prompt_tokens = 0.0;      // mean prompt length per query
};

// Nearest-rank percentile of unsorted values, q in [0, 100].
double percentile(std::vector<double> values, double q);

std::string record_json(const EvalRecord& r);
std::string latency_json(const LatencyReport& r);

// <dir>/<tag>.jsonl, one record per line. Returns the path.
std::filesystem::path write_report(const std::filesystem::path& dir, const EvalReport& report);
// Round trip of write_report; throws ParseError with the line number.
std::vector<EvalRecord> read_records(const std::filesystem::path& path);

// CSV with one row per report and a header line.
void write_summary_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports);
void write_latency_csv(const std::filesystem::path& path, const std::vector<LatencyReport>& reports);

}  // namespace refilter::evaluation
