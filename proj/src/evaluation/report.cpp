#include "refilter/evaluation/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "refilter/errors.hpp"

namespace refilter::evaluation {
namespace {

using nlohmann::json;

std::string fmt_fraction(double f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", f);
  return buf;
}

json condition_json(const Condition& c) {
  return {{"experiment", c.experiment}, {"method", c.method},  {"k", c.k},
          {"noise_fraction", c.noise_fraction}, {"shuffle", c.shuffle}, {"seed", c.seed}};
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FileError("cannot write " + path.string());
  return out;
}

}  // namespace

std::string Condition::tag() const {
  return experiment + "_" + method + "_k" + std::to_string(k) + "_n" + fmt_fraction(noise_fraction) +
         (shuffle ? "_shuffled" : "_inorder") + "_seed" + std::to_string(seed);
}

void EvalReport::finalize() {
  double m = 0.0, f = 0.0, rec = 0.0;
  std::size_t n_rec = 0;
  for (const auto& r : records) {
    m += r.metric;
    f += r.f1;
    if (r.recall) {
      rec += *r.recall;
      ++n_rec;
    }
  }
  const double n = static_cast<double>(records.size());
  mean_metric = records.empty() ? 0.0 : m / n;
  mean_f1 = records.empty() ? 0.0 : f / n;
  recall_at_k = n_rec > 0 ? std::optional<double>(rec / static_cast<double>(n_rec)) : std::nullopt;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double rank = std::ceil(q / 100.0 * static_cast<double>(values.size()));
  const std::size_t idx = rank < 1.0 ? 0 : static_cast<std::size_t>(rank) - 1;
  return values[std::min(idx, values.size() - 1)];
}

std::string record_json(const EvalRecord& r) {
  json j = {{"query_id", r.query_id},       {"question", r.question},
            {"prediction", r.prediction},   {"answers", r.answers},
            {"metric", r.metric},           {"f1", r.f1},
            {"truncated", r.truncated},     {"prompt_tokens", r.prompt_tokens},
            {"condition", condition_json(r.condition)}};
  j["recall"] = r.recall ? json(*r.recall) : json(nullptr);
  return j.dump();
}

std::string latency_json(const LatencyReport& r) {
  return json{{"method", r.method},           {"batch_size", r.batch_size},
              {"k", r.k},                     {"trials", r.trials},
              {"gen_tokens", r.gen_tokens},   {"mean_ms", r.mean_ms},
              {"p50_ms", r.p50_ms},           {"p90_ms", r.p90_ms},
              {"p99_ms", r.p99_ms},           {"ttft_ms", r.ttft_ms},
              {"tokens_per_second", r.tokens_per_second},
              {"prompt_tokens", r.prompt_tokens}}
      .dump();
}

std::filesystem::path write_report(const std::filesystem::path& dir, const EvalReport& report) {
  const auto path = dir / (report.condition.tag() + ".jsonl");
  auto out = open_out(path);
  for (const auto& r : report.records) out << record_json(r) << '\n';
  return path;
}

std::vector<EvalRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open " + path.string());
  std::vector<EvalRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      EvalRecord r;
      r.query_id = j.at("query_id").get<std::string>();
      r.question = j.at("question").get<std::string>();
      r.prediction = j.at("prediction").get<std::string>();
      r.answers = j.at("answers").get<std::vector<std::string>>();
      r.metric = j.at("metric").get<double>();
      r.f1 = j.at("f1").get<double>();
      if (!j.at("recall").is_null()) r.recall = j.at("recall").get<double>();
      r.truncated = j.at("truncated").get<bool>();
      r.prompt_tokens = j.at("prompt_tokens").get<std::size_t>();
      const json& c = j.at("condition");
      r.condition.experiment = c.at("experiment").get<std::string>();
      r.condition.method = c.at("method").get<std::string>();
      r.condition.k = c.at("k").get<std::size_t>();
      r.condition.noise_fraction = c.at("noise_fraction").get<double>();
      r.condition.shuffle = c.at("shuffle").get<bool>();
      r.condition.seed = c.at("seed").get<std::uint64_t>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return out;
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
  auto out = open_out(path);
  out << "experiment,method,k,noise_fraction,shuffle,seed,n,exact_match,f1,recall";
  const bool any_gates = std::any_of(reports.begin(), reports.end(),
                                     [](const EvalReport& r) { return r.gates.has_value(); });
  if (any_gates) out << ",gate_all,gate_gold,gate_noise";
  out << '\n';
  for (const auto& r : reports) {
    const auto& c = r.condition;
    out << c.experiment << ',' << c.method << ',' << c.k << ',' << c.noise_fraction << ','
        << (c.shuffle ? 1 : 0) << ',' << c.seed << ',' << r.records.size() << ','
        << r.mean_metric << ',' << r.mean_f1 << ',';
    if (r.recall_at_k) out << *r.recall_at_k;
    if (any_gates) {
      out << ',';
      if (r.gates) out << r.gates->mean_all << ',' << r.gates->mean_gold << ',' << r.gates->mean_noise;
      else out << ",,";
    }
    out << '\n';
  }
}

void write_latency_csv(const std::filesystem::path& path,
                       const std::vector<LatencyReport>& reports) {
  auto out = open_out(path);
  out << "method,batch_size,k,trials,gen_tokens,mean_ms,p50_ms,p90_ms,p99_ms,ttft_ms,"
         "tokens_per_second,prompt_tokens\n";
  for (const auto& r : reports) {
    out << r.method << ',' << r.batch_size << ',' << r.k << ',' << r.trials << ',' << r.gen_tokens
        << ',' << r.mean_ms << ',' << r.p50_ms << ',' << r.p90_ms << ',' << r.p99_ms << ','
        << r.ttft_ms << ',' << r.tokens_per_second << ',' << r.prompt_tokens << '\n';
  }
}

}  // namespace refilter::evaluation
