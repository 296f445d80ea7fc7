#include "refilter/gated_filter/gate.hpp"

#include <istream>
#include <ostream>

#include "json.hpp"

#include "refilter/errors.hpp"

namespace refilter::gate {

using namespace refilter::nn;
using nlohmann::json;

Tensor dynamic_gate(const Tensor& C, const Tensor& h, const Tensor& w_g, const Tensor& a_g) {
  if (C.rank() != 2) throw DimensionError("dynamic_gate: C must be [N x d], got " + shape_str(C.shape()));
  const std::size_t d = C.dim(1);
  if (h.numel() != d || w_g.numel() != 2 * d || a_g.numel() != 1) {
    throw DimensionError("dynamic_gate: C " + shape_str(C.shape()) + ", h " + shape_str(h.shape()) +
                         ", w_g " + shape_str(w_g.shape()) + ", a_g " + shape_str(a_g.shape()));
  }
  // w_g splits into the token half and the decision-state half.
  Tensor token_score = matvec(C, slice(w_g, 0, d));
  Tensor shared = add(dot(h, slice(w_g, d, d)), reshape(a_g, {1}));
  return sigmoid(add_scalar(token_score, shared));
}

Tensor apply_mask(const Tensor& gamma, const Tensor& mu) {
  if (gamma.numel() != mu.numel()) {
    throw DimensionError("apply_mask: gamma has " + std::to_string(gamma.numel()) +
                         " slots, mask has " + std::to_string(mu.numel()));
  }
  return mul(gamma, reshape(mu, gamma.shape()));
}

Tensor weight_features(const Tensor& C, const Tensor& w_t) {
  return mul_rows(C, w_t);
}

Tensor gate_sparsity_loss(const std::vector<Tensor>& gammas) {
  if (gammas.empty()) return Tensor::scalar(0.0);
  return mean_all(gammas.size() == 1 ? gammas[0] : concat(gammas));
}

void write_weight_record(std::ostream& out, const WeightRecord& r) {
  json entries = json::array();
  for (const WeightEntry& e : r.entries) {
    entries.push_back({{"slot", e.slot},   {"chunk_id", e.chunk_id}, {"offset", e.offset},
                       {"token", e.token}, {"gamma", e.gamma},       {"mu", e.mu},
                       {"w_t", e.w_t},     {"gold", e.gold},         {"noise", e.noise}});
  }
  json j = {{"query_id", r.query_id}, {"layer", r.layer},   {"question", r.question},
            {"prediction", r.prediction}, {"answers", r.answers}, {"tokens", entries}};
  out << j.dump() << '\n';
}

std::vector<WeightRecord> read_weight_records(std::istream& in) {
  std::vector<WeightRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      WeightRecord r;
      r.query_id = j.at("query_id").get<std::string>();
      r.layer = j.at("layer").get<std::size_t>();
      r.question = j.at("question").get<std::string>();
      r.prediction = j.at("prediction").get<std::string>();
      r.answers = j.at("answers").get<std::vector<std::string>>();
      for (const json& e : j.at("tokens")) {
        WeightEntry w;
        w.slot = e.at("slot").get<std::size_t>();
        w.chunk_id = e.at("chunk_id").get<std::string>();
        w.offset = e.at("offset").get<std::size_t>();
        w.token = e.at("token").get<std::string>();
        w.gamma = e.at("gamma").get<double>();
        w.mu = e.at("mu").get<double>();
        w.w_t = e.at("w_t").get<double>();
        w.gold = e.at("gold").get<bool>();
        w.noise = e.at("noise").get<bool>();
        r.entries.push_back(std::move(w));
      }
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ParseError(std::string("weight dump: ") + e.what(), n);
    }
  }
  return out;
}

}  // namespace refilter::gate
