#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "refilter/numerics/ops.hpp"

namespace refilter::gate {

using nn::Tensor;

// gamma_j = sigmoid(w_g . [C_j ; h] + a_g) for every pool row j.
// C [N x d], h [d], w_g [2d], a_g [1]  ->  gamma [N].
Tensor dynamic_gate(const Tensor& C, const Tensor& h, const Tensor& w_g, const Tensor& a_g);

// W_t = mu * gamma, element-wise. Both of length N.
Tensor apply_mask(const Tensor& gamma, const Tensor& mu);

// Row j of C scaled by W_t[j].
Tensor weight_features(const Tensor& C, const Tensor& w_t);

// Mean of every gate value across the given gate vectors.
Tensor gate_sparsity_loss(const std::vector<Tensor>& gammas);

struct WeightEntry {
  std::size_t slot = 0;
  std::string chunk_id;
  std::size_t offset = 0;
  std::string token;
  double gamma = 0.0;
  double mu = 0.0;
  double w_t = 0.0;
  bool gold = false;   // token is part of a gold answer
  bool noise = false;  // token comes from the noise pool
};

// One line of the weight dump: every pool slot of one query at one layer.
struct WeightRecord {
  std::string query_id;
  std::size_t layer = 0;
  std::string question;
  std::string prediction;
  std::vector<std::string> answers;
  std::vector<WeightEntry> entries;
};

void write_weight_record(std::ostream& out, const WeightRecord& record);
// Reads line-delimited records; throws ParseError with the line number.
std::vector<WeightRecord> read_weight_records(std::istream& in);

}  // namespace refilter::gate
