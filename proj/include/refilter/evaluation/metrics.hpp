#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace refilter::evaluation {

// Lowercase, drop punctuation, drop the articles a/an/the, collapse
// whitespace. When dropping articles would leave nothing (an answer that is
// itself "a"), the articles are kept.
std::string normalize_answer(std::string_view text);

// Bag-of-tokens F1 against the best-matching gold. Throws DataError when
// golds is empty.
double token_f1(std::string_view prediction, const std::vector<std::string>& golds);

// 1 when the normalized prediction equals any normalized gold. An empty
// prediction never matches.
double exact_match(std::string_view prediction, const std::vector<std::string>& golds);

// Option letter of a multiple-choice answer: the first alphanumeric
// character, uppercased, when it is a letter standing on its own ("b",
// "(B)", "B. yes"). Returns 0 when there is none.
char option_letter(std::string_view text);

// 1 when the prediction's option letter equals a gold's letter.
double choice_accuracy(std::string_view prediction, const std::vector<std::string>& golds);

}  // namespace refilter::evaluation
