#include "refilter/corpus/synth.hpp"

#include <algorithm>
#include <array>
#include <random>
#include <set>

#include "refilter/errors.hpp"

namespace refilter::corpus {
namespace {

constexpr std::size_t kNumRelations = 6;
constexpr std::size_t kValuesPerRelation = 16;
constexpr std::size_t kFirstNames = 48;
constexpr std::size_t kLastNames = 48;
constexpr std::size_t kFillerWords = 64;
constexpr std::size_t kNoiseWords = 160;
constexpr std::size_t kFactTokens = 8;     // the R of F L is V .
constexpr std::size_t kMentionTokens = 10;  // people say the R of F L is unclear .

const std::array<std::array<const char*, 2>, kNumRelations> kRelations = {{
    {"capital", "seat"},
    {"color", "hue"},
    {"founder", "creator"},
    {"river", "stream"},
    {"language", "tongue"},
    {"sport", "game"},
}};

const std::array<const char*, 9> kTemplateWords = {"what", "is",  "the", "of",     "?",
                                                   ".",    "people", "say", "unclear"};

struct Lexicon {
  std::vector<std::string> first, last, filler, noise;
  std::array<std::vector<std::string>, kNumRelations> values;
  std::vector<std::string> all;
};

const Lexicon& lexicon() {
  static const Lexicon lex = [] {
    std::set<std::string> reserved(kTemplateWords.begin(), kTemplateWords.end());
    for (const auto& r : kRelations) reserved.insert({r[0], r[1]});

    const std::string cons = "bdfgklmnprstvz";
    const std::string vows = "aeiou";
    std::vector<std::string> syll;
    for (char c : cons)
      for (char v : vows) syll.push_back(std::string{c, v});
    std::vector<std::string> words;
    for (const auto& a : syll)
      for (const auto& b : syll)
        if (!reserved.count(a + b)) words.push_back(a + b);
    // Fixed permutation so categories do not share obvious prefixes.
    std::mt19937_64 rng(0x5eedf00dULL);
    std::shuffle(words.begin(), words.end(), rng);

    Lexicon lx;
    std::size_t at = 0;
    auto take = [&](std::size_t n) {
      std::vector<std::string> out(words.begin() + at, words.begin() + at + n);
      at += n;
      return out;
    };
    lx.first = take(kFirstNames);
    lx.last = take(kLastNames);
    for (auto& v : lx.values) v = take(kValuesPerRelation);
    lx.filler = take(kFillerWords);
    lx.noise = take(kNoiseWords);

    for (const char* w : kTemplateWords) lx.all.emplace_back(w);
    for (const auto& r : kRelations) lx.all.insert(lx.all.end(), {r[0], r[1]});
    for (const auto* group : {&lx.first, &lx.last}) lx.all.insert(lx.all.end(), group->begin(), group->end());
    for (const auto& v : lx.values) lx.all.insert(lx.all.end(), v.begin(), v.end());
    lx.all.insert(lx.all.end(), lx.filler.begin(), lx.filler.end());
    lx.all.insert(lx.all.end(), lx.noise.begin(), lx.noise.end());
    return lx;
  }();
  return lex;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

// Places the sentence at a random offset inside a chunk of filler words.
std::string pad_with_filler(const std::vector<std::string>& sentence, std::size_t chunk_len,
                            std::mt19937_64& rng) {
  const Lexicon& lx = lexicon();
  std::uniform_int_distribution<std::size_t> pick(0, lx.filler.size() - 1);
  const std::size_t spare = chunk_len - sentence.size();
  const std::size_t before = std::uniform_int_distribution<std::size_t>(0, spare)(rng);
  std::vector<std::string> words;
  for (std::size_t i = 0; i < before; ++i) words.push_back(lx.filler[pick(rng)]);
  words.insert(words.end(), sentence.begin(), sentence.end());
  while (words.size() < chunk_len) words.push_back(lx.filler[pick(rng)]);
  return join(words);
}

struct Entity {
  std::string first, last;
  std::string name() const { return first + " " + last; }
};

}  // namespace

const std::vector<std::string>& synth_lexicon() { return lexicon().all; }

Vocabulary synth_vocabulary() {
  // Lexicon words are distinct, so frequency ties keep lexicon order.
  return build_vocab({join(synth_lexicon())}, 2048);
}

std::string question_text(const std::string& relation, const std::string& entity) {
  return "what is the " + relation + " of " + entity + " ?";
}

SynthData generate_synthetic(const SynthConfig& config) {
  const Lexicon& lx = lexicon();
  if (config.chunk_len < kMentionTokens) {
    throw ConfigError("synthetic chunk_len must be at least " + std::to_string(kMentionTokens));
  }
  if (config.facts_per_entity < 1 || config.facts_per_entity > kNumRelations) {
    throw ConfigError("facts_per_entity must lie in [1, " + std::to_string(kNumRelations) + "]");
  }
  if (config.num_entities > kFirstNames * kLastNames) {
    throw ConfigError("num_entities exceeds the " + std::to_string(kFirstNames * kLastNames) +
                      " available names");
  }
  if (!(config.synonym_prob >= 0.0 && config.synonym_prob <= 1.0)) {
    throw ConfigError("synonym_prob must lie in [0, 1]");
  }
  std::mt19937_64 rng(config.seed);

  // Distinct entity names.
  std::vector<std::size_t> name_ids(kFirstNames * kLastNames);
  for (std::size_t i = 0; i < name_ids.size(); ++i) name_ids[i] = i;
  std::shuffle(name_ids.begin(), name_ids.end(), rng);
  std::vector<Entity> entities;
  for (std::size_t i = 0; i < config.num_entities; ++i) {
    entities.push_back({lx.first[name_ids[i] / kLastNames], lx.last[name_ids[i] % kLastNames]});
  }

  const std::size_t test_entities =
      config.all_train ? 0
                       : std::min(config.num_entities,
                                  (config.num_test + config.facts_per_entity - 1) /
                                      config.facts_per_entity);
  const std::size_t first_test = config.num_entities - test_entities;

  SynthData out;
  std::vector<QAExample> train_qa, test_qa;
  std::bernoulli_distribution use_synonym(config.synonym_prob);
  std::uniform_int_distribution<std::size_t> pick_value(0, kValuesPerRelation - 1);

  for (std::size_t e = 0; e < entities.size(); ++e) {
    const Entity& ent = entities[e];
    const std::string doc_id = "e" + std::to_string(e);

    std::vector<std::size_t> rels(kNumRelations);
    for (std::size_t r = 0; r < kNumRelations; ++r) rels[r] = r;
    std::shuffle(rels.begin(), rels.end(), rng);
    rels.resize(config.facts_per_entity);

    struct Pending {
      std::string text;
      int fact = -1;  // index into rels, -1 for mentions
      std::string value;
    };
    std::vector<Pending> chunks;
    for (std::size_t f = 0; f < rels.size(); ++f) {
      const auto& rel = kRelations[rels[f]];
      const std::string value = lx.values[rels[f]][pick_value(rng)];
      const std::string word = use_synonym(rng) ? rel[1] : rel[0];
      chunks.push_back({pad_with_filler({"the", word, "of", ent.first, ent.last, "is", value, "."},
                                        config.chunk_len, rng),
                        static_cast<int>(f), value});
    }
    for (std::size_t m = 0; m < config.mentions_per_entity; ++m) {
      const auto& rel = kRelations[rels[m % rels.size()]];
      chunks.push_back({pad_with_filler({"people", "say", "the", rel[0], "of", ent.first, ent.last,
                                         "is", "unclear", "."},
                                        config.chunk_len, rng),
                        -1, ""});
    }
    std::shuffle(chunks.begin(), chunks.end(), rng);

    std::vector<std::string> texts;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
      texts.push_back(chunks[i].text);
      if (chunks[i].fact < 0) continue;
      QAExample ex;
      ex.question = question_text(kRelations[rels[chunks[i].fact]][0], ent.name());
      ex.answers = {chunks[i].value};
      ex.gold_chunk_ids = {doc_id + "#" + std::to_string(i)};
      ex.split = e >= first_test ? Split::kTest : Split::kTrain;
      (e >= first_test ? test_qa : train_qa).push_back(std::move(ex));
    }
    out.corpus.push_back({doc_id, join(texts)});
  }

  std::shuffle(train_qa.begin(), train_qa.end(), rng);
  std::shuffle(test_qa.begin(), test_qa.end(), rng);
  if (test_qa.size() > config.num_test) test_qa.resize(config.num_test);
  for (std::size_t i = 0; i < train_qa.size(); ++i) train_qa[i].id = "train" + std::to_string(i);
  for (std::size_t i = 0; i < test_qa.size(); ++i) test_qa[i].id = "test" + std::to_string(i);
  out.qa = std::move(train_qa);
  out.qa.insert(out.qa.end(), test_qa.begin(), test_qa.end());

  std::uniform_int_distribution<std::size_t> pick_noise(0, lx.noise.size() - 1);
  for (std::size_t d = 0; d < config.num_noise_docs; ++d) {
    std::vector<std::string> words;
    for (std::size_t i = 0; i < config.noise_chunks_per_doc * config.chunk_len; ++i) {
      words.push_back(lx.noise[pick_noise(rng)]);
    }
    out.noise.push_back({"noise" + std::to_string(d), join(words)});
  }
  return out;
}

}  // namespace refilter::corpus
