#ifndef DYMO_TEXT_H_
#define DYMO_TEXT_H_

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "dymo/grammar.h"
#include "json.hpp"

namespace dymo {

// Closed vocabulary. Ids 0 and 1 are reserved for padding and unknown words.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  Vocabulary() = default;
  static Vocabulary from_grammar(const Grammar& grammar);

  int id(std::string_view word) const;
  const std::string& word(int id) const { return words_.at(static_cast<size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int, std::less<>> index_;
};

// A tokenized prompt. `words` are the normalized surface forms (kept even
// when the id is <unk>, so graph nodes can bind by text).
struct TextEncoding {
  std::string prompt;
  std::vector<std::string> words;
  std::vector<int> tokens;

  int length() const { return static_cast<int>(tokens.size()); }
};

// Lowercases and splits on anything that is not a letter or digit.
std::vector<std::string> normalize_words(std::string_view prompt);

// Throws InputError on an empty prompt or more than max_tokens tokens.
TextEncoding encode_text(std::string_view prompt, const Vocabulary& vocab, int max_tokens);

}  // namespace dymo

#endif  // DYMO_TEXT_H_
