#include "dymo/text.h"

#include <cctype>

#include "dymo/errors.h"

namespace dymo {

Vocabulary Vocabulary::from_grammar(const Grammar& grammar) {
  Vocabulary v;
  v.words_ = {"<pad>", "<unk>"};
  for (const std::string& w : grammar.all_words()) {
    if (v.index_.count(w)) continue;
    v.index_.emplace(w, static_cast<int>(v.words_.size()));
    v.words_.push_back(w);
  }
  return v;
}

int Vocabulary::id(std::string_view word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

nlohmann::json Vocabulary::to_json() const { return words_; }

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary v;
  v.words_ = j.get<std::vector<std::string>>();
  if (v.words_.size() < 2 || v.words_[0] != "<pad>" || v.words_[1] != "<unk>") {
    throw FormatError("vocabulary must start with <pad>, <unk>");
  }
  for (size_t i = 2; i < v.words_.size(); ++i) v.index_.emplace(v.words_[i], static_cast<int>(i));
  return v;
}

std::vector<std::string> normalize_words(std::string_view prompt) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : prompt) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

TextEncoding encode_text(std::string_view prompt, const Vocabulary& vocab, int max_tokens) {
  TextEncoding enc;
  enc.prompt = std::string(prompt);
  enc.words = normalize_words(prompt);
  if (enc.words.empty()) throw InputError("encode_text: empty prompt");
  if (static_cast<int>(enc.words.size()) > max_tokens) {
    throw InputError("encode_text: prompt has " + std::to_string(enc.words.size()) +
                     " tokens, limit is " + std::to_string(max_tokens));
  }
  enc.tokens.reserve(enc.words.size());
  for (const std::string& w : enc.words) enc.tokens.push_back(vocab.id(w));
  return enc;
}

}  // namespace dymo
