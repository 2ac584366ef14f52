#include "dymo/text.h"

#include "doctest.h"
#include "dymo/errors.h"

using namespace dymo;

namespace {
const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::from_grammar(Grammar::builtin());
  return v;
}
}  // namespace

TEST_CASE("builtin grammar loads") {
  const Grammar& g = Grammar::builtin();
  CHECK(g.version == 1);
  CHECK(g.colors.size() == 6);
  CHECK(g.is_noun("circle"));
  CHECK_FALSE(g.is_noun("red"));
  CHECK(g.is_adjective("small"));
  CHECK(g.color_index("blue") == 2);
}

TEST_CASE("tokenization of a simple caption") {
  const TextEncoding enc = encode_text("a red circle", vocab(), 16);
  REQUIRE(enc.length() == 3);
  CHECK(enc.words == std::vector<std::string>{"a", "red", "circle"});
  CHECK(enc.tokens[0] == vocab().id("a"));
  CHECK(enc.tokens[1] == vocab().id("red"));
  CHECK(enc.tokens[2] == vocab().id("circle"));
  for (int t : enc.tokens) CHECK(t > Vocabulary::kUnk);
}

TEST_CASE("case and punctuation folding") {
  CHECK(encode_text("A Red Circle!", vocab(), 16).tokens ==
        encode_text("a red circle", vocab(), 16).tokens);
  CHECK(normalize_words("  next-to,the  SQUARE. ") ==
        std::vector<std::string>{"next", "to", "the", "square"});
}

TEST_CASE("unknown words map to unk but keep their text") {
  const TextEncoding enc = encode_text("a xylophone", vocab(), 16);
  REQUIRE(enc.length() == 2);
  CHECK(enc.tokens[1] == Vocabulary::kUnk);
  CHECK(enc.words[1] == "xylophone");
}

TEST_CASE("encode_text errors") {
  CHECK_THROWS_AS(encode_text("", vocab(), 16), InputError);
  CHECK_THROWS_AS(encode_text(" ?! ", vocab(), 16), InputError);
  CHECK_THROWS_AS(encode_text("a a a a a", vocab(), 4), InputError);
}

TEST_CASE("vocabulary json round trip") {
  const Vocabulary back = Vocabulary::from_json(vocab().to_json());
  CHECK(back == vocab());
  CHECK_THROWS_AS(Vocabulary::from_json(nlohmann::json::array({"x"})), FormatError);
}
