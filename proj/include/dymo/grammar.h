#ifndef DYMO_GRAMMAR_H_
#define DYMO_GRAMMAR_H_

#include <string>
#include <string_view>
#include <vector>

namespace dymo {

// Closed caption grammar of the toy domain: shape nouns, color and size
// adjectives, determiners and spatial fillers. Shipped as a versioned asset.
struct Grammar {
  int version = 0;
  std::vector<std::string> determiners;
  std::vector<std::string> colors;
  std::vector<std::string> sizes;
  std::vector<std::string> shapes;
  std::vector<std::string> fillers;

  // The grammar compiled into the library (assets/grammar_v1.json).
  static const Grammar& builtin();
  static Grammar from_json(std::string_view text);

  bool is_noun(std::string_view w) const;
  bool is_adjective(std::string_view w) const;
  bool is_color(std::string_view w) const;
  bool is_size(std::string_view w) const;
  bool is_determiner(std::string_view w) const;

  // Index into colors / shapes, or -1.
  int color_index(std::string_view w) const;
  int shape_index(std::string_view w) const;

  // Every word of the grammar, in asset order.
  std::vector<std::string> all_words() const;
};

}  // namespace dymo

#endif  // DYMO_GRAMMAR_H_
