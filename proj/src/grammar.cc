#include "dymo/grammar.h"

#include <algorithm>

#include "dymo/assets.h"
#include "dymo/errors.h"
#include "json.hpp"

namespace dymo {
namespace {

bool contains(const std::vector<std::string>& list, std::string_view w) {
  return std::find(list.begin(), list.end(), w) != list.end();
}

int index_of(const std::vector<std::string>& list, std::string_view w) {
  auto it = std::find(list.begin(), list.end(), w);
  return it == list.end() ? -1 : static_cast<int>(it - list.begin());
}

}  // namespace

const Grammar& Grammar::builtin() {
  static const Grammar g = from_json(assets::kGrammarJson);
  return g;
}

Grammar Grammar::from_json(std::string_view text) {
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    Grammar g;
    g.version = j.at("version").get<int>();
    g.determiners = j.at("determiners").get<std::vector<std::string>>();
    g.colors = j.at("colors").get<std::vector<std::string>>();
    g.sizes = j.at("sizes").get<std::vector<std::string>>();
    g.shapes = j.at("shapes").get<std::vector<std::string>>();
    g.fillers = j.at("fillers").get<std::vector<std::string>>();
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("grammar asset: ") + e.what());
  }
}

bool Grammar::is_noun(std::string_view w) const { return contains(shapes, w); }
bool Grammar::is_adjective(std::string_view w) const { return is_color(w) || is_size(w); }
bool Grammar::is_color(std::string_view w) const { return contains(colors, w); }
bool Grammar::is_size(std::string_view w) const { return contains(sizes, w); }
bool Grammar::is_determiner(std::string_view w) const { return contains(determiners, w); }
int Grammar::color_index(std::string_view w) const { return index_of(colors, w); }
int Grammar::shape_index(std::string_view w) const { return index_of(shapes, w); }

std::vector<std::string> Grammar::all_words() const {
  std::vector<std::string> words;
  for (const auto* list : {&determiners, &colors, &sizes, &shapes, &fillers}) {
    words.insert(words.end(), list->begin(), list->end());
  }
  return words;
}

}  // namespace dymo
