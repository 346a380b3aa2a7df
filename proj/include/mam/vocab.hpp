#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mam/errors.hpp"

namespace mam {

inline std::vector<std::string> split_ws(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

// Whitespace token vocabulary with fixed specials. Token ids are stable:
// sorted unique corpus tokens after the specials.
struct Vocab {
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kUnk = 2;

  std::vector<std::string> id_to_tok;
  std::map<std::string, int> tok_to_id;

  int size() const { return static_cast<int>(id_to_tok.size()); }

  static Vocab from_tokens(std::vector<std::string> tokens) {
    Vocab v;
    v.id_to_tok = std::move(tokens);
    if (v.id_to_tok.size() < 3 || v.id_to_tok[0] != "<bos>" ||
        v.id_to_tok[1] != "<eos>" || v.id_to_tok[2] != "<unk>")
      throw DataError("vocab table must start with <bos>, <eos>, <unk>");
    for (size_t i = 0; i < v.id_to_tok.size(); ++i) {
      if (!v.tok_to_id.emplace(v.id_to_tok[i], static_cast<int>(i)).second)
        throw DataError("duplicate vocab token: " + v.id_to_tok[i]);
    }
    return v;
  }

  static Vocab build(const std::vector<std::string>& texts) {
    std::set<std::string> uniq;
    for (const auto& t : texts)
      for (const auto& tok : split_ws(t)) uniq.insert(tok);
    std::vector<std::string> tokens = {"<bos>", "<eos>", "<unk>"};
    tokens.insert(tokens.end(), uniq.begin(), uniq.end());
    return from_tokens(std::move(tokens));
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& tok : split_ws(text)) {
      auto it = tok_to_id.find(tok);
      ids.push_back(it == tok_to_id.end() ? kUnk : it->second);
    }
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kBos || id == kEos) continue;
      if (id < 0 || id >= size())
        throw DataError("token id out of range: " + std::to_string(id));
      if (!out.empty()) out += " ";
      out += id_to_tok[static_cast<size_t>(id)];
    }
    return out;
  }
};

}  // namespace mam
