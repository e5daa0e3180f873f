#include "mprompt/tokenizer.hpp"

#include <sstream>

namespace mprompt {

std::vector<std::string> split_ws(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
}

const Vocab& Vocab::standard() {
  static const Vocab v = [] {
    std::vector<std::string> w = {"<pad>", "<sep>", "<unk>"};
    for (char c = 'a'; c <= 'z'; ++c) w.emplace_back(1, c);
    for (char c = '0'; c <= '9'; ++c) w.emplace_back(1, c);
    for (const char* p : {":", ",", ".", "?", "[", "]", "-"}) w.emplace_back(p);
    for (int i = 0; i < 10; ++i) w.push_back("ca" + std::to_string(i));
    for (int i = 0; i < 10; ++i) w.push_back("cb" + std::to_string(i));
    for (int i = 0; i < 30; ++i) w.push_back("mk" + std::to_string(i));
    for (const char* p : {"la", "lb", "pa", "pb", "pc", "pd"}) w.emplace_back(p);
    for (const char* p : {"classify", "options", "which", "marker", "extract", "the", "marked",
                          "words"})
      w.emplace_back(p);
    return Vocab(std::move(w));
  }();
  return v;
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size()) throw ShapeError("vocab id out of range: " + std::to_string(id));
  return words_[static_cast<size_t>(id)];
}

int Vocab::lookup(const std::string& w) const {
  auto it = index_.find(w);
  return it == index_.end() ? -1 : it->second;
}

void Vocab::encode_word(const std::string& w, std::vector<int>& out) const {
  int id = lookup(w);
  if (id >= 0) {
    out.push_back(id);
    return;
  }
  for (char c : w) {
    int cid = lookup(std::string(1, c));
    out.push_back(cid >= 0 ? cid : kUnkId);
  }
}

std::vector<int> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) encode_word(t, out);
  return out;
}

std::vector<int> Vocab::encode_text(const std::string& text) const {
  return encode(split_ws(text));
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

}  // namespace mprompt
