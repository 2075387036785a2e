#include "crest/tokenizer.hpp"

#include <cctype>
#include <stdexcept>

namespace crest {

namespace {

bool is_punct(char c) {
  return std::ispunct(static_cast<unsigned char>(c)) != 0;
}

bool is_special_form(const std::string& w) {
  return w.size() >= 3 && w.front() == '<' && w.back() == '>';
}

}  // namespace

std::vector<std::string> word_tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&]() {
    if (word.empty()) return;
    if (is_special_form(word)) {
      out.push_back(word);
      word.clear();
      return;
    }
    std::size_t begin = 0;
    std::size_t end = word.size();
    while (begin < end && is_punct(word[begin])) {
      out.push_back(std::string(1, word[begin]));
      ++begin;
    }
    std::vector<std::string> tail;
    while (end > begin && is_punct(word[end - 1])) {
      tail.push_back(std::string(1, word[end - 1]));
      --end;
    }
    if (end > begin) out.push_back(word.substr(begin, end - begin));
    out.insert(out.end(), tail.rbegin(), tail.rend());
    word.clear();
  };
  for (char raw : text) {
    if (std::isspace(static_cast<unsigned char>(raw))) {
      flush();
    } else {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(raw))));
    }
  }
  flush();
  return out;
}

Vocab::Vocab() {
  add("<pad>");
  add("<unk>");
  add("<eos>");
  add("<sep>");
}

int Vocab::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(const std::string& token) const {
  return index_.find(token) != index_.end();
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id));
  return tokens_[id];
}

void Vocab::add_labels(const std::vector<std::string>& names) {
  for (const std::string& name : names) {
    add("<label_" + name + ">");
    label_names_.push_back(name);
  }
}

int Vocab::label_id(const std::string& name) const {
  auto it = index_.find("<label_" + name + ">");
  if (it == index_.end()) throw std::invalid_argument("unknown label " + name);
  return it->second;
}

void Vocab::add_sentinels(int count) {
  first_sentinel_ = size();
  for (int i = 0; i < count; ++i) add("<sent_" + std::to_string(i) + ">");
  sentinel_count_ = count;
}

int Vocab::sentinel_id(int index) const {
  if (index < 0 || index >= sentinel_count_) {
    throw std::out_of_range("sentinel " + std::to_string(index) + " of " +
                            std::to_string(sentinel_count_));
  }
  return first_sentinel_ + index;
}

bool Vocab::is_sentinel(int id) const {
  return first_sentinel_ >= 0 && id >= first_sentinel_ && id < first_sentinel_ + sentinel_count_;
}

int Vocab::sentinel_index(int id) const {
  return is_sentinel(id) ? id - first_sentinel_ : -1;
}

bool Vocab::is_label(int id) const {
  if (id < 0 || id >= size()) return false;
  return tokens_[id].rfind("<label_", 0) == 0;
}

bool Vocab::is_special(int id) const {
  return id == kPad || id == kUnk || id == kEos || id == kSep || is_label(id) || is_sentinel(id);
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const std::string& w : word_tokenize(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int t : ids) {
    if (!out.empty()) out.push_back(' ');
    out += token(t);
  }
  return out;
}

std::uint64_t Vocab::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const std::string& t : tokens_) {
    for (char c : t) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    h ^= 0xff;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace crest
