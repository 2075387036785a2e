#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace crest {

// Lowercases and splits on whitespace, then peels leading/trailing
// punctuation into separate tokens. Angle-bracketed special tokens like
// <sep> pass through whole.
std::vector<std::string> word_tokenize(const std::string& text);

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;

  Vocab();

  int add(const std::string& token);
  int id(const std::string& token) const;  // kUnk for unknown tokens
  bool contains(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  void add_labels(const std::vector<std::string>& names);
  int label_id(const std::string& name) const;  // throws on unknown label
  const std::vector<std::string>& label_names() const { return label_names_; }

  void add_sentinels(int count = 100);
  int sentinel_id(int index) const;
  int sentinel_count() const { return sentinel_count_; }
  bool is_sentinel(int id) const;
  int sentinel_index(int id) const;  // -1 when not a sentinel

  bool is_label(int id) const;
  // reserved, label, or sentinel token
  bool is_special(int id) const;

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

  std::uint64_t hash() const;  // FNV-1a over the ordered token list

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<std::string> label_names_;
  int first_sentinel_{-1};
  int sentinel_count_{0};
};

}  // namespace crest
