#pragma once

#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "error.hpp"

namespace zsg {

inline std::string to_lower(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

/// Lower-cased whitespace tokenization.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(to_lower(w));
  return out;
}

/// Frozen word-embedding table. Row 0 is the reserved all-zero UNK row that
/// every unknown word maps to.
class EmbeddingTable {
 public:
  static constexpr int kUnk = 0;
  static constexpr const char* kUnkWord = "<unk>";

  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {
    words_.push_back(kUnkWord);
    values_.assign(dim, 0.0);
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  int add(const std::string& word, const std::vector<double>& vec) {
    require(vec.size() == dim_, ErrorClass::InvalidInput, "embedding: '" + word + "' has wrong width");
    require(!index_.contains(word) && word != kUnkWord, ErrorClass::InvalidInput,
            "embedding: duplicate word '" + word + "'");
    const int id = static_cast<int>(words_.size());
    words_.push_back(word);
    index_[word] = id;
    values_.insert(values_.end(), vec.begin(), vec.end());
    return id;
  }

  bool contains(const std::string& word) const { return index_.contains(word); }

  int id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

  std::vector<double> vector(int id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < words_.size(), ErrorClass::InvalidInput,
            "embedding: token id out of range");
    auto b = values_.begin() + static_cast<std::ptrdiff_t>(id * dim_);
    return {b, b + static_cast<std::ptrdiff_t>(dim_)};
  }

  std::vector<double> vector(const std::string& word) const { return vector(id(word)); }

  const double* row(int id) const { return values_.data() + static_cast<std::size_t>(id) * dim_; }

  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
  }

  friend bool operator==(const EmbeddingTable& a, const EmbeddingTable& b) {
    return a.dim_ == b.dim_ && a.words_ == b.words_ && a.values_ == b.values_;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
  std::vector<double> values_;
};

/// Plain-text embedding file: one `word v1 ... vd` entry per line.
inline EmbeddingTable read_embedding_file(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorClass::IoError, "cannot open embedding file " + path);
  EmbeddingTable table;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream is(line);
    std::string word;
    if (!(is >> word)) continue;
    std::vector<double> vec;
    double v;
    while (is >> v) vec.push_back(v);
    require(!vec.empty(), ErrorClass::InvalidInput,
            path + ":" + std::to_string(line_no) + ": entry without vector");
    if (first) {
      table = EmbeddingTable(vec.size());
      first = false;
    }
    require(vec.size() == table.dim(), ErrorClass::InvalidInput,
            path + ":" + std::to_string(line_no) + ": inconsistent vector width");
    table.add(word, vec);
  }
  require(!first, ErrorClass::InvalidInput, "embedding file " + path + " is empty");
  return table;
}

inline void write_embedding_file(const EmbeddingTable& table, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorClass::IoError, "cannot write embedding file " + path);
  out << std::setprecision(17);
  for (std::size_t id = 1; id < table.size(); ++id) {
    out << table.word(static_cast<int>(id));
    const double* r = table.row(static_cast<int>(id));
    for (std::size_t k = 0; k < table.dim(); ++k) out << ' ' << r[k];
    out << '\n';
  }
}

inline double l2_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return 0;
  return ab / std::sqrt(aa * bb);
}

}  // namespace zsg
