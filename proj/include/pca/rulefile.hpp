#pragma once
// Rule definition files. Line-oriented text:
//
//   # comment
//   kind kernel
//   alphabet 0 1
//   cemetery *          (optional; symbol must be listed in the alphabet)
//   time 0              (optional layer header; rows before any header are layer 0)
//   row 0 | 2 1 | 0.75 0.25
//
// A kernel row conditions on the own last state and the histogram of neighbor
// last states (counts per symbol in alphabet order) and lists the next-state
// probabilities in alphabet order. Queries at time k use the layer with the
// largest declared time <= k, so the last layer repeats forever.
//
//   kind gaussian
//   a 0.4
//   b 0.2
//   c 0.1

#include <cstdio>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "pca/core.hpp"

namespace pca {

// Finite kernel backed by explicit rows; the concrete rule type produced by
// rule files.
class kernel_table final : public kernel_rule {
 public:
  explicit kernel_table(state_space sp) : kernel_rule(std::move(sp)) {}

  static std::string row_key(char own, std::span<const int> counts) {
    std::string k(1, own);
    for (int c : counts) {
      k += ',';
      k += std::to_string(c);
    }
    return k;
  }

  // Returns false when the (layer, key) pair already exists.
  bool add_row(int time_layer, char own, std::span<const int> counts,
               std::vector<double> probs) {
    if (int(counts.size()) != space.size() || int(probs.size()) != space.size())
      throw std::invalid_argument("row arity does not match the alphabet");
    check_pmf(probs);
    if (space.cemetery >= 0 && probs[std::size_t(space.cemetery)] != 0.0)
      throw std::invalid_argument("row assigns mass to the cemetery");
    auto& layer = layers_[time_layer];
    return layer.emplace(row_key(own, counts), std::move(probs)).second;
  }

  void probs(int k, const traj& own, std::span<const traj> nbrs,
             std::span<double> out) const override {
    if (layers_.empty()) throw std::logic_error("kernel table has no rows");
    auto it = layers_.upper_bound(k);
    if (it == layers_.begin())
      throw key_miss_error("no kernel layer at or before time " +
                           std::to_string(k));
    --it;
    std::vector<int> cnt(std::size_t(space.size()));
    detail::last_state_histogram(space, nbrs, cnt.data());
    const std::string key = row_key(own.back(), cnt);
    auto row = it->second.find(key);
    if (row == it->second.end())
      throw key_miss_error("kernel table has no row for own '" +
                           std::string(1, own.back()) + "' with counts " +
                           key.substr(2) + " at layer " +
                           std::to_string(it->first));
    for (int i = 0; i < space.size(); ++i) out[std::size_t(i)] = row->second[std::size_t(i)];
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "kind kernel\nalphabet";
    for (char s : space.symbols) os << ' ' << s;
    os << '\n';
    if (space.cemetery >= 0) os << "cemetery " << space.cemetery_symbol() << '\n';
    for (const auto& [t, rows] : layers_) {
      os << "time " << t << '\n';
      // Deterministic output order.
      std::map<std::string, const std::vector<double>*> sorted;
      for (const auto& [k, p] : rows) sorted.emplace(k, &p);
      for (const auto& [k, p] : sorted) {
        os << "row " << k[0] << " |";
        std::size_t pos = 1;
        while (pos < k.size()) {
          auto next = k.find(',', pos + 1);
          if (next == std::string::npos) next = k.size();
          os << ' ' << k.substr(pos + 1, next - pos - 1);
          pos = next;
        }
        os << " |";
        char buf[32];
        for (double x : *p) {
          std::snprintf(buf, sizeof buf, "%.17g", x);
          os << ' ' << buf;
        }
        os << '\n';
      }
    }
    return os.str();
  }

 private:
  // layer time -> (row key -> probability row)
  std::map<int, std::unordered_map<std::string, std::vector<double>>> layers_;
};

// Parse result: exactly one of kernel / affine is active.
struct rule_file {
  std::string kind;
  std::shared_ptr<kernel_table> kernel;
  affine_rule affine{};
};

namespace detail {
struct token {
  std::string text;
  int col = 0;  // 1-based
};

inline std::vector<token> tokenize(const std::string& line) {
  std::vector<token> out;
  std::size_t i = 0;
  while (i < line.size()) {
    if (line[i] == ' ' || line[i] == '\t') {
      ++i;
      continue;
    }
    if (line[i] == '#') break;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    out.push_back({line.substr(i, j - i), int(i) + 1});
    i = j;
  }
  return out;
}
}  // namespace detail

inline rule_file parse_rule_text(const std::string& text,
                                 const std::string& name = "<rule>") {
  using detail::token;
  auto fail = [&](int line, int col, const std::string& what) -> void {
    throw parse_error(name + ":" + std::to_string(line) + ":" +
                      std::to_string(col) + ": " + what);
  };
  auto number = [&](const token& t, int line) -> double {
    try {
      std::size_t used = 0;
      double v = std::stod(t.text, &used);
      if (used != t.text.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      fail(line, t.col, "expected a number, got '" + t.text + "'");
    }
    return 0;
  };

  rule_file out;
  std::string alphabet;
  std::optional<char> cemetery;
  std::optional<double> ga, gb, gc;
  struct pending_row {
    int line;
    int layer;
    char own;
    int own_col;
    std::vector<int> counts;
    std::vector<double> probs;
  };
  std::vector<pending_row> rows;
  int layer = 0;
  bool saw_layer_header = false;

  std::istringstream is(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    auto toks = detail::tokenize(raw);
    if (toks.empty()) continue;
    const std::string& head = toks[0].text;
    if (head == "kind") {
      if (toks.size() != 2) fail(lineno, toks[0].col, "kind takes one value");
      if (toks[1].text != "kernel" && toks[1].text != "gaussian")
        fail(lineno, toks[1].col, "kind must be kernel or gaussian");
      if (!out.kind.empty()) fail(lineno, toks[0].col, "duplicate kind");
      out.kind = toks[1].text;
    } else if (head == "alphabet") {
      if (toks.size() < 2) fail(lineno, toks[0].col, "alphabet needs symbols");
      for (std::size_t i = 1; i < toks.size(); ++i) {
        if (toks[i].text.size() != 1)
          fail(lineno, toks[i].col, "symbols are single characters");
        if (alphabet.find(toks[i].text[0]) != std::string::npos)
          fail(lineno, toks[i].col, "duplicate symbol");
        alphabet += toks[i].text[0];
      }
    } else if (head == "cemetery") {
      if (toks.size() != 2 || toks[1].text.size() != 1)
        fail(lineno, toks[0].col, "cemetery takes one symbol");
      if (cemetery) fail(lineno, toks[0].col, "duplicate cemetery");
      cemetery = toks[1].text[0];
    } else if (head == "time") {
      if (toks.size() != 2) fail(lineno, toks[0].col, "time takes one value");
      const double v = number(toks[1], lineno);
      if (v < 0 || v != int(v)) fail(lineno, toks[1].col, "time must be a nonnegative integer");
      if (saw_layer_header && int(v) <= layer)
        fail(lineno, toks[1].col, "layer times must increase");
      layer = int(v);
      saw_layer_header = true;
    } else if (head == "row") {
      // row <own> | <counts...> | <probs...>
      std::vector<std::size_t> bars;
      for (std::size_t i = 1; i < toks.size(); ++i)
        if (toks[i].text == "|") bars.push_back(i);
      if (bars.size() != 2 || bars[0] != 2)
        fail(lineno, toks[0].col, "row layout is: row <own> | <counts> | <probs>");
      if (toks[1].text.size() != 1)
        fail(lineno, toks[1].col, "own state is a single symbol");
      pending_row r;
      r.line = lineno;
      r.layer = layer;
      r.own = toks[1].text[0];
      r.own_col = toks[1].col;
      for (std::size_t i = bars[0] + 1; i < bars[1]; ++i) {
        const double v = number(toks[i], lineno);
        if (v < 0 || v != int(v)) fail(lineno, toks[i].col, "counts are nonnegative integers");
        r.counts.push_back(int(v));
      }
      for (std::size_t i = bars[1] + 1; i < toks.size(); ++i)
        r.probs.push_back(number(toks[i], lineno));
      if (r.probs.empty()) fail(lineno, toks[0].col, "row has no probabilities");
      rows.push_back(std::move(r));
    } else if (head == "a" || head == "b" || head == "c") {
      if (toks.size() != 2) fail(lineno, toks[0].col, head + " takes one value");
      const double v = number(toks[1], lineno);
      auto& slot = head == "a" ? ga : head == "b" ? gb : gc;
      if (slot) fail(lineno, toks[0].col, "duplicate coefficient " + head);
      slot = v;
    } else {
      fail(lineno, toks[0].col, "unknown directive '" + head + "'");
    }
  }

  if (out.kind.empty()) throw parse_error(name + ":1:1: missing kind");
  if (out.kind == "gaussian") {
    if (!ga || !gb || !gc)
      throw parse_error(name + ":1:1: gaussian rule needs a, b and c");
    out.affine = affine_rule{*ga, *gb, *gc};
    return out;
  }
  if (alphabet.empty()) throw parse_error(name + ":1:1: kernel rule needs an alphabet");
  int cem = -1;
  if (cemetery) {
    auto p = alphabet.find(*cemetery);
    if (p == std::string::npos)
      throw parse_error(name + ":1:1: cemetery symbol not in the alphabet");
    cem = int(p);
  }
  auto table = std::make_shared<kernel_table>(state_space::finite(alphabet, cem));
  for (auto& r : rows) {
    if (alphabet.find(r.own) == std::string::npos)
      fail(r.line, r.own_col, "own state not in the alphabet");
    try {
      if (!table->add_row(r.layer, r.own, r.counts, std::move(r.probs)))
        fail(r.line, 1, "duplicate row for this layer");
    } catch (const std::invalid_argument& e) {
      fail(r.line, 1, e.what());
    }
  }
  out.kernel = std::move(table);
  return out;
}

inline rule_file parse_rule_path(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open rule file " + path);
  std::string text;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) text.append(buf, n);
  std::fclose(f);
  return parse_rule_text(text, path);
}

// Tabulates any symmetric kernel into explicit rows covering neighbor counts
// 0..max_degree, which makes built-in rules serializable.
inline kernel_table tabulate(const kernel_rule& r, int max_degree,
                             int max_time = 0) {
  if (!r.markov)
    throw std::invalid_argument("only last-state kernels can be tabulated");
  kernel_table out(r.space);
  const int n = r.space.size();
  std::vector<double> p(static_cast<std::size_t>(n));
  // Enumerate histograms with total count <= max_degree.
  std::vector<int> cnt(std::size_t(n), 0);
  auto rec = [&](auto&& self, int sym, int left) -> void {
    if (sym == n) {
      std::vector<traj> nbrs;
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < cnt[std::size_t(i)]; ++c)
          nbrs.push_back(traj(1, r.space.symbols[std::size_t(i)]));
      for (int t = 0; t <= max_time; ++t)
        for (int o = 0; o < n; ++o) {
          if (o == r.space.cemetery) continue;
          const traj own(1, r.space.symbols[std::size_t(o)]);
          r.probs(t, own, nbrs, p);
          out.add_row(t, own[0], cnt, p);
        }
      return;
    }
    if (sym == r.space.cemetery) {
      self(self, sym + 1, left);
      return;
    }
    for (int c = 0; c <= left; ++c) {
      cnt[std::size_t(sym)] = c;
      self(self, sym + 1, left - c);
      cnt[std::size_t(sym)] = 0;
    }
  };
  rec(rec, 0, max_degree);
  return out;
}

}  // namespace pca
