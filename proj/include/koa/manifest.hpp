#pragma once

// Knee manifests (CSV), annotation files and radiograph-level splitting.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "koa/errors.hpp"
#include "koa/localization.hpp"
#include "koa/ops.hpp"

namespace koa {

enum class Side { Left, Right };
enum class Split { Train, Val, Test };

inline char to_char(Side s) { return s == Side::Left ? 'L' : 'R'; }

inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

struct ManifestRow {
  std::string image_path;  // relative to the manifest's directory unless absolute
  Side side = Side::Left;
  int kl_grade = 0;
  std::optional<Split> split;

  friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

struct Manifest {
  std::vector<ManifestRow> rows;
  bool has_split_column = true;
  std::filesystem::path base_dir;  // directory image paths are relative to

  std::filesystem::path resolve(const ManifestRow& row) const {
    const std::filesystem::path p(row.image_path);
    return p.is_absolute() ? p : base_dir / p;
  }

  std::vector<ManifestRow> with_split(Split s) const {
    std::vector<ManifestRow> out;
    for (const auto& r : rows)
      if (r.split == s) out.push_back(r);
    return out;
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::optional<Split> parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  return std::nullopt;
}

}  // namespace detail

inline Manifest parse_manifest(std::istream& in, const std::string& source = "<manifest>") {
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  std::set<std::pair<std::string, Side>> keys;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv(line);
    if (!header_seen) {
      const std::vector<std::string> full{"image_path", "side", "kl_grade", "split"};
      if (fields == full) {
        m.has_split_column = true;
      } else if (fields == std::vector<std::string>(full.begin(), full.end() - 1)) {
        m.has_split_column = false;
      } else {
        throw ParseError(source, lineno, "missing header 'image_path,side,kl_grade[,split]'");
      }
      header_seen = true;
      continue;
    }
    const std::size_t want = m.has_split_column ? 4 : 3;
    if (fields.size() != want)
      throw ParseError(source, lineno, "expected " + std::to_string(want) + " fields, found " + std::to_string(fields.size()));
    ManifestRow row;
    row.image_path = fields[0];
    if (row.image_path.empty()) throw ParseError(source, lineno, "empty image path");
    if (fields[1] == "L") {
      row.side = Side::Left;
    } else if (fields[1] == "R") {
      row.side = Side::Right;
    } else {
      throw ParseError(source, lineno, "side must be L or R, got '" + fields[1] + "'");
    }
    int grade = -1;
    const auto& g = fields[2];
    const auto [ptr, ec] = std::from_chars(g.data(), g.data() + g.size(), grade);
    if (ec != std::errc() || ptr != g.data() + g.size() || grade < 0 || grade > 4)
      throw ParseError(source, lineno, "KL grade must be an integer 0-4, got '" + g + "'");
    row.kl_grade = grade;
    if (m.has_split_column && !fields[3].empty()) {
      row.split = detail::parse_split(fields[3]);
      if (!row.split) throw ParseError(source, lineno, "split must be train, val or test, got '" + fields[3] + "'");
    }
    if (!keys.emplace(row.image_path, row.side).second)
      throw ParseError(source, lineno, "duplicate entry for " + row.image_path + " side " + fields[1]);
    m.rows.push_back(std::move(row));
  }
  if (!header_seen) throw ParseError(source, lineno, "missing header 'image_path,side,kl_grade[,split]'");
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  Manifest m = parse_manifest(in, path.string());
  m.base_dir = path.parent_path();
  return m;
}

inline void write_manifest(std::ostream& out, const Manifest& m) {
  out << (m.has_split_column ? "image_path,side,kl_grade,split\n" : "image_path,side,kl_grade\n");
  for (const auto& r : m.rows) {
    out << r.image_path << ',' << to_char(r.side) << ',' << r.kl_grade;
    if (m.has_split_column) out << ',' << (r.split ? to_string(*r.split) : "");
    out << '\n';
  }
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest " + path.string());
  write_manifest(out, m);
}

inline std::array<std::size_t, 5> histogram(const Manifest& m) {
  std::array<std::size_t, 5> h{};
  for (const auto& r : m.rows) ++h[static_cast<std::size_t>(r.kl_grade)];
  return h;
}

// Group-level shuffle split: groups (e.g. radiographs) are shuffled with
// `seed`, the first floor(G * frac) go to the first partition, and both
// partitions are kept non-empty. Item order inside a partition is stable.
template <typename Item, typename Key>
std::pair<std::vector<Item>, std::vector<Item>> split_dataset(const std::vector<Item>& items, double train_frac,
                                                              std::uint64_t seed, Key&& key) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ArgumentError("split_dataset: fraction must be in (0,1)");
  using K = std::decay_t<decltype(key(items.front()))>;
  std::vector<K> groups;
  std::map<K, std::size_t> group_of;
  if (items.empty()) throw ArgumentError("split_dataset: need at least 2 groups, got 0");
  for (const auto& it : items) {
    auto k = key(it);
    if (group_of.emplace(k, groups.size()).second) groups.push_back(std::move(k));
  }
  const std::size_t g = groups.size();
  if (g < 2) throw ArgumentError("split_dataset: need at least 2 groups, got " + std::to_string(g));
  std::vector<std::size_t> order(g);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_first = static_cast<std::size_t>(std::floor(static_cast<double>(g) * train_frac));
  n_first = std::clamp<std::size_t>(n_first, 1, g - 1);
  std::vector<bool> first(g, false);
  for (std::size_t i = 0; i < n_first; ++i) first[order[i]] = true;
  std::pair<std::vector<Item>, std::vector<Item>> out;
  for (const auto& it : items) (first[group_of.at(key(it))] ? out.first : out.second).push_back(it);
  return out;
}

template <typename Item>
std::pair<std::vector<Item>, std::vector<Item>> split_dataset(const std::vector<Item>& items, double train_frac,
                                                              std::uint64_t seed) {
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto [a, b] = split_dataset(idx, train_frac, seed, [](std::size_t i) { return i; });
  std::pair<std::vector<Item>, std::vector<Item>> out;
  for (auto i : a) out.first.push_back(items[i]);
  for (auto i : b) out.second.push_back(items[i]);
  return out;
}

// Tags every row: `first` split for the first partition, `second` for the
// rest, keeping both knees of a radiograph together. Rows already tagged
// with a split outside `only` are left alone.
inline void assign_splits(Manifest& m, double frac, std::uint64_t seed, Split first, Split second,
                          std::optional<Split> only = std::nullopt) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < m.rows.size(); ++i)
    if (!only || m.rows[i].split == only) idx.push_back(i);
  auto [a, b] = split_dataset(idx, frac, seed, [&](std::size_t i) { return m.rows[i].image_path; });
  for (auto i : a) m.rows[i].split = first;
  for (auto i : b) m.rows[i].split = second;
  m.has_split_column = true;
}

// ---- annotation files: two "x y w h" lines, left knee first ----

inline std::array<NormRect, 2> parse_annotation(std::istream& in, const std::string& source = "<annotation>") {
  std::vector<std::pair<std::size_t, NormRect>> rects;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::istringstream ls(line);
    NormRect r;
    std::string extra;
    if (!(ls >> r.x >> r.y >> r.w >> r.h)) throw ParseError(source, lineno, "expected four numbers 'x y w h'");
    if (ls >> extra) throw ParseError(source, lineno, "unexpected trailing field '" + extra + "'");
    try {
      validate(r);
    } catch (const ArgumentError& e) {
      throw ParseError(source, lineno, std::string("coordinate out of range: ") + e.what());
    }
    rects.emplace_back(lineno, r);
  }
  if (rects.size() != 2)
    throw ParseError(source, rects.size() > 2 ? rects[2].first : lineno,
                     "expected exactly 2 rectangles, found " + std::to_string(rects.size()));
  return {rects[0].second, rects[1].second};
}

inline std::array<NormRect, 2> load_annotation(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open annotation " + path.string());
  return parse_annotation(in, path.string());
}

inline void write_annotation(std::ostream& out, const std::array<NormRect, 2>& rects) {
  out << std::setprecision(9);
  for (const auto& r : rects) out << r.x << ' ' << r.y << ' ' << r.w << ' ' << r.h << '\n';
}

inline void save_annotation(const std::filesystem::path& path, const std::array<NormRect, 2>& rects) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write annotation " + path.string());
  write_annotation(out, rects);
}

}  // namespace koa
