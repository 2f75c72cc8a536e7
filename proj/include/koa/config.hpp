#pragma once

// Flat key=value run configuration. '#' starts a comment; blank lines are
// ignored; unknown keys and ill-typed values are parse errors.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <string>

#include "koa/errors.hpp"
#include "koa/manifest.hpp"

namespace koa {

struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> lr;
  std::optional<double> loss_weight;
  std::optional<std::size_t> size;        // FCN input size
  std::optional<std::size_t> image_size;  // synthetic radiograph size
  std::optional<std::size_t> crop_h;
  std::optional<std::size_t> crop_w;
  std::optional<std::size_t> n;
  std::optional<double> threshold;
  std::optional<bool> deterministic;
  std::optional<std::string> manifest;
  std::optional<std::string> out;
  std::optional<std::string> weights;
  std::optional<std::string> predictions;
  std::optional<std::string> arch;

  // Fields set in `over` replace ours.
  void merge(const RunConfig& over) {
    auto take = [](auto& dst, const auto& src) {
      if (src) dst = src;
    };
    take(seed, over.seed);
    take(epochs, over.epochs);
    take(batch_size, over.batch_size);
    take(lr, over.lr);
    take(loss_weight, over.loss_weight);
    take(size, over.size);
    take(image_size, over.image_size);
    take(crop_h, over.crop_h);
    take(crop_w, over.crop_w);
    take(n, over.n);
    take(threshold, over.threshold);
    take(deterministic, over.deterministic);
    take(manifest, over.manifest);
    take(out, over.out);
    take(weights, over.weights);
    take(predictions, over.predictions);
    take(arch, over.arch);
  }
};

namespace detail {

template <typename U>
U parse_number(const std::string& v, const std::string& source, std::size_t line, const std::string& key) {
  U out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ParseError(source, line, "value of '" + key + "' is not a valid " +
                                       (std::is_floating_point_v<U> ? "number" : "non-negative integer") + ": '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& v, const std::string& source, std::size_t line, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ParseError(source, line, "value of '" + key + "' is not a boolean: '" + v + "'");
}

}  // namespace detail

inline RunConfig parse_run_config(std::istream& in, const std::string& source = "<config>") {
  RunConfig c;
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source, lineno, "expected key=value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    auto u64 = [&] { return detail::parse_number<std::uint64_t>(val, source, lineno, key); };
    auto sz = [&] { return detail::parse_number<std::size_t>(val, source, lineno, key); };
    auto dbl = [&] { return detail::parse_number<double>(val, source, lineno, key); };
    auto str = [&] {
      if (val.empty()) throw ParseError(source, lineno, "value of '" + key + "' is empty");
      return val;
    };
    if (key == "seed") c.seed = u64();
    else if (key == "epochs") c.epochs = sz();
    else if (key == "batch_size") c.batch_size = sz();
    else if (key == "lr") c.lr = dbl();
    else if (key == "loss_weight") c.loss_weight = dbl();
    else if (key == "size") c.size = sz();
    else if (key == "image_size") c.image_size = sz();
    else if (key == "crop_h") c.crop_h = sz();
    else if (key == "crop_w") c.crop_w = sz();
    else if (key == "n") c.n = sz();
    else if (key == "threshold") c.threshold = dbl();
    else if (key == "deterministic") c.deterministic = detail::parse_bool(val, source, lineno, key);
    else if (key == "manifest") c.manifest = str();
    else if (key == "out") c.out = str();
    else if (key == "weights") c.weights = str();
    else if (key == "predictions") c.predictions = str();
    else if (key == "arch") {
      c.arch = str();
      if (*c.arch != "classifier" && *c.arch != "joint" && *c.arch != "fcn")
        throw ParseError(source, lineno, "arch must be fcn, classifier or joint, got '" + val + "'");
    } else {
      throw ParseError(source, lineno, "unknown key '" + key + "'");
    }
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  return parse_run_config(in, path.string());
}

}  // namespace koa
