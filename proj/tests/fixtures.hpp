#pragma once

// Shared helpers for building random models and scratch directories.

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "koa/model.hpp"

namespace fixture {

// Small random architecture with random weights and batchnorm buffers.
template <std::floating_point T>
koa::ModelGraph<T> random_model(koa::Rng& rng) {
  std::uniform_int_distribution<std::size_t> ch(1, 4), sz(4, 9), units(1, 6), depth(0, 3);
  koa::ModelBuilder<T> b("random", {ch(rng), sz(rng), sz(rng)});
  const std::size_t convs = depth(rng);
  for (std::size_t i = 0; i < convs; ++i) {
    const std::string id = "conv" + std::to_string(i);
    b.conv(id, units(rng), rng() % 2 ? 3 : 1, rng() % 2);
    if (rng() % 2) b.batchnorm(id + "_bn");
  }
  if (rng() % 3 == 0) {
    b.head("map", units(rng), koa::Activation::Sigmoid, true);
  } else {
    b.flatten("flat");
    const std::size_t dense = depth(rng);
    for (std::size_t i = 0; i < dense; ++i) b.dense("fc" + std::to_string(i), units(rng), rng() % 2);
    b.head("out", units(rng), koa::Activation::Softmax);
    if (rng() % 2) b.head("reg", 1, koa::Activation::Linear);
  }
  auto m = std::move(b).build();
  std::normal_distribution<double> n(0.0, 1.0);
  for (const auto& t : m.state())
    for (auto& v : t.tensor->data()) v = static_cast<T>(n(rng));
  return m;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  auto p = std::filesystem::temp_directory_path() /
           ("koa_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixture
