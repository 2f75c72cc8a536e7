#pragma once

// Command-line pipeline: synth-gen, train-fcn, eval-fcn, extract,
// train-clf, train-joint, evaluate, predict, gradcheck.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "koa/config.hpp"
#include "koa/gradcheck.hpp"
#include "koa/image.hpp"
#include "koa/localization.hpp"
#include "koa/manifest.hpp"
#include "koa/metrics.hpp"
#include "koa/model.hpp"
#include "koa/quantification.hpp"
#include "koa/synth.hpp"
#include "koa/weights.hpp"

namespace koa::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct Io {
  std::ostream& out;
  std::ostream& err;
};

struct Invocation {
  RunConfig cfg;
  std::string split;  // subset selector for eval-fcn / evaluate / predict
  std::size_t cases = 20;
};

namespace detail {

inline std::string fixed6(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

template <typename U>
const U& require(const std::optional<U>& v, const char* flag) {
  if (!v) throw ArgumentError(std::string("missing required option ") + flag);
  return *v;
}

inline std::uint64_t seed_of(const RunConfig& c) {
  if (c.seed) return *c.seed;
  if (c.deterministic.value_or(false)) return 0;
  return std::random_device{}();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
  if (!f) throw Error("failed writing " + path.string());
}

// ---- model sidecar: <weights>.json with arch and input size ----

struct ModelMeta {
  std::string arch;
  std::size_t input_h = 0, input_w = 0;
};

inline fs::path meta_path(const fs::path& weights) { return fs::path(weights.string() + ".json"); }

inline void write_meta(const fs::path& weights, const ModelMeta& m) {
  nlohmann::ordered_json j;
  j["arch"] = m.arch;
  j["input_h"] = m.input_h;
  j["input_w"] = m.input_w;
  write_text(meta_path(weights), j.dump(2) + "\n");
}

inline std::optional<ModelMeta> read_meta(const fs::path& weights) {
  std::ifstream f(meta_path(weights));
  if (!f) return std::nullopt;
  try {
    const auto j = nlohmann::json::parse(f);
    return ModelMeta{j.at("arch").get<std::string>(), j.at("input_h").get<std::size_t>(), j.at("input_w").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(meta_path(weights).string(), 0, std::string("bad model metadata: ") + e.what());
  }
}

// ---- radiograph-level view of a manifest ----

struct RadiographEntry {
  std::string image_path;
  fs::path file;
  std::array<int, 2> grades{-1, -1};
  std::optional<Split> split;
};

inline std::vector<RadiographEntry> radiographs(const Manifest& m) {
  std::vector<RadiographEntry> out;
  std::map<std::string, std::size_t> at;
  for (const auto& r : m.rows) {
    auto [it, fresh] = at.emplace(r.image_path, out.size());
    if (fresh) out.push_back({r.image_path, m.resolve(r), {-1, -1}, r.split});
    auto& e = out[it->second];
    e.grades[r.side == Side::Left ? 0 : 1] = r.kl_grade;
    if (e.split != r.split) throw ArgumentError("both knees of " + r.image_path + " must share a split");
  }
  return out;
}

inline fs::path annotation_for(const fs::path& image) {
  fs::path p = image;
  return p.replace_extension(".txt");
}

inline bool in_split(const std::optional<Split>& s, const std::string& which) {
  if (which == "all") return true;
  if (!s) return false;
  return which == to_string(*s);
}

inline void check_split_name(const std::string& s) {
  if (s != "all" && s != "train" && s != "val" && s != "test")
    throw ArgumentError("--split must be train, val, test or all, got '" + s + "'");
}

inline std::string stem_key(const std::string& path) {
  fs::path p(path);
  std::string stem = p.stem().string();
  if (stem.size() > 2 && stem[stem.size() - 2] == '_' && (stem.back() == 'L' || stem.back() == 'R'))
    stem.resize(stem.size() - 2);
  return (p.parent_path() / stem).string();
}

template <typename T>
ModelGraph<T> build_arch(const ModelMeta& meta) {
  if (meta.arch == "fcn") {
    if (meta.input_h != meta.input_w) throw ArgumentError("fcn input must be square");
    FcnConfig c;
    c.input_size = meta.input_h;
    return build_fcn_localizer<T>(c);
  }
  if (meta.arch == "classifier") {
    ClassifierConfig c;
    c.input_h = meta.input_h;
    c.input_w = meta.input_w;
    return build_classifier<T>(c);
  }
  if (meta.arch == "joint") {
    JointConfig c;
    c.input_h = meta.input_h;
    c.input_w = meta.input_w;
    return build_joint_net<T>(c);
  }
  throw ArgumentError("unknown architecture '" + meta.arch + "'");
}

// Meta from the sidecar, overridden by explicit flags.
inline ModelMeta resolve_meta(const RunConfig& c, const fs::path& weights, const std::string& default_arch) {
  ModelMeta m = read_meta(weights).value_or(ModelMeta{default_arch, 0, 0});
  if (c.arch) m.arch = *c.arch;
  if (m.arch == "fcn") {
    if (c.size) m.input_h = m.input_w = *c.size;
    if (m.input_h == 0) m.input_h = m.input_w = 256;
  } else {
    if (c.crop_h) m.input_h = *c.crop_h;
    if (c.crop_w) m.input_w = *c.crop_w;
    if (m.input_h == 0) m.input_h = 200;
    if (m.input_w == 0) m.input_w = 300;
  }
  return m;
}

inline ModelGraph<float> load_model(const RunConfig& c, const std::string& default_arch) {
  const fs::path w = require(c.weights, "--weights");
  const ModelMeta meta = resolve_meta(c, w, default_arch);
  auto model = build_arch<float>(meta);
  load_weights(model, w);
  return model;
}

inline Image load_input(const fs::path& file, std::size_t h, std::size_t w) {
  Image img = read_pgm(file);
  if (img.height != h || img.width != w) img = resize_bilinear(img, h, w);
  return img;
}

// ---- subcommands ----

inline int synth_gen(const Invocation& inv, Io io) {
  const auto& c = inv.cfg;
  const fs::path out = require(c.out, "--out");
  SynthConfig sc;
  sc.n = c.n.value_or(50);
  sc.size = c.image_size.value_or(256);
  sc.seed = seed_of(c);
  const auto data = synth_generate(sc);
  fs::create_directories(out / "images");
  Manifest m;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::ostringstream name;
    name << "images/rad_" << std::setw(4) << std::setfill('0') << i;
    write_pgm(out / (name.str() + ".pgm"), data[i].radiograph.image);
    save_annotation(out / (name.str() + ".txt"), data[i].radiograph.boxes);
    for (int k = 0; k < 2; ++k)
      m.rows.push_back({name.str() + ".pgm", k == 0 ? Side::Left : Side::Right, data[i].radiograph.grades[k], std::nullopt});
  }
  if (data.size() >= 2) {
    assign_splits(m, 0.7, sc.seed, Split::Train, Split::Test);
    const auto train_rads = m.with_split(Split::Train).size() / 2;
    if (train_rads >= 2) assign_splits(m, 0.85, sc.seed + 1, Split::Train, Split::Val, Split::Train);
  }
  save_manifest(out / "manifest.csv", m);
  const auto h = histogram(m);
  io.out << "generated " << data.size() << " radiographs (" << m.rows.size() << " knees) in " << out.string() << "\n";
  io.out << "grades:";
  for (int g = 0; g < 5; ++g) io.out << ' ' << g << '=' << h[static_cast<std::size_t>(g)];
  io.out << "\nsplits: train=" << m.with_split(Split::Train).size() << " val=" << m.with_split(Split::Val).size()
         << " test=" << m.with_split(Split::Test).size() << "\n";
  return kExitOk;
}

inline int train_fcn_cmd(const Invocation& inv, Io io) {
  const auto& c = inv.cfg;
  const Manifest m = load_manifest(require(c.manifest, "--manifest"));
  const fs::path out = require(c.out, "--out");
  const std::size_t size = c.size.value_or(256);
  std::vector<MaskSample> data;
  for (const auto& r : radiographs(m)) {
    if (r.split == Split::Test) continue;
    const Image img = read_pgm(r.file);
    const auto rects = load_annotation(annotation_for(r.file));
    data.push_back({resize_bilinear(img, size, size), rasterize_mask(rects, size)});
  }
  Rng rng(seed_of(c));
  FcnConfig fc;
  fc.input_size = size;
  auto model = build_fcn_localizer<float>(fc);
  init_weights(model, rng);
  FcnTrainConfig tc;
  tc.epochs = c.epochs.value_or(20);
  tc.batch_size = c.batch_size.value_or(8);
  tc.lr = c.lr.value_or(0.001);
  const auto res = train_fcn(model, std::span<const MaskSample>(data), tc, rng);
  save_weights(model, out);
  write_meta(out, {"fcn", size, size});
  std::ostringstream hist;
  hist << "epoch,train_loss,val_loss\n" << std::setprecision(9);
  for (const auto& h : res.history) hist << h.epoch << ',' << h.train_loss << ',' << h.val_loss << '\n';
  write_text(out.string() + ".history.csv", hist.str());
  io.out << "trained fcn on " << data.size() << " radiographs; best epoch " << res.best_epoch << " val_loss "
         << fixed6(res.best_val_loss) << "\n";
  return kExitOk;
}

inline int eval_fcn(const Invocation& inv, Io io) {
  const auto& c = inv.cfg;
  const Manifest m = load_manifest(require(c.manifest, "--manifest"));
  const fs::path out = require(c.out, "--out");
  const auto model = load_model(c, "fcn");
  const double threshold = c.threshold.value_or(0.5);
  std::vector<double> js;
  std::ostringstream per;
  per << "image_path,side,x,y,w,h,jaccard\n";
  std::size_t failures = 0;
  for (const auto& r : radiographs(m)) {
    if (!in_split(r.split, inv.split)) continue;
    const Image img = read_pgm(r.file);
    const auto rects = load_annotation(annotation_for(r.file));
    const long iw = static_cast<long>(img.width), ih = static_cast<long>(img.height);
    try {
      const auto boxes = detect_knees(model, img, threshold);
      for (int k = 0; k < 2; ++k) {
        const double j = jaccard(boxes[k], to_bbox(rects[k], iw, ih));
        js.push_back(j);
        const auto& b = boxes[k];
        per << r.image_path << ',' << (k ? 'R' : 'L') << ',' << b.x << ',' << b.y << ',' << b.w << ',' << b.h << ','
            << fixed6(j) << '\n';
      }
    } catch (const DetectionError& e) {
      ++failures;
      io.err << "warning: " << r.image_path << ": " << e.what() << "\n";
      for (int k = 0; k < 2; ++k) {
        js.push_back(0.0);
        per << r.image_path << ',' << (k ? 'R' : 'L') << ",,,,," << fixed6(0.0) << '\n';
      }
    }
  }
  if (js.empty()) throw ArgumentError("eval-fcn: no radiographs in split '" + inv.split + "'");
  const auto rep = detection_report(std::span<const double>(js));
  fs::create_directories(out);
  write_text(out / "detection_report.csv", rep.to_csv());
  write_text(out / "detection_report.json", rep.to_json());
  write_text(out / "detections.csv", per.str());
  io.out << rep.to_csv();
  if (failures) io.out << "detection failures: " << failures << "\n";
  return kExitOk;
}

inline int extract(const Invocation& inv, Io io) {
  const auto& c = inv.cfg;
  const Manifest m = load_manifest(require(c.manifest, "--manifest"));
  const fs::path out = require(c.out, "--out");
  const auto model = load_model(c, "fcn");
  const std::size_t ch = c.crop_h.value_or(200), cw = c.crop_w.value_or(300);
  const double threshold = c.threshold.value_or(0.5);
  fs::create_directories(out / "crops");
  Manifest crops;
  std::size_t done = 0, skipped = 0;
  for (const auto& r : radiographs(m)) {
    const Image img = read_pgm(r.file);
    std::array<BBox, 2> boxes;
    try {
      boxes = detect_knees(model, img, threshold);
    } catch (const DetectionError& e) {
      ++skipped;
      io.err << "warning: skipping " << r.image_path << ": " << e.what() << "\n";
      continue;
    }
    ++done;
    for (int k = 0; k < 2; ++k) {
      const std::string rel = "crops/" + fs::path(r.image_path).stem().string() + (k ? "_R" : "_L") + ".pgm";
      write_pgm(out / rel, crop_and_resize(img, boxes[k], ch, cw));
      if (r.grades[k] >= 0) crops.rows.push_back({rel, k ? Side::Right : Side::Left, r.grades[k], r.split});
    }
  }
  save_manifest(out / "manifest.csv", crops);
  io.out << "extracted " << 2 * done << " knees from " << done << " radiographs; skipped " << skipped << "\n";
  return kExitOk;
}

inline std::vector<KneeSample> load_samples(const Manifest& m, Split split, std::size_t h, std::size_t w) {
  std::vector<KneeSample> out;
  for (const auto& r : m.rows) {
    if (r.split != split) continue;
    KneeSample s;
    s.image = load_input(m.resolve(r), h, w);
    s.side = r.side;
    s.kl_grade = r.kl_grade;
    s.split = split;
    out.push_back(std::move(s));
  }
  return out;
}

inline int train_grader(const Invocation& inv, Io io, bool joint) {
  const auto& c = inv.cfg;
  Manifest m = load_manifest(require(c.manifest, "--manifest"));
  const fs::path out = require(c.out, "--out");
  const std::uint64_t seed = seed_of(c);
  for (auto& r : m.rows)
    if (!r.split) r.split = Split::Train;
  if (m.with_split(Split::Val).empty()) {
    // radiograph-level 85/15 of the training rows
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < m.rows.size(); ++i)
      if (m.rows[i].split == Split::Train) idx.push_back(i);
    auto [a, b] = split_dataset(idx, 0.85, seed, [&](std::size_t i) { return stem_key(m.rows[i].image_path); });
    for (auto i : b) m.rows[i].split = Split::Val;
  }
  std::size_t h = c.crop_h.value_or(0), w = c.crop_w.value_or(0);
  if (h == 0 || w == 0) {
    const auto train_rows = m.with_split(Split::Train);
    if (train_rows.empty()) throw ArgumentError("no training rows in " + *c.manifest);
    const Image probe = read_pgm(m.resolve(train_rows.front()));
    if (h == 0) h = probe.height;
    if (w == 0) w = probe.width;
  }
  auto train = load_samples(m, Split::Train, h, w);
  const auto val = load_samples(m, Split::Val, h, w);
  train = augment_flip(std::span<const KneeSample>(train));
  Rng rng(seed);
  const ModelMeta meta{joint ? "joint" : "classifier", h, w};
  auto model = build_arch<float>(meta);
  init_weights(model, rng);
  QuantTrainConfig qc;
  qc.epochs = c.epochs.value_or(50);
  qc.batch_size = c.batch_size.value_or(32);
  qc.lr = c.lr.value_or(0.001);
  qc.loss_weight = c.loss_weight.value_or(0.5);
  const auto res = joint ? train_joint(model, std::span<const KneeSample>(train), std::span<const KneeSample>(val), qc, rng)
                         : train_classifier(model, std::span<const KneeSample>(train), std::span<const KneeSample>(val), qc, rng);
  save_weights(model, out);
  write_meta(out, meta);
  write_text(out.string() + ".history.csv", history_csv(res.history));
  const auto& best = res.history.at(res.best_epoch - 1);
  io.out << "trained " << meta.arch << " on " << train.size() << " samples (with flips), " << val.size()
         << " validation; best epoch " << res.best_epoch << " val_acc " << fixed6(best.val_acc) << " val_total "
         << fixed6(best.val_total) << "\n";
  return kExitOk;
}

struct PredictedRow {
  ManifestRow row;
  GradePrediction pred;
};

inline std::vector<PredictedRow> predict_rows(const Invocation& inv) {
  const auto& c = inv.cfg;
  const Manifest m = load_manifest(require(c.manifest, "--manifest"));
  const auto model = load_model(c, "joint");
  const std::size_t h = model.input_shape.at(1), w = model.input_shape.at(2);
  std::vector<ManifestRow> rows;
  std::vector<Image> images;
  for (const auto& r : m.rows) {
    if (!in_split(r.split, inv.split)) continue;
    rows.push_back(r);
    images.push_back(load_input(m.resolve(r), h, w));
  }
  const auto preds = predict_grades(model, std::span<const Image>(images));
  std::vector<PredictedRow> out;
  for (std::size_t i = 0; i < rows.size(); ++i) out.push_back({rows[i], preds[i]});
  return out;
}

inline std::string predictions_csv(const std::vector<PredictedRow>& rows) {
  std::ostringstream os;
  os << "image_path,side,kl_grade,predicted_class,continuous_grade,rounded_grade,p0,p1,p2,p3,p4\n";
  for (const auto& [r, p] : rows) {
    os << r.image_path << ',' << to_char(r.side) << ',' << r.kl_grade << ',' << p.predicted_class << ','
       << fixed6(p.continuous_grade) << ',' << p.rounded_grade;
    for (double q : p.class_probs) os << ',' << fixed6(q);
    os << '\n';
  }
  return os.str();
}

inline std::map<std::pair<std::string, char>, GradePrediction> load_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open predictions " + path.string());
  std::string line;
  std::size_t lineno = 0;
  std::map<std::pair<std::string, char>, GradePrediction> out;
  const std::string header = "image_path,side,kl_grade,predicted_class,continuous_grade,rounded_grade,p0,p1,p2,p3,p4";
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != header) throw ParseError(path.string(), 1, "expected header '" + header + "'");
      continue;
    }
    if (koa::detail::trim(line).empty()) continue;
    const auto f = koa::detail::split_csv(line);
    if (f.size() != 11 || f[1].size() != 1) throw ParseError(path.string(), lineno, "malformed prediction row");
    std::array<double, 5> probs{};
    double cont = 0;
    try {
      for (int k = 0; k < 5; ++k) probs[static_cast<std::size_t>(k)] = std::stod(f[static_cast<std::size_t>(6 + k)]);
      cont = std::stod(f[4]);
    } catch (const std::exception&) {
      throw ParseError(path.string(), lineno, "non-numeric probability or grade");
    }
    if (!out.emplace(std::pair{f[0], f[1][0]}, make_prediction(probs, cont)).second)
      throw ParseError(path.string(), lineno, "duplicate prediction for " + f[0] + " " + f[1]);
  }
  return out;
}

inline int predict(const Invocation& inv, Io io) {
  const fs::path out = require(inv.cfg.out, "--out");
  const auto rows = predict_rows(inv);
  write_text(out, predictions_csv(rows));
  io.out << "wrote " << rows.size() << " predictions to " << out.string() << "\n";
  return kExitOk;
}

inline int evaluate(const Invocation& inv, Io io) {
  const auto& c = inv.cfg;
  const fs::path out = require(c.out, "--out");
  std::vector<int> truth;
  std::vector<GradePrediction> preds;
  if (c.predictions) {
    if (c.weights) throw ArgumentError("evaluate: give --weights or --predictions, not both");
    const Manifest m = load_manifest(require(c.manifest, "--manifest"));
    const auto table = load_predictions(*c.predictions);
    for (const auto& r : m.rows) {
      if (!in_split(r.split, inv.split)) continue;
      auto it = table.find({r.image_path, to_char(r.side)});
      if (it == table.end()) throw ArgumentError("no prediction for " + r.image_path + " " + to_char(r.side));
      truth.push_back(r.kl_grade);
      preds.push_back(it->second);
    }
  } else {
    for (const auto& [r, p] : predict_rows(inv)) {
      truth.push_back(r.kl_grade);
      preds.push_back(p);
    }
  }
  if (truth.empty()) throw ArgumentError("evaluate: no samples in split '" + inv.split + "'");
  const auto report = build_report(truth, preds);
  fs::create_directories(out);
  write_text(out / "metrics.json", render_json(report));
  write_text(out / "metrics.txt", render_table(report));
  io.out << render_table(report);
  return kExitOk;
}

inline int gradcheck(const Invocation& inv, Io io) {
  const auto results = run_gradient_suite(inv.cfg.seed.value_or(7), inv.cases);
  bool ok = true;
  io.out << std::left << std::setw(24) << "op" << std::right << std::setw(7) << "cases" << std::setw(16)
         << "max_rel_error" << "  status\n";
  for (const auto& r : results) {
    ok = ok && r.passed();
    std::ostringstream e;
    e << std::scientific << std::setprecision(3) << r.max_rel_error;
    io.out << std::left << std::setw(24) << r.op << std::right << std::setw(7) << r.cases << std::setw(16) << e.str()
           << "  " << (r.passed() ? "ok" : "FAIL") << '\n';
  }
  return ok ? kExitOk : kExitRuntime;
}

// Flag storage: values land in `flags` only when given on the command line.
class FlagBinder {
 public:
  template <typename U>
  void add(CLI::App* app, const std::string& name, std::optional<U>& dst, const std::string& help) {
    auto holder = std::make_shared<U>();
    CLI::Option* opt = app->add_option(name, *holder, help);
    commits_.push_back([opt, holder, &dst] {
      if (opt->count()) dst = *holder;
    });
  }

  void add_flag(CLI::App* app, const std::string& name, std::optional<bool>& dst, const std::string& help) {
    CLI::Option* opt = app->add_flag(name, help);
    commits_.push_back([opt, &dst] {
      if (opt->count()) dst = true;
    });
  }

  void commit() const {
    for (const auto& f : commits_) f();
  }

 private:
  std::vector<std::function<void()>> commits_;
};

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using detail::FlagBinder;
  CLI::App app{"Knee radiograph localization and KL-grade quantification pipeline", "koa"};
  app.require_subcommand(1, 1);
  RunConfig flags;
  std::string config_path;
  std::string split = "test";
  std::size_t cases = 20;
  FlagBinder bind;

  struct Sub {
    const char* name;
    const char* help;
    std::vector<std::string> opts;
    std::function<int(const Invocation&, Io)> fn;
    const char* default_split = "test";
  };
  const std::vector<Sub> subs = {
      {"synth-gen", "generate a synthetic radiograph dataset with manifest and annotations",
       {"n", "image-size", "out"}, detail::synth_gen},
      {"train-fcn", "train the knee localization FCN",
       {"manifest", "out", "size", "epochs", "batch-size", "lr"}, detail::train_fcn_cmd},
      {"eval-fcn", "detection report (Jaccard rates, mean, std) against annotations",
       {"manifest", "weights", "out", "size", "threshold", "split"}, detail::eval_fcn},
      {"extract", "detect and crop knee joints into a new manifest",
       {"manifest", "weights", "out", "size", "crop-h", "crop-w", "threshold"}, detail::extract},
      {"train-clf", "train the classification CNN",
       {"manifest", "out", "epochs", "batch-size", "lr", "crop-h", "crop-w"},
       [](const Invocation& i, Io io) { return detail::train_grader(i, io, false); }},
      {"train-joint", "train the joint classification + regression CNN",
       {"manifest", "out", "epochs", "batch-size", "lr", "loss-weight", "crop-h", "crop-w"},
       [](const Invocation& i, Io io) { return detail::train_grader(i, io, true); }},
      {"evaluate", "metrics report from a model or a predictions file",
       {"manifest", "weights", "predictions", "out", "arch", "crop-h", "crop-w", "split"}, detail::evaluate},
      {"predict", "per-image grade predictions as CSV",
       {"manifest", "weights", "out", "arch", "crop-h", "crop-w", "split"}, detail::predict, "all"},
      {"gradcheck", "finite-difference gradient checks of every operator", {"cases"}, detail::gradcheck},
  };

  std::map<CLI::App*, const Sub*> by_app;
  for (const auto& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("--config", config_path, "key=value config file; flags override it");
    bind.add(sub, "--seed", flags.seed, "random seed");
    bind.add_flag(sub, "--deterministic", flags.deterministic, "seed 0 unless --seed is given");
    for (const auto& o : s.opts) {
      if (o == "n") bind.add(sub, "--n", flags.n, "number of radiographs");
      else if (o == "image-size") bind.add(sub, "--image-size", flags.image_size, "radiograph size in pixels");
      else if (o == "out") bind.add(sub, "--out", flags.out, "output path");
      else if (o == "manifest") bind.add(sub, "--manifest", flags.manifest, "manifest CSV");
      else if (o == "weights") bind.add(sub, "--weights", flags.weights, "weight file");
      else if (o == "predictions") bind.add(sub, "--predictions", flags.predictions, "predictions CSV");
      else if (o == "size") bind.add(sub, "--size", flags.size, "FCN input size");
      else if (o == "epochs") bind.add(sub, "--epochs", flags.epochs, "training epochs");
      else if (o == "batch-size") bind.add(sub, "--batch-size", flags.batch_size, "mini-batch size");
      else if (o == "lr") bind.add(sub, "--lr", flags.lr, "initial learning rate");
      else if (o == "loss-weight") bind.add(sub, "--loss-weight", flags.loss_weight, "weight of the regression loss");
      else if (o == "threshold") bind.add(sub, "--threshold", flags.threshold, "mask binarization threshold");
      else if (o == "crop-h") bind.add(sub, "--crop-h", flags.crop_h, "knee crop height");
      else if (o == "crop-w") bind.add(sub, "--crop-w", flags.crop_w, "knee crop width");
      else if (o == "arch") bind.add(sub, "--arch", flags.arch, "classifier or joint (when no sidecar)");
      else if (o == "split") sub->add_option("--split", split, "train, val, test or all");
      else if (o == "cases") sub->add_option("--cases", cases, "random cases per operator");
    }
    by_app[sub] = &s;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const Sub* chosen = nullptr;
  for (auto* s : app.get_subcommands()) chosen = by_app.at(s);
  try {
    bind.commit();
    Invocation inv;
    if (!config_path.empty()) inv.cfg = load_run_config(config_path);
    inv.cfg.merge(flags);
    bool split_given = false;
    for (auto* s : app.get_subcommands())
      if (auto* o = s->get_option_no_throw("--split"); o && o->count()) split_given = true;
    inv.split = split_given ? split : chosen->default_split;
    detail::check_split_name(inv.split);
    inv.cases = cases;
    return chosen->fn(inv, Io{out, err});
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace koa::cli
