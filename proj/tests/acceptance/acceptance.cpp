// Acceptance runner: one PASS/FAIL line per criterion.
//   koa_acceptance            all criteria
//   koa_acceptance 5 7        selected criteria

#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fixtures.hpp"
#include "koa/gradcheck.hpp"
#include "koa/localization.hpp"
#include "koa/manifest.hpp"
#include "koa/metrics.hpp"
#include "koa/optim.hpp"
#include "koa/quantification.hpp"
#include "koa/synth.hpp"
#include "koa/weights.hpp"
#include "oracles.hpp"

using namespace koa;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// ---- pinned tolerances and budgets ----
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 120;
constexpr double kRatioTol = 1e-9;
constexpr double kOptimTol = 1e-9;
constexpr double kQuadraticTol = 1e-3;
constexpr std::size_t kOracleCases = 150;
constexpr double kClfParamsLo = 5.1e6, kClfParamsHi = 5.7e6;
constexpr double kJointParamsLo = 3.6e6, kJointParamsHi = 4.4e6;
constexpr double kLocMeanJ = 0.85;
constexpr double kLocSeconds = 15 * 60;
constexpr double kClfAccuracy = 0.60;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

// ---- 1: gradient suite ----

Outcome gradients() {
  const auto t0 = Clock::now();
  const auto results = run_gradient_suite(7, 20);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string worst_op, failed;
  for (const auto& r : results) {
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_op = r.op;
    }
    if (!r.passed(kGradTol) || r.cases < 20) failed += " " + r.op;
  }
  Outcome o;
  o.pass = failed.empty() && secs < kGradSeconds;
  o.detail = std::to_string(results.size()) + " ops x 20 cases, worst " + fmt(worst) + " (" + worst_op + "), " +
             fmt(secs, 3) + "s" + (failed.empty() ? "" : ", failed:" + failed);
  return o;
}

// ---- 2: oracle equivalence ----

std::vector<int> random_labels(Rng& rng, std::size_t n) {
  std::uniform_int_distribution<int> d(0, 4);
  std::vector<int> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

Outcome oracles() {
  Rng rng(2718);
  std::size_t mismatches = 0;
  std::uniform_int_distribution<long> pos(0, 20), len(1, 12);
  for (std::size_t i = 0; i < kOracleCases; ++i) {
    const BBox a{pos(rng), pos(rng), len(rng), len(rng), 32, 32};
    const BBox b{pos(rng), pos(rng), len(rng), len(rng), 32, 32};
    if (std::abs(jaccard(a, b) - oracle::jaccard_pixels(a, b)) >= kRatioTol) ++mismatches;
  }
  std::size_t maps_with_two = 0;
  for (std::size_t i = 0; i < kOracleCases; ++i) {
    const Image m = oracle::random_map(rng, 32, 32);
    const auto want = oracle::two_boxes(m, 0.5);
    try {
      const auto got = extract_bboxes(m);
      if (!want || got[0] != (*want)[0] || got[1] != (*want)[1]) ++mismatches;
      ++maps_with_two;
    } catch (const DetectionError& e) {
      if (want || e.components() != oracle::blobs(m, 0.5).size()) ++mismatches;
    }
  }
  for (std::size_t i = 0; i < kOracleCases; ++i) {
    const std::size_t n = 1 + rng() % 40;
    const auto t = random_labels(rng, n), p = random_labels(rng, n);
    const auto cm = confusion_matrix(t, p);
    const auto oc = oracle::confusion(t, p, 5);
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 5; ++c)
        if (static_cast<long>(cm.at(r, c)) != oc[r][c]) ++mismatches;
    const auto prf = precision_recall_f1(cm);
    const auto op = oracle::prf(t, p, 5);
    for (std::size_t k = 0; k < 5; ++k)
      if (std::abs(prf.per_class[k].precision - op[k].precision) >= kRatioTol ||
          std::abs(prf.per_class[k].recall - op[k].recall) >= kRatioTol ||
          std::abs(prf.per_class[k].f1 - op[k].f1) >= kRatioTol)
        ++mismatches;
  }
  std::uniform_int_distribution<int> level(0, 6);
  for (std::size_t i = 0; i < kOracleCases; ++i) {
    const std::size_t n = 2 + rng() % 25;
    const auto t = random_labels(rng, n);
    std::vector<std::vector<double>> probs(n, std::vector<double>(5));
    for (auto& row : probs)
      for (auto& v : row) v = level(rng) / 6.0;
    const auto auc = roc_auc_ovr(t, probs);
    for (std::size_t k = 0; k < 5; ++k) {
      std::vector<double> col;
      std::vector<bool> posv;
      for (std::size_t j = 0; j < n; ++j) {
        col.push_back(probs[j][k]);
        posv.push_back(t[j] == static_cast<int>(k));
      }
      const auto o = oracle::auc_pairs(col, posv);
      if (auc[k].has_value() != o.has_value() || (o && std::abs(*auc[k] - *o) >= kRatioTol)) ++mismatches;
    }
  }
  return {mismatches == 0, std::to_string(kOracleCases) + " instances x 5 functions (" +
                               std::to_string(maps_with_two) + " maps with two components), " +
                               std::to_string(mismatches) + " mismatches"};
}

// ---- 3: optimizer contracts ----

TensorPtr<double> scalar_param(double v) { return make_tensor<double>({1}, std::vector<double>{v}); }

Outcome optimizers() {
  std::vector<std::string> bad;
  {
    auto w = scalar_param(1.0);
    AdamState<double> s;
    s.init({w}, 0.001);
    w->ensure_grad()[0] = 0.1;
    adam_step<double>({w}, s);
    // m_hat = 0.1, v_hat = 0.01
    const double want = 1.0 - 0.001 * 0.1 / (std::sqrt(0.01) + 1e-8);
    if (std::abs((*w)[0] - want) >= kOptimTol || std::abs((*w)[0] - 0.9990) >= 1e-6) bad.push_back("adam first step");
  }
  {
    auto w = scalar_param(0.0);
    NesterovState<double> s;
    s.init({w}, 0.001, 0.9);
    w->ensure_grad()[0] = 1.0;
    sgd_nesterov_step<double>({w}, s);
    // v = -lr g; w += mu v - lr g
    if (std::abs((*w)[0] - (0.9 * -0.001 - 0.001)) >= kOptimTol) bad.push_back("nesterov first step");
  }
  Rng rng(31);
  std::normal_distribution<double> n(0.0, 2.0);
  std::size_t adam_steps = 0, sgd_steps = 0;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> init(6), centre(6);
    for (auto& x : init) x = n(rng);
    for (auto& x : centre) x = n(rng);
    auto dist = [&](const Tensor<double>& w) {
      double s = 0;
      for (std::size_t j = 0; j < 6; ++j) s = std::max(s, std::abs(w[j] - centre[j]));
      return s;
    };
    auto run = [&](auto& state, auto step) {
      auto w = make_tensor<double>({6}, init);
      state.init({w}, 0.05);
      for (std::size_t i = 1; i <= 500; ++i) {
        for (std::size_t j = 0; j < 6; ++j) w->ensure_grad()[j] = 2 * (w->data()[j] - centre[j]);
        step(w, state);
        if (dist(*w) < kQuadraticTol) return i;
      }
      return std::size_t{0};
    };
    AdamState<double> a;
    const auto ai = run(a, [](auto& w, auto& s) { adam_step<double>({w}, s); });
    NesterovState<double> g;
    const auto gi = run(g, [](auto& w, auto& s) { sgd_nesterov_step<double>({w}, s); });
    if (ai == 0) bad.push_back("adam quadratic");
    if (gi == 0) bad.push_back("nesterov quadratic");
    adam_steps = std::max(adam_steps, ai);
    sgd_steps = std::max(sgd_steps, gi);
  }
  {
    PlateauScheduler s;
    s.lr = 0.01;
    bool ok = !s.update(1.0);
    for (int e = 1; e <= 3; ++e) ok = ok && !s.update(1.0) && s.lr == 0.01;
    ok = ok && s.update(1.0) && std::abs(s.lr - 0.001) < 1e-18;
    std::uniform_real_distribution<double> u(0, 1);
    double prev = s.lr;
    for (int i = 0; i < 1000; ++i) {
      s.update(u(rng));
      ok = ok && s.lr <= prev;
      prev = s.lr;
    }
    if (!ok) bad.push_back("scheduler");
  }
  std::string d = "adam <= " + std::to_string(adam_steps) + " steps, nesterov <= " + std::to_string(sgd_steps) +
                  " steps to 1e-3";
  for (const auto& b : bad) d += "; failed " + b;
  return {bad.empty(), d};
}

// ---- 4: architecture budgets ----

Outcome budgets() {
  const auto clf = count_params(build_classifier<float>());
  const auto joint = count_params(build_joint_net<float>());
  bool shapes = true;
  for (std::size_t s : {128u, 256u}) {
    FcnConfig c;
    c.input_size = s;
    auto m = build_fcn_localizer<float>(c);
    Rng rng(1);
    init_weights(m, rng);
    auto out = forward(m, make_tensor<float>({1, 1, s, s}), Mode::Infer)[0];
    shapes = shapes && out->shape() == Shape{1, 1, s, s};
  }
  const bool ok = clf >= kClfParamsLo && clf <= kClfParamsHi && joint >= kJointParamsLo && joint <= kJointParamsHi && shapes;
  return {ok, "classifier " + std::to_string(clf) + ", joint " + std::to_string(joint) + ", fcn 128/256 shape " +
                  (shapes ? "ok" : "wrong")};
}

// ---- 5: desk-scale localization ----

Outcome localization() {
  SynthConfig sc;
  sc.n = 200;
  sc.size = 256;
  sc.seed = 11;
  const auto data = synth_generate(sc);
  std::vector<std::size_t> ids(data.size());
  std::iota(ids.begin(), ids.end(), 0);
  auto [train_ids, test_ids] = split_dataset(ids, 0.7, sc.seed, [](std::size_t i) { return i; });
  std::vector<MaskSample> train;
  for (auto i : train_ids)
    train.push_back({resize_bilinear(data[i].radiograph.image, 128, 128), rasterize_mask(data[i].radiograph.boxes, 128)});

  FcnConfig fc;
  fc.input_size = 128;
  auto model = build_fcn_localizer<float>(fc);
  Rng rng(5);
  init_weights(model, rng);
  FcnTrainConfig tc;
  tc.epochs = 20;
  const auto t0 = Clock::now();
  const auto res = train_fcn(model, std::span<const MaskSample>(train), tc, rng);
  std::vector<double> js;
  std::size_t failures = 0;
  for (auto i : test_ids) {
    const auto& r = data[i].radiograph;
    try {
      const auto b = detect_knees(model, r.image);
      for (std::size_t k = 0; k < 2; ++k) js.push_back(jaccard(b[k], to_bbox(r.boxes[k], 256, 256)));
    } catch (const DetectionError&) {
      ++failures;
      js.push_back(0);
      js.push_back(0);
    }
  }
  const double secs = seconds_since(t0);
  const auto rep = detection_report(std::span<const double>(js));
  const bool ok = rep.mean >= kLocMeanJ && rep.rate_050 == 100.0 && secs < kLocSeconds;
  return {ok, std::to_string(rep.knees) + " held-out knees, mean J " + fmt(rep.mean) + ", J>=0.5 " + fmt(rep.rate_050) +
                  "%, J>=0.75 " + fmt(rep.rate_075) + "%, " + std::to_string(failures) + " failed detections, " +
                  std::to_string(tc.epochs) + " epochs (best " + std::to_string(res.best_epoch) + "), " +
                  fmt(secs, 3) + "s"};
}

// ---- 6: desk-scale quantification ----

struct QuantRun {
  double clf_acc = 0, clf_argmax_mse = 0, joint_reg_mse = 0, joint_acc = 0;
};

QuantRun quantification_seed(std::uint64_t seed) {
  constexpr std::size_t H = 40, W = 60;
  SynthConfig sc;
  sc.n = 250;
  sc.seed = seed;
  const auto data = synth_generate(sc);
  std::vector<KneeSample> all;
  for (const auto& s : data)
    for (std::size_t k = 0; k < 2; ++k) {
      KneeSample ks;
      ks.image = crop_and_resize(s.radiograph.image, to_bbox(s.radiograph.boxes[k], 256, 256), H, W);
      ks.side = k ? Side::Right : Side::Left;
      ks.kl_grade = s.radiograph.grades[k];
      all.push_back(std::move(ks));
    }
  std::vector<std::size_t> ids(all.size());
  std::iota(ids.begin(), ids.end(), 0);
  auto [tr, va] = split_dataset(ids, 0.7, seed, [](std::size_t i) { return i / 2; });
  std::vector<KneeSample> train, val;
  for (auto i : tr) train.push_back(all[i]);
  for (auto i : va) {
    val.push_back(all[i]);
    val.back().split = Split::Val;
  }
  train = augment_flip(std::span<const KneeSample>(train));
  std::vector<Image> val_images;
  for (const auto& k : val) val_images.push_back(k.image);

  Rng rng(seed);
  ClassifierConfig cc;
  cc.input_h = H;
  cc.input_w = W;
  auto clf = build_classifier<float>(cc);
  init_weights(clf, rng);
  QuantTrainConfig qc;
  qc.epochs = 30;
  train_classifier(clf, std::span<const KneeSample>(train), std::span<const KneeSample>(val), qc, rng);

  JointConfig jc;
  jc.input_h = H;
  jc.input_w = W;
  auto joint = build_joint_net<float>(jc);
  init_weights(joint, rng);
  QuantTrainConfig jq;
  jq.epochs = 50;
  jq.batch_size = 16;
  train_joint(joint, std::span<const KneeSample>(train), std::span<const KneeSample>(val), jq, rng);

  const auto pc = predict_grades(clf, std::span<const Image>(val_images));
  const auto pj = predict_grades(joint, std::span<const Image>(val_images));
  QuantRun r;
  const double n = static_cast<double>(val.size());
  for (std::size_t i = 0; i < val.size(); ++i) {
    const int g = val[i].kl_grade;
    r.clf_acc += (pc[i].predicted_class == g) / n;
    r.clf_argmax_mse += (pc[i].predicted_class - g) * (pc[i].predicted_class - g) / n;
    r.joint_reg_mse += (pj[i].continuous_grade - g) * (pj[i].continuous_grade - g) / n;
    r.joint_acc += (pj[i].predicted_class == g) / n;
  }
  return r;
}

Outcome quantification() {
  bool ok = true;
  std::string d;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto t0 = Clock::now();
    const auto r = quantification_seed(seed);
    const bool pass = r.clf_acc >= kClfAccuracy && r.joint_reg_mse < r.clf_argmax_mse;
    ok = ok && pass;
    d += (d.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ": clf acc " + fmt(r.clf_acc) +
         ", clf argmax mse " + fmt(r.clf_argmax_mse) + ", joint reg mse " + fmt(r.joint_reg_mse) + " (" +
         fmt(seconds_since(t0), 3) + "s)";
  }
  return {ok, d};
}

// ---- CLI helpers ----

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(KOA_CLI_PATH) + " " + args + " >> " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---- 7: pipeline composition ----

Outcome pipeline() {
  const auto dir = fixture::scratch_dir("accept_pipeline");
  const auto log = dir / "log.txt";
  const std::string d = dir.string();
  const std::vector<std::pair<std::string, std::string>> steps = {
      {"synth-gen", "synth-gen --n 200 --image-size 128 --seed 3 --out " + d + "/data"},
      {"train-fcn", "train-fcn --manifest " + d + "/data/manifest.csv --size 128 --epochs 20 --seed 3 --out " + d +
                        "/fcn.bin"},
      {"extract", "extract --manifest " + d + "/data/manifest.csv --weights " + d + "/fcn.bin --crop-h 40 --crop-w 60 --out " +
                      d + "/crops"},
      {"train-joint", "train-joint --manifest " + d + "/crops/manifest.csv --epochs 10 --batch-size 16 --seed 3 --out " + d +
                          "/joint.bin"},
      {"evaluate", "evaluate --manifest " + d + "/crops/manifest.csv --weights " + d + "/joint.bin --out " + d + "/report"},
  };
  for (const auto& [name, args] : steps) {
    const int code = cli(args, log);
    if (code != 0) return {false, name + " exited " + std::to_string(code) + " (log " + log.string() + ")"};
  }
  const auto source = load_manifest(dir / "data/manifest.csv");
  std::array<std::size_t, 5> want{};
  for (const auto& r : source.rows)
    if (r.split == Split::Test) ++want[static_cast<std::size_t>(r.kl_grade)];
  const auto j = nlohmann::json::parse(read_file(dir / "report/metrics.json"));
  std::array<std::size_t, 5> got{};
  for (std::size_t t = 0; t < 5; ++t)
    for (const auto& v : j["confusion"][t]) got[t] += v.get<std::size_t>();
  std::string counts;
  for (std::size_t g = 0; g < 5; ++g)
    counts += (g ? "," : "") + std::to_string(got[g]) + "/" + std::to_string(want[g]);
  const bool ok = got == want;
  if (ok) fs::remove_all(dir);
  return {ok, "all 5 steps exit 0; row sums vs test counts per grade " + counts + ", accuracy " +
                  fmt(j["accuracy"].get<double>())};
}

// ---- 8: serialization ----

Outcome serialization() {
  Rng rng(8088);
  std::size_t mismatches = 0;
  for (int i = 0; i < 100; ++i) {
    auto src = fixture::random_model<float>(rng);
    const auto bytes = serialize_weights(src);
    auto dst = src.clone();
    for (const auto& t : dst.state()) std::fill(t.tensor->data().begin(), t.tensor->data().end(), 0.f);
    deserialize_weights(dst, bytes);
    const auto a = src.state(), b = dst.state();
    for (std::size_t k = 0; k < a.size(); ++k)
      if (std::memcmp(a[k].tensor->data().data(), b[k].tensor->data().data(), a[k].tensor->data().size_bytes()) != 0)
        ++mismatches;
  }
  using K = WeightFileError::Kind;
  ClassifierConfig cc;
  cc.input_h = cc.input_w = 32;
  cc.fc_units = 8;
  auto m = build_classifier<float>(cc);
  init_weights(m, rng);
  const auto good = serialize_weights(m);
  auto target = m.clone();
  init_weights(target, rng);
  const auto before = target.snapshot();
  auto kind_of = [&](const std::vector<unsigned char>& bytes) -> std::optional<K> {
    try {
      deserialize_weights(target, bytes);
    } catch (const WeightFileError& e) {
      return e.kind();
    }
    return std::nullopt;
  };
  std::vector<std::pair<std::vector<unsigned char>, K>> cases;
  auto flip = [&](std::size_t at, unsigned char v) {
    auto b = good;
    b[at] = v;
    return b;
  };
  cases.push_back({flip(0, 'X'), K::BadMagic});
  cases.push_back({flip(4, 9), K::BadVersion});
  cases.push_back({flip(16 + m.state().front().name.size(), 7), K::DtypeMismatch});
  for (std::size_t cut : {std::size_t{3}, std::size_t{12}, good.size() / 3, good.size() - 1})
    cases.push_back({std::vector<unsigned char>(good.begin(), good.begin() + static_cast<long>(cut)), K::Truncated});
  ClassifierConfig wider = cc;
  wider.fc_units = 9;
  cases.push_back({serialize_weights(build_classifier<float>(wider)), K::ShapeMismatch});
  cases.push_back({serialize_weights(build_classifier<double>(cc)), K::DtypeMismatch});
  std::size_t wrong_kind = 0;
  for (const auto& [bytes, kind] : cases)
    if (kind_of(bytes) != kind) ++wrong_kind;
  const bool untouched = target.snapshot() == before;
  return {mismatches == 0 && wrong_kind == 0 && untouched,
          "100 random models, " + std::to_string(mismatches) + " tensor mismatches; " + std::to_string(cases.size()) +
              " corruptions, " + std::to_string(wrong_kind) + " wrong error kinds, target " +
              (untouched ? "unchanged" : "MUTATED")};
}

// ---- 9: determinism ----

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() != "log.txt")
      out[fs::relative(e.path(), root).string()] = read_file(e.path());
  return out;
}

Outcome determinism() {
  const auto dir = fixture::scratch_dir("accept_determinism");
  const std::string d = dir.string();
  const std::vector<std::string> commands = {
      "synth-gen --n 12 --image-size 64 --out " + d + "/data",
      "train-fcn --manifest " + d + "/data/manifest.csv --size 64 --epochs 2 --batch-size 4 --out " + d + "/fcn.bin",
      "eval-fcn --manifest " + d + "/data/manifest.csv --weights " + d + "/fcn.bin --split all --out " + d + "/det",
      "train-joint --manifest " + d + "/data/manifest.csv --crop-h 40 --crop-w 60 --epochs 2 --batch-size 8 --out " + d +
          "/joint.bin",
      "predict --manifest " + d + "/data/manifest.csv --weights " + d + "/joint.bin --out " + d + "/pred.csv",
      "evaluate --manifest " + d + "/data/manifest.csv --weights " + d + "/joint.bin --split all --out " + d + "/report",
      "gradcheck --cases 3",
  };
  std::vector<std::map<std::string, std::string>> runs;
  for (int run = 0; run < 2; ++run) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    for (std::size_t c = 0; c < commands.size(); ++c) {
      const auto log = dir / ("stdout_" + std::to_string(c) + ".txt");
      const int code = cli(commands[c] + " --deterministic", log);
      if (code != 0) return {false, "run " + std::to_string(run + 1) + ": '" + commands[c] + "' exited " + std::to_string(code)};
    }
    runs.push_back(tree_bytes(dir));
  }
  std::size_t differing = 0;
  for (const auto& [name, bytes] : runs[0]) {
    auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != bytes) ++differing;
  }
  differing += runs[0].size() != runs[1].size();
  const bool ok = differing == 0 && !runs[0].empty();
  if (ok) fs::remove_all(dir);
  return {ok, std::to_string(commands.size()) + " commands, " + std::to_string(runs[0].size()) +
                  " output files (stdout included), " + std::to_string(differing) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradients},
      {"oracle equivalence", oracles},
      {"optimizer contracts", optimizers},
      {"architecture budgets", budgets},
      {"end-to-end localization", localization},
      {"end-to-end quantification", quantification},
      {"pipeline composition", pipeline},
      {"serialization", serialization},
      {"determinism", determinism},
  };
  std::set<std::size_t> chosen;
  for (int i = 1; i < argc; ++i) {
    const long k = std::strtol(argv[i], nullptr, 10);
    if (k < 1 || k > static_cast<long>(criteria.size())) {
      std::cerr << "usage: " << argv[0] << " [criterion 1-" << criteria.size() << "]...\n";
      return 2;
    }
    chosen.insert(static_cast<std::size_t>(k));
  }
  if (chosen.empty())
    for (std::size_t k = 1; k <= criteria.size(); ++k) chosen.insert(k);

  bool all = true;
  for (auto k : chosen) {
    const auto& [name, fn] = criteria[k - 1];
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << k << " " << name << ": " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
