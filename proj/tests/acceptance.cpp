// One PASS/FAIL line per criterion; exits non-zero when any fails.
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>

#include "insdet/insdet.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/tiny_world.hpp"

using namespace insdet;

namespace {

const std::string kCli = INSDET_CLI;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double time_limit_s;
  std::function<Outcome()> body;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

// The configuration the world-level criteria train with: a larger step and
// more epochs than the published schedule, and no weight decay (see README).
TrainConfig desk_training(std::uint64_t seed) {
  TrainConfig t;
  t.lr = 1e-2;
  t.epochs = 50;
  t.weight_decay = 0;
  t.seed = seed;
  return t;
}
const char* kDeskFlags = "--lr 1e-2 --epochs 50 --weight-decay 0";

Outcome gradients() {
  using gradcheck::Kind;
  std::mt19937_64 rng(20240601);
  std::ostringstream detail;
  bool pass = true;
  const std::pair<Kind, const char*> kinds[] = {{Kind::Triplet, "triplet"},
                                                {Kind::ContrastivePositive, "contrastive+"},
                                                {Kind::ContrastiveNegative, "contrastive-"},
                                                {Kind::CrossEntropy, "ce"}};
  for (const auto& [kind, label] : kinds) {
    int checked = 0, skipped = 0;
    double worst = 0;
    while (checked < 200 && skipped < 10000) {
      const auto err = gradcheck::check_one(kind, rng);
      if (!err) {
        ++skipped;
        continue;
      }
      ++checked;
      worst = std::max(worst, *err);
    }
    pass = pass && checked == 200 && worst < 1e-4;
    detail << label << " n=" << checked << " skipped=" << skipped << " max_rel=" << std::scientific << worst
           << std::defaultfloat << "; ";
  }
  return {pass, detail.str()};
}

SimilarityMatrix random_similarity(std::size_t n, std::size_t m, std::mt19937_64& rng, bool coarse) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<int> level(-3, 3);
  SimilarityMatrix s(n, m);
  for (double& v : s.data()) v = coarse ? level(rng) / 3.0 : u(rng);
  return s;
}

Outcome stable_matching() {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> big(1, 50), small(1, 6);
  std::size_t blocking = 0, mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto s = random_similarity(big(rng), big(rng), rng, t % 4 == 0);
    blocking += oracle::blocking_pairs(s, stable_match(s)).size();
  }
  for (int t = 0; t < 1000; ++t) {
    const auto s = random_similarity(small(rng), small(rng), rng, t % 3 == 0);
    if (stable_match(s) != oracle::brute_force_proposer_optimal(s)) ++mismatches;
  }
  return {blocking == 0 && mismatches == 0, "blocking_pairs=" + std::to_string(blocking) + " over 1000 (<=50x50); " +
                                                "brute_force_mismatches=" + std::to_string(mismatches) +
                                                " over 1000 (<=6x6)"};
}

Outcome evaluator_equivalence() {
  std::mt19937_64 rng(29);
  double worst = 0;
  int compared = 0, disagreements = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto w = tiny::random_tiny_world(rng);
    const auto fast = evaluate(w.dets, w.manifest);
    const auto slow = oracle::brute_force_evaluate(w.odets, w.ogts);
    if (fast.ap.has_value() != slow.ap.has_value() || fast.ap50.has_value() != slow.ap50.has_value()) {
      ++disagreements;
      continue;
    }
    if (!slow.ap) continue;
    ++compared;
    worst = std::max({worst, std::abs(*fast.ap - *slow.ap), std::abs(*fast.ap50 - *slow.ap50)});
  }
  return {disagreements == 0 && worst <= 1e-9,
          "worlds=1000 compared=" + std::to_string(compared) + " definedness_mismatch=" + std::to_string(disagreements) +
              " max_abs_diff=" + fmt(worst, 12)};
}

double oracle_ap(const DatasetManifest& m, const std::filesystem::path& truth) {
  InferenceOptions opts;
  opts.reference_adapter = identity_adapter(m.dim);
  return evaluate(run_inference(m, oracle_adapter(truth), {}, opts), m).ap_avg();
}

Outcome training_gain() {
  fixtures::TempDir dir;
  SynthConfig c;
  c.seed = 7;
  const auto paths = generate(c, dir / "world");
  const auto m = load_manifest(paths.manifest);
  const auto trained = train(m, distractor_pool(m), desk_training(c.seed), {}).adapter;
  const double ap_trained = evaluate(run_inference(m, trained, {}), m).ap_avg();
  const double ap_identity = evaluate(run_inference(m, identity_adapter(c.dim), {}), m).ap_avg();

  SynthConfig clean = c;
  clean.proposal_noise = 0;
  clean.clutter_fraction = 0;
  const auto clean_paths = generate(clean, dir / "clean");
  const double ap_oracle = oracle_ap(load_manifest(clean_paths.manifest), clean_paths.truth);
  return {ap_trained >= ap_identity + 10 && ap_oracle >= 99,
          "trained=" + fmt(ap_trained) + " identity=" + fmt(ap_identity) + " gain=" + fmt(ap_trained - ap_identity) +
              " (need >=10); oracle(clean)=" + fmt(ap_oracle) + " (need >=99)"};
}

fixtures::RunResult cli(const std::string& args, const fixtures::TempDir& dir) {
  return fixtures::run("cd '" + dir.path().string() + "' && '" + kCli + "' " + args, dir.path());
}

std::map<std::pair<std::size_t, std::size_t>, double> read_sweep(const std::filesystem::path& path) {
  std::map<std::pair<std::size_t, std::size_t>, double> out;
  std::istringstream in(fixtures::slurp(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::size_t a = 0, b = 0;
    double ap = 0, delta = 0;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf", &a, &b, &ap, &delta) == 4) out[{a, b}] = ap;
  }
  return out;
}

Outcome ablation() {
  fixtures::TempDir dir;
  const std::string flags = std::string(kDeskFlags) + " --train-grid 0 --test-grid 0,6";
  if (cli("--seed 7 gen-synth --out w", dir).exit_code != 0 ||
      cli("--seed 7 sweep-aug --manifest w " + flags + " --out plain.csv", dir).exit_code != 0 ||
      cli("--seed 7 sweep-aug --manifest w " + flags + " --distractors --out ds.csv", dir).exit_code != 0) {
    return {false, "CLI invocation failed"};
  }
  auto plain = read_sweep(dir / "plain.csv");
  auto ds = read_sweep(dir / "ds.csv");
  if (plain.size() != 2 || ds.size() != 2) return {false, "unexpected sweep table shape"};
  const double base = plain[{0, 0}], with_ds = ds[{0, 0}], with_da = plain[{0, 6}];
  const double both = ds[{0, 6}];
  return {with_ds >= base - 0.5 && with_da >= base - 0.5,
          "seed=7 train=" + fmt(base) + " train+DS=" + fmt(with_ds) + " train+DA@Test(6)=" + fmt(with_da) +
              " train+DS+DA@Test=" + fmt(both) + " (each enabled >= disabled - 0.5)"};
}

Outcome threshold() {
  SimilarityMatrix s(2, 2, std::vector<double>{0.40, 0.0, 0.0, 0.40 + 1e-9});
  const std::vector<Proposal> props{{1, {0, 0, 10, 10}, 0, {}}, {1, {20, 20, 10, 10}, 1, {}}};
  const std::vector<ReferenceImage> refs{{{0}, 0, Origin::Real, 0}, {{1}, 1, Origin::Real, 0}};
  const auto dets = emit_detections(stable_match(s), s, props, refs, 0.4);
  const bool exact_rejected = std::none_of(dets.begin(), dets.end(), [](const Detection& d) { return d.proposal == 0; });
  const bool above_accepted = std::any_of(dets.begin(), dets.end(), [](const Detection& d) { return d.proposal == 1; });
  return {exact_rejected && above_accepted && dets.size() == 1,
          std::string("0.40 ") + (exact_rejected ? "rejected" : "ACCEPTED") + ", 0.40+1e-9 " +
              (above_accepted ? "accepted" : "REJECTED")};
}

Outcome determinism() {
  const char* files[] = {"world/manifest.json", "world/references.idow", "world/proposals.idow",
                         "world/distractors.idow", "world/truth.idot", "adapter.idoa", "trace.csv",
                         "detections.json", "metrics.json"};
  auto chain = [&](const std::string& threads, fixtures::TempDir& dir) {
    const std::string g = "--seed 11 --threads " + threads + " ";
    return cli(g + "gen-synth --out world", dir).exit_code == 0 &&
           cli(g + "train --manifest world --out adapter.idoa --loss-trace trace.csv --distractors --aug-train 4 " +
                   kDeskFlags,
               dir)
                   .exit_code == 0 &&
           cli(g + "match --manifest world --adapter adapter.idoa --aug-test 4 --out detections.json", dir).exit_code ==
               0 &&
           cli(g + "eval --manifest world --detections detections.json --out metrics.json", dir).exit_code == 0;
  };
  fixtures::TempDir a, b, c;
  if (!chain("1", a) || !chain("1", b) || !chain("4", c)) return {false, "CLI chain failed"};
  std::size_t differing = 0;
  std::string first;
  for (const char* f : files) {
    const auto ref = fixtures::slurp(a / f);
    if (ref.empty() || ref != fixtures::slurp(b / f) || ref != fixtures::slurp(c / f)) {
      ++differing;
      if (first.empty()) first = f;
    }
  }
  return {differing == 0, std::to_string(std::size(files)) + " files compared across 2 runs at --threads 1 and 1 at "
                              "--threads 4; differing=" + std::to_string(differing) + (first.empty() ? "" : " first=" + first)};
}

float random_float(std::mt19937_64& rng) {
  // Mix ordinary values with the awkward ones: signed zero, subnormals, extremes.
  switch (rng() % 8) {
    case 0: return -0.0f;
    case 1: return std::numeric_limits<float>::denorm_min() * float(1 + rng() % 1000);
    case 2: return (rng() % 2 ? 1 : -1) * std::numeric_limits<float>::max();
    case 3: return std::bit_cast<float>(std::uint32_t(rng() % 0x7f800000u));  // any finite positive bit pattern
    default: return std::normal_distribution<float>(0, 10)(rng);
  }
}

bool expect_code(const std::function<void()>& f, ErrorCode code) {
  try {
    f();
  } catch (const Error& e) {
    return e.code() == code;
  }
  return false;
}

Outcome formats() {
  std::mt19937_64 rng(31);
  fixtures::TempDir dir;
  std::size_t failures = 0;
  for (int t = 0; t < 10000; ++t) {
    const std::size_t n = rng() % 9, d = 1 + rng() % 12;
    if (t % 2 == 0) {
      EmbeddingMatrix m(n, d);
      for (float& v : m.data()) v = random_float(rng);
      const auto path = dir / "m.idow";
      write_embeddings(m, path);
      const auto back = read_embeddings(path);
      if (back.rows() != n || back.cols() != d ||
          !std::equal(back.data().begin(), back.data().end(), m.data().begin(), m.data().end(),
                      [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); })) {
        ++failures;
      }
    } else {
      const std::size_t out = 1 + rng() % 12;
      Adapter a{Matrix<double>(out, d), std::vector<double>(out)};
      std::uniform_real_distribution<double> u(-1e6, 1e6);
      for (double& v : a.weight.data()) v = rng() % 5 == 0 ? -0.0 : u(rng);
      for (double& v : a.bias) v = rng() % 5 == 0 ? std::numeric_limits<double>::denorm_min() : u(rng);
      const auto path = dir / "a.idoa";
      write_adapter(a, path);
      const auto back = read_adapter(path);
      if (encode_adapter(back) != encode_adapter(a)) ++failures;
    }
  }

  EmbeddingMatrix sample(2, 3, std::vector<float>{1, 2, 3, 4, 5, 6});
  const auto good_w = encode_embeddings(sample);
  const auto good_a = encode_adapter(identity_adapter(3));
  SynthConfig sc;
  sc.n_instances = 3;
  sc.scenes = 2;
  sc.distractor_count = 10;
  const auto good_t = encode_truth(build_world(sc).truth);

  struct Case {
    const char* label;
    binary::Bytes bytes;
    int file;  // 0 embeddings, 1 adapter, 2 truth
    ErrorCode expected;
  };
  std::vector<Case> cases;
  const std::pair<const binary::Bytes*, int> goods[] = {{&good_w, 0}, {&good_a, 1}, {&good_t, 2}};
  for (const auto& [good, file] : goods) {
    auto bad_magic = *good;
    bad_magic[1] ^= 0x20;
    cases.push_back({"bad magic", bad_magic, file, ErrorCode::BadMagic});
    auto truncated = *good;
    truncated.pop_back();
    cases.push_back({"truncated payload", truncated, file, ErrorCode::Truncated});
    cases.push_back({"truncated header", binary::Bytes(good->begin(), good->begin() + 7), file, ErrorCode::Truncated});
    auto nan = *good;
    if (file == 0) {
      const float q = std::numeric_limits<float>::quiet_NaN();
      std::memcpy(nan.data() + nan.size() - sizeof q, &q, sizeof q);
    } else {
      const double q = std::numeric_limits<double>::quiet_NaN();
      std::memcpy(nan.data() + nan.size() - sizeof q, &q, sizeof q);
    }
    cases.push_back({"NaN value", nan, file, ErrorCode::NonFinite});
  }
  std::size_t undetected = 0;
  for (const auto& c : cases) {
    const bool ok = expect_code(
        [&] {
          if (c.file == 0) decode_embeddings(c.bytes);
          if (c.file == 1) decode_adapter(c.bytes);
          if (c.file == 2) decode_truth(c.bytes);
        },
        c.expected);
    if (!ok) {
      ++undetected;
      std::cerr << "  undetected: " << c.label << " in file kind " << c.file << "\n";
    }
  }
  return {failures == 0 && undetected == 0, "round_trip_failures=" + std::to_string(failures) +
                                                " over 10000 (IDOW and IDOA); malformed cases detected " +
                                                std::to_string(cases.size() - undetected) + "/" +
                                                std::to_string(cases.size())};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"gradient correctness", 10, gradients},
      {"stable matching", 30, stable_matching},
      {"evaluator oracle equivalence", 30, evaluator_equivalence},
      {"end-to-end training gain", 120, training_gain},
      {"ablation directions", 0, ablation},
      {"threshold semantics", 0, threshold},
      {"determinism", 0, determinism},
      {"format round trip", 0, formats},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::string timing = fmt(secs, 2) + "s";
    if (c.time_limit_s > 0) {
      timing += " (limit " + fmt(c.time_limit_s, 0) + "s)";
      if (secs >= c.time_limit_s) o.pass = false;
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail << " [" << timing << "]"
              << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
