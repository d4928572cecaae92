// insdet: command-line front end for the instance-detection engine.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "insdet/insdet.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class Level { Error, Warn, Info, Debug };

struct Globals {
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string log_level = "info";

  Level level() const {
    static const std::map<std::string, Level> names{
        {"error", Level::Error}, {"warn", Level::Warn}, {"info", Level::Info}, {"debug", Level::Debug}};
    return names.at(log_level);
  }
};

Globals g_globals;

void log(Level lvl, const std::string& msg) {
  static const char* tags[] = {"error", "warn", "info", "debug"};
  if (lvl <= g_globals.level()) std::cerr << '[' << tags[int(lvl)] << "] " << msg << '\n';
}

void print_config(const std::string& command, json cfg) {
  cfg["command"] = command;
  cfg["seed"] = g_globals.seed;
  cfg["threads"] = g_globals.threads;
  cfg["log_level"] = g_globals.log_level;
  std::cout << "config " << cfg.dump() << std::endl;
}

// Accepts a manifest file, a directory holding manifest.json, or a path
// missing its ".json" suffix.
fs::path resolve_manifest(const std::string& arg) {
  fs::path p(arg);
  if (fs::is_directory(p)) return p / "manifest.json";
  if (!fs::exists(p) && fs::exists(fs::path(arg + ".json"))) return fs::path(arg + ".json");
  return p;
}

insdet::DetectionSet read_detections(const fs::path& path) {
  const auto bytes = insdet::binary::read_file(path);
  json doc;
  try {
    doc = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw insdet::Error(insdet::ErrorCode::SchemaViolation, path.string() + ": " + e.what());
  }
  return insdet::detections_from_json(doc);
}

// ------------------------------------------------------------ flag groups

struct TrainFlags {
  std::string loss = "triplet";
  double alpha = 0.5;
  double margin = -1;
  double lr = 1e-3;
  double weight_decay = 0.5;
  bool decoupled = false;
  std::size_t batch = 100;
  std::size_t epochs = 10;
  bool distractors = false;
  std::size_t distractors_per_batch = 100;
  std::size_t output_dim = 0;
  double init_noise = 0.01;

  insdet::TrainConfig config() const {
    insdet::TrainConfig c;
    c.loss = loss == "contrastive" ? insdet::LossKind::Contrastive
             : loss == "ce"        ? insdet::LossKind::CrossEntropy
                                   : insdet::LossKind::Triplet;
    c.alpha = alpha;
    c.contrastive_margin = margin;
    c.lr = lr;
    c.weight_decay = weight_decay;
    c.decoupled_weight_decay = decoupled;
    c.batch_size = batch;
    c.epochs = epochs;
    c.distractors_per_batch = distractors ? distractors_per_batch : 0;
    c.output_dim = output_dim;
    c.init_noise = init_noise;
    c.seed = g_globals.seed;
    c.threads = g_globals.threads;
    return c;
  }

  json to_json() const {
    return {{"loss", loss},
            {"alpha", alpha},
            {"margin", margin < 0 ? alpha : margin},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"decoupled_weight_decay", decoupled},
            {"batch", batch},
            {"epochs", epochs},
            {"distractors", distractors},
            {"distractors_per_batch", distractors_per_batch},
            {"output_dim", output_dim},
            {"init_noise", init_noise}};
  }
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--loss", f.loss, "Training objective; triplet is the published choice, contrastive and ce "
                                    "are the compared alternatives")
      ->check(CLI::IsMember({"triplet", "contrastive", "ce"}))
      ->capture_default_str();
  cmd->add_option("--alpha", f.alpha, "Triplet margin on cosine distance (published setting)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  cmd->add_option("--margin", f.margin, "Contrastive negative margin; negative means use --alpha (engine choice)")
      ->capture_default_str();
  cmd->add_option("--lr", f.lr, "Adam learning rate (published setting)")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--weight-decay", f.weight_decay, "Adam weight decay (published setting)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  cmd->add_flag("--decoupled-weight-decay", f.decoupled,
                "Apply weight decay directly to parameters instead of as an L2 gradient term (engine choice)");
  cmd->add_option("--batch", f.batch, "Anchors per batch; hard negatives are mined within the batch (published setting)")
      ->check(CLI::Range(std::size_t(2), std::size_t(1) << 30))
      ->capture_default_str();
  cmd->add_option("--epochs", f.epochs, "Passes over the training references (published setting)")->capture_default_str();
  cmd->add_flag("--distractors", f.distractors,
                "Add background distractor embeddings to the hard-negative candidates (published ablation axis DS)");
  cmd->add_option("--distractors-per-batch", f.distractors_per_batch,
                  "Distractors sampled per batch when --distractors is on (engine choice)")
      ->capture_default_str();
  cmd->add_option("--output-dim", f.output_dim, "Adapted feature dimension; 0 keeps the input dimension (engine choice)")
      ->capture_default_str();
  cmd->add_option("--init-noise", f.init_noise, "Std of the perturbation around the identity at init (engine choice)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
}

insdet::AugmentationConfig augmentation(std::size_t train_views, std::size_t test_views) {
  insdet::AugmentationConfig a;
  a.use_synthetic_in_train = train_views > 0;
  a.synth_per_instance_train = train_views;
  a.use_synthetic_in_test = test_views > 0;
  a.synth_per_instance_test = test_views;
  a.seed = g_globals.seed;
  return a;
}

insdet::Adapter load_or_identity(const std::string& path, std::size_t dim) {
  if (path.empty()) return insdet::identity_adapter(dim);
  return insdet::read_adapter(path);
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-space instance detection: adapt foundation-model embeddings, match proposals to "
               "object references, and score detections."};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--seed", g_globals.seed, "Seed for every random draw (engine choice)")->capture_default_str();
  app.add_option("--threads", g_globals.threads, "Worker threads; outputs do not depend on it (engine choice)")
      ->check(CLI::Range(1u, 1024u))
      ->capture_default_str();
  app.add_option("--log-level", g_globals.log_level, "stderr verbosity (engine choice)")
      ->check(CLI::IsMember({"error", "warn", "info", "debug"}))
      ->capture_default_str();

  // gen-synth
  insdet::SynthConfig synth;
  std::string synth_out;
  bool no_shift = false, no_rotation = false, no_scaling = false;
  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic world with known domain shift and a truth file");
  gen->add_option("--out", synth_out, "Output directory")->required();
  gen->add_option("--instances", synth.n_instances, "Object instances (engine choice)")->capture_default_str();
  gen->add_option("--refs-per-instance", synth.refs_per_instance, "Real reference views per instance (engine choice)")
      ->capture_default_str();
  gen->add_option("--synth-views", synth.synth_views_per_instance,
                  "Synthetic reference views per instance, standing in for rendered novel views (engine choice)")
      ->capture_default_str();
  gen->add_option("--dim", synth.dim, "Embedding dimension (engine choice)")->capture_default_str();
  gen->add_option("--scenes", synth.scenes, "Test scenes (engine choice)")->capture_default_str();
  gen->add_option("--proposals-per-scene", synth.proposals_per_scene, "Proposals per scene (engine choice)")
      ->capture_default_str();
  gen->add_option("--distractor-count", synth.distractor_count, "Background distractor embeddings (engine choice)")
      ->capture_default_str();
  gen->add_option("--background-dim", synth.background_dim,
                  "Dimension of the subspace distractors concentrate in; 0 = uniform (engine choice)")
      ->capture_default_str();
  gen->add_option("--background-spread", synth.background_spread, "Isotropic spread of distractors (engine choice)")
      ->capture_default_str();
  gen->add_option("--ref-noise", synth.ref_noise, "Isotropic reference noise std (engine choice)")->capture_default_str();
  gen->add_option("--view-variation", synth.view_variation,
                  "Reference variation std inside the shifted subspace (engine choice)")
      ->capture_default_str();
  gen->add_option("--proposal-noise", synth.proposal_noise, "Isotropic proposal noise std (engine choice)")
      ->capture_default_str();
  gen->add_option("--proposal-view-variation", synth.proposal_view_variation,
                  "Proposal variation std inside the shifted subspace (engine choice)")
      ->capture_default_str();
  gen->add_flag("--no-domain-shift", no_shift, "Proposals share the reference domain (engine choice)");
  gen->add_option("--nuisance-dim", synth.nuisance_dim, "Dimension of the subspace the shift acts on (engine choice)")
      ->capture_default_str();
  gen->add_option("--shift-scale-min", synth.shift_scale_min, "Smallest shift scale (engine choice)")->capture_default_str();
  gen->add_option("--shift-scale-max", synth.shift_scale_max, "Largest shift scale (engine choice)")->capture_default_str();
  gen->add_flag("--no-shift-rotation", no_rotation, "Shift without rotation (engine choice)");
  gen->add_flag("--no-shift-scaling", no_scaling, "Shift without scaling (engine choice)");
  gen->add_option("--clutter", synth.clutter_fraction, "Fraction of proposals that are background (engine choice)")
      ->capture_default_str();
  gen->add_option("--hard-fraction", synth.hard_fraction, "Fraction of scenes tagged hard (engine choice)")
      ->capture_default_str();
  gen->add_option("--hard-noise-scale", synth.hard_noise_scale, "Proposal noise multiplier in hard scenes (engine choice)")
      ->capture_default_str();
  gen->add_option("--box-jitter", synth.box_jitter, "Relative proposal box offset std (engine choice)")
      ->capture_default_str();

  // validate
  std::string val_manifest, val_adapter, val_detections;
  std::vector<std::string> val_embeddings;
  auto* validate = app.add_subcommand("validate", "Check a manifest and the files it references; exit 2 on any defect");
  validate->add_option("--manifest", val_manifest, "Manifest file or directory holding manifest.json");
  validate->add_option("--embeddings", val_embeddings, "Standalone embedding files to check");
  validate->add_option("--adapter", val_adapter, "Adapter checkpoint to check");
  validate->add_option("--detections", val_detections, "Detections file to check against --manifest");

  // train
  TrainFlags train_flags;
  std::string train_manifest, train_out, train_trace;
  std::size_t train_aug = 0;
  auto* train = app.add_subcommand("train", "Fit the feature adapter on the references with metric learning");
  train->add_option("--manifest", train_manifest, "Input manifest")->required();
  train->add_option("--out", train_out, "Adapter checkpoint to write")->required();
  train->add_option("--loss-trace", train_trace, "Optional per-epoch loss CSV");
  train->add_option("--aug-train", train_aug,
                    "Synthetic views per instance added to the training references; 0 disables "
                    "(published ablation axis DA@Train)")
      ->capture_default_str();
  add_train_flags(train, train_flags);

  // match
  std::string match_manifest, match_adapter, match_out;
  double match_threshold = insdet::kDefaultThreshold;
  std::size_t match_aug = 0;
  auto* match = app.add_subcommand("match", "Stable-match proposals to references and emit thresholded detections");
  match->add_option("--manifest", match_manifest, "Input manifest")->required();
  match->add_option("--adapter", match_adapter, "Adapter checkpoint; the identity map when omitted");
  match->add_option("--threshold", match_threshold,
                    "Matched pairs need similarity strictly above this value (published setting)")
      ->capture_default_str();
  match->add_option("--aug-test", match_aug,
                    "Synthetic views per instance added to the test references; 0 disables "
                    "(published ablation axis DA@Test)")
      ->capture_default_str();
  match->add_option("--out", match_out, "Detections JSON to write")->required();

  // eval
  std::string eval_manifest, eval_detections, eval_out;
  auto* eval = app.add_subcommand("eval", "Score detections with AP over IoU 0.50:0.95 and AR");
  eval->add_option("--manifest", eval_manifest, "Manifest holding the ground truth")->required();
  eval->add_option("--detections", eval_detections, "Detections JSON")->required();
  eval->add_option("--out", eval_out, "Metrics JSON to write")->required();

  // distractor-stats
  std::string ds_manifest, ds_out;
  std::size_t ds_aug = 0;
  auto* dstats = app.add_subcommand("distractor-stats",
                                    "Average and maximum similarity of each distractor to the references");
  dstats->add_option("--manifest", ds_manifest, "Input manifest")->required();
  dstats->add_option("--aug-test", ds_aug, "Synthetic views per instance included among the references")
      ->capture_default_str();
  dstats->add_option("--out", ds_out, "CSV to write")->required();

  // pr-curve
  std::string pr_manifest, pr_detections, pr_out;
  double pr_iou = 0.5;
  auto* pr = app.add_subcommand("pr-curve", "Micro-averaged precision/recall curve");
  pr->add_option("--manifest", pr_manifest, "Manifest holding the ground truth")->required();
  pr->add_option("--detections", pr_detections, "Detections JSON")->required();
  pr->add_option("--iou", pr_iou, "IoU threshold (published setting)")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  pr->add_option("--out", pr_out, "CSV to write")->required();

  // sweep-aug
  TrainFlags sweep_flags;
  std::string sweep_manifest, sweep_out;
  std::vector<std::size_t> sweep_train{0}, sweep_test{0, 2, 4, 8};
  double sweep_threshold = insdet::kDefaultThreshold;
  auto* sweep = app.add_subcommand("sweep-aug",
                                   "Train and evaluate over a grid of synthetic-view counts; CSV of ap_avg deltas");
  sweep->add_option("--manifest", sweep_manifest, "Input manifest")->required();
  sweep->add_option("--train-grid", sweep_train, "Synthetic views per instance for training")
      ->delimiter(',')
      ->capture_default_str();
  sweep->add_option("--test-grid", sweep_test,
                    "Synthetic views per instance for testing (published sweep: more test views)")
      ->delimiter(',')
      ->capture_default_str();
  sweep->add_option("--threshold", sweep_threshold, "Acceptance threshold (published setting)")->capture_default_str();
  sweep->add_option("--out", sweep_out, "CSV to write")->required();
  add_train_flags(sweep, sweep_flags);

  try {
    app.parse(argc, argv);

    if (*gen) {
      synth.seed = g_globals.seed;
      synth.domain_shift = !no_shift;
      synth.shift_rotation = !no_rotation;
      synth.shift_scaling = !no_scaling;
      print_config("gen-synth", {{"out", synth_out},
                                 {"instances", synth.n_instances},
                                 {"refs_per_instance", synth.refs_per_instance},
                                 {"synth_views", synth.synth_views_per_instance},
                                 {"dim", synth.dim},
                                 {"scenes", synth.scenes},
                                 {"proposals_per_scene", synth.proposals_per_scene},
                                 {"distractor_count", synth.distractor_count},
                                 {"background_dim", synth.background_dim},
                                 {"background_spread", synth.background_spread},
                                 {"ref_noise", synth.ref_noise},
                                 {"view_variation", synth.view_variation},
                                 {"proposal_noise", synth.proposal_noise},
                                 {"proposal_view_variation", synth.proposal_view_variation},
                                 {"domain_shift", synth.domain_shift},
                                 {"nuisance_dim", synth.nuisance_dim},
                                 {"shift_scale_min", synth.shift_scale_min},
                                 {"shift_scale_max", synth.shift_scale_max},
                                 {"shift_rotation", synth.shift_rotation},
                                 {"shift_scaling", synth.shift_scaling},
                                 {"clutter", synth.clutter_fraction},
                                 {"hard_fraction", synth.hard_fraction},
                                 {"hard_noise_scale", synth.hard_noise_scale},
                                 {"box_jitter", synth.box_jitter}});
      const auto paths = insdet::generate(synth, synth_out);
      log(Level::Info, "wrote " + paths.manifest.string());
    } else if (*validate) {
      print_config("validate", {{"manifest", val_manifest},
                                {"embeddings", val_embeddings},
                                {"adapter", val_adapter},
                                {"detections", val_detections}});
      if (val_manifest.empty() && val_embeddings.empty() && val_adapter.empty()) {
        throw insdet::Error(insdet::ErrorCode::InvalidArgument,
                            "validate: nothing to check; pass --manifest, --embeddings or --adapter");
      }
      json summary = json::object();
      for (const auto& path : val_embeddings) {
        const auto m = insdet::read_embeddings(path);
        summary["embeddings"][path] = {{"rows", m.rows()}, {"dim", m.cols()}};
      }
      if (!val_adapter.empty()) {
        const auto a = insdet::read_adapter(val_adapter);
        summary["adapter"] = {{"input_dim", a.input_dim()}, {"output_dim", a.output_dim()}};
      }
      if (!val_manifest.empty()) {
        const auto m = insdet::load_manifest(resolve_manifest(val_manifest));
        std::size_t proposals = 0;
        for (const auto& s : m.scenes) proposals += s.proposals.size();
        summary["manifest"] = {{"dim", m.dim},
                               {"references", m.references.size()},
                               {"instances", m.reference_instances().size()},
                               {"scenes", m.scenes.size()},
                               {"proposals", proposals},
                               {"ground_truth", m.ground_truth_count()},
                               {"distractors", m.distractors.rows()}};
        if (!val_detections.empty()) {
          const auto dets = read_detections(val_detections);
          insdet::check_detection_scenes(dets, m);
          summary["detections"] = dets.size();
        }
      } else if (!val_detections.empty()) {
        throw insdet::Error(insdet::ErrorCode::InvalidArgument, "validate: --detections needs --manifest");
      }
      summary["valid"] = true;
      std::cout << summary.dump() << std::endl;
    } else if (*train) {
      auto cfg = train_flags.to_json();
      cfg["manifest"] = train_manifest;
      cfg["out"] = train_out;
      cfg["loss_trace"] = train_trace;
      cfg["aug_train"] = train_aug;
      print_config("train", cfg);
      const auto m = insdet::load_manifest(resolve_manifest(train_manifest));
      const auto aug = augmentation(train_aug, 0);
      if (train_flags.distractors && m.distractors.rows() == 0) {
        log(Level::Warn, "--distractors given but the manifest has no distractor pool");
      }
      const auto result = insdet::train(m, insdet::distractor_pool(m), train_flags.config(), aug);
      for (const auto& e : result.trace) {
        log(Level::Debug, "epoch " + std::to_string(e.epoch) + " loss " + fixed(e.mean_loss, 6) + " active " +
                              fixed(e.active_fraction, 4));
      }
      if (!result.trace.empty()) log(Level::Info, "final loss " + fixed(result.trace.back().mean_loss, 6));
      insdet::write_adapter(result.adapter, train_out);
      if (!train_trace.empty()) insdet::binary::write_text_atomic(train_trace, insdet::loss_trace_csv(result.trace));
    } else if (*match) {
      print_config("match", {{"manifest", match_manifest},
                             {"adapter", match_adapter},
                             {"threshold", match_threshold},
                             {"aug_test", match_aug},
                             {"out", match_out}});
      const auto m = insdet::load_manifest(resolve_manifest(match_manifest));
      const auto adapter = load_or_identity(match_adapter, m.dim);
      insdet::InferenceOptions opts;
      opts.threshold = match_threshold;
      opts.threads = g_globals.threads;
      const auto dets = insdet::run_inference(m, adapter, augmentation(0, match_aug), opts);
      log(Level::Info, std::to_string(dets.size()) + " detections");
      insdet::binary::write_text_atomic(match_out, insdet::detections_to_json(dets).dump(1) + "\n");
    } else if (*eval) {
      print_config("eval", {{"manifest", eval_manifest}, {"detections", eval_detections}, {"out", eval_out}});
      const auto m = insdet::load_manifest(resolve_manifest(eval_manifest));
      const auto report = insdet::evaluate(read_detections(eval_detections), m);
      const auto doc = insdet::metrics_to_json(report);
      log(Level::Info, "AP " + doc["AP"].dump() + " AP50 " + doc["AP50"].dump());
      insdet::binary::write_text_atomic(eval_out, doc.dump(1) + "\n");
    } else if (*dstats) {
      print_config("distractor-stats", {{"manifest", ds_manifest}, {"aug_test", ds_aug}, {"out", ds_out}});
      const auto m = insdet::load_manifest(resolve_manifest(ds_manifest));
      const auto refs = insdet::select_references(m, augmentation(0, ds_aug), insdet::Phase::Test);
      const auto stats =
          insdet::distractor_correlation(insdet::distractor_pool(m), insdet::reference_rows(m, refs), g_globals.threads);
      insdet::binary::write_text_atomic(ds_out, insdet::distractor_stats_csv(stats));
    } else if (*pr) {
      print_config("pr-curve", {{"manifest", pr_manifest}, {"detections", pr_detections}, {"iou", pr_iou}, {"out", pr_out}});
      const auto m = insdet::load_manifest(resolve_manifest(pr_manifest));
      const auto curve = insdet::pr_curve(read_detections(pr_detections), m, pr_iou);
      insdet::binary::write_text_atomic(pr_out, insdet::pr_curve_csv(curve));
    } else if (*sweep) {
      auto cfg = sweep_flags.to_json();
      cfg["manifest"] = sweep_manifest;
      cfg["train_grid"] = sweep_train;
      cfg["test_grid"] = sweep_test;
      cfg["threshold"] = sweep_threshold;
      cfg["out"] = sweep_out;
      print_config("sweep-aug", cfg);
      const auto m = insdet::load_manifest(resolve_manifest(sweep_manifest));
      const auto pool = insdet::distractor_pool(m);
      insdet::InferenceOptions opts;
      opts.threshold = sweep_threshold;
      opts.threads = g_globals.threads;
      auto train_grid = sweep_train;
      if (std::find(train_grid.begin(), train_grid.end(), 0) == train_grid.end()) train_grid.insert(train_grid.begin(), 0);

      std::map<std::size_t, insdet::Adapter> adapters;
      for (const std::size_t n : train_grid) {
        log(Level::Info, "training with " + std::to_string(n) + " synthetic views per instance");
        adapters.emplace(n, insdet::train(m, pool, sweep_flags.config(), augmentation(n, 0)).adapter);
      }
      auto score = [&](std::size_t n_train, std::size_t n_test) {
        const auto dets = insdet::run_inference(m, adapters.at(n_train), augmentation(n_train, n_test), opts);
        return insdet::evaluate(dets, m).ap_avg();
      };
      const double baseline = score(0, 0);
      std::ostringstream csv;
      csv << "synth_train,synth_test,ap_avg,delta_ap_avg\n";
      for (const std::size_t a : sweep_train) {
        for (const std::size_t b : sweep_test) {
          const double ap = score(a, b);
          csv << a << ',' << b << ',' << fixed(ap, 6) << ',' << fixed(ap - baseline, 6) << '\n';
          log(Level::Info, "train " + std::to_string(a) + " test " + std::to_string(b) + " ap_avg " + fixed(ap, 2));
        }
      }
      insdet::binary::write_text_atomic(sweep_out, csv.str());
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "ERROR InvalidArgument: " << msg << '\n';
    return 2;
  } catch (const insdet::Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "ERROR " << insdet::to_string(e.code()) << ": " << msg << '\n';
    return insdet::is_validation_error(e.code()) ? 2 : 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "ERROR Internal: " << msg << '\n';
    return 1;
  }
}
