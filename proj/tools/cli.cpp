#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "patchseg/evaluation.hpp"
#include "patchseg/inference.hpp"
#include "patchseg/network.hpp"
#include "patchseg/patching.hpp"
#include "patchseg/pbs.hpp"
#include "patchseg/phantom.hpp"
#include "patchseg/training.hpp"

namespace patchseg::cli {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidArgument("config " + path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string format_number(double v) {
  std::ostringstream out;
  out << v;
  return out.str();
}

void echo_config(std::ostream& err, const std::string& command, const json& resolved) {
  err << "config " << command << ' ' << resolved.dump() << '\n';
}

/// Training flags shared by `train` and `crossval`. Values land in `config`
/// only when given on the command line, so a --config file can sit between
/// the built-in defaults and the flags.
struct TrainFlags {
  std::string config_file;
  double eta = 0;
  std::size_t batch = 0;
  std::uint64_t steps = 0;
  double dropout = 0;
  std::uint64_t seed = 0;
  double momentum = 0;
  std::uint32_t patch = 0;
  std::uint16_t classes = 0;
  std::uint32_t radius = 0;
  std::vector<std::uint32_t> pathway;
  std::vector<std::uint32_t> trunk;
  std::vector<CLI::Option*> options;

  void add(CLI::App* app) {
    const TrainConfig d;
    app->add_option("--config", config_file, "JSON file with training settings (overridden by flags)");
    options = {
        app->add_option("--eta", eta, "Learning rate")->default_str(format_number(d.learning_rate)),
        app->add_option("--batch", batch, "Mini-batch size (even)")->default_val(d.batch_size),
        app->add_option("--steps", steps, "SGD steps")->default_val(d.steps),
        app->add_option("--dropout", dropout, "Dropout rate for layers 5 and 7")->default_val(d.dropout),
        app->add_option("--seed", seed, "Seed for every random draw")->default_val(d.seed),
        app->add_option("--momentum", momentum, "SGD momentum (0 = plain SGD)")->default_val(d.momentum),
        app->add_option("--patch", patch, "Patch side p (odd)")->default_val(d.patch_size),
        app->add_option("--classes", classes, "Network classes C")->default_val(d.classes),
        app->add_option("--radius", radius, "ROI dilation radius in voxels")->default_val(d.mask_radius),
        app->add_option("--pathway-widths", pathway, "FE1,FE2 widths")->default_str("96,48")->delimiter(','),
        app->add_option("--trunk-widths", trunk, "FE3,FE4,FE6 widths")->default_str("128,64,32")->delimiter(','),
    };
  }

  TrainConfig resolve() const {
    TrainConfig c;
    if (!config_file.empty()) merge_json(c, read_json_file(config_file));
    const auto given = [&](int i) { return options[static_cast<std::size_t>(i)]->count() > 0; };
    if (given(0)) c.learning_rate = eta;
    if (given(1)) c.batch_size = batch;
    if (given(2)) c.steps = steps;
    if (given(3)) c.dropout = dropout;
    if (given(4)) c.seed = seed;
    if (given(5)) c.momentum = momentum;
    if (given(6)) c.patch_size = patch;
    if (given(7)) c.classes = classes;
    if (given(8)) c.mask_radius = radius;
    if (given(9)) c.pathway_widths = pathway;
    if (given(10)) c.trunk_widths = trunk;
    c.validate();
    return c;
  }
};

std::vector<LabelVolume> corpus_labels(const std::vector<Subject>& corpus) {
  std::vector<LabelVolume> labels;
  for (const auto& s : corpus) labels.push_back(s.labels);
  return labels;
}

RoiMask mask_or_build(const std::string& mask_path, const std::vector<Subject>& corpus,
                      std::uint32_t radius) {
  if (!mask_path.empty()) return RoiMask::from_labels(load_labels(mask_path), radius);
  const auto labels = corpus_labels(corpus);
  return build_roi_mask(labels, radius);
}

int exit_code(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::invalid_argument: return kBadFlags;
    case ErrorCategory::io:
    case ErrorCategory::format: return kIo;
    case ErrorCategory::divergence: return kDivergence;
    case ErrorCategory::dims_mismatch: return kDimsMismatch;
  }
  return kFailure;
}

std::string one_line(std::string text) {
  std::ranges::replace(text, '\n', ' ');
  return text;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Patch-based volumetric segmentation with a tri-planar dense network", "patchseg"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  // phantom
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic corpus with exact labels");
  std::size_t ph_n = 10;
  std::string ph_out;
  std::uint64_t ph_seed = 1;
  std::uint32_t ph_size = 64;
  double ph_noise = 10.0, ph_jitter = 2.0;
  phantom->add_option("--n", ph_n, "Number of subjects")->capture_default_str();
  phantom->add_option("--out", ph_out, "Output directory")->required();
  phantom->add_option("--seed", ph_seed, "Generator seed")->capture_default_str();
  phantom->add_option("--size", ph_size, "Cube side in voxels (structures scale with it)")->capture_default_str();
  phantom->add_option("--noise", ph_noise, "Noise standard deviation")->capture_default_str();
  phantom->add_option("--jitter", ph_jitter, "Per-axis centre jitter in voxels")->capture_default_str();

  // mask
  auto* mask_cmd = app.add_subcommand("mask", "Build the ROI mask from atlas labels");
  std::string mk_corpus, mk_out;
  std::vector<std::string> mk_labels;
  std::uint32_t mk_radius = 3;
  mask_cmd->add_option("--corpus", mk_corpus, "Corpus directory (uses every label map)");
  mask_cmd->add_option("--labels", mk_labels, "Label volumes")->expected(1, -1);
  mask_cmd->add_option("--radius", mk_radius, "Chebyshev dilation radius")->capture_default_str();
  mask_cmd->add_option("--out", mk_out, "Output mask volume")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a network on a corpus");
  TrainFlags tr_flags;
  tr_flags.add(train_cmd);
  std::string tr_corpus, tr_mask, tr_out, tr_manifest;
  std::uint64_t tr_ckpt = 0;
  train_cmd->add_option("--corpus", tr_corpus, "Corpus directory")->required();
  train_cmd->add_option("--mask", tr_mask, "ROI mask (built from the corpus when omitted)");
  train_cmd->add_option("--out", tr_out, "Output directory for model.pdnn, train_log.csv, checkpoints")->required();
  train_cmd->add_option("--ckpt-interval", tr_ckpt, "Steps between checkpoints (0 = none)")->capture_default_str();
  train_cmd->add_option("--pool-manifest", tr_manifest, "Write the training pool as JSON lines");

  // segment
  auto* seg_cmd = app.add_subcommand("segment", "Segment an image with a trained network");
  std::string sg_ckpt, sg_image, sg_mask, sg_out;
  std::size_t sg_block = kDefaultBlockWidth;
  bool sg_unbatched = false;
  seg_cmd->add_option("--ckpt", sg_ckpt, "Checkpoint file")->required();
  seg_cmd->add_option("--image", sg_image, "Target intensity volume")->required();
  seg_cmd->add_option("--mask", sg_mask, "ROI mask volume")->required();
  seg_cmd->add_option("--out", sg_out, "Output label volume (sidecar written to OUT.json)")->required();
  seg_cmd->add_option("--block", sg_block, "Voxels per evaluation block")->capture_default_str();
  seg_cmd->add_flag("--unbatched", sg_unbatched, "Classify one voxel at a time");

  // pbs
  auto* pbs_cmd = app.add_subcommand("pbs", "Patch label fusion baseline");
  std::string pb_image, pb_corpus, pb_mask, pb_out, pb_config, pb_h = "adaptive";
  PbsConfig pb_defaults;
  std::uint32_t pb_patch = pb_defaults.patch_side, pb_window = pb_defaults.window_side, pb_radius = 3;
  std::size_t pb_k = pb_defaults.atlas_count;
  double pb_floor = pb_defaults.bandwidth_floor;
  pbs_cmd->add_option("--image", pb_image, "Target intensity volume")->required();
  pbs_cmd->add_option("--corpus", pb_corpus, "Atlas corpus directory")->required();
  pbs_cmd->add_option("--mask", pb_mask, "ROI mask (built from the atlases when omitted)");
  pbs_cmd->add_option("--radius", pb_radius, "ROI dilation radius when building the mask")->capture_default_str();
  pbs_cmd->add_option("--out", pb_out, "Output label volume")->required();
  pbs_cmd->add_option("--config", pb_config, "JSON with patch, window, k, h, h_floor");
  auto* pb_patch_opt = pbs_cmd->add_option("--patch", pb_patch, "Patch cube side")->capture_default_str();
  auto* pb_window_opt = pbs_cmd->add_option("--window", pb_window, "Search window side")->capture_default_str();
  auto* pb_k_opt = pbs_cmd->add_option("--k", pb_k, "Atlases kept after SSD ranking")->capture_default_str();
  auto* pb_h_opt = pbs_cmd->add_option("--bandwidth", pb_h, "Bandwidth: number or 'adaptive'")->capture_default_str();
  auto* pb_floor_opt = pbs_cmd->add_option("--h-floor", pb_floor, "Added to min SSD for adaptive h")->capture_default_str();

  // dice
  auto* dice_cmd = app.add_subcommand("dice", "Dice overlap between two label volumes");
  std::string dc_a, dc_b;
  std::vector<std::uint16_t> dc_classes;
  dice_cmd->add_option("--a", dc_a, "Segmentation")->required();
  dice_cmd->add_option("--b", dc_b, "Reference")->required();
  dice_cmd->add_option("--class", dc_classes, "Classes to score (default: any label > 0)");

  // crossval
  auto* cv_cmd = app.add_subcommand("crossval", "K-fold cross-validation with Dice report");
  TrainFlags cv_flags;
  cv_flags.add(cv_cmd);
  std::string cv_corpus, cv_out, cv_method = "dnn";
  std::size_t cv_folds = 10;
  cv_cmd->add_option("--corpus", cv_corpus, "Corpus directory")->required();
  cv_cmd->add_option("--folds", cv_folds, "Number of folds")->capture_default_str();
  cv_cmd->add_option("--method", cv_method, "dnn or pbs")->check(CLI::IsMember({"dnn", "pbs"}))->capture_default_str();
  cv_cmd->add_option("--out", cv_out, "Prefix for OUT.json, OUT.csv and OUT.txt");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: bad_flags: " << one_line(e.what()) << '\n';
    return kBadFlags;
  }

  try {
    if (phantom->parsed()) {
      PhantomSpec spec = PhantomSpec::standard(ph_seed);
      spec.noise = ph_noise;
      spec.jitter = ph_jitter;
      for (auto& s : spec.structures) s.intensity_offset = 3.0 * ph_noise;
      if (ph_size != 64) {
        const double scale = ph_size / 64.0;
        spec.dims = {ph_size, ph_size, ph_size};
        for (auto& s : spec.structures)
          for (int a = 0; a < 3; ++a) {
            s.center[a] *= scale;
            s.radii[a] *= scale;
          }
      }
      json resolved = spec;
      resolved["n"] = ph_n;
      resolved["out"] = ph_out;
      echo_config(err, "phantom", resolved);
      const auto corpus = generate_corpus(spec, ph_n);
      write_corpus(ph_out, corpus, {{"phantom", json(spec)}});
      err << "wrote " << corpus.size() << " subjects to " << ph_out << '\n';
      return kOk;
    }

    if (mask_cmd->parsed()) {
      std::vector<LabelVolume> labels;
      if (!mk_corpus.empty()) labels = corpus_labels(read_corpus(mk_corpus));
      for (const auto& path : mk_labels) labels.push_back(load_labels(path));
      echo_config(err, "mask", {{"corpus", mk_corpus}, {"labels", mk_labels}, {"radius", mk_radius}, {"out", mk_out}});
      const RoiMask mask = build_roi_mask(labels, mk_radius);
      save_volume(mask.to_labels(), mk_out);
      err << "mask voxels " << mask.count() << '\n';
      return kOk;
    }

    if (train_cmd->parsed()) {
      TrainConfig config = tr_flags.resolve();
      config.checkpoint_interval = tr_ckpt;
      config.checkpoint_dir = fs::path(tr_out) / "checkpoints";
      json resolved = to_json(config);
      resolved["corpus"] = tr_corpus;
      resolved["mask"] = tr_mask;
      echo_config(err, "train", resolved);
      const auto corpus = read_corpus(tr_corpus);
      const RoiMask mask = mask_or_build(tr_mask, corpus, config.mask_radius);
      std::vector<IntensityVolume> images;
      for (const auto& s : corpus) images.push_back(s.image);
      const auto labels = corpus_labels(corpus);
      const TrainingPool pool = build_training_pool(
          images, labels, mask, PoolOptions{config.patch_size, config.classes, Normalization::roi_zscore});
      err << "pool " << pool.size() << " entries (" << pool.foreground().size() << " foreground)\n";
      fs::create_directories(tr_out);
      if (!tr_manifest.empty()) {
        std::ofstream manifest(tr_manifest);
        if (!manifest) throw IoError("cannot write " + tr_manifest);
        pool.write_manifest(manifest);
      }
      TrainHooks hooks;
      hooks.on_step = [&](const TrainLogRecord& rec) {
        if (rec.step % 1000 == 0 || rec.step == config.steps)
          err << "step " << rec.step << " loss " << rec.loss << '\n';
      };
      const TrainResult result = train(pool, config, hooks);
      save_checkpoint(result.net, fs::path(tr_out) / "model.pdnn");
      save_volume(mask.to_labels(), fs::path(tr_out) / "mask.pseg");
      std::ostringstream log;
      write_train_log(log, result.log);
      write_text(fs::path(tr_out) / "train_log.csv", log.str());
      return kOk;
    }

    if (seg_cmd->parsed()) {
      echo_config(err, "segment", {{"ckpt", sg_ckpt}, {"image", sg_image}, {"mask", sg_mask},
                                   {"out", sg_out}, {"block", sg_block}, {"unbatched", sg_unbatched}});
      const auto io_start = std::chrono::steady_clock::now();
      const PatchDnn net = load_checkpoint(sg_ckpt);
      const IntensityVolume image = load_intensity(sg_image);
      const RoiMask mask = RoiMask::from_labels(load_labels(sg_mask));
      double io_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - io_start).count();
      const auto result =
          sg_unbatched ? segment(net, image, mask) : segment_batched(net, image, mask, sg_block);
      const auto write_start = std::chrono::steady_clock::now();
      save_volume(result.labels, sg_out);
      io_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - write_start).count();
      write_text(sg_out + ".json", sidecar_json(result, fs::path(sg_ckpt).filename().string() + "@step" +
                                                            std::to_string(net.step),
                                                io_seconds)
                                       .dump(2) +
                                       "\n");
      err << "classified " << result.voxels_classified << " voxels in " << result.seconds << " s\n";
      return kOk;
    }

    if (pbs_cmd->parsed()) {
      PbsConfig config;
      if (!pb_config.empty()) merge_json(config, read_json_file(pb_config));
      if (pb_patch_opt->count()) config.patch_side = pb_patch;
      if (pb_window_opt->count()) config.window_side = pb_window;
      if (pb_k_opt->count()) config.atlas_count = pb_k;
      if (pb_floor_opt->count()) config.bandwidth_floor = pb_floor;
      if (pb_h_opt->count()) {
        if (pb_h == "adaptive") {
          config.bandwidth_policy = PbsConfig::Bandwidth::adaptive;
        } else {
          config.bandwidth_policy = PbsConfig::Bandwidth::fixed;
          try {
            config.bandwidth = std::stod(pb_h);
          } catch (const std::exception&) {
            throw InvalidArgument("--bandwidth must be a number or 'adaptive'");
          }
        }
      }
      config.validate();
      json resolved = to_json(config);
      resolved["image"] = pb_image;
      resolved["corpus"] = pb_corpus;
      resolved["mask"] = pb_mask;
      echo_config(err, "pbs", resolved);
      const auto corpus = read_corpus(pb_corpus);
      const IntensityVolume target = load_intensity(pb_image);
      const RoiMask mask = mask_or_build(pb_mask, corpus, pb_radius);
      std::vector<IntensityVolume> images;
      for (const auto& s : corpus) images.push_back(s.image);
      const auto labels = corpus_labels(corpus);
      const auto chosen = select_atlases(target, images, mask, std::min(config.atlas_count, images.size()));
      std::vector<IntensityVolume> chosen_images;
      std::vector<LabelVolume> chosen_labels;
      for (std::size_t id : chosen) {
        chosen_images.push_back(images[id]);
        chosen_labels.push_back(labels[id]);
      }
      const auto result = pbs_segment(target, chosen_images, chosen_labels, mask, config);
      save_volume(result.labels, pb_out);
      json ids = json::array();
      for (std::size_t id : chosen) ids.push_back(corpus[id].id);
      write_text(pb_out + ".json", json{{"voxels_classified", result.voxels_classified},
                                        {"wall_seconds", result.seconds},
                                        {"atlases", ids}}
                                       .dump(2) + "\n");
      err << "classified " << result.voxels_classified << " voxels in " << result.seconds << " s\n";
      return kOk;
    }

    if (dice_cmd->parsed()) {
      echo_config(err, "dice", {{"a", dc_a}, {"b", dc_b}, {"classes", dc_classes}});
      const LabelVolume a = load_labels(dc_a);
      const LabelVolume b = load_labels(dc_b);
      const ClassSet classes{dc_classes};
      out << json{{"dice", dice(a, b, classes)}, {"classes", dc_classes.empty() ? json("foreground") : json(dc_classes)}}.dump()
          << '\n';
      return kOk;
    }

    if (cv_cmd->parsed()) {
      TrainConfig config = cv_flags.resolve();
      json resolved = to_json(config);
      resolved["corpus"] = cv_corpus;
      resolved["folds"] = cv_folds;
      resolved["method"] = cv_method;
      echo_config(err, "crossval", resolved);
      const auto corpus = read_corpus(cv_corpus);
      DiceReport report;
      if (cv_method == "pbs") {
        report = crossval(corpus, cv_folds, pbs_trainer(PbsConfig{}, config.mask_radius), config.seed);
        report.metadata["method"] = "pbs";
      } else {
        report = crossval(corpus, cv_folds, config, config.seed);
        report.metadata["method"] = "dnn";
      }
      const std::string table = summary_table(std::span(&report, 1), std::vector<std::string>{
                                                   cv_method == "pbs" ? "pbs" : "dnn p=" + std::to_string(config.patch_size)});
      err << table;
      if (!cv_out.empty()) {
        write_text(cv_out + ".json", report.to_json().dump(2) + "\n");
        std::ostringstream csv;
        report.write_csv(csv);
        write_text(cv_out + ".csv", csv.str());
        write_text(cv_out + ".txt", table);
      }
      out << report.to_json().dump(2) << '\n';
      return kOk;
    }
  } catch (const Error& e) {
    err << "error: " << to_string(e.category()) << ": " << one_line(e.what()) << '\n';
    return exit_code(e.category());
  } catch (const std::exception& e) {
    err << "error: internal: " << one_line(e.what()) << '\n';
    return kFailure;
  }
  return kFailure;
}

}  // namespace patchseg::cli
