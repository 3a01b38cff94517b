// Command-line front end: dataset generation, training, evaluation, chart
// emission and gradient verification. Configuration comes from built-in
// defaults, then an optional flat key=value file, then command-line flags.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "codetect/codetect.hpp"

namespace {

struct TrainCliFlags {
  std::string config_file;
  std::string mode;
  std::string data_dir;
  std::string out_dir;
  std::string weak_checkpoint;
  double beta = 0.0;
  int epochs = 0;
  int eval_every = 0;
  std::uint64_t seed = 0;
  double lr_initial = 0.0;
  double lr_late = 0.0;
  double nms_threshold = 0.0;
};

codetect::TrainConfig resolve_train_config(const CLI::App& cmd, const TrainCliFlags& flags) {
  codetect::TrainConfig cfg;
  if (!flags.config_file.empty())
    codetect::apply_config(cfg, codetect::parse_config_file(flags.config_file));
  if (cmd.count("--mode")) cfg.mode = codetect::parse_mode(flags.mode);
  if (cmd.count("--data")) cfg.data_dir = flags.data_dir;
  if (cmd.count("--out")) cfg.out_dir = flags.out_dir;
  if (cmd.count("--weak-checkpoint")) cfg.weak_checkpoint = flags.weak_checkpoint;
  if (cmd.count("--beta")) cfg.beta = flags.beta;
  if (cmd.count("--epochs")) cfg.epochs = flags.epochs;
  if (cmd.count("--eval-every")) cfg.eval_every = flags.eval_every;
  if (cmd.count("--seed")) cfg.seed = flags.seed;
  if (cmd.count("--lr-initial")) cfg.lr_initial = flags.lr_initial;
  if (cmd.count("--lr-late")) cfg.lr_late = flags.lr_late;
  if (cmd.count("--nms-threshold")) cfg.nms_threshold = flags.nms_threshold;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"collaborative weakly supervised detection sandbox"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic shapes dataset");
  codetect::DatasetConfig dcfg;
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", dcfg.seed, "generation seed");
  gen->add_option("--images", dcfg.n_images, "total images");
  gen->add_option("--train", dcfg.n_train, "training images (rest are test)");
  gen->add_option("--classes", dcfg.n_classes, "number of shape classes (2-5)");
  gen->add_option("--size", dcfg.image_size, "image side in pixels");

  // train
  auto* train_cmd = app.add_subcommand("train", "train one of the detector configurations");
  TrainCliFlags tf;
  train_cmd->add_option("--config", tf.config_file, "flat key=value config file");
  train_cmd->add_option("--mode", tf.mode, "weak_only | collaborative | cascade");
  train_cmd->add_option("--data", tf.data_dir, "dataset directory");
  train_cmd->add_option("--out", tf.out_dir, "run output directory");
  train_cmd->add_option("--weak-checkpoint", tf.weak_checkpoint,
                        "trained weak_only checkpoint (cascade mode)");
  train_cmd->add_option("--beta", tf.beta, "consistency mixing weight");
  train_cmd->add_option("--epochs", tf.epochs, "training epochs");
  train_cmd->add_option("--eval-every", tf.eval_every, "epochs between evaluations");
  train_cmd->add_option("--seed", tf.seed, "training seed");
  train_cmd->add_option("--lr-initial", tf.lr_initial, "learning rate, first 60% of epochs");
  train_cmd->add_option("--lr-late", tf.lr_late, "learning rate, remaining epochs");
  train_cmd->add_option("--nms-threshold", tf.nms_threshold, "detection-time NMS threshold");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_out, ev_config;
  eval_cmd->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", ev_data, "dataset directory")->required();
  eval_cmd->add_option("--split", ev_split, "train | test");
  eval_cmd->add_option("--out", ev_out, "output directory for detection CSVs")->required();
  eval_cmd->add_option("--config", ev_config, "flat key=value config file");

  // plot
  auto* plot_cmd = app.add_subcommand("plot", "emit an mAP-vs-epoch chart from a run log");
  std::string pl_runlog, pl_out;
  plot_cmd->add_option("--runlog", pl_runlog, "runlog.csv from a training run")->required();
  plot_cmd->add_option("--out", pl_out, "output SVG path")->required();

  // gradcheck
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference verification of the losses");
  int gc_instances = 20;
  std::uint64_t gc_seed = 7;
  gc_cmd->add_option("--instances", gc_instances, "randomized instances");
  gc_cmd->add_option("--seed", gc_seed, "suite seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      codetect::generate_dataset(dcfg, gen_out);
      std::printf("dataset: %d images (%d train / %d test), %d classes, %dx%d -> %s\n",
                  dcfg.n_images, dcfg.n_train, dcfg.n_images - dcfg.n_train, dcfg.n_classes,
                  dcfg.image_size, dcfg.image_size, gen_out.c_str());
    } else if (*train_cmd) {
      codetect::TrainConfig cfg = resolve_train_config(*train_cmd, tf);
      if (cfg.out_dir.empty()) throw codetect::config_error("train: --out is required");
      const codetect::TrainResult res = codetect::train(cfg);
      for (const auto& w : res.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      for (const auto& r : res.log.rows)
        std::printf("epoch %2d %-4s mAP %.4f corloc %.4f\n", r.epoch, r.tag.c_str(), r.map,
                    r.corloc);
      std::printf("checkpoint: %s\nrunlog: %s\n", res.checkpoint_path.string().c_str(),
                  res.runlog_path.string().c_str());
    } else if (*eval_cmd) {
      codetect::TrainConfig base;
      if (!ev_config.empty())
        codetect::apply_config(base, codetect::parse_config_file(ev_config));
      const auto outcome = codetect::evaluate(ev_ckpt, ev_data, ev_split, ev_out, base);
      for (const auto& row : outcome.rows)
        std::printf("%s %s %s = %.4f (%s)\n", outcome.split.c_str(), row.tag.c_str(),
                    outcome.metric.c_str(), row.value, row.detections_csv.string().c_str());
    } else if (*plot_cmd) {
      const codetect::RunLog log = codetect::read_runlog_csv(pl_runlog);
      const std::filesystem::path svg(pl_out);
      std::filesystem::path csv = svg;
      csv.replace_extension(".csv");
      if (!codetect::emit_plots(log, svg, csv)) {
        std::fprintf(stderr, "warning: empty run log, nothing to plot\n");
      } else {
        std::printf("chart: %s\ncsv: %s\n", svg.string().c_str(), csv.string().c_str());
      }
    } else if (*gc_cmd) {
      const auto report = codetect::run_gradcheck_suite(gc_instances, gc_seed, &std::cout);
      std::printf("worst relative error over %d instances: %.3g\n", report.instances,
                  report.worst);
      if (report.worst >= 1e-4) {
        std::fprintf(stderr, "error: gradient check failed (>= 1e-4)\n");
        return 2;
      }
    }
  } catch (const codetect::config_error& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 1;
  } catch (const codetect::invalid_input& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
