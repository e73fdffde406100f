#include "affkit/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <optional>
#include <ostream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "affkit/augment.hpp"
#include "affkit/checkpoint.hpp"
#include "affkit/ensemble.hpp"
#include "affkit/error.hpp"
#include "affkit/fileio.hpp"
#include "affkit/gradcheck.hpp"

namespace affkit::cli {

namespace fs = std::filesystem;

namespace {

std::string formats_footer() {
  std::string s = "\nFormats:\n";
  s += "  manifest (format 1): CSV with a header row. lsd: '" + data::manifest_header(data::Task::lsd) + "'.\n";
  s += "    mtl: '" + data::manifest_header(data::Task::mtl) + "'.\n";
  s += "    Image paths are relative to the manifest's directory. Unlabeled: VA -5, expression -1, AU -1.\n";
  s += "  checkpoint (format " + std::to_string(checkpoint::kFormatVersion) +
       "): 'AFKT' magic, little-endian named f32 tensors, key=value metadata.\n";
  s += "Exit status: 0 success, 1 invalid input or usage, 2 I/O failure.\n";
  return s;
}

void write_or_print(const std::string& text, const std::string& path, std::ostream& out) {
  out << text;
  if (!path.empty()) write_file_atomic(path, text);
}

data::Task task_of(const std::string& name) { return data::parse_task(name); }

trainer::Dataset load_dataset(const fs::path& manifest, data::Task task, const data::NormStats& stats,
                              std::size_t input_size) {
  auto records = data::parse_manifest(manifest, task);
  auto images = trainer::load_images(records, manifest.parent_path());
  return trainer::make_dataset(std::move(records), task, images, stats, input_size);
}

std::vector<metrics::MtlPrediction> read_prediction_file(const fs::path& path, data::Task task,
                                                         std::span<const data::SampleRecord> records) {
  const auto rows = data::parse_manifest(path, task);
  if (rows.size() != records.size())
    throw ValidationError(path.string() + ": " + std::to_string(rows.size()) + " predictions for " +
                          std::to_string(records.size()) + " manifest rows");
  std::vector<metrics::MtlPrediction> preds(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const std::string where = path.string() + ": row " + std::to_string(i + 1);
    if (r.image_path != records[i].image_path)
      throw ValidationError(where + ": path " + r.image_path + " does not match manifest path " +
                            records[i].image_path);
    preds[i].expression = r.expression;
    if (task == data::Task::lsd) continue;
    if (!data::va_labeled(r) || r.expression < 0)
      throw ValidationError(where + ": predictions cannot be unlabeled");
    preds[i].valence = r.valence;
    preds[i].arousal = r.arousal;
    for (std::size_t a = 0; a < data::kNumAus; ++a) {
      if (r.aus[a] < 0) throw ValidationError(where + ": predictions cannot be unlabeled");
      preds[i].aus[a] = r.aus[a];
    }
  }
  return preds;
}

metrics::MetricReport score_decisions(data::Task task, std::span<const data::SampleRecord> records,
                                      std::span<const metrics::MtlPrediction> preds) {
  if (task == data::Task::mtl) return metrics::evaluate_mtl(records, preds);
  std::vector<int> labels, cls;
  for (std::size_t i = 0; i < records.size(); ++i) {
    labels.push_back(records[i].expression);
    cls.push_back(preds[i].expression);
  }
  return metrics::evaluate_lsd(labels, cls);
}

std::string key_help(std::string_view key) {
  static const std::vector<std::pair<std::string_view, std::string_view>> help = {
      {"task", "mtl or lsd"},
      {"epochs", "Training epochs"},
      {"batch_size", "Mini-batch size"},
      {"base_lr", "Base learning rate"},
      {"optimizer", "adam or sgd (momentum)"},
      {"momentum", "SGD momentum"},
      {"schedule", "cosine or constant"},
      {"smoothing", "Label smoothing for lsd expression targets"},
      {"class_weights", "Inverse-frequency expression class weights (true/false)"},
      {"seed", "Random seed"},
      {"deviation", "Train a deviation model on a frozen pretrained twin (true/false)"},
      {"pretrained", "Checkpoint that seeds the deviation twin"},
      {"slots", "Output head slots averaged at prediction time"},
      {"input_size", "Network input side in pixels"},
      {"channels", "Backbone conv channels, comma separated"},
      {"feature_dim", "Backbone feature width"},
      {"eval_every", "Evaluate every N epochs"},
      {"out_dir", "Output directory for checkpoints and history"},
      {"val_manifest", "Validation manifest used for model selection"},
      {"resume", "Checkpoint to continue training from"},
      {"keep_snapshots", "Keep a checkpoint per epoch (true/false)"},
  };
  for (const auto& [k, h] : help)
    if (k == key) return std::string(h) + " [" + std::string(key) + "]";
  return "Config key " + std::string(key);
}

std::string option_name(std::string_view key) {
  std::string s(key);
  for (auto& c : s)
    if (c == '_') c = '-';
  return "--" + s;
}

}  // namespace

std::string stats_report(std::span<const data::SampleRecord> records, data::Task task, const data::NormStats& norm) {
  std::string out = "task=" + std::string(data::task_name(task)) + "\n";
  out += "samples=" + std::to_string(records.size()) + "\n";
  const auto dist = data::class_distribution(records, task);
  const auto names = data::class_names(task);
  std::optional<std::vector<double>> weights;
  std::string weight_error;
  try {
    weights = data::expr_class_weights(dist);
  } catch (const ValidationError& e) {
    weight_error = e.what();
  }
  out += "expression_labeled=" + std::to_string(dist.total()) + "\n";
  for (std::size_t c = 0; c < names.size(); ++c) {
    out += "class." + names[c] + ".count=" + std::to_string(dist.counts[c]) + "\n";
    out += "class." + names[c] + ".weight=" + (weights ? format_fixed6((*weights)[c]) : std::string("none")) + "\n";
  }
  if (!weight_error.empty()) out += "warning=" + weight_error + "\n";
  out += "imbalance_ratio=" + format_fixed6(dist.imbalance_ratio()) + "\n";
  out += std::string("imbalanced=") + (dist.imbalance_ratio() > data::kImbalanceFlagRatio ? "yes" : "no") + "\n";
  if (task == data::Task::mtl) {
    std::size_t va = 0;
    for (const auto& r : records) va += data::va_labeled(r);
    out += "va_labeled=" + std::to_string(va) + "\n";
    const auto pw = data::au_pos_weights(records);
    for (std::size_t a = 0; a < data::kNumAus; ++a)
      out += "au." + std::string(data::kAuNames[a]) + ".pos_weight=" + format_fixed6(pw[a]) + "\n";
  }
  out += data::format_norm_stats(norm);
  return out;
}

std::vector<data::SampleRecord> prediction_records(const trainer::Predictions& p,
                                                   std::span<const data::SampleRecord> records) {
  if (records.size() != p.rows)
    throw ValidationError(std::to_string(p.rows) + " predictions for " + std::to_string(records.size()) + " records");
  const auto dec = trainer::decisions(p);
  std::vector<data::SampleRecord> out(p.rows);
  for (std::size_t i = 0; i < p.rows; ++i) {
    out[i].image_path = records[i].image_path;
    out[i].expression = dec[i].expression;
    if (p.task == data::Task::mtl) {
      out[i].valence = dec[i].valence;
      out[i].arousal = dec[i].arousal;
      out[i].aus = dec[i].aus;
    }
  }
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"affkit: multi-task affect recognition toolkit", "affkit"};
  app.footer(formats_footer());
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  int threads = 0;
  app.add_option("--threads", threads, "Worker thread cap (default: available cores)")->check(CLI::NonNegativeNumber);

  // synth
  auto* synth = app.add_subcommand("synth", "Render a synthetic dataset with a manifest");
  synth->footer(formats_footer());
  std::string synth_task = "lsd", synth_out;
  std::uint64_t synth_seed = 0;
  std::size_t synth_per_class = 40, synth_size = 16;
  double synth_dropout = 0.0;
  std::vector<std::size_t> synth_counts;
  synth->add_option("--task", synth_task, "mtl or lsd")->check(CLI::IsMember({"mtl", "lsd"}));
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Random seed");
  synth->add_option("--per-class", synth_per_class, "Images per class");
  synth->add_option("--size", synth_size, "Image side in pixels");
  synth->add_option("--dropout", synth_dropout, "MTL: per-task label dropout probability");
  synth->add_option("--counts", synth_counts, "Per-class counts (overrides --per-class)")->delimiter(',');

  // stats
  auto* stats = app.add_subcommand("stats", "Class counts, weights and normalization statistics");
  stats->footer(formats_footer());
  std::string stats_manifest, stats_task = "lsd", stats_out;
  stats->add_option("--manifest", stats_manifest, "Manifest CSV")->required();
  stats->add_option("--task", stats_task, "mtl or lsd")->check(CLI::IsMember({"mtl", "lsd"}));
  stats->add_option("--out", stats_out, "Report file (also printed)");

  // balance
  auto* balance = app.add_subcommand("balance", "Oversample minority classes with RandAugment copies");
  balance->footer(formats_footer());
  std::string bal_manifest, bal_task = "lsd", bal_out;
  std::uint64_t bal_seed = 0;
  augment::AugmentPolicy policy;
  balance->add_option("--manifest", bal_manifest, "Manifest CSV")->required();
  balance->add_option("--task", bal_task, "mtl or lsd")->check(CLI::IsMember({"mtl", "lsd"}));
  balance->add_option("--out", bal_out, "Output directory for the balanced dataset")->required();
  balance->add_option("--seed", bal_seed, "Random seed for source selection and augmentation");
  balance->add_option("--num-ops", policy.num_ops, "Transforms per copy");
  balance->add_option("--magnitude", policy.magnitude, "Transform magnitude (0-30)");

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  train->footer(formats_footer() +
                "Config file: key=value lines using the option names below with '_' for '-'. Flags win.\n");
  std::string train_manifest, train_config;
  std::vector<std::string> train_sets;
  train->add_option("--manifest", train_manifest, "Training manifest CSV")->required();
  train->add_option("--config", train_config, "Config file");
  train->add_option("--set", train_sets, "Extra key=value override (repeatable)");
  std::vector<std::pair<std::string_view, CLI::Option*>> train_opts;
  std::vector<std::string> train_storage(trainer::config_keys().size());
  for (std::size_t i = 0; i < trainer::config_keys().size(); ++i) {
    const auto key = trainer::config_keys()[i];
    std::string name = key == "out_dir" ? "--out" : option_name(key);
    if (key == "base_lr") name += ",--lr";
    train_opts.emplace_back(key, train->add_option(name, train_storage[i], key_help(key)));
  }

  // eval
  auto* eval = app.add_subcommand("eval", "Score a checkpoint or a predictions file");
  eval->footer(formats_footer() + "Predictions files use the manifest schema of the task.\n");
  std::string ev_manifest, ev_task = "lsd", ev_ckpt, ev_preds_in, ev_preds_out, ev_stats, ev_out;
  eval->add_option("--manifest", ev_manifest, "Labeled manifest CSV")->required();
  eval->add_option("--task", ev_task, "mtl or lsd")->check(CLI::IsMember({"mtl", "lsd"}));
  auto* ev_ck_opt = eval->add_option("--checkpoint", ev_ckpt, "Model checkpoint");
  auto* ev_pi_opt = eval->add_option("--predictions", ev_preds_in, "Score this predictions file instead of a model");
  ev_ck_opt->excludes(ev_pi_opt);
  eval->add_option("--write-predictions", ev_preds_out, "Write the model's decisions here")->needs(ev_ck_opt);
  eval->add_option("--stats-file", ev_stats, "Normalization stats (default: from the checkpoint)");
  eval->add_option("--out", ev_out, "Report file (also printed)");

  // ensemble
  auto* ens = app.add_subcommand("ensemble", "Average several checkpoints and score each and the ensemble");
  ens->footer(formats_footer());
  std::string ens_manifest, ens_stats, ens_out;
  std::vector<std::string> ens_ckpts;
  ens->add_option("--manifest", ens_manifest, "Labeled manifest CSV")->required();
  ens->add_option("--checkpoints,--checkpoint", ens_ckpts, "Member checkpoints, in order")->required()->expected(1, -1);
  ens->add_option("--stats-file", ens_stats, "Normalization stats (default: first member's)");
  ens->add_option("--out", ens_out, "Report file (also printed)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gc->footer(formats_footer());
  std::string gc_suite = "full", gc_out;
  std::uint64_t gc_seed = 0;
  std::vector<std::string> suites(trainer::gradcheck_suites().begin(), trainer::gradcheck_suites().end());
  gc->add_option("--suite", gc_suite, "Suite name")->check(CLI::IsMember(suites));
  gc->add_option("--seed", gc_seed, "Random seed");
  gc->add_option("--out", gc_out, "Report file (also printed)");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitValidation;
  }

#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#endif

  try {
    if (*synth) {
      data::SynthConfig c;
      c.task = task_of(synth_task);
      c.per_class = synth_per_class;
      c.size = synth_size;
      c.seed = synth_seed;
      c.label_dropout = synth_dropout;
      c.counts = synth_counts;
      const auto recs = data::generate_synthetic(synth_out, c);
      out << "wrote " << recs.size() << " samples to " << (fs::path(synth_out) / "manifest.csv").string() << "\n";
    } else if (*stats) {
      const auto task = task_of(stats_task);
      const fs::path manifest = stats_manifest;
      const auto records = data::parse_manifest(manifest, task);
      std::vector<fs::path> paths;
      for (const auto& r : records) paths.push_back(manifest.parent_path() / r.image_path);
      write_or_print(stats_report(records, task, data::normalization_stats(paths)), stats_out, out);
    } else if (*balance) {
      const auto task = task_of(bal_task);
      const fs::path manifest = bal_manifest;
      policy.seed = bal_seed;
      policy.validate();
      const auto records = data::parse_manifest(manifest, task);
      const auto plan = augment::balance_plan(records, task, bal_seed);
      const auto result = augment::materialize(records, task, plan, policy, manifest.parent_path(), bal_out);
      const auto dist = data::class_distribution(result, task);
      const auto names = data::class_names(task);
      out << "samples=" << result.size() << " added=" << plan.copies.size() << "\n";
      for (std::size_t c = 0; c < names.size(); ++c) out << "class." << names[c] << ".count=" << dist.counts[c] << "\n";
    } else if (*train) {
      auto cfg = train_config.empty() ? trainer::TrainConfig{} : trainer::TrainConfig::from_file(train_config);
      for (const auto& s : train_sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + s + "'");
        cfg.set(s.substr(0, eq), s.substr(eq + 1));
      }
      for (std::size_t i = 0; i < train_opts.size(); ++i)
        if (train_opts[i].second->count() > 0) cfg.set(train_opts[i].first, train_storage[i]);
      cfg.validate();
      write_file_atomic(fs::path(cfg.out_dir) / "config.txt", cfg.to_text());
      const auto result = trainer::fit(cfg, train_manifest);
      for (const auto& row : result.history) out << row.to_line() << "\n";
      out << "best_epoch=" << result.best_epoch << " best_score=" << format_fixed6(result.best_score) << "\n";
    } else if (*eval) {
      const auto task = task_of(ev_task);
      const fs::path manifest = ev_manifest;
      metrics::MetricReport report;
      if (!ev_preds_in.empty()) {
        const auto records = data::parse_manifest(manifest, task);
        report = score_decisions(task, records, read_prediction_file(ev_preds_in, task, records));
      } else {
        if (ev_ckpt.empty()) throw ValidationError("eval needs --checkpoint or --predictions");
        const auto ck = checkpoint::load(ev_ckpt);
        const auto m = checkpoint::restore_model(ck);
        if (m.spec.task != task)
          throw ValidationError(ev_ckpt + " holds a " + std::string(data::task_name(m.spec.task)) + " model, not " +
                                ev_task);
        data::NormStats ns;
        if (!ev_stats.empty()) {
          ns = data::parse_norm_stats(read_file_text(ev_stats), ev_stats);
        } else if (auto embedded = checkpoint::restore_norm_stats(ck)) {
          ns = *embedded;
        } else {
          throw ValidationError(ev_ckpt + " carries no normalization stats; pass --stats-file");
        }
        const auto ds = load_dataset(manifest, task, ns, m.spec.backbone.input_size);
        const auto preds = trainer::predict(m, ds);
        if (!ev_preds_out.empty())
          data::write_manifest(ev_preds_out, prediction_records(preds, ds.records), task);
        report = trainer::score(preds, ds.records);
      }
      write_or_print(report.to_text(), ev_out, out);
    } else if (*ens) {
      std::vector<fs::path> paths(ens_ckpts.begin(), ens_ckpts.end());
      const auto set = ensemble::EnsembleSet::load(paths);
      const auto ns =
          ensemble::resolve_stats(set, ens_stats.empty() ? std::nullopt : std::optional<fs::path>(ens_stats));
      const auto ds = load_dataset(ens_manifest, set.task(), ns, set.input_size());
      write_or_print(ensemble::ensemble_evaluate(set, ds).to_text(), ens_out, out);
    } else if (*gc) {
      const auto rep = trainer::gradient_check(gc_suite, gc_seed);
      write_or_print(rep.to_text(), gc_out, out);
      if (!rep.passed()) {
        err << "gradient check failed\n";
        return kExitValidation;
      }
    }
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitOk;
}

}  // namespace affkit::cli
