#include "patchguard/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "patchguard/binary_io.hpp"
#include "patchguard/error.hpp"
#include "patchguard/parallel.hpp"
#include "patchguard/png_io.hpp"
#include "patchguard/text_format.hpp"

namespace patchguard::cli {
namespace fs = std::filesystem;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_config:
    case ErrorKind::dimension_mismatch:
      return kUsage;
    case ErrorKind::numeric_overflow:
      return kNumeric;
    default:
      return kData;
  }
}

Evaluation evaluate(const RunRecord& run, const EmbeddingDataset& dataset, const EvalOptions& options) {
  Detector detector = run.detector;
  if (!options.layers.empty()) {
    if (options.layers.size() != detector.head_count()) {
      throw Error(ErrorKind::invalid_config, "--layer lists " + std::to_string(options.layers.size()) +
                                                 " scales but the run has " +
                                                 std::to_string(detector.head_count()) + " heads");
    }
    detector.scales = options.layers;
  }
  detector.check_compatible(dataset.meta);
  if (dataset.test.empty()) throw Error(ErrorKind::invalid_sample, "archive has no test samples");

  const auto parts = split_train_val(dataset.train, run.meta.split);
  std::vector<const Sample*> all;
  for (const auto& s : parts.val) all.push_back(&s);
  Evaluation ev;
  for (const auto& s : dataset.test) {
    all.push_back(&s);
    ev.test.push_back(&s);
  }
  const std::size_t n_val = parts.val.size();

  std::vector<std::vector<ScoreMap>> raw(all.size());
  parallel_chunks(all.size(), options.threads, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) raw[i] = detector.patch_scores(*all[i]);
  });
  for (std::size_t i = 0; i < raw.size(); ++i) {
    for (const auto& map : raw[i]) {
      if (!std::all_of(map.values.begin(), map.values.end(), [](double v) { return std::isfinite(v); })) {
        throw Error(ErrorKind::numeric_overflow, "sample '" + all[i]->id + "': patch NLL is not finite");
      }
    }
  }

  auto maps = build_anomaly_maps(raw, options.group_size, kImageSize);
  for (std::size_t i = 0; i < n_val; ++i) ev.val_scores.push_back(maps[i].image_score);
  ev.threshold = select_threshold(ev.val_scores, options.threshold, "validation");
  ev.test_maps.assign(std::make_move_iterator(maps.begin() + static_cast<std::ptrdiff_t>(n_val)),
                      std::make_move_iterator(maps.end()));

  auto defined = [](auto&& fn) -> std::optional<double> {
    try {
      return fn();
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::undefined_metric) throw;
      return std::nullopt;
    }
  };

  ScoredSet images;
  for (std::size_t i = 0; i < ev.test.size(); ++i) {
    images.scores.push_back(ev.test_maps[i].image_score);
    images.labels.push_back(ev.test[i]->label == Label::anomalous ? 1 : 0);
  }
  ev.report.image_auroc = defined([&] { return auroc(images); });
  // A single-class test set leaves both image metrics undefined.
  if (ev.report.image_auroc) ev.report.prauc = defined([&] { return prauc(images); });

  std::vector<Grid2D<float>> pixel_maps;
  std::vector<Mask> masks;
  bool masks_complete = true;
  for (std::size_t i = 0; i < ev.test.size(); ++i) {
    const Sample& s = *ev.test[i];
    pixel_maps.push_back(ev.test_maps[i].scores);
    if (s.mask) {
      masks.push_back(*s.mask);
    } else if (s.label == Label::normal) {
      masks.emplace_back(kImageSize, kImageSize, 0);
    } else {
      masks_complete = false;
    }
  }
  if (masks_complete) {
    ev.report.pixel_auroc = defined([&] { return pixel_auroc(pixel_maps, masks); });
    ev.report.pro = defined([&] {
      const auto r = pro_score(pixel_maps, masks);
      ev.report.pro_thresholds = r.threshold_count;
      return r.score;
    });
  }
  return ev;
}

namespace {

std::string metric_text(const std::optional<double>& v) { return v ? text::fixed(*v, 4) : "undefined"; }

void write_text(const fs::path& path, const std::string& content) {
  binary::write_file(path, std::as_bytes(std::span(content)));
}

std::vector<std::size_t> parse_index_list(const std::string& list, const std::string& flag) {
  std::vector<std::size_t> out;
  std::istringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto v = text::parse_u64(text::trim(item));
    if (!v) throw Error(ErrorKind::invalid_config, flag + " expects a comma-separated index list, got '" + list + "'");
    out.push_back(*v);
  }
  return out;
}

std::vector<std::string> split_list(const std::string& list) {
  std::vector<std::string> out;
  std::istringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto t = text::trim(item);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

std::size_t resolve_threads(std::size_t flag) {
  std::size_t threads = flag ? flag : worker_threads();
  if (std::getenv("PATCHGUARD_THREADS")) threads = std::min(threads, worker_threads());
  return threads;
}

// Replaces "--config FILE" with one "--key=value" token per line of FILE,
// placed directly after the subcommand so later flags take precedence.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
      break;
    }
    if (args[i].starts_with("--config=")) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (!path) return args;

  std::ifstream in(*path);
  if (!in) throw Error(ErrorKind::invalid_config, "cannot read config file '" + *path + "'");
  std::vector<std::string> injected;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto t = text::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) {
      throw Error(ErrorKind::invalid_config, *path + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key(text::trim(t.substr(0, eq)));
    std::string value(text::trim(t.substr(eq + 1)));
    std::replace(key.begin(), key.end(), '_', '-');
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front()) {
      value = value.substr(1, value.size() - 2);
    }
    injected.push_back("--" + key + "=" + value);
  }
  const std::size_t at = !args.empty() && !args[0].starts_with("-") ? 1 : 0;
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(at), injected.begin(), injected.end());
  return args;
}

struct TrainFlags {
  std::string archive;
  std::string out;
  std::string head = "gmm";
  std::string layers;
  std::uint64_t seed = 0;
  std::uint64_t head_seed = 0, train_seed = 0, split_seed = 0;
  std::size_t dim = 0;
  HeadOptions head_options;
  TrainConfig train;
  double train_fraction = 0.8;
  std::size_t threads = 0;
  bool verbose = false;
  std::string config;

  CLI::Option* head_seed_opt = nullptr;
  CLI::Option* train_seed_opt = nullptr;
  CLI::Option* split_seed_opt = nullptr;
  CLI::Option* lr_opt = nullptr;
  CLI::Option* wd_opt = nullptr;
  CLI::Option* batch_opt = nullptr;
};

void add_train_flags(CLI::App* app, TrainFlags& f) {
  app->add_option("--config", f.config, "Flat 'key = value' file of flags; command-line flags override it");
  app->add_option("--archive", f.archive, "Embedding archive (PEA1)")->required();
  app->add_option("--head", f.head, "Head kind")->check(CLI::IsMember({"gmm", "nf"}))->capture_default_str();
  app->add_option("--layer", f.layers, "Comma-separated archive scale per head (default: every scale)");
  app->add_option("--dim", f.dim, "Expected embedding dimension; fails if the archive differs");
  app->add_option("--seed", f.seed, "Base seed for head init, batch order and the split")->capture_default_str();
  f.head_seed_opt = app->add_option("--head-seed", f.head_seed, "Head init seed (default: --seed)");
  f.train_seed_opt = app->add_option("--train-seed", f.train_seed, "Batch-order seed (default: --seed)");
  f.split_seed_opt = app->add_option("--split-seed", f.split_seed, "Train/validation split seed (default: --seed)");
  app->add_option("--gaussians", f.head_options.num_gaussians, "GMM mixture components")->capture_default_str();
  app->add_option("--steps", f.head_options.flow_steps, "Flow coupling steps")->capture_default_str();
  app->add_option("--hidden-ratio", f.head_options.hidden_ratio, "Flow subnet width / D")->capture_default_str();
  app->add_option("--clamp-alpha", f.head_options.clamp_alpha, "Flow soft-clamp bound")->capture_default_str();
  f.lr_opt = app->add_option("--lr", f.train.learning_rate, "Learning rate (default: 1e-4 gmm, 1e-3 nf)");
  f.wd_opt = app->add_option("--wd", f.train.weight_decay, "Weight decay (default: 1e-4 gmm, 1e-5 nf)");
  f.batch_opt = app->add_option("--batch-size", f.train.batch_size, "Batch size (default: 8 gmm, 32 nf)");
  app->add_option("--epochs", f.train.max_epochs, "Maximum epochs")->capture_default_str();
  app->add_option("--patience", f.train.patience, "Early-stopping patience in epochs")->capture_default_str();
  app->add_option("--train-fraction", f.train_fraction, "Share of train samples kept for fitting")
      ->capture_default_str();
  app->add_option("--threads", f.threads, "Worker threads (default: hardware; capped by PATCHGUARD_THREADS)");
  app->add_flag("--verbose", f.verbose, "Print per-epoch losses");
}

struct PreparedRun {
  HeadKind kind;
  RunMeta meta;
  std::vector<std::size_t> scales;
  std::size_t threads = 1;
};

PreparedRun prepare(const TrainFlags& f, const EmbeddingDataset& dataset) {
  PreparedRun p;
  p.kind = parse_head_kind(f.head);
  p.threads = resolve_threads(f.threads);

  auto& m = p.meta;
  m.archive = f.archive;
  m.dataset_hash = archive_hash(f.archive);
  m.backbone = dataset.meta.backbone;
  m.head = f.head_options;
  m.head.seed = f.head_seed_opt->count() ? f.head_seed : f.seed;
  m.train = TrainConfig::defaults_for(p.kind);
  if (f.lr_opt->count()) m.train.learning_rate = f.train.learning_rate;
  if (f.wd_opt->count()) m.train.weight_decay = f.train.weight_decay;
  if (f.batch_opt->count()) m.train.batch_size = f.train.batch_size;
  m.train.max_epochs = f.train.max_epochs;
  m.train.patience = f.train.patience;
  m.train.seed = f.train_seed_opt->count() ? f.train_seed : f.seed;
  m.split.seed = f.split_seed_opt->count() ? f.split_seed : f.seed;
  m.split.train_fraction = f.train_fraction;
  m.threads = p.threads;
  m.train.validate();
  if (!(f.train_fraction > 0.0 && f.train_fraction < 1.0)) {
    throw Error(ErrorKind::invalid_config, "--train-fraction must lie in (0, 1)");
  }

  if (f.layers.empty()) {
    p.scales.resize(dataset.meta.scales.size());
    std::iota(p.scales.begin(), p.scales.end(), std::size_t{0});
  } else {
    p.scales = parse_index_list(f.layers, "--layer");
  }
  for (auto s : p.scales) {
    if (s >= dataset.meta.scales.size()) {
      throw Error(ErrorKind::invalid_config, "--layer " + std::to_string(s) + " is out of range; archive has " +
                                                 std::to_string(dataset.meta.scales.size()) + " scales");
    }
    if (f.dim && dataset.meta.scales[s].channels != f.dim) {
      throw Error(ErrorKind::dimension_mismatch, "expected D=" + std::to_string(f.dim) + " but archive scale " +
                                                     std::to_string(s) + " has D=" +
                                                     std::to_string(dataset.meta.scales[s].channels));
    }
  }
  return p;
}

RunRecord train_run(const PreparedRun& p, const EmbeddingDataset& dataset, bool verbose, std::ostream& out) {
  auto detector = Detector::create(p.kind, dataset.meta, p.scales, p.meta.head);
  EpochCallback progress;
  if (verbose) {
    progress = [&](std::size_t epoch, double tl, double vl) {
      out << "epoch " << epoch << " train_loss " << text::shortest(tl) << " val_loss " << text::shortest(vl) << "\n";
    };
  }
  auto result = train(std::move(detector), dataset, p.meta.split, p.meta.train, p.threads, progress);
  return RunRecord{std::move(result.detector), std::move(result.history), p.meta};
}

struct EvalFlags {
  std::string run_dir;
  std::string archive;
  std::string out;
  std::string threshold = "quantile(0.99)";
  std::string dataset_class;
  std::string layers;
  bool per_batch = false;
  std::size_t batch_size = 0;
  std::size_t threads = 0;
  std::string config;
};

void add_eval_flags(CLI::App* app, EvalFlags& f, const char* out_help) {
  app->add_option("--config", f.config, "Flat 'key = value' file of flags; command-line flags override it");
  app->add_option("--run", f.run_dir, "Run directory written by train")->required();
  app->add_option("--archive", f.archive, "Embedding archive (default: the one recorded in run.meta)");
  app->add_option("--out", f.out, out_help);
  app->add_option("--threshold", f.threshold, "max, quantile or quantile(q) of validation image scores")
      ->capture_default_str();
  app->add_option("--layer", f.layers, "Comma-separated archive scale per head (default: the trained scales)");
  app->add_flag("--per-batch", f.per_batch, "Normalize scores per batch instead of over the whole set");
  app->add_option("--batch-size", f.batch_size, "Batch size for --per-batch (default: the training batch size)");
  app->add_option("--threads", f.threads, "Worker threads (default: hardware; capped by PATCHGUARD_THREADS)");
}

struct LoadedEval {
  RunRecord run;
  EmbeddingDataset dataset;
  fs::path archive;
  fs::path out;
  Evaluation ev;
};

LoadedEval load_and_evaluate(const EvalFlags& f, std::ostream& err) {
  LoadedEval l;
  l.run = load_run(f.run_dir);
  l.archive = f.archive.empty() ? fs::path(l.run.meta.archive) : fs::path(f.archive);
  l.dataset = load_archive(l.archive);
  if (archive_hash(l.archive) != l.run.meta.dataset_hash) {
    err << "note: " << l.archive.string() << " differs from the archive the run was trained on\n";
  }
  l.out = f.out.empty() ? fs::path(f.run_dir) : fs::path(f.out);
  EvalOptions options;
  options.threshold = parse_threshold_strategy(f.threshold);
  if (f.per_batch) options.group_size = f.batch_size ? f.batch_size : l.run.meta.train.batch_size;
  if (!f.layers.empty()) options.layers = parse_index_list(f.layers, "--layer");
  options.threads = resolve_threads(f.threads);
  l.ev = evaluate(l.run, l.dataset, options);
  return l;
}

std::string scores_csv(const Evaluation& ev) {
  std::string csv = "id,image_score,label,prediction\n";
  for (std::size_t i = 0; i < ev.test.size(); ++i) {
    const float score = ev.test_maps[i].image_score;
    csv += ev.test[i]->id + "," + text::shortest(score) + "," +
           (ev.test[i]->label == Label::anomalous ? "anomalous" : "normal") + "," +
           (classify(score, ev.threshold) == Label::anomalous ? "anomalous" : "normal") + "\n";
  }
  return csv;
}

std::string metrics_csv(const LoadedEval& l, const std::string& dataset_class) {
  const auto& r = l.ev.report;
  const std::string name = dataset_class.empty() ? l.archive.stem().string() : dataset_class;
  return "dataset_class,head,backbone,image_auroc,prauc,pixel_auroc,pro,threshold,n_test\n" + name + "," +
         std::string(to_string(l.run.detector.kind)) + "," + l.dataset.meta.backbone + "," +
         metric_text(r.image_auroc) + "," + metric_text(r.prauc) + "," + metric_text(r.pixel_auroc) + "," +
         metric_text(r.pro) + "," + text::fixed(l.ev.threshold.value, 4) + "," + std::to_string(l.ev.test.size()) +
         "\n";
}

std::string file_stem_for(const std::string& id) {
  std::string out = id;
  for (auto& c : out) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' ||
                    c == '_' || c == '.';
    if (!ok) c = '_';
  }
  return out;
}

int cmd_train(const TrainFlags& f, std::ostream& out) {
  if (f.out.empty()) throw Error(ErrorKind::invalid_config, "train needs --out");
  const auto dataset = load_archive(f.archive);
  const auto p = prepare(f, dataset);
  const auto run = train_run(p, dataset, f.verbose, out);
  save_run(run, f.out);
  out << "trained " << to_string(p.kind) << " head(s) on " << p.scales.size() << " scale(s): best epoch "
      << run.history.best_epoch << " of " << run.history.stopped_epoch << ", val_loss "
      << text::shortest(run.history.best_val_loss()) << "\n"
      << "run directory: " << f.out << "\n";
  return kOk;
}

int cmd_eval(const EvalFlags& f, const std::string& dataset_class, std::ostream& out, std::ostream& err) {
  const auto l = load_and_evaluate(f, err);
  fs::create_directories(l.out);
  write_text(l.out / "metrics.csv", metrics_csv(l, dataset_class));
  write_text(l.out / "scores.csv", scores_csv(l.ev));
  const auto& r = l.ev.report;
  out << "image_auroc " << metric_text(r.image_auroc) << "\n"
      << "prauc       " << metric_text(r.prauc) << "\n"
      << "pixel_auroc " << metric_text(r.pixel_auroc) << "\n"
      << "pro         " << metric_text(r.pro) << "\n"
      << "threshold   " << text::fixed(l.ev.threshold.value, 4) << " (" << to_string(l.ev.threshold.strategy)
      << " of " << l.ev.val_scores.size() << " validation scores)\n";
  return kOk;
}

int cmd_score(const EvalFlags& f, std::ostream& out, std::ostream& err) {
  const auto l = load_and_evaluate(f, err);
  fs::create_directories(l.out);
  write_text(l.out / "scores.csv", scores_csv(l.ev));
  out << "scored " << l.ev.test.size() << " test images, threshold " << text::fixed(l.ev.threshold.value, 4) << "\n";
  return kOk;
}

int cmd_export_maps(const EvalFlags& f, std::ostream& out, std::ostream& err) {
  if (f.out.empty()) throw Error(ErrorKind::invalid_config, "export-maps needs --out");
  const auto l = load_and_evaluate(f, err);
  fs::create_directories(l.out);
  for (std::size_t i = 0; i < l.ev.test.size(); ++i) {
    write_png_gray(l.out / (file_stem_for(l.ev.test[i]->id) + ".png"), to_gray_image(l.ev.test_maps[i].scores));
  }
  write_text(l.out / "scores.csv", scores_csv(l.ev));
  out << "wrote " << l.ev.test.size() << " maps to " << l.out.string() << "\n";
  return kOk;
}

int cmd_inspect(const std::string& archive, std::ostream& out) {
  const auto ds = load_archive(archive);
  std::size_t anomalous = 0, masks = 0;
  for (const auto& s : ds.test) {
    anomalous += s.label == Label::anomalous;
    masks += s.mask.has_value();
  }
  out << "archive     " << archive << "\n"
      << "hash        0x" << std::hex << archive_hash(archive) << std::dec << "\n"
      << "backbone    " << ds.meta.backbone << "\n"
      << "image_size  " << ds.meta.image_size << "\n"
      << "scales      " << ds.meta.scales.size() << "\n";
  for (std::size_t s = 0; s < ds.meta.scales.size(); ++s) {
    out << "  [" << s << "] " << to_string(ds.meta.scales[s]) << "\n";
  }
  out << "train       " << ds.train.size() << "\n"
      << "test        " << ds.test.size() << " (" << ds.test.size() - anomalous << " normal, " << anomalous
      << " anomalous, " << masks << " masks)\n";
  return kOk;
}

struct SweepFlags {
  std::string param;
  std::string values;
  std::string threshold = "quantile(0.99)";
};

int cmd_sweep(const TrainFlags& f, const SweepFlags& s, std::ostream& out) {
  if (f.out.empty()) throw Error(ErrorKind::invalid_config, "sweep needs --out");
  const auto values = split_list(s.values);
  if (values.empty()) throw Error(ErrorKind::invalid_config, "--values is empty");
  const auto dataset = load_archive(f.archive);
  const auto base = prepare(f, dataset);
  if ((s.param == "num-gaussians" && base.kind != HeadKind::gmm) ||
      ((s.param == "flow-steps" || s.param == "hidden-ratio") && base.kind != HeadKind::nf)) {
    throw Error(ErrorKind::invalid_config, "sweep parameter '" + s.param + "' does not apply to the " +
                                               std::string(to_string(base.kind)) + " head");
  }
  EvalOptions eval_options;
  eval_options.threshold = parse_threshold_strategy(s.threshold);
  eval_options.threads = base.threads;

  const fs::path root(f.out);
  fs::create_directories(root);
  std::string csv = "value,val_loss,image_auroc,prauc,pixel_auroc,pro,threshold\n";
  std::vector<double> losses, pros;
  for (std::size_t i = 0; i < values.size(); ++i) {
    PreparedRun p = base;
    const auto& v = values[i];
    auto bad = [&] { return Error(ErrorKind::invalid_config, "bad value '" + v + "' for " + s.param); };
    if (s.param == "num-gaussians") {
      const auto x = text::parse_u64(v);
      if (!x) throw bad();
      p.meta.head.num_gaussians = *x;
    } else if (s.param == "flow-steps") {
      const auto x = text::parse_u64(v);
      if (!x) throw bad();
      p.meta.head.flow_steps = *x;
    } else if (s.param == "hidden-ratio") {
      const auto x = text::parse_float(v);
      if (!x) throw bad();
      p.meta.head.hidden_ratio = *x;
    } else {
      const auto x = text::parse_double(v);
      if (!x) throw bad();
      p.meta.train.learning_rate = *x;
    }
    p.meta.head.seed += i;
    p.meta.train.seed += i;

    char name[32];
    std::snprintf(name, sizeof name, "run_%03zu", i);
    const auto run = train_run(p, dataset, f.verbose, out);
    save_run(run, root / name);
    const auto ev = evaluate(run, dataset, eval_options);
    LoadedEval l{run, {}, fs::path(f.archive), root / name, ev};
    l.dataset.meta = dataset.meta;
    write_text(root / name / "metrics.csv", metrics_csv(l, {}));
    write_text(root / name / "scores.csv", scores_csv(ev));

    const auto& r = ev.report;
    const double loss = run.history.best_val_loss();
    csv += v + "," + text::shortest(loss) + "," + metric_text(r.image_auroc) + "," + metric_text(r.prauc) + "," +
           metric_text(r.pixel_auroc) + "," + metric_text(r.pro) + "," + text::fixed(ev.threshold.value, 4) + "\n";
    if (r.pro) {
      losses.push_back(loss);
      pros.push_back(*r.pro);
    }
    out << s.param << " = " << v << ": val_loss " << text::shortest(loss) << ", pro " << metric_text(r.pro) << "\n";
  }
  write_text(root / "sweep.csv", csv);

  std::string rho = "undefined";
  try {
    rho = text::fixed(spearman(losses, pros), 4);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::undefined_metric) throw;
  }
  write_text(root / "sweep_summary.txt", "parameter = " + s.param + "\nruns = " + std::to_string(values.size()) +
                                             "\nspearman_val_loss_pro = " + rho + "\n");
  out << "rank correlation of val_loss and pro: " << rho << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Patch-embedding anomaly detection: train and evaluate GMM and normalizing-flow heads"};
  app.name("patchguard");
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train a head on an archive and write a run directory");
  add_train_flags(train_cmd, train_flags);
  train_cmd->add_option("--out", train_flags.out, "Run directory to write")->required();

  EvalFlags eval_flags;
  auto* eval_cmd = app.add_subcommand("eval", "Compute metrics.csv and scores.csv for a run");
  add_eval_flags(eval_cmd, eval_flags, "Output directory (default: the run directory)");
  std::string dataset_class;
  eval_cmd->add_option("--class", dataset_class, "dataset_class column (default: archive file stem)");

  EvalFlags score_flags;
  auto* score_cmd = app.add_subcommand("score", "Write image scores and predictions for the test split");
  add_eval_flags(score_cmd, score_flags, "Output directory (default: the run directory)");

  EvalFlags export_flags;
  auto* export_cmd = app.add_subcommand("export-maps", "Write one grayscale PNG anomaly map per test image");
  add_eval_flags(export_cmd, export_flags, "Output directory for the PNGs and scores.csv");

  TrainFlags sweep_train;
  SweepFlags sweep_flags;
  auto* sweep_cmd = app.add_subcommand("sweep", "Train and evaluate one run per parameter value");
  add_train_flags(sweep_cmd, sweep_train);
  sweep_cmd->add_option("--out", sweep_train.out, "Directory for the runs and sweep.csv")->required();
  sweep_cmd->add_option("--param", sweep_flags.param, "Parameter to vary")
      ->required()
      ->check(CLI::IsMember({"num-gaussians", "flow-steps", "hidden-ratio", "learning-rate"}));
  sweep_cmd->add_option("--values", sweep_flags.values, "Comma-separated values")->required();
  sweep_cmd->add_option("--threshold", sweep_flags.threshold, "Threshold strategy for evaluation")
      ->capture_default_str();

  std::string inspect_archive;
  auto* inspect_cmd = app.add_subcommand("inspect", "Print archive metadata");
  inspect_cmd->add_option("archive", inspect_archive, "Embedding archive")->required();

  try {
    auto args = expand_config(raw_args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  }

  try {
    if (*train_cmd) return cmd_train(train_flags, out);
    if (*eval_cmd) return cmd_eval(eval_flags, dataset_class, out, err);
    if (*score_cmd) return cmd_score(score_flags, out, err);
    if (*export_cmd) return cmd_export_maps(export_flags, out, err);
    if (*sweep_cmd) return cmd_sweep(sweep_train, sweep_flags, out);
    if (*inspect_cmd) return cmd_inspect(inspect_archive, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace patchguard::cli
