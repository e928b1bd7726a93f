#include "patchguard/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "patchguard/binary_io.hpp"
#include "patchguard/error.hpp"
#include "patchguard/rng.hpp"
#include "patchguard/text_format.hpp"

namespace patchguard {
namespace {

constexpr int kRunFormatVersion = 1;

std::vector<const PatchGrid*> grids_at(std::span<const Sample* const> samples, std::size_t scale) {
  std::vector<const PatchGrid*> out;
  out.reserve(samples.size());
  for (const auto* s : samples) out.push_back(&s->grids.at(scale));
  return out;
}

std::string join(const std::vector<std::size_t>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(values[i]);
  }
  return out;
}

}  // namespace

std::string_view to_string(HeadKind kind) { return kind == HeadKind::gmm ? "gmm" : "nf"; }

HeadKind parse_head_kind(std::string_view text) {
  if (text == "gmm") return HeadKind::gmm;
  if (text == "nf") return HeadKind::nf;
  throw Error(ErrorKind::invalid_config, "head must be 'gmm' or 'nf', got '" + std::string(text) + "'");
}

TrainConfig TrainConfig::defaults_for(HeadKind kind) {
  TrainConfig c;
  if (kind == HeadKind::gmm) {
    c.learning_rate = 1e-4;
    c.weight_decay = 1e-4;
    c.batch_size = 8;
  } else {
    c.learning_rate = 1e-3;
    c.weight_decay = 1e-5;
    c.batch_size = 32;
  }
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorKind::invalid_config, "learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw Error(ErrorKind::invalid_config, "weight decay must be non-negative");
  if (batch_size == 0) throw Error(ErrorKind::invalid_config, "batch size must be positive");
  if (max_epochs == 0) throw Error(ErrorKind::invalid_config, "max epochs must be positive");
  if (patience == 0 || patience >= max_epochs) {
    throw Error(ErrorKind::invalid_config, "patience must lie in [1, max epochs)");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw Error(ErrorKind::invalid_config, "Adam betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw Error(ErrorKind::invalid_config, "Adam epsilon must be positive");
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const TrainConfig& config) {
  if (params.size() != grads.size()) {
    throw Error(ErrorKind::dimension_mismatch, "parameter and gradient sizes differ");
  }
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  const double lr = config.learning_rate, decay = config.learning_rate * config.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + config.eps) + decay * params[i];
  }
}

Detector Detector::create(HeadKind kind, const DatasetMeta& meta, std::vector<std::size_t> scales,
                          const HeadOptions& options) {
  if (scales.empty()) throw Error(ErrorKind::invalid_config, "a detector needs at least one scale");
  Detector d;
  d.kind = kind;
  d.scales = std::move(scales);
  for (std::size_t i = 0; i < d.scales.size(); ++i) {
    const std::size_t s = d.scales[i];
    if (s >= meta.scales.size()) {
      throw Error(ErrorKind::invalid_config, "scale " + std::to_string(s) + " requested but the archive has " +
                                                 std::to_string(meta.scales.size()));
    }
    const auto& shape = meta.scales[s];
    if (kind == HeadKind::gmm) {
      d.gmm.push_back(init_gmm({shape.channels, options.num_gaussians, options.seed + i}));
    } else {
      FlowConfig fc;
      fc.dim = shape.channels;
      fc.height = shape.height;
      fc.width = shape.width;
      fc.num_steps = options.flow_steps;
      fc.hidden_ratio = options.hidden_ratio;
      fc.clamp_alpha = options.clamp_alpha;
      fc.seed = options.seed + i;
      d.flows.push_back(init_flow(fc));
    }
  }
  return d;
}

std::size_t Detector::parameter_count() const {
  std::size_t n = 0;
  for (const auto& h : gmm) n += h.params.size();
  for (const auto& h : flows) n += h.params.size();
  return n;
}

std::vector<std::span<double>> Detector::parameter_blocks() {
  std::vector<std::span<double>> out;
  for (auto& h : gmm) out.emplace_back(h.params);
  for (auto& h : flows) out.emplace_back(h.params);
  return out;
}

void Detector::check_compatible(const DatasetMeta& meta) const {
  for (std::size_t i = 0; i < scales.size(); ++i) {
    const std::size_t s = scales[i];
    if (s >= meta.scales.size()) {
      throw Error(ErrorKind::dimension_mismatch, "head " + std::to_string(i) + " uses scale " +
                                                     std::to_string(s) + " but the archive has " +
                                                     std::to_string(meta.scales.size()) + " scales");
    }
    const auto& shape = meta.scales[s];
    if (kind == HeadKind::gmm) {
      if (gmm[i].dim != shape.channels) {
        throw Error(ErrorKind::dimension_mismatch,
                    "GMM head " + std::to_string(i) + " expects D=" + std::to_string(gmm[i].dim) +
                        " but archive scale " + std::to_string(s) + " has D=" + std::to_string(shape.channels));
      }
    } else {
      const auto& c = flows[i].config;
      const GridShape want{static_cast<std::uint32_t>(c.height), static_cast<std::uint32_t>(c.width),
                           static_cast<std::uint32_t>(c.dim)};
      if (want != shape) {
        throw Error(ErrorKind::dimension_mismatch, "flow head " + std::to_string(i) + " expects " +
                                                       to_string(want) + " but archive scale " +
                                                       std::to_string(s) + " is " + to_string(shape));
      }
    }
  }
}

double Detector::mean_nll(std::span<const Sample* const> samples, std::size_t threads) const {
  double total = 0.0;
  for (std::size_t i = 0; i < head_count(); ++i) {
    const auto grids = grids_at(samples, scales[i]);
    total += kind == HeadKind::gmm ? gmm_mean_nll(gmm[i], grids, threads)
                                   : flow_mean_nll(flows[i], grids, threads);
  }
  return total / static_cast<double>(head_count());
}

double Detector::loss_and_grad(std::span<const Sample* const> samples,
                               std::vector<std::vector<double>>& grads, std::size_t threads) const {
  grads.resize(head_count());
  const double inv_heads = 1.0 / static_cast<double>(head_count());
  double total = 0.0;
  for (std::size_t i = 0; i < head_count(); ++i) {
    const auto grids = grids_at(samples, scales[i]);
    if (kind == HeadKind::gmm) {
      grads[i].resize(gmm[i].params.size());
      total += gmm_loss_and_grad(gmm[i], grids, grads[i], threads);
    } else {
      grads[i].resize(flows[i].params.size());
      total += flow_loss_and_grad(flows[i], grids, grads[i], threads);
    }
    if (head_count() > 1) {
      for (double& g : grads[i]) g *= inv_heads;
    }
  }
  return total * inv_heads;
}

std::vector<ScoreMap> Detector::patch_scores(const Sample& sample) const {
  std::vector<ScoreMap> out;
  for (std::size_t i = 0; i < head_count(); ++i) {
    const auto& grid = sample.grids.at(scales[i]);
    out.push_back(kind == HeadKind::gmm ? gmm_patch_scores(gmm[i], grid)
                                        : flow_nll(flow_forward(flows[i], grid)));
  }
  return out;
}

void Detector::round_to_f32() {
  for (auto block : parameter_blocks())
    for (double& v : block) v = static_cast<float>(v);
}

std::vector<std::byte> Detector::encode_checkpoint() const {
  binary::Writer w;
  for (const auto& h : gmm) write_gmm(w, h);
  for (const auto& h : flows) write_flow(w, h);
  return w.take();
}

Detector Detector::decode_checkpoint(std::span<const std::byte> bytes, std::vector<std::size_t> scales) {
  binary::Reader r(bytes, ErrorKind::format);
  if (bytes.size() < 4) throw Error(ErrorKind::format, "checkpoint is too short to hold a head");
  const std::string magic(reinterpret_cast<const char*>(bytes.data()), 4);
  Detector d;
  d.scales = std::move(scales);
  if (magic == "GMMH") {
    d.kind = HeadKind::gmm;
    while (!r.at_end()) d.gmm.push_back(read_gmm(r));
  } else if (magic == "NFH1") {
    d.kind = HeadKind::nf;
    while (!r.at_end()) d.flows.push_back(read_flow(r));
  } else {
    throw Error(ErrorKind::format, "unknown checkpoint magic '" + magic + "'");
  }
  const std::size_t heads = d.gmm.size() + d.flows.size();
  if (heads != d.scales.size()) {
    throw Error(ErrorKind::format, "checkpoint holds " + std::to_string(heads) + " heads, run metadata lists " +
                                       std::to_string(d.scales.size()) + " scales");
  }
  return d;
}

double TrainHistory::best_val_loss() const {
  if (best_epoch == 0 || best_epoch > val_loss.size()) return initial_val_loss;
  return val_loss[best_epoch - 1];
}

bool EarlyStopping::observe(std::size_t epoch, double val_loss) {
  if (val_loss < best_) {
    best_ = val_loss;
    best_epoch_ = epoch;
    return true;
  }
  return false;
}

TrainResult train(Detector detector, const EmbeddingDataset& dataset, const SplitSpec& split,
                  const TrainConfig& config, std::size_t threads, const EpochCallback& on_epoch) {
  config.validate();
  if (dataset.train.empty()) throw Error(ErrorKind::cannot_split, "dataset has no training samples");
  detector.check_compatible(dataset.meta);

  const auto parts = split_train_val(dataset.train, split);
  std::vector<const Sample*> train_set, val_set;
  for (const auto& s : parts.train) train_set.push_back(&s);
  for (const auto& s : parts.val) val_set.push_back(&s);

  TrainResult result{detector, {}};
  TrainHistory& history = result.history;
  std::size_t epoch = 0;
  auto guarded = [&](auto&& fn) {
    try {
      return fn();
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::numeric_overflow) throw;
      throw Error(ErrorKind::numeric_overflow, "epoch " + std::to_string(epoch) + ": " + e.what());
    }
  };
  auto check_loss = [&](double loss, const char* what) {
    if (!std::isfinite(loss)) {
      throw Error(ErrorKind::numeric_overflow,
                  "epoch " + std::to_string(epoch) + ": " + what + " loss is not finite");
    }
  };

  history.initial_val_loss = guarded([&] { return detector.mean_nll(val_set, threads); });
  check_loss(history.initial_val_loss, "initial validation");

  Xorshift64 rng(config.seed);
  std::vector<AdamState> adam(detector.head_count());
  std::vector<std::vector<double>> grads;
  EarlyStopping stopping(config.patience);
  std::vector<std::size_t> order(train_set.size());
  std::vector<const Sample*> batch;

  for (epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span(order));
    double weighted = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      batch.clear();
      for (std::size_t i = begin; i < end; ++i) batch.push_back(train_set[order[i]]);
      const double loss = guarded([&] { return detector.loss_and_grad(batch, grads, threads); });
      check_loss(loss, "training");
      weighted += loss * static_cast<double>(end - begin);
      auto blocks = detector.parameter_blocks();
      for (std::size_t h = 0; h < blocks.size(); ++h) adam_step(blocks[h], grads[h], adam[h], config);
    }
    // Every sample of a scale has the same patch count, so weighting batches
    // by sample count gives the mean per-patch loss.
    const double train_loss = weighted / static_cast<double>(order.size());
    const double val_loss = guarded([&] { return detector.mean_nll(val_set, threads); });
    check_loss(val_loss, "validation");
    history.train_loss.push_back(train_loss);
    history.val_loss.push_back(val_loss);
    history.stopped_epoch = epoch;
    if (on_epoch) on_epoch(epoch, train_loss, val_loss);
    if (stopping.observe(epoch, val_loss)) result.detector = detector;
    if (stopping.should_stop(epoch)) break;
  }
  history.best_epoch = stopping.best_epoch();
  result.detector.round_to_f32();
  return result;
}

// run.meta is flat "key = value" text.
void save_run(const RunRecord& run, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& m = run.meta;
  const auto& h = run.history;
  std::ostringstream meta;
  meta << "format_version = " << kRunFormatVersion << "\n"
       << "archive = " << m.archive << "\n"
       << "dataset_hash = 0x" << std::hex << m.dataset_hash << std::dec << "\n"
       << "backbone = " << m.backbone << "\n"
       << "head = " << to_string(run.detector.kind) << "\n"
       << "scales = " << join(run.detector.scales) << "\n"
       << "num_gaussians = " << m.head.num_gaussians << "\n"
       << "flow_steps = " << m.head.flow_steps << "\n"
       << "hidden_ratio = " << text::shortest(m.head.hidden_ratio) << "\n"
       << "clamp_alpha = " << text::shortest(m.head.clamp_alpha) << "\n"
       << "head_seed = " << m.head.seed << "\n"
       << "learning_rate = " << text::shortest(m.train.learning_rate) << "\n"
       << "weight_decay = " << text::shortest(m.train.weight_decay) << "\n"
       << "batch_size = " << m.train.batch_size << "\n"
       << "max_epochs = " << m.train.max_epochs << "\n"
       << "patience = " << m.train.patience << "\n"
       << "train_seed = " << m.train.seed << "\n"
       << "adam_beta1 = " << text::shortest(m.train.beta1) << "\n"
       << "adam_beta2 = " << text::shortest(m.train.beta2) << "\n"
       << "adam_eps = " << text::shortest(m.train.eps) << "\n"
       << "split_seed = " << m.split.seed << "\n"
       << "train_fraction = " << text::shortest(m.split.train_fraction) << "\n"
       << "threads = " << m.threads << "\n"
       << "initial_val_loss = " << text::shortest(h.initial_val_loss) << "\n"
       << "best_epoch = " << h.best_epoch << "\n"
       << "stopped_epoch = " << h.stopped_epoch << "\n"
       << "best_val_loss = " << text::shortest(h.best_val_loss()) << "\n";
  const auto meta_text = meta.str();
  binary::write_file(dir / "run.meta", std::as_bytes(std::span(meta_text)));

  std::string csv = "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < h.val_loss.size(); ++e) {
    csv += std::to_string(e + 1) + "," + text::shortest(h.train_loss[e]) + "," + text::shortest(h.val_loss[e]) + "\n";
  }
  binary::write_file(dir / "history.csv", std::as_bytes(std::span(csv)));
  binary::write_file(dir / "best.ckpt", run.detector.encode_checkpoint());
}

RunRecord load_run(const std::filesystem::path& dir) {
  const auto meta_bytes = binary::read_file(dir / "run.meta");
  std::map<std::string, std::string, std::less<>> kv;
  {
    std::istringstream in(std::string(reinterpret_cast<const char*>(meta_bytes.data()), meta_bytes.size()));
    std::string line;
    while (std::getline(in, line)) {
      const auto t = text::trim(line);
      if (t.empty() || t.front() == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string_view::npos) throw Error(ErrorKind::format, "run.meta line without '=': " + line);
      kv[std::string(text::trim(t.substr(0, eq)))] = std::string(text::trim(t.substr(eq + 1)));
    }
  }
  auto get = [&](std::string_view key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw Error(ErrorKind::format, "run.meta lacks '" + std::string(key) + "'");
    return it->second;
  };
  auto u64 = [&](std::string_view key) {
    const auto v = text::parse_u64(get(key));
    if (!v) throw Error(ErrorKind::format, "run.meta '" + std::string(key) + "' is not an integer");
    return *v;
  };
  auto f64 = [&](std::string_view key) {
    const auto v = text::parse_double(get(key));
    if (!v) throw Error(ErrorKind::format, "run.meta '" + std::string(key) + "' is not a number");
    return *v;
  };
  auto f32 = [&](std::string_view key) {
    const auto v = text::parse_float(get(key));
    if (!v) throw Error(ErrorKind::format, "run.meta '" + std::string(key) + "' is not a number");
    return *v;
  };

  const auto version = u64("format_version");
  if (version != kRunFormatVersion) {
    throw Error(ErrorKind::version_mismatch, "run.meta format_version " + std::to_string(version) +
                                                 ", this build reads " + std::to_string(kRunFormatVersion));
  }

  RunRecord run;
  auto& m = run.meta;
  m.archive = get("archive");
  m.dataset_hash = u64("dataset_hash");
  m.backbone = get("backbone");
  m.head.num_gaussians = u64("num_gaussians");
  m.head.flow_steps = u64("flow_steps");
  m.head.hidden_ratio = f32("hidden_ratio");
  m.head.clamp_alpha = f32("clamp_alpha");
  m.head.seed = u64("head_seed");
  m.train.learning_rate = f64("learning_rate");
  m.train.weight_decay = f64("weight_decay");
  m.train.batch_size = u64("batch_size");
  m.train.max_epochs = u64("max_epochs");
  m.train.patience = u64("patience");
  m.train.seed = u64("train_seed");
  m.train.beta1 = f64("adam_beta1");
  m.train.beta2 = f64("adam_beta2");
  m.train.eps = f64("adam_eps");
  m.split.seed = u64("split_seed");
  m.split.train_fraction = f64("train_fraction");
  m.threads = u64("threads");

  std::vector<std::size_t> scales;
  {
    std::string list = get("scales");
    std::istringstream in(list);
    std::string item;
    while (std::getline(in, item, ',')) {
      const auto v = text::parse_u64(item);
      if (!v) throw Error(ErrorKind::format, "run.meta scales list is malformed: " + list);
      scales.push_back(*v);
    }
  }
  const auto kind = parse_head_kind(get("head"));
  run.detector = Detector::decode_checkpoint(binary::read_file(dir / "best.ckpt"), scales);
  if (run.detector.kind != kind) throw Error(ErrorKind::format, "best.ckpt head kind disagrees with run.meta");

  auto& h = run.history;
  h.initial_val_loss = f64("initial_val_loss");
  h.best_epoch = u64("best_epoch");
  h.stopped_epoch = u64("stopped_epoch");
  const auto csv_bytes = binary::read_file(dir / "history.csv");
  std::istringstream csv(std::string(reinterpret_cast<const char*>(csv_bytes.data()), csv_bytes.size()));
  std::string line;
  std::getline(csv, line);
  if (text::trim(line) != "epoch,train_loss,val_loss") throw Error(ErrorKind::format, "history.csv header");
  while (std::getline(csv, line)) {
    if (text::trim(line).empty()) continue;
    std::istringstream row(line);
    std::string epoch, tl, vl;
    std::getline(row, epoch, ',');
    std::getline(row, tl, ',');
    std::getline(row, vl, ',');
    const auto a = text::parse_double(tl), b = text::parse_double(vl);
    if (!a || !b) throw Error(ErrorKind::format, "history.csv row: " + line);
    h.train_loss.push_back(*a);
    h.val_loss.push_back(*b);
  }
  return run;
}

}  // namespace patchguard
