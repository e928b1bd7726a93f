#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "patchguard/embeddings.hpp"
#include "patchguard/gmm_head.hpp"
#include "patchguard/nf_head.hpp"

namespace patchguard {

enum class HeadKind { gmm, nf };

std::string_view to_string(HeadKind kind);
HeadKind parse_head_kind(std::string_view text);

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 500;
  std::size_t patience = 30;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  // Hyperparameters used for transformer backbones: GMM lr 1e-4, wd 1e-4,
  // batch 8; flow lr 1e-3, wd 1e-5, batch 32.
  static TrainConfig defaults_for(HeadKind kind);
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

// One Adam update with bias-corrected moments plus decoupled weight decay:
// w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const TrainConfig& config);

// Architecture options for building heads; unused fields are ignored by the
// other head kind.
struct HeadOptions {
  std::size_t num_gaussians = 100;
  std::size_t flow_steps = 20;
  float hidden_ratio = 0.16f;
  float clamp_alpha = 1.9f;
  std::uint64_t seed = 0;

  friend bool operator==(const HeadOptions&, const HeadOptions&) = default;
};

// One independent head per selected archive scale. Its loss is the mean over
// heads of each head's mean per-patch NLL.
struct Detector {
  HeadKind kind = HeadKind::gmm;
  std::vector<std::size_t> scales;  // archive scale index per head
  std::vector<GmmHead> gmm;
  std::vector<FlowHead> flows;

  // Head i is seeded with options.seed + i.
  static Detector create(HeadKind kind, const DatasetMeta& meta, std::vector<std::size_t> scales,
                         const HeadOptions& options);

  std::size_t head_count() const { return scales.size(); }
  std::size_t parameter_count() const;
  std::vector<std::span<double>> parameter_blocks();

  // Throws dimension_mismatch naming expected vs actual dims.
  void check_compatible(const DatasetMeta& meta) const;

  double mean_nll(std::span<const Sample* const> samples, std::size_t threads = 1) const;
  // grads is resized to one buffer per head.
  double loss_and_grad(std::span<const Sample* const> samples, std::vector<std::vector<double>>& grads,
                       std::size_t threads = 1) const;

  // Raw per-patch NLL maps, one per head.
  std::vector<ScoreMap> patch_scores(const Sample& sample) const;

  // Rounds every parameter to the nearest f32, the checkpoint precision.
  void round_to_f32();

  // best.ckpt: the GMMH or NFH1 records of all heads, back to back.
  std::vector<std::byte> encode_checkpoint() const;
  static Detector decode_checkpoint(std::span<const std::byte> bytes, std::vector<std::size_t> scales);

  friend bool operator==(const Detector&, const Detector&) = default;
};

struct TrainHistory {
  std::vector<double> train_loss;  // index e-1 holds epoch e
  std::vector<double> val_loss;
  double initial_val_loss = 0.0;   // before the first update
  std::size_t best_epoch = 0;      // 1-based; 0 if no epoch ran
  std::size_t stopped_epoch = 0;

  double best_val_loss() const;

  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

// Patience-based stopping on validation loss. Epochs are 1-based.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  // Returns true if val_loss is a new strict minimum.
  bool observe(std::size_t epoch, double val_loss);
  bool should_stop(std::size_t epoch) const { return epoch >= best_epoch_ + patience_; }

  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t best_epoch_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct TrainResult {
  Detector detector;  // parameters of the best validation epoch
  TrainHistory history;
};

using EpochCallback = std::function<void(std::size_t epoch, double train_loss, double val_loss)>;

TrainResult train(Detector detector, const EmbeddingDataset& dataset, const SplitSpec& split,
                  const TrainConfig& config, std::size_t threads = 1, const EpochCallback& on_epoch = {});

// Everything needed to re-execute a run.
struct RunMeta {
  std::string archive;
  std::uint64_t dataset_hash = 0;
  std::string backbone;
  HeadOptions head;
  TrainConfig train;
  SplitSpec split;
  std::size_t threads = 1;

  friend bool operator==(const RunMeta&, const RunMeta&) = default;
};

struct RunRecord {
  Detector detector;
  TrainHistory history;
  RunMeta meta;
};

// Run directory: run.meta, best.ckpt, history.csv.
void save_run(const RunRecord& run, const std::filesystem::path& dir);
RunRecord load_run(const std::filesystem::path& dir);

}  // namespace patchguard
