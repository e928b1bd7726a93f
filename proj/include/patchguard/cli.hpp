#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "patchguard/embeddings.hpp"
#include "patchguard/metrics.hpp"
#include "patchguard/scoring.hpp"
#include "patchguard/training.hpp"

namespace patchguard::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

int exit_code_for(ErrorKind kind);

struct EvalOptions {
  ThresholdStrategy threshold;
  // 0 normalizes over the whole evaluation set (validation + test); otherwise
  // over consecutive groups of this many images.
  std::size_t group_size = 0;
  // Archive scale per head; empty keeps the scales the run was trained on.
  std::vector<std::size_t> layers;
  std::size_t threads = 1;
};

struct Evaluation {
  std::vector<const Sample*> test;
  std::vector<AnomalyMap> test_maps;
  std::vector<double> val_scores;
  Threshold threshold;
  MetricsReport report;
};

// Scores the validation split (re-derived from the run's split seed) and the
// test split, selects the threshold on validation and computes all metrics on
// test. Metrics that are undefined for the data are left empty.
Evaluation evaluate(const RunRecord& run, const EmbeddingDataset& dataset, const EvalOptions& options);

// Entry point of the patchguard binary. args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace patchguard::cli
