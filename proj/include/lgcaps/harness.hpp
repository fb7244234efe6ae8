#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lgcaps/model.hpp"
#include "lgcaps/synthgen.hpp"

// Training and evaluation: AdamW optimization, the epoch loop with
// deterministic shuffling, metrics, checkpointing/resume, and the four-mode
// ablation driver.

namespace lgcaps {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double wd = 1e-5;  // decoupled: params decay by lr*wd*param each step
  void validate() const;  // throws ConfigError
};

// Flat first/second moments in ParamStore registration order.
struct AdamState {
  std::int64_t t = 0;
  std::vector<double> m, v;
};

void adam_init(AdamState& st, const ParamStore& store);

// One update across every parameter; grads align with store.names(). Returns
// false without touching params or state when any gradient is non-finite.
bool adam_step(ParamStore& store, const std::vector<Tensor>& grads, AdamState& st,
               const AdamConfig& cfg);

struct TrainConfig {
  AdamConfig adam;
  int batch = 32;
  int epochs = 30;
  std::uint64_t seed = 0;
  RouteMode mode = RouteMode::kFull;
  int T = 3;
  double w_pair = 1.0;
  int eval_every = 1;    // epochs between val evaluations
  int max_samples = 0;   // 0 = all training records
  std::string train_dir, val_a_dir, val_b_dir;
  std::string out_dir;   // "" = keep artifacts off disk
  std::string resume;    // path to a checkpoint written by an earlier run
  void validate() const;
};

// Key-value text file, one "key value" pair per line, '#' comments; every key
// optional, unknown keys rejected.
TrainConfig load_train_config(const std::string& path);

struct MetricsRecord {
  double loss = 0.0;
  double acc = 0.0;
  std::array<double, kNumFamilies> family_acc{};
  std::array<int, kNumFamilies> family_n{};
  int n = 0;
};

struct PreparedSample {
  SceneSpec scene;  // rendered on use; images are cheap to rasterize
  AlignedLayout aligned;
  int answer = 0;
  int family = 0;
};

// Prune -> layout -> pad/align each record and resolve answer indices;
// throws before any training work if the dataset does not fit the model
// geometry or vocabulary.
std::vector<PreparedSample> prepare_samples(const Dataset& ds, const ModelConfig& cfg);

MetricsRecord evaluate(ParamStore& store, const ModelConfig& cfg,
                       const std::vector<PreparedSample>& samples, const Vocab& vocab);

struct EpochRow {
  int epoch = 0;          // 1-based
  double train_loss = 0.0;
  MetricsRecord val_a, val_b;  // n == 0 when not evaluated
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> rows;
  double best_val_a = -1.0;
  int best_epoch = -1;    // 1-based epoch of the best val-A accuracy
  int skipped_steps = 0;  // batches aborted on non-finite gradients
  MetricsRecord final_train;  // evaluate() over the training set at the end
  std::string best_path, last_path, metrics_path;
};

// The full deterministic loop. mcfg's mode/T/w_pair are overridden from tc;
// vocab is the synthgen question lexicon. Checkpoints (best on val-A + last)
// and the metrics CSV land in tc.out_dir when set.
TrainResult train_loop(const TrainConfig& tc, ModelConfig mcfg, const Dataset& train,
                       const Dataset* val_a, const Dataset* val_b);

// ---- metrics CSV ----
inline constexpr const char* kMetricsSchema = "# lgcaps-metrics v1";
inline constexpr const char* kMetricsHeader =
    "epoch,train_loss,val_a_acc,val_b_acc,exist_a,count_a,compare_a,query_a,"
    "exist_b,count_b,compare_b,query_b,seconds";
// Absent values (val set not given / epoch not evaluated) are written as -1.
void append_metrics_row(const std::string& path, const EpochRow& row);

// ---- ablation ----
struct AblateRow {
  RouteMode mode;
  double val_a = -1.0, val_b = -1.0;
};
// Trains all four modes with identical data, seed, and schedule; accuracy is
// taken at each run's best val-A epoch (final epoch when no val-A set).
std::vector<AblateRow> ablate(const TrainConfig& base, const ModelConfig& mcfg,
                              const Dataset& train, const Dataset* val_a, const Dataset* val_b);
inline constexpr const char* kAblationSchema = "# lgcaps-ablation v1";
void write_ablation_csv(const std::string& path, const std::vector<AblateRow>& rows);

}  // namespace lgcaps
