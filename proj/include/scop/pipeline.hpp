#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scop/dataio.hpp"
#include "scop/model.hpp"
#include "scop/pruning.hpp"
#include "scop/selection.hpp"

namespace scop {

struct StageConfig {
    double lr = 0.05;
    int64_t epochs = 8;
    int64_t batch = 128;
};

struct SelectionStageConfig {
    double lr = 0.001;
    int64_t epochs = 10;
    int64_t batch = 128;
    ControlMode control = ControlMode::knockoff;
    bool bias = true;
    bool detach_knockoff = false;
};

struct ExperimentConfig {
    std::string arch = "small-cnn";
    std::string dataset = "mnist";  // mnist | cifar10
    std::string data_dir = "data";
    std::string artifacts_dir = "artifacts";
    uint64_t seed = 1;
    int64_t train_limit = 0;  // 0 keeps the full split
    int64_t test_limit = 0;
    bool augment = false;  // random +-2px shifts on real images (pretrain/finetune)
    StageConfig pretrain{0.05, 8, 128};
    SelectionStageConfig selection;
    double prune_rate = 0.5;
    StageConfig finetune{0.02, 20, 128};
};

std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const std::string& text);

// Loads the configured dataset (train, test) with limits applied. The mnist
// backend generates its corpus into data_dir on first use.
std::pair<Dataset, Dataset> load_dataset(const ExperimentConfig& cfg);

struct TrainResult {
    double accuracy_pct = 0.0;  // test accuracy, percent
    std::vector<double> epoch_losses;
};

// SGD with momentum 0.9 and cosine decay to zero. stream_name keys the
// shuffle/augment RNG streams so stages stay independent.
TrainResult train_sgd(NetworkSpec& net, const Dataset& train, const Dataset& test,
                      const StageConfig& cfg, uint64_t seed, const std::string& stream_name,
                      bool augment);

double evaluate(const NetworkSpec& net, const Dataset& test, int64_t batch = 256);

struct RunOptions {
    bool force = false;    // ignore cached stage artifacts
    bool verbose = false;  // stage progress on stderr
};

// Each stage writes one content-addressed artifact under cfg.artifacts_dir
// and reuses it when present (unless opts.force). Stages compose: a later
// stage runs every earlier stage it depends on.

struct PretrainOutcome {
    NetworkSpec net;
    double accuracy_pct = 0.0;
    std::string path;
};
PretrainOutcome run_pretrain(const ExperimentConfig& cfg, const RunOptions& opts = {});

struct KnockoffOutcome {
    Dataset knockoffs;  // index-aligned with the train split
    std::string path;
};
KnockoffOutcome run_knockoff(const ExperimentConfig& cfg, const RunOptions& opts = {});

struct SelectionOutcome {
    SelectionState state;
    std::string path;
};
SelectionOutcome run_selection(const ExperimentConfig& cfg, const RunOptions& opts = {});

struct PruneOutcome {
    ImportanceReport report;
    PruningPlan plan;
    NetworkSpec pruned;
    ReductionSummary reduction;
    double pruned_acc = 0.0;
    std::string plan_path;
};
// criterion: "scop" (runs selection), "l1" or "random".
PruneOutcome run_prune(const ExperimentConfig& cfg, const std::string& criterion,
                       const RunOptions& opts = {});

struct ScopMetrics {
    std::string arch, dataset, criterion = "scop";
    std::string control_mode = "knockoff";
    bool bias = true;
    uint64_t seed = 0;
    double rate = 0.0;
    double baseline_acc = 0.0, pruned_acc = 0.0, final_acc = 0.0;  // percent
    ReductionSummary reduction;
    std::vector<std::pair<int32_t, std::vector<double>>> betas;  // per prunable layer
};

std::string metrics_to_json(const ScopMetrics& m, bool with_timestamp);
void append_metrics(const std::string& jsonl_path, const ScopMetrics& m);

struct RunResult {
    NetworkSpec net;  // final (pruned + finetuned) network
    ScopMetrics metrics;
};

// Full sequence: pretrain -> knockoffs -> selection -> prune -> finetune;
// appends one record to <artifacts>/metrics.jsonl.
RunResult run_scop(const ExperimentConfig& cfg, const std::string& criterion = "scop",
                   const RunOptions& opts = {});

// One metrics row per control-mode x bias combination, same seed/config.
std::vector<ScopMetrics> run_ablation(const ExperimentConfig& cfg, const RunOptions& opts = {});

// Synthetic ranking check: a hand-built 1x1-conv teacher with 8 label-bearing
// filters and 8 label-independent ones (channel order shuffled by seed), run
// through selection; precision of the top-8 importance picks against ground
// truth.
struct PlantedOutcome {
    double precision = 0.0;
    std::vector<int64_t> top;              // selected channels, best first
    std::vector<int64_t> signal_channels;  // ground truth, ascending
    Tensor importance;
};

struct PlantedConfig {
    int64_t n_train = 4096, n_test = 1024;
    int64_t signal_dim = 8, noise_dim = 8;
    int64_t num_classes = 4;
    double lr = 0.05;
    int64_t epochs = 12, batch = 128;
    ControlMode control = ControlMode::knockoff;
};

PlantedOutcome planted_diagnostic(uint64_t seed, const PlantedConfig& pc = {});

}  // namespace scop
