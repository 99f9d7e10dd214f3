// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training recipe: Adam, reduce-on-plateau, early stopping, checkpoints and
// the per-epoch CSV log.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntrm/backbone.hpp"
#include "ntrm/loss.hpp"
#include "ntrm/model.hpp"
#include "ntrm/synth.hpp"

namespace ntrm {

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 4;
    int max_epochs = 150;
    double lambda = 0.4;
    double plateau_factor = 0.5;
    int plateau_patience = 5;
    double min_lr = 1e-7;
    int early_stop_patience = 15;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 42;
    bool augment = true;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Everything one command needs, as read from a config file plus overrides.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    SynthConfig synth;
    std::string data_dir = "data";
    std::string out_dir = "runs/default";

    void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

struct AdamHyper {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::int64_t step = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
};

/// One bias-corrected Adam update of every parameter in `store`. Throws when
/// a parameter has no gradient buffer or an update leaves a non-finite value.
void adam_step(ParamStore& store, AdamState& state, const AdamHyper& hyper);

/// Reduce-on-plateau with strict improvement: after `patience` consecutive
/// epochs without a new best, lr <- max(lr * factor, min_lr).
struct PlateauScheduler {
    double lr = 1e-4;
    double factor = 0.5;
    int patience = 5;
    double min_lr = 1e-7;
    double best = std::numeric_limits<double>::infinity();
    int bad_epochs = 0;
    int reductions = 0;

    double step(double val_loss);
};

struct EarlyStopping {
    int patience = 15;
    double best = std::numeric_limits<double>::infinity();
    int bad_epochs = 0;

    /// Records one validation loss; returns true when training should stop.
    bool step(double val_loss);
};

struct EpochRecord {
    int epoch = 0;
    double train_total = 0, train_final = 0, train_aux = 0;
    double val_loss = 0, val_final = 0, val_aux = 0;
    double val_miou = 0, val_dice = 0;
    double lr = 0;
};

inline constexpr const char* kLogHeader = "epoch,train_total,train_final,train_aux,val_loss,val_miou,val_dice,lr";
std::string log_row(const EpochRecord& r);

/// Progress of a run; enough to resume it exactly.
struct TrainState {
    int epochs_done = 0;
    PlateauScheduler scheduler;
    EarlyStopping early;
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    bool stopped = false;
    std::vector<EpochRecord> history;
};

nlohmann::json state_document(const TrainState& s);
TrainState state_from_document(const nlohmann::json& j);

// Checkpoint container:
//   "NTRMCKPT" | u8 version (1) | u32 len + config JSON | u32 len + state JSON |
//   u32 count | count x (u32 len + path) | count x tensor dump (same order)
// Paths are "param/<p>", "buffer/<p>", "adam.m/<p>", "adam.v/<p>".
inline constexpr char kCheckpointMagic[8] = {'N', 'T', 'R', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json config;
    nlohmann::json state;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

Checkpoint make_checkpoint(const Model& model, const AdamState* adam, const nlohmann::json& config,
                           const nlohmann::json& state);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Copies parameters and buffers into `model` (and Adam moments into `adam`
/// when given). Throws listing every missing and unexpected path.
void restore_checkpoint(const Checkpoint& ckpt, Model& model, AdamState* adam);

struct EvalResult {
    double loss = 0, final_term = 0, aux_term = 0;
    MetricReport metrics;
};

/// Eval-mode pass over `samples` in batches; losses are batch means.
EvalResult evaluate(Model& model, const std::vector<Sample>& samples, int batch_size, double lambda);

struct TrainOptions {
    std::filesystem::path out_dir;
    bool resume = false;
    // Stop after this many epochs in total even if max_epochs is larger; 0 = off.
    int epoch_limit = 0;
    std::function<void(const EpochRecord&)> on_epoch;
};

/// Runs (or resumes) training. Writes <out>/train_log.csv, <out>/best.ckpt
/// and <out>/last.ckpt. `run_config` is echoed into the checkpoints.
TrainState train(Model& model, const Dataset& data, const TrainConfig& cfg,
                 const nlohmann::json& run_config, const TrainOptions& options);

}  // namespace ntrm
