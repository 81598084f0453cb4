#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "bpim/data.hpp"
#include "bpim/evaluate.hpp"
#include "bpim/loss.hpp"
#include "bpim/model.hpp"

namespace bpim::train {

struct TrainConfig {
    double lr0 = 0.01;
    double lrf = 0.01;  // final lr = lr0 * lrf
    double momentum = 0.9;
    double weight_decay = 0.0005;
    int warmup_epochs = 3;
    double warmup_bias_lr = 0.1;
    double warmup_momentum = 0.8;
    int batch_size = 8;
    int epochs = 300;
    bool nesterov = true;
    double grad_clip = 10.0;  // global L2 norm; 0 disables
    bool hflip = false;
    int eval_interval = 0;  // epochs between evaluations; 0 = final epoch only
    LossWeights loss;
    AssignOptions assign;
    EvalOptions eval;

    /// Throws ConfigError.
    void validate() const;
    nlohmann::json to_json() const;
};

/// Non-finite loss during training.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Learning-rate and momentum schedule. Warmup runs over the first
/// warmup_epochs * batches_per_epoch iterations: bias lr falls linearly from
/// warmup_bias_lr, other lrs rise from 0, momentum rises from
/// warmup_momentum. Afterwards lr follows a per-epoch cosine from lr0 to
/// lr0 * lrf.
class Schedule {
public:
    Schedule(const TrainConfig& cfg, std::int64_t batches_per_epoch);

    double lr(bool bias_group, std::int64_t iteration, int epoch) const;
    double momentum(std::int64_t iteration) const;
    /// Post-warmup lr factor for an epoch (1 during warmup).
    double epoch_factor(int epoch) const;
    std::int64_t warmup_iterations() const { return warmup_; }

private:
    TrainConfig cfg_;
    std::int64_t warmup_;
};

/// SGD with momentum (optionally Nesterov) and decoupled parameter groups:
/// weight decay on rank >= 2 tensors only, biases in their own lr group.
class SGD {
public:
    explicit SGD(const std::vector<std::pair<std::string, Var>>& params);

    void step(double lr, double bias_lr, double momentum, double weight_decay, bool nesterov);
    /// Scales gradients so their global L2 norm is at most max_norm; returns the norm before.
    double clip(double max_norm);
    void zero_grad();

    static bool is_bias(const std::string& name, const Var& v);

private:
    struct Slot {
        Var param;
        Tensor velocity;
        bool bias;
        bool decay;
    };
    std::vector<Slot> slots_;
};

struct EpochRecord {
    int epoch = 0;
    LossParts loss;  // means over the epoch's steps
    double lr = 0.0;
    double bias_lr = 0.0;
    double momentum = 0.0;
    int steps = 0;
    double grad_norm = 0.0;  // mean before clipping
    double seconds = 0.0;
    std::optional<EvalResult> eval;

    nlohmann::json to_json() const;
};

struct TrainResult {
    std::vector<EpochRecord> epochs;
    std::int64_t steps = 0;
    double final_loss = 0.0;
};

struct TrainHooks {
    std::ostream* metrics = nullptr;  // one JSON line per epoch
    const std::vector<data::AnnotatedImage>* val = nullptr;
    std::optional<std::filesystem::path> divergence_checkpoint;
    nlohmann::json checkpoint_meta;
    std::function<void(const EpochRecord&)> on_epoch;
    /// Return true to stop after the current epoch.
    std::function<bool(const EpochRecord&)> stop;
};

/// Targets of a batch from letterboxed items.
std::vector<Target> batch_targets(const std::vector<const data::AnnotatedImage*>& batch);

/// Trains on letterboxed items (already at the model's input size).
/// Deterministic given `seed`. Throws DivergenceError on a non-finite loss
/// after writing the diagnostic checkpoint when one is configured.
TrainResult train(model::Model& m, const TrainConfig& cfg, const std::vector<data::AnnotatedImage>& items,
                  std::uint64_t seed, const TrainHooks& hooks = {});

}  // namespace bpim::train
