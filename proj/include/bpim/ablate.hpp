#pragma once

#include <string>
#include <vector>

#include "bpim/train.hpp"

namespace bpim::train {

struct AblationRow {
    model::ModuleFlags flags;
    EvalResult result;
    std::int64_t params = 0;
    double gflops = 0.0;
};

/// Parses a row spec such as "baseline", "big+awf" or "all".
model::ModuleFlags parse_flags(const std::string& spec);

/// Trains and evaluates one model per flag row under the same seed and budget.
std::vector<AblationRow> ablate(const model::ModelConfig& base, const TrainConfig& cfg,
                                const std::vector<data::AnnotatedImage>& train_items,
                                const std::vector<data::AnnotatedImage>& val_items,
                                const std::vector<model::ModuleFlags>& rows, std::uint64_t seed,
                                std::ostream* log = nullptr);

/// CSV header: dataset,baseline,big,awf,pig,csf,map50_95,map50,params_m,gflops,seed
std::string ablation_csv(const std::vector<AblationRow>& rows, const std::string& dataset, std::uint64_t seed);

}  // namespace bpim::train
