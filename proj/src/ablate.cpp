#include "bpim/ablate.hpp"

#include <cstdio>
#include <sstream>

namespace bpim::train {

model::ModuleFlags parse_flags(const std::string& spec) {
    model::ModuleFlags f;
    if (spec == "baseline" || spec == "none") return f;
    if (spec == "all") return {true, true, true, true};
    std::stringstream ss(spec);
    for (std::string tok; std::getline(ss, tok, '+');) {
        if (tok == "big") f.big = true;
        else if (tok == "awf") f.awf = true;
        else if (tok == "pig") f.pig = true;
        else if (tok == "csf" || tok == "csf_tff" || tok == "tff") f.csf_tff = true;
        else throw ConfigError("unknown module '" + tok + "' in flag row '" + spec + "'");
    }
    return f;
}

std::vector<AblationRow> ablate(const model::ModelConfig& base, const TrainConfig& cfg,
                                const std::vector<data::AnnotatedImage>& train_items,
                                const std::vector<data::AnnotatedImage>& val_items,
                                const std::vector<model::ModuleFlags>& rows, std::uint64_t seed, std::ostream* log) {
    require(!rows.empty(), "ablate: empty flag matrix");
    std::vector<AblationRow> out;
    for (const auto& flags : rows) {
        model::ModelConfig mc = base;
        mc.enable = flags;
        model::Model m(mc, seed);
        train(m, cfg, train_items, seed);
        AblationRow row;
        row.flags = flags;
        row.result = evaluate(m, val_items, cfg.eval);
        row.params = model::count_params(m);
        row.gflops = row.result.gflops;
        if (log)
            *log << flags.label() << ": map50=" << row.result.map50 << " map50_95=" << row.result.map5095
                 << " params=" << row.params << "\n";
        out.push_back(std::move(row));
    }
    return out;
}

std::string ablation_csv(const std::vector<AblationRow>& rows, const std::string& dataset, std::uint64_t seed) {
    std::string out = "dataset,baseline,big,awf,pig,csf,map50_95,map50,params_m,gflops,seed\n";
    for (const auto& r : rows) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,1,%d,%d,%d,%d,%.4f,%.4f,%.6f,%.4f,%llu\n", dataset.c_str(), r.flags.big,
                      r.flags.awf, r.flags.pig, r.flags.csf_tff, r.result.map5095, r.result.map50,
                      static_cast<double>(r.params) / 1e6, r.gflops, static_cast<unsigned long long>(seed));
        out += buf;
    }
    return out;
}

}  // namespace bpim::train
