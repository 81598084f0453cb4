#include "bpim/train.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

#include "bpim/checkpoint.hpp"

namespace bpim::train {

void TrainConfig::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0)) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(lr0, "lr0");
    positive(lrf, "lrf");
    positive(momentum, "momentum");
    positive(warmup_bias_lr, "warmup_bias_lr");
    positive(warmup_momentum, "warmup_momentum");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (momentum >= 1.0 || warmup_momentum >= 1.0) throw ConfigError("momentum must be below 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("warmup_epochs must be in [0, epochs]");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
    if (eval_interval < 0) throw ConfigError("eval_interval must be non-negative");
    positive(loss.box, "loss.box");
    positive(loss.obj, "loss.obj");
    positive(loss.cls, "loss.cls");
    if (!(assign.anchor_ratio > 1.0)) throw ConfigError("anchor_ratio must exceed 1");
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json bal = nlohmann::json::object();
    for (const auto& [k, v] : loss.balance) bal[std::to_string(k)] = v;
    return {{"lr0", lr0},
            {"lrf", lrf},
            {"momentum", momentum},
            {"weight_decay", weight_decay},
            {"warmup_epochs", warmup_epochs},
            {"warmup_bias_lr", warmup_bias_lr},
            {"warmup_momentum", warmup_momentum},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"nesterov", nesterov},
            {"grad_clip", grad_clip},
            {"hflip", hflip},
            {"eval_interval", eval_interval},
            {"loss",
             {{"box", loss.box},
              {"obj", loss.obj},
              {"cls", loss.cls},
              {"balance", bal},
              {"scale_by_batch", loss.scale_by_batch},
              {"anchor_ratio", assign.anchor_ratio}}},
            {"eval", {{"conf_threshold", eval.conf_threshold}, {"iou_threshold", eval.iou_threshold}}}};
}

Schedule::Schedule(const TrainConfig& cfg, std::int64_t batches_per_epoch)
    : cfg_(cfg), warmup_(static_cast<std::int64_t>(cfg.warmup_epochs) * batches_per_epoch) {
    require(batches_per_epoch > 0, "schedule: batches_per_epoch must be positive");
}

double Schedule::epoch_factor(int epoch) const {
    const int span = cfg_.epochs - cfg_.warmup_epochs;
    if (epoch < cfg_.warmup_epochs || span <= 1) return 1.0;
    const double progress = static_cast<double>(epoch - cfg_.warmup_epochs) / (span - 1);
    return cfg_.lrf + (1.0 - cfg_.lrf) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double Schedule::lr(bool bias_group, std::int64_t iteration, int epoch) const {
    const double target = cfg_.lr0 * epoch_factor(epoch);
    if (iteration >= warmup_) return target;
    const double t = static_cast<double>(iteration) / static_cast<double>(warmup_);
    const double start = bias_group ? cfg_.warmup_bias_lr : 0.0;
    return start + (target - start) * t;
}

double Schedule::momentum(std::int64_t iteration) const {
    if (iteration >= warmup_) return cfg_.momentum;
    const double t = static_cast<double>(iteration) / static_cast<double>(warmup_);
    return cfg_.warmup_momentum + (cfg_.momentum - cfg_.warmup_momentum) * t;
}

bool SGD::is_bias(const std::string& name, const Var& v) {
    return v.value().rank() == 1 && name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
}

SGD::SGD(const std::vector<std::pair<std::string, Var>>& params) {
    for (const auto& [name, v] : params)
        slots_.push_back({v, Tensor(v.shape()), is_bias(name, v), v.value().rank() >= 2});
}

void SGD::zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
}

double SGD::clip(double max_norm) {
    double sq = 0.0;
    for (auto& s : slots_)
        if (s.param.node()->has_grad())
            for (double g : s.param.grad().data()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / (norm + 1e-6);
        for (auto& s : slots_)
            if (s.param.node()->has_grad()) s.param.grad_buffer() *= f;
    }
    return norm;
}

void SGD::step(double lr, double bias_lr, double momentum, double weight_decay, bool nesterov) {
    for (auto& s : slots_) {
        if (!s.param.node()->has_grad()) continue;
        Tensor& p = s.param.mutable_value();
        const Tensor& g = s.param.grad();
        const double rate = s.bias ? bias_lr : lr;
        const double wd = s.decay ? weight_decay : 0.0;
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            const double d = g[i] + wd * p[i];
            s.velocity[i] = momentum * s.velocity[i] + d;
            p[i] -= rate * (nesterov ? d + momentum * s.velocity[i] : s.velocity[i]);
        }
    }
}

nlohmann::json EpochRecord::to_json() const {
    nlohmann::json j{{"epoch", epoch},       {"loss", loss.total}, {"box", loss.box},     {"obj", loss.obj},
                     {"cls", loss.cls},      {"lr", lr},           {"bias_lr", bias_lr}, {"momentum", momentum},
                     {"steps", steps},       {"grad_norm", grad_norm}, {"seconds", seconds}};
    if (eval) {
        j["map50"] = eval->map50;
        j["map5095"] = eval->map5095;
    }
    return j;
}

std::vector<Target> batch_targets(const std::vector<const data::AnnotatedImage*>& batch) {
    std::vector<Target> out;
    for (std::size_t i = 0; i < batch.size(); ++i)
        for (const auto& a : batch[i]->boxes) out.push_back({static_cast<int>(i), a.cls, a.box});
    return out;
}

TrainResult train(model::Model& m, const TrainConfig& cfg, const std::vector<data::AnnotatedImage>& items,
                  std::uint64_t seed, const TrainHooks& hooks) {
    cfg.validate();
    require(!items.empty(), "train: empty dataset");
    for (const auto& it : items)
        require(it.image.dim(1) == m.config().input_size && it.image.dim(2) == m.config().input_size,
                "train: items must be letterboxed to the model input size");
    const std::int64_t n = static_cast<std::int64_t>(items.size());
    const std::int64_t nb = (n + cfg.batch_size - 1) / cfg.batch_size;
    Schedule sched(cfg, nb);
    SGD opt(m.named_parameters());
    Rng rng(seed ^ 0xA5A5A5A5ull);
    TrainResult res;
    m.set_training(true);

    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        for (std::int64_t i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.randint(0, i))]);

        EpochRecord rec;
        rec.epoch = epoch;
        for (std::int64_t b = 0; b < nb; ++b) {
            std::vector<data::AnnotatedImage> flipped;
            std::vector<const data::AnnotatedImage*> batch;
            const std::int64_t end = std::min(n, (b + 1) * cfg.batch_size);
            flipped.reserve(static_cast<std::size_t>(end - b * cfg.batch_size));
            for (std::int64_t i = b * cfg.batch_size; i < end; ++i) {
                const auto& item = items[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
                if (cfg.hflip && rng.uniform() < 0.5) {
                    flipped.push_back(data::flip_horizontal(item));
                    batch.push_back(&flipped.back());
                } else {
                    batch.push_back(&item);
                }
            }
            std::vector<const Tensor*> imgs;
            for (const auto* it : batch) imgs.push_back(&it->image);

            const std::int64_t iter = res.steps;
            const double lr = sched.lr(false, iter, epoch), bias_lr = sched.lr(true, iter, epoch);
            const double mom = sched.momentum(iter);

            opt.zero_grad();
            auto preds = m.forward(Var(stack_images(imgs)));
            auto loss = compute_loss(preds, batch_targets(batch), m.config(), cfg.loss, cfg.assign);
            if (!std::isfinite(loss.parts.total)) {
                if (hooks.divergence_checkpoint) {
                    nlohmann::json meta = hooks.checkpoint_meta;
                    meta["diverged"] = {{"epoch", epoch}, {"step", iter}};
                    checkpoint::save(*hooks.divergence_checkpoint, meta, m);
                }
                throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                      std::to_string(iter));
            }
            backward(loss.total);
            rec.grad_norm += opt.clip(cfg.grad_clip);
            opt.step(lr, bias_lr, mom, cfg.weight_decay, cfg.nesterov);

            rec.loss.total += loss.parts.total;
            rec.loss.box += loss.parts.box;
            rec.loss.obj += loss.parts.obj;
            rec.loss.cls += loss.parts.cls;
            rec.lr = lr;
            rec.bias_lr = bias_lr;
            rec.momentum = mom;
            ++rec.steps;
            ++res.steps;
        }
        const double inv = 1.0 / rec.steps;
        rec.loss.total *= inv;
        rec.loss.box *= inv;
        rec.loss.obj *= inv;
        rec.loss.cls *= inv;
        rec.grad_norm *= inv;
        const bool last = epoch + 1 == cfg.epochs;
        if (hooks.val && (last || (cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0))) {
            rec.eval = evaluate(m, *hooks.val, cfg.eval);
            m.set_training(true);
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (hooks.metrics) *hooks.metrics << rec.to_json().dump() << '\n' << std::flush;
        if (hooks.on_epoch) hooks.on_epoch(rec);
        res.final_loss = rec.loss.total;
        res.epochs.push_back(rec);
        if (hooks.stop && hooks.stop(rec)) break;
    }
    m.set_training(false);
    return res;
}

}  // namespace bpim::train
