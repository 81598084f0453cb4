#include "bpim/attention.hpp"

#include <cmath>

#include "bpim/pyramid.hpp"

namespace bpim::attention {

void AttentionConfig::validate() const {
    if (heads <= 0) throw ConfigError("attention: heads must be positive");
    if (model_dim <= 0) throw ConfigError("attention: model_dim must be positive");
    if (model_dim % heads != 0)
        throw ConfigError("attention: model_dim " + std::to_string(model_dim) + " is not divisible by " +
                          std::to_string(heads) + " heads");
    if (ff_dim <= 0) throw ConfigError("attention: ff_dim must be positive");
}

Var attention(const Var& q, const Var& k, const Var& v, Var* weights) {
    require(q.value().rank() == 3 && k.value().rank() == 3 && v.value().rank() == 3,
            "attention: expected [B, T, d] inputs");
    const std::int64_t dk = q.dim(2);
    if (dk == 0) throw ConfigError("attention: head dimension is zero");
    require(k.dim(2) == dk, "attention: query and key dims differ");
    require(k.dim(1) == v.dim(1), "attention: key and value token counts differ");
    Var scores = ops::scale(ops::matmul(q, ops::transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
    Var a = ops::softmax_last(scores);
    if (weights) *weights = a;
    return ops::matmul(a, v);
}

MultiHeadAttention::MultiHeadAttention(Rng& rng, const AttentionConfig& cfg_) : cfg(cfg_) {
    cfg.validate();
    wq = register_module("q", std::make_shared<nn::Linear>(rng, cfg.model_dim, cfg.model_dim));
    wk = register_module("k", std::make_shared<nn::Linear>(rng, cfg.model_dim, cfg.model_dim));
    wv = register_module("v", std::make_shared<nn::Linear>(rng, cfg.model_dim, cfg.model_dim));
    wo = register_module("out", std::make_shared<nn::Linear>(rng, cfg.model_dim, cfg.model_dim));
}

Var MultiHeadAttention::forward(const Var& q, const Var& k, const Var& v) {
    for (const Var* t : {&q, &k, &v})
        require(t->value().rank() == 3 && t->dim(2) == cfg.model_dim,
                "multi_head: token dim must equal model_dim " + std::to_string(cfg.model_dim));
    Var qh = ops::split_heads(wq->forward(q), cfg.heads);
    Var kh = ops::split_heads(wk->forward(k), cfg.heads);
    Var vh = ops::split_heads(wv->forward(v), cfg.heads);
    Var out = attention(qh, kh, vh, &last_weights_);
    return wo->forward(ops::merge_heads(out, cfg.heads));
}

EncoderLayer::EncoderLayer(Rng& rng, const AttentionConfig& cfg) {
    mha = register_module("mha", std::make_shared<MultiHeadAttention>(rng, cfg));
    norm1 = register_module("norm1", std::make_shared<nn::LayerNorm>(cfg.model_dim));
    ff1 = register_module("ff1", std::make_shared<nn::Linear>(rng, cfg.model_dim, cfg.ff_dim));
    ff2 = register_module("ff2", std::make_shared<nn::Linear>(rng, cfg.ff_dim, cfg.model_dim));
    norm2 = register_module("norm2", std::make_shared<nn::LayerNorm>(cfg.model_dim));
}

Var EncoderLayer::forward(const Var& tokens) {
    Var y = norm1->forward(ops::add(tokens, mha->forward(tokens, tokens, tokens)));
    Var ff = ff2->forward(ops::gelu(ff1->forward(y)));
    return norm2->forward(ops::add(y, ff));
}

PositionGuidance::PositionGuidance(Rng& rng, const AttentionConfig& cfg,
                                   const std::map<int, std::int64_t>& level_channels, bool positional_embedding,
                                   std::int64_t tokens) {
    cfg.validate();
    const std::int64_t c = cfg.model_dim;
    encoder = register_module("encoder", std::make_shared<EncoderLayer>(rng, cfg));
    tap_conv = register_module("tap_conv", std::make_shared<nn::ConvBnAct>(rng, c, c, 1));
    reduce = register_module("reduce", std::make_shared<nn::Conv2d>(rng, 2 * c, c, 1));
    norm = register_module("norm", std::make_shared<nn::GroupNorm>(c, nn::default_group_count(c)));
    for (const auto& [level, ch] : level_channels) {
        require(level >= kLevels.front() && level <= kLevels.back(), "PIG: level out of range");
        scale[level] = register_module("scale" + std::to_string(level), std::make_shared<nn::ConvBnAct>(rng, c, ch, 3));
    }
    if (positional_embedding) {
        require(tokens > 0, "PIG: positional embedding needs a token count");
        position = register_parameter("position", rng.normal_tensor({1, tokens, c}, 0.02));
    }
}

PIGOutput PositionGuidance::forward(const Var& b5) {
    require(b5.value().rank() == 4, "PIG: expected [N, C, H, W], got " + shape_str(b5.shape()));
    const std::int64_t h = b5.dim(2), w = b5.dim(3);
    Var tokens = ops::flatten_tokens(b5);
    if (position.defined()) {
        require(position.dim(1) == tokens.dim(1), "PIG: positional embedding size does not match B5");
        tokens = ops::add_batch_broadcast(tokens, position);
    }
    PIGOutput out;
    out.pi = ops::unflatten_tokens(encoder->forward(tokens), h, w);
    Var branch = ops::silu(norm->forward(reduce->forward(ops::concat({out.pi, tap_conv->forward(b5)}))));
    out.enhanced = ops::add(out.pi, branch);
    for (const auto& [level, conv] : scale) {
        const int factor = 1 << (kLevels.back() - level);
        Var x = factor > 1 ? ops::upsample_nearest(out.enhanced, factor) : out.enhanced;
        out.levels[level] = conv->forward(x);
    }
    return out;
}

}  // namespace bpim::attention
