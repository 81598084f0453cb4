#pragma once

#include <map>
#include <memory>
#include <vector>

#include "bpim/nn.hpp"

namespace bpim::attention {

struct AttentionConfig {
    int heads = 8;
    std::int64_t model_dim = 0;
    std::int64_t ff_dim = 1024;

    std::int64_t head_dim() const { return heads > 0 ? model_dim / heads : 0; }
    /// Throws ConfigError when the dimensions are inconsistent.
    void validate() const;
};

/// Scaled dot-product attention over [B, T, d] sequences. When `weights` is
/// given it receives the [B, T, T] row-stochastic attention matrix.
Var attention(const Var& q, const Var& k, const Var& v, Var* weights = nullptr);

/// Per-head projections, attention, concat and output projection over
/// token sequences [N, T, C].
class MultiHeadAttention : public nn::Module {
public:
    MultiHeadAttention(Rng& rng, const AttentionConfig& cfg);

    Var forward(const Var& q, const Var& k, const Var& v);
    /// Attention matrices of the most recent forward, [N * heads, T, T].
    const Var& last_weights() const { return last_weights_; }

    std::shared_ptr<nn::Linear> wq, wk, wv, wo;
    AttentionConfig cfg;

private:
    Var last_weights_;
};

/// Single post-norm encoder layer: LN(x + MHA(x)), then LN(y + FFN(y)) with a GELU FFN.
class EncoderLayer : public nn::Module {
public:
    EncoderLayer(Rng& rng, const AttentionConfig& cfg);

    Var forward(const Var& tokens);

    std::shared_ptr<MultiHeadAttention> mha;
    std::shared_ptr<nn::LayerNorm> norm1, norm2;
    std::shared_ptr<nn::Linear> ff1, ff2;
};

struct PIGOutput {
    Var pi;                     // encoder output reshaped back to B5's layout
    Var enhanced;               // PI + SiLU(GN(Conv1x1(Concat(PI, Conv(B5))))), before per-level scaling
    std::map<int, Var> levels;  // PIG_i, shaped like N_i
};

/// PIG block over the level-5 backbone tap.
class PositionGuidance : public nn::Module {
public:
    /// `level_channels` maps each produced level to its neck width. A learned
    /// positional embedding over `tokens` positions is added when
    /// `positional_embedding` is set.
    PositionGuidance(Rng& rng, const AttentionConfig& cfg, const std::map<int, std::int64_t>& level_channels,
                     bool positional_embedding = false, std::int64_t tokens = 0);

    PIGOutput forward(const Var& b5);

    std::shared_ptr<EncoderLayer> encoder;
    std::shared_ptr<nn::ConvBnAct> tap_conv;
    std::shared_ptr<nn::Conv2d> reduce;
    std::shared_ptr<nn::GroupNorm> norm;
    std::map<int, std::shared_ptr<nn::ConvBnAct>> scale;
    Var position;  // [1, T, C], undefined unless enabled
};

}  // namespace bpim::attention
