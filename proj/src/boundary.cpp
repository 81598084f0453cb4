#include "bpim/boundary.hpp"

namespace bpim::boundary {

namespace {

// Visits every line of the scan for direction d. For each line, `start` is
// the flat offset of the border seed and `step` moves one position away
// from it; `len` is the line length.
template <class F>
void for_each_line(const Shape& s, Direction d, F&& f) {
    require(s.size() >= 2, "directional_boundary: rank must be >= 2");
    const std::int64_t h = s[s.size() - 2], w = s[s.size() - 1];
    require(h > 0 && w > 0, "directional_boundary: empty feature map");
    const std::int64_t planes = shape_numel(s) / (h * w);
    for (std::int64_t p = 0; p < planes; ++p) {
        const std::int64_t base = p * h * w;
        switch (d) {
            case Direction::left:
                for (std::int64_t i = 0; i < h; ++i) f(base + i * w, std::int64_t{1}, w);
                break;
            case Direction::right:
                for (std::int64_t i = 0; i < h; ++i) f(base + i * w + (w - 1), std::int64_t{-1}, w);
                break;
            case Direction::top:
                for (std::int64_t j = 0; j < w; ++j) f(base + j, w, h);
                break;
            case Direction::bottom:
                for (std::int64_t j = 0; j < w; ++j) f(base + (h - 1) * w + j, -w, h);
                break;
        }
    }
}

}  // namespace

const char* to_string(Direction d) {
    switch (d) {
        case Direction::left: return "left";
        case Direction::right: return "right";
        case Direction::top: return "top";
        case Direction::bottom: return "bottom";
    }
    return "?";
}

Tensor directional_boundary(const Tensor& x, Direction d) {
    Tensor out(x.shape());
    for_each_line(x.shape(), d, [&](std::int64_t start, std::int64_t step, std::int64_t len) {
        double run = x[start];
        for (std::int64_t k = 0; k < len; ++k) {
            const std::int64_t idx = start + k * step;
            if (x[idx] > run) run = x[idx];
            out[idx] = run;
        }
    });
    return out;
}

Var directional_boundary(const Var& x, Direction d) {
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    std::vector<std::int64_t> arg(static_cast<std::size_t>(xv.numel()));
    for_each_line(xv.shape(), d, [&](std::int64_t start, std::int64_t step, std::int64_t len) {
        std::int64_t best = start;
        for (std::int64_t k = 0; k < len; ++k) {
            const std::int64_t idx = start + k * step;
            if (xv[idx] > xv[best]) best = idx;
            out[idx] = xv[best];
            arg[static_cast<std::size_t>(idx)] = best;
        }
    });
    return make_result(std::move(out), {x}, [arg = std::move(arg)](Node& self) {
        Node* in = self.inputs[0].get();
        if (!in || !in->requires_grad) return;
        Tensor& g = in->grad_buffer();
        for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[static_cast<std::int64_t>(i)];
    });
}

Var boundary(const Var& x) {
    require(x.value().rank() == 4, "boundary: expected [N, C, H, W], got " + shape_str(x.shape()));
    std::vector<Var> maps;
    maps.reserve(kDirections.size());
    for (Direction d : kDirections) maps.push_back(directional_boundary(x, d));
    return ops::concat(maps);
}

BoundaryGlobal::BoundaryGlobal(Rng& rng, std::int64_t in_channels, std::int64_t out_channels, nn::GSConvKind kind)
    : BoundaryGlobal(rng, nn::make_gsconv(rng, kind, in_channels, out_channels, 1), in_channels, out_channels) {}

BoundaryGlobal::BoundaryGlobal(Rng& rng, std::shared_ptr<nn::Unary> global_, std::int64_t in_channels,
                               std::int64_t out_channels) {
    global = register_module("global", std::move(global_));
    reducer = register_module("reducer", std::make_shared<nn::Conv2d>(rng, 4 * in_channels, out_channels, 1));
}

Var BoundaryGlobal::forward(const Var& tap) {
    Var g = global->forward(tap);
    Var b = reducer->forward(boundary(tap));
    require(g.shape() == b.shape(), "BG: global branch " + shape_str(g.shape()) + " does not match boundary branch " +
                                        shape_str(b.shape()));
    return ops::add(g, b);
}

BoundaryGuidance::BoundaryGuidance(Rng& rng, std::int64_t tap_channels, std::int64_t neck_channels,
                                   nn::GSConvKind kind) {
    bg = register_module("bg", std::make_shared<BoundaryGlobal>(rng, tap_channels, neck_channels, kind));
    neck_proj = register_module("neck_proj", nn::make_gsconv(rng, kind, neck_channels, neck_channels, 1));
    fuse = register_module("fuse", std::make_shared<nn::Conv2d>(rng, 2 * neck_channels, neck_channels, 1));
    norm = register_module("norm", std::make_shared<nn::GroupNorm>(neck_channels, nn::default_group_count(neck_channels)));
}

Var BoundaryGuidance::forward(const Var& neck, const Var& tap) {
    require(neck.value().rank() == 4 && tap.value().rank() == 4, "BIG: inputs must be [N, C, H, W]");
    require(neck.dim(0) == tap.dim(0) && neck.dim(2) == tap.dim(2) && neck.dim(3) == tap.dim(3),
            "BIG: neck feature " + shape_str(neck.shape()) + " and backbone tap " + shape_str(tap.shape()) +
                " are not at the same level");
    Var base = bg->forward(tap);
    Var branch = ops::silu(norm->forward(fuse->forward(ops::concat({base, neck_proj->forward(neck)}))));
    return ops::add(base, branch);
}

}  // namespace bpim::boundary
