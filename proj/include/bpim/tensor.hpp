#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bpim {

/// Raised when a caller violates a shape or argument contract.
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for invalid configuration values.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractError(what);
}

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

/// Dense row-major tensor of doubles with value semantics.
///
/// A FeatureMap is a rank-3 tensor [C, H, W]; batched feature maps are
/// rank-4 [N, C, H, W]. Most ops in this project accept the batched form.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int i) const;
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* ptr() { return data_.data(); }
    const double* ptr() const { return data_.data(); }
    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double>& storage() { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    double& at(std::initializer_list<std::int64_t> idx);
    double at(std::initializer_list<std::int64_t> idx) const;

    /// Same data, new shape; element count must match.
    Tensor reshaped(Shape shape) const;
    void reshape_inplace(Shape shape);

    void fill(double v);
    Tensor& operator+=(const Tensor& o);
    Tensor& operator*=(double s);

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;
    double sum() const;
    double max_abs() const;

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

private:
    std::int64_t offset(std::initializer_list<std::int64_t> idx) const;

    Shape shape_;
    std::vector<double> data_;
};

bool operator==(const Tensor& a, const Tensor& b);

/// Seeded generator with platform-stable real sampling (std distributions are
/// implementation-defined, which would break cross-toolchain determinism).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [lo, hi].
    std::int64_t randint(std::int64_t lo, std::int64_t hi);
    double normal();

    Tensor uniform_tensor(Shape shape, double lo, double hi);
    Tensor normal_tensor(Shape shape, double stddev = 1.0);

private:
    std::mt19937_64 engine_;
};

}  // namespace bpim
