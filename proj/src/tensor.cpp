#include "bpim/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace bpim {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) {
        require(d >= 0, "negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    require(static_cast<std::int64_t>(data_.size()) == shape_numel(shape_),
            "value count does not match shape " + shape_str(shape_));
}

std::int64_t Tensor::dim(int i) const {
    if (i < 0) i += rank();
    require(i >= 0 && i < rank(), "dimension index out of range for shape " + shape_str(shape_));
    return shape_[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::offset(std::initializer_list<std::int64_t> idx) const {
    require(static_cast<int>(idx.size()) == rank(), "index rank mismatch for shape " + shape_str(shape_));
    std::int64_t off = 0;
    std::size_t d = 0;
    for (auto i : idx) {
        require(i >= 0 && i < shape_[d], "index out of range for shape " + shape_str(shape_));
        off = off * shape_[d] + i;
        ++d;
    }
    return off;
}

double& Tensor::at(std::initializer_list<std::int64_t> idx) { return data_[static_cast<std::size_t>(offset(idx))]; }
double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    return data_[static_cast<std::size_t>(offset(idx))];
}

Tensor Tensor::reshaped(Shape shape) const {
    Tensor t = *this;
    t.reshape_inplace(std::move(shape));
    return t;
}

void Tensor::reshape_inplace(Shape shape) {
    require(shape_numel(shape) == numel(), "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    shape_ = std::move(shape);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& o) {
    require(same_shape(o), "shape mismatch in += : " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

bool operator==(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

std::int64_t Rng::randint(std::int64_t lo, std::int64_t hi) {
    require(hi >= lo, "randint: empty range");
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(engine_() % span);
}

double Rng::normal() {
    // Box-Muller; u1 is kept away from zero.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = uniform(lo, hi);
    return t;
}

Tensor Rng::normal_tensor(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = stddev * normal();
    return t;
}

}  // namespace bpim
