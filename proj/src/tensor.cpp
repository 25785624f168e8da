#include "x2ct/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace x2ct {

std::int64_t shape_size(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) {
        if (d < 0) throw Error("E_SHAPE", "negative axis length in " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

Shape shape_strides(const Shape& s) {
    Shape st(s.size(), 1);
    for (std::int64_t i = static_cast<std::int64_t>(s.size()) - 2; i >= 0; --i)
        st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i + 1)] * s[static_cast<std::size_t>(i + 1)];
    return st;
}

namespace {
std::atomic<bool> g_checked{false};
}

void set_checked_mode(bool on) { g_checked.store(on); }
bool checked_mode() { return g_checked.load(); }

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    size_ = shape_size(shape_);
    if (size_ != static_cast<std::int64_t>(values.size()))
        throw Error("E_SHAPE", "value count " + std::to_string(values.size()) + " does not match shape " +
                                   shape_str(shape_));
    data_ = std::make_shared<const std::vector<double>>(std::move(values));
    if (checked_mode() && !all_finite())
        throw Error("E_NONFINITE", "tensor of shape " + shape_str(shape_) + " contains non-finite values");
}

Tensor Tensor::zeros(const Shape& shape) {
    return Tensor(shape, std::vector<double>(static_cast<std::size_t>(shape_size(shape)), 0.0));
}

Tensor Tensor::full(const Shape& shape, double v) {
    return Tensor(shape, std::vector<double>(static_cast<std::size_t>(shape_size(shape)), v));
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

const std::vector<double>& Tensor::vec() const {
    if (!data_) throw Error("E_STATE", "empty tensor");
    return *data_;
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<std::int64_t>(idx.size()) != rank())
        throw Error("E_SHAPE", "index rank mismatch for shape " + shape_str(shape_));
    const Shape st = shape_strides(shape_);
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : idx) {
        if (i < 0 || i >= shape_[k]) throw Error("E_SHAPE", "index out of bounds");
        flat += i * st[k];
        ++k;
    }
    return (*data_)[static_cast<std::size_t>(flat)];
}

double Tensor::item() const {
    if (size_ != 1) throw Error("E_SHAPE", "item() requires a single-element tensor, got " + shape_str(shape_));
    return (*data_)[0];
}

Tensor Tensor::reshaped(Shape new_shape) const {
    if (shape_size(new_shape) != size_)
        throw Error("E_SHAPE",
                    "cannot reshape " + shape_str(shape_) + " to " + shape_str(new_shape));
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.size_ = size_;
    t.data_ = data_;
    return t;
}

bool Tensor::all_finite() const {
    if (!data_) return true;
    for (double v : *data_)
        if (!std::isfinite(v)) return false;
    return true;
}

bool operator==(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    if (a.size() == 0) return true;
    if (a.same_data(b)) return true;
    for (std::int64_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw Error("E_SHAPE", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double rel_err(double got, double want) {
    const double denom = std::max(std::abs(want), 1e-12);
    return std::abs(got - want) / denom;
}

}  // namespace x2ct
