#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace x2ct {

/// Error with a stable machine-parsable category ("E_SHAPE", "E_IO", ...).
struct Error : std::runtime_error {
    Error(std::string cat, const std::string& message)
        : std::runtime_error(cat + ": " + message), category(std::move(cat)) {}
    std::string category;
};

using Shape = std::vector<std::int64_t>;

std::int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);
Shape shape_strides(const Shape& s);

/// When enabled, tensor construction rejects non-finite values.
void set_checked_mode(bool on);
bool checked_mode();

/// Dense multi-axis value of 64-bit floats, row-major. Immutable: copies
/// share storage and are safe to pass across threads.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, double v);
    static Tensor scalar(double v);

    const Shape& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t dim(std::int64_t axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    std::int64_t size() const { return size_; }
    bool empty() const { return data_ == nullptr; }

    const double* data() const { return data_ ? data_->data() : nullptr; }
    const std::vector<double>& vec() const;
    double operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
    double at(std::initializer_list<std::int64_t> idx) const;
    double item() const;

    /// Same storage, new shape (element count must match).
    Tensor reshaped(Shape new_shape) const;

    bool all_finite() const;
    bool same_data(const Tensor& other) const { return data_ == other.data_; }

private:
    Shape shape_;
    std::int64_t size_ = 0;
    std::shared_ptr<const std::vector<double>> data_;
};

bool operator==(const Tensor& a, const Tensor& b);

double max_abs_diff(const Tensor& a, const Tensor& b);
double rel_err(double got, double want);

}  // namespace x2ct
