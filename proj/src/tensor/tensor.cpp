#include "mstage/tensor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

namespace mstage {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
std::string axis_message(const std::string& op, int axis, std::size_t expected,
                         std::size_t actual) {
  std::ostringstream os;
  os << op << ": extent mismatch on axis " << axis << " (expected " << expected
     << ", got " << actual << ")";
  return os.str();
}
}  // namespace

DimensionError::DimensionError(std::string op, int axis, std::size_t expected,
                               std::size_t actual)
    : std::invalid_argument(axis_message(op, axis, expected, actual)),
      op_(std::move(op)),
      axis_(axis) {}

DimensionError::DimensionError(std::string op, std::string message)
    : std::invalid_argument(op + ": " + message), op_(std::move(op)) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto e : shape_)
    if (e == 0) throw DimensionError("Tensor", "zero extent in shape " + shape_to_string(shape_));
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto e : shape_)
    if (e == 0) throw DimensionError("Tensor", "zero extent in shape " + shape_to_string(shape_));
  if (data_.size() != shape_size(shape_))
    throw DimensionError("Tensor", "data length " + std::to_string(data_.size()) +
                                       " does not match shape " + shape_to_string(shape_));
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size())
    throw DimensionError("Tensor::at", "index rank " + std::to_string(index.size()) +
                                           " vs tensor rank " + std::to_string(shape_.size()));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw std::out_of_range("Tensor::at: index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

Tensor Tensor::reshaped(Shape shape) const {
  Tensor t = *this;
  t.reshape(std::move(shape));
  return t;
}

void Tensor::reshape(Shape shape) {
  if (shape_size(shape) != data_.size())
    throw DimensionError("reshape", "cannot view " + shape_to_string(shape_) + " as " +
                                        shape_to_string(shape));
  shape_ = std::move(shape);
}

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_)
    throw DimensionError("operator+=", shape_to_string(shape_) + " vs " + shape_to_string(other.shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

bool Tensor::all_finite() const noexcept {
  for (auto x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

Parameter::Parameter(std::string name_, Tensor value_, bool trainable_)
    : name(std::move(name_)), value(std::move(value_)), grad(value.shape()), trainable(trainable_) {}

}  // namespace mstage
