#include "pdtr/tensor.hpp"

#include <cmath>
#include <sstream>

namespace pdtr {

namespace {
Precision g_precision = Precision::f64;
}

Precision default_precision() { return g_precision; }
void set_default_precision(Precision p) { g_precision = p; }

PrecisionScope::PrecisionScope(Precision p) : saved(g_precision) { g_precision = p; }
PrecisionScope::~PrecisionScope() { g_precision = saved; }

uint64_t SeededRng::next_u64() {
  // splitmix64 (Steele, Lea, Flood 2014)
  uint64_t z = (state_ += 0x9E3779B97f4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double SeededRng::uniform() {
  // 53 high bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

int64_t SeededRng::uniform_int(int64_t n) {
  if (n <= 0) throw DimensionError("uniform_int: n must be positive");
  // modulo bias is negligible for desk-scale n << 2^64
  return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
}

double SeededRng::normal() {
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

SeededRng SeededRng::fork(uint64_t stream) const {
  SeededRng mixer(state_ ^ (0xA0761D6478BD642FULL + stream));
  return SeededRng(mixer.next_u64());
}

int64_t shape_size(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(shape_size(shape_), 0.0)) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(std::move(values))) {
  if (shape_size(shape_) != static_cast<int64_t>(data_->size()))
    throw DimensionError("value count does not match shape " + shape_str(shape_));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_->begin(), t.data_->end(), v);
  return t;
}

int64_t Tensor::size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

double Tensor::at(int i) const { return (*data_)[static_cast<size_t>(i)]; }

double Tensor::at(int i, int j) const {
  return (*data_)[static_cast<size_t>(i) * shape_[1] + j];
}

double Tensor::at(int i, int j, int k) const {
  return (*data_)[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
}

double Tensor::value() const {
  if (size() != 1) throw DimensionError("value() requires a single-element tensor");
  return (*data_)[0];
}

void finalize_values(Tensor& t, const char* op, bool allow_nonfinite) {
  double* p = t.mutable_data();
  const int64_t n = t.size();
  if (g_precision == Precision::f32) {
    for (int64_t i = 0; i < n; ++i) p[i] = static_cast<double>(static_cast<float>(p[i]));
  }
  if (!allow_nonfinite) {
    for (int64_t i = 0; i < n; ++i) {
      if (!std::isfinite(p[i]))
        throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

}  // namespace pdtr
