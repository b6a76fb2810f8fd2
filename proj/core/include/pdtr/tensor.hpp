#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace pdtr {

// Error taxonomy. The CLI maps these onto exit codes: DataError/ConfigError
// -> 2, NumericError -> 3, VerificationError -> 4.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};
struct DegenerateSliceError : NumericError {
  explicit DegenerateSliceError(const std::string& m) : NumericError(m) {}
};
struct VerificationError : std::runtime_error {
  explicit VerificationError(const std::string& m) : std::runtime_error(m) {}
};

// Global compute precision. f64 is for tests and gradient checks; f32 rounds
// every op result (and optimizer updates) to float precision, so trained
// parameters stay exactly representable in the 32-bit checkpoint format.
enum class Precision { f64, f32 };
Precision default_precision();
void set_default_precision(Precision p);
struct PrecisionScope {
  explicit PrecisionScope(Precision p);
  ~PrecisionScope();
  Precision saved;
};

// splitmix64 stream. Identical seed gives an identical stream on every
// platform; all randomness in the project flows through this.
class SeededRng {
 public:
  explicit SeededRng(uint64_t seed) : state_(seed) {}
  uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  int64_t uniform_int(int64_t n);        // [0, n)
  double normal();                       // Box-Muller, two draws per call
  SeededRng fork(uint64_t stream) const; // independent derived stream
 private:
  uint64_t state_;
};

// Dense row-major tensor of doubles. Data is shared on copy and treated as
// immutable once an op has published the tensor; mutable_data() exists for
// construction and for the finite-difference probes in grad_check.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);                       // zeros
  Tensor(std::vector<int> shape, std::vector<double> values);
  static Tensor scalar(double v);
  static Tensor full(std::vector<int> shape, double v);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const;
  bool defined() const { return data_ != nullptr; }

  const double* data() const { return data_->data(); }
  double* mutable_data() { return data_->data(); }
  const std::vector<double>& values() const { return *data_; }
  bool shares_data(const Tensor& other) const { return data_ == other.data_; }

  double at(int i) const;
  double at(int i, int j) const;
  double at(int i, int j, int k) const;
  double value() const;  // single-element tensors only

  // Autodiff tape node id; -1 marks a constant (no gradient tracked).
  int node = -1;

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
};

int64_t shape_size(const std::vector<int>& shape);
bool same_shape(const Tensor& a, const Tensor& b);
std::string shape_str(const std::vector<int>& shape);

// Applies the precision mode and (unless sentinels are expected) rejects
// NaN/Inf. Every op funnels its freshly built output through here.
void finalize_values(Tensor& t, const char* op, bool allow_nonfinite = false);

}  // namespace pdtr
