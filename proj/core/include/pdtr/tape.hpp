#pragma once

#include <functional>
#include <memory>
#include <unordered_map>

#include "pdtr/tensor.hpp"

namespace pdtr {

// Reverse-mode tape over whole-tensor ops. Ops record a node when the tape
// is active and at least one input is tracked. A tape is single-threaded;
// read-only tensors may be shared across threads, a tape must not be.
class Tape {
 public:
  int new_node(int64_t size);
  void set_backward(int id, std::function<void()> fn);
  std::vector<double>& adj(int id) { return nodes_[static_cast<size_t>(id)].adj; }
  // Seeds d(root)/d(root) = 1 and runs the recorded closures in reverse.
  void backward(const Tensor& root);
  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  // Registers a leaf so downstream ops track gradients into it.
  void watch(Tensor& t);

 private:
  struct Node {
    std::vector<double> adj;
    std::function<void()> back;
  };
  std::vector<Node> nodes_;
};

Tape* active_tape();

struct TapeScope {
  explicit TapeScope(Tape& t);
  ~TapeScope();
  Tape* saved;
};

// Temporarily disables recording (forward-only evaluation).
struct NoGradScope {
  NoGradScope();
  ~NoGradScope();
  Tape* saved;
};

// Named trainable tensor plus an accumulated gradient of the same shape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Owns parameters in creation order; names are unique within a store.
class ParameterStore {
 public:
  Parameter& create(const std::string& name, Tensor init);
  Parameter& at(const std::string& name);
  Parameter* find(const std::string& name);
  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  int64_t total_size() const;
  void zero_grads();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, Parameter*> index_;
};

void watch_all(Tape& tape, ParameterStore& store);
// Adds each watched parameter's adjoint into its grad slot.
void accumulate_grads(Tape& tape, ParameterStore& store);

// Max over all parameter entries of |analytic - central difference| /
// max(1, |analytic|). `f` must be deterministic and scalar-valued; run it
// in f64 precision for meaningful results.
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  int64_t entries_checked = 0;
};
GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<Parameter*>& params,
                           double h = 1e-5);

// Test hook: corrupts the matmul backward kernel so harness failure paths
// can be exercised.
void debug_set_corrupt_backward(bool on);
bool debug_corrupt_backward();

}  // namespace pdtr
