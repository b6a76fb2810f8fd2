#include "pdtr/tape.hpp"

#include <cmath>

namespace pdtr {

namespace {
Tape* g_active_tape = nullptr;
bool g_corrupt_backward = false;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& t) : saved(g_active_tape) { g_active_tape = &t; }
TapeScope::~TapeScope() { g_active_tape = saved; }

NoGradScope::NoGradScope() : saved(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = saved; }

void debug_set_corrupt_backward(bool on) { g_corrupt_backward = on; }
bool debug_corrupt_backward() { return g_corrupt_backward; }

int Tape::new_node(int64_t size) {
  nodes_.push_back(Node{std::vector<double>(static_cast<size_t>(size), 0.0), nullptr});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::set_backward(int id, std::function<void()> fn) {
  nodes_[static_cast<size_t>(id)].back = std::move(fn);
}

void Tape::watch(Tensor& t) { t.node = new_node(t.size()); }

void Tape::backward(const Tensor& root) {
  if (root.size() != 1) throw DimensionError("backward requires a scalar root");
  if (root.node < 0) throw NumericError("backward root is not on the tape");
  adj(root.node)[0] = 1.0;
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    auto& n = nodes_[static_cast<size_t>(id)];
    if (n.back) n.back();
  }
}

Parameter& ParameterStore::create(const std::string& name, Tensor init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = std::move(init);
  p->grad = Tensor(p->value.shape());
  Parameter* raw = p.get();
  params_.push_back(std::move(p));
  index_[name] = raw;
  return *raw;
}

Parameter& ParameterStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw DataError("unknown parameter: " + name);
  return *it->second;
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : it->second;
}

int64_t ParameterStore::total_size() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterStore::zero_grads() {
  for (const auto& p : params_) {
    double* g = p->grad.mutable_data();
    std::fill(g, g + p->grad.size(), 0.0);
  }
}

void watch_all(Tape& tape, ParameterStore& store) {
  for (const auto& p : store.all()) tape.watch(p->value);
}

void accumulate_grads(Tape& tape, ParameterStore& store) {
  for (const auto& p : store.all()) {
    if (p->value.node < 0) continue;
    const auto& a = tape.adj(p->value.node);
    double* g = p->grad.mutable_data();
    for (size_t i = 0; i < a.size(); ++i) g[i] += a[i];
  }
}

GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<Parameter*>& params, double h) {
  for (Parameter* p : params) {
    double* g = p->grad.mutable_data();
    std::fill(g, g + p->grad.size(), 0.0);
  }

  {
    Tape tape;
    TapeScope scope(tape);
    for (Parameter* p : params) tape.watch(p->value);
    Tensor y = f();
    if (y.size() != 1) throw DimensionError("grad_check: f must be scalar-valued");
    if (!std::isfinite(y.value())) throw NumericError("grad_check: f is non-finite");
    tape.backward(y);
    for (Parameter* p : params) {
      if (p->value.node < 0) continue;
      const auto& a = tape.adj(p->value.node);
      double* g = p->grad.mutable_data();
      for (size_t i = 0; i < a.size(); ++i) g[i] += a[i];
    }
  }

  GradCheckReport rep;
  NoGradScope nograd;
  for (Parameter* p : params) {
    double* v = p->value.mutable_data();
    const double* g = p->grad.data();
    const int64_t n = p->value.size();
    for (int64_t i = 0; i < n; ++i) {
      const double saved = v[i];
      v[i] = saved + h;
      const double fp = f().value();
      v[i] = saved - h;
      const double fm = f().value();
      v[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("grad_check: perturbed f is non-finite");
      const double fd = (fp - fm) / (2.0 * h);
      const double err = std::fabs(g[i] - fd) / std::max(1.0, std::fabs(g[i]));
      ++rep.entries_checked;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_param = p->name;
        rep.worst_index = i;
      }
    }
  }
  return rep;
}

}  // namespace pdtr
