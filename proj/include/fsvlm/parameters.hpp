#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace fsvlm {

/// Row-major so that per-sample and per-token rows are contiguous.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = false;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {}

  std::size_t size() const { return static_cast<std::size_t>(value.size()); }

  void zero_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
      grad = Matrix::Zero(value.rows(), value.cols());
    } else {
      grad.setZero();
    }
  }
};

/// Non-owning, ordered view over the parameters of a model. Owners build it
/// on demand by walking their layers, so copies of a model never alias.
class ParameterList {
 public:
  void add(Parameter& p) { items_.push_back(&p); }

  void append(const ParameterList& other) {
    items_.insert(items_.end(), other.items_.begin(), other.items_.end());
  }

  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  Parameter& operator[](std::size_t i) const { return *items_[i]; }

  Parameter* find(const std::string& name) const {
    auto it = std::find_if(items_.begin(), items_.end(),
                           [&](const Parameter* p) { return p->name == name; });
    return it == items_.end() ? nullptr : *it;
  }

  Parameter& at(const std::string& name) const {
    if (auto* p = find(name)) return *p;
    throw std::out_of_range("unknown parameter: " + name);
  }

  ParameterList trainable() const {
    ParameterList out;
    for (auto* p : items_)
      if (p->trainable) out.add(*p);
    return out;
  }

  ParameterList frozen() const {
    ParameterList out;
    for (auto* p : items_)
      if (!p->trainable) out.add(*p);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (auto* p : items_) n += p->size();
    return n;
  }

  void set_trainable(bool flag) const {
    for (auto* p : items_) p->trainable = flag;
  }

  void zero_grad() const {
    for (auto* p : items_) p->zero_grad();
  }

 private:
  std::vector<Parameter*> items_;
};

}  // namespace fsvlm
