#pragma once

// Named parameter lists shared by the model structs. Every model exposes
//   template <class F> void visit(F&& f)        f(const std::string&, Tensor<T>&)
//   template <class F> void visit(F&& f) const  f(const std::string&, const Tensor<T>&)
// in a fixed order; everything here is built on that order.

#include <cmath>
#include <string>
#include <vector>

#include "photobridge/ad/checkpoint.hpp"
#include "photobridge/ad/tensor.hpp"
#include "photobridge/rng.hpp"

namespace photobridge::models {

using ad::Shape;
using ad::Tensor;

template <std::floating_point T>
Tensor<T> normal_init(Shape shape, Rng& rng, double stddev) {
  std::vector<T> v(ad::shape_size(shape));
  for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <std::floating_point T>
Tensor<T> const_init(Shape shape, double value) {
  return Tensor<T>::filled(std::move(shape), static_cast<T>(value), true);
}

template <class Model>
auto parameters(const Model& m) {
  using T = typename Model::value_type;
  std::vector<Tensor<T>> out;
  m.visit([&](const std::string&, const Tensor<T>& t) { out.push_back(t); });
  return out;
}

template <class Model>
std::size_t parameter_count(const Model& m) {
  std::size_t n = 0;
  for (const auto& t : parameters(m)) n += t.size();
  return n;
}

// Replace the parameter handles, in visit order.
template <class Model>
void assign_parameters(Model& m, const std::vector<Tensor<typename Model::value_type>>& values) {
  using T = typename Model::value_type;
  std::size_t k = 0;
  m.visit([&](const std::string& name, Tensor<T>& t) {
    if (k >= values.size()) throw DimensionError("assign_parameters: too few tensors at '" + name + "'");
    if (values[k].shape() != t.shape()) {
      throw DimensionError("assign_parameters: shape mismatch for '" + name + "': " + ad::shape_str(values[k].shape()) +
                           " vs " + ad::shape_str(t.shape()));
    }
    t = values[k++];
  });
  if (k != values.size()) throw DimensionError("assign_parameters: too many tensors");
}

// Copy with scalar type U. Leaves of the result require grad iff `requires_grad`.
template <std::floating_point U, template <class> class M, std::floating_point T>
M<U> cast_model(const M<T>& src, bool requires_grad = true) {
  M<U> dst(src.config);
  std::vector<Tensor<U>> values;
  for (const auto& t : parameters(src)) values.push_back(t.template cast<U>(requires_grad));
  assign_parameters(dst, values);
  return dst;
}

// Fresh leaves holding the same values (drops any graph history and grads).
template <class Model>
Model detach_model(const Model& src, bool requires_grad = true) {
  Model dst = src;
  std::vector<Tensor<typename Model::value_type>> values;
  for (const auto& t : parameters(src)) values.push_back(t.detach(requires_grad));
  assign_parameters(dst, values);
  return dst;
}

template <class Model>
void zero_grads(const Model& m) {
  for (const auto& t : parameters(m)) t.zero_grad();
}

template <class Model>
double grad_norm(const Model& m) {
  double s = 0;
  for (const auto& t : parameters(m))
    for (const auto g : t.grad()) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

template <class Model>
void append_arrays(const Model& m, std::vector<ad::NamedArray>& out, const std::string& prefix = "") {
  m.visit([&](const std::string& name, const Tensor<double>& t) {
    out.push_back({prefix + name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  });
}

template <class Model>
void load_arrays(Model& m, const ad::Checkpoint& ck, const std::string& prefix = "") {
  m.visit([&](const std::string& name, Tensor<double>& t) {
    const auto* a = ck.find(prefix + name);
    if (!a) throw DataError("checkpoint is missing array '" + prefix + name + "'");
    if (a->shape != t.shape()) throw DataError("checkpoint array '" + prefix + name + "' has shape " + ad::shape_str(a->shape));
    t = Tensor<double>::from(a->shape, a->values, true);
  });
}

}  // namespace photobridge::models
