#pragma once

// Parameter containers, initialisation, optimisation and checkpoint blobs
// shared by every trainable model in the library.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "advdiff/autograd.hpp"
#include "advdiff/tensor.hpp"

namespace advdiff::nn {

/// Ordered, named parameter tensors.
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor value);

  std::size_t size() const { return values_.size(); }
  const Tensor& operator[](std::size_t i) const { return values_[i]; }
  Tensor& operator[](std::size_t i) { return values_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  std::size_t index_of(const std::string& name) const;
  std::size_t scalar_count() const;

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

/// Parameters placed on a tape for one forward pass.
struct Bound {
  std::vector<ag::Var> vars;
  const ag::Var& operator[](std::size_t i) const { return vars[i]; }
};

/// `track` makes every parameter a gradient leaf; otherwise they are constants.
Bound bind(ag::Tape& tape, const ParameterSet& params, bool track);

/// Gradients of every bound parameter after tape.backward().
std::vector<Tensor> gradients(const ag::Tape& tape, const Bound& bound);

/// Conv weight (cout x cin x k x k) and zero bias with He-uniform initialisation.
void add_conv(ParameterSet& params, const std::string& name, int cin, int cout, int k,
              std::mt19937_64& rng, double gain = 1.0);
void add_linear(ParameterSet& params, const std::string& name, int in, int out,
                std::mt19937_64& rng, double gain = 1.0);

class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-8);

  void step(ParameterSet& params, const std::vector<Tensor>& grads);
  void set_learning_rate(double lr) { learning_rate_ = lr; }
  double learning_rate() const { return learning_rate_; }

 private:
  double learning_rate_, beta1_, beta2_, epsilon_;
  std::int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Global L2 norm of a gradient list.
double global_norm(const std::vector<Tensor>& grads);
/// Rescales in place so the global norm is at most `max_norm`.
void clip_global_norm(std::vector<Tensor>& grads, double max_norm);

// Binary blob layout (little-endian):
//   "ADVD" u32 version u32 count
//   count x { u32 name_len, name bytes, u32 rank, rank x i32 dims, doubles }
void save_blob(const std::filesystem::path& path, const ParameterSet& params);
ParameterSet load_blob(const std::filesystem::path& path);

}  // namespace advdiff::nn
