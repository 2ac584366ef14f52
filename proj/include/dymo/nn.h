#ifndef DYMO_NN_H_
#define DYMO_NN_H_

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dymo/autodiff.h"
#include "dymo/tensor.h"
#include "json.hpp"

namespace dymo {

// Named model weights in insertion order.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  int index(const std::string& name) const;

  int count() const { return static_cast<int>(values_.size()); }
  const std::string& name(int i) const { return names_[static_cast<size_t>(i)]; }
  Tensor& value(int i) { return values_[static_cast<size_t>(i)]; }
  const Tensor& value(int i) const { return values_[static_cast<size_t>(i)]; }
  size_t scalar_count() const;

  friend bool operator==(const ParameterStore&, const ParameterStore&);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, int, std::less<>> index_;
};

// Parameters placed on a tape, as variables for training or constants for
// inference.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParameterStore& store, bool trainable);

  ad::Var operator[](const std::string& name) const { return vars_[static_cast<size_t>(store_->index(name))]; }
  const std::vector<ad::Var>& vars() const { return vars_; }
  // Gradients after a backward sweep, one per parameter.
  std::vector<Tensor> grads() const;

 private:
  const ParameterStore* store_;
  std::vector<ad::Var> vars_;
};

// He-style normal initialisation with std sqrt(gain / fan_in).
Tensor init_normal(std::vector<int> shape, int fan_in, std::mt19937_64& rng, double gain = 2.0);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : cfg_(config) {}
  // Returns the pre-clip global gradient norm.
  double step(ParameterStore& params, const std::vector<Tensor>& grads, double lr_scale = 1.0);
  int steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  int t_ = 0;
};

// Self-describing binary checkpoint: "DYMOCKPT", uint32 format version,
// uint64 header length, JSON header (kind, config, vocabulary, tensor table,
// free-form metadata), then the tensors as little-endian doubles.
struct Checkpoint {
  static constexpr uint32_t kFormatVersion = 1;
  std::string kind;
  nlohmann::json config;
  nlohmann::json vocabulary;
  nlohmann::json metadata;
  ParameterStore params;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dymo

#endif  // DYMO_NN_H_
