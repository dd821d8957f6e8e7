#pragma once

#include <map>
#include <string>
#include <vector>

#include "geofuse/tensor.hpp"

namespace geofuse {

/// Trainable tensor with its gradient and ADAM moments.
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> m;  // first moment
  Tensor<T> v;  // second moment
  bool decay = true;  // subject to L2 weight decay

  Parameter() = default;
  explicit Parameter(Tensor<T> init, bool decay_ = true)
      : value(std::move(init)),
        grad(value.shape()),
        m(value.shape()),
        v(value.shape()),
        decay(decay_) {}
};

/// Named parameter store plus non-trainable buffers (batch-norm moving
/// statistics). Names iterate in sorted order, which fixes the order of
/// every reduction and of checkpoint files.
template <typename T>
class ModelParams {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> init, bool decay = true) {
    auto [it, inserted] = params_.try_emplace(name, std::move(init), decay);
    if (!inserted) throw ConfigError("duplicate parameter name: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  Parameter<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  Tensor<T>& add_buffer(const std::string& name, Tensor<T> init) {
    auto [it, inserted] = buffers_.try_emplace(name, std::move(init));
    if (!inserted) throw ConfigError("duplicate buffer name: " + name);
    return it->second;
  }
  Tensor<T>& buffer(const std::string& name) {
    auto it = buffers_.find(name);
    if (it == buffers_.end()) throw ConfigError("unknown buffer: " + name);
    return it->second;
  }
  const Tensor<T>& buffer(const std::string& name) const {
    auto it = buffers_.find(name);
    if (it == buffers_.end()) throw ConfigError("unknown buffer: " + name);
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : params_) out.push_back(k);
    return out;
  }

  std::map<std::string, Parameter<T>>& all() { return params_; }
  const std::map<std::string, Parameter<T>>& all() const { return params_; }
  std::map<std::string, Tensor<T>>& buffers() { return buffers_; }
  const std::map<std::string, Tensor<T>>& buffers() const { return buffers_; }

  void zero_grad() {
    for (auto& [_, p] : params_) p.grad.zero();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  long step = 0;  // completed optimizer steps

 private:
  std::map<std::string, Parameter<T>> params_;
  std::map<std::string, Tensor<T>> buffers_;
};

}  // namespace geofuse
