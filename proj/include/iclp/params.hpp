#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "iclp/tensor.hpp"

namespace iclp {

// Named parameter set. std::map keeps iteration order stable across runs,
// which the determinism contract relies on.
template <typename T>
class ModuleParams {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        auto [it, fresh] = params_.emplace(name, std::move(t));
        if (!fresh) throw std::invalid_argument("duplicate parameter name: " + name);
        return it->second;
    }

    Tensor<T>& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    size_t size() const { return params_.size(); }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& [k, v] : params_) n += v.size();
        return n;
    }

    template <typename U>
    ModuleParams<U> cast() const {
        ModuleParams<U> out;
        for (const auto& [k, v] : params_) out.add(k, v.template cast<U>());
        return out;
    }

private:
    std::map<std::string, Tensor<T>> params_;
};

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

}  // namespace iclp
