#pragma once
// Named parameter store with stable iteration order. Serialization and the
// optimizer both index parameters by position, so insertion order is part of
// the contract.

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "physgraph/array.hpp"

namespace physgraph::nn {

struct Param {
    std::string name;
    Array value;
    Array grad;          // same shape as value, accumulated between zero_grad() calls
    bool trainable = true;
};

class ParamStore {
public:
    int add(const std::string& name, Array init, bool trainable = true) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        int id = static_cast<int>(params_.size());
        Param p;
        p.name = name;
        p.grad = Array(init.shape);
        p.value = std::move(init);
        p.trainable = trainable;
        params_.push_back(std::move(p));
        index_[name] = id;
        return id;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    int id_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }

    Param& at(int id) { return params_[static_cast<std::size_t>(id)]; }
    const Param& at(int id) const { return params_[static_cast<std::size_t>(id)]; }
    Param& at(const std::string& name) { return params_[static_cast<std::size_t>(id_of(name))]; }
    const Param& at(const std::string& name) const {
        return params_[static_cast<std::size_t>(id_of(name))];
    }

    std::size_t size() const { return params_.size(); }

    std::vector<Param>& all() { return params_; }
    const std::vector<Param>& all() const { return params_; }

    void zero_grad() {
        for (auto& p : params_)
            std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
    }

    std::int64_t scalar_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

private:
    std::vector<Param> params_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace physgraph::nn
