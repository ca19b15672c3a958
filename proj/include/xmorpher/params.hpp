#pragma once

// Named, ordered parameter storage. Ordering is creation order and drives
// the optimizer state layout and checkpoint serialization, so it must be
// deterministic for a given configuration.

#include <string>
#include <unordered_map>
#include <vector>

#include "xmorpher/rng.hpp"
#include "xmorpher/tensor.hpp"

namespace xm {

template <typename T>
class ParamStore {
public:
    Tensor<T> add(const std::string& name, Tensor<T> value) {
        if (index_.count(name)) fail("ParamStore::add", "duplicate parameter " + name);
        value.set_requires_grad(true);
        index_[name] = items_.size();
        items_.push_back({name, value});
        return value;
    }

    Tensor<T> add_uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::vector<T> v(numel(shape));
        for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
        return add(name, Tensor<T>::from(std::move(shape), std::move(v)));
    }

    Tensor<T> add_zeros(const std::string& name, Shape shape) {
        return add(name, Tensor<T>::zeros(std::move(shape)));
    }

    Tensor<T> add_ones(const std::string& name, Shape shape) {
        return add(name, Tensor<T>::full(std::move(shape), T(1)));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) fail("ParamStore::at", "unknown parameter " + name);
        return items_[it->second].value;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) fail("ParamStore::at", "unknown parameter " + name);
        return items_[it->second].value;
    }

    struct Item {
        std::string name;
        Tensor<T> value;
    };

    const std::vector<Item>& items() const { return items_; }
    std::vector<Item>& items() { return items_; }
    std::size_t count() const { return items_.size(); }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& it : items_) n += it.value.size();
        return n;
    }

    void zero_grads() {
        for (auto& it : items_) it.value.zero_grad();
    }

private:
    std::vector<Item> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

} // namespace xm
