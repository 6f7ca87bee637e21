#pragma once

// Named parameter maps. Deterministic iteration order (sorted names) is relied
// on by the optimizer, EMA updates, and the checkpoint tensor directory.

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace flowguide {

template <typename S>
class ParamStore {
public:
    struct Entry {
        Shape shape;
        std::shared_ptr<std::vector<S>> data;
    };

    void add(const std::string& name, Shape shape, std::vector<S> init) {
        if (entries_.count(name)) throw TensorError("ParamStore: duplicate name " + name);
        if (shape_numel(shape) != static_cast<int64_t>(init.size()))
            throw ShapeError("ParamStore: bad init size for " + name);
        entries_[name] = Entry{std::move(shape), std::make_shared<std::vector<S>>(std::move(init))};
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    const Entry& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw TensorError("ParamStore: unknown parameter " + name);
        return it->second;
    }

    std::vector<S>& data(const std::string& name) { return *entries_.at(name).data; }
    const std::vector<S>& data(const std::string& name) const { return *entries_.at(name).data; }

    // graph leaf sharing this parameter's buffer
    Tensor<S> tensor(const std::string& name, bool requires_grad) const {
        const Entry& e = at(name);
        return Tensor<S>::leaf_shared(e.shape, e.data, requires_grad);
    }

    size_t size() const { return entries_.size(); }
    int64_t total_elems() const {
        int64_t n = 0;
        for (const auto& [k, e] : entries_) n += shape_numel(e.shape);
        return n;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [k, v] : entries_) out.push_back(k);
        return out;
    }

    // deep copy (EMA initialization, checkpoint snapshots)
    ParamStore clone() const {
        ParamStore out;
        for (const auto& [k, e] : entries_) out.entries_[k] = Entry{e.shape, std::make_shared<std::vector<S>>(*e.data)};
        return out;
    }

    template <typename T>
    ParamStore<T> cast() const {
        ParamStore<T> out;
        for (const auto& [k, e] : entries_) {
            std::vector<T> v(e.data->begin(), e.data->end());
            out.add(k, e.shape, std::move(v));
        }
        return out;
    }

    bool same_layout(const ParamStore& other) const {
        if (entries_.size() != other.entries_.size()) return false;
        auto it = entries_.begin();
        auto jt = other.entries_.begin();
        for (; it != entries_.end(); ++it, ++jt)
            if (it->first != jt->first || it->second.shape != jt->second.shape) return false;
        return true;
    }

    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }

private:
    std::map<std::string, Entry> entries_;
};

// Leaf tensors bound to a ParamStore's buffers. The binding owns the graph
// leaves, so gradients accumulated by backward() stay reachable by name.
template <typename S>
struct BoundParams {
    std::map<std::string, Tensor<S>> tensors;

    const Tensor<S>& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw TensorError("BoundParams: unknown parameter " + name);
        return it->second;
    }

    Tensor<S> grad(const std::string& name) const { return at(name).grad(); }
};

template <typename S>
BoundParams<S> bind_params(const ParamStore<S>& store, bool requires_grad) {
    BoundParams<S> out;
    for (const auto& [name, e] : store)
        out.tensors.emplace(name, Tensor<S>::leaf_shared(e.shape, e.data, requires_grad));
    return out;
}

namespace init {

// fan-in scaled normal, std = 1/sqrt(fan_in)
template <typename S>
std::vector<S> fan_in_normal(int64_t fan_in, int64_t n, Pcg32& rng) {
    std::vector<S> v(static_cast<size_t>(n));
    double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : v) x = static_cast<S>(rng.normal() * s);
    return v;
}

template <typename S>
std::vector<S> zeros(int64_t n) {
    return std::vector<S>(static_cast<size_t>(n), S(0));
}

}  // namespace init

}  // namespace flowguide
