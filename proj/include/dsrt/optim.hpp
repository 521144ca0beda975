// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dsrt/checkpoint.hpp"
#include "dsrt/graph.hpp"
#include "dsrt/rng.hpp"
#include "dsrt/tensor.hpp"

namespace dsrt {

// Ordered, named parameter registry. Iteration order is declaration order,
// which fixes the optimizer update order and the checkpoint layout.
template <typename R>
struct ParamStore {
    std::vector<std::string> names;
    std::vector<Tensor<R>> tensors;

    Tensor<R>& add(const std::string& name, Tensor<R> t) {
        t.set_requires_grad(true);
        names.push_back(name);
        tensors.push_back(std::move(t));
        return tensors.back();
    }

    Tensor<R>* find(const std::string& name) {
        for (size_t i = 0; i < names.size(); ++i) {
            if (names[i] == name) return &tensors[i];
        }
        return nullptr;
    }
    const Tensor<R>* find(const std::string& name) const {
        return const_cast<ParamStore*>(this)->find(name);
    }

    size_t size() const { return tensors.size(); }

    size_t total_coords() const {
        size_t n = 0;
        for (const auto& t : tensors) n += t.numel();
        return n;
    }

    // Copy values from another store with the identical layout.
    void copy_values_from(const ParamStore& other) {
        if (other.names != names) throw ShapeError("ParamStore: layout mismatch in copy");
        for (size_t i = 0; i < tensors.size(); ++i) {
            if (!tensors[i].same_shape(other.tensors[i])) {
                throw ShapeError("ParamStore: shape mismatch for " + names[i]);
            }
            std::copy(other.tensors[i].data(), other.tensors[i].data() + tensors[i].numel(),
                      tensors[i].data());
        }
    }

    NamedTensors<R> named() const {
        NamedTensors<R> out;
        for (size_t i = 0; i < names.size(); ++i) out.emplace_back(names[i], tensors[i]);
        return out;
    }

    void load_named(const NamedTensors<R>& src) {
        for (size_t i = 0; i < names.size(); ++i) {
            const Tensor<R>* found = nullptr;
            for (const auto& [n, t] : src) {
                if (n == names[i]) {
                    found = &t;
                    break;
                }
            }
            if (!found) throw PrereqError("checkpoint is missing parameter " + names[i]);
            if (found->shape() != tensors[i].shape()) {
                throw ShapeError("checkpoint shape mismatch for " + names[i] + ": " +
                                 shape_str(found->shape()) + " vs " +
                                 shape_str(tensors[i].shape()));
            }
            std::copy(found->data(), found->data() + tensors[i].numel(), tensors[i].data());
        }
    }

    // FNV-1a over raw parameter bytes whose name satisfies the predicate.
    uint64_t hash_where(const std::function<bool(const std::string&)>& pred) const {
        uint64_t h = 0xCBF29CE484222325ull;
        for (size_t i = 0; i < names.size(); ++i) {
            if (!pred(names[i])) continue;
            h = fnv1a(names[i].data(), names[i].size(), h);
            h = fnv1a(tensors[i].data(), tensors[i].numel() * sizeof(R), h);
        }
        return h;
    }
    uint64_t hash_all() const {
        return hash_where([](const std::string&) { return true; });
    }
};

// Adam with bias correction. Frozen parameters are skipped entirely, so
// their moments and values stay byte-identical across steps.
template <typename R>
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    std::vector<std::vector<double>> m_, v_;
    size_t t_ = 0;

    void step(ParamStore<R>& params, Graph<R>& g,
              const std::function<bool(const std::string&)>& frozen = {}) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params.tensors[i].numel(), 0.0);
                v_[i].assign(params.tensors[i].numel(), 0.0);
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            if (frozen && frozen(params.names[i])) continue;
            Tensor<R>& p = params.tensors[i];
            const Tensor<R> grad = g.grad(p);
            for (size_t c = 0; c < p.numel(); ++c) {
                const double gc = static_cast<double>(grad.at(c));
                m_[i][c] = beta1 * m_[i][c] + (1.0 - beta1) * gc;
                v_[i][c] = beta2 * v_[i][c] + (1.0 - beta2) * gc * gc;
                const double mh = m_[i][c] / bc1;
                const double vh = v_[i][c] / bc2;
                p.at(c) = static_cast<R>(static_cast<double>(p.at(c)) -
                                         lr * mh / (std::sqrt(vh) + eps));
            }
            p.check_finite("adam update");
        }
    }
};

}  // namespace dsrt
