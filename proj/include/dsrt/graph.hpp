// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode tape. Ops record themselves on the innermost active Graph in
// creation order, which is already a topological order, so backward() is a
// single reverse sweep with a fixed, deterministic accumulation order.
// Storage never references parent tensors, so releasing a graph frees deep
// op chains iteratively rather than by recursive destructor descent.
#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "dsrt/errors.hpp"
#include "dsrt/tensor.hpp"

namespace dsrt {

namespace detail {
inline std::vector<void*>& graph_stack() {
    static thread_local std::vector<void*> stack;
    return stack;
}
inline int& nograd_depth() {
    static thread_local int depth = 0;
    return depth;
}
}  // namespace detail

// Disables recording while alive. Nestable.
struct NoGradScope {
    NoGradScope() { ++detail::nograd_depth(); }
    ~NoGradScope() { --detail::nograd_depth(); }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;
};

template <typename R>
class Graph {
public:
    using BackFn = std::function<void(Graph&, const std::vector<R>&)>;

    Graph() { detail::graph_stack().push_back(this); }
    ~Graph() { detail::graph_stack().pop_back(); }
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    static Graph* active() {
        if (detail::nograd_depth() > 0) return nullptr;
        auto& s = detail::graph_stack();
        return s.empty() ? nullptr : static_cast<Graph*>(s.back());
    }

    // Custom-op API: `back` receives the adjoint of `out` and accumulates
    // into the inputs it captured via grad_acc().
    void record(const Tensor<R>& out, BackFn back) {
        recs_.push_back(Rec{out, std::move(back)});
    }

    std::vector<R>& grad_acc(const Tensor<R>& t) {
        auto it = grads_.find(t.id());
        if (it == grads_.end()) {
            it = grads_.emplace(t.id(), std::vector<R>(t.numel(), R(0))).first;
        }
        return it->second;
    }

    bool has_grad(const Tensor<R>& t) const { return grads_.count(t.id()) > 0; }

    // Accumulated adjoint of t; zeros if nothing flowed into it.
    Tensor<R> grad(const Tensor<R>& t) const {
        auto it = grads_.find(t.id());
        if (it == grads_.end()) return Tensor<R>::zeros(t.shape());
        return Tensor<R>::from_data(t.shape(), it->second);
    }

    void backward(const Tensor<R>& loss) {
        if (loss.numel() != 1) {
            throw ShapeError("backward: loss must be scalar, got shape " +
                             shape_str(loss.shape()));
        }
        if (backward_done_) {
            throw Error("backward: already run on this graph");
        }
        backward_done_ = true;
        grads_[loss.id()] = {R(1)};
        for (auto it = recs_.rbegin(); it != recs_.rend(); ++it) {
            auto g = grads_.find(it->out.id());
            if (g == grads_.end()) continue;
            it->back(*this, g->second);
        }
    }

    size_t num_recorded() const { return recs_.size(); }

private:
    struct Rec {
        Tensor<R> out;  // keeps output storage alive; captured lambdas keep inputs alive
        BackFn back;
    };
    std::vector<Rec> recs_;
    std::unordered_map<uint64_t, std::vector<R>> grads_;
    bool backward_done_ = false;
};

namespace detail {
// True when the result of an op over `ins` must be recorded.
template <typename R, typename... Ts>
bool should_record(const Ts&... ins) {
    if (Graph<R>::active() == nullptr) return false;
    return (ins.requires_grad() || ...);
}
}  // namespace detail

}  // namespace dsrt
