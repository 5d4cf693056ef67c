#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rcp/error.hpp"

namespace rcp {

class Tape;

namespace detail {

struct TensorImpl {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;        // allocated lazily; same length as data
    bool requires_grad = false;      // leaf flag, set by the caller
    std::uint64_t tape_id = 0;       // nonzero: interior value of that tape build

    std::size_t numel() const { return data.size(); }
};

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

}  // namespace detail

// Dense row-major tensor of 64-bit reals. Value-semantic handle over shared
// storage: copies alias the same buffer, clone() detaches. Gradients appear
// on requires_grad leaves after Tape::backward.
class Tensor {
public:
    Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        for (std::size_t d : shape) {
            if (d == 0) throw DimensionError("Tensor: zero-size dimension");
        }
        impl_->shape = std::move(shape);
        impl_->data.assign(detail::shape_numel(impl_->shape), fill);
    }

    static Tensor scalar(double v) {
        Tensor t({1});
        t.impl_->data[0] = v;
        return t;
    }

    static Tensor from(std::vector<std::size_t> shape, std::vector<double> values) {
        Tensor t(std::move(shape));
        if (values.size() != t.numel()) {
            throw DimensionError("Tensor::from: value count does not match shape");
        }
        t.impl_->data = std::move(values);
        return t;
    }

    const std::vector<std::size_t>& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t numel() const { return impl_->data.size(); }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<double>& grad() {
        if (impl_->grad.empty()) throw ContractError("Tensor::grad: no gradient present");
        return impl_->grad;
    }
    const std::vector<double>& grad() const {
        if (impl_->grad.empty()) throw ContractError("Tensor::grad: no gradient present");
        return impl_->grad;
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        impl_->requires_grad = on;
        return *this;
    }

    double value() const {
        if (numel() != 1) throw ContractError("Tensor::value: tensor is not scalar");
        return impl_->data[0];
    }

    double& at(std::size_t i) {
        check_rank(1);
        return impl_->data[i];
    }
    double at(std::size_t i) const {
        check_rank(1);
        return impl_->data[i];
    }
    double& at(std::size_t i, std::size_t j) {
        check_rank(2);
        return impl_->data[i * impl_->shape[1] + j];
    }
    double at(std::size_t i, std::size_t j) const {
        check_rank(2);
        return impl_->data[i * impl_->shape[1] + j];
    }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        check_rank(3);
        return impl_->data[(i * impl_->shape[1] + j) * impl_->shape[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        check_rank(3);
        return impl_->data[(i * impl_->shape[1] + j) * impl_->shape[2] + k];
    }

    Tensor clone() const {
        Tensor t;
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < impl_->shape.size(); ++i) {
            if (i) os << "x";
            os << impl_->shape[i];
        }
        os << "]";
        return os.str();
    }

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

private:
    void check_rank(std::size_t r) const {
        if (impl_->shape.size() != r) {
            throw DimensionError("Tensor: rank " + std::to_string(impl_->shape.size()) +
                                 " access with rank-" + std::to_string(r) + " indexer");
        }
    }

    std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape. Ops executed while a Tape is active append one node each,
// in forward (topological) order. backward() zeroes the gradients of every
// participating tensor, seeds the scalar loss with 1, then runs the nodes in
// reverse. One backward per build; the node list is cleared afterwards.
//
// A Tape must stay on the thread that created it for its whole lifecycle.
class Tape {
public:
    Tape() : id_(next_id()++), prev_(current()) { current() = this; }

    ~Tape() { current() = prev_; }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return current(); }

    std::uint64_t id() const { return id_; }
    std::size_t size() const { return nodes_.size(); }

    void record(std::vector<std::shared_ptr<detail::TensorImpl>> touched,
                std::function<void()> backward_fn) {
        if (spent_) throw ContractError("Tape: recording onto a spent tape");
        for (auto& t : touched) touched_.push_back(std::move(t));
        nodes_.push_back(std::move(backward_fn));
    }

    void backward(const Tensor& loss) {
        if (spent_) throw ContractError("Tape: second backward on the same build");
        if (loss.numel() != 1) {
            throw ContractError("Tape::backward: loss must be scalar, got " + loss.shape_str());
        }
        spent_ = true;
        for (auto& t : touched_) {
            t->grad.assign(t->data.size(), 0.0);
        }
        auto loss_impl = loss.impl();
        if (loss_impl->grad.size() != loss_impl->data.size()) {
            loss_impl->grad.assign(loss_impl->data.size(), 0.0);
        }
        loss_impl->grad[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
        touched_.clear();
    }

private:
    static Tape*& current() {
        thread_local Tape* cur = nullptr;
        return cur;
    }
    static std::uint64_t& next_id() {
        static std::uint64_t id = 1;
        return id;
    }

    std::uint64_t id_;
    Tape* prev_;
    bool spent_ = false;
    std::vector<std::function<void()>> nodes_;
    std::vector<std::shared_ptr<detail::TensorImpl>> touched_;
};

namespace detail {

// True when gradients should flow into this tensor on the active tape.
inline bool wants_grad(const std::shared_ptr<TensorImpl>& t) {
    Tape* tape = Tape::active();
    if (!tape) return false;
    return t->requires_grad || t->tape_id == tape->id();
}

// Marks `out` as an interior value of the active tape and records the node.
inline void record_node(const std::shared_ptr<TensorImpl>& out,
                        std::vector<std::shared_ptr<TensorImpl>> touched,
                        std::function<void()> fn) {
    Tape* tape = Tape::active();
    out->tape_id = tape->id();
    touched.push_back(out);
    tape->record(std::move(touched), std::move(fn));
}

}  // namespace detail

// Convenience entry point matching the build/backward lifecycle: dispatches to
// the active tape that produced `loss`.
inline void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (!tape) throw ContractError("backward: no active tape");
    tape->backward(loss);
}

}  // namespace rcp
