#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "probe/error.hpp"

namespace probe::num {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense float64 tensor participating in a reverse-mode differentiation
// graph. Tensors created directly are leaves; tensors returned by ops carry
// a backward closure and are recorded on the active Graph in creation order,
// which is a valid topological order by construction.
class Tensor : public std::enable_shared_from_this<Tensor> {
public:
    static TensorPtr make(Shape shape, std::vector<double> data, bool requires_grad = false);
    static TensorPtr zeros(Shape shape, bool requires_grad = false);
    static TensorPtr full(Shape shape, double value, bool requires_grad = false);
    static TensorPtr scalar(double value, bool requires_grad = false);

    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double item() const;

    bool requires_grad() const { return requires_grad_; }
    bool is_leaf() const { return !backward_; }

    // Gradient buffer; allocated lazily, zero-filled. Only meaningful for
    // requires_grad tensors.
    std::vector<double>& grad();
    const std::vector<double>* grad_if_present() const { return grad_.empty() ? nullptr : &grad_; }
    bool has_grad() const { return !grad_.empty(); }
    void zero_grad();

    // Accumulate into the gradient buffer iff this tensor requires grad.
    void accumulate_grad_at(std::size_t i, double v);
    void accumulate_grad(const std::vector<double>& g);

private:
    friend class Graph;
    friend TensorPtr record_op(Shape, std::vector<double>, std::vector<TensorPtr>,
                               std::function<void(Tensor&)>);

    Shape shape_;
    std::vector<double> data_;
    bool requires_grad_ = false;
    std::vector<double> grad_;

    std::vector<TensorPtr> parents_;
    std::function<void(Tensor&)> backward_;
    std::int64_t node_id_ = -1;
    std::uint64_t graph_generation_ = 0;
};

// Ordered record of op outputs. Parents of every node precede it, so the
// backward pass is a single reverse sweep that visits each node exactly once.
class Graph {
public:
    static Graph& active();

    // Populates dLoss/dLeaf for every requires_grad leaf reachable from
    // `loss`. Repeated calls without zero_grad accumulate into leaves;
    // transient interior gradients are reset on every call.
    void backward(const TensorPtr& loss);

    // Drops all recorded nodes; the next forward pass starts a fresh tape.
    void clear();

    std::size_t size() const { return nodes_.size(); }

private:
    friend TensorPtr record_op(Shape, std::vector<double>, std::vector<TensorPtr>,
                               std::function<void(Tensor&)>);
    std::vector<TensorPtr> nodes_;
    std::uint64_t generation_ = 1;
};

// Creates the output of an op. requires_grad is inherited from parents; the
// backward closure is kept and the node recorded only when grad is needed.
TensorPtr record_op(Shape out_shape, std::vector<double> out_data, std::vector<TensorPtr> parents,
                    std::function<void(Tensor&)> backward);

inline void backward(const TensorPtr& loss) { Graph::active().backward(loss); }

}  // namespace probe::num
