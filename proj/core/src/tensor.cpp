#include "probe/tensor.hpp"

#include <sstream>

namespace probe::num {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

TensorPtr Tensor::make(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    auto t = std::make_shared<Tensor>();
    t->shape_ = std::move(shape);
    t->data_ = std::move(data);
    t->requires_grad_ = requires_grad;
    return t;
}

TensorPtr Tensor::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return make(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

TensorPtr Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return make(std::move(shape), std::vector<double>(n, value), requires_grad);
}

TensorPtr Tensor::scalar(double value, bool requires_grad) {
    return make(Shape{}, std::vector<double>{value}, requires_grad);
}

double Tensor::item() const {
    if (numel() != 1)
        throw ContractError("item() on tensor with " + std::to_string(numel()) + " elements");
    return data_[0];
}

std::vector<double>& Tensor::grad() {
    if (grad_.empty()) grad_.assign(data_.size(), 0.0);
    return grad_;
}

void Tensor::zero_grad() {
    if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), 0.0);
}

void Tensor::accumulate_grad_at(std::size_t i, double v) {
    if (!requires_grad_) return;
    if (grad_.empty()) grad_.assign(data_.size(), 0.0);
    grad_[i] += v;
}

void Tensor::accumulate_grad(const std::vector<double>& g) {
    if (!requires_grad_) return;
    if (g.size() != data_.size()) throw DimensionError("gradient size mismatch");
    if (grad_.empty()) grad_.assign(data_.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) grad_[i] += g[i];
}

Graph& Graph::active() {
    thread_local Graph g;
    return g;
}

TensorPtr record_op(Shape out_shape, std::vector<double> out_data, std::vector<TensorPtr> parents,
                    std::function<void(Tensor&)> backward) {
    bool rg = false;
    for (const auto& p : parents)
        if (p && p->requires_grad()) rg = true;
    auto out = Tensor::make(std::move(out_shape), std::move(out_data), rg);
    if (!rg) return out;  // detached: never enters the graph

    Graph& g = Graph::active();
    out->parents_ = std::move(parents);
    out->backward_ = std::move(backward);
    out->node_id_ = static_cast<std::int64_t>(g.nodes_.size());
    out->graph_generation_ = g.generation_;
    g.nodes_.push_back(out);
    return out;
}

void Graph::backward(const TensorPtr& loss) {
    if (!loss) throw ContractError("backward: null loss");
    if (loss->numel() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss->shape()));
    if (!loss->requires_grad()) return;  // no trainable leaf reachable: all gradients stay zero

    if (loss->is_leaf()) {  // trivial graph: d loss / d loss = 1
        loss->accumulate_grad_at(0, 1.0);
        return;
    }
    if (loss->graph_generation_ != generation_)
        throw ContractError("backward: loss belongs to a cleared graph");

    // Mark nodes reachable from the loss through parent edges.
    std::vector<char> reachable(nodes_.size(), 0);
    std::vector<const Tensor*> stack{loss.get()};
    reachable[static_cast<std::size_t>(loss->node_id_)] = 1;
    while (!stack.empty()) {
        const Tensor* t = stack.back();
        stack.pop_back();
        for (const auto& p : t->parents_) {
            if (!p || p->node_id_ < 0) continue;
            auto id = static_cast<std::size_t>(p->node_id_);
            if (!reachable[id]) {
                reachable[id] = 1;
                stack.push_back(p.get());
            }
        }
    }

    // Interior gradients are transient per backward call; leaves accumulate.
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        if (reachable[id]) nodes_[id]->grad().assign(nodes_[id]->numel(), 0.0);
    }
    loss->grad()[0] = 1.0;

    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (!reachable[i]) continue;
        Tensor& t = *nodes_[i];
        if (t.backward_) t.backward_(t);
    }
}

void Graph::clear() {
    nodes_.clear();
    ++generation_;
}

}  // namespace probe::num
