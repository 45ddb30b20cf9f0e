#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "caal/tensor.hpp"

namespace caal::ag {

class Var;
using BackwardFn = std::function<std::vector<Var>(const Var& grad_out)>;

struct Node {
    Tensor value;
    bool requires_grad = false;
    std::vector<Var> parents;
    BackwardFn backward;  // empty for leaves and constants
    const char* op = "leaf";
};

// Handle to a node in the dynamically-built computation graph. Backward
// functions emit their results through the same op layer, so gradients are
// themselves graph nodes when grad mode is on — this is what makes the
// gradient-penalty term (a loss on a gradient) trainable.
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Var leaf(Tensor t, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->value = std::move(t);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    bool defined() const { return n_ != nullptr; }
    const Tensor& val() const { return n_->value; }
    Tensor& mutable_val() { return n_->value; }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    Node* node() const { return n_.get(); }
    std::shared_ptr<Node> node_ptr() const { return n_; }

    // same value, cut from the graph
    Var detach() const { return leaf(n_->value, false); }

    const std::vector<int>& shape() const { return n_->value.shape(); }
    double item() const { return n_->value.item(); }

private:
    std::shared_ptr<Node> n_;
};

bool grad_enabled();

// RAII scope for enabling/disabling graph recording.
struct GradMode {
    explicit GradMode(bool on);
    ~GradMode();

private:
    bool prev_;
};

// Record an op result. If recording is off or no parent needs gradients the
// node is emitted as a constant (no parents, no backward closure kept).
Var make_op(Tensor out, std::vector<Var> parents, BackwardFn backward, const char* op);

// Reverse-mode gradient of a scalar root w.r.t. each entry of `wrt`.
// With create_graph=true the returned Vars carry their own graphs and can be
// differentiated again. Entries unreachable from the root yield zeros.
std::vector<Var> grad(const Var& root, const std::vector<Var>& wrt, bool create_graph = false);

}  // namespace caal::ag
