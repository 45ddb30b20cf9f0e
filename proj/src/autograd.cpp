#include "caal/autograd.hpp"

#include <unordered_map>
#include <unordered_set>

#include "caal/ops.hpp"

namespace caal::ag {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

GradMode::GradMode(bool on) : prev_(g_grad_enabled) { g_grad_enabled = on; }
GradMode::~GradMode() { g_grad_enabled = prev_; }

Var make_op(Tensor out, std::vector<Var> parents, BackwardFn backward, const char* op) {
    auto n = std::make_shared<Node>();
    n->value = std::move(out);
    n->op = op;
    bool track = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p.requires_grad()) {
                track = true;
                break;
            }
    }
    if (track) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward = std::move(backward);
    }
    return Var(std::move(n));
}

std::vector<Var> grad(const Var& root, const std::vector<Var>& wrt, bool create_graph) {
    if (!root.defined()) throw ShapeError("ag::grad: undefined root");
    if (root.val().size() != 1) throw ShapeError("ag::grad: root must be scalar");

    // iterative topological order over the subgraph that requires grad
    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    if (root.requires_grad()) stack.push_back({root.node(), 0});
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx == 0 && seen.count(n)) {
            stack.pop_back();
            continue;
        }
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx].node();
            ++idx;
            if (p->requires_grad && !seen.count(p)) stack.push_back({p, 0});
        } else {
            seen.insert(n);
            topo.push_back(n);
            stack.pop_back();
        }
    }

    std::unordered_map<Node*, Var> grads;
    grads[root.node()] = Var::leaf(Tensor::full(root.val().shape(), 1.0));

    GradMode guard(create_graph);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        auto gi = grads.find(n);
        if (gi == grads.end() || !n->backward) continue;
        std::vector<Var> pgrads = n->backward(gi->second);
        if (pgrads.size() != n->parents.size())
            throw ShapeError(std::string("ag::grad: backward arity mismatch in op ") + n->op);
        for (size_t i = 0; i < pgrads.size(); ++i) {
            if (!pgrads[i].defined()) continue;
            Node* p = n->parents[i].node();
            if (!p->requires_grad) continue;
            check_same_shape(pgrads[i].val(), p->value, n->op);
            auto pg = grads.find(p);
            if (pg == grads.end())
                grads[p] = pgrads[i];
            else
                pg->second = ops::add(pg->second, pgrads[i]);
        }
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
        auto gi = grads.find(w.node());
        if (gi == grads.end())
            out.push_back(Var::leaf(Tensor::zeros(w.val().shape())));
        else
            out.push_back(gi->second);
    }
    return out;
}

}  // namespace caal::ag
