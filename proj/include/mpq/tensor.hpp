#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace mpq {

// Dense float32 tensor participating in a define-by-run reverse-mode graph.
// The graph is rebuilt every forward; backward() walks it once in reverse
// topological order. Reductions accumulate in double.
class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

class Tensor {
public:
    std::vector<int> shape;
    std::vector<float> v;
    std::vector<float> g;
    bool requires_grad = false;
    std::string name;

    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn;

    Tensor() = default;
    Tensor(std::vector<int> s, float fill = 0.f) : shape(std::move(s)) {
        v.assign(numel_of(shape), fill);
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("tensor: non-positive dim");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t numel() const { return v.size(); }
    bool scalar() const { return v.size() == 1; }

    // gradient flows through this node (leaf parameter or derived from one)
    bool tracked() const { return requires_grad || !parents.empty(); }

    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), 0.f);
    }
    void zero_grad() { g.assign(v.size(), 0.f); }

    float item() const {
        if (!scalar()) throw std::runtime_error("tensor: item() on non-scalar");
        return v[0];
    }

    bool all_finite() const {
        for (float x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

inline TensorPtr make_tensor(std::vector<int> shape, float fill = 0.f) {
    return std::make_shared<Tensor>(std::move(shape), fill);
}

inline TensorPtr make_tensor(std::vector<int> shape, std::vector<float> vals) {
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    if (vals.size() != Tensor::numel_of(t->shape))
        throw std::invalid_argument("tensor: value count does not match shape");
    t->v = std::move(vals);
    return t;
}

inline TensorPtr make_param(std::vector<int> shape, std::vector<float> vals) {
    auto t = make_tensor(std::move(shape), std::move(vals));
    t->requires_grad = true;
    return t;
}

inline TensorPtr make_scalar(float x, bool requires_grad = false) {
    auto t = make_tensor({1}, std::vector<float>{x});
    t->requires_grad = requires_grad;
    return t;
}

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape) + " vs " + shape_str(b.shape));
}

inline void check_finite(const char* op, const Tensor& t) {
    if (!t.all_finite())
        throw std::runtime_error(std::string(op) + ": non-finite values");
}

// Reverse-mode sweep from a scalar loss. DFS builds the topological order of
// the subgraph actually reachable from the loss; each node's backward rule
// adds into its parents' grads (accumulation across shared subexpressions).
inline void backward(const TensorPtr& loss) {
    if (!loss->scalar()) throw std::runtime_error("backward: loss must be scalar");
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> seen;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.push_back({loss.get(), 0});
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* p = node->parents[idx++].get();
            if (p->tracked() && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Tensor* n : order) n->ensure_grad();
    loss->g[0] = 1.f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

}  // namespace mpq
