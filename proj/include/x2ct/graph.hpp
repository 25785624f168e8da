#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "x2ct/tensor.hpp"

namespace x2ct {

class Graph;

/// Lightweight handle to a node owned by a Graph.
struct Var {
    Graph* g = nullptr;
    int id = -1;
    bool valid() const { return g != nullptr && id >= 0; }
};

/// Reverse-mode autodiff over an explicit operation graph. Nodes are appended
/// in topological order at build time; the graph can be re-run with fresh
/// input bindings. Gradient accumulation walks nodes in fixed reverse order,
/// so results are bit-reproducible.
///
/// A Graph instance is single-threaded; independent graphs may run in
/// parallel.
class Graph {
public:
    struct Node {
        std::string op;
        std::string name;  // binding name for inputs, diagnostic tag otherwise
        std::vector<int> args;
        Shape shape;
        bool is_input = false;
        bool bound = false;
        bool requires_grad = false;
        int id = -1;
        std::function<Tensor(Graph&, const Node&)> eval;
        std::function<void(Graph&, const Node&)> backprop;
        Tensor value;
    };

    /// Named leaf; must be bound before forward(). Gradients are only
    /// propagated into inputs created with requires_grad=true.
    Var input(const std::string& name, Shape shape, bool requires_grad = true);
    Var constant(Tensor value, std::string tag = "");

    void bind(const std::string& name, Tensor value);
    bool has_input(const std::string& name) const { return inputs_.count(name) > 0; }

    /// Evaluate every node once, in topological order. Pure: identical
    /// bindings give bit-identical values.
    void forward();

    /// Reverse-mode gradients of a scalar seed w.r.t. every requires_grad
    /// node. forward() must have run.
    void backward(Var seed);

    const Tensor& value(Var v) const;
    Tensor grad(Var v) const;

    /// Expose a node under a name in forward_eval() results.
    void mark_output(const std::string& name, Var v);

    /// Spec-facing conveniences: run with a fresh set of bindings and return
    /// named values / leaf gradients keyed by name.
    std::unordered_map<std::string, Tensor> forward_eval(const std::unordered_map<std::string, Tensor>& bindings);
    std::unordered_map<std::string, Tensor> backward_leaf_grads(Var seed);

    void set_tag(Var v, const std::string& tag);
    /// Tag of the first node whose forward value is non-finite, or "" if all
    /// finite. Used for training diagnostics.
    std::string first_nonfinite_node() const;

    int node_count() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    // Internals used by op builders and node closures.
    Var add_node(Node n);
    const Tensor& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    std::vector<double>& gslot(int id) { return grads_[static_cast<std::size_t>(id)]; }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    void touch(int id) { touched_[static_cast<std::size_t>(id)] = true; }

private:
    std::vector<Node> nodes_;
    std::unordered_map<std::string, int> inputs_;
    std::vector<std::pair<std::string, int>> outputs_;
    std::vector<std::vector<double>> grads_;
    std::vector<char> touched_;
    bool forward_done_ = false;
};

// Elementwise, same-shape unless noted.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var recip(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var vexp(Var a);
Var vlog(Var a);
Var scalar_add(Var a, double c);
Var scalar_mul(Var a, double c);

Var matmul(Var a, Var b);  // (m,k)x(k,n) -> (m,n)
/// log|det W| of a square matrix; errors below the 1e-12 singularity floor.
Var logabsdet(Var w);

/// 3D convolution over (D,H,W,Cin) with kernel (kd,kh,kw,Cin,Cout), stride 1,
/// zero "same" padding, odd kernel sizes. Bias shape (Cout).
Var conv3d(Var x, Var w, Var b);

Var channel_scale(Var x, Var s);  // y[..,c] = x[..,c] * s[c]
Var channel_shift(Var x, Var b);  // y[..,c] = x[..,c] + b[c]

Var squeeze3d(Var x);    // (D,H,W,C) -> (D/2,H/2,W/2,8C), volume-preserving
Var unsqueeze3d(Var x);  // exact inverse

Var reshape(Var x, Shape shape);
Var transpose(Var x, std::vector<int> perm);
Var slice_channels(Var x, std::int64_t c0, std::int64_t c1);
Var concat_channels(Var a, Var b);

Var sum_all(Var x);  // -> scalar
Var sum_axes(Var x, std::vector<int> axes);
Var mean_axes(Var x, std::vector<int> axes);
Var sqnorm(Var x);  // sum of squares -> scalar

/// Averaging projections of a single-channel volume; these are the same
/// kernels data_io uses for DRR synthesis.
Var project_depth(Var y);  // (D,H,W,1) -> (H,W)
Var project_width(Var y);  // (D,H,W,1) -> (D,H)

}  // namespace x2ct
