#include "x2ct/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "x2ct/projection.hpp"

namespace x2ct {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require(bool ok, const std::string& op, const std::string& msg) {
    if (!ok) throw Error("E_SHAPE", op + ": " + msg);
}

Graph* same_graph(Var a, Var b) {
    if (a.g == nullptr || b.g == nullptr || a.g != b.g)
        throw Error("E_STATE", "operands belong to different graphs");
    return a.g;
}

/// Gradient slot of an argument, or nullptr when no gradient is needed.
std::vector<double>* gin(Graph& g, int arg_id) {
    if (!g.needs_grad(arg_id)) return nullptr;
    g.touch(arg_id);
    return &g.gslot(arg_id);
}

Var unary(Var a, const std::string& op, std::function<double(double)> f, std::function<double(double, double)> df) {
    Graph::Node n;
    n.op = op;
    n.args = {a.id};
    n.shape = a.g->node(a.id).shape;
    n.eval = [f](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        std::vector<double> out(static_cast<std::size_t>(x.size()));
        for (std::int64_t i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = f(x[i]);
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [df](Graph& g, const Graph::Node& self) {
        auto* ga = gin(g, self.args[0]);
        if (!ga) return;
        const Tensor& x = g.val(self.args[0]);
        const Tensor& y = self.value;
        const auto& go = g.gslot(self.id);
        for (std::int64_t i = 0; i < x.size(); ++i)
            (*ga)[static_cast<std::size_t>(i)] += go[static_cast<std::size_t>(i)] * df(x[i], y[i]);
    };
    return a.g->add_node(std::move(n));
}

}  // namespace

Var Graph::add_node(Node n) {
    n.id = static_cast<int>(nodes_.size());
    for (int a : n.args) {
        if (a < 0 || a >= n.id) throw Error("E_STATE", "graph is not topologically ordered");
        if (nodes_[static_cast<std::size_t>(a)].requires_grad) n.requires_grad = true;
    }
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.back().id};
}

Var Graph::input(const std::string& name, Shape shape, bool requires_grad) {
    if (inputs_.count(name)) throw Error("E_STATE", "duplicate input name: " + name);
    Node n;
    n.op = "input";
    n.name = name;
    n.shape = std::move(shape);
    n.is_input = true;
    Var v = add_node(std::move(n));
    nodes_.back().requires_grad = requires_grad;
    inputs_[name] = v.id;
    return v;
}

Var Graph::constant(Tensor value, std::string tag) {
    Node n;
    n.op = "const";
    n.name = std::move(tag);
    n.shape = value.shape();
    n.bound = true;
    n.value = std::move(value);
    return add_node(std::move(n));
}

void Graph::bind(const std::string& name, Tensor value) {
    auto it = inputs_.find(name);
    if (it == inputs_.end()) throw Error("E_UNBOUND", "no input named '" + name + "'");
    Node& n = nodes_[static_cast<std::size_t>(it->second)];
    if (value.shape() != n.shape)
        throw Error("E_SHAPE", "binding '" + name + "' expects shape " + shape_str(n.shape) + ", got " +
                                   shape_str(value.shape()));
    n.value = std::move(value);
    n.bound = true;
}

void Graph::forward() {
    for (Node& n : nodes_) {
        if (n.is_input || n.op == "const") {
            if (!n.bound) throw Error("E_UNBOUND", "unbound input '" + n.name + "'");
            continue;
        }
        n.value = n.eval(*this, n);
    }
    forward_done_ = true;
}

void Graph::backward(Var seed) {
    if (!forward_done_) throw Error("E_STATE", "backward() requires a prior forward()");
    if (seed.g != this || seed.id < 0 || seed.id >= node_count()) throw Error("E_STATE", "bad seed node");
    const Node& s = nodes_[static_cast<std::size_t>(seed.id)];
    if (s.value.size() != 1) throw Error("E_SHAPE", "backward seed must be scalar, got " + shape_str(s.value.shape()));
    grads_.resize(nodes_.size());
    touched_.assign(nodes_.size(), 0);
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        grads_[i].assign(static_cast<std::size_t>(nodes_[i].value.size()), 0.0);
    grads_[static_cast<std::size_t>(seed.id)][0] = 1.0;
    touched_[static_cast<std::size_t>(seed.id)] = 1;
    for (int i = seed.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!touched_[static_cast<std::size_t>(i)] || !n.requires_grad || !n.backprop) continue;
        n.backprop(*this, n);
    }
}

const Tensor& Graph::value(Var v) const {
    if (v.g != this || v.id < 0 || v.id >= node_count()) throw Error("E_STATE", "bad node handle");
    return nodes_[static_cast<std::size_t>(v.id)].value;
}

Tensor Graph::grad(Var v) const {
    if (v.g != this || v.id < 0 || v.id >= node_count()) throw Error("E_STATE", "bad node handle");
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (grads_.size() != nodes_.size()) throw Error("E_STATE", "grad() requires a prior backward()");
    return Tensor(n.shape, grads_[static_cast<std::size_t>(v.id)]);
}

void Graph::mark_output(const std::string& name, Var v) {
    if (v.g != this) throw Error("E_STATE", "bad node handle");
    outputs_.emplace_back(name, v.id);
}

std::unordered_map<std::string, Tensor> Graph::forward_eval(const std::unordered_map<std::string, Tensor>& bindings) {
    for (const auto& [name, t] : bindings) bind(name, t);
    forward();
    std::unordered_map<std::string, Tensor> out;
    for (const auto& [name, id] : inputs_) out[name] = nodes_[static_cast<std::size_t>(id)].value;
    for (const auto& [name, id] : outputs_) out[name] = nodes_[static_cast<std::size_t>(id)].value;
    return out;
}

std::unordered_map<std::string, Tensor> Graph::backward_leaf_grads(Var seed) {
    backward(seed);
    std::unordered_map<std::string, Tensor> out;
    for (const auto& [name, id] : inputs_) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.requires_grad) out[name] = Tensor(n.shape, grads_[static_cast<std::size_t>(id)]);
    }
    return out;
}

void Graph::set_tag(Var v, const std::string& tag) {
    if (v.g != this) throw Error("E_STATE", "bad node handle");
    nodes_[static_cast<std::size_t>(v.id)].name = tag;
}

std::string Graph::first_nonfinite_node() const {
    for (const Node& n : nodes_) {
        if (n.value.empty()) continue;
        if (!n.value.all_finite()) return n.name.empty() ? n.op : n.name;
    }
    return "";
}

// ---------------------------------------------------------------------------
// Elementwise ops

Var add(Var a, Var b) {
    Graph* g = same_graph(a, b);
    require(g->node(a.id).shape == g->node(b.id).shape, "add", "shape mismatch");
    Graph::Node n;
    n.op = "add";
    n.args = {a.id, b.id};
    n.shape = g->node(a.id).shape;
    n.eval = [](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        const Tensor& y = g.val(self.args[1]);
        std::vector<double> out(static_cast<std::size_t>(x.size()));
        for (std::int64_t i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = x[i] + y[i];
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        const auto& go = g.gslot(self.id);
        for (int k = 0; k < 2; ++k)
            if (auto* ga = gin(g, self.args[static_cast<std::size_t>(k)]))
                for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
    };
    return g->add_node(std::move(n));
}

Var sub(Var a, Var b) {
    Graph* g = same_graph(a, b);
    require(g->node(a.id).shape == g->node(b.id).shape, "sub", "shape mismatch");
    Graph::Node n;
    n.op = "sub";
    n.args = {a.id, b.id};
    n.shape = g->node(a.id).shape;
    n.eval = [](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        const Tensor& y = g.val(self.args[1]);
        std::vector<double> out(static_cast<std::size_t>(x.size()));
        for (std::int64_t i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = x[i] - y[i];
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        const auto& go = g.gslot(self.id);
        if (auto* ga = gin(g, self.args[0]))
            for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
        if (auto* gb = gin(g, self.args[1]))
            for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] -= go[i];
    };
    return g->add_node(std::move(n));
}

Var mul(Var a, Var b) {
    Graph* g = same_graph(a, b);
    require(g->node(a.id).shape == g->node(b.id).shape, "mul", "shape mismatch");
    Graph::Node n;
    n.op = "mul";
    n.args = {a.id, b.id};
    n.shape = g->node(a.id).shape;
    n.eval = [](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        const Tensor& y = g.val(self.args[1]);
        std::vector<double> out(static_cast<std::size_t>(x.size()));
        for (std::int64_t i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = x[i] * y[i];
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        const auto& go = g.gslot(self.id);
        const Tensor& x = g.val(self.args[0]);
        const Tensor& y = g.val(self.args[1]);
        if (auto* ga = gin(g, self.args[0]))
            for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * y[static_cast<std::int64_t>(i)];
        if (auto* gb = gin(g, self.args[1]))
            for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] += go[i] * x[static_cast<std::int64_t>(i)];
    };
    return g->add_node(std::move(n));
}

Var neg(Var a) {
    return unary(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var recip(Var a) {
    return unary(a, "recip", [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

Var relu(Var a) {
    return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
    return unary(a, "sigmoid",
                 [](double x) {
                     if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
                     const double e = std::exp(x);
                     return e / (1.0 + e);
                 },
                 [](double, double y) { return y * (1.0 - y); });
}

Var vexp(Var a) {
    return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var vlog(Var a) {
    return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var scalar_add(Var a, double c) {
    return unary(a, "scalar_add", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var scalar_mul(Var a, double c) {
    return unary(a, "scalar_mul", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
    Graph* g = same_graph(a, b);
    const Shape& sa = g->node(a.id).shape;
    const Shape& sb = g->node(b.id).shape;
    require(sa.size() == 2 && sb.size() == 2, "matmul", "operands must be rank-2");
    require(sa[1] == sb[0], "matmul", "inner dimensions differ");
    Graph::Node n;
    n.op = "matmul";
    n.args = {a.id, b.id};
    n.shape = {sa[0], sb[1]};
    n.eval = [](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        const Tensor& y = g.val(self.args[1]);
        const auto m = x.dim(0), k = x.dim(1), nn = y.dim(1);
        std::vector<double> out(static_cast<std::size_t>(m * nn));
        MutMap(out.data(), m, nn).noalias() = ConstMap(x.data(), m, k) * ConstMap(y.data(), k, nn);
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        const Tensor& y = g.val(self.args[1]);
        const auto m = x.dim(0), k = x.dim(1), nn = y.dim(1);
        ConstMap go(g.gslot(self.id).data(), m, nn);
        if (auto* ga = gin(g, self.args[0]))
            MutMap(ga->data(), m, k).noalias() += go * ConstMap(y.data(), k, nn).transpose();
        if (auto* gb = gin(g, self.args[1]))
            MutMap(gb->data(), k, nn).noalias() += ConstMap(x.data(), m, k).transpose() * go;
    };
    return g->add_node(std::move(n));
}

Var logabsdet(Var w) {
    Graph* g = w.g;
    const Shape& s = g->node(w.id).shape;
    require(s.size() == 2 && s[0] == s[1], "logabsdet", "matrix must be square");
    Graph::Node n;
    n.op = "logabsdet";
    n.args = {w.id};
    n.shape = {};
    n.eval = [](Graph& g, const Graph::Node& self) {
        const Tensor& w = g.val(self.args[0]);
        const auto c = w.dim(0);
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(ConstMap(w.data(), c, c));
        double ld = 0.0;
        for (Eigen::Index i = 0; i < c; ++i) ld += std::log(std::abs(lu.matrixLU()(i, i)));
        if (!std::isfinite(ld) || ld < std::log(1e-12))
            throw Error("E_SINGULAR", "mixing matrix is singular (|det| below 1e-12 floor)");
        return Tensor::scalar(ld);
    };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        auto* gw = gin(g, self.args[0]);
        if (!gw) return;
        const Tensor& w = g.val(self.args[0]);
        const auto c = w.dim(0);
        const double go = g.gslot(self.id)[0];
        Eigen::MatrixXd winv = ConstMap(w.data(), c, c).partialPivLu().inverse();
        // d log|det W| / dW = (W^-1)^T
        MutMap(gw->data(), c, c) += go * winv.transpose();
    };
    return g->add_node(std::move(n));
}

// ---------------------------------------------------------------------------
// Convolution

Var conv3d(Var x, Var w, Var b) {
    Graph* g = same_graph(x, w);
    same_graph(w, b);
    const Shape& sx = g->node(x.id).shape;
    const Shape& sw = g->node(w.id).shape;
    const Shape& sb = g->node(b.id).shape;
    require(sx.size() == 4, "conv3d", "input must be (D,H,W,C)");
    require(sw.size() == 5, "conv3d", "kernel must be (kd,kh,kw,Cin,Cout)");
    require(sw[0] % 2 == 1 && sw[1] % 2 == 1 && sw[2] % 2 == 1, "conv3d", "kernel sizes must be odd");
    require(sw[3] == sx[3], "conv3d", "input channels do not match kernel");
    require(sb.size() == 1 && sb[0] == sw[4], "conv3d", "bias must be (Cout)");
    Graph::Node n;
    n.op = "conv3d";
    n.args = {x.id, w.id, b.id};
    n.shape = {sx[0], sx[1], sx[2], sw[4]};
    auto col_cache = std::make_shared<std::vector<double>>();
    n.eval = [col_cache](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        const Tensor& w = g.val(self.args[1]);
        const Tensor& b = g.val(self.args[2]);
        const auto D = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
        const auto kd = w.dim(0), kh = w.dim(1), kw = w.dim(2), Co = w.dim(4);
        const auto pd = kd / 2, ph = kh / 2, pw = kw / 2;
        const auto N = D * H * W, K = kd * kh * kw * Ci;
        col_cache->resize(static_cast<std::size_t>(N * K));
        double* col = col_cache->data();
        const double* xd = x.data();
        for (std::int64_t d = 0; d < D; ++d)
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t ww = 0; ww < W; ++ww) {
                    double* row = col + ((d * H + h) * W + ww) * K;
                    std::int64_t t = 0;
                    for (std::int64_t od = 0; od < kd; ++od) {
                        const std::int64_t di = d + od - pd;
                        for (std::int64_t oh = 0; oh < kh; ++oh) {
                            const std::int64_t hi = h + oh - ph;
                            for (std::int64_t ow = 0; ow < kw; ++ow, t += Ci) {
                                const std::int64_t wi = ww + ow - pw;
                                if (di < 0 || di >= D || hi < 0 || hi >= H || wi < 0 || wi >= W)
                                    std::fill(row + t, row + t + Ci, 0.0);
                                else
                                    std::memcpy(row + t, xd + ((di * H + hi) * W + wi) * Ci,
                                                static_cast<std::size_t>(Ci) * sizeof(double));
                            }
                        }
                    }
                }
        std::vector<double> out(static_cast<std::size_t>(N * Co));
        MutMap y(out.data(), N, Co);
        y.noalias() = ConstMap(col, N, K) * ConstMap(w.data(), K, Co);
        y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data(), Co);
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [col_cache](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        const Tensor& w = g.val(self.args[1]);
        const auto D = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
        const auto kd = w.dim(0), kh = w.dim(1), kw = w.dim(2), Co = w.dim(4);
        const auto pd = kd / 2, ph = kh / 2, pw = kw / 2;
        const auto N = D * H * W, K = kd * kh * kw * Ci;
        ConstMap go(g.gslot(self.id).data(), N, Co);
        if (auto* gb = gin(g, self.args[2]))
            Eigen::Map<Eigen::RowVectorXd>(gb->data(), Co) += go.colwise().sum();
        if (auto* gw = gin(g, self.args[1]))
            MutMap(gw->data(), K, Co).noalias() += ConstMap(col_cache->data(), N, K).transpose() * go;
        if (auto* gx = gin(g, self.args[0])) {
            RowMat dcol(N, K);
            dcol.noalias() = go * ConstMap(w.data(), K, Co).transpose();
            double* gxd = gx->data();
            for (std::int64_t d = 0; d < D; ++d)
                for (std::int64_t h = 0; h < H; ++h)
                    for (std::int64_t ww = 0; ww < W; ++ww) {
                        const double* row = dcol.data() + ((d * H + h) * W + ww) * K;
                        std::int64_t t = 0;
                        for (std::int64_t od = 0; od < kd; ++od) {
                            const std::int64_t di = d + od - pd;
                            for (std::int64_t oh = 0; oh < kh; ++oh) {
                                const std::int64_t hi = h + oh - ph;
                                for (std::int64_t ow = 0; ow < kw; ++ow, t += Ci) {
                                    const std::int64_t wi = ww + ow - pw;
                                    if (di < 0 || di >= D || hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
                                    double* dst = gxd + ((di * H + hi) * W + wi) * Ci;
                                    for (std::int64_t c = 0; c < Ci; ++c) dst[c] += row[t + c];
                                }
                            }
                        }
                    }
        }
    };
    return g->add_node(std::move(n));
}

// ---------------------------------------------------------------------------
// Channel-wise affine

Var channel_scale(Var x, Var s) {
    Graph* g = same_graph(x, s);
    const Shape& sx = g->node(x.id).shape;
    const Shape& ss = g->node(s.id).shape;
    require(!sx.empty() && ss.size() == 1 && ss[0] == sx.back(), "channel_scale", "scale must match channel axis");
    Graph::Node n;
    n.op = "channel_scale";
    n.args = {x.id, s.id};
    n.shape = sx;
    n.eval = [](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        const Tensor& s = g.val(self.args[1]);
        const auto C = s.dim(0);
        std::vector<double> out(static_cast<std::size_t>(x.size()));
        for (std::int64_t i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = x[i] * s[i % C];
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        const Tensor& s = g.val(self.args[1]);
        const auto C = s.dim(0);
        const auto& go = g.gslot(self.id);
        if (auto* gx = gin(g, self.args[0]))
            for (std::int64_t i = 0; i < x.size(); ++i) (*gx)[static_cast<std::size_t>(i)] += go[static_cast<std::size_t>(i)] * s[i % C];
        if (auto* gs = gin(g, self.args[1]))
            for (std::int64_t i = 0; i < x.size(); ++i) (*gs)[static_cast<std::size_t>(i % C)] += go[static_cast<std::size_t>(i)] * x[i];
    };
    return g->add_node(std::move(n));
}

Var channel_shift(Var x, Var b) {
    Graph* g = same_graph(x, b);
    const Shape& sx = g->node(x.id).shape;
    const Shape& sb = g->node(b.id).shape;
    require(!sx.empty() && sb.size() == 1 && sb[0] == sx.back(), "channel_shift", "bias must match channel axis");
    Graph::Node n;
    n.op = "channel_shift";
    n.args = {x.id, b.id};
    n.shape = sx;
    n.eval = [](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        const Tensor& b = g.val(self.args[1]);
        const auto C = b.dim(0);
        std::vector<double> out(static_cast<std::size_t>(x.size()));
        for (std::int64_t i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = x[i] + b[i % C];
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        const Tensor& b = g.val(self.args[1]);
        const auto C = b.dim(0);
        const auto& go = g.gslot(self.id);
        if (auto* gx = gin(g, self.args[0]))
            for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i];
        if (auto* gb = gin(g, self.args[1]))
            for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i % static_cast<std::size_t>(C)] += go[i];
    };
    return g->add_node(std::move(n));
}

// ---------------------------------------------------------------------------
// Structure ops

namespace {

void squeeze_map(const double* in, double* out, std::int64_t D, std::int64_t H, std::int64_t W, std::int64_t C,
                 bool forward) {
    const std::int64_t D2 = D / 2, H2 = H / 2, W2 = W / 2, C8 = 8 * C;
    for (std::int64_t d = 0; d < D2; ++d)
        for (std::int64_t h = 0; h < H2; ++h)
            for (std::int64_t w = 0; w < W2; ++w)
                for (std::int64_t c = 0; c < C; ++c)
                    for (std::int64_t dd = 0; dd < 2; ++dd)
                        for (std::int64_t dh = 0; dh < 2; ++dh)
                            for (std::int64_t dw = 0; dw < 2; ++dw) {
                                const std::int64_t oi =
                                    ((d * H2 + h) * W2 + w) * C8 + c * 8 + (dd * 4 + dh * 2 + dw);
                                const std::int64_t ii =
                                    (((2 * d + dd) * H + (2 * h + dh)) * W + (2 * w + dw)) * C + c;
                                if (forward)
                                    out[oi] = in[ii];
                                else
                                    out[ii] = in[oi];
                            }
}

}  // namespace

Var squeeze3d(Var x) {
    Graph* g = x.g;
    const Shape& s = g->node(x.id).shape;
    require(s.size() == 4, "squeeze3d", "input must be (D,H,W,C)");
    require(s[0] % 2 == 0 && s[1] % 2 == 0 && s[2] % 2 == 0, "squeeze3d",
            "spatial dimensions must be even, got " + shape_str(s));
    Graph::Node n;
    n.op = "squeeze3d";
    n.args = {x.id};
    n.shape = {s[0] / 2, s[1] / 2, s[2] / 2, 8 * s[3]};
    n.eval = [](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        std::vector<double> out(static_cast<std::size_t>(x.size()));
        squeeze_map(x.data(), out.data(), x.dim(0), x.dim(1), x.dim(2), x.dim(3), true);
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        auto* gx = gin(g, self.args[0]);
        if (!gx) return;
        const Tensor& x = g.val(self.args[0]);
        std::vector<double> full(static_cast<std::size_t>(x.size()));
        squeeze_map(g.gslot(self.id).data(), full.data(), x.dim(0), x.dim(1), x.dim(2), x.dim(3), false);
        for (std::size_t i = 0; i < full.size(); ++i) (*gx)[i] += full[i];
    };
    return g->add_node(std::move(n));
}

Var unsqueeze3d(Var x) {
    Graph* g = x.g;
    const Shape& s = g->node(x.id).shape;
    require(s.size() == 4, "unsqueeze3d", "input must be (D,H,W,C)");
    require(s[3] % 8 == 0, "unsqueeze3d", "channel count must be divisible by 8");
    Graph::Node n;
    n.op = "unsqueeze3d";
    n.args = {x.id};
    n.shape = {s[0] * 2, s[1] * 2, s[2] * 2, s[3] / 8};
    n.eval = [](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        std::vector<double> out(static_cast<std::size_t>(x.size()));
        squeeze_map(x.data(), out.data(), self.shape[0], self.shape[1], self.shape[2], self.shape[3], false);
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        auto* gx = gin(g, self.args[0]);
        if (!gx) return;
        std::vector<double> packed(gx->size());
        squeeze_map(g.gslot(self.id).data(), packed.data(), self.shape[0], self.shape[1], self.shape[2],
                    self.shape[3], true);
        for (std::size_t i = 0; i < packed.size(); ++i) (*gx)[i] += packed[i];
    };
    return g->add_node(std::move(n));
}

Var reshape(Var x, Shape shape) {
    Graph* g = x.g;
    require(shape_size(shape) == shape_size(g->node(x.id).shape), "reshape", "element count mismatch");
    Graph::Node n;
    n.op = "reshape";
    n.args = {x.id};
    n.shape = std::move(shape);
    n.eval = [](Graph& g, const Graph::Node& self) { return g.val(self.args[0]).reshaped(self.shape); };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        if (auto* gx = gin(g, self.args[0])) {
            const auto& go = g.gslot(self.id);
            for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i];
        }
    };
    return g->add_node(std::move(n));
}

Var transpose(Var x, std::vector<int> perm) {
    Graph* g = x.g;
    const Shape& s = g->node(x.id).shape;
    require(perm.size() == s.size(), "transpose", "permutation rank mismatch");
    std::vector<bool> seen(perm.size(), false);
    for (int p : perm) {
        require(p >= 0 && p < static_cast<int>(perm.size()) && !seen[static_cast<std::size_t>(p)], "transpose",
                "invalid permutation");
        seen[static_cast<std::size_t>(p)] = true;
    }
    Shape out_shape(s.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = s[static_cast<std::size_t>(perm[i])];
    Graph::Node n;
    n.op = "transpose";
    n.args = {x.id};
    n.shape = out_shape;
    auto run = [perm](const double* in, double* out, const Shape& in_shape, const Shape& out_shape, bool fwd) {
        const Shape in_st = shape_strides(in_shape);
        const std::size_t rank = in_shape.size();
        std::vector<std::int64_t> idx(rank, 0);
        const std::int64_t n_el = shape_size(in_shape);
        for (std::int64_t o = 0; o < n_el; ++o) {
            std::int64_t iflat = 0;
            for (std::size_t k = 0; k < rank; ++k) iflat += idx[k] * in_st[static_cast<std::size_t>(perm[k])];
            if (fwd)
                out[o] = in[iflat];
            else
                out[iflat] += in[o];  // scatter for backward
            for (std::int64_t k = static_cast<std::int64_t>(rank) - 1; k >= 0; --k) {
                if (++idx[static_cast<std::size_t>(k)] < out_shape[static_cast<std::size_t>(k)]) break;
                idx[static_cast<std::size_t>(k)] = 0;
            }
        }
    };
    n.eval = [run](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        std::vector<double> out(static_cast<std::size_t>(x.size()));
        run(x.data(), out.data(), x.shape(), self.shape, true);
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [run](Graph& g, const Graph::Node& self) {
        if (auto* gx = gin(g, self.args[0]))
            run(g.gslot(self.id).data(), gx->data(), g.val(self.args[0]).shape(), self.shape, false);
    };
    return g->add_node(std::move(n));
}

Var slice_channels(Var x, std::int64_t c0, std::int64_t c1) {
    Graph* g = x.g;
    const Shape& s = g->node(x.id).shape;
    require(!s.empty() && c0 >= 0 && c0 < c1 && c1 <= s.back(), "slice_channels", "bad channel range");
    Shape out_shape = s;
    out_shape.back() = c1 - c0;
    Graph::Node n;
    n.op = "slice_channels";
    n.args = {x.id};
    n.shape = out_shape;
    const std::int64_t C = s.back(), Cs = c1 - c0;
    n.eval = [c0, C, Cs](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        const std::int64_t rows = x.size() / C;
        std::vector<double> out(static_cast<std::size_t>(rows * Cs));
        for (std::int64_t r = 0; r < rows; ++r)
            std::memcpy(out.data() + r * Cs, x.data() + r * C + c0, static_cast<std::size_t>(Cs) * sizeof(double));
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [c0, C, Cs](Graph& g, const Graph::Node& self) {
        auto* gx = gin(g, self.args[0]);
        if (!gx) return;
        const auto& go = g.gslot(self.id);
        const std::int64_t rows = static_cast<std::int64_t>(go.size()) / Cs;
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = 0; c < Cs; ++c)
                (*gx)[static_cast<std::size_t>(r * C + c0 + c)] += go[static_cast<std::size_t>(r * Cs + c)];
    };
    return g->add_node(std::move(n));
}

Var concat_channels(Var a, Var b) {
    Graph* g = same_graph(a, b);
    const Shape& sa = g->node(a.id).shape;
    const Shape& sb = g->node(b.id).shape;
    require(sa.size() == sb.size() && !sa.empty(), "concat_channels", "rank mismatch");
    for (std::size_t i = 0; i + 1 < sa.size(); ++i)
        require(sa[i] == sb[i], "concat_channels", "leading dimensions differ");
    Shape out_shape = sa;
    out_shape.back() = sa.back() + sb.back();
    Graph::Node n;
    n.op = "concat_channels";
    n.args = {a.id, b.id};
    n.shape = out_shape;
    const std::int64_t Ca = sa.back(), Cb = sb.back();
    n.eval = [Ca, Cb](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        const Tensor& y = g.val(self.args[1]);
        const std::int64_t rows = x.size() / Ca, C = Ca + Cb;
        std::vector<double> out(static_cast<std::size_t>(rows * C));
        for (std::int64_t r = 0; r < rows; ++r) {
            std::memcpy(out.data() + r * C, x.data() + r * Ca, static_cast<std::size_t>(Ca) * sizeof(double));
            std::memcpy(out.data() + r * C + Ca, y.data() + r * Cb, static_cast<std::size_t>(Cb) * sizeof(double));
        }
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [Ca, Cb](Graph& g, const Graph::Node& self) {
        const auto& go = g.gslot(self.id);
        const std::int64_t C = Ca + Cb;
        const std::int64_t rows = static_cast<std::int64_t>(go.size()) / C;
        if (auto* ga = gin(g, self.args[0]))
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t c = 0; c < Ca; ++c)
                    (*ga)[static_cast<std::size_t>(r * Ca + c)] += go[static_cast<std::size_t>(r * C + c)];
        if (auto* gb = gin(g, self.args[1]))
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t c = 0; c < Cb; ++c)
                    (*gb)[static_cast<std::size_t>(r * Cb + c)] += go[static_cast<std::size_t>(r * C + Ca + c)];
    };
    return g->add_node(std::move(n));
}

// ---------------------------------------------------------------------------
// Reductions

Var sum_all(Var x) {
    Graph* g = x.g;
    Graph::Node n;
    n.op = "sum";
    n.args = {x.id};
    n.shape = {};
    n.eval = [](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        double s = 0.0;
        for (std::int64_t i = 0; i < x.size(); ++i) s += x[i];
        return Tensor::scalar(s);
    };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        if (auto* gx = gin(g, self.args[0])) {
            const double go = g.gslot(self.id)[0];
            for (auto& v : *gx) v += go;
        }
    };
    return g->add_node(std::move(n));
}

namespace {

Var reduce_axes(Var x, std::vector<int> axes, bool mean) {
    Graph* g = x.g;
    const Shape& s = g->node(x.id).shape;
    std::sort(axes.begin(), axes.end());
    require(std::unique(axes.begin(), axes.end()) == axes.end(), "reduce", "duplicate axes");
    std::vector<bool> reduced(s.size(), false);
    std::int64_t count = 1;
    for (int a : axes) {
        require(a >= 0 && a < static_cast<int>(s.size()), "reduce", "axis out of range");
        reduced[static_cast<std::size_t>(a)] = true;
        count *= s[static_cast<std::size_t>(a)];
    }
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (!reduced[i]) out_shape.push_back(s[i]);
    const double scale = mean ? 1.0 / static_cast<double>(count) : 1.0;
    // Per-axis contribution to the output flat index (0 for reduced axes).
    Shape out_st = shape_strides(out_shape);
    std::vector<std::int64_t> contrib(s.size(), 0);
    std::size_t oi = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (!reduced[i]) contrib[i] = out_st[oi++];
    Graph::Node n;
    n.op = mean ? "mean_axes" : "sum_axes";
    n.args = {x.id};
    n.shape = out_shape;
    auto project = [contrib, s](std::vector<std::int64_t>& idx, std::int64_t) {
        std::int64_t o = 0;
        for (std::size_t k = 0; k < s.size(); ++k) o += idx[k] * contrib[k];
        return o;
    };
    n.eval = [project, s, scale](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        std::vector<double> out(static_cast<std::size_t>(shape_size(self.shape)), 0.0);
        std::vector<std::int64_t> idx(s.size(), 0);
        for (std::int64_t i = 0; i < x.size(); ++i) {
            out[static_cast<std::size_t>(project(idx, i))] += x[i];
            for (std::int64_t k = static_cast<std::int64_t>(s.size()) - 1; k >= 0; --k) {
                if (++idx[static_cast<std::size_t>(k)] < s[static_cast<std::size_t>(k)]) break;
                idx[static_cast<std::size_t>(k)] = 0;
            }
        }
        if (scale != 1.0)
            for (auto& v : out) v *= scale;
        return Tensor(self.shape, std::move(out));
    };
    n.backprop = [project, s, scale](Graph& g, const Graph::Node& self) {
        auto* gx = gin(g, self.args[0]);
        if (!gx) return;
        const auto& go = g.gslot(self.id);
        std::vector<std::int64_t> idx(s.size(), 0);
        const std::int64_t n_el = static_cast<std::int64_t>(gx->size());
        for (std::int64_t i = 0; i < n_el; ++i) {
            (*gx)[static_cast<std::size_t>(i)] += go[static_cast<std::size_t>(project(idx, i))] * scale;
            for (std::int64_t k = static_cast<std::int64_t>(s.size()) - 1; k >= 0; --k) {
                if (++idx[static_cast<std::size_t>(k)] < s[static_cast<std::size_t>(k)]) break;
                idx[static_cast<std::size_t>(k)] = 0;
            }
        }
    };
    return g->add_node(std::move(n));
}

}  // namespace

Var sum_axes(Var x, std::vector<int> axes) { return reduce_axes(x, std::move(axes), false); }
Var mean_axes(Var x, std::vector<int> axes) { return reduce_axes(x, std::move(axes), true); }

Var sqnorm(Var x) {
    Graph* g = x.g;
    Graph::Node n;
    n.op = "sqnorm";
    n.args = {x.id};
    n.shape = {};
    n.eval = [](Graph& g, const Graph::Node& self) {
        const Tensor& x = g.val(self.args[0]);
        double s = 0.0;
        for (std::int64_t i = 0; i < x.size(); ++i) s += x[i] * x[i];
        return Tensor::scalar(s);
    };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        if (auto* gx = gin(g, self.args[0])) {
            const Tensor& x = g.val(self.args[0]);
            const double go = g.gslot(self.id)[0];
            for (std::int64_t i = 0; i < x.size(); ++i) (*gx)[static_cast<std::size_t>(i)] += 2.0 * x[i] * go;
        }
    };
    return g->add_node(std::move(n));
}

// ---------------------------------------------------------------------------
// Projections (same kernels as the plain-tensor functions)

Var project_depth(Var y) {
    Graph* g = y.g;
    const Shape& s = g->node(y.id).shape;
    require(s.size() == 4 && s[3] == 1, "project_depth", "input must be (D,H,W,1)");
    Graph::Node n;
    n.op = "project_depth";
    n.args = {y.id};
    n.shape = {s[1], s[2]};
    n.eval = [](Graph& g, const Graph::Node& self) { return project_depth(g.val(self.args[0])); };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        auto* gy = gin(g, self.args[0]);
        if (!gy) return;
        const Shape& s = g.val(self.args[0]).shape();
        const std::int64_t D = s[0], H = s[1], W = s[2];
        const auto& go = g.gslot(self.id);
        const double inv = 1.0 / static_cast<double>(D);
        for (std::int64_t d = 0; d < D; ++d)
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t w = 0; w < W; ++w)
                    (*gy)[static_cast<std::size_t>((d * H + h) * W + w)] +=
                        go[static_cast<std::size_t>(h * W + w)] * inv;
    };
    return g->add_node(std::move(n));
}

Var project_width(Var y) {
    Graph* g = y.g;
    const Shape& s = g->node(y.id).shape;
    require(s.size() == 4 && s[3] == 1, "project_width", "input must be (D,H,W,1)");
    Graph::Node n;
    n.op = "project_width";
    n.args = {y.id};
    n.shape = {s[0], s[1]};
    n.eval = [](Graph& g, const Graph::Node& self) { return project_width(g.val(self.args[0])); };
    n.backprop = [](Graph& g, const Graph::Node& self) {
        auto* gy = gin(g, self.args[0]);
        if (!gy) return;
        const Shape& s = g.val(self.args[0]).shape();
        const std::int64_t D = s[0], H = s[1], W = s[2];
        const auto& go = g.gslot(self.id);
        const double inv = 1.0 / static_cast<double>(W);
        for (std::int64_t d = 0; d < D; ++d)
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t w = 0; w < W; ++w)
                    (*gy)[static_cast<std::size_t>((d * H + h) * W + w)] +=
                        go[static_cast<std::size_t>(d * H + h)] * inv;
    };
    return g->add_node(std::move(n));
}

}  // namespace x2ct
