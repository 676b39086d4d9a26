#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "array.hpp"

namespace patchproto {

// Reverse-mode tape over a closed op set. Node values are held in double
// precision internally; Arrays at the API boundary stay float32.
enum class OpKind {
    Input,
    Constant,
    Add,
    Mul,
    MatMul,
    Exp,
    Log,
    Tanh,
    Pow,
    MaxReduce,
    SumReduce,
    MeanReduce,
    Softmax,
    LayerNorm,
    Reshape,
    Transpose,
    Concat,
    L2Norm,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "input";
        case OpKind::Constant: return "constant";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::MatMul: return "matmul";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Tanh: return "tanh";
        case OpKind::Pow: return "power";
        case OpKind::MaxReduce: return "max-reduce";
        case OpKind::SumReduce: return "sum-reduce";
        case OpKind::MeanReduce: return "mean-reduce";
        case OpKind::Softmax: return "softmax";
        case OpKind::LayerNorm: return "layer-norm";
        case OpKind::Reshape: return "reshape";
        case OpKind::Transpose: return "transpose";
        case OpKind::Concat: return "concatenate";
        case OpKind::L2Norm: return "L2-norm";
    }
    return "?";
}

using NodeId = int;

class DiffGraph {
  public:
    struct Node {
        OpKind op;
        std::vector<NodeId> inputs;
        Shape shape;
        std::vector<double> value;
        double param = 0.0;      // exponent for Pow
        int axis = -1;            // reduce / softmax / concat axis
        std::vector<int> perm;    // transpose permutation
        std::vector<int> argidx;  // MaxReduce argmax positions
        std::string name;         // set for named inputs
    };

    NodeId input(const std::string& name, const Array& v) {
        if (input_ids_.count(name))
            throw std::invalid_argument("duplicate input name: " + name);
        Node n;
        n.op = OpKind::Input;
        n.shape = v.shape;
        n.value.assign(v.data.begin(), v.data.end());
        n.name = name;
        NodeId id = push(std::move(n));
        input_ids_[name] = id;
        return id;
    }

    NodeId constant(const Array& v) {
        Node n;
        n.op = OpKind::Constant;
        n.shape = v.shape;
        n.value.assign(v.data.begin(), v.data.end());
        return push(std::move(n));
    }

    NodeId constant_scalar(double v) {
        Node n;
        n.op = OpKind::Constant;
        n.shape = {1};
        n.value = {v};
        return push(std::move(n));
    }

    // add supports equal shapes, scalar rhs, and rhs broadcast over leading
    // dims when its shape is a suffix of lhs's shape.
    NodeId add(NodeId a, NodeId b) { return binary(OpKind::Add, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary(OpKind::Mul, a, b); }

    NodeId sub(NodeId a, NodeId b) { return add(a, mul(b, constant_scalar(-1.0))); }
    NodeId scale(NodeId a, double c) { return mul(a, constant_scalar(c)); }
    NodeId add_scalar(NodeId a, double c) { return add(a, constant_scalar(c)); }

    NodeId matmul(NodeId a, NodeId b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0])
            throw ShapeError(std::string("matmul shapes ") + shape_str(na.shape) + " x " +
                             shape_str(nb.shape));
        int m = na.shape[0], k = na.shape[1], ncols = nb.shape[1];
        Node n;
        n.op = OpKind::MatMul;
        n.inputs = {a, b};
        n.shape = {m, ncols};
        n.value.assign(static_cast<std::size_t>(m) * ncols, 0.0);
        for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
                double av = na.value[i * k + kk];
                if (av == 0.0) continue;
                const double* brow = &nb.value[static_cast<std::size_t>(kk) * ncols];
                double* crow = &n.value[static_cast<std::size_t>(i) * ncols];
                for (int j = 0; j < ncols; ++j) crow[j] += av * brow[j];
            }
        return push(std::move(n));
    }

    NodeId exp(NodeId a) { return unary(OpKind::Exp, a, [](double x) { return std::exp(x); }); }
    NodeId log(NodeId a) { return unary(OpKind::Log, a, [](double x) { return std::log(x); }); }
    NodeId tanh(NodeId a) { return unary(OpKind::Tanh, a, [](double x) { return std::tanh(x); }); }

    NodeId pow(NodeId a, double p) {
        const Node& na = node(a);
        Node n;
        n.op = OpKind::Pow;
        n.inputs = {a};
        n.shape = na.shape;
        n.param = p;
        n.value.resize(na.value.size());
        for (std::size_t i = 0; i < na.value.size(); ++i) n.value[i] = std::pow(na.value[i], p);
        return push(std::move(n));
    }

    NodeId max_reduce(NodeId a, int axis) {
        const Node& na = node(a);
        check_axis(na.shape, axis);
        auto [outer, len, inner] = axis_split(na.shape, axis);
        Node n;
        n.op = OpKind::MaxReduce;
        n.inputs = {a};
        n.axis = axis;
        n.shape = drop_axis(na.shape, axis);
        n.value.resize(outer * inner);
        n.argidx.resize(outer * inner);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                double best = na.value[o * len * inner + in];
                int besti = 0;
                for (std::size_t l = 1; l < len; ++l) {
                    double v = na.value[(o * len + l) * inner + in];
                    if (v > best) { best = v; besti = static_cast<int>(l); }
                }
                n.value[o * inner + in] = best;
                n.argidx[o * inner + in] = besti;
            }
        return push(std::move(n));
    }

    NodeId reduce(OpKind op, NodeId a, int axis) {
        const Node& na = node(a);
        Node n;
        n.op = op;
        n.inputs = {a};
        n.axis = axis;
        if (axis < 0) {
            n.shape = {};
            double s = 0.0;
            for (double v : na.value) s += v;
            if (op == OpKind::MeanReduce && !na.value.empty())
                s /= static_cast<double>(na.value.size());
            n.value = {s};
        } else {
            check_axis(na.shape, axis);
            auto [outer, len, inner] = axis_split(na.shape, axis);
            n.shape = drop_axis(na.shape, axis);
            n.value.assign(outer * inner, 0.0);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t l = 0; l < len; ++l)
                    for (std::size_t in = 0; in < inner; ++in)
                        n.value[o * inner + in] += na.value[(o * len + l) * inner + in];
            if (op == OpKind::MeanReduce)
                for (auto& v : n.value) v /= static_cast<double>(len);
        }
        return push(std::move(n));
    }

    NodeId sum_reduce(NodeId a, int axis) { return reduce(OpKind::SumReduce, a, axis); }
    NodeId mean_reduce(NodeId a, int axis) { return reduce(OpKind::MeanReduce, a, axis); }
    // axis = -1 reduces all elements to a scalar
    NodeId sum_all(NodeId a) { return reduce(OpKind::SumReduce, a, -1); }
    NodeId mean_all(NodeId a) { return reduce(OpKind::MeanReduce, a, -1); }

    NodeId softmax(NodeId a, int axis) {
        const Node& na = node(a);
        check_axis(na.shape, axis);
        auto [outer, len, inner] = axis_split(na.shape, axis);
        Node n;
        n.op = OpKind::Softmax;
        n.inputs = {a};
        n.axis = axis;
        n.shape = na.shape;
        n.value.resize(na.value.size());
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                double mx = na.value[o * len * inner + in];
                for (std::size_t l = 1; l < len; ++l)
                    mx = std::max(mx, na.value[(o * len + l) * inner + in]);
                double z = 0.0;
                for (std::size_t l = 0; l < len; ++l) {
                    double e = std::exp(na.value[(o * len + l) * inner + in] - mx);
                    n.value[(o * len + l) * inner + in] = e;
                    z += e;
                }
                for (std::size_t l = 0; l < len; ++l)
                    n.value[(o * len + l) * inner + in] /= z;
            }
        return push(std::move(n));
    }

    // normalizes the last axis; gamma and beta have that axis's length
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5) {
        const Node& nx = node(x);
        int last = nx.shape.back();
        if (node(gamma).shape != Shape{last} || node(beta).shape != Shape{last})
            throw ShapeError("layer-norm gamma/beta must have shape [" + std::to_string(last) + "]");
        std::size_t rows = nx.value.size() / last;
        Node n;
        n.op = OpKind::LayerNorm;
        n.inputs = {x, gamma, beta};
        n.shape = nx.shape;
        n.param = eps;
        n.value.resize(nx.value.size());
        const auto& g = node(gamma).value;
        const auto& b = node(beta).value;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* row = &nx.value[r * last];
            double mu = 0.0;
            for (int j = 0; j < last; ++j) mu += row[j];
            mu /= last;
            double var = 0.0;
            for (int j = 0; j < last; ++j) var += (row[j] - mu) * (row[j] - mu);
            var /= last;
            double inv = 1.0 / std::sqrt(var + eps);
            for (int j = 0; j < last; ++j)
                n.value[r * last + j] = (row[j] - mu) * inv * g[j] + b[j];
        }
        return push(std::move(n));
    }

    NodeId reshape(NodeId a, Shape s) {
        const Node& na = node(a);
        if (shape_numel(s) != na.value.size())
            throw ShapeError("reshape " + shape_str(na.shape) + " -> " + shape_str(s));
        Node n;
        n.op = OpKind::Reshape;
        n.inputs = {a};
        n.shape = std::move(s);
        n.value = na.value;
        return push(std::move(n));
    }

    NodeId transpose(NodeId a, std::vector<int> perm = {}) {
        const Node& na = node(a);
        int r = static_cast<int>(na.shape.size());
        if (perm.empty()) {
            if (r != 2) throw ShapeError("default transpose needs rank 2");
            perm = {1, 0};
        }
        Node n;
        n.op = OpKind::Transpose;
        n.inputs = {a};
        n.perm = perm;
        n.shape.resize(r);
        for (int i = 0; i < r; ++i) n.shape[i] = na.shape[perm[i]];
        n.value.resize(na.value.size());
        permute_copy(na.value, na.shape, perm, n.value);
        return push(std::move(n));
    }

    NodeId concat(const std::vector<NodeId>& parts, int axis) {
        if (parts.empty()) throw ShapeError("concatenate of zero parts");
        const Node& first = node(parts[0]);
        check_axis(first.shape, axis);
        Shape out = first.shape;
        int total = 0;
        for (NodeId p : parts) {
            const Node& np = node(p);
            if (np.shape.size() != first.shape.size())
                throw ShapeError("concatenate rank mismatch");
            for (std::size_t i = 0; i < out.size(); ++i)
                if (static_cast<int>(i) != axis && np.shape[i] != out[i])
                    throw ShapeError("concatenate shape mismatch on axis " + std::to_string(i));
            total += np.shape[axis];
        }
        out[axis] = total;
        Node n;
        n.op = OpKind::Concat;
        n.inputs = parts;
        n.axis = axis;
        n.shape = out;
        n.value.resize(shape_numel(out));
        auto [outer, len, inner] = axis_split(out, axis);
        (void)len;
        std::size_t off = 0;
        for (NodeId p : parts) {
            const Node& np = node(p);
            std::size_t plen = static_cast<std::size_t>(np.shape[axis]);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t l = 0; l < plen; ++l)
                    for (std::size_t in = 0; in < inner; ++in)
                        n.value[(o * total + off + l) * inner + in] =
                            np.value[(o * plen + l) * inner + in];
            off += plen;
        }
        return push(std::move(n));
    }

    NodeId l2_norm(NodeId a) {
        const Node& na = node(a);
        Node n;
        n.op = OpKind::L2Norm;
        n.inputs = {a};
        n.shape = {1};
        double s = 0.0;
        for (double v : na.value) s += v * v;
        n.value = {std::sqrt(s)};
        return push(std::move(n));
    }

    const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }

    double value_scalar(NodeId id) const {
        const Node& n = node(id);
        if (n.value.size() != 1)
            throw std::invalid_argument("scalar requested from non-scalar node");
        return n.value[0];
    }

    Array value_array(NodeId id) const {
        const Node& n = node(id);
        Array out(n.shape);
        for (std::size_t i = 0; i < n.value.size(); ++i)
            out.data[i] = static_cast<float>(n.value[i]);
        return out;
    }

    struct GradResult {
        Array value;
        std::map<std::string, Array> gradients;
    };

    // Reverse sweep from a scalar output; returns the value and the gradient
    // with respect to every named input.
    GradResult evaluate_with_gradients(NodeId output) {
        auto grads = backward(output);
        GradResult r;
        r.value = value_array(output);
        for (const auto& [name, id] : input_ids_) {
            Array g(node(id).shape);
            for (std::size_t i = 0; i < grads[id].size(); ++i)
                g.data[i] = static_cast<float>(grads[id][i]);
            r.gradients[name] = std::move(g);
        }
        return r;
    }

    // Raw per-node adjoints (double precision), seeded with 1 at `output`.
    std::vector<std::vector<double>> backward(NodeId output) const {
        const Node& out = node(output);
        if (out.value.size() != 1)
            throw std::invalid_argument("gradients require a scalar output node");
        std::vector<std::vector<double>> grad(nodes_.size());
        grad[output].assign(1, 1.0);
        for (NodeId id = output; id >= 0; --id) {
            if (grad[id].empty()) continue;
            accumulate_input_grads(id, grad);
        }
        return grad;
    }

    const std::map<std::string, NodeId>& inputs() const { return input_ids_; }

  private:
    std::vector<Node> nodes_;
    std::map<std::string, NodeId> input_ids_;

    NodeId push(Node&& n) {
        NodeId id = static_cast<NodeId>(nodes_.size());
        for (double v : n.value)
            if (!std::isfinite(v))
                throw NumericError(std::string("non-finite value in node ") +
                                   std::to_string(id) + " (" + op_name(n.op) + ")");
        nodes_.push_back(std::move(n));
        return id;
    }

    static void check_axis(const Shape& s, int axis) {
        if (axis < 0 || axis >= static_cast<int>(s.size()))
            throw ShapeError("axis " + std::to_string(axis) + " invalid for " + shape_str(s));
    }

    static std::tuple<std::size_t, std::size_t, std::size_t> axis_split(const Shape& s, int axis) {
        std::size_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
        for (int i = axis + 1; i < static_cast<int>(s.size()); ++i)
            inner *= static_cast<std::size_t>(s[i]);
        return {outer, static_cast<std::size_t>(s[axis]), inner};
    }

    static Shape drop_axis(const Shape& s, int axis) {
        Shape out;
        for (int i = 0; i < static_cast<int>(s.size()); ++i)
            if (i != axis) out.push_back(s[i]);
        if (out.empty()) out = {1};
        return out;
    }

    static void permute_copy(const std::vector<double>& src, const Shape& sshape,
                             const std::vector<int>& perm, std::vector<double>& dst) {
        int r = static_cast<int>(sshape.size());
        std::vector<std::size_t> sstride(r, 1), dshape(r);
        for (int i = r - 2; i >= 0; --i)
            sstride[i] = sstride[i + 1] * static_cast<std::size_t>(sshape[i + 1]);
        for (int i = 0; i < r; ++i) dshape[i] = static_cast<std::size_t>(sshape[perm[i]]);
        std::vector<std::size_t> idx(r, 0);
        for (std::size_t o = 0; o < src.size(); ++o) {
            std::size_t soff = 0;
            for (int i = 0; i < r; ++i) soff += idx[i] * sstride[perm[i]];
            dst[o] = src[soff];
            for (int i = r - 1; i >= 0; --i) {
                if (++idx[i] < dshape[i]) break;
                idx[i] = 0;
            }
        }
    }

    NodeId unary(OpKind k, NodeId a, double (*f)(double)) {
        const Node& na = node(a);
        Node n;
        n.op = k;
        n.inputs = {a};
        n.shape = na.shape;
        n.value.resize(na.value.size());
        for (std::size_t i = 0; i < na.value.size(); ++i) n.value[i] = f(na.value[i]);
        return push(std::move(n));
    }

    // rhs may equal lhs shape, be scalar, or be a suffix of lhs's shape
    NodeId binary(OpKind k, NodeId a, NodeId b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        std::size_t bn = nb.value.size();
        if (!broadcast_ok(na.shape, nb.shape))
            throw ShapeError(std::string(op_name(k)) + " shapes " + shape_str(na.shape) +
                             " vs " + shape_str(nb.shape));
        Node n;
        n.op = k;
        n.inputs = {a, b};
        n.shape = na.shape;
        n.value.resize(na.value.size());
        for (std::size_t i = 0; i < na.value.size(); ++i) {
            double bv = nb.value[i % bn];
            n.value[i] = (k == OpKind::Add) ? na.value[i] + bv : na.value[i] * bv;
        }
        return push(std::move(n));
    }

    static bool broadcast_ok(const Shape& a, const Shape& b) {
        if (a == b) return true;
        if (shape_numel(b) == 1) return true;
        if (b.size() > a.size()) return false;
        // suffix match
        for (std::size_t i = 0; i < b.size(); ++i)
            if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
        return true;
    }

    void accumulate_input_grads(NodeId id, std::vector<std::vector<double>>& grad) const {
        const Node& n = node(id);
        const std::vector<double>& g = grad[id];
        auto ensure = [&](NodeId in) -> std::vector<double>& {
            auto& gi = grad[in];
            if (gi.empty()) gi.assign(node(in).value.size(), 0.0);
            return gi;
        };
        switch (n.op) {
            case OpKind::Input:
            case OpKind::Constant:
                break;
            case OpKind::Add: {
                auto& ga = ensure(n.inputs[0]);
                auto& gb = ensure(n.inputs[1]);
                std::size_t bn = gb.size();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i];
                    gb[i % bn] += g[i];
                }
                break;
            }
            case OpKind::Mul: {
                const auto& av = node(n.inputs[0]).value;
                const auto& bv = node(n.inputs[1]).value;
                auto& ga = ensure(n.inputs[0]);
                auto& gb = ensure(n.inputs[1]);
                std::size_t bn = bv.size();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i] * bv[i % bn];
                    gb[i % bn] += g[i] * av[i];
                }
                break;
            }
            case OpKind::MatMul: {
                const Node& na = node(n.inputs[0]);
                const Node& nb = node(n.inputs[1]);
                int m = na.shape[0], k = na.shape[1], ncols = nb.shape[1];
                auto& ga = ensure(n.inputs[0]);
                auto& gb = ensure(n.inputs[1]);
                // dA = dC * B^T ; dB = A^T * dC
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        double s = 0.0;
                        const double* grow = &g[static_cast<std::size_t>(i) * ncols];
                        const double* brow = &nb.value[static_cast<std::size_t>(kk) * ncols];
                        for (int j = 0; j < ncols; ++j) s += grow[j] * brow[j];
                        ga[i * k + kk] += s;
                    }
                for (int kk = 0; kk < k; ++kk)
                    for (int i = 0; i < m; ++i) {
                        double av = na.value[i * k + kk];
                        if (av == 0.0) continue;
                        const double* grow = &g[static_cast<std::size_t>(i) * ncols];
                        double* brow = &gb[static_cast<std::size_t>(kk) * ncols];
                        for (int j = 0; j < ncols; ++j) brow[j] += av * grow[j];
                    }
                break;
            }
            case OpKind::Exp: {
                auto& ga = ensure(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.value[i];
                break;
            }
            case OpKind::Log: {
                const auto& xv = node(n.inputs[0]).value;
                auto& ga = ensure(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / xv[i];
                break;
            }
            case OpKind::Tanh: {
                auto& ga = ensure(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    ga[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
                break;
            }
            case OpKind::Pow: {
                const auto& xv = node(n.inputs[0]).value;
                auto& ga = ensure(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    ga[i] += g[i] * n.param * std::pow(xv[i], n.param - 1.0);
                break;
            }
            case OpKind::MaxReduce: {
                const Node& na = node(n.inputs[0]);
                auto [outer, len, inner] = axis_split(na.shape, n.axis);
                (void)len;
                auto& ga = ensure(n.inputs[0]);
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t in = 0; in < inner; ++in) {
                        std::size_t flat = o * inner + in;
                        std::size_t l = static_cast<std::size_t>(n.argidx[flat]);
                        ga[(o * len + l) * inner + in] += g[flat];
                    }
                break;
            }
            case OpKind::SumReduce:
            case OpKind::MeanReduce: {
                const Node& na = node(n.inputs[0]);
                auto& ga = ensure(n.inputs[0]);
                if (n.axis < 0) {
                    double s = g[0] * (n.op == OpKind::MeanReduce
                                           ? 1.0 / static_cast<double>(na.value.size())
                                           : 1.0);
                    for (auto& v : ga) v += s;
                } else {
                    auto [outer, len, inner] = axis_split(na.shape, n.axis);
                    double scale = n.op == OpKind::MeanReduce ? 1.0 / static_cast<double>(len) : 1.0;
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t l = 0; l < len; ++l)
                            for (std::size_t in = 0; in < inner; ++in)
                                ga[(o * len + l) * inner + in] += g[o * inner + in] * scale;
                }
                break;
            }
            case OpKind::Softmax: {
                const Node& na = node(n.inputs[0]);
                auto [outer, len, inner] = axis_split(na.shape, n.axis);
                auto& ga = ensure(n.inputs[0]);
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t in = 0; in < inner; ++in) {
                        double dot = 0.0;
                        for (std::size_t l = 0; l < len; ++l) {
                            std::size_t off = (o * len + l) * inner + in;
                            dot += g[off] * n.value[off];
                        }
                        for (std::size_t l = 0; l < len; ++l) {
                            std::size_t off = (o * len + l) * inner + in;
                            ga[off] += n.value[off] * (g[off] - dot);
                        }
                    }
                break;
            }
            case OpKind::LayerNorm: {
                const Node& nx = node(n.inputs[0]);
                const auto& gamma = node(n.inputs[1]).value;
                int last = nx.shape.back();
                std::size_t rows = nx.value.size() / last;
                auto& gx = ensure(n.inputs[0]);
                auto& gg = ensure(n.inputs[1]);
                auto& gb = ensure(n.inputs[2]);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* row = &nx.value[r * last];
                    double mu = 0.0;
                    for (int j = 0; j < last; ++j) mu += row[j];
                    mu /= last;
                    double var = 0.0;
                    for (int j = 0; j < last; ++j) var += (row[j] - mu) * (row[j] - mu);
                    var /= last;
                    double inv = 1.0 / std::sqrt(var + n.param);
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    std::vector<double> xhat(last), dxhat(last);
                    for (int j = 0; j < last; ++j) {
                        xhat[j] = (row[j] - mu) * inv;
                        dxhat[j] = g[r * last + j] * gamma[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                        gg[j] += g[r * last + j] * xhat[j];
                        gb[j] += g[r * last + j];
                    }
                    mean_dxhat /= last;
                    mean_dxhat_xhat /= last;
                    for (int j = 0; j < last; ++j)
                        gx[r * last + j] += inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
                break;
            }
            case OpKind::Reshape: {
                auto& ga = ensure(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                break;
            }
            case OpKind::Transpose: {
                const Node& na = node(n.inputs[0]);
                int r = static_cast<int>(na.shape.size());
                std::vector<int> inv(r);
                for (int i = 0; i < r; ++i) inv[n.perm[i]] = i;
                auto& ga = ensure(n.inputs[0]);
                std::vector<double> tmp(g.size());
                permute_copy(g, n.shape, inv, tmp);
                for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
                break;
            }
            case OpKind::Concat: {
                auto [outer, total, inner] = axis_split(n.shape, n.axis);
                std::size_t off = 0;
                for (NodeId p : n.inputs) {
                    const Node& np = node(p);
                    std::size_t plen = static_cast<std::size_t>(np.shape[n.axis]);
                    auto& gp = ensure(p);
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t l = 0; l < plen; ++l)
                            for (std::size_t in = 0; in < inner; ++in)
                                gp[(o * plen + l) * inner + in] +=
                                    g[(o * total + off + l) * inner + in];
                    off += plen;
                }
                break;
            }
            case OpKind::L2Norm: {
                const auto& xv = node(n.inputs[0]).value;
                auto& ga = ensure(n.inputs[0]);
                double norm = n.value[0];
                if (norm > 0.0)
                    for (std::size_t i = 0; i < xv.size(); ++i)
                        ga[i] += g[0] * xv[i] / norm;
                break;
            }
        }
    }
};

/// Central-difference gradient estimate of a scalar function of an Array.
inline Array finite_difference_gradient(const std::function<double(const Array&)>& f,
                                        const Array& x, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be positive");
    Array g(x.shape);
    Array xp = x, xm = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        float orig = x.data[i];
        xp.data[i] = static_cast<float>(orig + h);
        xm.data[i] = static_cast<float>(orig - h);
        double fp = f(xp);
        double fm = f(xm);
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("non-finite function value in finite difference probe");
        // float32 storage rounds x±h; divide by the realized step
        double step = static_cast<double>(xp.data[i]) - static_cast<double>(xm.data[i]);
        g.data[i] = static_cast<float>((fp - fm) / step);
        xp.data[i] = orig;
        xm.data[i] = orig;
    }
    return g;
}

}  // namespace patchproto
