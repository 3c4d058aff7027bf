#include "feainf/graph.hpp"

#include <algorithm>
#include <cmath>

namespace feainf {

const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Constant: return "constant";
        case Op::Conv2d: return "conv2d";
        case Op::Relu: return "relu";
        case Op::Mul: return "mul";
        case Op::MaskApply: return "mask_apply";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Scale: return "scale";
        case Op::Offset: return "offset";
        case Op::Abs: return "abs";
        case Op::PowC: return "powc";
        case Op::Log: return "log";
        case Op::Exp: return "exp";
        case Op::Sigmoid: return "sigmoid";
        case Op::Clamp: return "clamp";
        case Op::SpatialMean: return "spatial_mean";
        case Op::SqDist: return "sq_dist";
        case Op::L1Norm: return "l1_norm";
        case Op::Sum: return "sum";
        case Op::Stack: return "stack";
        case Op::Min: return "min";
        case Op::Max: return "max";
        case Op::Row: return "row";
        case Op::Upsample: return "upsample";
    }
    return "?";
}

void Graph::check_id(int id) const {
    if (id < 0 || id >= node_count())
        throw ShapeError("node id " + std::to_string(id) + " out of range");
}

void Graph::fail(Op op, int id, const std::string& msg) const {
    throw ShapeError(std::string(op_name(op)) + "(node " + std::to_string(id) + "): " + msg);
}

int Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return node_count() - 1;
}

const Tensor& Graph::val(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.op == Op::Input ? *n.bound : n.out;
}

Shape Graph::node_shape(int id) const {
    check_id(id);
    return nodes_[static_cast<size_t>(id)].out.shape;
}

int Graph::input(const std::string& name, Shape shape, bool needs_grad) {
    if (inputs_by_name_.count(name))
        throw ShapeError("duplicate input name '" + name + "'");
    Node n;
    n.op = Op::Input;
    n.name = name;
    n.out = Tensor(std::move(shape)); // holds the declared shape only
    n.needs_grad = needs_grad;
    int id = push(std::move(n));
    inputs_by_name_[name] = id;
    return id;
}

int Graph::constant(Tensor value) {
    Node n;
    n.op = Op::Constant;
    n.out = std::move(value);
    return push(std::move(n));
}

namespace {
int extent(const Shape& s, int i) { return s[static_cast<size_t>(i)]; }
} // namespace

int Graph::conv2d(int image, int kernel, int bias, int stride, int pad) {
    check_id(image);
    check_id(kernel);
    check_id(bias);
    const Shape xs = node_shape(image), ks = node_shape(kernel), bs = node_shape(bias);
    int id = node_count();
    if (xs.size() != 3) fail(Op::Conv2d, id, "image must be rank 3, got " + shape_str(xs));
    if (ks.size() != 4) fail(Op::Conv2d, id, "kernel must be rank 4, got " + shape_str(ks));
    if (bs.size() != 1 || extent(bs, 0) != extent(ks, 3))
        fail(Op::Conv2d, id, "bias shape " + shape_str(bs) + " does not match kernel " + shape_str(ks));
    if (extent(ks, 2) != extent(xs, 2))
        fail(Op::Conv2d, id, "kernel input channels " + std::to_string(extent(ks, 2)) + " != image channels " +
                     std::to_string(extent(xs, 2)));
    if (stride < 1) fail(Op::Conv2d, id, "stride must be >= 1");
    if (pad < 0) fail(Op::Conv2d, id, "pad must be >= 0");
    int oh = (extent(xs, 0) + 2 * pad - extent(ks, 0)) / stride + 1;
    int ow = (extent(xs, 1) + 2 * pad - extent(ks, 1)) / stride + 1;
    if (oh < 1 || ow < 1) fail(Op::Conv2d, id, "kernel larger than padded image");
    Node n;
    n.op = Op::Conv2d;
    n.in = {image, kernel, bias};
    n.stride = stride;
    n.pad = pad;
    n.out = Tensor({oh, ow, extent(ks, 3)});
    n.needs_grad = nodes_[image].needs_grad || nodes_[kernel].needs_grad || nodes_[bias].needs_grad;
    return push(std::move(n));
}

#define UNARY_OP(method, opkind)                                   \
    int Graph::method(int x) {                                     \
        check_id(x);                                               \
        Node n;                                                    \
        n.op = opkind;                                             \
        n.in = {x};                                                \
        n.out = Tensor(node_shape(x));                             \
        n.needs_grad = nodes_[static_cast<size_t>(x)].needs_grad;  \
        return push(std::move(n));                                 \
    }

UNARY_OP(relu, Op::Relu)
UNARY_OP(abs, Op::Abs)
UNARY_OP(log, Op::Log)
UNARY_OP(exp, Op::Exp)
UNARY_OP(sigmoid, Op::Sigmoid)
#undef UNARY_OP

int Graph::scale(int x, double c) {
    check_id(x);
    Node n;
    n.op = Op::Scale;
    n.in = {x};
    n.c0 = c;
    n.out = Tensor(node_shape(x));
    n.needs_grad = nodes_[static_cast<size_t>(x)].needs_grad;
    return push(std::move(n));
}

int Graph::offset(int x, double c) {
    check_id(x);
    Node n;
    n.op = Op::Offset;
    n.in = {x};
    n.c0 = c;
    n.out = Tensor(node_shape(x));
    n.needs_grad = nodes_[static_cast<size_t>(x)].needs_grad;
    return push(std::move(n));
}

int Graph::powc(int x, double exponent) {
    check_id(x);
    Node n;
    n.op = Op::PowC;
    n.in = {x};
    n.c0 = exponent;
    n.out = Tensor(node_shape(x));
    n.needs_grad = nodes_[static_cast<size_t>(x)].needs_grad;
    return push(std::move(n));
}

int Graph::clamp(int x, double lo, double hi) {
    check_id(x);
    if (!(lo <= hi)) fail(Op::Clamp, node_count(), "clamp bounds out of order");
    Node n;
    n.op = Op::Clamp;
    n.in = {x};
    n.c0 = lo;
    n.c1 = hi;
    n.out = Tensor(node_shape(x));
    n.needs_grad = nodes_[static_cast<size_t>(x)].needs_grad;
    return push(std::move(n));
}

int Graph::mul(int a, int b) {
    check_id(a);
    check_id(b);
    if (node_shape(a) != node_shape(b))
        fail(Op::Mul, node_count(), "operand shapes differ: " + shape_str(node_shape(a)) + " vs " + shape_str(node_shape(b)));
    Node n;
    n.op = Op::Mul;
    n.in = {a, b};
    n.out = Tensor(node_shape(a));
    n.needs_grad = nodes_[static_cast<size_t>(a)].needs_grad || nodes_[static_cast<size_t>(b)].needs_grad;
    return push(std::move(n));
}

int Graph::mask_apply(int image, int mask) {
    check_id(image);
    check_id(mask);
    Shape is = node_shape(image), ms = node_shape(mask);
    if (is.size() != 3 || ms.size() != 2 || is[0] != ms[0] || is[1] != ms[1])
        fail(Op::MaskApply, node_count(), "expected {H,W,C} image and matching {H,W} mask, got " + shape_str(is) + " and " + shape_str(ms));
    Node n;
    n.op = Op::MaskApply;
    n.in = {image, mask};
    n.out = Tensor(is);
    n.needs_grad = nodes_[static_cast<size_t>(image)].needs_grad || nodes_[static_cast<size_t>(mask)].needs_grad;
    return push(std::move(n));
}

int Graph::add(int a, int b) {
    check_id(a);
    check_id(b);
    if (node_shape(a) != node_shape(b))
        fail(Op::Add, node_count(), "operand shapes differ: " + shape_str(node_shape(a)) + " vs " + shape_str(node_shape(b)));
    Node n;
    n.op = Op::Add;
    n.in = {a, b};
    n.out = Tensor(node_shape(a));
    n.needs_grad = nodes_[static_cast<size_t>(a)].needs_grad || nodes_[static_cast<size_t>(b)].needs_grad;
    return push(std::move(n));
}

int Graph::sub(int a, int b) {
    check_id(a);
    check_id(b);
    if (node_shape(a) != node_shape(b))
        fail(Op::Sub, node_count(), "operand shapes differ: " + shape_str(node_shape(a)) + " vs " + shape_str(node_shape(b)));
    Node n;
    n.op = Op::Sub;
    n.in = {a, b};
    n.out = Tensor(node_shape(a));
    n.needs_grad = nodes_[static_cast<size_t>(a)].needs_grad || nodes_[static_cast<size_t>(b)].needs_grad;
    return push(std::move(n));
}

int Graph::spatial_mean(int x) {
    check_id(x);
    Shape s = node_shape(x);
    if (s.size() != 3) fail(Op::SpatialMean, node_count(), "expected rank-3 {H,W,C}, got " + shape_str(s));
    Node n;
    n.op = Op::SpatialMean;
    n.in = {x};
    n.out = Tensor({s[2]});
    n.needs_grad = nodes_[static_cast<size_t>(x)].needs_grad;
    return push(std::move(n));
}

int Graph::sq_dist(int a, int b) {
    check_id(a);
    check_id(b);
    if (node_shape(a) != node_shape(b))
        fail(Op::SqDist, node_count(), "operand shapes differ: " + shape_str(node_shape(a)) + " vs " + shape_str(node_shape(b)));
    Node n;
    n.op = Op::SqDist;
    n.in = {a, b};
    n.out = Tensor({1});
    n.needs_grad = nodes_[static_cast<size_t>(a)].needs_grad || nodes_[static_cast<size_t>(b)].needs_grad;
    return push(std::move(n));
}

int Graph::l1_norm(int x) {
    check_id(x);
    Node n;
    n.op = Op::L1Norm;
    n.in = {x};
    n.out = Tensor({1});
    n.needs_grad = nodes_[static_cast<size_t>(x)].needs_grad;
    return push(std::move(n));
}

int Graph::sum(int x) {
    check_id(x);
    Node n;
    n.op = Op::Sum;
    n.in = {x};
    n.out = Tensor({1});
    n.needs_grad = nodes_[static_cast<size_t>(x)].needs_grad;
    return push(std::move(n));
}

int Graph::stack(const std::vector<int>& scalars) {
    if (scalars.empty()) fail(Op::Stack, node_count(), "stack of zero nodes");
    Node n;
    n.op = Op::Stack;
    n.needs_grad = false;
    for (int id : scalars) {
        check_id(id);
        if (numel_of(node_shape(id)) != 1)
            fail(Op::Stack, node_count(), "stack input node " + std::to_string(id) + " is not scalar");
        n.needs_grad = n.needs_grad || nodes_[static_cast<size_t>(id)].needs_grad;
    }
    n.in = scalars;
    n.out = Tensor({static_cast<int>(scalars.size())});
    return push(std::move(n));
}

int Graph::min(int x) {
    check_id(x);
    if (node_shape(x).size() != 1) fail(Op::Min, node_count(), "expected rank-1 input");
    Node n;
    n.op = Op::Min;
    n.in = {x};
    n.out = Tensor({1});
    n.needs_grad = nodes_[static_cast<size_t>(x)].needs_grad;
    return push(std::move(n));
}

int Graph::max(int x) {
    check_id(x);
    if (node_shape(x).size() != 1) fail(Op::Max, node_count(), "expected rank-1 input");
    Node n;
    n.op = Op::Max;
    n.in = {x};
    n.out = Tensor({1});
    n.needs_grad = nodes_[static_cast<size_t>(x)].needs_grad;
    return push(std::move(n));
}

int Graph::row(int x, int index) {
    check_id(x);
    Shape s = node_shape(x);
    if (s.size() != 2) fail(Op::Row, node_count(), "expected rank-2 input, got " + shape_str(s));
    if (index < 0 || index >= s[0]) fail(Op::Row, node_count(), "row " + std::to_string(index) + " out of range");
    Node n;
    n.op = Op::Row;
    n.in = {x};
    n.i0 = index;
    n.out = Tensor({s[1]});
    n.needs_grad = nodes_[static_cast<size_t>(x)].needs_grad;
    return push(std::move(n));
}

int Graph::upsample(int x, int out_h, int out_w) {
    check_id(x);
    Shape s = node_shape(x);
    if (s.size() != 2) fail(Op::Upsample, node_count(), "expected rank-2 input, got " + shape_str(s));
    if (out_h < s[0] || out_w < s[1]) fail(Op::Upsample, node_count(), "output extents must not shrink the input");
    Node n;
    n.op = Op::Upsample;
    n.in = {x};
    n.i0 = out_h;
    n.i1 = out_w;
    n.out = Tensor({out_h, out_w});
    n.needs_grad = nodes_[static_cast<size_t>(x)].needs_grad;
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Forward evaluation

namespace {

// Half-pixel bilinear sampling positions with edge clamping: identical output
// for equal extents, convex combinations everywhere (range preserving).
struct LinearTap {
    int lo, hi;
    double w_hi;
};

LinearTap tap_for(int out_index, int in_extent, int out_extent) {
    double src = (out_index + 0.5) * static_cast<double>(in_extent) / out_extent - 0.5;
    double fl = std::floor(src);
    int lo = static_cast<int>(fl);
    double w = src - fl;
    int hi = lo + 1;
    if (lo < 0) lo = 0;
    if (hi > in_extent - 1) hi = in_extent - 1;
    if (lo > in_extent - 1) lo = in_extent - 1;
    return {lo, hi, w};
}

} // namespace

void Graph::eval(Node& n) {
    switch (n.op) {
        case Op::Input:
        case Op::Constant:
            return;
        case Op::Conv2d: {
            const Tensor& x = val(n.in[0]);
            const Tensor& k = val(n.in[1]);
            const Tensor& b = val(n.in[2]);
            const int H = x.shape[0], W = x.shape[1], Cin = x.shape[2];
            const int kh = k.shape[0], kw = k.shape[1], Cout = k.shape[3];
            const int OH = n.out.shape[0], OW = n.out.shape[1];
            const double* xp = x.data.data();
            const double* kp = k.data.data();
            double* op = n.out.data.data();
            for (int oy = 0; oy < OH; ++oy) {
                for (int ox = 0; ox < OW; ++ox) {
                    double* acc = op + (static_cast<size_t>(oy) * OW + ox) * Cout;
                    for (int co = 0; co < Cout; ++co) acc[co] = b.data[static_cast<size_t>(co)];
                    const int iy0 = oy * n.stride - n.pad;
                    const int ix0 = ox * n.stride - n.pad;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int y = iy0 + ky;
                        if (y < 0 || y >= H) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int xx = ix0 + kx;
                            if (xx < 0 || xx >= W) continue;
                            const double* xr = xp + (static_cast<size_t>(y) * W + xx) * Cin;
                            const double* kr = kp + (static_cast<size_t>(ky) * kw + kx) * Cin * Cout;
                            for (int ci = 0; ci < Cin; ++ci) {
                                const double v = xr[ci];
                                const double* kc = kr + static_cast<size_t>(ci) * Cout;
                                for (int co = 0; co < Cout; ++co) acc[co] += v * kc[co];
                            }
                        }
                    }
                }
            }
            return;
        }
        case Op::Relu: {
            const Tensor& x = val(n.in[0]);
            for (int i = 0; i < x.numel(); ++i) n.out[i] = x[i] > 0.0 ? x[i] : 0.0;
            return;
        }
        case Op::Mul: {
            const Tensor& a = val(n.in[0]);
            const Tensor& b = val(n.in[1]);
            for (int i = 0; i < a.numel(); ++i) n.out[i] = a[i] * b[i];
            return;
        }
        case Op::MaskApply: {
            const Tensor& img = val(n.in[0]);
            const Tensor& m = val(n.in[1]);
            const int C = img.shape[2];
            const int hw = m.numel();
            for (int p = 0; p < hw; ++p) {
                const double mv = m[p];
                for (int c = 0; c < C; ++c) n.out[p * C + c] = img[p * C + c] * mv;
            }
            return;
        }
        case Op::Add: {
            const Tensor& a = val(n.in[0]);
            const Tensor& b = val(n.in[1]);
            for (int i = 0; i < a.numel(); ++i) n.out[i] = a[i] + b[i];
            return;
        }
        case Op::Sub: {
            const Tensor& a = val(n.in[0]);
            const Tensor& b = val(n.in[1]);
            for (int i = 0; i < a.numel(); ++i) n.out[i] = a[i] - b[i];
            return;
        }
        case Op::Scale: {
            const Tensor& x = val(n.in[0]);
            for (int i = 0; i < x.numel(); ++i) n.out[i] = x[i] * n.c0;
            return;
        }
        case Op::Offset: {
            const Tensor& x = val(n.in[0]);
            for (int i = 0; i < x.numel(); ++i) n.out[i] = x[i] + n.c0;
            return;
        }
        case Op::Abs: {
            const Tensor& x = val(n.in[0]);
            for (int i = 0; i < x.numel(); ++i) n.out[i] = std::fabs(x[i]);
            return;
        }
        case Op::PowC: {
            const Tensor& x = val(n.in[0]);
            for (int i = 0; i < x.numel(); ++i) {
                if (x[i] < 0.0)
                    throw DomainError("negative base " + std::to_string(x[i]));
                n.out[i] = std::pow(x[i], n.c0);
            }
            return;
        }
        case Op::Log: {
            const Tensor& x = val(n.in[0]);
            for (int i = 0; i < x.numel(); ++i) {
                if (x[i] <= 0.0)
                    throw DomainError("log of non-positive value " + std::to_string(x[i]));
                n.out[i] = std::log(x[i]);
            }
            return;
        }
        case Op::Exp: {
            const Tensor& x = val(n.in[0]);
            for (int i = 0; i < x.numel(); ++i) n.out[i] = std::exp(x[i]);
            return;
        }
        case Op::Sigmoid: {
            const Tensor& x = val(n.in[0]);
            for (int i = 0; i < x.numel(); ++i) {
                const double v = x[i];
                if (v >= 0.0) {
                    n.out[i] = 1.0 / (1.0 + std::exp(-v));
                } else {
                    const double e = std::exp(v);
                    n.out[i] = e / (1.0 + e);
                }
            }
            return;
        }
        case Op::Clamp: {
            const Tensor& x = val(n.in[0]);
            for (int i = 0; i < x.numel(); ++i) n.out[i] = std::min(n.c1, std::max(n.c0, x[i]));
            return;
        }
        case Op::SpatialMean: {
            const Tensor& x = val(n.in[0]);
            const int C = x.shape[2];
            const int hw = x.shape[0] * x.shape[1];
            n.out.fill(0.0);
            for (int p = 0; p < hw; ++p)
                for (int c = 0; c < C; ++c) n.out[c] += x[p * C + c];
            for (int c = 0; c < C; ++c) n.out[c] /= hw;
            return;
        }
        case Op::SqDist: {
            const Tensor& a = val(n.in[0]);
            const Tensor& b = val(n.in[1]);
            double acc = 0.0;
            for (int i = 0; i < a.numel(); ++i) {
                const double d = a[i] - b[i];
                acc += d * d;
            }
            n.out[0] = acc;
            return;
        }
        case Op::L1Norm: {
            const Tensor& x = val(n.in[0]);
            double acc = 0.0;
            for (int i = 0; i < x.numel(); ++i) acc += std::fabs(x[i]);
            n.out[0] = acc;
            return;
        }
        case Op::Sum: {
            const Tensor& x = val(n.in[0]);
            double acc = 0.0;
            for (int i = 0; i < x.numel(); ++i) acc += x[i];
            n.out[0] = acc;
            return;
        }
        case Op::Stack: {
            for (size_t i = 0; i < n.in.size(); ++i) n.out[static_cast<int>(i)] = val(n.in[i])[0];
            return;
        }
        case Op::Min: {
            const Tensor& x = val(n.in[0]);
            int best = 0;
            for (int i = 1; i < x.numel(); ++i)
                if (x[i] < x[best]) best = i;
            n.arg = best;
            n.out[0] = x[best];
            return;
        }
        case Op::Max: {
            const Tensor& x = val(n.in[0]);
            int best = 0;
            for (int i = 1; i < x.numel(); ++i)
                if (x[i] > x[best]) best = i;
            n.arg = best;
            n.out[0] = x[best];
            return;
        }
        case Op::Row: {
            const Tensor& x = val(n.in[0]);
            const int M = x.shape[1];
            const double* src = x.data.data() + static_cast<size_t>(n.i0) * M;
            std::copy(src, src + M, n.out.data.data());
            return;
        }
        case Op::Upsample: {
            const Tensor& x = val(n.in[0]);
            const int h = x.shape[0], w = x.shape[1];
            const int OH = n.i0, OW = n.i1;
            std::vector<LinearTap> cols(static_cast<size_t>(OW));
            for (int X = 0; X < OW; ++X) cols[static_cast<size_t>(X)] = tap_for(X, w, OW);
            for (int Y = 0; Y < OH; ++Y) {
                const LinearTap ty = tap_for(Y, h, OH);
                for (int X = 0; X < OW; ++X) {
                    const LinearTap& tx = cols[static_cast<size_t>(X)];
                    const double top = x.at2(ty.lo, tx.lo) * (1.0 - tx.w_hi) + x.at2(ty.lo, tx.hi) * tx.w_hi;
                    const double bot = x.at2(ty.hi, tx.lo) * (1.0 - tx.w_hi) + x.at2(ty.hi, tx.hi) * tx.w_hi;
                    n.out.at2(Y, X) = top * (1.0 - ty.w_hi) + bot * ty.w_hi;
                }
            }
            return;
        }
    }
}

const Tensor& Graph::forward(int terminal, const TensorRefMap& inputs) {
    check_id(terminal);
    for (int id = 0; id <= terminal; ++id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.op != Op::Input) continue;
        auto it = inputs.find(n.name);
        if (it == inputs.end())
            throw ShapeError("input '" + n.name + "' not bound");
        if (it->second->shape != n.out.shape)
            throw ShapeError("input '" + n.name + "' has shape " + shape_str(it->second->shape) +
                             ", declared " + shape_str(n.out.shape));
        n.bound = it->second;
    }
    for (int id = 0; id <= terminal; ++id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        try {
            eval(n);
        } catch (const DomainError& e) {
            throw DomainError(std::string(op_name(n.op)) + "(node " + std::to_string(id) + "): " + e.what());
        }
    }
    evaluated_ = terminal;
    return val(terminal);
}

const Tensor& Graph::value(int id) const {
    check_id(id);
    if (id > evaluated_) throw ShapeError("node " + std::to_string(id) + " not evaluated");
    return val(id);
}

int Graph::arg_extremum(int id) const {
    check_id(id);
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.op != Op::Min && n.op != Op::Max) throw ShapeError("node is not min/max");
    return n.arg;
}

// ---------------------------------------------------------------------------
// Reverse sweep

void Graph::backprop(Node& n) {
    auto gin = [&](int k) -> Tensor& { return nodes_[static_cast<size_t>(n.in[static_cast<size_t>(k)])].grad; };
    auto wants = [&](int k) { return nodes_[static_cast<size_t>(n.in[static_cast<size_t>(k)])].needs_grad; };
    const Tensor& g = n.grad;

    switch (n.op) {
        case Op::Input:
        case Op::Constant:
            return;
        case Op::Conv2d: {
            const Tensor& x = val(n.in[0]);
            const Tensor& k = val(n.in[1]);
            const bool wx = wants(0), wk = wants(1), wb = wants(2);
            const int H = x.shape[0], W = x.shape[1], Cin = x.shape[2];
            const int kh = k.shape[0], kw = k.shape[1], Cout = k.shape[3];
            const int OH = n.out.shape[0], OW = n.out.shape[1];
            if (wb) {
                Tensor& db = gin(2);
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox) {
                        const double* gr = g.data.data() + (static_cast<size_t>(oy) * OW + ox) * Cout;
                        for (int co = 0; co < Cout; ++co) db[co] += gr[co];
                    }
            }
            if (!wx && !wk) return;
            const double* kp = k.data.data();
            double* dxp = wx ? gin(0).data.data() : nullptr;
            double* dkp = wk ? gin(1).data.data() : nullptr;
            for (int oy = 0; oy < OH; ++oy) {
                for (int ox = 0; ox < OW; ++ox) {
                    const double* gr = g.data.data() + (static_cast<size_t>(oy) * OW + ox) * Cout;
                    const int iy0 = oy * n.stride - n.pad;
                    const int ix0 = ox * n.stride - n.pad;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int y = iy0 + ky;
                        if (y < 0 || y >= H) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int xx = ix0 + kx;
                            if (xx < 0 || xx >= W) continue;
                            const size_t xoff = (static_cast<size_t>(y) * W + xx) * Cin;
                            const size_t koff = (static_cast<size_t>(ky) * kw + kx) * Cin * Cout;
                            for (int ci = 0; ci < Cin; ++ci) {
                                if (wk) {
                                    const double v = x.data[xoff + static_cast<size_t>(ci)];
                                    double* dk = dkp + koff + static_cast<size_t>(ci) * Cout;
                                    for (int co = 0; co < Cout; ++co) dk[co] += v * gr[co];
                                }
                                if (wx) {
                                    const double* kc = kp + koff + static_cast<size_t>(ci) * Cout;
                                    double acc = 0.0;
                                    for (int co = 0; co < Cout; ++co) acc += kc[co] * gr[co];
                                    dxp[xoff + static_cast<size_t>(ci)] += acc;
                                }
                            }
                        }
                    }
                }
            }
            return;
        }
        case Op::Relu: {
            if (!wants(0)) return;
            const Tensor& x = val(n.in[0]);
            Tensor& dx = gin(0);
            for (int i = 0; i < x.numel(); ++i)
                if (x[i] > 0.0) dx[i] += g[i];
            return;
        }
        case Op::Mul: {
            const Tensor& a = val(n.in[0]);
            const Tensor& b = val(n.in[1]);
            if (wants(0)) {
                Tensor& da = gin(0);
                for (int i = 0; i < a.numel(); ++i) da[i] += g[i] * b[i];
            }
            if (wants(1)) {
                Tensor& db = gin(1);
                for (int i = 0; i < a.numel(); ++i) db[i] += g[i] * a[i];
            }
            return;
        }
        case Op::MaskApply: {
            const Tensor& img = val(n.in[0]);
            const Tensor& m = val(n.in[1]);
            const int C = img.shape[2];
            const int hw = m.numel();
            if (wants(0)) {
                Tensor& di = gin(0);
                for (int p = 0; p < hw; ++p)
                    for (int c = 0; c < C; ++c) di[p * C + c] += g[p * C + c] * m[p];
            }
            if (wants(1)) {
                Tensor& dm = gin(1);
                for (int p = 0; p < hw; ++p) {
                    double acc = 0.0;
                    for (int c = 0; c < C; ++c) acc += g[p * C + c] * img[p * C + c];
                    dm[p] += acc;
                }
            }
            return;
        }
        case Op::Add: {
            for (int k2 = 0; k2 < 2; ++k2)
                if (wants(k2)) {
                    Tensor& d = gin(k2);
                    for (int i = 0; i < g.numel(); ++i) d[i] += g[i];
                }
            return;
        }
        case Op::Sub: {
            if (wants(0)) {
                Tensor& d = gin(0);
                for (int i = 0; i < g.numel(); ++i) d[i] += g[i];
            }
            if (wants(1)) {
                Tensor& d = gin(1);
                for (int i = 0; i < g.numel(); ++i) d[i] -= g[i];
            }
            return;
        }
        case Op::Scale: {
            if (!wants(0)) return;
            Tensor& d = gin(0);
            for (int i = 0; i < g.numel(); ++i) d[i] += g[i] * n.c0;
            return;
        }
        case Op::Offset: {
            if (!wants(0)) return;
            Tensor& d = gin(0);
            for (int i = 0; i < g.numel(); ++i) d[i] += g[i];
            return;
        }
        case Op::Abs: {
            if (!wants(0)) return;
            const Tensor& x = val(n.in[0]);
            Tensor& d = gin(0);
            for (int i = 0; i < g.numel(); ++i) {
                if (x[i] > 0.0)
                    d[i] += g[i];
                else if (x[i] < 0.0)
                    d[i] -= g[i];
            }
            return;
        }
        case Op::PowC: {
            if (!wants(0)) return;
            const Tensor& x = val(n.in[0]);
            Tensor& d = gin(0);
            for (int i = 0; i < g.numel(); ++i) {
                double slope;
                if (x[i] > 0.0)
                    slope = n.c0 * std::pow(x[i], n.c0 - 1.0);
                else
                    slope = n.c0 == 1.0 ? 1.0 : 0.0; // subgradient at the boundary
                d[i] += g[i] * slope;
            }
            return;
        }
        case Op::Log: {
            if (!wants(0)) return;
            const Tensor& x = val(n.in[0]);
            Tensor& d = gin(0);
            for (int i = 0; i < g.numel(); ++i) d[i] += g[i] / x[i];
            return;
        }
        case Op::Exp: {
            if (!wants(0)) return;
            Tensor& d = gin(0);
            for (int i = 0; i < g.numel(); ++i) d[i] += g[i] * n.out[i];
            return;
        }
        case Op::Sigmoid: {
            if (!wants(0)) return;
            Tensor& d = gin(0);
            for (int i = 0; i < g.numel(); ++i) d[i] += g[i] * n.out[i] * (1.0 - n.out[i]);
            return;
        }
        case Op::Clamp: {
            if (!wants(0)) return;
            const Tensor& x = val(n.in[0]);
            Tensor& d = gin(0);
            for (int i = 0; i < g.numel(); ++i)
                if (x[i] > n.c0 && x[i] < n.c1) d[i] += g[i];
            return;
        }
        case Op::SpatialMean: {
            if (!wants(0)) return;
            const Tensor& x = val(n.in[0]);
            const int C = x.shape[2];
            const int hw = x.shape[0] * x.shape[1];
            Tensor& d = gin(0);
            for (int p = 0; p < hw; ++p)
                for (int c = 0; c < C; ++c) d[p * C + c] += g[c] / hw;
            return;
        }
        case Op::SqDist: {
            const Tensor& a = val(n.in[0]);
            const Tensor& b = val(n.in[1]);
            const double gv = g[0];
            if (wants(0)) {
                Tensor& da = gin(0);
                for (int i = 0; i < a.numel(); ++i) da[i] += 2.0 * (a[i] - b[i]) * gv;
            }
            if (wants(1)) {
                Tensor& db = gin(1);
                for (int i = 0; i < a.numel(); ++i) db[i] -= 2.0 * (a[i] - b[i]) * gv;
            }
            return;
        }
        case Op::L1Norm: {
            if (!wants(0)) return;
            const Tensor& x = val(n.in[0]);
            Tensor& d = gin(0);
            const double gv = g[0];
            for (int i = 0; i < x.numel(); ++i) {
                if (x[i] > 0.0)
                    d[i] += gv;
                else if (x[i] < 0.0)
                    d[i] -= gv;
            }
            return;
        }
        case Op::Sum: {
            if (!wants(0)) return;
            Tensor& d = gin(0);
            const double gv = g[0];
            for (int i = 0; i < d.numel(); ++i) d[i] += gv;
            return;
        }
        case Op::Stack: {
            for (size_t i = 0; i < n.in.size(); ++i) {
                Node& src = nodes_[static_cast<size_t>(n.in[i])];
                if (src.needs_grad) src.grad[0] += g[static_cast<int>(i)];
            }
            return;
        }
        case Op::Min:
        case Op::Max: {
            if (!wants(0)) return;
            gin(0)[n.arg] += g[0];
            return;
        }
        case Op::Row: {
            if (!wants(0)) return;
            Tensor& d = gin(0);
            const int M = n.out.numel();
            double* dst = d.data.data() + static_cast<size_t>(n.i0) * M;
            for (int i = 0; i < M; ++i) dst[i] += g[i];
            return;
        }
        case Op::Upsample: {
            if (!wants(0)) return;
            const Tensor& x = val(n.in[0]);
            const int h = x.shape[0], w = x.shape[1];
            const int OH = n.i0, OW = n.i1;
            Tensor& d = gin(0);
            std::vector<LinearTap> cols(static_cast<size_t>(OW));
            for (int X = 0; X < OW; ++X) cols[static_cast<size_t>(X)] = tap_for(X, w, OW);
            for (int Y = 0; Y < OH; ++Y) {
                const LinearTap ty = tap_for(Y, h, OH);
                for (int X = 0; X < OW; ++X) {
                    const LinearTap& tx = cols[static_cast<size_t>(X)];
                    const double gv = g.at2(Y, X);
                    d.at2(ty.lo, tx.lo) += gv * (1.0 - ty.w_hi) * (1.0 - tx.w_hi);
                    d.at2(ty.lo, tx.hi) += gv * (1.0 - ty.w_hi) * tx.w_hi;
                    d.at2(ty.hi, tx.lo) += gv * ty.w_hi * (1.0 - tx.w_hi);
                    d.at2(ty.hi, tx.hi) += gv * ty.w_hi * tx.w_hi;
                }
            }
            return;
        }
    }
}

std::map<std::string, Tensor> Graph::gradient(int terminal, const std::vector<std::string>& wrt) {
    check_id(terminal);
    if (terminal > evaluated_) throw ShapeError("gradient before forward");
    Node& term = nodes_[static_cast<size_t>(terminal)];
    if (numel_of(val(terminal).shape) != 1)
        throw ShapeError("gradient terminal (node " + std::to_string(terminal) + ") is not scalar");

    // Zero accumulators, then seed the terminal with 1.
    for (int id = 0; id <= terminal; ++id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.needs_grad) continue;
        if (n.grad.shape != n.out.shape) n.grad = Tensor(n.out.shape);
        else n.grad.fill(0.0);
    }

    if (term.needs_grad) {
        term.grad[0] = 1.0;
        for (int id = terminal; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.needs_grad) backprop(n);
        }
    }

    std::map<std::string, Tensor> out;
    for (const std::string& name : wrt) {
        auto it = inputs_by_name_.find(name);
        if (it == inputs_by_name_.end()) throw ShapeError("unknown input '" + name + "'");
        Node& n = nodes_[static_cast<size_t>(it->second)];
        if (it->second > terminal || !n.needs_grad || !term.needs_grad)
            out[name] = Tensor(n.out.shape); // zero: no path to the terminal
        else
            out[name] = n.grad;
    }
    return out;
}

double Graph::finite_diff_check(int terminal, const TensorRefMap& inputs, const std::string& wrt, double h) {
    if (h <= 0.0) throw DomainError("finite difference step must be positive");
    auto it = inputs.find(wrt);
    if (it == inputs.end()) throw ShapeError("input '" + wrt + "' not bound");

    forward(terminal, inputs);
    Tensor analytic = gradient(terminal, {wrt})[wrt];

    Tensor probe = *it->second;
    TensorRefMap patched = inputs;
    patched[wrt] = &probe;

    double worst = 0.0;
    for (int i = 0; i < probe.numel(); ++i) {
        const double saved = probe[i];
        probe[i] = saved + h;
        const double fp = forward(terminal, patched)[0];
        probe[i] = saved - h;
        const double fm = forward(terminal, patched)[0];
        probe[i] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::fabs(analytic[i] - numeric) / (std::fabs(analytic[i]) + 1e-8);
        worst = std::max(worst, err);
    }
    // Restore the caller's binding.
    forward(terminal, inputs);
    return worst;
}

} // namespace feainf
