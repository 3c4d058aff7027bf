#pragma once

#include <map>
#include <string>
#include <vector>

#include "feainf/tensor.hpp"

namespace feainf {

enum class Op {
    Input,
    Constant,
    Conv2d,
    Relu,
    Mul,
    MaskApply,
    Add,
    Sub,
    Scale,
    Offset,
    Abs,
    PowC,
    Log,
    Exp,
    Sigmoid,
    Clamp,
    SpatialMean,
    SqDist,
    L1Norm,
    Sum,
    Stack,
    Min,
    Max,
    Row,
    Upsample,
};

const char* op_name(Op op);

using TensorRefMap = std::map<std::string, const Tensor*>;

/// Define-then-run computation graph with reverse-mode differentiation.
///
/// Nodes are appended in topological order by the builder methods; shapes are
/// checked at build time. forward() binds named input tensors and evaluates,
/// gradient() runs one reverse sweep from a scalar terminal. A graph instance
/// is single-threaded; distinct instances (including copies) are independent.
class Graph {
public:
    int input(const std::string& name, Shape shape, bool needs_grad = true);
    int constant(Tensor value);

    // image {H,W,Cin}, kernel {kh,kw,Cin,Cout}, bias {Cout}; floor output size.
    int conv2d(int image, int kernel, int bias, int stride, int pad);
    int relu(int x);
    int mul(int a, int b);              // elementwise, same shape
    int mask_apply(int image, int mask); // {H,W,C} * {H,W}, broadcast over channels
    int add(int a, int b);
    int sub(int a, int b);
    int scale(int x, double c);
    int offset(int x, double c);
    int abs(int x);
    int powc(int x, double exponent);   // x >= 0 required
    int log(int x);                     // natural log, x > 0 required
    int exp(int x);
    int sigmoid(int x);
    int clamp(int x, double lo, double hi);
    int spatial_mean(int x);            // {H,W,C} -> {C}
    int sq_dist(int a, int b);          // -> {1}
    int l1_norm(int x);                 // -> {1}
    int sum(int x);                     // -> {1}
    int stack(const std::vector<int>& scalars); // n x {1} -> {n}
    int min(int x);                     // {n} -> {1}, ties -> lowest index
    int max(int x);                     // {n} -> {1}, ties -> lowest index
    int row(int x, int index);          // {N,M} -> {M}
    int upsample(int x, int out_h, int out_w); // bilinear {h,w} -> {H,W}

    int node_count() const { return static_cast<int>(nodes_.size()); }
    Shape node_shape(int id) const;

    /// Evaluates nodes [0, terminal] and returns the terminal's value. Bound
    /// input pointers must stay valid until the next forward/gradient call.
    const Tensor& forward(int terminal, const TensorRefMap& inputs);
    const Tensor& forward(int terminal) { return forward(terminal, {}); }

    /// Value of any node after forward().
    const Tensor& value(int id) const;

    /// Index selected by a Min/Max node during the last forward().
    int arg_extremum(int id) const;

    /// d(terminal)/d(input) for each requested input name; terminal must be
    /// scalar and forward() must have run. Accumulators are zeroed first.
    std::map<std::string, Tensor> gradient(int terminal, const std::vector<std::string>& wrt);

    /// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8).
    double finite_diff_check(int terminal, const TensorRefMap& inputs, const std::string& wrt, double h);

private:
    struct Node {
        Op op = Op::Constant;
        std::vector<int> in;
        int stride = 0, pad = 0;
        double c0 = 0.0, c1 = 0.0; // scale/offset/pow constants, clamp bounds
        int i0 = 0, i1 = 0;        // row index / upsample extents
        std::string name;          // input nodes
        bool needs_grad = false;
        Tensor out;
        const Tensor* bound = nullptr; // input nodes, set per forward
        Tensor grad;
        int arg = -1;              // min/max selection
    };

    int push(Node n);
    const Tensor& val(int id) const;
    void eval(Node& n);
    void backprop(Node& n);
    void check_id(int id) const;
    [[noreturn]] void fail(Op op, int id, const std::string& msg) const;

    std::vector<Node> nodes_;
    std::map<std::string, int> inputs_by_name_;
    int evaluated_ = -1;
};

} // namespace feainf
