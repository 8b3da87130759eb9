#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "oae/error.hpp"
#include "oae/linalg.hpp"

namespace oae::ad {

/// Shape-tagged dense 64-bit-float array. Rank 0 (scalar), 1 (column
/// vector) and 2 (row-major matrix) are supported.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;

    static Tensor scalar(double x) {
        Tensor t;
        t.v = {x};
        return t;
    }
    static Tensor vec(std::vector<double> data) {
        Tensor t;
        t.shape = {static_cast<int>(data.size())};
        t.v = std::move(data);
        return t;
    }
    static Tensor matrix(int r, int c) {
        Tensor t;
        t.shape = {r, c};
        t.v.assign(static_cast<std::size_t>(r) * c, 0.0);
        return t;
    }
    static Tensor from_mat(const Mat& m) {
        Tensor t;
        t.shape = {m.rows, m.cols};
        t.v = m.d;
        return t;
    }

    std::size_t numel() const {
        std::size_t n = 1;
        for (int s : shape) n *= static_cast<std::size_t>(s);
        return n;
    }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() == 2 ? shape[1] : 1; }

    Mat as_mat() const {
        Mat m(rows(), cols());
        m.d = v;
        return m;
    }
};

using NodeId = std::int32_t;

enum class Op : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Relu,
    Gelu,
    Tanh,
    ClampMin,
    AddRowVec,
    ScaleRows,
    MatMul,
    Transpose,
    Cols,
    Rows,
    Col,
    LeadingBlock,
    Sum,
    Mean,
    SqNorm,
    Qr,
    SpdSolve,
};

namespace detail {
constexpr double kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}
inline double gelu_grad(double x) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}
}  // namespace detail

/// Recorded computation over tensors with reverse-mode differentiation.
/// Records are appended in topological order; one backward pass visits each
/// exactly once, in reverse. Single-threaded by design; independent tapes
/// may run concurrently.
class Tape {
  public:
    NodeId leaf(Tensor t, bool requires_grad = false) {
        check_finite(t, "leaf");
        NodeId id = new_node(std::move(t), requires_grad);
        records_.push_back({Op::Leaf, -1, -1, id, -1, 0, 0.0, {}});
        return id;
    }

    const Tensor& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].val; }
    bool requires_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].requires; }
    bool has_grad(NodeId id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

    /// Gradient accumulator; zero-filled if backward has not touched the node.
    const std::vector<double>& grad(NodeId id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.empty()) n.grad.assign(n.val.numel(), 0.0);
        return n.grad;
    }

    void zero_grad() {
        for (Node& n : nodes_) n.grad.clear();
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    // ---- elementwise ----

    NodeId add(NodeId a, NodeId b) { return binary(Op::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary(Op::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary(Op::Mul, a, b); }

    NodeId scale(NodeId a, double c) {
        Tensor out = value(a);
        for (double& x : out.v) x *= c;
        return unary_like(Op::Scale, a, std::move(out), 0, c);
    }
    NodeId add_scalar(NodeId a, double c) {
        Tensor out = value(a);
        for (double& x : out.v) x += c;
        return unary_like(Op::AddScalar, a, std::move(out), 0, c);
    }
    NodeId relu(NodeId a) {
        Tensor out = value(a);
        for (double& x : out.v) x = x > 0.0 ? x : 0.0;
        return unary_like(Op::Relu, a, std::move(out));
    }
    NodeId gelu(NodeId a) {
        Tensor out = value(a);
        for (double& x : out.v) x = detail::gelu(x);
        return unary_like(Op::Gelu, a, std::move(out));
    }
    NodeId tanh(NodeId a) {
        Tensor out = value(a);
        for (double& x : out.v) x = std::tanh(x);
        return unary_like(Op::Tanh, a, std::move(out));
    }
    /// out = max(a, c); gradient is blocked on clamped entries.
    NodeId clamp_min(NodeId a, double c) {
        Tensor out = value(a);
        for (double& x : out.v) x = x > c ? x : c;
        return unary_like(Op::ClampMin, a, std::move(out), 0, c);
    }

    /// out = a + ones * b^T for a (n x m) and row vector b (m).
    NodeId add_rowvec(NodeId a, NodeId b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.shape.size() != 2 || static_cast<std::size_t>(ta.shape[1]) != tb.numel())
            throw DimensionError("add_rowvec: need (n x m) and length-m vector");
        Tensor out = ta;
        int n = ta.shape[0], m = ta.shape[1];
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) out.v[static_cast<std::size_t>(i) * m + j] += tb.v[static_cast<std::size_t>(j)];
        return binary_raw(Op::AddRowVec, a, b, std::move(out));
    }

    /// out(i,j) = a(i,j) * w(i) for a (n x m) and vector w (n).
    NodeId scale_rows(NodeId a, NodeId w) {
        const Tensor& ta = value(a);
        const Tensor& tw = value(w);
        if (ta.shape.size() != 2 || static_cast<std::size_t>(ta.shape[0]) != tw.numel())
            throw DimensionError("scale_rows: need (n x m) and length-n vector");
        Tensor out = ta;
        int n = ta.shape[0], m = ta.shape[1];
        for (int i = 0; i < n; ++i) {
            double wi = tw.v[static_cast<std::size_t>(i)];
            for (int j = 0; j < m; ++j) out.v[static_cast<std::size_t>(i) * m + j] *= wi;
        }
        return binary_raw(Op::ScaleRows, a, w, std::move(out));
    }

    // ---- structural ----

    NodeId matmul(NodeId a, NodeId b) {
        Mat out = oae::matmul(value(a).as_mat(), value(b).as_mat());
        return binary_raw(Op::MatMul, a, b, Tensor::from_mat(out));
    }

    NodeId transpose(NodeId a) {
        Mat out = oae::transpose(value(a).as_mat());
        return unary_like(Op::Transpose, a, Tensor::from_mat(out));
    }

    /// Leading k columns of a matrix.
    NodeId cols(NodeId a, int k) {
        const Tensor& ta = value(a);
        if (ta.shape.size() != 2 || k < 1 || k > ta.shape[1]) throw DimensionError("cols: bad column count");
        int n = ta.shape[0], m = ta.shape[1];
        Tensor out = Tensor::matrix(n, k);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j) out.v[static_cast<std::size_t>(i) * k + j] = ta.v[static_cast<std::size_t>(i) * m + j];
        return unary_like(Op::Cols, a, std::move(out), k);
    }

    /// Leading k rows of a matrix.
    NodeId rows(NodeId a, int k) {
        const Tensor& ta = value(a);
        if (ta.shape.size() != 2 || k < 1 || k > ta.shape[0]) throw DimensionError("rows: bad row count");
        int m = ta.shape[1];
        Tensor out = Tensor::matrix(k, m);
        std::copy(ta.v.begin(), ta.v.begin() + static_cast<std::size_t>(k) * m, out.v.begin());
        return unary_like(Op::Rows, a, std::move(out), k);
    }

    /// Column j of a matrix, as a vector.
    NodeId col(NodeId a, int j) {
        const Tensor& ta = value(a);
        if (ta.shape.size() != 2 || j < 0 || j >= ta.shape[1]) throw DimensionError("col: bad column index");
        int n = ta.shape[0], m = ta.shape[1];
        std::vector<double> data(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) data[static_cast<std::size_t>(i)] = ta.v[static_cast<std::size_t>(i) * m + j];
        return unary_like(Op::Col, a, Tensor::vec(std::move(data)), j);
    }

    /// Leading k x k block of a square matrix.
    NodeId leading_block(NodeId a, int k) {
        const Tensor& ta = value(a);
        if (ta.shape.size() != 2 || ta.shape[0] != ta.shape[1] || k < 1 || k > ta.shape[0])
            throw DimensionError("leading_block: bad block size");
        int m = ta.shape[1];
        Tensor out = Tensor::matrix(k, k);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) out.v[static_cast<std::size_t>(i) * k + j] = ta.v[static_cast<std::size_t>(i) * m + j];
        return unary_like(Op::LeadingBlock, a, std::move(out), k);
    }

    // ---- reductions (axis -1 = all, 0 = over rows, 1 = over columns) ----

    NodeId sum(NodeId a, int axis = -1) { return reduce(Op::Sum, a, axis); }
    NodeId mean(NodeId a, int axis = -1) { return reduce(Op::Mean, a, axis); }
    /// Sum of squares; the squared 2-norm.
    NodeId sq_norm(NodeId a, int axis = -1) { return reduce(Op::SqNorm, a, axis); }

    // ---- factorizations / solves ----

    /// Reduced QR with the positive-diag(R) sign convention.
    std::pair<NodeId, NodeId> qr(NodeId a) {
        const Tensor& ta = value(a);
        if (ta.shape.size() != 2 || ta.shape[0] < ta.shape[1])
            throw DimensionError("qr: need an n x k matrix with n >= k");
        QrResult f = qr_reduced(ta.as_mat());
        if (!all_finite(f.q) || !all_finite(f.r)) throw NumericError("qr: non-finite factor");
        double defect = orthonormality_defect(f.q);
        if (defect > 1e-10) throw NumericError("qr: orthonormality defect " + std::to_string(defect));
        NodeId q = new_node(Tensor::from_mat(f.q), nodes_[static_cast<std::size_t>(a)].requires);
        NodeId r = new_node(Tensor::from_mat(f.r), nodes_[static_cast<std::size_t>(a)].requires);
        records_.push_back({Op::Qr, a, -1, q, r, 0, 0.0, {f.q, f.r}});
        return {q, r};
    }

    /// Solve g x = b for SPD g via Cholesky, with a jitter ladder retry and
    /// one step of iterative refinement. g must be symmetric to 1e-10.
    NodeId spd_solve(NodeId g, NodeId b) {
        const Tensor& tg = value(g);
        const Tensor& tb = value(b);
        if (tg.shape.size() != 2 || tg.shape[0] != tg.shape[1]) throw DimensionError("spd_solve: g not square");
        if (tb.rows() != tg.shape[0]) throw DimensionError("spd_solve: rhs row count disagrees");
        Mat gm = tg.as_mat();
        double gs = std::max(1.0, max_abs(gm));
        for (int i = 0; i < gm.rows; ++i)
            for (int j = i + 1; j < gm.cols; ++j)
                if (std::fabs(gm(i, j) - gm(j, i)) > 1e-10 * gs)
                    throw NumericError("spd_solve: g not symmetric to 1e-10");
        Mat bm = tb.as_mat();
        Mat l = cholesky_jittered(gm);
        Mat x = refined_solve(gm, l, bm);
        double rnorm = frobenius(residual(gm, x, bm));
        if (rnorm > 1e-8 * std::max(1e-300, frobenius(bm)))
            throw NumericError("spd_solve: residual " + std::to_string(rnorm) + " exceeds contract");
        Tensor out = Tensor::from_mat(x);
        out.shape = tb.shape;  // preserve vector rank of the rhs
        check_finite(out, "spd_solve");
        bool req = nodes_[static_cast<std::size_t>(g)].requires || nodes_[static_cast<std::size_t>(b)].requires;
        NodeId id = new_node(std::move(out), req);
        records_.push_back({Op::SpdSolve, g, b, id, -1, 0, 0.0, {l, x}});
        return id;
    }

    // ---- reverse pass ----

    /// Accumulate d(loss)/d(node) into every node reachable from `loss`.
    /// Repeated calls without zero_grad() accumulate.
    void backward(NodeId loss) {
        const Tensor& lt = value(loss);
        if (lt.numel() != 1) throw DimensionError("backward: loss must be scalar");
        grad_ref(loss)[0] += 1.0;
        for (std::size_t ri = records_.size(); ri-- > 0;) {
            const Rec& rec = records_[ri];
            if (rec.op == Op::Leaf) continue;
            bool touched = has_grad(rec.out) || (rec.out2 >= 0 && has_grad(rec.out2));
            if (!touched) continue;
            dispatch_backward(rec);
        }
    }

  private:
    struct Node {
        Tensor val;
        std::vector<double> grad;
        bool requires = false;
    };
    struct Rec {
        Op op;
        NodeId a, b;
        NodeId out, out2;
        int iarg;
        double sarg;
        std::vector<Mat> saved;
    };

    std::vector<Node> nodes_;
    std::vector<Rec> records_;

    static void check_finite(const Tensor& t, const char* where) {
        for (double x : t.v)
            if (!std::isfinite(x)) throw NumericError(std::string(where) + ": non-finite value");
    }

    NodeId new_node(Tensor t, bool requires) {
        nodes_.push_back({std::move(t), {}, requires});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    std::vector<double>& grad_ref(NodeId id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.empty()) n.grad.assign(n.val.numel(), 0.0);
        return n.grad;
    }

    NodeId unary_like(Op op, NodeId a, Tensor out, int iarg = 0, double sarg = 0.0) {
        check_finite(out, "op");
        NodeId id = new_node(std::move(out), nodes_[static_cast<std::size_t>(a)].requires);
        records_.push_back({op, a, -1, id, -1, iarg, sarg, {}});
        return id;
    }

    NodeId binary_raw(Op op, NodeId a, NodeId b, Tensor out, int iarg = 0) {
        check_finite(out, "op");
        bool req = nodes_[static_cast<std::size_t>(a)].requires || nodes_[static_cast<std::size_t>(b)].requires;
        NodeId id = new_node(std::move(out), req);
        records_.push_back({op, a, b, id, -1, iarg, 0.0, {}});
        return id;
    }

    NodeId binary(Op op, NodeId a, NodeId b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        bool b_scalar = tb.numel() == 1 && ta.numel() != 1;
        if (!b_scalar && ta.shape != tb.shape)
            throw DimensionError("elementwise: shapes disagree and b is not scalar");
        Tensor out = ta;
        double bs = tb.v[0];
        for (std::size_t i = 0; i < out.v.size(); ++i) {
            double bv = b_scalar ? bs : tb.v[i];
            switch (op) {
                case Op::Add: out.v[i] += bv; break;
                case Op::Sub: out.v[i] -= bv; break;
                case Op::Mul: out.v[i] *= bv; break;
                default: break;
            }
        }
        return binary_raw(op, a, b, std::move(out), b_scalar ? 1 : 0);
    }

    NodeId reduce(Op op, NodeId a, int axis) {
        const Tensor& ta = value(a);
        if (axis != -1) {
            if (ta.shape.size() != 2 || (axis != 0 && axis != 1))
                throw DimensionError("reduce: invalid axis");
        }
        Tensor out;
        if (axis == -1) {
            double s = 0.0;
            for (double x : ta.v) s += (op == Op::SqNorm) ? x * x : x;
            if (op == Op::Mean) s /= static_cast<double>(ta.numel());
            out = Tensor::scalar(s);
        } else {
            int n = ta.shape[0], m = ta.shape[1];
            int olen = (axis == 0) ? m : n;
            std::vector<double> s(static_cast<std::size_t>(olen), 0.0);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) {
                    double x = ta.v[static_cast<std::size_t>(i) * m + j];
                    s[static_cast<std::size_t>(axis == 0 ? j : i)] += (op == Op::SqNorm) ? x * x : x;
                }
            if (op == Op::Mean) {
                double cnt = static_cast<double>(axis == 0 ? n : m);
                for (double& x : s) x /= cnt;
            }
            out = Tensor::vec(std::move(s));
        }
        return unary_like(op, a, std::move(out), axis);
    }

    static Mat residual(const Mat& g, const Mat& x, const Mat& b) {
        Mat r = matmul(g, x);
        for (std::size_t i = 0; i < r.d.size(); ++i) r.d[i] = b.d[i] - r.d[i];
        return r;
    }

    /// Cholesky solve plus one iterative-refinement pass.
    static Mat refined_solve(const Mat& g, const Mat& l, const Mat& b) {
        Mat x = cholesky_solve(l, b);
        Mat r = residual(g, x, b);
        Mat dx = cholesky_solve(l, r);
        for (std::size_t i = 0; i < x.d.size(); ++i) x.d[i] += dx.d[i];
        return x;
    }

    void accumulate(NodeId id, const std::vector<double>& contrib) {
        if (!nodes_[static_cast<std::size_t>(id)].requires) return;
        std::vector<double>& g = grad_ref(id);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += contrib[i];
    }
    void accumulate_mat(NodeId id, const Mat& contrib) { accumulate(id, contrib.d); }

    void dispatch_backward(const Rec& rec) {
        Node& outn = nodes_[static_cast<std::size_t>(rec.out)];
        const std::vector<double>& go = outn.grad.empty() ? grad_ref(rec.out) : outn.grad;
        const Tensor& ta = value(rec.a);
        switch (rec.op) {
            case Op::Add:
            case Op::Sub: {
                accumulate(rec.a, go);
                if (nodes_[static_cast<std::size_t>(rec.b)].requires) {
                    std::vector<double>& gb = grad_ref(rec.b);
                    double sign = (rec.op == Op::Sub) ? -1.0 : 1.0;
                    if (rec.iarg == 1) {  // scalar b
                        double s = 0.0;
                        for (double x : go) s += x;
                        gb[0] += sign * s;
                    } else {
                        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += sign * go[i];
                    }
                }
                break;
            }
            case Op::Mul: {
                const Tensor& tb = value(rec.b);
                if (nodes_[static_cast<std::size_t>(rec.a)].requires) {
                    std::vector<double>& ga = grad_ref(rec.a);
                    for (std::size_t i = 0; i < ga.size(); ++i)
                        ga[i] += go[i] * (rec.iarg == 1 ? tb.v[0] : tb.v[i]);
                }
                if (nodes_[static_cast<std::size_t>(rec.b)].requires) {
                    std::vector<double>& gb = grad_ref(rec.b);
                    if (rec.iarg == 1) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < go.size(); ++i) s += go[i] * ta.v[i];
                        gb[0] += s;
                    } else {
                        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * ta.v[i];
                    }
                }
                break;
            }
            case Op::Scale: {
                if (!nodes_[static_cast<std::size_t>(rec.a)].requires) break;
                std::vector<double>& ga = grad_ref(rec.a);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * rec.sarg;
                break;
            }
            case Op::AddScalar:
                accumulate(rec.a, go);
                break;
            case Op::Relu: {
                if (!nodes_[static_cast<std::size_t>(rec.a)].requires) break;
                std::vector<double>& ga = grad_ref(rec.a);
                for (std::size_t i = 0; i < ga.size(); ++i)
                    if (ta.v[i] > 0.0) ga[i] += go[i];
                break;
            }
            case Op::Gelu: {
                if (!nodes_[static_cast<std::size_t>(rec.a)].requires) break;
                std::vector<double>& ga = grad_ref(rec.a);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * detail::gelu_grad(ta.v[i]);
                break;
            }
            case Op::Tanh: {
                if (!nodes_[static_cast<std::size_t>(rec.a)].requires) break;
                std::vector<double>& ga = grad_ref(rec.a);
                const Tensor& to = value(rec.out);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * (1.0 - to.v[i] * to.v[i]);
                break;
            }
            case Op::ClampMin: {
                if (!nodes_[static_cast<std::size_t>(rec.a)].requires) break;
                std::vector<double>& ga = grad_ref(rec.a);
                for (std::size_t i = 0; i < ga.size(); ++i)
                    if (ta.v[i] > rec.sarg) ga[i] += go[i];
                break;
            }
            case Op::AddRowVec: {
                accumulate(rec.a, go);
                if (nodes_[static_cast<std::size_t>(rec.b)].requires) {
                    std::vector<double>& gb = grad_ref(rec.b);
                    int n = ta.shape[0], m = ta.shape[1];
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < m; ++j) gb[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i) * m + j];
                }
                break;
            }
            case Op::ScaleRows: {
                const Tensor& tw = value(rec.b);
                int n = ta.shape[0], m = ta.shape[1];
                if (nodes_[static_cast<std::size_t>(rec.a)].requires) {
                    std::vector<double>& ga = grad_ref(rec.a);
                    for (int i = 0; i < n; ++i) {
                        double wi = tw.v[static_cast<std::size_t>(i)];
                        for (int j = 0; j < m; ++j) ga[static_cast<std::size_t>(i) * m + j] += go[static_cast<std::size_t>(i) * m + j] * wi;
                    }
                }
                if (nodes_[static_cast<std::size_t>(rec.b)].requires) {
                    std::vector<double>& gw = grad_ref(rec.b);
                    for (int i = 0; i < n; ++i) {
                        double s = 0.0;
                        for (int j = 0; j < m; ++j) s += go[static_cast<std::size_t>(i) * m + j] * ta.v[static_cast<std::size_t>(i) * m + j];
                        gw[static_cast<std::size_t>(i)] += s;
                    }
                }
                break;
            }
            case Op::MatMul: {
                const Tensor& tb = value(rec.b);
                Mat gom = value(rec.out).as_mat();
                gom.d = go;
                if (nodes_[static_cast<std::size_t>(rec.a)].requires)
                    accumulate_mat(rec.a, matmul_nt(gom, tb.as_mat()));
                if (nodes_[static_cast<std::size_t>(rec.b)].requires)
                    accumulate_mat(rec.b, matmul_tn(ta.as_mat(), gom));
                break;
            }
            case Op::Transpose: {
                if (!nodes_[static_cast<std::size_t>(rec.a)].requires) break;
                Mat gom = value(rec.out).as_mat();
                gom.d = go;
                accumulate_mat(rec.a, oae::transpose(gom));
                break;
            }
            case Op::Cols: {
                if (!nodes_[static_cast<std::size_t>(rec.a)].requires) break;
                std::vector<double>& ga = grad_ref(rec.a);
                int n = ta.shape[0], m = ta.shape[1], k = rec.iarg;
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < k; ++j) ga[static_cast<std::size_t>(i) * m + j] += go[static_cast<std::size_t>(i) * k + j];
                break;
            }
            case Op::Rows: {
                if (!nodes_[static_cast<std::size_t>(rec.a)].requires) break;
                std::vector<double>& ga = grad_ref(rec.a);
                int m = ta.shape[1], k = rec.iarg;
                for (std::size_t i = 0; i < static_cast<std::size_t>(k) * m; ++i) ga[i] += go[i];
                break;
            }
            case Op::Col: {
                if (!nodes_[static_cast<std::size_t>(rec.a)].requires) break;
                std::vector<double>& ga = grad_ref(rec.a);
                int n = ta.shape[0], m = ta.shape[1], j = rec.iarg;
                for (int i = 0; i < n; ++i) ga[static_cast<std::size_t>(i) * m + j] += go[static_cast<std::size_t>(i)];
                break;
            }
            case Op::LeadingBlock: {
                if (!nodes_[static_cast<std::size_t>(rec.a)].requires) break;
                std::vector<double>& ga = grad_ref(rec.a);
                int m = ta.shape[1], k = rec.iarg;
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j) ga[static_cast<std::size_t>(i) * m + j] += go[static_cast<std::size_t>(i) * k + j];
                break;
            }
            case Op::Sum:
            case Op::Mean:
            case Op::SqNorm: {
                if (!nodes_[static_cast<std::size_t>(rec.a)].requires) break;
                std::vector<double>& ga = grad_ref(rec.a);
                int axis = rec.iarg;
                if (axis == -1) {
                    double g0 = go[0];
                    double f = (rec.op == Op::Mean) ? 1.0 / static_cast<double>(ta.numel()) : 1.0;
                    for (std::size_t i = 0; i < ga.size(); ++i)
                        ga[i] += (rec.op == Op::SqNorm) ? 2.0 * ta.v[i] * g0 : g0 * f;
                } else {
                    int n = ta.shape[0], m = ta.shape[1];
                    double f = (rec.op == Op::Mean) ? 1.0 / static_cast<double>(axis == 0 ? n : m) : 1.0;
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < m; ++j) {
                            double g0 = go[static_cast<std::size_t>(axis == 0 ? j : i)];
                            std::size_t idx = static_cast<std::size_t>(i) * m + j;
                            ga[idx] += (rec.op == Op::SqNorm) ? 2.0 * ta.v[idx] * g0 : g0 * f;
                        }
                }
                break;
            }
            case Op::Qr:
                backward_qr(rec);
                break;
            case Op::SpdSolve:
                backward_spd(rec);
                break;
            case Op::Leaf:
                break;
        }
    }

    /// Standard reduced-QR adjoint using the saved Q and R:
    ///   M = R gR^T - gQ^T Q,  gA = (gQ + Q copyltu(M)) R^{-T},
    /// where copyltu mirrors the strict lower triangle to the upper one.
    void backward_qr(const Rec& rec) {
        if (!nodes_[static_cast<std::size_t>(rec.a)].requires) return;
        const Mat& q = rec.saved[0];
        const Mat& r = rec.saved[1];
        int n = q.rows, k = q.cols;
        Mat gq(n, k), gr(k, k);
        if (has_grad(rec.out)) gq.d = nodes_[static_cast<std::size_t>(rec.out)].grad;
        if (rec.out2 >= 0 && has_grad(rec.out2)) gr.d = nodes_[static_cast<std::size_t>(rec.out2)].grad;

        Mat m = matmul_nt(r, gr);  // R gR^T
        Mat qtgq = matmul_tn(gq, q);  // gQ^T Q
        for (std::size_t i = 0; i < m.d.size(); ++i) m.d[i] -= qtgq.d[i];

        Mat h(k, k);
        for (int i = 0; i < k; ++i) {
            h(i, i) = m(i, i);
            for (int j = 0; j < i; ++j) {
                h(i, j) = m(i, j);
                h(j, i) = m(i, j);
            }
        }
        Mat b = matmul(q, h);
        for (std::size_t i = 0; i < b.d.size(); ++i) b.d[i] += gq.d[i];
        accumulate_mat(rec.a, solve_rt_right(r, b));
    }

    /// Adjoint of x = g^{-1} b: solve g s = gx, then gB += s and
    /// gG += -(s x^T + x s^T)/2.
    void backward_spd(const Rec& rec) {
        const Mat& l = rec.saved[0];
        const Mat& x = rec.saved[1];
        Mat gx(x.rows, x.cols);
        gx.d = nodes_[static_cast<std::size_t>(rec.out)].grad;
        Mat s = cholesky_solve(l, gx);
        if (nodes_[static_cast<std::size_t>(rec.b)].requires) accumulate_mat(rec.b, s);
        if (nodes_[static_cast<std::size_t>(rec.a)].requires) {
            Mat sx = matmul_nt(s, x);
            Mat gg(sx.rows, sx.cols);
            for (int i = 0; i < sx.rows; ++i)
                for (int j = 0; j < sx.cols; ++j) gg(i, j) = -0.5 * (sx(i, j) + sx(j, i));
            accumulate_mat(rec.a, gg);
        }
    }
};

}  // namespace oae::ad
