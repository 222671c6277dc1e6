#include "physgraph/nncore.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace physgraph::nn {

namespace {

constexpr double kLn2Pi = 1.8378770664093454835606594728112;
constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;
constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

void require_same_shape(const Array& a, const Array& b, const char* op) {
    require(a.shape == b.shape, std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

// Builds the node first, then installs a backward closure that knows its own
// handle. Ops read their saved state through the tape.
template <typename Fn>
Var finish(Tape& t, Array out, const std::vector<Var>& parents, Fn&& backward_with_self) {
    Var v = t.make(std::move(out), parents, nullptr);
    TapeNode& n = t.node(v);
    if (n.needs_grad)
        n.back = [v, fn = std::forward<Fn>(backward_with_self)](Tape& tp) { fn(tp, v); };
    return v;
}

// Stable softmax of one contiguous row.
inline void softmax_row(const double* in, double* out, std::int64_t n) {
    double mx = in[0];
    for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double sum = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - mx);
        sum += out[i];
    }
    double inv = 1.0 / sum;
    for (std::int64_t i = 0; i < n; ++i) out[i] *= inv;
}

}  // namespace

Var Tape::constant(Array a) {
    TapeNode n;
    n.val = std::move(a);
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(const std::string& name) {
    require(store_ != nullptr, "Tape::param: no ParamStore bound");
    return param(store_->id_of(name));
}

Var Tape::param(int id) {
    require(store_ != nullptr, "Tape::param: no ParamStore bound");
    for (auto [pid, idx] : param_leaves_)
        if (pid == id) return {idx};
    TapeNode n;
    n.val = store_->at(id).value;  // snapshot; the store stays untouched during the tape's life
    n.needs_grad = recording_;
    n.param_id = id;
    nodes_.push_back(std::move(n));
    int idx = static_cast<int>(nodes_.size()) - 1;
    param_leaves_.emplace_back(id, idx);
    return {idx};
}

Array& Tape::grad(Var v) {
    TapeNode& n = nodes_[static_cast<std::size_t>(v.idx)];
    if (!n.grad_live) {
        n.grad = Array(n.val.shape);
        n.grad_live = true;
    }
    return n.grad;
}

Var Tape::make(Array val, const std::vector<Var>& parents, std::function<void(Tape&)> back) {
    TapeNode n;
    n.val = std::move(val);
    if (recording_) {
        for (Var p : parents)
            if (p.valid() && nodes_[static_cast<std::size_t>(p.idx)].needs_grad) {
                n.needs_grad = true;
                break;
            }
        if (n.needs_grad) n.back = std::move(back);
    }
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var root) {
    require(root.valid(), "backward: invalid root");
    TapeNode& r = nodes_[static_cast<std::size_t>(root.idx)];
    require(r.val.numel() == 1, "backward: root must be scalar, got " + shape_str(r.val.shape));
    require(recording_, "backward: tape is not recording");
    grad(root)[0] += 1.0;
    for (int i = root.idx; i >= 0; --i) {
        TapeNode& n = nodes_[static_cast<std::size_t>(i)];
        if (n.grad_live && n.back) n.back(*this);
    }
}

void Tape::accumulate_param_grads(double scale) {
    require(store_ != nullptr, "accumulate_param_grads: no ParamStore bound");
    for (auto [pid, idx] : param_leaves_) {
        TapeNode& n = nodes_[static_cast<std::size_t>(idx)];
        if (!n.grad_live) continue;
        Array& g = store_->at(pid).grad;
        as_vector(g) += scale * as_vector(n.grad);
    }
}

// ---- elementwise / shape ops ----

Var add(Tape& t, Var a, Var b) {
    require_same_shape(t.val(a), t.val(b), "add");
    Array out = t.val(a);
    as_vector(out) += as_vector(t.val(b));
    return finish(t, std::move(out), {a, b}, [a, b](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        if (tp.node(a).needs_grad) as_vector(tp.grad(a)) += as_vector(g);
        if (tp.node(b).needs_grad) as_vector(tp.grad(b)) += as_vector(g);
    });
}

Var add_n(Tape& t, const std::vector<Var>& xs) {
    require(!xs.empty(), "add_n: empty input");
    if (xs.size() == 1) return xs[0];
    Array out = t.val(xs[0]);
    for (std::size_t i = 1; i < xs.size(); ++i) {
        require_same_shape(out, t.val(xs[i]), "add_n");
        as_vector(out) += as_vector(t.val(xs[i]));
    }
    std::vector<Var> parents = xs;
    return finish(t, std::move(out), parents, [parents](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        for (Var p : parents)
            if (tp.node(p).needs_grad) as_vector(tp.grad(p)) += as_vector(g);
    });
}

Var sub(Tape& t, Var a, Var b) {
    require_same_shape(t.val(a), t.val(b), "sub");
    Array out = t.val(a);
    as_vector(out) -= as_vector(t.val(b));
    return finish(t, std::move(out), {a, b}, [a, b](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        if (tp.node(a).needs_grad) as_vector(tp.grad(a)) += as_vector(g);
        if (tp.node(b).needs_grad) as_vector(tp.grad(b)) -= as_vector(g);
    });
}

Var hadamard(Tape& t, Var a, Var b) {
    require_same_shape(t.val(a), t.val(b), "hadamard");
    Array out = t.val(a);
    as_vector(out).array() *= as_vector(t.val(b)).array();
    return finish(t, std::move(out), {a, b}, [a, b](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        if (tp.node(a).needs_grad)
            as_vector(tp.grad(a)).array() += as_vector(g).array() * as_vector(tp.val(b)).array();
        if (tp.node(b).needs_grad)
            as_vector(tp.grad(b)).array() += as_vector(g).array() * as_vector(tp.val(a)).array();
    });
}

Var hadamard_const(Tape& t, Var a, Array c) {
    require_same_shape(t.val(a), c, "hadamard_const");
    Array out = t.val(a);
    as_vector(out).array() *= as_vector(c).array();
    auto cp = std::make_shared<Array>(std::move(c));
    return finish(t, std::move(out), {a}, [a, cp](Tape& tp, Var self) {
        as_vector(tp.grad(a)).array() += as_vector(tp.grad(self)).array() * as_vector(*cp).array();
    });
}

Var scale_const(Tape& t, Var a, double c) {
    Array out = t.val(a);
    as_vector(out) *= c;
    return finish(t, std::move(out), {a}, [a, c](Tape& tp, Var self) {
        as_vector(tp.grad(a)) += c * as_vector(tp.grad(self));
    });
}

Var add_const(Tape& t, Var a, double c) {
    Array out = t.val(a);
    as_vector(out).array() += c;
    return finish(t, std::move(out), {a}, [a](Tape& tp, Var self) {
        as_vector(tp.grad(a)) += as_vector(tp.grad(self));
    });
}

Var sub_const(Tape& t, Var a, Array c) {
    require_same_shape(t.val(a), c, "sub_const");
    Array out = t.val(a);
    as_vector(out) -= as_vector(c);
    return finish(t, std::move(out), {a}, [a](Tape& tp, Var self) {
        as_vector(tp.grad(a)) += as_vector(tp.grad(self));
    });
}

Var scale_scalar(Tape& t, Var x, Var s) {
    require(t.val(s).numel() == 1, "scale_scalar: scale must have 1 element");
    double sv = t.val(s)[0];
    Array out = t.val(x);
    as_vector(out) *= sv;
    return finish(t, std::move(out), {x, s}, [x, s, sv](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        if (tp.node(x).needs_grad) as_vector(tp.grad(x)) += sv * as_vector(g);
        if (tp.node(s).needs_grad) tp.grad(s)[0] += as_vector(g).dot(as_vector(tp.val(x)));
    });
}

Var scale_per_head(Tape& t, Var x, Var w) {
    const Array& xv = t.val(x);
    const Array& wv = t.val(w);
    require(!xv.shape.empty() && wv.ndim() == 1 && wv.shape[0] == xv.shape[0],
            "scale_per_head: leading dim of x must equal w length");
    const std::int64_t h = xv.shape[0];
    const std::int64_t stride = xv.numel() / h;
    Array out = xv;
    for (std::int64_t i = 0; i < h; ++i)
        VecMap(out.data.data() + i * stride, stride) *= wv[static_cast<std::size_t>(i)];
    return finish(t, std::move(out), {x, w}, [x, w, h, stride](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        const Array& wv = tp.val(w);
        const Array& xv = tp.val(x);
        if (tp.node(x).needs_grad) {
            Array& gx = tp.grad(x);
            for (std::int64_t i = 0; i < h; ++i)
                VecMap(gx.data.data() + i * stride, stride) +=
                    wv[static_cast<std::size_t>(i)] *
                    ConstVecMap(g.data.data() + i * stride, stride);
        }
        if (tp.node(w).needs_grad) {
            Array& gw = tp.grad(w);
            for (std::int64_t i = 0; i < h; ++i)
                gw[static_cast<std::size_t>(i)] +=
                    ConstVecMap(g.data.data() + i * stride, stride)
                        .dot(ConstVecMap(xv.data.data() + i * stride, stride));
        }
    });
}

Var broadcast_add_leading(Tape& t, Var x, Var s) {
    const Array& xv = t.val(x);
    const Array& sv = t.val(s);
    require(xv.ndim() == sv.ndim() + 1, "broadcast_add_leading: x needs one extra leading dim");
    for (std::size_t i = 0; i < sv.ndim(); ++i)
        require(xv.shape[i + 1] == sv.shape[i],
                "broadcast_add_leading: trailing shape mismatch " + shape_str(xv.shape) + " vs " +
                    shape_str(sv.shape));
    const std::int64_t b = xv.shape[0];
    const std::int64_t stride = sv.numel();
    Array out = xv;
    for (std::int64_t i = 0; i < b; ++i)
        VecMap(out.data.data() + i * stride, stride) += as_vector(sv);
    return finish(t, std::move(out), {x, s}, [x, s, b, stride](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        if (tp.node(x).needs_grad) as_vector(tp.grad(x)) += as_vector(g);
        if (tp.node(s).needs_grad) {
            Array& gs = tp.grad(s);
            for (std::int64_t i = 0; i < b; ++i)
                as_vector(gs) += ConstVecMap(g.data.data() + i * stride, stride);
        }
    });
}

Var broadcast_rows(Tape& t, Var v, std::int64_t rows) {
    const Array& vv = t.val(v);
    require(vv.ndim() == 1, "broadcast_rows: input must be 1-D");
    const std::int64_t d = vv.shape[0];
    Array out({rows, d});
    for (std::int64_t r = 0; r < rows; ++r)
        VecMap(out.data.data() + r * d, d) = as_vector(vv);
    return finish(t, std::move(out), {v}, [v, rows, d](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        Array& gv = tp.grad(v);
        for (std::int64_t r = 0; r < rows; ++r)
            as_vector(gv) += ConstVecMap(g.data.data() + r * d, d);
    });
}

Var reshape(Tape& t, Var x, Shape s) {
    require(shape_numel(s) == t.val(x).numel(),
            "reshape: numel mismatch " + shape_str(t.val(x).shape) + " -> " + shape_str(s));
    Array out = t.val(x);
    out.shape = std::move(s);
    return finish(t, std::move(out), {x}, [x](Tape& tp, Var self) {
        as_vector(tp.grad(x)) += as_vector(tp.grad(self));
    });
}

Var square(Tape& t, Var x) {
    Array out = t.val(x);
    as_vector(out).array() = as_vector(out).array().square();
    return finish(t, std::move(out), {x}, [x](Tape& tp, Var self) {
        as_vector(tp.grad(x)).array() +=
            2.0 * as_vector(tp.grad(self)).array() * as_vector(tp.val(x)).array();
    });
}

Var exp_op(Tape& t, Var x) {
    Array out = t.val(x);
    as_vector(out).array() = as_vector(out).array().exp();
    return finish(t, std::move(out), {x}, [x](Tape& tp, Var self) {
        as_vector(tp.grad(x)).array() +=
            as_vector(tp.grad(self)).array() * as_vector(tp.val(self)).array();
    });
}

Var softplus(Tape& t, Var x) {
    Array out = t.val(x);
    for (double& v : out.data) v = v > 30.0 ? v : std::log1p(std::exp(v));
    return finish(t, std::move(out), {x}, [x](Tape& tp, Var self) {
        const Array& xv = tp.val(x);
        const Array& g = tp.grad(self);
        Array& gx = tp.grad(x);
        for (std::size_t i = 0; i < gx.data.size(); ++i)
            gx.data[i] += g.data[i] / (1.0 + std::exp(-xv.data[i]));
    });
}

Var gelu(Tape& t, Var x) {
    Array out = t.val(x);
    for (double& v : out.data) v = v * 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    return finish(t, std::move(out), {x}, [x](Tape& tp, Var self) {
        const Array& xv = tp.val(x);
        const Array& g = tp.grad(self);
        Array& gx = tp.grad(x);
        for (std::size_t i = 0; i < gx.data.size(); ++i) {
            double v = xv.data[i];
            double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            gx.data[i] += g.data[i] * (cdf + v * pdf);
        }
    });
}

Var clamp(Tape& t, Var x, double lo, double hi) {
    Array out = t.val(x);
    for (double& v : out.data) v = std::min(std::max(v, lo), hi);
    return finish(t, std::move(out), {x}, [x, lo, hi](Tape& tp, Var self) {
        const Array& xv = tp.val(x);
        const Array& g = tp.grad(self);
        Array& gx = tp.grad(x);
        for (std::size_t i = 0; i < gx.data.size(); ++i)
            if (xv.data[i] >= lo && xv.data[i] <= hi) gx.data[i] += g.data[i];
    });
}

Var minimum(Tape& t, Var a, Var b) {
    require_same_shape(t.val(a), t.val(b), "minimum");
    Array out = t.val(a);
    const Array& bv = t.val(b);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = std::min(out.data[i], bv.data[i]);
    return finish(t, std::move(out), {a, b}, [a, b](Tape& tp, Var self) {
        const Array& av = tp.val(a);
        const Array& bv = tp.val(b);
        const Array& g = tp.grad(self);
        bool ga = tp.node(a).needs_grad, gb = tp.node(b).needs_grad;
        Array* gpa = ga ? &tp.grad(a) : nullptr;
        Array* gpb = gb ? &tp.grad(b) : nullptr;
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            if (av.data[i] <= bv.data[i]) {
                if (gpa) gpa->data[i] += g.data[i];
            } else if (gpb) {
                gpb->data[i] += g.data[i];
            }
        }
    });
}

Var sum_all(Tape& t, Var x) {
    Array out = Array::scalar(as_vector(t.val(x)).sum());
    return finish(t, std::move(out), {x}, [x](Tape& tp, Var self) {
        as_vector(tp.grad(x)).array() += tp.grad(self)[0];
    });
}

Var mean_all(Tape& t, Var x) {
    const double n = static_cast<double>(t.val(x).numel());
    Array out = Array::scalar(as_vector(t.val(x)).sum() / n);
    return finish(t, std::move(out), {x}, [x, n](Tape& tp, Var self) {
        as_vector(tp.grad(x)).array() += tp.grad(self)[0] / n;
    });
}

// ---- neural net ops ----

Var linear(Tape& t, Var x, Var W, Var b) {
    const Array& xv = t.val(x);
    const Array& wv = t.val(W);
    require(wv.ndim() == 2, "linear: W must be 2-D, got " + shape_str(wv.shape));
    const std::int64_t in = wv.shape[0], out_dim = wv.shape[1];
    require(!xv.shape.empty() && xv.shape.back() == in,
            "linear: shape mismatch x" + shape_str(xv.shape) + " vs W" + shape_str(wv.shape));
    if (b.valid())
        require(t.val(b).ndim() == 1 && t.val(b).shape[0] == out_dim,
                "linear: shape mismatch b" + shape_str(t.val(b).shape) + " vs W" +
                    shape_str(wv.shape));

    Shape out_shape = xv.shape;
    out_shape.back() = out_dim;
    Array out(out_shape);
    as_matrix(out, out_dim).noalias() = as_matrix(xv, in) * as_matrix(wv, out_dim);
    if (b.valid()) as_matrix(out, out_dim).rowwise() += as_vector(t.val(b)).transpose();

    return finish(t, std::move(out), {x, W, b}, [x, W, b, in, out_dim](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        auto G = as_matrix(g, out_dim);
        if (tp.node(x).needs_grad)
            as_matrix(tp.grad(x), in).noalias() += G * as_matrix(tp.val(W), out_dim).transpose();
        if (tp.node(W).needs_grad)
            as_matrix(tp.grad(W), out_dim).noalias() += as_matrix(tp.val(x), in).transpose() * G;
        if (b.valid() && tp.node(b).needs_grad)
            as_vector(tp.grad(b)) += G.colwise().sum().transpose();
    });
}

Var layer_norm(Tape& t, Var x, Var gain, Var shift, double eps) {
    const Array& xv = t.val(x);
    const std::int64_t d = xv.shape.back();
    require(d >= 1, "layer_norm: last dim must be >= 1");
    require(eps > 0.0, "layer_norm: eps must be > 0");
    require(t.val(gain).numel() == d && t.val(shift).numel() == d,
            "layer_norm: gain/shift must have " + std::to_string(d) + " elements");
    const std::int64_t rows = xv.numel() / d;

    auto xhat = std::make_shared<Array>(xv.shape);
    auto inv_std = std::make_shared<Array>(Shape{rows});
    Array out(xv.shape);
    const Array& gv = t.val(gain);
    const Array& sv = t.val(shift);
    for (std::int64_t r = 0; r < rows; ++r) {
        ConstVecMap row(xv.data.data() + r * d, d);
        double mu = row.mean();
        double var = (row.array() - mu).square().sum() / static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(r)] = inv;
        VecMap xh(xhat->data.data() + r * d, d);
        xh = (row.array() - mu).matrix() * inv;
        VecMap(out.data.data() + r * d, d).array() =
            xh.array() * as_vector(gv).array() + as_vector(sv).array();
    }

    return finish(t, std::move(out), {x, gain, shift},
                  [x, gain, shift, xhat, inv_std, d, rows](Tape& tp, Var self) {
                      const Array& g = tp.grad(self);
                      const Array& gv = tp.val(gain);
                      bool need_x = tp.node(x).needs_grad;
                      bool need_g = tp.node(gain).needs_grad;
                      bool need_s = tp.node(shift).needs_grad;
                      for (std::int64_t r = 0; r < rows; ++r) {
                          ConstVecMap gy(g.data.data() + r * d, d);
                          ConstVecMap xh(xhat->data.data() + r * d, d);
                          if (need_g) as_vector(tp.grad(gain)).array() += gy.array() * xh.array();
                          if (need_s) as_vector(tp.grad(shift)) += gy;
                          if (need_x) {
                              Eigen::ArrayXd dxh = gy.array() * as_vector(gv).array();
                              double m1 = dxh.mean();
                              double m2 = (dxh * xh.array()).mean();
                              VecMap(tp.grad(x).data.data() + r * d, d).array() +=
                                  (*inv_std)[static_cast<std::size_t>(r)] *
                                  (dxh - m1 - xh.array() * m2);
                          }
                      }
                  });
}

Var softmax_rows(Tape& t, Var x) {
    const Array& xv = t.val(x);
    require(xv.all_finite(), "softmax_rows: non-finite input");
    const std::int64_t n = xv.shape.back();
    const std::int64_t rows = xv.numel() / n;
    Array out(xv.shape);
    for (std::int64_t r = 0; r < rows; ++r)
        softmax_row(xv.data.data() + r * n, out.data.data() + r * n, n);
    return finish(t, std::move(out), {x}, [x, n, rows](Tape& tp, Var self) {
        const Array& y = tp.val(self);
        const Array& g = tp.grad(self);
        Array& gx = tp.grad(x);
        for (std::int64_t r = 0; r < rows; ++r) {
            ConstVecMap yr(y.data.data() + r * n, n);
            ConstVecMap gr(g.data.data() + r * n, n);
            double dot = yr.dot(gr);
            VecMap(gx.data.data() + r * n, n).array() += yr.array() * (gr.array() - dot);
        }
    });
}

Var attention_core(Tape& t, Var q, Var k, Var v, int heads, Var bias, const std::string& where) {
    const Array& qv = t.val(q);
    require(qv.ndim() == 3, "attention_core: q must be [B,T,D]");
    require_same_shape(qv, t.val(k), "attention_core q/k");
    require_same_shape(qv, t.val(v), "attention_core q/v");
    const std::int64_t B = qv.shape[0], T = qv.shape[1], D = qv.shape[2];
    require(heads >= 1 && D % heads == 0, "attention_core: D must divide by heads");
    const std::int64_t dh = D / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    bool bias_per_sample = false;
    if (bias.valid()) {
        const Array& bv = t.val(bias);
        if (bv.ndim() == 4) {
            require(bv.shape[0] == B && bv.shape[1] == heads && bv.shape[2] == T &&
                        bv.shape[3] == T,
                    "attention_core: bias must be [B,H,T,T], got " + shape_str(bv.shape));
            bias_per_sample = true;
        } else {
            require(bv.ndim() == 3 && bv.shape[0] == heads && bv.shape[1] == T && bv.shape[2] == T,
                    "attention_core: bias must be [H,T,T], got " + shape_str(bv.shape));
        }
    }

    auto probs = std::make_shared<Array>(Shape{B, static_cast<std::int64_t>(heads), T, T});
    Array out({B, T, D});
    RowMat logits(T, T);
    for (std::int64_t b = 0; b < B; ++b) {
        ConstMatMap Q(qv.data.data() + b * T * D, T, D);
        ConstMatMap K(t.val(k).data.data() + b * T * D, T, D);
        ConstMatMap V(t.val(v).data.data() + b * T * D, T, D);
        MatMap O(out.data.data() + b * T * D, T, D);
        for (int h = 0; h < heads; ++h) {
            logits.noalias() = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose();
            logits *= scale;
            if (bias.valid()) {
                const Array& bv = t.val(bias);
                const double* bp = bv.data.data() + ((bias_per_sample ? b * heads : 0) + h) * T * T;
                logits += Eigen::Map<const RowMat>(bp, T, T);
            }
            if (!logits.allFinite())
                throw std::runtime_error("attention_core: non-finite logits at " + where +
                                         ", batch " + std::to_string(b) + ", head " +
                                         std::to_string(h));
            double* pp = probs->data.data() + (b * heads + h) * T * T;
            for (std::int64_t r = 0; r < T; ++r)
                softmax_row(logits.data() + r * T, pp + r * T, T);
            O.middleCols(h * dh, dh).noalias() =
                Eigen::Map<const RowMat>(pp, T, T) * V.middleCols(h * dh, dh);
        }
    }

    return finish(
        t, std::move(out), {q, k, v, bias},
        [q, k, v, bias, probs, heads, B, T, D, dh, scale, bias_per_sample](Tape& tp, Var self) {
            const Array& g = tp.grad(self);
            bool need_q = tp.node(q).needs_grad;
            bool need_k = tp.node(k).needs_grad;
            bool need_v = tp.node(v).needs_grad;
            bool need_b = bias.valid() && tp.node(bias).needs_grad;
            RowMat dP(T, T), dL(T, T);
            for (std::int64_t b = 0; b < B; ++b) {
                ConstMatMap Q(tp.val(q).data.data() + b * T * D, T, D);
                ConstMatMap K(tp.val(k).data.data() + b * T * D, T, D);
                ConstMatMap V(tp.val(v).data.data() + b * T * D, T, D);
                ConstMatMap GO(g.data.data() + b * T * D, T, D);
                for (int h = 0; h < heads; ++h) {
                    Eigen::Map<const RowMat> P(probs->data.data() + (b * heads + h) * T * T, T, T);
                    auto GOh = GO.middleCols(h * dh, dh);
                    if (need_v)
                        MatMap(tp.grad(v).data.data() + b * T * D, T, D)
                            .middleCols(h * dh, dh)
                            .noalias() += P.transpose() * GOh;
                    dP.noalias() = GOh * V.middleCols(h * dh, dh).transpose();
                    for (std::int64_t r = 0; r < T; ++r) {
                        double dot = P.row(r).dot(dP.row(r));
                        dL.row(r) = (P.row(r).array() * (dP.row(r).array() - dot)).matrix();
                    }
                    if (need_b) {
                        Array& gb = tp.grad(bias);
                        double* bp = gb.data.data() + ((bias_per_sample ? b * heads : 0) + h) * T * T;
                        Eigen::Map<RowMat>(bp, T, T) += dL;
                    }
                    if (need_q)
                        MatMap(tp.grad(q).data.data() + b * T * D, T, D)
                            .middleCols(h * dh, dh)
                            .noalias() += scale * (dL * K.middleCols(h * dh, dh));
                    if (need_k)
                        MatMap(tp.grad(k).data.data() + b * T * D, T, D)
                            .middleCols(h * dh, dh)
                            .noalias() += scale * (dL.transpose() * Q.middleCols(h * dh, dh));
                }
            }
        });
}

Var stack_tokens(Tape& t, const std::vector<Var>& tokens) {
    require(!tokens.empty(), "stack_tokens: empty input");
    const Array& first = t.val(tokens[0]);
    require(first.ndim() == 2, "stack_tokens: inputs must be [B,d]");
    const std::int64_t B = first.shape[0], d = first.shape[1];
    const std::int64_t T = static_cast<std::int64_t>(tokens.size());
    for (const Var& tok : tokens) require_same_shape(first, t.val(tok), "stack_tokens");
    Array out({B, T, d});
    for (std::int64_t i = 0; i < T; ++i) {
        const Array& src = t.val(tokens[static_cast<std::size_t>(i)]);
        for (std::int64_t b = 0; b < B; ++b)
            std::copy_n(src.data.data() + b * d, d, out.data.data() + (b * T + i) * d);
    }
    std::vector<Var> parents = tokens;
    return finish(t, std::move(out), parents, [parents, B, d, T](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        for (std::int64_t i = 0; i < T; ++i) {
            Var p = parents[static_cast<std::size_t>(i)];
            if (!tp.node(p).needs_grad) continue;
            Array& gp = tp.grad(p);
            for (std::int64_t b = 0; b < B; ++b)
                VecMap(gp.data.data() + b * d, d) += ConstVecMap(g.data.data() + (b * T + i) * d, d);
        }
    });
}

Var slice_token(Tape& t, Var x, std::int64_t token) {
    const Array& xv = t.val(x);
    require(xv.ndim() == 3, "slice_token: input must be [B,T,d]");
    const std::int64_t B = xv.shape[0], T = xv.shape[1], d = xv.shape[2];
    require(token >= 0 && token < T, "slice_token: index out of range");
    Array out({B, d});
    for (std::int64_t b = 0; b < B; ++b)
        std::copy_n(xv.data.data() + (b * T + token) * d, d, out.data.data() + b * d);
    return finish(t, std::move(out), {x}, [x, token, T, d](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        Array& gx = tp.grad(x);
        const std::int64_t B = g.shape[0];
        for (std::int64_t b = 0; b < B; ++b)
            VecMap(gx.data.data() + (b * T + token) * d, d) += ConstVecMap(g.data.data() + b * d, d);
    });
}

// ---- bias generator ops ----

Var table_lookup_bias(Tape& t, Var table, std::shared_ptr<const std::vector<int>> idx, int n) {
    const Array& tv = t.val(table);
    require(tv.ndim() == 2, "table_lookup_bias: table must be [H,K]");
    const std::int64_t H = tv.shape[0], K = tv.shape[1];
    const std::int64_t cells = static_cast<std::int64_t>(n) * n;
    require(static_cast<std::int64_t>(idx->size()) == cells,
            "table_lookup_bias: index field must have n*n entries");
    Array out({H, n, n});
    for (std::int64_t h = 0; h < H; ++h) {
        const double* row = tv.data.data() + h * K;
        double* o = out.data.data() + h * cells;
        for (std::int64_t c = 0; c < cells; ++c) {
            int i = (*idx)[static_cast<std::size_t>(c)];
            require(i >= 0 && i < K, "table_lookup_bias: index out of table range");
            o[c] = row[i];
        }
    }
    return finish(t, std::move(out), {table}, [table, idx, H, K, cells](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        Array& gt = tp.grad(table);
        for (std::int64_t h = 0; h < H; ++h) {
            const double* gh = g.data.data() + h * cells;
            double* row = gt.data.data() + h * K;
            for (std::int64_t c = 0; c < cells; ++c)
                row[(*idx)[static_cast<std::size_t>(c)]] += gh[c];
        }
    });
}

namespace {
// Column convention of the 4-wide edge table: disconnected, bone, contact, self.
constexpr int kColDisconnected = 0;
constexpr int kColBone = 1;
constexpr int kColContact = 2;
constexpr int kColSelf = 3;

// Final per-cell overrides for one sample: bone cells not shadowed by a
// contact, contact cells, then self cells. Cell = u*n+v flattened index.
struct EdgeOverrides {
    std::vector<std::pair<int, int>> cells_types;  // (flat cell, edge type)
};

EdgeOverrides resolve_edge_overrides(const EdgeStaticCells& stat,
                                     const std::vector<std::pair<int, int>>& contacts) {
    const int n = stat.n;
    EdgeOverrides out;
    out.cells_types.reserve(stat.diag_cells.size() + 2 * stat.bones.size() +
                            2 * contacts.size());
    std::unordered_set<int> contact_cells;
    contact_cells.reserve(contacts.size() * 2);
    for (auto [u, v] : contacts) {
        contact_cells.insert(u * n + v);
        contact_cells.insert(v * n + u);
    }
    for (auto [u, v] : stat.bones) {
        if (!contact_cells.count(u * n + v)) out.cells_types.emplace_back(u * n + v, kColBone);
        if (!contact_cells.count(v * n + u)) out.cells_types.emplace_back(v * n + u, kColBone);
    }
    for (int c : contact_cells) out.cells_types.emplace_back(c, kColContact);
    for (int c : stat.diag_cells) out.cells_types.emplace_back(c, kColSelf);
    return out;
}
}  // namespace

Var edge_bias_batch(Tape& t, Var table, std::shared_ptr<const EdgeStaticCells> cells,
                    std::shared_ptr<const std::vector<std::vector<std::pair<int, int>>>> contacts) {
    const Array& tv = t.val(table);
    require(tv.ndim() == 2 && tv.shape[1] == 4, "edge_bias_batch: table must be [H,4]");
    const std::int64_t H = tv.shape[0];
    const int n = cells->n;
    const std::int64_t nn = static_cast<std::int64_t>(n) * n;
    const std::int64_t B = static_cast<std::int64_t>(contacts->size());
    require(B >= 1, "edge_bias_batch: need at least one sample");

    // Overrides are resolved per sample from the precomputed static cells plus
    // the sparse contact list; pairs are never re-classified densely.
    auto overrides = std::make_shared<std::vector<EdgeOverrides>>();
    overrides->reserve(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b)
        overrides->push_back(
            resolve_edge_overrides(*cells, (*contacts)[static_cast<std::size_t>(b)]));

    Array out({B, H, n, n});
    for (std::int64_t b = 0; b < B; ++b) {
        const auto& ov = (*overrides)[static_cast<std::size_t>(b)].cells_types;
        for (std::int64_t h = 0; h < H; ++h) {
            const double* row = tv.data.data() + h * 4;
            double* o = out.data.data() + (b * H + h) * nn;
            std::fill_n(o, nn, row[kColDisconnected]);
            for (auto [cell, type] : ov) o[cell] = row[type];
        }
    }

    return finish(t, std::move(out), {table}, [table, overrides, H, nn, B](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        Array& gt = tp.grad(table);
        for (std::int64_t b = 0; b < B; ++b) {
            const auto& ov = (*overrides)[static_cast<std::size_t>(b)].cells_types;
            for (std::int64_t h = 0; h < H; ++h) {
                const double* gh = g.data.data() + (b * H + h) * nn;
                double* row = gt.data.data() + h * 4;
                double total = ConstVecMap(gh, nn).sum();
                double overridden = 0.0;
                for (auto [cell, type] : ov) {
                    row[type] += gh[cell];
                    overridden += gh[cell];
                }
                row[kColDisconnected] += total - overridden;
            }
        }
    });
}

Var geo_bias_batch(Tape& t, Var w, Var sigma, std::shared_ptr<const Array> sqdist,
                   std::shared_ptr<const Array> gate) {
    const Array& wv = t.val(w);
    require(wv.ndim() == 1, "geo_bias_batch: w must be [H]");
    require(t.val(sigma).numel() == 1, "geo_bias_batch: sigma must be scalar");
    require(sqdist->ndim() == 3, "geo_bias_batch: sqdist must be [B,N,N]");
    const std::int64_t H = wv.shape[0];
    const std::int64_t B = sqdist->shape[0];
    const std::int64_t n = sqdist->shape[1];
    const std::int64_t nn = n * n;
    require(gate->numel() == nn, "geo_bias_batch: gate must be [N,N]");
    const double sig = t.val(sigma)[0];
    require(sig > 0.0, "geo_bias_batch: sigma must be > 0");
    const double inv2s2 = 1.0 / (2.0 * sig * sig);

    // gk = gate .* exp(-sqdist/(2 sigma^2)), saved for backward.
    auto gk = std::make_shared<Array>(Shape{B, n, n});
    for (std::int64_t i = 0; i < B * nn; ++i) {
        double gate_v = gate->data[static_cast<std::size_t>(i % nn)];
        gk->data[static_cast<std::size_t>(i)] =
            gate_v == 0.0 ? 0.0 : gate_v * std::exp(-sqdist->data[static_cast<std::size_t>(i)] * inv2s2);
    }
    Array out({B, H, n, n});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t h = 0; h < H; ++h)
            VecMap(out.data.data() + (b * H + h) * nn, nn) =
                wv[static_cast<std::size_t>(h)] * ConstVecMap(gk->data.data() + b * nn, nn);

    return finish(t, std::move(out), {w, sigma},
                  [w, sigma, sqdist, gk, H, B, nn, sig](Tape& tp, Var self) {
                      const Array& g = tp.grad(self);
                      const Array& wv = tp.val(w);
                      bool need_w = tp.node(w).needs_grad;
                      bool need_s = tp.node(sigma).needs_grad;
                      const double inv_s3 = 1.0 / (sig * sig * sig);
                      double ds = 0.0;
                      for (std::int64_t b = 0; b < B; ++b) {
                          ConstVecMap gkb(gk->data.data() + b * nn, nn);
                          ConstVecMap sqb(sqdist->data.data() + b * nn, nn);
                          for (std::int64_t h = 0; h < H; ++h) {
                              ConstVecMap gh(g.data.data() + (b * H + h) * nn, nn);
                              if (need_w)
                                  tp.grad(w)[static_cast<std::size_t>(h)] += gh.dot(gkb);
                              if (need_s)
                                  ds += wv[static_cast<std::size_t>(h)] *
                                        (gh.array() * gkb.array() * sqb.array()).sum() * inv_s3;
                          }
                      }
                      if (need_s) tp.grad(sigma)[0] += ds;
                  });
}

Var anat_bias(Tape& t, Var alpha_ser, Var alpha_syn, std::shared_ptr<const Array> serial,
              std::shared_ptr<const Array> synergy, const std::vector<int>& serial_heads,
              const std::vector<int>& synergy_heads, int heads) {
    require(t.val(alpha_ser).numel() == 1 && t.val(alpha_syn).numel() == 1,
            "anat_bias: alphas must be scalar");
    require_same_shape(*serial, *synergy, "anat_bias masks");
    const std::int64_t nn = serial->numel();
    const std::int64_t n = serial->shape[0];
    const double a_ser = t.val(alpha_ser)[0];
    const double a_syn = t.val(alpha_syn)[0];

    Array out({static_cast<std::int64_t>(heads), n, n});
    for (int h : serial_heads)
        VecMap(out.data.data() + static_cast<std::int64_t>(h) * nn, nn) = a_ser * as_vector(*serial);
    for (int h : synergy_heads)
        VecMap(out.data.data() + static_cast<std::int64_t>(h) * nn, nn) = a_syn * as_vector(*synergy);

    std::vector<int> ser_h = serial_heads, syn_h = synergy_heads;
    return finish(t, std::move(out), {alpha_ser, alpha_syn},
                  [alpha_ser, alpha_syn, serial, synergy, ser_h, syn_h, nn](Tape& tp, Var self) {
                      const Array& g = tp.grad(self);
                      if (tp.node(alpha_ser).needs_grad)
                          for (int h : ser_h)
                              tp.grad(alpha_ser)[0] +=
                                  ConstVecMap(g.data.data() + static_cast<std::int64_t>(h) * nn, nn)
                                      .dot(as_vector(*serial));
                      if (tp.node(alpha_syn).needs_grad)
                          for (int h : syn_h)
                              tp.grad(alpha_syn)[0] +=
                                  ConstVecMap(g.data.data() + static_cast<std::int64_t>(h) * nn, nn)
                                      .dot(as_vector(*synergy));
                  });
}

Var lift_to_token_space(Tape& t, Var node_bias,
                        std::shared_ptr<const std::vector<int>> token_to_node) {
    const Array& nb = t.val(node_bias);
    require(nb.ndim() == 3 || nb.ndim() == 4, "lift_to_token_space: bias must be [H,N,N] or [B,H,N,N]");
    const bool batched = nb.ndim() == 4;
    const std::int64_t B = batched ? nb.shape[0] : 1;
    const std::int64_t H = batched ? nb.shape[1] : nb.shape[0];
    const std::int64_t N = nb.shape[batched ? 2 : 1];
    const std::int64_t T = static_cast<std::int64_t>(token_to_node->size());
    for (int m : *token_to_node)
        require(m >= -1 && m < N, "lift_to_token_space: token map entry out of range");

    Shape out_shape = batched ? Shape{B, H, T, T} : Shape{H, T, T};
    Array out(out_shape);
    const auto& map = *token_to_node;
    for (std::int64_t s = 0; s < B * H; ++s) {
        const double* src = nb.data.data() + s * N * N;
        double* dst = out.data.data() + s * T * T;
        for (std::int64_t i = 0; i < T; ++i) {
            int mi = map[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < T; ++j) {
                int mj = map[static_cast<std::size_t>(j)];
                dst[i * T + j] = (mi >= 0 && mj >= 0) ? src[mi * N + mj] : 0.0;
            }
        }
    }
    return finish(t, std::move(out), {node_bias},
                  [node_bias, token_to_node, B, H, N, T](Tape& tp, Var self) {
                      const Array& g = tp.grad(self);
                      Array& gn = tp.grad(node_bias);
                      const auto& map = *token_to_node;
                      for (std::int64_t s = 0; s < B * H; ++s) {
                          double* dst = gn.data.data() + s * N * N;
                          const double* src = g.data.data() + s * T * T;
                          for (std::int64_t i = 0; i < T; ++i) {
                              int mi = map[static_cast<std::size_t>(i)];
                              if (mi < 0) continue;
                              for (std::int64_t j = 0; j < T; ++j) {
                                  int mj = map[static_cast<std::size_t>(j)];
                                  if (mj >= 0) dst[mi * N + mj] += src[i * T + j];
                              }
                          }
                      }
                  });
}

// ---- policy heads ----

Var gaussian_logprob(Tape& t, Var mu, Var log_std, std::shared_ptr<const Array> actions) {
    const Array& mv = t.val(mu);
    require(mv.ndim() == 2, "gaussian_logprob: mu must be [B,A]");
    const std::int64_t B = mv.shape[0], A = mv.shape[1];
    require(t.val(log_std).numel() == A, "gaussian_logprob: log_std must be [A]");
    require(actions->shape == mv.shape, "gaussian_logprob: actions shape mismatch " +
                                            shape_str(actions->shape) + " vs " + shape_str(mv.shape));

    const Array& ls = t.val(log_std);
    double ls_sum = as_vector(ls).sum();
    Array out({B});
    for (std::int64_t b = 0; b < B; ++b) {
        double acc = 0.0;
        for (std::int64_t a = 0; a < A; ++a) {
            double z = (actions->data[static_cast<std::size_t>(b * A + a)] -
                        mv.data[static_cast<std::size_t>(b * A + a)]) *
                       std::exp(-ls.data[static_cast<std::size_t>(a)]);
            acc += z * z;
        }
        out[static_cast<std::size_t>(b)] =
            -0.5 * acc - ls_sum - 0.5 * static_cast<double>(A) * kLn2Pi;
    }

    return finish(t, std::move(out), {mu, log_std}, [mu, log_std, actions, B, A](Tape& tp, Var self) {
        const Array& g = tp.grad(self);
        const Array& mv = tp.val(mu);
        const Array& ls = tp.val(log_std);
        bool need_mu = tp.node(mu).needs_grad;
        bool need_ls = tp.node(log_std).needs_grad;
        for (std::int64_t b = 0; b < B; ++b) {
            double gb = g.data[static_cast<std::size_t>(b)];
            if (gb == 0.0) continue;
            for (std::int64_t a = 0; a < A; ++a) {
                double inv_sig = std::exp(-ls.data[static_cast<std::size_t>(a)]);
                double z = (actions->data[static_cast<std::size_t>(b * A + a)] -
                            mv.data[static_cast<std::size_t>(b * A + a)]) *
                           inv_sig;
                if (need_mu) tp.grad(mu).data[static_cast<std::size_t>(b * A + a)] += gb * z * inv_sig;
                if (need_ls) tp.grad(log_std).data[static_cast<std::size_t>(a)] += gb * (z * z - 1.0);
            }
        }
    });
}

Var gaussian_entropy(Tape& t, Var log_std) {
    const Array& ls = t.val(log_std);
    const double A = static_cast<double>(ls.numel());
    Array out = Array::scalar(as_vector(ls).sum() + 0.5 * A * (kLn2Pi + 1.0));
    return finish(t, std::move(out), {log_std}, [log_std](Tape& tp, Var self) {
        as_vector(tp.grad(log_std)).array() += tp.grad(self)[0];
    });
}

// ---- optimizer ----

Adam::Adam(ParamStore& store, AdamConfig cfg) : store_(store), cfg_(cfg) {
    m_.reserve(store.size());
    v_.reserve(store.size());
    for (const auto& p : store.all()) {
        m_.emplace_back(p.value.shape);
        v_.emplace_back(p.value.shape);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < store_.size(); ++i) {
        Param& p = store_.all()[i];
        if (!p.trainable) continue;
        Array& m = m_[i];
        Array& v = v_[i];
        for (std::size_t j = 0; j < p.value.data.size(); ++j) {
            double g = p.grad.data[j];
            if (!std::isfinite(g))
                throw std::runtime_error("adam: non-finite gradient for parameter " + p.name);
            m.data[j] = cfg_.beta1 * m.data[j] + (1.0 - cfg_.beta1) * g;
            v.data[j] = cfg_.beta2 * v.data[j] + (1.0 - cfg_.beta2) * g * g;
            double mh = m.data[j] / bc1;
            double vh = v.data[j] / bc2;
            p.value.data[j] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
        }
    }
}

double clip_grad_norm(ParamStore& store, double max_norm) {
    double sq = 0.0;
    for (const auto& p : store.all()) {
        if (!p.trainable) continue;
        sq += as_vector(p.grad).squaredNorm();
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double scale = max_norm / norm;
        for (auto& p : store.all()) {
            if (!p.trainable) continue;
            as_vector(p.grad) *= scale;
        }
    }
    return norm;
}

// ---- finite-difference gradient checker ----

GradCheckReport grad_check(const ScalarFn& f, ParamStore& store, double step, double tol) {
    // Analytic pass.
    store.zero_grad();
    {
        Tape tape(&store, true);
        Var y = f(tape);
        if (!tape.val(y).all_finite())
            throw std::runtime_error("grad_check: function value is not finite");
        tape.backward(y);
        tape.accumulate_param_grads();
    }

    auto value_of = [&]() {
        Tape tape(&store, false);
        Var y = f(tape);
        return tape.val(y)[0];
    };

    GradCheckReport report;
    report.pass = true;
    for (auto& p : store.all()) {
        GradCheckEntry entry;
        entry.name = p.name;
        for (std::size_t j = 0; j < p.value.data.size(); ++j) {
            double keep = p.value.data[j];
            p.value.data[j] = keep + step;
            double fp = value_of();
            p.value.data[j] = keep - step;
            double fm = value_of();
            p.value.data[j] = keep;
            double numeric = (fp - fm) / (2.0 * step);
            double analytic = p.grad.data[j];
            double abs_err = std::abs(analytic - numeric);
            double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
            entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
            entry.max_rel_err = std::max(entry.max_rel_err, abs_err / denom);
        }
        if (entry.max_rel_err > report.worst_rel_err) {
            report.worst_rel_err = entry.max_rel_err;
            report.worst_param = entry.name;
        }
        if (entry.max_rel_err >= tol) report.pass = false;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace physgraph::nn
