#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>
#include <deque>

#include "ccn/errors.hpp"
#include "ccn/tensor.hpp"

namespace ccn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// Count of L2-normalization slices that passed through unscaled (norm < 1e-12).
inline thread_local int64_t l2_zero_slice_count = 0;

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;
    bool trainable = true;
    bool has_grad = false;

    explicit Parameter(std::string n, Tensor init, bool train = true)
        : name(std::move(n)),
          value(std::move(init)),
          grad(value.shape),
          adam_m(value.shape),
          adam_v(value.shape),
          trainable(train) {}
};

// Handle into a Tape.
struct Value {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// ---------------------------------------------------------------------------
// Raw 3D convolution kernels, SAME zero padding. All are pure gathers so the
// results are deterministic regardless of evaluation order.
// x: [xi,yi,zi,ci], kernel: [k,k,k,ci,co], stride s. Output [xi/s,yi/s,zi/s,co].
inline Tensor raw_conv3d(const Tensor& x, const Tensor& kern, int s) {
    const int64_t xi = x.shape[0], yi = x.shape[1], zi = x.shape[2], ci = x.shape[3];
    const int64_t k = kern.shape[0], co = kern.shape[4];
    if (kern.shape[3] != ci) throw ShapeMismatch("conv3d: kernel input channels");
    if (xi % s || yi % s || zi % s) throw ShapeMismatch("conv3d: dims not divisible by stride");
    const int64_t xo = xi / s, yo = yi / s, zo = zi / s;
    const int64_t pb = ((xo - 1) * s + k - xi) / 2;
    Tensor y({xo, yo, zo, co});
    std::vector<double> acc(static_cast<size_t>(co));
    for (int64_t ox = 0; ox < xo; ++ox)
        for (int64_t oy = 0; oy < yo; ++oy)
            for (int64_t oz = 0; oz < zo; ++oz) {
                std::fill(acc.begin(), acc.end(), 0.0);
                for (int64_t kx = 0; kx < k; ++kx) {
                    const int64_t ix = ox * s + kx - pb;
                    if (ix < 0 || ix >= xi) continue;
                    for (int64_t ky = 0; ky < k; ++ky) {
                        const int64_t iy = oy * s + ky - pb;
                        if (iy < 0 || iy >= yi) continue;
                        for (int64_t kz = 0; kz < k; ++kz) {
                            const int64_t iz = oz * s + kz - pb;
                            if (iz < 0 || iz >= zi) continue;
                            const double* xp = &x.data[static_cast<size_t>(((ix * yi + iy) * zi + iz) * ci)];
                            const double* kp = &kern.data[static_cast<size_t>((((kx * k + ky) * k + kz) * ci) * co)];
                            for (int64_t c = 0; c < ci; ++c) {
                                const double xv = xp[c];
                                const double* kr = kp + c * co;
                                for (int64_t o = 0; o < co; ++o) acc[static_cast<size_t>(o)] += xv * kr[o];
                            }
                        }
                    }
                }
                double* yp = &y.data[static_cast<size_t>(((ox * yo + oy) * zo + oz) * co)];
                for (int64_t o = 0; o < co; ++o) yp[o] = acc[static_cast<size_t>(o)];
            }
    return y;
}

// Adjoint of raw_conv3d with the same kernel: y: [xo,yo,zo,co] -> [xo*s,yo*s,zo*s,ci].
inline Tensor raw_tconv3d(const Tensor& y, const Tensor& kern, int s) {
    const int64_t xo = y.shape[0], yo = y.shape[1], zo = y.shape[2], co = y.shape[3];
    const int64_t k = kern.shape[0], ci = kern.shape[3];
    if (kern.shape[4] != co) throw ShapeMismatch("tconv3d: kernel output channels");
    const int64_t xi = xo * s, yi = yo * s, zi = zo * s;
    const int64_t pb = ((xo - 1) * s + k - xi) / 2;
    Tensor x({xi, yi, zi, ci});
    std::vector<double> acc(static_cast<size_t>(ci));
    for (int64_t ix = 0; ix < xi; ++ix)
        for (int64_t iy = 0; iy < yi; ++iy)
            for (int64_t iz = 0; iz < zi; ++iz) {
                std::fill(acc.begin(), acc.end(), 0.0);
                for (int64_t kx = 0; kx < k; ++kx) {
                    const int64_t nx = ix + pb - kx;
                    if (nx < 0 || nx % s || nx / s >= xo) continue;
                    for (int64_t ky = 0; ky < k; ++ky) {
                        const int64_t ny = iy + pb - ky;
                        if (ny < 0 || ny % s || ny / s >= yo) continue;
                        for (int64_t kz = 0; kz < k; ++kz) {
                            const int64_t nz = iz + pb - kz;
                            if (nz < 0 || nz % s || nz / s >= zo) continue;
                            const double* yp =
                                &y.data[static_cast<size_t>((((nx / s) * yo + ny / s) * zo + nz / s) * co)];
                            const double* kp = &kern.data[static_cast<size_t>((((kx * k + ky) * k + kz) * ci) * co)];
                            for (int64_t c = 0; c < ci; ++c) {
                                const double* kr = kp + c * co;
                                double a = 0;
                                for (int64_t o = 0; o < co; ++o) a += yp[o] * kr[o];
                                acc[static_cast<size_t>(c)] += a;
                            }
                        }
                    }
                }
                double* xp = &x.data[static_cast<size_t>(((ix * yi + iy) * zi + iz) * ci)];
                for (int64_t c = 0; c < ci; ++c) xp[c] = acc[static_cast<size_t>(c)];
            }
    return x;
}

// Kernel gradient: x: [xi..,ci] (stride-s input), gy: [xi/s..,co] -> [k,k,k,ci,co].
inline Tensor raw_conv3d_kgrad(const Tensor& x, const Tensor& gy, int s, int64_t k) {
    const int64_t xi = x.shape[0], yi = x.shape[1], zi = x.shape[2], ci = x.shape[3];
    const int64_t xo = gy.shape[0], yo = gy.shape[1], zo = gy.shape[2], co = gy.shape[3];
    const int64_t pb = ((xo - 1) * s + k - xi) / 2;
    Tensor dk({k, k, k, ci, co});
    for (int64_t kx = 0; kx < k; ++kx)
        for (int64_t ky = 0; ky < k; ++ky)
            for (int64_t kz = 0; kz < k; ++kz) {
                double* dkp = &dk.data[static_cast<size_t>((((kx * k + ky) * k + kz) * ci) * co)];
                for (int64_t ox = 0; ox < xo; ++ox) {
                    const int64_t ix = ox * s + kx - pb;
                    if (ix < 0 || ix >= xi) continue;
                    for (int64_t oy = 0; oy < yo; ++oy) {
                        const int64_t iy = oy * s + ky - pb;
                        if (iy < 0 || iy >= yi) continue;
                        for (int64_t oz = 0; oz < zo; ++oz) {
                            const int64_t iz = oz * s + kz - pb;
                            if (iz < 0 || iz >= zi) continue;
                            const double* xp = &x.data[static_cast<size_t>(((ix * yi + iy) * zi + iz) * ci)];
                            const double* gp = &gy.data[static_cast<size_t>(((ox * yo + oy) * zo + oz) * co)];
                            for (int64_t c = 0; c < ci; ++c) {
                                double* dr = dkp + c * co;
                                const double xv = xp[c];
                                for (int64_t o = 0; o < co; ++o) dr[o] += xv * gp[o];
                            }
                        }
                    }
                }
            }
    return dk;
}

// ---------------------------------------------------------------------------
// Reverse-mode tape. Nodes are recorded in topological order by construction;
// backward walks them in reverse. Gradients of parameter leaves are
// accumulated into the bound Parameter.
class Tape {
  public:
    Value constant(Tensor v) { return push(std::move(v), false, nullptr); }

    Value input(Tensor v, bool requires_grad = false) { return push(std::move(v), requires_grad, nullptr); }

    Value param(Parameter& p) { return push(p.value, true, &p); }

    const Tensor& val(Value v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    const Tensor& grad(Value v) const { return nodes_[static_cast<size_t>(v.id)].grad; }

    Value add(Value a, Value b) {
        const Tensor &ta = val(a), &tb = val(b);
        if (!ta.same_shape(tb)) throw ShapeMismatch("add: " + ta.shape_str() + " vs " + tb.shape_str());
        Tensor out = ta;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += tb[i];
        Value o = push(std::move(out), needs_grad(a) || needs_grad(b), nullptr);
        record(o, [a, b, o](Tape& t) {
            t.accum(a, t.grad(o));
            t.accum(b, t.grad(o));
        });
        return o;
    }

    Value scale(Value a, double s) {
        Tensor out = val(a);
        for (double& v : out.data) v *= s;
        Value o = push(std::move(out), needs_grad(a), nullptr);
        record(o, [a, o, s](Tape& t) {
            Tensor g = t.grad(o);
            for (double& v : g.data) v *= s;
            t.accum(a, g);
        });
        return o;
    }

    Value matmul(Value x, Value w) {
        const Tensor &tx = val(x), &tw = val(w);
        if (tx.rank() != 2 || tw.rank() != 2 || tx.shape[1] != tw.shape[0])
            throw ShapeMismatch("matmul: " + tx.shape_str() + " x " + tw.shape_str());
        const int64_t n = tx.shape[0], i = tx.shape[1], oo = tw.shape[1];
        Tensor out({n, oo});
        MapMat(out.data.data(), n, oo) =
            CMapMat(tx.data.data(), n, i) * CMapMat(tw.data.data(), i, oo);
        Value o = push(std::move(out), needs_grad(x) || needs_grad(w), nullptr);
        record(o, [x, w, o, n, i, oo](Tape& t) {
            CMapMat g(t.grad(o).data.data(), n, oo);
            if (t.needs_grad(x)) {
                Tensor gx({n, i});
                MapMat(gx.data.data(), n, i) = g * CMapMat(t.val(w).data.data(), i, oo).transpose();
                t.accum(x, gx);
            }
            if (t.needs_grad(w)) {
                Tensor gw({i, oo});
                MapMat(gw.data.data(), i, oo) = CMapMat(t.val(x).data.data(), n, i).transpose() * g;
                t.accum(w, gw);
            }
        });
        return o;
    }

    // Broadcast b over the last axis: y[..., j] = x[..., j] + b[j].
    Value add_bias_rows(Value x, Value b) {
        const Tensor &tx = val(x), &tb = val(b);
        const int64_t c = tx.shape.back();
        if (tb.numel() != c) throw ShapeMismatch("add_bias_rows");
        Tensor out = tx;
        const int64_t n = tx.numel() / c;
        for (int64_t r = 0; r < n; ++r)
            for (int64_t j = 0; j < c; ++j) out[r * c + j] += tb[j];
        Value o = push(std::move(out), needs_grad(x) || needs_grad(b), nullptr);
        record(o, [x, b, o, n, c](Tape& t) {
            const Tensor& g = t.grad(o);
            t.accum(x, g);
            if (t.needs_grad(b)) {
                Tensor gb({c});
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
                t.accum(b, gb);
            }
        });
        return o;
    }

    // View with a new shape; numel must match.
    Value reshape(Value a, std::vector<int64_t> shape) {
        const Tensor& ta = val(a);
        if (Tensor::numel_of(shape) != ta.numel()) throw ShapeMismatch("reshape");
        Tensor out(shape, ta.data);
        Value o = push(std::move(out), needs_grad(a), nullptr);
        record(o, [a, o](Tape& t) {
            Tensor g(t.val(a).shape, t.grad(o).data);
            t.accum(a, g);
        });
        return o;
    }

    // y = x * w + b for x:[n,i], w:[i,o], b:[o]
    Value linear(Value x, Value w, Value b) { return add_bias_rows(matmul(x, w), b); }

    Value relu(Value a) { return leaky_relu(a, 0.0); }

    Value leaky_relu(Value a, double slope) {
        Tensor out = val(a);
        for (double& v : out.data) v = v > 0 ? v : slope * v;
        Value o = push(std::move(out), needs_grad(a), nullptr);
        record(o, [a, o, slope](Tape& t) {
            Tensor g = t.grad(o);
            const Tensor& in = t.val(a);
            for (int64_t j = 0; j < g.numel(); ++j)
                if (in[j] <= 0) g[j] *= slope;  // gradient at 0 defined as slope
            t.accum(a, g);
        });
        return o;
    }

    Value sigmoid(Value a) {
        Tensor out = val(a);
        for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
        Value o = push(std::move(out), needs_grad(a), nullptr);
        record(o, [a, o](Tape& t) {
            Tensor g = t.grad(o);
            const Tensor& y = t.val(o);
            for (int64_t j = 0; j < g.numel(); ++j) g[j] *= y[j] * (1.0 - y[j]);
            t.accum(a, g);
        });
        return o;
    }

    // Normalize each length-c slice along the last axis. Slices with norm
    // below 1e-12 pass through unscaled and bump l2_zero_slice_count.
    Value l2_normalize(Value a) {
        const Tensor& ta = val(a);
        const int64_t c = ta.shape.back();
        const int64_t rows = ta.numel() / c;
        Tensor out = ta;
        std::vector<double> norms(static_cast<size_t>(rows));
        for (int64_t r = 0; r < rows; ++r) {
            double s = 0;
            const double* p = &ta.data[static_cast<size_t>(r * c)];
            for (int64_t j = 0; j < c; ++j) s += p[j] * p[j];
            const double nrm = std::sqrt(s);
            norms[static_cast<size_t>(r)] = nrm;
            if (nrm < 1e-12) {
                ++l2_zero_slice_count;
                continue;
            }
            double* q = &out.data[static_cast<size_t>(r * c)];
            for (int64_t j = 0; j < c; ++j) q[j] = p[j] / nrm;
        }
        Value o = push(std::move(out), needs_grad(a), nullptr);
        record(o, [a, o, c, rows, norms](Tape& t) {
            const Tensor& g = t.grad(o);
            const Tensor& y = t.val(o);
            Tensor gx(t.val(a).shape);
            for (int64_t r = 0; r < rows; ++r) {
                const double nrm = norms[static_cast<size_t>(r)];
                const double* gp = &g.data[static_cast<size_t>(r * c)];
                double* xp = &gx.data[static_cast<size_t>(r * c)];
                if (nrm < 1e-12) {
                    for (int64_t j = 0; j < c; ++j) xp[j] = gp[j];
                    continue;
                }
                const double* yp = &y.data[static_cast<size_t>(r * c)];
                double dot = 0;
                for (int64_t j = 0; j < c; ++j) dot += gp[j] * yp[j];
                for (int64_t j = 0; j < c; ++j) xp[j] = (gp[j] - dot * yp[j]) / nrm;
            }
            t.accum(a, gx);
        });
        return o;
    }

    // 3D convolution, SAME padding. transposed=true upsamples by the stride
    // and contracts the kernel's output channels (exact adjoint of the
    // forward convolution with the same kernel).
    Value conv3d(Value x, Value kern, int stride, bool transposed = false) {
        const Tensor &tx = val(x), &tk = val(kern);
        if (tx.rank() != 4 || tk.rank() != 5) throw ShapeMismatch("conv3d: rank");
        Tensor out = transposed ? raw_tconv3d(tx, tk, stride) : raw_conv3d(tx, tk, stride);
        Value o = push(std::move(out), needs_grad(x) || needs_grad(kern), nullptr);
        const int64_t k = tk.shape[0];
        record(o, [x, kern, o, stride, transposed, k](Tape& t) {
            const Tensor& g = t.grad(o);
            if (transposed) {
                if (t.needs_grad(x)) t.accum(x, raw_conv3d(g, t.val(kern), stride));
                if (t.needs_grad(kern)) t.accum(kern, raw_conv3d_kgrad(g, t.val(x), stride, k));
            } else {
                if (t.needs_grad(x)) t.accum(x, raw_tconv3d(g, t.val(kern), stride));
                if (t.needs_grad(kern)) t.accum(kern, raw_conv3d_kgrad(t.val(x), g, stride, k));
            }
        });
        return o;
    }

    // Concatenate along the last axis.
    Value concat_last(Value a, Value b) {
        const Tensor &ta = val(a), &tb = val(b);
        if (ta.rank() != tb.rank()) throw ShapeMismatch("concat_last: rank");
        for (size_t i = 0; i + 1 < ta.rank(); ++i)
            if (ta.shape[i] != tb.shape[i]) throw ShapeMismatch("concat_last: leading dims");
        const int64_t ca = ta.shape.back(), cb = tb.shape.back();
        const int64_t rows = ta.numel() / ca;
        std::vector<int64_t> shape = ta.shape;
        shape.back() = ca + cb;
        Tensor out(shape);
        for (int64_t r = 0; r < rows; ++r) {
            std::copy_n(&ta.data[static_cast<size_t>(r * ca)], ca, &out.data[static_cast<size_t>(r * (ca + cb))]);
            std::copy_n(&tb.data[static_cast<size_t>(r * cb)], cb,
                        &out.data[static_cast<size_t>(r * (ca + cb) + ca)]);
        }
        Value o = push(std::move(out), needs_grad(a) || needs_grad(b), nullptr);
        record(o, [a, b, o, ca, cb, rows](Tape& t) {
            const Tensor& g = t.grad(o);
            if (t.needs_grad(a)) {
                Tensor ga(t.val(a).shape);
                for (int64_t r = 0; r < rows; ++r)
                    std::copy_n(&g.data[static_cast<size_t>(r * (ca + cb))], ca,
                                &ga.data[static_cast<size_t>(r * ca)]);
                t.accum(a, ga);
            }
            if (t.needs_grad(b)) {
                Tensor gb(t.val(b).shape);
                for (int64_t r = 0; r < rows; ++r)
                    std::copy_n(&g.data[static_cast<size_t>(r * (ca + cb) + ca)], cb,
                                &gb.data[static_cast<size_t>(r * cb)]);
                t.accum(b, gb);
            }
        });
        return o;
    }

    Value sum(Value a) {
        double s = 0;
        for (double v : val(a).data) s += v;
        Value o = push(Tensor::scalar(s), needs_grad(a), nullptr);
        record(o, [a, o](Tape& t) {
            const double g = t.grad(o)[0];
            Tensor ga = Tensor::full(t.val(a).shape, g);
            t.accum(a, ga);
        });
        return o;
    }

    Value mean(Value a) { return scale(sum(a), 1.0 / static_cast<double>(val(a).numel())); }

    Value mul(Value a, Value b) {
        const Tensor &ta = val(a), &tb = val(b);
        if (!ta.same_shape(tb)) throw ShapeMismatch("mul");
        Tensor out = ta;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= tb[i];
        Value o = push(std::move(out), needs_grad(a) || needs_grad(b), nullptr);
        record(o, [a, b, o](Tape& t) {
            const Tensor& g = t.grad(o);
            if (t.needs_grad(a)) {
                Tensor ga = g;
                const Tensor& vb = t.val(b);
                for (int64_t i = 0; i < ga.numel(); ++i) ga[i] *= vb[i];
                t.accum(a, ga);
            }
            if (t.needs_grad(b)) {
                Tensor gb = g;
                const Tensor& va = t.val(a);
                for (int64_t i = 0; i < gb.numel(); ++i) gb[i] *= va[i];
                t.accum(b, gb);
            }
        });
        return o;
    }

    // Mean squared error against a constant target.
    Value mse_to(Value pred, Tensor target) {
        const Tensor& tp = val(pred);
        if (!tp.same_shape(target)) throw ShapeMismatch("mse_to");
        const int64_t n = tp.numel();
        double s = 0;
        for (int64_t i = 0; i < n; ++i) {
            const double d = tp[i] - target[i];
            s += d * d;
        }
        Value o = push(Tensor::scalar(s / static_cast<double>(n)), needs_grad(pred), nullptr);
        record(o, [pred, o, target = std::move(target), n](Tape& t) {
            const double g = t.grad(o)[0] * 2.0 / static_cast<double>(n);
            Tensor gp(t.val(pred).shape);
            const Tensor& tp = t.val(pred);
            for (int64_t i = 0; i < n; ++i) gp[i] = g * (tp[i] - target[i]);
            t.accum(pred, gp);
        });
        return o;
    }

    // Mean binary cross entropy from pre-sigmoid logits, numerically stable.
    Value bce_with_logits(Value logits, Tensor targets) {
        const Tensor& tl = val(logits);
        if (tl.numel() != targets.numel()) throw ShapeMismatch("bce_with_logits");
        const int64_t n = tl.numel();
        double s = 0;
        for (int64_t i = 0; i < n; ++i) {
            const double z = tl[i];
            s += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
        }
        Value o = push(Tensor::scalar(s / static_cast<double>(n)), needs_grad(logits), nullptr);
        record(o, [logits, o, targets = std::move(targets), n](Tape& t) {
            const double g = t.grad(o)[0] / static_cast<double>(n);
            const Tensor& tl = t.val(logits);
            Tensor gl(tl.shape);
            for (int64_t i = 0; i < n; ++i) gl[i] = g * (1.0 / (1.0 + std::exp(-tl[i])) - targets[i]);
            t.accum(logits, gl);
        });
        return o;
    }

    // InfoNCE over rows of q/k_pos with a shared negative dictionary:
    // mean_r[ -log exp(q_r.k+_r / tau) / (exp(q_r.k+_r/tau) + sum_i exp(q_r.n_i/tau)) ]
    // computed via log-sum-exp. Negatives are constants (detached keys).
    Value info_nce(Value q, Value k_pos, Tensor negatives, double tau) {
        const Tensor &tq = val(q), &tk = val(k_pos);
        if (!tq.same_shape(tk) || tq.rank() != 2) throw ShapeMismatch("info_nce: q/k shape");
        const int64_t n = tq.shape[0], c = tq.shape[1];
        const int64_t kn = negatives.numel() == 0 ? 0 : negatives.shape[0];
        if (kn < 1) throw ShapeMismatch("info_nce: needs at least one negative");
        if (negatives.shape[1] != c) throw ShapeMismatch("info_nce: negative dim");
        // probs[r] = softmax over (positive, negatives) logits of row r.
        auto probs = std::make_shared<Tensor>(Tensor({n, kn + 1}));
        double loss = 0;
        for (int64_t r = 0; r < n; ++r) {
            std::vector<double> logit(static_cast<size_t>(kn + 1));
            double l0 = 0;
            for (int64_t j = 0; j < c; ++j) l0 += tq.at2(r, j) * tk.at2(r, j);
            logit[0] = l0 / tau;
            for (int64_t i = 0; i < kn; ++i) {
                double d = 0;
                for (int64_t j = 0; j < c; ++j) d += tq.at2(r, j) * negatives.at2(i, j);
                logit[static_cast<size_t>(i + 1)] = d / tau;
            }
            const double m = *std::max_element(logit.begin(), logit.end());
            double z = 0;
            for (double l : logit) z += std::exp(l - m);
            const double lse = m + std::log(z);
            loss += lse - logit[0];
            for (int64_t i = 0; i <= kn; ++i)
                probs->at2(r, i) = std::exp(logit[static_cast<size_t>(i)] - lse);
        }
        Value o = push(Tensor::scalar(loss / static_cast<double>(n)), needs_grad(q) || needs_grad(k_pos), nullptr);
        record(o, [q, k_pos, o, negatives = std::move(negatives), probs, n, c, kn, tau](Tape& t) {
            const double g = t.grad(o)[0] / (static_cast<double>(n) * tau);
            const Tensor &tq = t.val(q), &tk = t.val(k_pos);
            Tensor gq({n, c}), gk({n, c});
            for (int64_t r = 0; r < n; ++r) {
                const double d0 = g * (probs->at2(r, 0) - 1.0);
                for (int64_t j = 0; j < c; ++j) {
                    gq.at2(r, j) += d0 * tk.at2(r, j);
                    gk.at2(r, j) += d0 * tq.at2(r, j);
                }
                for (int64_t i = 0; i < kn; ++i) {
                    const double di = g * probs->at2(r, i + 1);
                    for (int64_t j = 0; j < c; ++j) gq.at2(r, j) += di * negatives.at2(i, j);
                }
            }
            if (t.needs_grad(q)) t.accum(q, gq);
            if (t.needs_grad(k_pos)) t.accum(k_pos, gk);
        });
        return o;
    }

    // Trilinear interpolation of a [w,h,d,c] grid at continuous memory
    // coordinates (voxel centers at integer coordinates). Out-of-range
    // corners contribute zero; a fully out-of-bounds query yields a zero row.
    Value trilinear_gather(Value grid, const std::vector<std::array<double, 3>>& coords) {
        const Tensor& tg = val(grid);
        if (tg.rank() != 4) throw ShapeMismatch("trilinear_gather: grid rank");
        const int64_t w = tg.shape[0], h = tg.shape[1], d = tg.shape[2], c = tg.shape[3];
        const int64_t n = static_cast<int64_t>(coords.size());
        struct Corner {
            int64_t offset;  // flat index of the corner's channel row
            double weight;
        };
        auto corners = std::make_shared<std::vector<std::vector<Corner>>>(static_cast<size_t>(n));
        Tensor out({n, c});
        for (int64_t r = 0; r < n; ++r) {
            const auto& m = coords[static_cast<size_t>(r)];
            int64_t i0[3];
            double f[3];
            for (int a = 0; a < 3; ++a) {
                i0[a] = static_cast<int64_t>(std::floor(m[static_cast<size_t>(a)]));
                f[a] = m[static_cast<size_t>(a)] - static_cast<double>(i0[a]);
            }
            auto& cl = (*corners)[static_cast<size_t>(r)];
            for (int dx = 0; dx < 2; ++dx)
                for (int dy = 0; dy < 2; ++dy)
                    for (int dz = 0; dz < 2; ++dz) {
                        const double wgt = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]);
                        if (wgt == 0.0) continue;
                        const int64_t ix = i0[0] + dx, iy = i0[1] + dy, iz = i0[2] + dz;
                        if (ix < 0 || ix >= w || iy < 0 || iy >= h || iz < 0 || iz >= d) continue;
                        const int64_t off = ((ix * h + iy) * d + iz) * c;
                        cl.push_back({off, wgt});
                        const double* gp = &tg.data[static_cast<size_t>(off)];
                        double* op = &out.data[static_cast<size_t>(r * c)];
                        for (int64_t j = 0; j < c; ++j) op[j] += wgt * gp[j];
                    }
        }
        Value o = push(std::move(out), needs_grad(grid), nullptr);
        record(o, [grid, o, corners, n, c](Tape& t) {
            const Tensor& g = t.grad(o);
            Tensor gg(t.val(grid).shape);
            for (int64_t r = 0; r < n; ++r) {
                const double* gp = &g.data[static_cast<size_t>(r * c)];
                for (const auto& cr : (*corners)[static_cast<size_t>(r)]) {
                    double* dst = &gg.data[static_cast<size_t>(cr.offset)];
                    for (int64_t j = 0; j < c; ++j) dst[j] += cr.weight * gp[j];
                }
            }
            t.accum(grid, gg);
        });
        return o;
    }

    // Reverse sweep from a scalar loss. Parameter leaves accumulate into
    // their Parameter::grad.
    void backward(Value loss) {
        if (val(loss).numel() != 1) throw NonScalarLoss("backward: loss must be scalar");
        for (auto& nd : nodes_)
            if (nd.requires_grad) nd.grad = Tensor(nd.value.shape);
        nodes_[static_cast<size_t>(loss.id)].grad = Tensor::scalar(1.0);
        for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) {
            Node& nd = nodes_[static_cast<size_t>(i)];
            if (nd.requires_grad && nd.back) nd.back(*this);
        }
        for (auto& nd : nodes_) {
            if (!nd.bound) continue;
            for (int64_t i = 0; i < nd.grad.numel(); ++i) nd.bound->grad[i] += nd.grad[i];
            nd.bound->has_grad = true;
        }
    }

    bool needs_grad(Value v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }

    void accum(Value v, const Tensor& g) {
        Node& nd = nodes_[static_cast<size_t>(v.id)];
        if (!nd.requires_grad) return;
        if (!nd.grad.same_shape(g)) throw ShapeMismatch("gradient accumulation shape");
        for (int64_t i = 0; i < g.numel(); ++i) nd.grad[i] += g[i];
    }

    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Tape&)> back;
        Parameter* bound = nullptr;
    };

    Value push(Tensor v, bool requires_grad, Parameter* bound) {
        nodes_.push_back(Node{std::move(v), Tensor(), requires_grad, nullptr, bound});
        return Value{static_cast<int32_t>(nodes_.size() - 1)};
    }

    void record(Value o, std::function<void(Tape&)> fn) {
        Node& nd = nodes_[static_cast<size_t>(o.id)];
        if (nd.requires_grad) nd.back = std::move(fn);
    }

    std::deque<Node> nodes_;
};

}  // namespace ccn
