#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "iclp/rng.hpp"
#include "iclp/tensor.hpp"

namespace iclp {

// Reverse-mode tape. Nodes are appended in topological order; backward walks
// the tape once in reverse. Matrix products go through Eigen, everything else
// is plain loops — the shapes here are tiny.
template <typename T>
class Tape {
public:
    using Ref = int32_t;
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapM = Eigen::Map<Mat>;
    using CMapM = Eigen::Map<const Mat>;

    Ref leaf(Tensor<T> v, bool requires_grad = true) {
        return push(std::move(v), requires_grad, nullptr);
    }
    Ref constant(Tensor<T> v) { return push(std::move(v), false, nullptr); }

    const Tensor<T>& value(Ref r) const { return nodes_[static_cast<size_t>(r)].val; }
    const Tensor<T>& grad(Ref r) const { return nodes_[static_cast<size_t>(r)].grad; }
    bool needs_grad(Ref r) const { return nodes_[static_cast<size_t>(r)].needs_grad; }
    size_t node_count() const { return nodes_.size(); }

    // ---- elementwise ----

    Ref add(Ref a, Ref b) {
        check_same_shape(a, b, "add");
        Tensor<T> out = value(a);
        for (int64_t i = 0; i < out.size(); ++i) out.data[i] += value(b).data[i];
        return push(std::move(out), wants(a) || wants(b), [a, b](Tape& t, Ref me) {
            t.accum(a, t.nodes_[me].grad.data.data());
            t.accum(b, t.nodes_[me].grad.data.data());
        });
    }

    Ref sub(Ref a, Ref b) {
        check_same_shape(a, b, "sub");
        Tensor<T> out = value(a);
        for (int64_t i = 0; i < out.size(); ++i) out.data[i] -= value(b).data[i];
        return push(std::move(out), wants(a) || wants(b), [a, b](Tape& t, Ref me) {
            const auto& g = t.nodes_[me].grad;
            t.accum(a, g.data.data());
            if (t.wants(b)) {
                auto& gb = t.grad_buf(b);
                for (int64_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i];
            }
        });
    }

    Ref mul(Ref a, Ref b) {
        check_same_shape(a, b, "mul");
        Tensor<T> out = value(a);
        for (int64_t i = 0; i < out.size(); ++i) out.data[i] *= value(b).data[i];
        return push(std::move(out), wants(a) || wants(b), [a, b](Tape& t, Ref me) {
            const auto& g = t.nodes_[me].grad;
            if (t.wants(a)) {
                auto& ga = t.grad_buf(a);
                const auto& vb = t.value(b);
                for (int64_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * vb.data[i];
            }
            if (t.wants(b)) {
                auto& gb = t.grad_buf(b);
                const auto& va = t.value(a);
                for (int64_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * va.data[i];
            }
        });
    }

    Ref scale(Ref a, T c) {
        Tensor<T> out = value(a);
        for (auto& v : out.data) v *= c;
        return push(std::move(out), wants(a), [a, c](Tape& t, Ref me) {
            if (!t.wants(a)) return;
            auto& ga = t.grad_buf(a);
            const auto& g = t.nodes_[me].grad;
            for (int64_t i = 0; i < g.size(); ++i) ga.data[i] += c * g.data[i];
        });
    }

    // bias broadcast: a is (R,C), b is (C)
    Ref add_rowvec(Ref a, Ref b) {
        const auto& va = value(a);
        const auto& vb = value(b);
        if (va.cols() != static_cast<int>(vb.data.size()))
            throw std::invalid_argument("add_rowvec: width mismatch");
        Tensor<T> out = va;
        int C = va.cols(), R = va.rows();
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) out.at(r, c) += vb.data[static_cast<size_t>(c)];
        return push(std::move(out), wants(a) || wants(b), [a, b, R, C](Tape& t, Ref me) {
            const auto& g = t.nodes_[me].grad;
            t.accum(a, g.data.data());
            if (t.wants(b)) {
                auto& gb = t.grad_buf(b);
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) gb.data[static_cast<size_t>(c)] += g.at(r, c);
            }
        });
    }

    // ---- linear algebra ----

    Ref matmul(Ref a, Ref b) {
        const auto& va = value(a);
        const auto& vb = value(b);
        if (va.cols() != vb.rows()) throw std::invalid_argument("matmul: inner dim mismatch");
        Tensor<T> out({va.rows(), vb.cols()});
        MapM(out.data.data(), out.rows(), out.cols()) =
            cmap(va) * cmap(vb);
        return push(std::move(out), wants(a) || wants(b), [a, b](Tape& t, Ref me) {
            const auto& g = t.nodes_[me].grad;
            const auto& va2 = t.value(a);
            const auto& vb2 = t.value(b);
            if (t.wants(a)) {
                auto& ga = t.grad_buf(a);
                MapM(ga.data.data(), ga.rows(), ga.cols()).noalias() +=
                    cmap(g) * cmap(vb2).transpose();
            }
            if (t.wants(b)) {
                auto& gb = t.grad_buf(b);
                MapM(gb.data.data(), gb.rows(), gb.cols()).noalias() +=
                    cmap(va2).transpose() * cmap(g);
            }
        });
    }

    Ref transpose(Ref a) {
        const auto& va = value(a);
        Tensor<T> out({va.cols(), va.rows()});
        MapM(out.data.data(), out.rows(), out.cols()) = cmap(va).transpose();
        return push(std::move(out), wants(a), [a](Tape& t, Ref me) {
            if (!t.wants(a)) return;
            const auto& g = t.nodes_[me].grad;
            auto& ga = t.grad_buf(a);
            MapM(ga.data.data(), ga.rows(), ga.cols()).noalias() += cmap(g).transpose();
        });
    }

    // rows of m selected by idx; backward scatter-adds (duplicate indices accumulate)
    Ref gather_rows(Ref m, std::vector<int> idx) {
        const auto& vm = value(m);
        int C = vm.cols();
        Tensor<T> out({static_cast<int>(idx.size()), C});
        for (size_t r = 0; r < idx.size(); ++r) {
            if (idx[r] < 0 || idx[r] >= vm.rows())
                throw std::out_of_range("gather_rows: index out of range");
            for (int c = 0; c < C; ++c) out.at(static_cast<int>(r), c) = vm.at(idx[r], c);
        }
        return push(std::move(out), wants(m), [m, idx = std::move(idx), C](Tape& t, Ref me) {
            if (!t.wants(m)) return;
            const auto& g = t.nodes_[me].grad;
            auto& gm = t.grad_buf(m);
            for (size_t r = 0; r < idx.size(); ++r)
                for (int c = 0; c < C; ++c) gm.at(idx[r], c) += g.at(static_cast<int>(r), c);
        });
    }

    Ref slice_cols(Ref a, int off, int len) {
        const auto& va = value(a);
        if (off < 0 || off + len > va.cols()) throw std::out_of_range("slice_cols");
        Tensor<T> out({va.rows(), len});
        for (int r = 0; r < va.rows(); ++r)
            for (int c = 0; c < len; ++c) out.at(r, c) = va.at(r, off + c);
        return push(std::move(out), wants(a), [a, off, len](Tape& t, Ref me) {
            if (!t.wants(a)) return;
            const auto& g = t.nodes_[me].grad;
            auto& ga = t.grad_buf(a);
            for (int r = 0; r < g.rows(); ++r)
                for (int c = 0; c < len; ++c) ga.at(r, off + c) += g.at(r, c);
        });
    }

    Ref slice_rows(Ref a, int off, int len) {
        const auto& va = value(a);
        if (off < 0 || off + len > va.rows()) throw std::out_of_range("slice_rows");
        int C = va.cols();
        Tensor<T> out({len, C});
        for (int r = 0; r < len; ++r)
            for (int c = 0; c < C; ++c) out.at(r, c) = va.at(off + r, c);
        return push(std::move(out), wants(a), [a, off, len, C](Tape& t, Ref me) {
            if (!t.wants(a)) return;
            const auto& g = t.nodes_[me].grad;
            auto& ga = t.grad_buf(a);
            for (int r = 0; r < len; ++r)
                for (int c = 0; c < C; ++c) ga.at(off + r, c) += g.at(r, c);
        });
    }

    Ref concat_cols(const std::vector<Ref>& parts) {
        int R = value(parts.at(0)).rows(), C = 0;
        for (Ref p : parts) {
            if (value(p).rows() != R) throw std::invalid_argument("concat_cols: row mismatch");
            C += value(p).cols();
        }
        Tensor<T> out({R, C});
        bool ng = false;
        int off = 0;
        for (Ref p : parts) {
            const auto& vp = value(p);
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < vp.cols(); ++c) out.at(r, off + c) = vp.at(r, c);
            off += vp.cols();
            ng = ng || wants(p);
        }
        return push(std::move(out), ng, [parts](Tape& t, Ref me) {
            const auto& g = t.nodes_[me].grad;
            int off2 = 0;
            for (Ref p : parts) {
                int w = t.value(p).cols();
                if (t.wants(p)) {
                    auto& gp = t.grad_buf(p);
                    for (int r = 0; r < g.rows(); ++r)
                        for (int c = 0; c < w; ++c) gp.at(r, c) += g.at(r, off2 + c);
                }
                off2 += w;
            }
        });
    }

    Ref concat_rows(const std::vector<Ref>& parts) {
        int C = value(parts.at(0)).cols(), R = 0;
        for (Ref p : parts) {
            if (value(p).cols() != C) throw std::invalid_argument("concat_rows: col mismatch");
            R += value(p).rows();
        }
        Tensor<T> out({R, C});
        bool ng = false;
        int off = 0;
        for (Ref p : parts) {
            const auto& vp = value(p);
            for (int r = 0; r < vp.rows(); ++r)
                for (int c = 0; c < C; ++c) out.at(off + r, c) = vp.at(r, c);
            off += vp.rows();
            ng = ng || wants(p);
        }
        return push(std::move(out), ng, [parts](Tape& t, Ref me) {
            const auto& g = t.nodes_[me].grad;
            int off2 = 0;
            for (Ref p : parts) {
                int h = t.value(p).rows();
                if (t.wants(p)) {
                    auto& gp = t.grad_buf(p);
                    for (int r = 0; r < h; ++r)
                        for (int c = 0; c < g.cols(); ++c) gp.at(r, c) += g.at(off2 + r, c);
                }
                off2 += h;
            }
        });
    }

    // ---- nonlinearities ----

    Ref gelu(Ref a) {
        constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
        Tensor<T> out = value(a);
        for (auto& v : out.data) {
            double x = static_cast<double>(v);
            v = static_cast<T>(0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x))));
        }
        return push(std::move(out), wants(a), [a](Tape& t, Ref me) {
            if (!t.wants(a)) return;
            const auto& g = t.nodes_[me].grad;
            auto& ga = t.grad_buf(a);
            const auto& va = t.value(a);
            for (int64_t i = 0; i < g.size(); ++i) {
                double x = static_cast<double>(va.data[i]);
                double u = kCd * (x + 0.044715 * x * x * x);
                double th = std::tanh(u);
                double du = kCd * (1.0 + 3.0 * 0.044715 * x * x);
                double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                ga.data[i] += g.data[i] * static_cast<T>(d);
            }
        });
    }

    // row-wise softmax; optional additive mask (same shape), typically -inf above diagonal
    Ref softmax_rows(Ref a, const Tensor<T>* add_mask = nullptr) {
        const auto& va = value(a);
        Tensor<T> out = va;
        if (add_mask) {
            if (!va.same_shape(*add_mask)) throw std::invalid_argument("softmax mask shape");
            for (int64_t i = 0; i < out.size(); ++i) out.data[i] += add_mask->data[i];
        }
        int R = out.rows(), C = out.cols();
        for (int r = 0; r < R; ++r) {
            double mx = -1e300;
            for (int c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(out.at(r, c)));
            double z = 0;
            for (int c = 0; c < C; ++c) {
                double e = std::exp(static_cast<double>(out.at(r, c)) - mx);
                out.at(r, c) = static_cast<T>(e);
                z += e;
            }
            for (int c = 0; c < C; ++c) out.at(r, c) = static_cast<T>(out.at(r, c) / z);
        }
        return push(std::move(out), wants(a), [a](Tape& t, Ref me) {
            if (!t.wants(a)) return;
            const auto& g = t.nodes_[me].grad;
            const auto& y = t.nodes_[me].val;
            auto& ga = t.grad_buf(a);
            int R2 = y.rows(), C2 = y.cols();
            for (int r = 0; r < R2; ++r) {
                double dot = 0;
                for (int c = 0; c < C2; ++c) dot += static_cast<double>(g.at(r, c)) * y.at(r, c);
                for (int c = 0; c < C2; ++c)
                    ga.at(r, c) += static_cast<T>((static_cast<double>(g.at(r, c)) - dot) * y.at(r, c));
            }
        });
    }

    // per-row normalization with learned scale/offset; gamma, beta shape (C)
    Ref layer_norm(Ref x, Ref gamma, Ref beta, double eps = 1e-5) {
        const auto& vx = value(x);
        int R = vx.rows(), C = vx.cols();
        Tensor<T> out({R, C});
        std::vector<double> inv_sigma(static_cast<size_t>(R));
        Tensor<T> xhat({R, C});
        for (int r = 0; r < R; ++r) {
            double mu = 0;
            for (int c = 0; c < C; ++c) mu += vx.at(r, c);
            mu /= C;
            double var = 0;
            for (int c = 0; c < C; ++c) {
                double d = vx.at(r, c) - mu;
                var += d * d;
            }
            var /= C;
            double is = 1.0 / std::sqrt(var + eps);
            inv_sigma[static_cast<size_t>(r)] = is;
            for (int c = 0; c < C; ++c) {
                double h = (vx.at(r, c) - mu) * is;
                xhat.at(r, c) = static_cast<T>(h);
                out.at(r, c) = static_cast<T>(h * value(gamma).data[static_cast<size_t>(c)] +
                                              value(beta).data[static_cast<size_t>(c)]);
            }
        }
        bool ng = wants(x) || wants(gamma) || wants(beta);
        return push(std::move(out), ng,
                    [x, gamma, beta, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), R,
                     C](Tape& t, Ref me) {
            const auto& g = t.nodes_[me].grad;
            const auto& vg = t.value(gamma);
            if (t.wants(gamma)) {
                auto& gg = t.grad_buf(gamma);
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c)
                        gg.data[static_cast<size_t>(c)] += g.at(r, c) * xhat.at(r, c);
            }
            if (t.wants(beta)) {
                auto& gb = t.grad_buf(beta);
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) gb.data[static_cast<size_t>(c)] += g.at(r, c);
            }
            if (t.wants(x)) {
                auto& gx = t.grad_buf(x);
                for (int r = 0; r < R; ++r) {
                    double m1 = 0, m2 = 0;
                    for (int c = 0; c < C; ++c) {
                        double dxh = static_cast<double>(g.at(r, c)) * vg.data[static_cast<size_t>(c)];
                        m1 += dxh;
                        m2 += dxh * xhat.at(r, c);
                    }
                    m1 /= C;
                    m2 /= C;
                    for (int c = 0; c < C; ++c) {
                        double dxh = static_cast<double>(g.at(r, c)) * vg.data[static_cast<size_t>(c)];
                        gx.at(r, c) += static_cast<T>((dxh - m1 - xhat.at(r, c) * m2) *
                                                      inv_sigma[static_cast<size_t>(r)]);
                    }
                }
            }
        });
    }

    // ---- reductions / losses ----

    Ref sum(Ref a) {
        double s = 0;
        for (T v : value(a).data) s += v;
        return push(Tensor<T>::scalar(static_cast<T>(s)), wants(a), [a](Tape& t, Ref me) {
            if (!t.wants(a)) return;
            T g = t.nodes_[me].grad.data[0];
            auto& ga = t.grad_buf(a);
            for (auto& v : ga.data) v += g;
        });
    }

    Ref sqrt_scalar(Ref a) {
        if (value(a).size() != 1) throw std::invalid_argument("sqrt_scalar: not a scalar");
        double v = std::sqrt(static_cast<double>(value(a).data[0]));
        return push(Tensor<T>::scalar(static_cast<T>(v)), wants(a), [a, v](Tape& t, Ref me) {
            if (!t.wants(a) || v == 0.0) return;
            t.grad_buf(a).data[0] += static_cast<T>(t.nodes_[me].grad.data[0] / (2.0 * v));
        });
    }

    // mean of -log softmax(logits_r)[targets_r] over rows with weight > 0,
    // weighted and normalized by total weight
    Ref cross_entropy_rows(Ref logits, std::vector<int> targets, std::vector<T> weights) {
        const auto& vl = value(logits);
        int R = vl.rows(), C = vl.cols();
        if (static_cast<int>(targets.size()) != R || static_cast<int>(weights.size()) != R)
            throw std::invalid_argument("cross_entropy_rows: row mismatch");
        double wtot = 0;
        for (T w : weights) wtot += w;
        if (wtot <= 0) throw std::invalid_argument("cross_entropy_rows: zero total weight");
        double loss = 0;
        for (int r = 0; r < R; ++r) {
            if (weights[static_cast<size_t>(r)] == T(0)) continue;
            int tgt = targets[static_cast<size_t>(r)];
            if (tgt < 0 || tgt >= C) throw std::out_of_range("cross_entropy_rows: target id");
            double mx = -1e300;
            for (int c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(vl.at(r, c)));
            double z = 0;
            for (int c = 0; c < C; ++c) z += std::exp(static_cast<double>(vl.at(r, c)) - mx);
            loss += weights[static_cast<size_t>(r)] *
                    (std::log(z) + mx - static_cast<double>(vl.at(r, tgt)));
        }
        loss /= wtot;
        return push(Tensor<T>::scalar(static_cast<T>(loss)), wants(logits),
                    [logits, targets = std::move(targets), weights = std::move(weights), wtot, R,
                     C](Tape& t, Ref me) {
            if (!t.wants(logits)) return;
            T gl = t.nodes_[me].grad.data[0];
            const auto& vl2 = t.value(logits);
            auto& g = t.grad_buf(logits);
            for (int r = 0; r < R; ++r) {
                double w = weights[static_cast<size_t>(r)];
                if (w == 0) continue;
                double mx = -1e300;
                for (int c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(vl2.at(r, c)));
                double z = 0;
                for (int c = 0; c < C; ++c) z += std::exp(static_cast<double>(vl2.at(r, c)) - mx);
                double coef = static_cast<double>(gl) * w / wtot;
                for (int c = 0; c < C; ++c) {
                    double p = std::exp(static_cast<double>(vl2.at(r, c)) - mx) / z;
                    double oneh = (c == targets[static_cast<size_t>(r)]) ? 1.0 : 0.0;
                    g.at(r, c) += static_cast<T>(coef * (p - oneh));
                }
            }
        });
    }

    // ---- flow control ----

    Ref stop_gradient(Ref a) {
        return push(value(a), false, nullptr);
    }

    // forward takes the given value (e.g. quantized slots); backward copies the
    // incoming gradient unchanged onto src
    Ref straight_through(Ref src, Tensor<T> forward_value) {
        if (!value(src).same_shape(forward_value))
            throw std::invalid_argument("straight_through: shape mismatch");
        return push(std::move(forward_value), wants(src), [src](Tape& t, Ref me) {
            t.accum(src, t.nodes_[me].grad.data.data());
        });
    }

    Ref dropout(Ref a, double p, Rng& rng) {
        if (p <= 0.0) return a;
        const auto& va = value(a);
        std::vector<T> mask(va.data.size());
        double keep = 1.0 - p;
        for (auto& m : mask) m = (rng.next_double() < keep) ? static_cast<T>(1.0 / keep) : T(0);
        Tensor<T> out = va;
        for (int64_t i = 0; i < out.size(); ++i) out.data[i] *= mask[static_cast<size_t>(i)];
        return push(std::move(out), wants(a), [a, mask = std::move(mask)](Tape& t, Ref me) {
            if (!t.wants(a)) return;
            const auto& g = t.nodes_[me].grad;
            auto& ga = t.grad_buf(a);
            for (int64_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * mask[static_cast<size_t>(i)];
        });
    }

    // ---- backward ----

    void backward(Ref loss) {
        if (value(loss).size() != 1)
            throw std::invalid_argument("backward: loss must be a scalar");
        grad_buf(loss).data[0] = T(1);
        for (int32_t i = loss; i >= 0; --i) {
            auto& n = nodes_[static_cast<size_t>(i)];
            if (!n.back || !n.needs_grad || n.grad.data.empty()) continue;
            n.back(*this, i);
        }
    }

private:
    struct Node {
        Tensor<T> val;
        Tensor<T> grad;  // lazily allocated
        bool needs_grad = false;
        std::function<void(Tape&, Ref)> back;
    };

    static constexpr double kCd = 0.7978845608028654;

    std::vector<Node> nodes_;

    bool wants(Ref r) const { return nodes_[static_cast<size_t>(r)].needs_grad; }

    void check_same_shape(Ref a, Ref b, const char* op) const {
        if (!value(a).same_shape(value(b)))
            throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                        shape_str(value(a).shape) + " vs " +
                                        shape_str(value(b).shape));
    }

    Tensor<T>& grad_buf(Ref r) {
        auto& n = nodes_[static_cast<size_t>(r)];
        if (n.grad.data.empty()) n.grad = Tensor<T>(n.val.shape);
        return n.grad;
    }

    void accum(Ref r, const T* g) {
        if (!wants(r)) return;
        auto& buf = grad_buf(r);
        for (int64_t i = 0; i < buf.size(); ++i) buf.data[i] += g[i];
    }

    Ref push(Tensor<T> v, bool needs_grad, std::function<void(Tape&, Ref)> back) {
        Node n;
        n.val = std::move(v);
        n.needs_grad = needs_grad;
        n.back = std::move(back);
        nodgrow();
        nodes_.push_back(std::move(n));
        return static_cast<Ref>(nodes_.size() - 1);
    }

    void nodgrow() {
        if (nodes_.capacity() == nodes_.size()) nodes_.reserve(nodes_.size() * 2 + 64);
    }

    static CMapM cmap(const Tensor<T>& t) { return CMapM(t.data.data(), t.rows(), t.cols()); }
};

}  // namespace iclp
