#include "fieldseg/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace fieldseg::ag {

namespace {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

thread_local bool g_grad_enabled = true;

ECMap mat(const Tensor& t) { return ECMap(t.data(), t.dim(0), t.dim(1)); }
EMap mat(Tensor& t) { return EMap(t.data(), t.dim(0), t.dim(1)); }

void require_rank2(const Var& x, const char* who) {
    if (x->value.rank() != 2) {
        throw std::invalid_argument(std::string(who) + ": expected rank-2 tensor, got shape " +
                                    x->value.shape_str());
    }
}

void require_same_shape(const Var& a, const Var& b, const char* who) {
    if (!a->value.same_shape(b->value)) {
        throw std::invalid_argument(std::string(who) + ": shape mismatch " + a->value.shape_str() +
                                    " vs " + b->value.shape_str());
    }
}

bool track(const std::initializer_list<Var>& parents) {
    if (!g_grad_enabled) return false;
    for (const auto& p : parents) {
        if (p->requires_grad) return true;
    }
    return false;
}

Var make_result(Tensor value, bool tracked, std::vector<Var> parents,
                std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->is_leaf = false;
    n->requires_grad = tracked;
    if (tracked) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(bw);
    }
    return n;
}

void accumulate(Node& dst, const float* g, int64_t n) {
    Tensor& gd = dst.ensure_grad();
    float* d = gd.data();
    for (int64_t i = 0; i < n; ++i) d[i] += g[i];
}

// log(sigmoid(z)) computed stably
inline double log_sigmoid(double z) {
    return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

Var make_leaf(Tensor value, bool requires_grad, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->is_leaf = true;
    n->name = std::move(name);
    return n;
}

Var constant(Tensor value) { return make_leaf(std::move(value), false); }

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    bool t = track({a, b});
    Tensor out = a->value;
    const float* bp = b->value.data();
    float* op = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] += bp[i];
    return make_result(std::move(out), t, {a, b}, [a, b](Node& n) {
        const int64_t m = n.value.numel();
        if (a->requires_grad) accumulate(*a, n.grad.data(), m);
        if (b->requires_grad) accumulate(*b, n.grad.data(), m);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    bool t = track({a, b});
    Tensor out = a->value;
    const float* bp = b->value.data();
    float* op = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] -= bp[i];
    return make_result(std::move(out), t, {a, b}, [a, b](Node& n) {
        const int64_t m = n.value.numel();
        if (a->requires_grad) accumulate(*a, n.grad.data(), m);
        if (b->requires_grad) {
            Tensor& gd = b->ensure_grad();
            for (int64_t i = 0; i < m; ++i) gd[i] -= n.grad[i];
        }
    });
}

Var hadamard(const Var& a, const Var& b) {
    require_same_shape(a, b, "hadamard");
    bool t = track({a, b});
    Tensor out = a->value;
    const float* bp = b->value.data();
    float* op = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] *= bp[i];
    return make_result(std::move(out), t, {a, b}, [a, b](Node& n) {
        const int64_t m = n.value.numel();
        if (a->requires_grad) {
            Tensor& gd = a->ensure_grad();
            for (int64_t i = 0; i < m; ++i) gd[i] += n.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            Tensor& gd = b->ensure_grad();
            for (int64_t i = 0; i < m; ++i) gd[i] += n.grad[i] * a->value[i];
        }
    });
}

Var scale(const Var& a, float s) {
    bool t = track({a});
    Tensor out = a->value;
    float* op = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] *= s;
    return make_result(std::move(out), t, {a}, [a, s](Node& n) {
        Tensor& gd = a->ensure_grad();
        for (int64_t i = 0; i < n.value.numel(); ++i) gd[i] += s * n.grad[i];
    });
}

Var add_scalar(const Var& a, float s) {
    bool t = track({a});
    Tensor out = a->value;
    float* op = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] += s;
    return make_result(std::move(out), t, {a}, [a](Node& n) {
        accumulate(*a, n.grad.data(), n.value.numel());
    });
}

Var relu(const Var& x) {
    bool t = track({x});
    Tensor out = x->value;
    float* op = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] = op[i] > 0 ? op[i] : 0.0f;
    return make_result(std::move(out), t, {x}, [x](Node& n) {
        Tensor& gd = x->ensure_grad();
        for (int64_t i = 0; i < n.value.numel(); ++i) {
            if (x->value[i] > 0) gd[i] += n.grad[i];
        }
    });
}

Var gelu(const Var& x) {
    bool t = track({x});
    Tensor out = x->value;
    constexpr float kInvSqrt2 = 0.70710678118654752f;
    float* op = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        float v = x->value[i];
        op[i] = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
    }
    return make_result(std::move(out), t, {x}, [x](Node& n) {
        constexpr float kInvSqrt2 = 0.70710678118654752f;
        constexpr float kInvSqrt2Pi = 0.39894228040143268f;
        Tensor& gd = x->ensure_grad();
        for (int64_t i = 0; i < n.value.numel(); ++i) {
            float v = x->value[i];
            float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
            float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
            gd[i] += n.grad[i] * (cdf + v * pdf);
        }
    });
}

Var sigmoid(const Var& x) {
    bool t = track({x});
    Tensor out = x->value;
    float* op = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        op[i] = 1.0f / (1.0f + std::exp(-op[i]));
    }
    Tensor saved = out;
    return make_result(std::move(out), t, {x}, [x, saved](Node& n) {
        Tensor& gd = x->ensure_grad();
        for (int64_t i = 0; i < n.value.numel(); ++i) {
            float y = saved[i];
            gd[i] += n.grad[i] * y * (1.0f - y);
        }
    });
}

Var matmul(const Var& a, const Var& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a->value.dim(1) != b->value.dim(0)) {
        throw std::invalid_argument("matmul: inner dimension mismatch " + a->value.shape_str() +
                                    " x " + b->value.shape_str());
    }
    bool t = track({a, b});
    Tensor out({a->value.dim(0), b->value.dim(1)});
    mat(out) = mat(a->value) * mat(b->value);
    return make_result(std::move(out), t, {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor& gd = a->ensure_grad();
            mat(gd) += mat(n.grad) * mat(b->value).transpose();
        }
        if (b->requires_grad) {
            Tensor& gd = b->ensure_grad();
            mat(gd) += mat(a->value).transpose() * mat(n.grad);
        }
    });
}

Var linear_nobias(const Var& x, const Var& w) {
    require_rank2(x, "linear");
    require_rank2(w, "linear");
    if (x->value.dim(1) != w->value.dim(1)) {
        throw std::invalid_argument("linear: input dim " + x->value.shape_str() +
                                    " does not match weight " + w->value.shape_str());
    }
    bool t = track({x, w});
    Tensor out({x->value.dim(0), w->value.dim(0)});
    mat(out) = mat(x->value) * mat(w->value).transpose();
    return make_result(std::move(out), t, {x, w}, [x, w](Node& n) {
        if (x->requires_grad) {
            Tensor& gd = x->ensure_grad();
            mat(gd) += mat(n.grad) * mat(w->value);
        }
        if (w->requires_grad) {
            Tensor& gd = w->ensure_grad();
            mat(gd) += mat(n.grad).transpose() * mat(x->value);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    Var y = linear_nobias(x, w);
    if (b->value.numel() != y->value.dim(1)) {
        throw std::invalid_argument("linear: bias size mismatch");
    }
    // broadcast bias over rows
    bool t = track({y, b});
    Tensor out = y->value;
    const int64_t rows = out.dim(0), cols = out.dim(1);
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t c = 0; c < cols; ++c) out.at(r, c) += b->value[c];
    }
    return make_result(std::move(out), t, {y, b}, [y, b](Node& n) {
        const int64_t rows = n.value.dim(0), cols = n.value.dim(1);
        if (y->requires_grad) accumulate(*y, n.grad.data(), n.value.numel());
        if (b->requires_grad) {
            Tensor& gd = b->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                for (int64_t c = 0; c < cols; ++c) gd[c] += n.grad.at(r, c);
            }
        }
    });
}

Var transpose(const Var& x) {
    require_rank2(x, "transpose");
    bool t = track({x});
    Tensor out({x->value.dim(1), x->value.dim(0)});
    mat(out) = mat(x->value).transpose();
    return make_result(std::move(out), t, {x}, [x](Node& n) {
        Tensor& gd = x->ensure_grad();
        mat(gd) += mat(n.grad).transpose();
    });
}

Var softmax_rows(const Var& x) {
    require_rank2(x, "softmax_rows");
    bool t = track({x});
    Tensor out = x->value;
    {
        EMap m = mat(out);
        Eigen::VectorXf mx = m.rowwise().maxCoeff();
        m.colwise() -= mx;
        m = m.array().exp();
        Eigen::VectorXf sums = m.rowwise().sum();
        m.array().colwise() /= sums.array();
    }
    Tensor saved = out;
    return make_result(std::move(out), t, {x}, [x, saved](Node& n) {
        Tensor& gd = x->ensure_grad();
        const int64_t rows = n.value.dim(0), cols = n.value.dim(1);
        for (int64_t r = 0; r < rows; ++r) {
            float dot = 0.0f;
            for (int64_t c = 0; c < cols; ++c) dot += n.grad.at(r, c) * saved.at(r, c);
            for (int64_t c = 0; c < cols; ++c) {
                gd.at(r, c) += saved.at(r, c) * (n.grad.at(r, c) - dot);
            }
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
    require_rank2(x, "layer_norm");
    const int64_t rows = x->value.dim(0), cols = x->value.dim(1);
    if (gamma->value.numel() != cols || beta->value.numel() != cols) {
        throw std::invalid_argument("layer_norm: affine parameter size mismatch");
    }
    bool t = track({x, gamma, beta});
    Tensor out({rows, cols});
    Tensor xhat({rows, cols});
    std::vector<float> rstd(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        float mean = 0.0f;
        for (int64_t c = 0; c < cols; ++c) mean += x->value.at(r, c);
        mean /= static_cast<float>(cols);
        float var = 0.0f;
        for (int64_t c = 0; c < cols; ++c) {
            float d = x->value.at(r, c) - mean;
            var += d * d;
        }
        var /= static_cast<float>(cols);
        float rs = 1.0f / std::sqrt(var + eps);
        rstd[static_cast<size_t>(r)] = rs;
        for (int64_t c = 0; c < cols; ++c) {
            float h = (x->value.at(r, c) - mean) * rs;
            xhat.at(r, c) = h;
            out.at(r, c) = h * gamma->value[c] + beta->value[c];
        }
    }
    return make_result(std::move(out), t, {x, gamma, beta},
                       [x, gamma, beta, xhat, rstd](Node& n) {
        const int64_t rows = n.value.dim(0), cols = n.value.dim(1);
        const float inv_cols = 1.0f / static_cast<float>(cols);
        for (int64_t r = 0; r < rows; ++r) {
            // per-row reductions of dy*gamma and dy*gamma*xhat
            float sum_dg = 0.0f, sum_dgx = 0.0f;
            for (int64_t c = 0; c < cols; ++c) {
                float dg = n.grad.at(r, c) * gamma->value[c];
                sum_dg += dg;
                sum_dgx += dg * xhat.at(r, c);
            }
            if (x->requires_grad) {
                Tensor& gd = x->ensure_grad();
                float rs = rstd[static_cast<size_t>(r)];
                for (int64_t c = 0; c < cols; ++c) {
                    float dg = n.grad.at(r, c) * gamma->value[c];
                    gd.at(r, c) += rs * (dg - inv_cols * sum_dg -
                                         xhat.at(r, c) * inv_cols * sum_dgx);
                }
            }
        }
        if (gamma->requires_grad) {
            Tensor& gd = gamma->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                for (int64_t c = 0; c < cols; ++c) gd[c] += n.grad.at(r, c) * xhat.at(r, c);
            }
        }
        if (beta->requires_grad) {
            Tensor& gd = beta->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                for (int64_t c = 0; c < cols; ++c) gd[c] += n.grad.at(r, c);
            }
        }
    });
}

Var reshape(const Var& x, std::vector<int64_t> shape) {
    if (numel_of(shape) != x->value.numel()) {
        throw std::invalid_argument("reshape: element count mismatch");
    }
    bool t = track({x});
    Tensor out(std::move(shape), x->value.vec());
    return make_result(std::move(out), t, {x}, [x](Node& n) {
        accumulate(*x, n.grad.data(), n.value.numel());
    });
}

Var slice_cols(const Var& x, int64_t c0, int64_t c1) {
    require_rank2(x, "slice_cols");
    const int64_t rows = x->value.dim(0), cols = x->value.dim(1);
    if (c0 < 0 || c1 > cols || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    bool t = track({x});
    Tensor out({rows, c1 - c0});
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t c = c0; c < c1; ++c) out.at(r, c - c0) = x->value.at(r, c);
    }
    return make_result(std::move(out), t, {x}, [x, c0](Node& n) {
        Tensor& gd = x->ensure_grad();
        const int64_t rows = n.value.dim(0), w = n.value.dim(1);
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t c = 0; c < w; ++c) gd.at(r, c0 + c) += n.grad.at(r, c);
        }
    });
}

Var slice_rows(const Var& x, int64_t r0, int64_t r1) {
    require_rank2(x, "slice_rows");
    const int64_t rows = x->value.dim(0), cols = x->value.dim(1);
    if (r0 < 0 || r1 > rows || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
    bool t = track({x});
    Tensor out({r1 - r0, cols});
    std::copy(x->value.data() + r0 * cols, x->value.data() + r1 * cols, out.data());
    return make_result(std::move(out), t, {x, }, [x, r0, cols](Node& n) {
        Tensor& gd = x->ensure_grad();
        const int64_t m = n.value.numel();
        float* dst = gd.data() + r0 * cols;
        for (int64_t i = 0; i < m; ++i) dst[i] += n.grad[i];
    });
}

Var concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
    const int64_t cols = xs[0]->value.dim(1);
    int64_t rows = 0;
    bool t = false;
    for (const auto& x : xs) {
        require_rank2(x, "concat_rows");
        if (x->value.dim(1) != cols) throw std::invalid_argument("concat_rows: column mismatch");
        rows += x->value.dim(0);
        if (g_grad_enabled && x->requires_grad) t = true;
    }
    Tensor out({rows, cols});
    int64_t off = 0;
    for (const auto& x : xs) {
        std::copy(x->value.data(), x->value.data() + x->value.numel(), out.data() + off);
        off += x->value.numel();
    }
    std::vector<Var> parents = xs;
    return make_result(std::move(out), t, parents, [parents](Node& n) {
        int64_t off = 0;
        for (const auto& x : parents) {
            const int64_t m = x->value.numel();
            if (x->requires_grad) {
                Tensor& gd = x->ensure_grad();
                for (int64_t i = 0; i < m; ++i) gd[i] += n.grad[off + i];
            }
            off += m;
        }
    });
}

Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
    const int64_t rows = xs[0]->value.dim(0);
    int64_t cols = 0;
    bool t = false;
    for (const auto& x : xs) {
        require_rank2(x, "concat_cols");
        if (x->value.dim(0) != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += x->value.dim(1);
        if (g_grad_enabled && x->requires_grad) t = true;
    }
    Tensor out({rows, cols});
    int64_t coff = 0;
    for (const auto& x : xs) {
        const int64_t w = x->value.dim(1);
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t c = 0; c < w; ++c) out.at(r, coff + c) = x->value.at(r, c);
        }
        coff += w;
    }
    std::vector<Var> parents = xs;
    return make_result(std::move(out), t, parents, [parents](Node& n) {
        const int64_t rows = n.value.dim(0);
        int64_t coff = 0;
        for (const auto& x : parents) {
            const int64_t w = x->value.dim(1);
            if (x->requires_grad) {
                Tensor& gd = x->ensure_grad();
                for (int64_t r = 0; r < rows; ++r) {
                    for (int64_t c = 0; c < w; ++c) gd.at(r, c) += n.grad.at(r, coff + c);
                }
            }
            coff += w;
        }
    });
}

Var gather(const Var& x, std::shared_ptr<const std::vector<int64_t>> index,
           std::vector<int64_t> out_shape) {
    if (numel_of(out_shape) != static_cast<int64_t>(index->size())) {
        throw std::invalid_argument("gather: index size does not match output shape");
    }
    bool t = track({x});
    Tensor out(std::move(out_shape));
    const float* src = x->value.data();
    const int64_t n_in = x->value.numel();
    for (size_t i = 0; i < index->size(); ++i) {
        int64_t j = (*index)[i];
        if (j >= n_in) throw std::invalid_argument("gather: index out of range");
        out[static_cast<int64_t>(i)] = j < 0 ? 0.0f : src[j];
    }
    return make_result(std::move(out), t, {x}, [x, index](Node& n) {
        Tensor& gd = x->ensure_grad();
        for (size_t i = 0; i < index->size(); ++i) {
            int64_t j = (*index)[i];
            if (j >= 0) gd[j] += n.grad[static_cast<int64_t>(i)];
        }
    });
}

Var pick(const Var& x, int64_t flat_index) {
    if (flat_index < 0 || flat_index >= x->value.numel()) {
        throw std::invalid_argument("pick: index out of range");
    }
    bool t = track({x});
    Tensor out = Tensor::scalar(x->value[flat_index]);
    return make_result(std::move(out), t, {x}, [x, flat_index](Node& n) {
        Tensor& gd = x->ensure_grad();
        gd[flat_index] += n.grad[0];
    });
}

Var sum_all(const Var& x) {
    bool t = track({x});
    double s = 0.0;
    for (int64_t i = 0; i < x->value.numel(); ++i) s += x->value[i];
    return make_result(Tensor::scalar(static_cast<float>(s)), t, {x}, [x](Node& n) {
        Tensor& gd = x->ensure_grad();
        const float g = n.grad[0];
        for (int64_t i = 0; i < gd.numel(); ++i) gd[i] += g;
    });
}

Var mean_all(const Var& x) {
    const int64_t m = x->value.numel();
    if (m == 0) throw std::invalid_argument("mean_all: empty tensor");
    return scale(sum_all(x), 1.0f / static_cast<float>(m));
}

namespace {
struct BilinearTap {
    int64_t i00, i01, i10, i11;
    float w00, w01, w10, w11;
};

std::vector<BilinearTap> bilinear_taps(int64_t in_h, int64_t in_w, int64_t out_h, int64_t out_w) {
    std::vector<BilinearTap> taps(static_cast<size_t>(out_h * out_w));
    const float sy = static_cast<float>(in_h) / static_cast<float>(out_h);
    const float sx = static_cast<float>(in_w) / static_cast<float>(out_w);
    for (int64_t oy = 0; oy < out_h; ++oy) {
        float fy = (static_cast<float>(oy) + 0.5f) * sy - 0.5f;
        int64_t y0 = static_cast<int64_t>(std::floor(fy));
        float ty = fy - static_cast<float>(y0);
        int64_t y0c = std::clamp<int64_t>(y0, 0, in_h - 1);
        int64_t y1c = std::clamp<int64_t>(y0 + 1, 0, in_h - 1);
        for (int64_t ox = 0; ox < out_w; ++ox) {
            float fx = (static_cast<float>(ox) + 0.5f) * sx - 0.5f;
            int64_t x0 = static_cast<int64_t>(std::floor(fx));
            float tx = fx - static_cast<float>(x0);
            int64_t x0c = std::clamp<int64_t>(x0, 0, in_w - 1);
            int64_t x1c = std::clamp<int64_t>(x0 + 1, 0, in_w - 1);
            BilinearTap& tp = taps[static_cast<size_t>(oy * out_w + ox)];
            tp.i00 = y0c * in_w + x0c;
            tp.i01 = y0c * in_w + x1c;
            tp.i10 = y1c * in_w + x0c;
            tp.i11 = y1c * in_w + x1c;
            tp.w00 = (1 - ty) * (1 - tx);
            tp.w01 = (1 - ty) * tx;
            tp.w10 = ty * (1 - tx);
            tp.w11 = ty * tx;
        }
    }
    return taps;
}
}  // namespace

Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w) {
    require_rank2(x, "upsample_bilinear");
    const int64_t in_h = x->value.dim(0), in_w = x->value.dim(1);
    bool t = track({x});
    auto taps = std::make_shared<std::vector<BilinearTap>>(bilinear_taps(in_h, in_w, out_h, out_w));
    Tensor out({out_h, out_w});
    const float* src = x->value.data();
    for (size_t i = 0; i < taps->size(); ++i) {
        const BilinearTap& tp = (*taps)[i];
        out[static_cast<int64_t>(i)] = tp.w00 * src[tp.i00] + tp.w01 * src[tp.i01] +
                                       tp.w10 * src[tp.i10] + tp.w11 * src[tp.i11];
    }
    return make_result(std::move(out), t, {x}, [x, taps](Node& n) {
        Tensor& gd = x->ensure_grad();
        for (size_t i = 0; i < taps->size(); ++i) {
            const BilinearTap& tp = (*taps)[i];
            float g = n.grad[static_cast<int64_t>(i)];
            gd[tp.i00] += tp.w00 * g;
            gd[tp.i01] += tp.w01 * g;
            gd[tp.i10] += tp.w10 * g;
            gd[tp.i11] += tp.w11 * g;
        }
    });
}

Var focal_loss_with_logits(const Var& logits, const Tensor& target, float alpha, float gamma) {
    if (!logits->value.same_shape(target)) {
        throw std::invalid_argument("focal_loss: logits " + logits->value.shape_str() +
                                    " vs target " + target.shape_str());
    }
    const int64_t m = logits->value.numel();
    if (m == 0) throw std::invalid_argument("focal_loss: empty input");
    bool t = track({logits});
    double total = 0.0;
    for (int64_t i = 0; i < m; ++i) {
        double z = logits->value[i];
        double g = target[i];
        double logp = log_sigmoid(z);
        double log1mp = log_sigmoid(-z);
        double p = std::exp(logp);
        total += -g * alpha * std::pow(1.0 - p, gamma) * logp -
                 (1.0 - g) * (1.0 - alpha) * std::pow(p, gamma) * log1mp;
    }
    Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(m)));
    Tensor tgt = target;
    return make_result(std::move(out), t, {logits}, [logits, tgt, alpha, gamma](Node& n) {
        Tensor& gd = logits->ensure_grad();
        const int64_t m = logits->value.numel();
        const double gout = n.grad[0] / static_cast<double>(m);
        for (int64_t i = 0; i < m; ++i) {
            double z = logits->value[i];
            double g = tgt[i];
            double logp = log_sigmoid(z);
            double log1mp = log_sigmoid(-z);
            double p = std::exp(logp);
            double q = 1.0 - p;
            // d/dz of the positive and negative focal terms
            double dpos = alpha * (gamma * p * std::pow(q, gamma) * logp - std::pow(q, gamma + 1.0));
            double dneg = (1.0 - alpha) *
                          (std::pow(p, gamma + 1.0) - gamma * q * std::pow(p, gamma) * log1mp);
            gd[i] += static_cast<float>(gout * (g * dpos + (1.0 - g) * dneg));
        }
    });
}

Var dice_loss_with_logits(const Var& logits, const Tensor& target, float eps) {
    if (!logits->value.same_shape(target)) {
        throw std::invalid_argument("dice_loss: logits " + logits->value.shape_str() +
                                    " vs target " + target.shape_str());
    }
    const int64_t m = logits->value.numel();
    if (m == 0) throw std::invalid_argument("dice_loss: empty input");
    bool t = track({logits});
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (int64_t i = 0; i < m; ++i) {
        double p = std::exp(log_sigmoid(logits->value[i]));
        (*probs)[static_cast<size_t>(i)] = p;
        inter += p * target[i];
        psum += p;
        gsum += target[i];
    }
    const double numer = 2.0 * inter + eps;
    const double denom = psum + gsum + eps;
    Tensor out = Tensor::scalar(static_cast<float>(1.0 - numer / denom));
    Tensor tgt = target;
    return make_result(std::move(out), t, {logits}, [logits, tgt, probs, numer, denom](Node& n) {
        Tensor& gd = logits->ensure_grad();
        const int64_t m = logits->value.numel();
        const double gout = n.grad[0];
        for (int64_t i = 0; i < m; ++i) {
            double p = (*probs)[static_cast<size_t>(i)];
            // d(1 - N/D)/dp_i = -(2 g_i D - N) / D^2, then dp/dz = p (1-p)
            double dldp = -(2.0 * tgt[i] * denom - numer) / (denom * denom);
            gd[i] += static_cast<float>(gout * dldp * p * (1.0 - p));
        }
    });
}

void backward(const Var& root) {
    if (!root) throw std::invalid_argument("backward: null root");
    if (root->value.numel() != 1) {
        throw std::invalid_argument("backward: root must be scalar, got " +
                                    root->value.shape_str());
    }
    if (!root->requires_grad) return;

    // iterative post-order topological sort
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    }
}

void fill_normal(Tensor& t, std::mt19937& rng, float mean, float stddev) {
    std::normal_distribution<float> d(mean, stddev);
    for (auto& v : t.vec()) v = d(rng);
}

void fill_uniform(Tensor& t, std::mt19937& rng, float lo, float hi) {
    std::uniform_real_distribution<float> d(lo, hi);
    for (auto& v : t.vec()) v = d(rng);
}

}  // namespace fieldseg::ag
