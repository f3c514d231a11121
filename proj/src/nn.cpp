#include "fieldseg/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace fieldseg::nn {

Var ParamRegistry::create(const std::string& name, Tensor init, bool trainable) {
    if (params_.count(name)) {
        throw std::invalid_argument("ParamRegistry: duplicate parameter '" + name + "'");
    }
    Var v = ag::make_leaf(std::move(init), trainable, name);
    params_[name] = v;
    return v;
}

Var ParamRegistry::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw std::invalid_argument("ParamRegistry: unknown parameter '" + name + "'");
    }
    return it->second;
}

bool ParamRegistry::has(const std::string& name) const { return params_.count(name) > 0; }

void ParamRegistry::remove(const std::string& name) { params_.erase(name); }

void ParamRegistry::freeze_all() {
    for (auto& [k, v] : params_) v->requires_grad = false;
}

void ParamRegistry::set_trainable_prefix(const std::string& prefix, bool trainable) {
    for (auto& [k, v] : params_) {
        if (k.rfind(prefix, 0) == 0) v->requires_grad = trainable;
    }
}

int64_t ParamRegistry::count_trainable() const {
    int64_t n = 0;
    for (const auto& [k, v] : params_) {
        if (v->requires_grad) n += v->value.numel();
    }
    return n;
}

Linear::Linear(ParamRegistry& reg, std::string name, int64_t out_features, int64_t in_features,
               std::mt19937& rng, bool with_bias, float init_std)
    : name_(std::move(name)), out_(out_features), in_(in_features) {
    Tensor w({out_, in_});
    ag::fill_normal(w, rng, 0.0f, init_std);
    weight_ = reg.create(name_ + ".w", std::move(w));
    if (with_bias) {
        bias_ = reg.create(name_ + ".b", Tensor({out_}));
    }
}

Var Linear::forward(const Var& x) const {
    Var y = bias_ ? ag::linear(x, weight_, bias_) : ag::linear_nobias(x, weight_);
    if (adapter_) {
        // low-rank path: two small products, the dense delta is never formed
        Var low = ag::linear_nobias(ag::linear_nobias(x, adapter_->A), adapter_->B);
        y = ag::add(y, adapter_->scaling == 1.0f ? low : ag::scale(low, adapter_->scaling));
    }
    return y;
}

void Linear::attach_lora(ParamRegistry& reg, int rank, float scaling, std::mt19937& rng) {
    if (adapter_) {
        throw std::invalid_argument("Linear '" + name_ + "': LoRA adapter already attached");
    }
    if (rank < 1 || rank >= std::min(out_, in_)) {
        throw std::invalid_argument("Linear '" + name_ + "': rank " + std::to_string(rank) +
                                    " must be in [1, min(" + std::to_string(out_) + "," +
                                    std::to_string(in_) + "))");
    }
    Tensor a({rank, in_});
    ag::fill_normal(a, rng, 0.0f, 0.02f);
    LoraAdapter ad;
    ad.A = reg.create(name_ + ".lora_A", std::move(a), true);
    ad.B = reg.create(name_ + ".lora_B", Tensor({out_, rank}), true);  // zero: delta is 0 at init
    ad.scaling = scaling;
    ad.rank = rank;
    adapter_ = std::move(ad);
}

void Linear::detach_lora(ParamRegistry& reg) {
    if (!adapter_) return;
    reg.remove(name_ + ".lora_A");
    reg.remove(name_ + ".lora_B");
    adapter_.reset();
}

void Linear::merge_lora(ParamRegistry& reg) {
    if (!adapter_) return;
    const Tensor& a = adapter_->A->value;  // [r, in]
    const Tensor& b = adapter_->B->value;  // [out, r]
    Tensor& w = weight_->value;
    const int64_t r = a.dim(0);
    for (int64_t i = 0; i < out_; ++i) {
        for (int64_t j = 0; j < in_; ++j) {
            float acc = 0.0f;
            for (int64_t q = 0; q < r; ++q) acc += b.at(i, q) * a.at(q, j);
            w.at(i, j) += adapter_->scaling * acc;
        }
    }
    detach_lora(reg);
}

LayerNorm::LayerNorm(ParamRegistry& reg, const std::string& name, int64_t dim) {
    gamma = reg.create(name + ".g", Tensor::full({dim}, 1.0f));
    beta = reg.create(name + ".b", Tensor({dim}));
}

Mlp::Mlp(ParamRegistry& reg, const std::string& name, int64_t dim, int64_t hidden,
         std::mt19937& rng, Activation activation)
    : fc1(reg, name + ".fc1", hidden, dim, rng),
      fc2(reg, name + ".fc2", dim, hidden, rng),
      act(activation) {}

Var Mlp::forward(const Var& x) const {
    Var h = fc1.forward(x);
    h = act == Activation::gelu ? ag::gelu(h) : ag::relu(h);
    return fc2.forward(h);
}

MultiheadAttention::MultiheadAttention(ParamRegistry& reg, const std::string& name,
                                       int64_t embed_dim, int64_t internal, int n_heads,
                                       std::mt19937& rng)
    : q(reg, name + ".q", internal, embed_dim, rng),
      k(reg, name + ".k", internal, embed_dim, rng),
      v(reg, name + ".v", internal, embed_dim, rng),
      proj(reg, name + ".proj", embed_dim, internal, rng),
      heads(n_heads),
      internal_dim(internal) {
    if (internal % n_heads != 0) {
        throw std::invalid_argument("MultiheadAttention '" + name +
                                    "': internal dim not divisible by head count");
    }
}

Var MultiheadAttention::forward(const Var& q_in, const Var& k_in, const Var& v_in) const {
    Var qp = q.forward(q_in);
    Var kp = k.forward(k_in);
    Var vp = v.forward(v_in);
    const int64_t dh = internal_dim / heads;
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Var> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Var qh = ag::slice_cols(qp, h * dh, (h + 1) * dh);
        Var kh = ag::slice_cols(kp, h * dh, (h + 1) * dh);
        Var vh = ag::slice_cols(vp, h * dh, (h + 1) * dh);
        Var scores = ag::scale(ag::matmul(qh, ag::transpose(kh)), inv_sqrt_dh);
        outs.push_back(ag::matmul(ag::softmax_rows(scores), vh));
    }
    Var merged = heads == 1 ? outs[0] : ag::concat_cols(outs);
    return proj.forward(merged);
}

}  // namespace fieldseg::nn
