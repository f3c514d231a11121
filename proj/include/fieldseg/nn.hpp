#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>

#include "fieldseg/autograd.hpp"

namespace fieldseg::nn {

using ag::Tensor;
using ag::Var;

/// Owns every named parameter of a model. Iteration order is the name order,
/// which keeps serialization and parameter audits deterministic.
class ParamRegistry {
public:
    Var create(const std::string& name, Tensor init, bool trainable = false);
    Var get(const std::string& name) const;
    bool has(const std::string& name) const;
    void remove(const std::string& name);
    const std::map<std::string, Var>& all() const { return params_; }

    void freeze_all();
    void set_trainable_prefix(const std::string& prefix, bool trainable);
    int64_t count_trainable() const;

private:
    std::map<std::string, Var> params_;
};

/// Low-rank adapter state attached to a Linear: delta = scaling * B * A.
struct LoraAdapter {
    Var A;  // [rank, in]
    Var B;  // [out, rank]
    float scaling = 1.0f;
    int rank = 0;
};

class Linear {
public:
    Linear() = default;
    Linear(ParamRegistry& reg, std::string name, int64_t out_features, int64_t in_features,
           std::mt19937& rng, bool with_bias = true, float init_std = 0.02f);

    Var forward(const Var& x) const;

    void attach_lora(ParamRegistry& reg, int rank, float scaling, std::mt19937& rng);
    void detach_lora(ParamRegistry& reg);
    bool has_lora() const { return adapter_.has_value(); }
    const LoraAdapter& adapter() const { return *adapter_; }
    /// Folds the adapter delta into the base weight and drops the adapter.
    void merge_lora(ParamRegistry& reg);

    const std::string& name() const { return name_; }
    int64_t out_features() const { return out_; }
    int64_t in_features() const { return in_; }
    Var weight() const { return weight_; }
    Var bias() const { return bias_; }

private:
    std::string name_;
    int64_t out_ = 0, in_ = 0;
    Var weight_;  // [out, in]
    Var bias_;    // [out] or null
    std::optional<LoraAdapter> adapter_;
};

struct LayerNorm {
    LayerNorm() = default;
    LayerNorm(ParamRegistry& reg, const std::string& name, int64_t dim);
    Var forward(const Var& x) const { return ag::layer_norm(x, gamma, beta); }
    Var gamma, beta;
};

enum class Activation { gelu, relu };

struct Mlp {
    Mlp() = default;
    Mlp(ParamRegistry& reg, const std::string& name, int64_t dim, int64_t hidden,
        std::mt19937& rng, Activation act = Activation::gelu);
    Var forward(const Var& x) const;
    Linear fc1, fc2;
    Activation act = Activation::gelu;
};

/// Multi-head attention with optional internal downsampling
/// (projection dim < embedding dim, as in cross-attention decoders).
struct MultiheadAttention {
    MultiheadAttention() = default;
    MultiheadAttention(ParamRegistry& reg, const std::string& name, int64_t embed_dim,
                       int64_t internal_dim, int heads, std::mt19937& rng);
    /// q_in [nq, embed], k_in/v_in [nk, embed] -> [nq, embed]
    Var forward(const Var& q_in, const Var& k_in, const Var& v_in) const;
    Linear q, k, v, proj;
    int heads = 1;
    int64_t internal_dim = 0;
};

}  // namespace fieldseg::nn
