#include "fieldseg/lora.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <stdexcept>

#include "fieldseg/segmenter.hpp"

namespace fieldseg::lora {

namespace {
using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ECMap = Eigen::Map<const EMat>;
using EMap = Eigen::Map<EMat>;

ECMap mat(const ag::Tensor& t) { return ECMap(t.data(), t.dim(0), t.dim(1)); }
}  // namespace

std::string target_name(Target t) {
    switch (t) {
        case Target::encoder_q: return "encoder_q";
        case Target::encoder_v: return "encoder_v";
        case Target::decoder_q: return "decoder_q";
        case Target::decoder_v: return "decoder_v";
    }
    return "?";
}

void LoraSpec::validate() const {
    if (rank < 1) throw std::invalid_argument("LoraSpec: rank must be >= 1");
    if (scaling <= 0.0f) throw std::invalid_argument("LoraSpec: scaling must be positive");
}

LoraPair init_pair(std::array<int64_t, 2> base_shape, int rank, std::mt19937& rng) {
    const int64_t d = base_shape[0], k = base_shape[1];
    if (rank < 1 || rank >= std::min(d, k)) {
        throw std::invalid_argument("init_pair: rank " + std::to_string(rank) +
                                    " must satisfy 1 <= rank < min(d, k) = " +
                                    std::to_string(std::min(d, k)));
    }
    LoraPair p;
    p.A = ag::Tensor({rank, k});
    ag::fill_normal(p.A, rng, 0.0f, 0.02f);
    p.B = ag::Tensor({d, rank});  // zero, so the delta vanishes at initialization
    p.base_shape = base_shape;
    return p;
}

namespace {
void check_pair(const ag::Tensor& w0, const LoraPair& pair, const char* who) {
    if (w0.rank() != 2) throw std::invalid_argument(std::string(who) + ": W0 must be a matrix");
    if (pair.base_shape[0] != w0.dim(0) || pair.base_shape[1] != w0.dim(1)) {
        throw std::invalid_argument(std::string(who) + ": pair base_shape does not match W0 " +
                                    w0.shape_str());
    }
    if (pair.A.rank() != 2 || pair.B.rank() != 2 || pair.A.dim(1) != w0.dim(1) ||
        pair.B.dim(0) != w0.dim(0) || pair.A.dim(0) != pair.B.dim(1)) {
        throw std::invalid_argument(std::string(who) + ": inconsistent factor shapes");
    }
}
}  // namespace

ag::Tensor lora_forward(const ag::Tensor& x, const ag::Tensor& w0, const LoraPair& pair,
                        float scaling) {
    check_pair(w0, pair, "lora_forward");
    const int64_t d = w0.dim(0), k = w0.dim(1);
    const bool vector_in = x.rank() == 1;
    if ((vector_in && x.dim(0) != k) || (!vector_in && (x.rank() != 2 || x.dim(1) != k))) {
        throw std::invalid_argument("lora_forward: x inner dimension does not match W0 " +
                                    w0.shape_str());
    }
    const int64_t n = vector_in ? 1 : x.dim(0);
    ECMap xm(x.data(), n, k);
    ag::Tensor out(vector_in ? std::vector<int64_t>{d} : std::vector<int64_t>{n, d});
    EMap om(out.data(), n, d);
    // base path plus the two small low-rank products; the dense delta is never formed
    om = xm * mat(w0).transpose();
    om.noalias() += scaling * ((xm * mat(pair.A).transpose()) * mat(pair.B).transpose());
    return out;
}

ag::Tensor merge(const ag::Tensor& w0, const LoraPair& pair, float scaling) {
    check_pair(w0, pair, "merge");
    ag::Tensor out = w0;
    EMap om(out.data(), w0.dim(0), w0.dim(1));
    om.noalias() += scaling * (mat(pair.B) * mat(pair.A));
    return out;
}

std::vector<std::string> resolve_targets(const Segmenter& model, const LoraSpec& spec) {
    std::vector<std::string> names;
    const auto& cfg = model.config();
    auto add_enc = [&](const char* suffix) {
        for (int i = 0; i < cfg.encoder_blocks; ++i) {
            names.push_back("encoder.block" + std::to_string(i) + ".attn." + suffix);
        }
    };
    auto add_dec = [&](const char* suffix) {
        for (int i = 0; i < cfg.decoder_blocks; ++i) {
            std::string base = "decoder.block" + std::to_string(i);
            names.push_back(base + ".self_attn." + suffix);
            names.push_back(base + ".cross_t2i." + suffix);
            names.push_back(base + ".cross_i2t." + suffix);
        }
        if (spec.include_final_attention) {
            names.push_back(std::string("decoder.final_attn.") + suffix);
        }
    };
    if (spec.targets.count(Target::encoder_q)) add_enc("q");
    if (spec.targets.count(Target::encoder_v)) add_enc("v");
    if (spec.targets.count(Target::decoder_q)) add_dec("q");
    if (spec.targets.count(Target::decoder_v)) add_dec("v");
    std::sort(names.begin(), names.end());
    return names;
}

void inject(Segmenter& model, const LoraSpec& spec) {
    spec.validate();
    if (spec.targets.empty()) {
        throw std::invalid_argument("inject: empty target set");
    }
    auto projections = model.attention_projections();
    auto find = [&projections](const std::string& name) -> nn::Linear* {
        for (auto& [n, lin] : projections) {
            if (n == name) return lin;
        }
        return nullptr;
    };

    const std::vector<std::string> wanted = resolve_targets(model, spec);
    std::string missing;
    for (const auto& name : wanted) {
        nn::Linear* lin = find(name);
        if (!lin) {
            missing += missing.empty() ? name : ", " + name;
        } else if (lin->has_lora()) {
            throw std::invalid_argument("inject: '" + name + "' already carries an adapter");
        }
    }
    if (!missing.empty()) {
        throw std::invalid_argument("inject: target projections not found in model: " + missing);
    }

    std::mt19937 rng(static_cast<uint32_t>(model.seed() ^ 0x9e3779b9u));
    for (const auto& name : wanted) {
        nn::Linear* lin = find(name);
        lin->weight()->requires_grad = false;  // base stays frozen
        lin->attach_lora(model.params(), spec.rank, spec.scaling, rng);
    }
}

int64_t count_trainable(const Segmenter& model) {
    return model.params().count_trainable();
}

}  // namespace fieldseg::lora
