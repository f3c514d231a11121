#pragma once

#include <array>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fieldseg/tensor.hpp"

namespace fieldseg {
class Segmenter;
}

namespace fieldseg::lora {

/// Attention projections a LoRA spec may target.
enum class Target { encoder_q, encoder_v, decoder_q, decoder_v };

std::string target_name(Target t);

struct LoraSpec {
    int rank = 8;
    std::set<Target> targets = {Target::encoder_q, Target::encoder_v};
    float scaling = 1.0f;  // multiplier on the delta path
    /// Whether the decoder's final token-to-image attention is also targeted.
    /// Off by default; the choice is recorded in run manifests.
    bool include_final_attention = false;

    void validate() const;
};

/// The (A, B) factor pair for one frozen base weight of shape (d, k).
/// delta = B * A has shape d x k; both factors are dense row-major.
struct LoraPair {
    ag::Tensor A;  // [rank, k]
    ag::Tensor B;  // [d, rank]
    std::array<int64_t, 2> base_shape{0, 0};  // (d, k)

    int rank() const { return static_cast<int>(A.dim(0)); }
};

/// Gaussian A / zero B, so the adapted function equals the base function
/// until the first optimizer step.
LoraPair init_pair(std::array<int64_t, 2> base_shape, int rank, std::mt19937& rng);

/// y = W0 x + scaling * B (A x), computed as two small products.
/// x may be a vector [k] or a batch of row vectors [n, k].
ag::Tensor lora_forward(const ag::Tensor& x, const ag::Tensor& w0, const LoraPair& pair,
                        float scaling);

/// W0 + scaling * B A.
ag::Tensor merge(const ag::Tensor& w0, const LoraPair& pair, float scaling);

/// Wraps every targeted projection of the model with a LoRA pair and flags
/// the base weights frozen. Throws if any resolved target name is missing
/// from the model or if any target already carries an adapter.
void inject(Segmenter& model, const LoraSpec& spec);

/// Projection parameter names `spec` resolves to on `model` (w-suffix names).
std::vector<std::string> resolve_targets(const Segmenter& model, const LoraSpec& spec);

/// Exact count of parameters currently flagged trainable.
int64_t count_trainable(const Segmenter& model);

}  // namespace fieldseg::lora
