#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "fieldseg/autograd.hpp"
#include "fieldseg/lora.hpp"
#include "fieldseg/nn.hpp"
#include "fieldseg/prompting.hpp"

namespace fieldseg {

enum class Preset { tiny, vit_b };

std::string preset_name(Preset p);
Preset preset_from_name(const std::string& name);

/// Geometry of the three-part model. `tiny` exists for tests (random init,
/// small shapes); `vit_b` mirrors the published base geometry.
struct ModelConfig {
    Preset preset = Preset::tiny;
    int encoder_blocks = 2;
    int encoder_width = 32;
    int encoder_heads = 2;
    int image_size = 64;
    int patch_size = 16;
    int decoder_blocks = 1;
    int decoder_width = 32;
    int decoder_heads = 2;
    int masks_per_prompt = 3;
    std::array<float, 3> pixel_mean = {123.675f, 116.28f, 103.53f};
    std::array<float, 3> pixel_std = {58.395f, 57.12f, 57.375f};

    static ModelConfig tiny();
    static ModelConfig vit_b();
    static ModelConfig from_preset(Preset p);

    void validate() const;
    int grid_side() const { return image_size / patch_size; }
    int num_tokens() const { return grid_side() * grid_side(); }
};

/// Output of the image encoder: the pre-neck token grid plus the projected
/// embedding the mask decoder consumes.
struct ImageTokens {
    ag::Var tokens;     // [grid_h * grid_w, encoder_width]
    ag::Var embedding;  // [grid_h * grid_w, decoder_width]
    int grid_h = 0;
    int grid_w = 0;
    int image_size = 0;
    int decoder_width = 0;
};

struct PromptEmbedding {
    ag::Var embeddings;  // [n_points, decoder_width]
    int n_points = 0;
    int decoder_width = 0;
};

/// Per-prompt triple of mask logit maps (image resolution) and predicted
/// IoU scores in [0, 1]. Masks binarize at logit > 0.
struct MaskOutput {
    std::array<ag::Tensor, 3> masks;  // each [image, image]
    std::array<float, 3> iou_scores{0, 0, 0};
};

/// Training-path prediction with the graph still attached.
struct MaskPrediction {
    std::array<ag::Var, 3> mask_logits;  // each [image, image]
    std::array<ag::Var, 3> iou_pred;     // each scalar, sigmoid-activated
};

enum class DecoderMode { frozen, full, lora };

std::string decoder_mode_name(DecoderMode m);
DecoderMode decoder_mode_from_name(const std::string& name);

/// Fine-tune layout: the encoder is LoRA-adapted, the prompt encoder is
/// always frozen, the decoder follows `decoder`.
struct FinetuneMode {
    DecoderMode decoder = DecoderMode::frozen;
};

class Segmenter {
public:
    Segmenter(const ModelConfig& cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    nn::ParamRegistry& params() { return reg_; }
    const nn::ParamRegistry& params() const { return reg_; }

    /// image: [H, W, 3] float tensor, already normalized, exactly the native size.
    ImageTokens encode_image(const ag::Tensor& image) const;

    /// One spatial embedding per labeled point. Frozen path: output carries no graph.
    PromptEmbedding encode_prompts(const prompting::PromptSet& prompts) const;

    /// Inference path (no graph): 3 masks + 3 IoU scores per prompt, order preserved.
    std::vector<MaskOutput> decode_masks(const ImageTokens& tokens,
                                         const std::vector<PromptEmbedding>& prompts) const;

    /// Training path: keeps the autograd graph alive.
    MaskPrediction decode_for_training(const ImageTokens& tokens,
                                       const PromptEmbedding& prompt) const;

    /// Applies the fine-tune layout: freezes everything, injects encoder
    /// (and optionally decoder) LoRA, unfreezes per mode. One-shot.
    void configure_finetune(const FinetuneMode& mode, const lora::LoraSpec& spec);
    bool finetune_configured() const { return configured_; }
    const FinetuneMode& finetune_mode() const { return mode_; }
    const lora::LoraSpec& lora_spec() const { return spec_; }

    /// All attention projection linears by parameter-key prefix
    /// (e.g. "encoder.block0.attn.q"). Used by LoRA injection.
    std::vector<std::pair<std::string, nn::Linear*>> attention_projections();

    /// Folds every attached adapter into its base weight (merged-weight export).
    void merge_all_lora();

    bool has_any_lora() const;

    uint64_t seed() const { return seed_; }

private:
    struct EncoderBlock {
        nn::LayerNorm norm1, norm2;
        nn::MultiheadAttention attn;
        nn::Mlp mlp;
    };
    struct DecoderBlock {
        nn::MultiheadAttention self_attn, cross_t2i, cross_i2t;
        nn::LayerNorm norm1, norm2, norm3, norm4;
        nn::Mlp mlp;
    };
    struct HyperMlp {
        nn::Linear fc1, fc2, fc3;
    };

    ag::Var image_to_patches(const ag::Tensor& image) const;
    ag::Var neck(const ag::Var& tokens) const;
    ag::Tensor point_embedding_raw(float x, float y) const;
    ag::Var upscale_embedding(const ag::Var& img) const;
    ag::Var hyper_forward(const HyperMlp& m, const ag::Var& x) const;
    ag::Var iou_head_forward(const ag::Var& x) const;

    ModelConfig cfg_;
    nn::ParamRegistry reg_;
    uint64_t seed_ = 0;

    // encoder
    nn::Linear patch_embed_;
    ag::Var pos_embed_;
    std::vector<EncoderBlock> enc_blocks_;
    nn::Linear neck_conv1_;
    nn::LayerNorm neck_norm1_;
    nn::Linear neck_conv2_;
    nn::LayerNorm neck_norm2_;

    // prompt encoder (always frozen)
    ag::Var pe_gauss_;    // [2, decoder_width/2]
    ag::Var label_pos_;   // [1, decoder_width]
    ag::Var label_neg_;   // [1, decoder_width]

    // decoder
    ag::Var iou_token_;    // [1, decoder_width]
    ag::Var mask_tokens_;  // [4, decoder_width]
    std::vector<DecoderBlock> dec_blocks_;
    nn::MultiheadAttention final_attn_;
    nn::LayerNorm norm_final_;
    nn::Linear upscale1_;  // expands to 4x channels, depth-to-space doubles the grid
    nn::LayerNorm upscale_norm_;
    nn::Linear upscale2_;
    std::vector<HyperMlp> hyper_mlps_;  // one per mask token
    HyperMlp iou_head_;

    // cached index maps
    std::shared_ptr<std::vector<int64_t>> patchify_index_;
    std::shared_ptr<std::vector<int64_t>> neck_im2col_index_;
    std::shared_ptr<std::vector<int64_t>> d2s1_index_, d2s2_index_;
    ag::Var dense_pe_;  // cached constant

    bool configured_ = false;
    FinetuneMode mode_;
    lora::LoraSpec spec_;
};

}  // namespace fieldseg
