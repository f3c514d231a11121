#include "fieldseg/segmenter.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fieldseg {

using ag::Tensor;
using ag::Var;

std::string preset_name(Preset p) { return p == Preset::tiny ? "tiny" : "vit_b"; }

Preset preset_from_name(const std::string& name) {
    if (name == "tiny") return Preset::tiny;
    if (name == "vit_b") return Preset::vit_b;
    throw std::invalid_argument("unknown preset '" + name + "' (expected tiny or vit_b)");
}

std::string decoder_mode_name(DecoderMode m) {
    switch (m) {
        case DecoderMode::frozen: return "frozen";
        case DecoderMode::full: return "full";
        case DecoderMode::lora: return "lora";
    }
    return "?";
}

DecoderMode decoder_mode_from_name(const std::string& name) {
    if (name == "frozen") return DecoderMode::frozen;
    if (name == "full") return DecoderMode::full;
    if (name == "lora") return DecoderMode::lora;
    throw std::invalid_argument("unknown decoder mode '" + name + "'");
}

ModelConfig ModelConfig::tiny() {
    ModelConfig c;
    c.preset = Preset::tiny;
    c.encoder_blocks = 2;
    c.encoder_width = 32;
    c.encoder_heads = 2;
    c.image_size = 64;
    c.patch_size = 16;
    c.decoder_blocks = 1;
    c.decoder_width = 32;
    c.decoder_heads = 2;
    return c;
}

ModelConfig ModelConfig::vit_b() {
    ModelConfig c;
    c.preset = Preset::vit_b;
    c.encoder_blocks = 12;
    c.encoder_width = 768;
    c.encoder_heads = 12;
    c.image_size = 1024;
    c.patch_size = 16;
    c.decoder_blocks = 2;
    c.decoder_width = 256;
    c.decoder_heads = 8;
    return c;
}

ModelConfig ModelConfig::from_preset(Preset p) {
    return p == Preset::tiny ? tiny() : vit_b();
}

void ModelConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0) throw std::invalid_argument("ModelConfig: bad sizes");
    if (image_size % patch_size != 0) {
        throw std::invalid_argument("ModelConfig: image_size must be divisible by patch_size");
    }
    if (masks_per_prompt != 3) {
        throw std::invalid_argument("ModelConfig: masks_per_prompt must be 3");
    }
    if (encoder_blocks < 1 || decoder_blocks < 1) {
        throw std::invalid_argument("ModelConfig: block counts must be >= 1");
    }
    if (encoder_width % encoder_heads != 0) {
        throw std::invalid_argument("ModelConfig: encoder width not divisible by heads");
    }
    if (decoder_width % 8 != 0) {
        throw std::invalid_argument("ModelConfig: decoder width must be divisible by 8");
    }
    if (decoder_width % decoder_heads != 0 || (decoder_width / 2) % decoder_heads != 0) {
        throw std::invalid_argument("ModelConfig: decoder width not divisible by heads");
    }
}

namespace {

std::shared_ptr<std::vector<int64_t>> build_patchify_index(int image, int patch) {
    const int grid = image / patch;
    const int cols = patch * patch * 3;
    auto idx = std::make_shared<std::vector<int64_t>>(
        static_cast<size_t>(grid) * grid * cols);
    size_t o = 0;
    for (int pi = 0; pi < grid; ++pi) {
        for (int pj = 0; pj < grid; ++pj) {
            for (int dy = 0; dy < patch; ++dy) {
                for (int dx = 0; dx < patch; ++dx) {
                    for (int c = 0; c < 3; ++c) {
                        int64_t y = static_cast<int64_t>(pi) * patch + dy;
                        int64_t x = static_cast<int64_t>(pj) * patch + dx;
                        (*idx)[o++] = (y * image + x) * 3 + c;
                    }
                }
            }
        }
    }
    return idx;
}

std::shared_ptr<std::vector<int64_t>> build_im2col3x3_index(int gh, int gw, int channels) {
    auto idx = std::make_shared<std::vector<int64_t>>(
        static_cast<size_t>(gh) * gw * 9 * channels);
    size_t o = 0;
    for (int y = 0; y < gh; ++y) {
        for (int x = 0; x < gw; ++x) {
            for (int ky = -1; ky <= 1; ++ky) {
                for (int kx = -1; kx <= 1; ++kx) {
                    int sy = y + ky, sx = x + kx;
                    bool in = sy >= 0 && sy < gh && sx >= 0 && sx < gw;
                    for (int c = 0; c < channels; ++c) {
                        (*idx)[o++] = in ? (static_cast<int64_t>(sy) * gw + sx) * channels + c : -1;
                    }
                }
            }
        }
    }
    return idx;
}

// in: [h*w, 4*ch] with feature order (dy, dx, c); out: [2h*2w, ch]
std::shared_ptr<std::vector<int64_t>> build_depth_to_space_index(int h, int w, int ch) {
    auto idx = std::make_shared<std::vector<int64_t>>(
        static_cast<size_t>(4) * h * w * ch);
    size_t o = 0;
    for (int oy = 0; oy < 2 * h; ++oy) {
        for (int ox = 0; ox < 2 * w; ++ox) {
            int i = oy / 2, di = oy % 2;
            int j = ox / 2, dj = ox % 2;
            int64_t row = static_cast<int64_t>(i) * w + j;
            for (int c = 0; c < ch; ++c) {
                (*idx)[o++] = row * (4 * ch) + (di * 2 + dj) * ch + c;
            }
        }
    }
    return idx;
}

}  // namespace

Segmenter::Segmenter(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    std::mt19937 rng(static_cast<uint32_t>(seed ^ (seed >> 32)));
    const int W = cfg_.encoder_width;
    const int C = cfg_.decoder_width;
    const int gh = cfg_.grid_side();
    const int n_tokens = cfg_.num_tokens();

    // ---- image encoder ----
    patch_embed_ = nn::Linear(reg_, "encoder.patch_embed", W,
                              cfg_.patch_size * cfg_.patch_size * 3, rng);
    Tensor pe({n_tokens, W});
    ag::fill_normal(pe, rng, 0.0f, 0.02f);
    pos_embed_ = reg_.create("encoder.pos_embed", std::move(pe));
    enc_blocks_.reserve(static_cast<size_t>(cfg_.encoder_blocks));
    for (int i = 0; i < cfg_.encoder_blocks; ++i) {
        std::string base = "encoder.block" + std::to_string(i);
        EncoderBlock b;
        b.norm1 = nn::LayerNorm(reg_, base + ".norm1", W);
        b.attn = nn::MultiheadAttention(reg_, base + ".attn", W, W, cfg_.encoder_heads, rng);
        b.norm2 = nn::LayerNorm(reg_, base + ".norm2", W);
        b.mlp = nn::Mlp(reg_, base + ".mlp", W, 4 * W, rng);
        enc_blocks_.push_back(std::move(b));
    }
    neck_conv1_ = nn::Linear(reg_, "encoder.neck.conv1", C, W, rng, /*with_bias=*/false);
    neck_norm1_ = nn::LayerNorm(reg_, "encoder.neck.norm1", C);
    neck_conv2_ = nn::Linear(reg_, "encoder.neck.conv2", C, 9 * C, rng, /*with_bias=*/false);
    neck_norm2_ = nn::LayerNorm(reg_, "encoder.neck.norm2", C);

    // ---- prompt encoder ----
    Tensor gauss({2, C / 2});
    ag::fill_normal(gauss, rng, 0.0f, 1.0f);
    pe_gauss_ = reg_.create("prompt_encoder.pe_gauss", std::move(gauss));
    Tensor lp({1, C}), ln({1, C});
    ag::fill_normal(lp, rng, 0.0f, 0.02f);
    ag::fill_normal(ln, rng, 0.0f, 0.02f);
    label_pos_ = reg_.create("prompt_encoder.label_pos", std::move(lp));
    label_neg_ = reg_.create("prompt_encoder.label_neg", std::move(ln));

    // ---- mask decoder ----
    Tensor iou_t({1, C}), mask_t({4, C});
    ag::fill_normal(iou_t, rng, 0.0f, 0.02f);
    ag::fill_normal(mask_t, rng, 0.0f, 0.02f);
    iou_token_ = reg_.create("decoder.iou_token", std::move(iou_t));
    mask_tokens_ = reg_.create("decoder.mask_tokens", std::move(mask_t));
    for (int i = 0; i < cfg_.decoder_blocks; ++i) {
        std::string base = "decoder.block" + std::to_string(i);
        DecoderBlock b;
        b.self_attn = nn::MultiheadAttention(reg_, base + ".self_attn", C, C,
                                             cfg_.decoder_heads, rng);
        b.norm1 = nn::LayerNorm(reg_, base + ".norm1", C);
        b.cross_t2i = nn::MultiheadAttention(reg_, base + ".cross_t2i", C, C / 2,
                                             cfg_.decoder_heads, rng);
        b.norm2 = nn::LayerNorm(reg_, base + ".norm2", C);
        b.mlp = nn::Mlp(reg_, base + ".mlp", C, 8 * C, rng);
        b.norm3 = nn::LayerNorm(reg_, base + ".norm3", C);
        b.cross_i2t = nn::MultiheadAttention(reg_, base + ".cross_i2t", C, C / 2,
                                             cfg_.decoder_heads, rng);
        b.norm4 = nn::LayerNorm(reg_, base + ".norm4", C);
        dec_blocks_.push_back(std::move(b));
    }
    final_attn_ = nn::MultiheadAttention(reg_, "decoder.final_attn", C, C / 2,
                                         cfg_.decoder_heads, rng);
    norm_final_ = nn::LayerNorm(reg_, "decoder.norm_final", C);
    upscale1_ = nn::Linear(reg_, "decoder.upscale.deconv1", 4 * (C / 4), C, rng);
    upscale_norm_ = nn::LayerNorm(reg_, "decoder.upscale.norm", C / 4);
    upscale2_ = nn::Linear(reg_, "decoder.upscale.deconv2", 4 * (C / 8), C / 4, rng);
    hyper_mlps_.reserve(4);
    for (int i = 0; i < 4; ++i) {
        std::string base = "decoder.hyper" + std::to_string(i);
        HyperMlp m{nn::Linear(reg_, base + ".fc1", C, C, rng),
                   nn::Linear(reg_, base + ".fc2", C, C, rng),
                   nn::Linear(reg_, base + ".fc3", C / 8, C, rng)};
        hyper_mlps_.push_back(std::move(m));
    }
    iou_head_ = HyperMlp{nn::Linear(reg_, "decoder.iou_head.fc1", C, C, rng),
                         nn::Linear(reg_, "decoder.iou_head.fc2", C, C, rng),
                         nn::Linear(reg_, "decoder.iou_head.fc3", 4, C, rng)};

    // ---- cached index maps & dense positional encoding ----
    patchify_index_ = build_patchify_index(cfg_.image_size, cfg_.patch_size);
    neck_im2col_index_ = build_im2col3x3_index(gh, gh, C);
    d2s1_index_ = build_depth_to_space_index(gh, gh, C / 4);
    d2s2_index_ = build_depth_to_space_index(2 * gh, 2 * gh, C / 8);

    Tensor dpe({n_tokens, C});
    for (int ty = 0; ty < gh; ++ty) {
        for (int tx = 0; tx < gh; ++tx) {
            float px = (static_cast<float>(tx) + 0.5f) * cfg_.patch_size;
            float py = (static_cast<float>(ty) + 0.5f) * cfg_.patch_size;
            Tensor e = point_embedding_raw(px, py);
            for (int c = 0; c < C; ++c) dpe.at(ty * gh + tx, c) = e[c];
        }
    }
    dense_pe_ = ag::constant(std::move(dpe));

    // inference is the default posture; training requires configure_finetune
    reg_.freeze_all();
}

Tensor Segmenter::point_embedding_raw(float x, float y) const {
    const int C = cfg_.decoder_width;
    const float s = static_cast<float>(cfg_.image_size);
    const float tx = 2.0f * (x / s) - 1.0f;
    const float ty = 2.0f * (y / s) - 1.0f;
    Tensor out({C});
    constexpr float k2pi = 2.0f * std::numbers::pi_v<float>;
    for (int c = 0; c < C / 2; ++c) {
        float p = k2pi * (tx * pe_gauss_->value.at(0, c) + ty * pe_gauss_->value.at(1, c));
        out[c] = std::sin(p);
        out[C / 2 + c] = std::cos(p);
    }
    return out;
}

Var Segmenter::image_to_patches(const Tensor& image) const {
    const int S = cfg_.image_size;
    if (image.rank() != 3 || image.dim(0) != S || image.dim(1) != S || image.dim(2) != 3) {
        throw std::invalid_argument("encode_image: expected [" + std::to_string(S) + ", " +
                                    std::to_string(S) + ", 3] input, got " + image.shape_str());
    }
    Var img = ag::constant(image);
    const int cols = cfg_.patch_size * cfg_.patch_size * 3;
    return ag::gather(img, patchify_index_, {cfg_.num_tokens(), cols});
}

Var Segmenter::neck(const Var& tokens) const {
    Var x = neck_conv1_.forward(tokens);
    x = neck_norm1_.forward(x);
    const int gh = cfg_.grid_side();
    Var cols = ag::gather(x, neck_im2col_index_, {gh * gh, 9 * cfg_.decoder_width});
    x = neck_conv2_.forward(cols);
    return neck_norm2_.forward(x);
}

ImageTokens Segmenter::encode_image(const Tensor& image) const {
    Var x = patch_embed_.forward(image_to_patches(image));
    x = ag::add(x, pos_embed_);
    for (const auto& b : enc_blocks_) {
        Var h = b.norm1.forward(x);
        x = ag::add(x, b.attn.forward(h, h, h));
        x = ag::add(x, b.mlp.forward(b.norm2.forward(x)));
    }
    ImageTokens out;
    out.tokens = x;
    out.embedding = neck(x);
    out.grid_h = out.grid_w = cfg_.grid_side();
    out.image_size = cfg_.image_size;
    out.decoder_width = cfg_.decoder_width;
    return out;
}

PromptEmbedding Segmenter::encode_prompts(const prompting::PromptSet& prompts) const {
    if (prompts.points.empty()) {
        throw std::invalid_argument("encode_prompts: empty prompt set");
    }
    const int C = cfg_.decoder_width;
    const float s = static_cast<float>(cfg_.image_size);
    Tensor out({static_cast<int64_t>(prompts.points.size()), C});
    for (size_t i = 0; i < prompts.points.size(); ++i) {
        const auto& p = prompts.points[i];
        if (p.x < 0 || p.x > s || p.y < 0 || p.y > s) {
            throw std::invalid_argument("encode_prompts: point (" + std::to_string(p.x) + ", " +
                                        std::to_string(p.y) + ") outside image bounds");
        }
        Tensor e = point_embedding_raw(p.x, p.y);
        const Tensor& lab = p.label == prompting::PointLabel::positive ? label_pos_->value
                                                                       : label_neg_->value;
        for (int c = 0; c < C; ++c) out.at(static_cast<int64_t>(i), c) = e[c] + lab.at(0, c);
    }
    PromptEmbedding pe;
    pe.embeddings = ag::constant(std::move(out));
    pe.n_points = static_cast<int>(prompts.points.size());
    pe.decoder_width = C;
    return pe;
}

Var Segmenter::upscale_embedding(const Var& img) const {
    const int gh = cfg_.grid_side();
    const int C = cfg_.decoder_width;
    Var x = upscale1_.forward(img);
    x = ag::gather(x, d2s1_index_, {4 * gh * gh, C / 4});
    x = ag::gelu(upscale_norm_.forward(x));
    x = upscale2_.forward(x);
    x = ag::gather(x, d2s2_index_, {16 * gh * gh, C / 8});
    return ag::gelu(x);
}

Var Segmenter::hyper_forward(const HyperMlp& m, const Var& x) const {
    Var h = ag::relu(m.fc1.forward(x));
    h = ag::relu(m.fc2.forward(h));
    return m.fc3.forward(h);
}

MaskPrediction Segmenter::decode_for_training(const ImageTokens& tokens,
                                              const PromptEmbedding& prompt) const {
    if (tokens.decoder_width != cfg_.decoder_width || tokens.image_size != cfg_.image_size ||
        prompt.decoder_width != cfg_.decoder_width) {
        throw std::invalid_argument("decode_masks: tokens/prompts from a different configuration");
    }
    const int gh = cfg_.grid_side();
    Var tokens0 = ag::concat_rows({iou_token_, mask_tokens_, prompt.embeddings});
    Var q_pe = tokens0;
    Var queries = tokens0;
    Var img = tokens.embedding;

    bool first = true;
    for (const auto& b : dec_blocks_) {
        if (first) {
            queries = b.norm1.forward(ag::add(queries, b.self_attn.forward(queries, queries, queries)));
            first = false;
        } else {
            Var q = ag::add(queries, q_pe);
            queries = b.norm1.forward(ag::add(queries, b.self_attn.forward(q, q, queries)));
        }
        Var q = ag::add(queries, q_pe);
        Var k = ag::add(img, dense_pe_);
        queries = b.norm2.forward(ag::add(queries, b.cross_t2i.forward(q, k, img)));
        queries = b.norm3.forward(ag::add(queries, b.mlp.forward(queries)));
        q = ag::add(queries, q_pe);
        img = b.norm4.forward(ag::add(img, b.cross_i2t.forward(k, q, queries)));
    }
    Var q = ag::add(queries, q_pe);
    Var k = ag::add(img, dense_pe_);
    queries = norm_final_.forward(ag::add(queries, final_attn_.forward(q, k, img)));

    Var iou_out = ag::slice_rows(queries, 0, 1);
    Var up = upscale_embedding(img);  // [16*gh*gh, C/8]

    MaskPrediction pred;
    Var iou_scores = ag::sigmoid(iou_head_forward(iou_out));
    for (int m = 0; m < 3; ++m) {
        // multimask outputs come from mask tokens 1..3
        Var tok = ag::slice_rows(queries, 2 + m, 3 + m);
        Var w = hyper_forward(hyper_mlps_[static_cast<size_t>(m + 1)], tok);  // [1, C/8]
        Var logits = ag::matmul(up, ag::transpose(w));                        // [16*gh*gh, 1]
        logits = ag::reshape(logits, {4 * gh, 4 * gh});
        pred.mask_logits[static_cast<size_t>(m)] =
            ag::upsample_bilinear(logits, cfg_.image_size, cfg_.image_size);
        pred.iou_pred[static_cast<size_t>(m)] = ag::pick(iou_scores, m + 1);
    }
    return pred;
}

Var Segmenter::iou_head_forward(const Var& x) const { return hyper_forward(iou_head_, x); }

std::vector<MaskOutput> Segmenter::decode_masks(
    const ImageTokens& tokens, const std::vector<PromptEmbedding>& prompts) const {
    ag::NoGradGuard ng;
    std::vector<MaskOutput> out;
    out.reserve(prompts.size());
    for (const auto& p : prompts) {
        MaskPrediction pred = decode_for_training(tokens, p);
        MaskOutput mo;
        for (int m = 0; m < 3; ++m) {
            mo.masks[static_cast<size_t>(m)] = pred.mask_logits[static_cast<size_t>(m)]->value;
            mo.iou_scores[static_cast<size_t>(m)] = pred.iou_pred[static_cast<size_t>(m)]->value[0];
        }
        out.push_back(std::move(mo));
    }
    return out;
}

std::vector<std::pair<std::string, nn::Linear*>> Segmenter::attention_projections() {
    std::vector<std::pair<std::string, nn::Linear*>> out;
    auto push = [&out](const std::string& base, nn::MultiheadAttention& a) {
        out.emplace_back(base + ".q", &a.q);
        out.emplace_back(base + ".k", &a.k);
        out.emplace_back(base + ".v", &a.v);
        out.emplace_back(base + ".proj", &a.proj);
    };
    for (size_t i = 0; i < enc_blocks_.size(); ++i) {
        push("encoder.block" + std::to_string(i) + ".attn", enc_blocks_[i].attn);
    }
    for (size_t i = 0; i < dec_blocks_.size(); ++i) {
        std::string base = "decoder.block" + std::to_string(i);
        push(base + ".self_attn", dec_blocks_[i].self_attn);
        push(base + ".cross_t2i", dec_blocks_[i].cross_t2i);
        push(base + ".cross_i2t", dec_blocks_[i].cross_i2t);
    }
    push("decoder.final_attn", final_attn_);
    return out;
}

void Segmenter::configure_finetune(const FinetuneMode& mode, const lora::LoraSpec& spec) {
    if (configured_) {
        throw std::invalid_argument("configure_finetune: model already configured");
    }
    spec.validate();
    lora::LoraSpec effective = spec;
    const bool wants_decoder =
        spec.targets.count(lora::Target::decoder_q) || spec.targets.count(lora::Target::decoder_v);
    if (mode.decoder == DecoderMode::lora) {
        effective.targets.insert(lora::Target::decoder_q);
        effective.targets.insert(lora::Target::decoder_v);
    } else if (wants_decoder) {
        throw std::invalid_argument(
            "configure_finetune: decoder LoRA targets require decoder mode 'lora'");
    }

    reg_.freeze_all();
    if (!effective.targets.empty()) {
        lora::inject(*this, effective);
    }
    if (mode.decoder == DecoderMode::full) {
        reg_.set_trainable_prefix("decoder.", true);
    }
    // prompt encoder stays frozen in every mode
    reg_.set_trainable_prefix("prompt_encoder.", false);
    if (reg_.count_trainable() == 0) {
        throw std::invalid_argument("configure_finetune: nothing trainable in this configuration");
    }
    configured_ = true;
    mode_ = mode;
    spec_ = effective;
}

void Segmenter::merge_all_lora() {
    for (auto& [name, lin] : attention_projections()) {
        if (lin->has_lora()) lin->merge_lora(reg_);
    }
}

bool Segmenter::has_any_lora() const {
    auto* self = const_cast<Segmenter*>(this);
    for (auto& [name, lin] : self->attention_projections()) {
        if (lin->has_lora()) return true;
    }
    return false;
}

}  // namespace fieldseg
