#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include "fieldseg/prompting.hpp"
#include "fieldseg/segmenter.hpp"

namespace fieldseg::training {

enum class PromptMode { single, multi };

std::string prompt_mode_name(PromptMode m);
PromptMode prompt_mode_from_name(const std::string& name);

struct TrainConfig {
    double weight_decay = 5e-4;
    double peak_lr = 5e-5;
    int warmup_steps = 256;
    int batch_size = 4;
    std::string precision = "float32";  // the only accepted value
    PromptMode prompt_mode = PromptMode::single;
    FinetuneMode finetune_mode;
    int lora_rank = 8;
    double lora_scaling = 1.0;
    bool lora_include_final_attention = false;

    // segmentation loss = focal_weight * focal + dice_weight * dice
    double focal_weight = 20.0;
    double dice_weight = 1.0;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    double iou_loss_weight = 1.0;

    int max_steps = 1000;
    int checkpoint_every = 500;
    uint64_t seed = 0;
    bool augment = true;

    void validate() const;
};

/// Per-step loss summary. seg_loss is the minimum of the three per-mask
/// losses; for a batch the values are means and the index is the most
/// frequently selected one (ties -> lowest).
struct StepLoss {
    int selected_mask_index = 0;
    double seg_loss = 0.0;
    double iou_loss = 0.0;
    double total = 0.0;
};

/// Weighted focal + dice segmentation loss on mask logits vs a binary target.
ag::Var seg_loss_graph(const ag::Var& pred_logits, const ag::Tensor& gt, const TrainConfig& cfg);
double seg_loss(const ag::Tensor& pred_logits, const ag::Tensor& gt, const TrainConfig& cfg);

/// Index and value of the smallest of three finite losses; ties break to the
/// lowest index. A NaN input is a training-instability signal and throws.
std::pair<int, double> min_of_three(const std::array<double, 3>& losses);

/// |a ∩ b| / |a ∪ b| over binary masks; 1.0 when both are empty.
double iou_target(const prompting::BinaryMask& pred, const prompting::BinaryMask& gt);

/// Linear ramp from 0 at step 0 to peak_lr at warmup_steps, constant after.
double lr_at(int64_t step, const TrainConfig& cfg);

/// Decoupled-weight-decay Adam over the trainable parameters only.
class AdamW {
public:
    AdamW(std::vector<ag::Var> params, double weight_decay, double beta1 = 0.9,
          double beta2 = 0.999, double eps = 1e-8);
    void step(double lr);
    void zero_grad();
    const std::vector<ag::Var>& params() const { return params_; }

private:
    struct Slot {
        ag::Tensor m, v;
    };
    std::vector<ag::Var> params_;
    std::vector<Slot> slots_;
    double wd_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

/// One model-ready training sample: normalized image plus per-instance masks.
struct TrainSample {
    ag::Tensor image;  // [S, S, 3], already normalized
    std::vector<prompting::BinaryMask> instances;
};

class Trainer {
public:
    /// Model must already be configured via configure_finetune.
    Trainer(Segmenter& model, const TrainConfig& cfg);

    /// One optimizer step over the batch; returns the mean StepLoss.
    StepLoss train_step(const std::vector<const TrainSample*>& batch);

    /// Loss of the batch under the current weights, no graph, no update.
    StepLoss eval_loss(const std::vector<const TrainSample*>& batch);

    int64_t steps_done() const { return step_; }
    std::mt19937& rng() { return rng_; }

private:
    StepLoss forward_batch(const std::vector<const TrainSample*>& batch, ag::Var* total_out);

    Segmenter& model_;
    TrainConfig cfg_;
    AdamW opt_;
    std::mt19937 rng_;
    int64_t step_ = 0;
};

/// Collects the trainable parameters of a model in deterministic name order.
std::vector<ag::Var> trainable_params(Segmenter& model);

}  // namespace fieldseg::training
