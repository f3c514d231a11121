#include "fieldseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace fieldseg::training {

std::string prompt_mode_name(PromptMode m) { return m == PromptMode::single ? "single" : "multi"; }

PromptMode prompt_mode_from_name(const std::string& name) {
    if (name == "single") return PromptMode::single;
    if (name == "multi") return PromptMode::multi;
    throw std::invalid_argument("unknown prompt mode '" + name + "'");
}

void TrainConfig::validate() const {
    if (precision != "float32") {
        throw std::invalid_argument("TrainConfig: precision must be float32 (got '" + precision +
                                    "'); reduced precision is rejected");
    }
    if (peak_lr <= 0 || warmup_steps < 1 || batch_size < 1 || max_steps < 1) {
        throw std::invalid_argument("TrainConfig: non-positive schedule values");
    }
    if (weight_decay < 0 || lora_rank < 1) {
        throw std::invalid_argument("TrainConfig: bad optimizer/adapter values");
    }
    if (focal_weight < 0 || dice_weight < 0 || iou_loss_weight < 0) {
        throw std::invalid_argument("TrainConfig: loss weights must be non-negative");
    }
}

ag::Var seg_loss_graph(const ag::Var& pred_logits, const ag::Tensor& gt, const TrainConfig& cfg) {
    if (!pred_logits->value.same_shape(gt)) {
        throw std::invalid_argument("seg_loss: prediction " + pred_logits->value.shape_str() +
                                    " vs ground truth " + gt.shape_str());
    }
    ag::Var focal = ag::focal_loss_with_logits(pred_logits, gt, static_cast<float>(cfg.focal_alpha),
                                               static_cast<float>(cfg.focal_gamma));
    ag::Var dice = ag::dice_loss_with_logits(pred_logits, gt);
    return ag::add(ag::scale(focal, static_cast<float>(cfg.focal_weight)),
                   ag::scale(dice, static_cast<float>(cfg.dice_weight)));
}

double seg_loss(const ag::Tensor& pred_logits, const ag::Tensor& gt, const TrainConfig& cfg) {
    ag::NoGradGuard ng;
    return seg_loss_graph(ag::constant(pred_logits), gt, cfg)->value[0];
}

std::pair<int, double> min_of_three(const std::array<double, 3>& losses) {
    for (double v : losses) {
        if (std::isnan(v)) {
            throw std::runtime_error("min_of_three: NaN loss (training instability)");
        }
    }
    int best = 0;
    for (int i = 1; i < 3; ++i) {
        if (losses[static_cast<size_t>(i)] < losses[static_cast<size_t>(best)]) best = i;
    }
    return {best, losses[static_cast<size_t>(best)]};
}

double iou_target(const prompting::BinaryMask& pred, const prompting::BinaryMask& gt) {
    if (pred.width != gt.width || pred.height != gt.height) {
        throw std::invalid_argument("iou_target: shape mismatch");
    }
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const bool a = pred.data[i] != 0, b = gt.data[i] != 0;
        inter += (a && b) ? 1 : 0;
        uni += (a || b) ? 1 : 0;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double lr_at(int64_t step, const TrainConfig& cfg) {
    if (step < 0) throw std::invalid_argument("lr_at: negative step");
    if (step >= cfg.warmup_steps) return cfg.peak_lr;
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

AdamW::AdamW(std::vector<ag::Var> params, double weight_decay, double beta1, double beta2,
             double eps)
    : params_(std::move(params)), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    slots_.reserve(params_.size());
    for (const auto& p : params_) {
        Slot s;
        s.m = ag::Tensor::zeros(p->value.shape());
        s.v = ag::Tensor::zeros(p->value.shape());
        slots_.push_back(std::move(s));
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        ag::Node& p = *params_[i];
        if (!p.has_grad()) continue;  // untouched by this step's graph
        Slot& s = slots_[i];
        for (int64_t j = 0; j < p.value.numel(); ++j) {
            const double g = p.grad[j];
            const double m = beta1_ * s.m[j] + (1.0 - beta1_) * g;
            const double v = beta2_ * s.v[j] + (1.0 - beta2_) * g * g;
            s.m[j] = static_cast<float>(m);
            s.v[j] = static_cast<float>(v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            double val = p.value[j];
            val -= lr * wd_ * val;  // decoupled decay
            val -= lr * mhat / (std::sqrt(vhat) + eps_);
            p.value[j] = static_cast<float>(val);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p->zero_grad();
}

std::vector<ag::Var> trainable_params(Segmenter& model) {
    std::vector<ag::Var> out;
    for (const auto& [name, var] : model.params().all()) {
        if (var->requires_grad) out.push_back(var);
    }
    return out;
}

Trainer::Trainer(Segmenter& model, const TrainConfig& cfg)
    : model_(model),
      cfg_(cfg),
      opt_(trainable_params(model), cfg.weight_decay),
      rng_(static_cast<uint32_t>(cfg.seed)) {
    cfg_.validate();
    if (!model.finetune_configured()) {
        throw std::invalid_argument("Trainer: model must be configured via configure_finetune");
    }
}

StepLoss Trainer::forward_batch(const std::vector<const TrainSample*>& batch, ag::Var* total_out) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    ag::Var total;
    int n_terms = 0;
    double seg_acc = 0.0, iou_acc = 0.0;
    std::array<int, 3> selected_hist{0, 0, 0};

    for (const TrainSample* sample : batch) {
        if (!sample || sample->instances.empty()) {
            throw std::invalid_argument("train_step: sample without instances");
        }
        ImageTokens tokens = model_.encode_image(sample->image);
        for (const auto& inst : sample->instances) {
            prompting::PromptSet prompts =
                cfg_.prompt_mode == PromptMode::single
                    ? prompting::sample_single_positive(inst, rng_)
                    : prompting::sample_multi(inst, rng_);
            PromptEmbedding pe = model_.encode_prompts(prompts);
            MaskPrediction pred = model_.decode_for_training(tokens, pe);

            ag::Tensor gt({inst.height, inst.width});
            for (size_t i = 0; i < inst.data.size(); ++i) {
                gt[static_cast<int64_t>(i)] = inst.data[i] ? 1.0f : 0.0f;
            }

            std::array<ag::Var, 3> losses;
            std::array<double, 3> values{};
            for (int m = 0; m < 3; ++m) {
                losses[static_cast<size_t>(m)] =
                    seg_loss_graph(pred.mask_logits[static_cast<size_t>(m)], gt, cfg_);
                values[static_cast<size_t>(m)] = losses[static_cast<size_t>(m)]->value[0];
            }
            auto [sel, sel_value] = min_of_three(values);
            selected_hist[static_cast<size_t>(sel)] += 1;

            // IoU regression target: overlap of the selected binarized mask with gt
            prompting::BinaryMask pred_bin;
            pred_bin.width = inst.width;
            pred_bin.height = inst.height;
            pred_bin.data.resize(inst.data.size());
            const ag::Tensor& logits = pred.mask_logits[static_cast<size_t>(sel)]->value;
            for (size_t i = 0; i < pred_bin.data.size(); ++i) {
                pred_bin.data[i] = logits[static_cast<int64_t>(i)] > 0;
            }
            const double target = iou_target(pred_bin, inst);

            ag::Var err = ag::add_scalar(pred.iou_pred[static_cast<size_t>(sel)],
                                         static_cast<float>(-target));
            ag::Var iou_term = ag::hadamard(err, err);
            iou_acc += iou_term->value[0];
            seg_acc += sel_value;

            // only the selected head contributes gradient
            ag::Var term = ag::add(losses[static_cast<size_t>(sel)],
                                   ag::scale(iou_term, static_cast<float>(cfg_.iou_loss_weight)));
            total = total ? ag::add(total, term) : term;
            ++n_terms;
        }
    }

    total = ag::scale(total, 1.0f / static_cast<float>(n_terms));
    StepLoss out;
    out.seg_loss = seg_acc / n_terms;
    out.iou_loss = iou_acc / n_terms;
    out.total = total->value[0];
    int best = 0;
    for (int i = 1; i < 3; ++i) {
        if (selected_hist[static_cast<size_t>(i)] > selected_hist[static_cast<size_t>(best)]) {
            best = i;
        }
    }
    out.selected_mask_index = best;
    if (total_out) *total_out = total;
    return out;
}

StepLoss Trainer::train_step(const std::vector<const TrainSample*>& batch) {
    ag::Var total;
    StepLoss loss = forward_batch(batch, &total);
    if (!std::isfinite(loss.total)) {
        std::ostringstream os;
        os << "train_step: non-finite loss at step " << step_ << " (lr="
           << lr_at(step_ + 1, cfg_) << ", seg=" << loss.seg_loss << ", iou=" << loss.iou_loss
           << ")";
        throw std::runtime_error(os.str());
    }
    opt_.zero_grad();
    ag::backward(total);
    opt_.step(lr_at(step_ + 1, cfg_));
    opt_.zero_grad();
    ++step_;
    return loss;
}

StepLoss Trainer::eval_loss(const std::vector<const TrainSample*>& batch) {
    // graph-free pass: losses only, prompts drawn from a throwaway rng copy
    std::mt19937 saved = rng_;
    ag::NoGradGuard ng;
    StepLoss loss = forward_batch(batch, nullptr);
    rng_ = saved;
    return loss;
}

}  // namespace fieldseg::training
