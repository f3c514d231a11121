#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fieldseg/tensor.hpp"

namespace fieldseg {
class Segmenter;
}

namespace fieldseg::ckpt {

/// Binary tensor container: 8-byte magic, u64 header length, JSON header,
/// then raw little-endian float32 data. Keys mirror component names.
inline constexpr char kMagic[8] = {'F', 'S', 'C', 'P', '0', '0', '0', '1'};

struct TensorFile {
    nlohmann::json meta;
    std::map<std::string, ag::Tensor> tensors;
};

void save_tensors(const std::string& path, const nlohmann::json& meta,
                  const std::map<std::string, ag::Tensor>& tensors);
TensorFile load_tensors(const std::string& path);

struct LoadReport {
    std::vector<std::string> missing_in_file;  // model keys the file lacks
    std::vector<std::string> unused_in_file;   // file keys the model lacks
};

/// Full model checkpoint (base weights; adapter factors are not included).
void save_model(const Segmenter& model, const std::string& path);

/// Populates matching weights; throws on geometry mismatch with a shape diff.
LoadReport load_model(Segmenter& model, const std::string& path);

/// LoRA-only checkpoint: per-projection (A, B) plus rank/scaling/targets.
void save_lora(const Segmenter& model, const std::string& path);

/// Loads adapter factors. If the model carries no adapters yet they are
/// injected from the stored spec; otherwise rank and target set must match.
void load_lora(Segmenter& model, const std::string& path);

}  // namespace fieldseg::ckpt
