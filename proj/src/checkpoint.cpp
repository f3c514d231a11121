#include "fieldseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "fieldseg/segmenter.hpp"

namespace fieldseg::ckpt {

using nlohmann::json;

void save_tensors(const std::string& path, const json& meta,
                  const std::map<std::string, ag::Tensor>& tensors) {
    json header;
    header["format"] = "fieldseg-checkpoint/1";
    header["meta"] = meta;
    json index = json::array();
    int64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.numel();
    }
    header["tensors"] = index;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    f.write(kMagic, sizeof(kMagic));
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : tensors) {
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!f) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

TensorFile load_tensors(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint container");
    }
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw std::runtime_error("checkpoint: truncated header in '" + path + "'");
    json header = json::parse(hs);

    TensorFile out;
    out.meta = header.value("meta", json::object());
    for (const auto& entry : header.at("tensors")) {
        std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
        ag::Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!f) throw std::runtime_error("checkpoint: truncated data in '" + path + "'");
        out.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
    return out;
}

namespace {

json config_json(const ModelConfig& c) {
    return json{{"preset", preset_name(c.preset)},
                {"encoder_blocks", c.encoder_blocks},
                {"encoder_width", c.encoder_width},
                {"encoder_heads", c.encoder_heads},
                {"image_size", c.image_size},
                {"patch_size", c.patch_size},
                {"decoder_blocks", c.decoder_blocks},
                {"decoder_width", c.decoder_width},
                {"decoder_heads", c.decoder_heads},
                {"masks_per_prompt", c.masks_per_prompt},
                {"pixel_mean", c.pixel_mean},
                {"pixel_std", c.pixel_std}};
}

bool is_lora_key(const std::string& name) {
    return name.find(".lora_A") != std::string::npos || name.find(".lora_B") != std::string::npos;
}

}  // namespace

void save_model(const Segmenter& model, const std::string& path) {
    std::map<std::string, ag::Tensor> tensors;
    for (const auto& [name, var] : model.params().all()) {
        if (!is_lora_key(name)) tensors.emplace(name, var->value);
    }
    json meta;
    meta["kind"] = "full";
    meta["config"] = config_json(model.config());
    save_tensors(path, meta, tensors);
}

LoadReport load_model(Segmenter& model, const std::string& path) {
    TensorFile file = load_tensors(path);
    if (file.meta.value("kind", "") != "full") {
        throw std::runtime_error("load_model: '" + path + "' is not a full model checkpoint");
    }
    LoadReport report;
    auto& reg = model.params();
    for (const auto& [name, var] : reg.all()) {
        if (is_lora_key(name)) continue;
        auto it = file.tensors.find(name);
        if (it == file.tensors.end()) {
            report.missing_in_file.push_back(name);
            continue;
        }
        if (!it->second.same_shape(var->value)) {
            throw std::runtime_error("load_model: shape mismatch for '" + name + "': model " +
                                     var->value.shape_str() + " vs checkpoint " +
                                     it->second.shape_str());
        }
        var->value = it->second;
    }
    for (const auto& [name, t] : file.tensors) {
        if (!reg.has(name)) report.unused_in_file.push_back(name);
    }
    if (!report.missing_in_file.empty()) {
        throw std::runtime_error("load_model: checkpoint '" + path + "' lacks " +
                                 std::to_string(report.missing_in_file.size()) +
                                 " model parameters (first: " + report.missing_in_file.front() +
                                 ")");
    }
    return report;
}

void save_lora(const Segmenter& model, const std::string& path) {
    std::map<std::string, ag::Tensor> tensors;
    json targets = json::array();
    auto& m = const_cast<Segmenter&>(model);
    int rank = -1;
    float scaling = 1.0f;
    for (auto& [name, lin] : m.attention_projections()) {
        if (!lin->has_lora()) continue;
        const auto& ad = lin->adapter();
        tensors.emplace(name + ".lora_A", ad.A->value);
        tensors.emplace(name + ".lora_B", ad.B->value);
        targets.push_back(name);
        rank = ad.rank;
        scaling = ad.scaling;
    }
    if (tensors.empty()) {
        throw std::runtime_error("save_lora: model carries no adapters");
    }
    json meta;
    meta["kind"] = "lora";
    meta["rank"] = rank;
    meta["scaling"] = scaling;
    meta["targets"] = targets;
    meta["config"] = config_json(model.config());
    save_tensors(path, meta, tensors);
}

void load_lora(Segmenter& model, const std::string& path) {
    TensorFile file = load_tensors(path);
    if (file.meta.value("kind", "") != "lora") {
        throw std::runtime_error("load_lora: '" + path + "' is not a LoRA checkpoint");
    }
    const int rank = file.meta.at("rank").get<int>();
    const float scaling = file.meta.at("scaling").get<float>();
    const auto targets = file.meta.at("targets").get<std::vector<std::string>>();

    auto projections = model.attention_projections();
    auto find = [&projections](const std::string& name) -> nn::Linear* {
        for (auto& [n, lin] : projections) {
            if (n == name) return lin;
        }
        return nullptr;
    };

    if (!model.has_any_lora()) {
        // attach fresh adapters exactly where the checkpoint expects them
        std::mt19937 rng(0);
        for (const auto& name : targets) {
            nn::Linear* lin = find(name);
            if (!lin) {
                throw std::runtime_error("load_lora: projection '" + name +
                                         "' not present in this geometry");
            }
            lin->attach_lora(model.params(), rank, scaling, rng);
            lin->adapter().A->requires_grad = false;
            lin->adapter().B->requires_grad = false;
        }
    }

    for (const auto& name : targets) {
        nn::Linear* lin = find(name);
        if (!lin || !lin->has_lora()) {
            throw std::runtime_error("load_lora: model has no adapter at '" + name + "'");
        }
        if (lin->adapter().rank != rank) {
            throw std::runtime_error("load_lora: rank mismatch at '" + name + "': model " +
                                     std::to_string(lin->adapter().rank) + " vs checkpoint " +
                                     std::to_string(rank));
        }
        const ag::Tensor& a = file.tensors.at(name + ".lora_A");
        const ag::Tensor& b = file.tensors.at(name + ".lora_B");
        if (!a.same_shape(lin->adapter().A->value) || !b.same_shape(lin->adapter().B->value)) {
            throw std::runtime_error("load_lora: factor shape mismatch at '" + name +
                                     "': model " + lin->adapter().A->value.shape_str() + "/" +
                                     lin->adapter().B->value.shape_str() + " vs checkpoint " +
                                     a.shape_str() + "/" + b.shape_str());
        }
        lin->adapter().A->value = a;
        lin->adapter().B->value = b;
    }
}

}  // namespace fieldseg::ckpt
