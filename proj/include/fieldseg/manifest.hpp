#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace fieldseg {

/// FNV-1a 64-bit over a byte string; stable across runs and platforms.
uint64_t fnv1a64(const std::string& bytes);
std::string fnv1a64_hex(const std::string& bytes);
/// Order-sensitive hash over a list of strings (joined with '\n').
std::string hash_strings(const std::vector<std::string>& items);
/// Hash of a file's raw contents.
std::string hash_file(const std::string& path);

std::string iso_timestamp_utc();
std::string git_describe_or_unknown();

/// Every artifact-writing command emits exactly one of these alongside its
/// outputs. Timestamps are excluded from any reproducibility hashing.
struct RunManifest {
    std::string command;
    nlohmann::json config;
    uint64_t seed = 0;
    std::string git_describe;
    nlohmann::json split_hashes;  // e.g. {"train": "...", "val": "..."}
    int64_t trainable_params = -1;
    nlohmann::json lora_targets;
    std::string started_at;
    std::string finished_at;

    nlohmann::json to_json() const;
    void write(const std::string& path) const;
};

}  // namespace fieldseg
