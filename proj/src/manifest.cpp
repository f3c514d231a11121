#include "fieldseg/manifest.hpp"

#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fieldseg {

uint64_t fnv1a64(const std::string& bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string fnv1a64_hex(const std::string& bytes) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
}

std::string hash_strings(const std::vector<std::string>& items) {
    std::string joined;
    for (const auto& s : items) {
        joined += s;
        joined += '\n';
    }
    return fnv1a64_hex(joined);
}

std::string hash_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("hash_file: cannot open '" + path + "'");
    std::ostringstream os;
    os << f.rdbuf();
    return fnv1a64_hex(os.str());
}

std::string iso_timestamp_utc() {
    std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string git_describe_or_unknown() {
    FILE* pipe = popen("git describe --always --dirty 2>/dev/null", "r");
    if (!pipe) return "unknown";
    char buf[128];
    std::string out;
    while (fgets(buf, sizeof(buf), pipe)) out += buf;
    pclose(pipe);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return out.empty() ? "unknown" : out;
}

nlohmann::json RunManifest::to_json() const {
    nlohmann::json j;
    j["schema"] = "fieldseg-run-manifest/1";
    j["command"] = command;
    j["config"] = config;
    j["seed"] = seed;
    j["git_describe"] = git_describe;
    j["split_hashes"] = split_hashes;
    if (trainable_params >= 0) j["trainable_params"] = trainable_params;
    if (!lora_targets.is_null()) j["lora_targets"] = lora_targets;
    j["started_at"] = started_at;
    j["finished_at"] = finished_at;
    return j;
}

void RunManifest::write(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("RunManifest: cannot write '" + path + "'");
    f << to_json().dump(2) << "\n";
}

}  // namespace fieldseg
