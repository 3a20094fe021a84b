#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "seqflow/data.hpp"
#include "seqflow/tape.hpp"

namespace seqflow {

// Checkpoint archive: a directory holding manifest.json (model kind, config,
// vocabulary, length histogram, parameter names + shapes) and params.bin
// (the raw little-endian doubles, concatenated in manifest order).

inline constexpr const char* kCheckpointFormat = "seqflow-checkpoint-v1";

inline void write_param_blob(const std::string& path, const ParamStore& ps) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    for (int p = 0; p < ps.count(); ++p) {
        const Tensor& t = ps.value(p);
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
}

inline nlohmann::json param_manifest(const ParamStore& ps) {
    nlohmann::json list = nlohmann::json::array();
    for (int p = 0; p < ps.count(); ++p)
        list.push_back({{"name", ps.name(p)}, {"shape", ps.value(p).shape()}});
    return list;
}

inline void save_archive(const std::string& dir, const nlohmann::json& manifest_extra,
                         const ParamStore& ps) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = manifest_extra;
    manifest["format"] = kCheckpointFormat;
    manifest["params"] = param_manifest(ps);
    manifest["param_file"] = "params.bin";
    std::ofstream mout(dir + "/manifest.json");
    if (!mout) throw DataError("cannot write " + dir + "/manifest.json");
    mout << manifest.dump(2) << "\n";
    write_param_blob(dir + "/params.bin", ps);
}

inline nlohmann::json load_manifest(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw DataError("cannot open checkpoint manifest in " + dir);
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const std::exception& e) {
        throw DataError(std::string("manifest parse error: ") + e.what());
    }
    if (manifest.value("format", "") != kCheckpointFormat)
        throw DataError("unrecognized checkpoint format in " + dir);
    return manifest;
}

// Fills an existing store (already holding identically named and shaped
// parameters from model construction) from the archive.
inline void load_params(const std::string& dir, const nlohmann::json& manifest, ParamStore& ps) {
    const auto& list = manifest.at("params");
    if (static_cast<int>(list.size()) != ps.count())
        throw DataError("checkpoint parameter count mismatch: expected " +
                        std::to_string(ps.count()) + ", archive has " + std::to_string(list.size()));
    std::ifstream in(dir + "/" + manifest.value("param_file", "params.bin"), std::ios::binary);
    if (!in) throw DataError("cannot open parameter blob in " + dir);
    for (int p = 0; p < ps.count(); ++p) {
        const auto& entry = list[static_cast<size_t>(p)];
        const std::string name = entry.at("name").get<std::string>();
        const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        if (name != ps.name(p) || shape != ps.value(p).shape())
            throw DataError("checkpoint layout mismatch at parameter " + name);
        Tensor& t = ps.value(p);
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!in) throw DataError("parameter blob truncated at " + name);
    }
}

inline nlohmann::json vocab_to_json(const Vocab& v) {
    return nlohmann::json(v.chars());
}

inline Vocab vocab_from_json(const nlohmann::json& j) {
    return Vocab::from_chars(j.get<std::vector<uint32_t>>());
}

}  // namespace seqflow
