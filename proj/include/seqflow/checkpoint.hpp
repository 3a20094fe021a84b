#pragma once

#include <memory>
#include <string>

#include "seqflow/config.hpp"
#include "seqflow/serialize.hpp"

namespace seqflow {

// Whole-run checkpoints: model parameters plus everything needed to rebuild
// and evaluate the run (model config, originating run config, vocabulary,
// length histogram, epochs completed).

inline void save_model_checkpoint(const std::string& dir, const std::string& model_name,
                                  const GenerativeModel& m, const nlohmann::json& run_config,
                                  const Vocab* vocab, int epochs_done) {
    nlohmann::json manifest;
    manifest["model"] = model_name;
    manifest["kind"] = "generative";
    manifest["config"] = m.config().to_json();
    manifest["run_config"] = run_config;
    manifest["length_model"] = m.length_model().to_json();
    manifest["vocab"] = vocab ? vocab_to_json(*vocab) : nlohmann::json();
    manifest["epochs_done"] = epochs_done;
    save_archive(dir, manifest, m.params());
}

inline void save_model_checkpoint(const std::string& dir, const BaselineLstmLm& m,
                                  const nlohmann::json& run_config, const Vocab* vocab,
                                  int epochs_done) {
    nlohmann::json manifest;
    manifest["model"] = "lstm_baseline";
    manifest["kind"] = "baseline";
    manifest["config"] = m.config().to_json();
    manifest["run_config"] = run_config;
    manifest["length_model"] = m.length_model().to_json();
    manifest["vocab"] = vocab ? vocab_to_json(*vocab) : nlohmann::json();
    manifest["epochs_done"] = epochs_done;
    save_archive(dir, manifest, m.params());
}

struct SavedModel {
    std::string model_name;
    std::string kind;  // "generative" | "baseline"
    std::unique_ptr<GenerativeModel> gen;
    std::unique_ptr<BaselineLstmLm> baseline;
    nlohmann::json run_config;
    Vocab vocab;
    bool has_vocab = false;
    int epochs_done = 0;

    LengthModel& length_model() {
        return gen ? gen->length_model() : baseline->length_model();
    }
};

inline SavedModel load_model_checkpoint(const std::string& dir) {
    const nlohmann::json manifest = load_manifest(dir);
    SavedModel out;
    out.model_name = manifest.value("model", "");
    out.kind = manifest.value("kind", "");
    out.run_config = manifest.value("run_config", nlohmann::json::object());
    out.epochs_done = manifest.value("epochs_done", 0);
    if (manifest.contains("vocab") && !manifest["vocab"].is_null()) {
        out.vocab = vocab_from_json(manifest["vocab"]);
        out.has_vocab = true;
    }
    if (out.kind == "generative") {
        out.gen = std::make_unique<GenerativeModel>(ModelConfig::from_json(manifest.at("config")));
        load_params(dir, manifest, out.gen->params());
        out.gen->length_model() = LengthModel::from_json(manifest.value("length_model", nlohmann::json::object()));
    } else if (out.kind == "baseline") {
        out.baseline = std::make_unique<BaselineLstmLm>(BaselineConfig::from_json(manifest.at("config")));
        load_params(dir, manifest, out.baseline->params());
        out.baseline->length_model() =
            LengthModel::from_json(manifest.value("length_model", nlohmann::json::object()));
    } else {
        throw DataError("checkpoint: unknown model kind '" + out.kind + "'");
    }
    return out;
}

}  // namespace seqflow
