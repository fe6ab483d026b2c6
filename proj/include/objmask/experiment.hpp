#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "objmask/detector.hpp"
#include "objmask/maskgen.hpp"
#include "objmask/model.hpp"
#include "objmask/omg_loss.hpp"
#include "objmask/synth.hpp"

namespace objmask {

enum class MaskKind { Vanilla, GtInstance, GtBox, Random, Spectral, OmgPipeline, OmgE2e };

struct MaskSource {
    MaskKind kind = MaskKind::Vanilla;
    double random_p = 0.3;
    SaliencyConfig saliency;
    std::filesystem::path omg_checkpoint;  // OmgPipeline: model whose OMG produces the masks

    ForwardMode mode() const;
    std::string name() const;
    static MaskSource parse(const std::string& s);
};

std::string to_string(MaskKind k);

// Masks of the non-learned sources for one scene.
BinaryMask scene_mask(const MaskSource& src, const SyntheticScene& scene, std::uint64_t seed);

// Hard OMG mask (stride 1, image resolution) for a batch.
BinaryMask omg_mask(const Model& m, const Tensor& images);

// Dilated union of GT instance masks, the OMG training target.
BinaryMask omg_target(const SyntheticScene& scene, int dilation_kernel);

struct TrainLogRow {
    int step = 0;
    double det_loss = 0;
    double omg_loss = 0;
    double lr = 0;
    std::optional<double> map;
    std::optional<double> mac_star;
    std::optional<double> fg_ratio;
    std::optional<double> instance_recall;
};

std::string train_log_csv(const std::vector<TrainLogRow>& rows);

enum class TrainTarget { Detector, OmgOnly };

struct TrainOptions {
    TrainTarget target = TrainTarget::Detector;
    MaskSource source;                   // Detector: selects vanilla / pipeline / e2e
    const Model* mask_model = nullptr;   // OmgPipeline masks
    int steps = -1;                      // < 0: schedule default (x e2e_step_factor for e2e)
    const std::vector<SyntheticScene>* eval_set = nullptr;
    std::function<void(const TrainLogRow&)> on_log;
};

int default_steps(const ModelConfig& cfg, const TrainOptions& opt);

// Deterministic for fixed model config, data and options. Throws DivergenceError
// when a loss becomes non-finite.
std::vector<TrainLogRow> train(Model& model, const std::vector<SyntheticScene>& data, const TrainOptions& opt);

struct EvalOptions {
    MaskSource source;
    Execution exec = Execution::Dense;
    const Model* mask_model = nullptr;
    int batch = 16;
    std::uint64_t seed = 1;
    DecodeConfig decode;
    RecallBinning binning;
    bool keep_detections = false;
};

struct EvalResult {
    ApResult ap;
    MacReport report;
    double fg_ratio = 0;
    RecallResult recall;
    std::vector<Detection> detections;
    std::vector<SpeedupRow> speedup;
    std::size_t images = 0;
};

EvalResult evaluate(const Model& model, const std::vector<SyntheticScene>& data, const EvalOptions& opt);

// Instance recall and FG-ratio of OMG masks alone.
struct MaskQuality {
    RecallResult recall;
    double fg_ratio = 0;
};
MaskQuality evaluate_omg_masks(const Model& model, const std::vector<SyntheticScene>& data,
                               const RecallBinning& binning = {}, int batch = 16);

nlohmann::ordered_json eval_json(const std::string& run, const EvalOptions& opt, const EvalResult& r);

// Sparse-vs-dense comparison. Layer deviations are taken at the output
// positions covered by active tiles; the output deviation over all head values.
struct LayerDeviation {
    std::string layer_id;
    double max_abs = 0;
    std::size_t active_tiles = 0;
    std::size_t total_tiles = 0;
};
struct EquivReport {
    std::vector<LayerDeviation> layers;
    double max_layer_deviation = 0;
    double max_output_deviation = 0;
    std::size_t images = 0;
    void merge(const EquivReport& o);
};
EquivReport equivalence_check(const Model& model, const Tensor& images, const BinaryMask& mask);

// Batch helpers.
Tensor stack_images(const std::vector<const SyntheticScene*>& scenes);

struct ExperimentConfig {
    std::string name = "run";
    std::filesystem::path train_data;
    std::filesystem::path eval_data;
    std::filesystem::path output_dir = "runs";
    std::filesystem::path checkpoint;  // eval: model to load; train: output (default <output>/<name>.ckpt)
    ModelConfig model;
    MaskSource source;
    Execution exec = Execution::Dense;
    TrainTarget target = TrainTarget::Detector;
    int steps = -1;
    int eval_batch = 16;
    std::uint64_t seed = 1;

    void validate() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
};

}  // namespace objmask
