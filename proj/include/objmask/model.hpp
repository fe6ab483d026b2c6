#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "objmask/accounting.hpp"
#include "objmask/argmax.hpp"
#include "objmask/conv.hpp"
#include "objmask/detector.hpp"
#include "objmask/layers.hpp"
#include "objmask/mask.hpp"
#include "objmask/omg_loss.hpp"
#include "objmask/sparse.hpp"
#include "objmask/tensor.hpp"

namespace objmask {

struct BlockSpec {
    int channels = 16;
    int stride = 1;
    bool pool = false;  // 2x2 max-pool after the ReLU
};

struct OmgSpec {
    double input_scale = 0.5;
    std::vector<int> channels = {16, 32, 32, 32, 32};
    std::vector<int> strides = {2, 2, 2, 1, 1};
    // Initial soft-argmax foreground probability set through the logit bias.
    double foreground_prior = 0.5;
};

struct TrainSchedule {
    int steps = 2000;
    int batch = 8;
    float lr = 0.02f;
    float momentum = 0.9f;
    float weight_decay = 1e-4f;
    float grad_clip = 10.0f;  // global L2 norm; 0 disables
    int warmup_steps = 100;
    double e2e_step_factor = 1.5;
    bool flip = true;
    int log_every = 50;
    int eval_every = 0;  // 0 disables periodic evaluation rows
    std::uint64_t seed = 1;

    // Learning rate after linear warmup and x0.1 decays at 2/3 and 11/12 of `total`.
    float lr_at(int step, int total) const;
};

struct ModelConfig {
    int image_hw = 96;
    int num_classes = 3;
    int in_channels = 3;
    std::vector<BlockSpec> od_blocks = {{16, 2, false}, {32, 2, false}, {64, 2, false},
                                        {64, 1, false}, {96, 1, true},  {96, 1, false}};
    std::vector<int> head_blocks = {3, 5};  // blocks whose outputs feed a detection head
    std::vector<float> anchor_sizes = {0.25f, 0.5f};
    float background_prior = 0.99f;
    OmgSpec omg;
    ArgmaxConfig argmax;
    OmgLossConfig omg_loss = {5, MiningRatio{1, 3}, 3.0f, 1.0f};
    float lambda_omg = 10.0f;
    TrainSchedule train;
    std::uint64_t init_seed = 1;

    void validate() const;
    int anchors_per_cell() const { return 3; }
    int head_channels() const { return anchors_per_cell() * (num_classes + 1 + 4); }
    int omg_input_hw() const;
    // Stride of the input to block i and of each head's input.
    int block_input_stride(std::size_t i) const;
    int block_output_stride(std::size_t i) const;
    std::vector<int> head_strides() const;

    nlohmann::ordered_json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

enum class ForwardMode { Vanilla, Pipeline, E2e };
enum class Execution { Dense, Sparse };

ForwardMode parse_forward_mode(const std::string& s);
std::string to_string(ForwardMode m);
Execution parse_execution(const std::string& s);
std::string to_string(Execution e);

struct ForwardOptions {
    ForwardMode mode = ForwardMode::Vanilla;
    const BinaryMask* mask = nullptr;  // Pipeline: stride-1 mask at image resolution
    Execution exec = Execution::Dense;
    bool training = false;
    bool observe = false;       // collect per-image LayerObservations
    bool keep_outputs = false;  // keep raw conv outputs of sparse-capable layers
};

struct ForwardResult {
    std::vector<Tensor> heads;  // per level: (n, head_channels, gh, gw)
    Tensor omg_logits;          // E2e: (n, 2, H, W)
    Tensor mask;                // mask values applied at stride 1; empty in Vanilla
    std::vector<std::vector<LayerObservation>> observations;  // per image
    std::vector<SparseLayer> sparse_layers;
    std::vector<std::pair<std::string, Tensor>> conv_inputs;   // masked inputs (keep_outputs)
    std::vector<std::pair<std::string, Tensor>> conv_outputs;  // raw outputs (keep_outputs)
};

struct ParamGrads {
    std::vector<ConvGrads> od;
    std::vector<ConvGrads> omg;
};

// Per-image head rows in anchor order: cls (anchors, C + 1) and box (anchors, 4).
struct HeadRows {
    std::vector<float> cls;
    std::vector<float> box;
};

class Model {
public:
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    const AnchorGrid& anchors() const { return anchors_; }

    std::vector<ConvWeights> od;   // backbone blocks, then one head per level
    std::vector<ConvWeights> omg;  // encoder convs, then the 1x1 logit conv

    std::vector<std::string> od_layer_ids() const;
    std::vector<std::string> omg_layer_ids() const;
    std::size_t param_count() const;

    // OMG logits at image resolution (n, 2, H, W).
    Tensor omg_forward(const Tensor& images, LayerTape* tape,
                       std::vector<std::vector<LayerObservation>>* obs) const;
    std::vector<ConvGrads> omg_backward(const Tensor& grad_logits, LayerTape& tape) const;

    ForwardResult forward(const Tensor& images, const ForwardOptions& opt, LayerTape* tape = nullptr) const;
    // Consumes the tape recorded by a training forward. grad_omg_logits (optional)
    // is added to the gradient reaching the OMG logits in E2e mode.
    ParamGrads backward(const std::vector<Tensor>& grad_heads, const Tensor* grad_omg_logits, const ForwardOptions& opt,
                        LayerTape& tape) const;

    HeadRows head_rows(const ForwardResult& fr, int b) const;
    // Scatters per-image row gradients back to head-tensor gradients.
    void add_head_grad(const HeadRows& g, int b, std::vector<Tensor>& grad_heads) const;

    std::vector<Detection> detect(const ForwardResult& fr, int b, int image_id, const DecodeConfig& dc = {}) const;

    void save(const std::filesystem::path& path) const;
    static Model load(const std::filesystem::path& path);
    bool operator==(const Model& o) const;

private:
    ModelConfig cfg_;
    AnchorGrid anchors_;
};

// Parameter store walk shared by the optimizer and checkpoints.
std::vector<ConvWeights*> parameters(Model& m, bool od, bool omg);

class Sgd {
public:
    Sgd(float momentum, float weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
    // params and grads are parallel lists; grads are scaled by `scale` first.
    void step(const std::vector<ConvWeights*>& params, const std::vector<const ConvGrads*>& grads, float lr,
              float scale = 1.0f);

private:
    float momentum_;
    float weight_decay_;
    std::vector<std::vector<float>> velocity_;
};

// Global L2 norm of a set of gradients.
double grad_norm(const std::vector<const ConvGrads*>& grads);

}  // namespace objmask
