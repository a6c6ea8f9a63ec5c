#pragma once

// Staged self-training: pseudo-label generation and refinement, pair
// augmentation, and the per-stage training loop.

#include "eqreg/data.hpp"
#include "eqreg/pipeline.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace eqreg {

struct AugmentationSpec {
    bool geometric = true;    // T_g: contrastive terms compare T(G(I)) with G(T(I))
    bool intensity = true;    // T_i: intensity map on network inputs
    bool pair_affine = true;  // independent affines on fixed and moving for L_reg

    double rotation_deg = 10.0;
    double scale_min = 0.9;
    double scale_max = 1.1;
    double shear = 0.05;
    double translation = 3.0;

    double gamma_min = 0.7;
    double gamma_max = 1.4;
    double noise_min = 0.0;   // sigma as a fraction of the intensity range
    double noise_max = 0.05;
    double linear_min = 0.9;
    double linear_max = 1.1;
    double shift = 0.05;

    void validate() const;
};

struct IntensityParams {
    double gamma = 1.0;
    double noise = 0.0;
    double scale = 1.0;
    double shift = 0.0;
    std::uint64_t noise_seed = 0;
};

/// Random affine about the volume centre; always invertible.
AffineTransform sample_affine(const AugmentationSpec& spec, const Dims& dims, std::mt19937_64& rng);
IntensityParams sample_intensity(const AugmentationSpec& spec, std::mt19937_64& rng);

/// Gamma, linear map and additive noise on min-max normalized intensities.
Volume<float> apply_intensity(const Volume<float>& image, const IntensityParams& p);

/// Pseudo field seen between affinely augmented images:
/// u_aug(q) = A_m^-1 ((A_f - A_m) q + (b_f - b_m) + u(T_f(q))).
DisplacementField<float> augment_field(const DisplacementField<float>& u, const AffineTransform& t_fixed,
                                       const AffineTransform& t_moving);

struct AugmentedPair {
    Volume<float> fixed;       // network inputs
    Volume<float> moving;
    DisplacementField<float> pseudo;
    AffineTransform t_fixed;
    AffineTransform t_moving;
    IntensityParams i_fixed;
    IntensityParams i_moving;
};

AugmentedPair augment_pair(const Volume<float>& fixed, const Volume<float>& moving, const DisplacementField<float>& pseudo,
                           const AugmentationSpec& spec, std::uint64_t seed);

struct RefinementConfig {
    bool consistency = true;
    bool double_warp = true;
    bool instance = true;
    InstanceOptimConfig instance_cfg;
};

struct TrainConfig {
    int stages = 8;
    int iters_per_stage = 1000;
    int batch_size = 2;
    double lr_max = 1e-3;
    double lr_min = 1e-5;
    std::uint64_t seed = 0;
    NetConfig net;
    PipelineConfig pipeline;
    AugmentationSpec augment;
    RefinementConfig refine;
    bool calibrate_norm = true;      // set running statistics from the data before the first pseudo-labels
    int skip_budget = 20;            // non-finite steps tolerated per stage
    bool train_extractor = true;
    bool train_head = true;
    std::string checkpoint_dir;      // empty: no checkpoints
    std::string history_path;        // empty: no JSON-lines history

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Cosine annealing from lr_max to lr_min within a stage; restarts at every stage start.
double cosine_restart_lr(int iter_in_stage, int iters_per_stage, double lr_max, double lr_min);

struct StepRecord {
    int stage = 0;
    int iter = 0;
    double lr = 0.0;
    double reg = 0.0;
    double contrast = 0.0;
    double total = 0.0;
    bool skipped = false;
};

struct StageSummary {
    int stage = 0;
    double pseudo_seconds = 0.0;
    double train_seconds = 0.0;
    Index pairs = 0;
    Index refined_not_worse = 0;   // pairs whose refined objective <= the raw estimate's
    Index fallbacks = 0;           // pairs that kept the pre-refinement field
    double mean_loss = 0.0;
    std::optional<double> validation_dice;
};

struct TrainState {
    NetParams<float> params;
    Adam<float> adam;
    std::vector<std::string> adam_names;   // parameters the optimizer state belongs to
    int stage = 0;
    std::vector<StepRecord> history;
    std::vector<StageSummary> stages;
};

TrainState initial_state(const TrainConfig& cfg);

struct PseudoLabelStore {
    int stage = 0;
    std::vector<DisplacementField<float>> fields;
    std::vector<std::string> diagnostics;
    Index refined_not_worse = 0;
    Index fallbacks = 0;
};

/// Running statistics from one train-mode pass over `images` (momentum 1).
void calibrate_norm(NetParams<float>& params, const std::vector<const Volume<float>*>& images);

/// Consistency, double warping and instance optimization of u_fm.
DisplacementField<float> refine_pseudo_label(NetParams<float>& params, const Volume<float>& fixed,
                                             const Volume<float>& moving, const TrainConfig& cfg,
                                             std::string* diagnostic = nullptr, bool* not_worse = nullptr,
                                             bool* fell_back = nullptr);

PseudoLabelStore generate_pseudo_labels(TrainState& state, const std::vector<LoadedPair>& pairs, const TrainConfig& cfg);

/// One stage of optimizer steps; throws NumericalError when the skip budget is exhausted.
void train_stage(TrainState& state, const PseudoLabelStore& store, const std::vector<LoadedPair>& pairs,
                 const TrainConfig& cfg);

using StageCallback = std::function<void(TrainState&, int stage)>;

/// Stages 1..M of pseudo-labelling and training; `after_stage` may record validation metrics.
TrainState run_training(const std::vector<LoadedPair>& pairs, const TrainConfig& cfg,
                        const StageCallback& after_stage = {}, TrainState* resume = nullptr);

struct Registration {
    DisplacementField<float> field;
    double seconds = 0.0;
};

Registration register_images(TrainState& state, const SolverConfig& solver, const Volume<float>& fixed,
                             const Volume<float>& moving);

// Checkpoints: "EQRGCKPT", u64 manifest length, JSON manifest, little-endian float32 arrays.
void save_checkpoint(const std::filesystem::path& path, const NetParams<float>& params,
                     const nlohmann::json& extra = nlohmann::json::object());
NetParams<float> load_checkpoint(const std::filesystem::path& path, nlohmann::json* manifest = nullptr);

} // namespace eqreg
