#pragma once

// Registration metrics, evaluation reports, the ablation harness and overlays.

#include "eqreg/selftrain.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace eqreg {

struct DiceScores {
    std::map<std::int32_t, double> per_label;
    double mean = 0.0;   // over labels present in either map; 1 when none are
};

/// Per-label 2|A∩B| / (|A|+|B|) over non-zero labels; `labels` restricts the set.
DiceScores dice(const LabelMap& a, const LabelMap& b, const std::vector<std::int32_t>& labels = {});

struct JacobianStats {
    double sdlogj = 0.0;
    double folding = 0.0;   // fraction of masked voxels with det <= 0
};

/// Mask of voxels at least one voxel from every face.
std::vector<std::uint8_t> interior_mask(const Dims& dims);

/// SD of log(max(det J, 1e-6)) over `mask` (default: interior).
JacobianStats sdlogj(const DisplacementField<float>& field, const std::vector<std::uint8_t>* mask = nullptr);

/// Mean |u - v| over all voxels.
double endpoint_error(const DisplacementField<float>& u, const DisplacementField<float>& v);

struct MeanSd {
    double mean = 0.0;
    double sd = 0.0;
};
MeanSd mean_sd(const std::vector<double>& values);

struct PairMetrics {
    std::string id;
    std::optional<DiceScores> dice;
    JacobianStats jacobian;
    double seconds = 0.0;
    std::optional<double> epe;
};

struct EvalReport {
    std::string method;
    std::vector<PairMetrics> pairs;
    std::vector<PairMetrics> initial;   // zero field
    std::string config_fingerprint;
    std::uint64_t seed = 0;
    std::vector<std::string> warnings;

    /// Mean over pairs of each pair's structure-mean Dice.
    std::optional<MeanSd> dice() const;
    /// Mean over structures of each structure's pair-mean Dice.
    std::optional<double> dice_structure_first() const;
    std::optional<MeanSd> initial_dice() const;
    MeanSd sdlogj() const;
    MeanSd seconds() const;
    std::optional<MeanSd> epe() const;
};

nlohmann::json to_json(const EvalReport& report);

using FieldFn = std::function<Registration(const LoadedPair&)>;

/// Registers every pair through `fn` (median of `repetitions` timings) and scores it.
EvalReport evaluate_with(const std::vector<LoadedPair>& pairs, const FieldFn& fn, int repetitions = 3);

EvalReport evaluate(TrainState& state, const SolverConfig& solver, const std::vector<LoadedPair>& pairs,
                    int repetitions = 3);

/// Two-sided exact Wilcoxon signed-rank p-value of x - y (zero differences dropped;
/// normal approximation above 25 non-zero pairs).
double wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y);

std::string config_fingerprint(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Ablation

enum class LossMode { registration_only, frozen_pretrain, joint };

struct AblationCell {
    LossMode loss = LossMode::joint;
    bool geometric = true;
    bool intensity = true;

    std::string name() const;
};

struct AblationSettings {
    std::vector<AblationCell> cells;   // empty: the full 3 x 4 grid
    std::vector<std::uint64_t> seeds{0};
    int pretrain_iters = 0;            // contrastive-only iterations before freezing; 0 = stages * iters
};

struct AblationResult {
    AblationCell cell;
    std::vector<double> dice;          // one entry per seed
    std::vector<double> sdlogj;
    double mean_dice = 0.0;
    double mean_sdlogj = 0.0;
};

std::vector<AblationCell> full_ablation_grid();

/// Applies a cell to a base config: loss weights, training flags and augmentation axes.
TrainConfig configure_cell(const TrainConfig& base, const AblationCell& cell);

/// Trains one model for `cell` (with contrastive pretraining for the frozen mode).
TrainState train_cell(const std::vector<LoadedPair>& train, const TrainConfig& base, const AblationCell& cell,
                      int pretrain_iters);

std::vector<AblationResult> ablation_run(const std::vector<LoadedPair>& train, const std::vector<LoadedPair>& test,
                                         const TrainConfig& base, const AblationSettings& settings,
                                         const std::function<void(const std::string&)>& log = {});

nlohmann::json ablation_json(const std::vector<AblationResult>& results);
std::string ablation_markdown(const std::vector<AblationResult>& results);

// ---------------------------------------------------------------------------
// Overlays

/// Two rows (axial, coronal) of four panels: fixed, fixed + fixed labels,
/// fixed + moving labels, fixed + warped labels.
void write_overlay_png(const std::filesystem::path& path, const Volume<float>& fixed, const LabelMap& labels_fixed,
                       const LabelMap& labels_moving, const LabelMap& labels_warped);

/// 8-bit RGB PNG, rows top to bottom.
void write_png(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& rgb);

} // namespace eqreg
