#pragma once

// Synthetic phantoms with known deformations, volume IO and dataset pairing.

#include "eqreg/grid.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace eqreg {

/// Textured ellipsoid scene deformed by a smooth random field plus a small affine.
struct PhantomSpec {
    Dims shape{48, 48, 48};
    int structures = 6;
    double radius_min = 3.5;           // structure semi-axes, voxels
    double radius_max = 6.5;
    double smoothness = 6.0;           // Gaussian sigma of the random field, voxels
    double max_magnitude = 4.0;        // max |u| of the smooth component, voxels
    double affine_rotation_deg = 4.0;  // per-axis jitter ranges
    double affine_scale = 0.04;
    double affine_translation = 2.5;
    double texture_sigma = 1.5;
    double texture_amplitude = 0.08;
    double noise = 0.01;               // i.i.d. Gaussian noise on both images
    std::uint64_t seed = 0;
};

struct PhantomPair {
    Volume<float> fixed;
    Volume<float> moving;
    LabelMap labels_fixed;
    LabelMap labels_moving;
    DisplacementField<float> u_true;   // moving = warp(fixed, u_true)
};

PhantomPair generate_phantom_pair(const PhantomSpec& spec);

/// v with v(p) = -u(p + v(p)), so warp(warp(I, u), v) ≈ I; fixed-point iteration.
DisplacementField<float> invert_field(const DisplacementField<float>& u, int iterations = 30);

// ---------------------------------------------------------------------------
// Volume IO

enum class VolumeFormat { nifti, raw };

VolumeFormat format_for_path(const std::filesystem::path& path);
std::string extension_for(VolumeFormat format);

/// NIfTI-1 header fields kept through a round-trip; orientation is stored, not interpreted.
struct NiftiMeta {
    int sform_code = 0;
    Eigen::Matrix<double, 3, 4> srow = Eigen::Matrix<double, 3, 4>::Zero();
};

Volume<float> read_volume(const std::filesystem::path& path, NiftiMeta* meta = nullptr);
void write_volume(const Volume<float>& volume, const std::filesystem::path& path, const NiftiMeta* meta = nullptr);

LabelMap read_labels(const std::filesystem::path& path);
void write_labels(const LabelMap& labels, const std::filesystem::path& path, const Vec3& spacing = Vec3::Ones());

/// Raw format only; the sidecar carries "kind": "displacement" and shape [3, D, H, W].
DisplacementField<float> read_field(const std::filesystem::path& path);
void write_field(const DisplacementField<float>& field, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Datasets

enum class PairsMode { inter, intra };

struct VolumeEntry {
    std::string id;
    std::filesystem::path path;
    std::optional<std::filesystem::path> labels;
};

struct PairEntry {
    std::string fixed;
    std::string moving;
    std::optional<std::filesystem::path> field;   // ground truth, moving = warp(fixed, field)
};

struct Dataset {
    std::vector<VolumeEntry> volumes;
    std::vector<PairEntry> pairs;
    PairsMode mode = PairsMode::inter;
    std::string split;

    const VolumeEntry& volume(const std::string& id) const;
    Index size() const { return static_cast<Index>(pairs.size()); }
};

/// Unordered pairs of distinct ids, n (n - 1) / 2 of them; both orders when `ordered`.
std::vector<PairEntry> inter_subject_pairs(const std::vector<std::string>& ids, bool ordered = false);

/// Reads a manifest; `split` selects ids listed under "split" (empty = all volumes).
Dataset build_dataset(const std::filesystem::path& manifest, const std::string& split = "");

struct LoadedPair {
    std::string id;
    Volume<float> fixed;
    Volume<float> moving;
    std::optional<LabelMap> labels_fixed;
    std::optional<LabelMap> labels_moving;
    std::optional<DisplacementField<float>> u_true;
};

LoadedPair load_pair(const Dataset& dataset, Index index);
std::vector<LoadedPair> load_all(const Dataset& dataset);

/// Writes `train` + `test` phantom pairs with a manifest; returns the manifest path.
std::filesystem::path write_phantom_dataset(const std::filesystem::path& dir, const PhantomSpec& base, int train_pairs,
                                            int test_pairs, VolumeFormat format);

/// In-memory phantom pairs with seeds base.seed + offset .. + offset + count - 1.
std::vector<LoadedPair> phantom_pairs(const PhantomSpec& base, int count, std::uint64_t offset = 0);

} // namespace eqreg
