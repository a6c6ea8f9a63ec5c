#include "eqreg/data.hpp"

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <functional>
#include <fstream>
#include <map>
#include <random>
#include <set>

namespace eqreg {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

Eigen::Matrix3d rotation(double a, double b, double c)
{
    return (Eigen::AngleAxisd(a, Vec3::UnitX()) * Eigen::AngleAxisd(b, Vec3::UnitY()) *
            Eigen::AngleAxisd(c, Vec3::UnitZ()))
        .toRotationMatrix();
}

Eigen::ArrayXd smooth_noise(const Dims& dims, double sigma, std::mt19937_64& rng)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::ArrayXd v(dims.count());
    for (Index i = 0; i < v.size(); ++i)
        v[i] = normal(rng);
    v = gaussian_smooth<double>(v, dims, sigma);
    const double sd = std::sqrt((v - v.mean()).square().mean());
    return sd > 0.0 ? Eigen::ArrayXd((v - v.mean()) / sd) : v;
}

struct Ellipsoid {
    Vec3 center;
    Eigen::Matrix3d axes_inv;   // maps p - center into the unit ball
    bool contains(const Vec3& p) const { return (axes_inv * (p - center)).squaredNorm() <= 1.0; }
};

DisplacementField<double> random_smooth_field(const PhantomSpec& spec, std::mt19937_64& rng)
{
    DisplacementField<double> u(spec.shape);
    if (spec.max_magnitude <= 0.0)
        return u;
    for (int c = 0; c < 3; ++c)
        u.component(c) = smooth_noise(spec.shape, spec.smoothness, rng);
    double peak = 0.0;
    for (Index i = 0; i < spec.shape.count(); ++i)
        peak = std::max(peak, u.at(i).norm());
    u.data *= spec.max_magnitude / peak;
    return u;
}

AffineTransform random_affine(const PhantomSpec& spec, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const double deg = M_PI / 180.0 * spec.affine_rotation_deg;
    const Eigen::Matrix3d rot = rotation(deg * unit(rng), deg * unit(rng), deg * unit(rng));
    const Vec3 scale(1.0 + spec.affine_scale * unit(rng), 1.0 + spec.affine_scale * unit(rng),
                     1.0 + spec.affine_scale * unit(rng));
    const Vec3 shift(spec.affine_translation * unit(rng), spec.affine_translation * unit(rng),
                     spec.affine_translation * unit(rng));
    const Vec3 c = 0.5 * Vec3(double(spec.shape.d - 1), double(spec.shape.h - 1), double(spec.shape.w - 1));
    AffineTransform t;
    t.linear = rot * scale.asDiagonal();
    t.translation = c - t.linear * c + shift;
    return t;
}

} // namespace

PhantomPair generate_phantom_pair(const PhantomSpec& spec)
{
    require(spec.shape.d >= 8 && spec.shape.h >= 8 && spec.shape.w >= 8, "phantom extent must be >= 8 per axis");
    require(spec.structures >= 1 && spec.radius_min > 0.0 && spec.radius_max >= spec.radius_min,
            "phantom needs >= 1 structure and 0 < radius_min <= radius_max");
    const Dims dims = spec.shape;
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::uniform_real_distribution<double> radius(spec.radius_min, spec.radius_max);

    const Vec3 center = 0.5 * Vec3(double(dims.d - 1), double(dims.h - 1), double(dims.w - 1));
    const Vec3 body_axes = 0.42 * Vec3(double(dims.d), double(dims.h), double(dims.w));
    const Ellipsoid body{center, body_axes.cwiseInverse().asDiagonal()};

    std::vector<Ellipsoid> organs;
    std::vector<double> level;
    for (int s = 0; s < spec.structures; ++s) {
        const Vec3 offset(unit(rng), unit(rng), unit(rng));
        const Vec3 axes(radius(rng), radius(rng), radius(rng));
        const Eigen::Matrix3d rot = rotation(M_PI * unit(rng), M_PI * unit(rng), M_PI * unit(rng));
        organs.push_back({center + 0.55 * offset.cwiseProduct(body_axes),
                          axes.cwiseInverse().asDiagonal() * rot.transpose()});
        level.push_back(0.4 + 0.6 * double(s) / double(std::max(1, spec.structures - 1)));
    }
    std::shuffle(level.begin(), level.end(), rng);

    PhantomPair out;
    out.fixed = Volume<float>(dims);
    out.labels_fixed = LabelMap(dims);
    const Eigen::ArrayXd texture = smooth_noise(dims, spec.texture_sigma, rng);
    Eigen::ArrayXd image = Eigen::ArrayXd::Zero(dims.count());
    for_each_voxel(dims, [&](Index flat, const Vec3& p) {
        if (!body.contains(p))
            return;
        double value = 0.2;
        for (std::size_t s = 0; s < organs.size(); ++s) {
            if (organs[s].contains(p)) {
                value = level[s];
                out.labels_fixed.labels[flat] = std::int32_t(s + 1);
            }
        }
        image[flat] = value * (1.0 + spec.texture_amplitude * texture[flat]);
    });
    out.fixed.data = gaussian_smooth<double>(image, dims, 0.6).cast<float>();

    // Smooth random field after a small affine; shrink until the map is non-folding.
    const DisplacementField<double> affine = affine_to_field<double>(random_affine(spec, rng), dims);
    DisplacementField<double> smooth = random_smooth_field(spec, rng);
    DisplacementField<double> u;
    for (int attempt = 0;; ++attempt) {
        u = compose(smooth, affine);
        if ((jacobian_determinant(u).data > 0.0).all() || attempt == 20)
            break;
        smooth.data *= 0.8;
    }
    out.u_true = u.cast<float>();
    out.moving = warp(out.fixed, out.u_true);
    out.labels_moving = warp_labels(out.labels_fixed, out.u_true);

    if (spec.noise > 0.0) {
        std::normal_distribution<double> normal(0.0, spec.noise);
        for (Index i = 0; i < dims.count(); ++i)
            out.fixed.data[i] += float(normal(rng));
        for (Index i = 0; i < dims.count(); ++i)
            out.moving.data[i] += float(normal(rng));
    }
    return out;
}

DisplacementField<float> invert_field(const DisplacementField<float>& u, int iterations)
{
    const Dims dims = u.dims;
    const Index n = dims.count();
    DisplacementField<double> v(dims);
    const DisplacementField<double> ud = u.cast<double>();
    for (int it = 0; it < iterations; ++it) {
        DisplacementField<double> next(dims);
        for_each_voxel(dims, [&](Index flat, const Vec3& p) {
            const auto t = trilinear_at<double>(dims, p + v.at(flat));
            for (int c = 0; c < 3; ++c)
                next.data[c * n + flat] = -t.sample(ud.data.data() + c * n);
        });
        v = std::move(next);
    }
    return v.cast<float>();
}

// ---------------------------------------------------------------------------
// IO

namespace {

bool ends_with(const std::string& s, const std::string& suffix)
{
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

fs::path sidecar_for(const fs::path& path)
{
    fs::path p = path;
    return p.replace_extension(".json");
}

std::vector<char> read_bytes(const fs::path& path)
{
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f)
        throw DataError("cannot open '" + path.string() + "'");
    std::vector<char> bytes;
    char buf[1 << 16];
    int got = 0;
    while ((got = gzread(f, buf, sizeof buf)) > 0)
        bytes.insert(bytes.end(), buf, buf + got);
    const bool failed = got < 0;
    gzclose(f);
    if (failed)
        throw DataError("read error in '" + path.string() + "'");
    return bytes;
}

void write_bytes(const fs::path& path, const std::vector<char>& bytes)
{
    if (!path.parent_path().empty())
        fs::create_directories(path.parent_path());
    if (ends_with(path.string(), ".gz")) {
        gzFile f = gzopen(path.string().c_str(), "wb6");
        if (!f || gzwrite(f, bytes.data(), unsigned(bytes.size())) != int(bytes.size())) {
            if (f)
                gzclose(f);
            throw DataError("cannot write '" + path.string() + "'");
        }
        gzclose(f);
        return;
    }
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out)
        throw DataError("cannot write '" + path.string() + "'");
}

static_assert(std::endian::native == std::endian::little, "raw and NIfTI IO assume a little-endian host");

template <typename T>
T load(const char* p)
{
    T v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

template <typename T>
void store(char* p, T v)
{
    std::memcpy(p, &v, sizeof v);
}

constexpr int kNiftiHeader = 348;

struct NiftiData {
    Dims dims;
    Vec3 spacing;
    NiftiMeta meta;
    Eigen::ArrayXd values;
};

NiftiData read_nifti(const fs::path& path)
{
    const std::vector<char> bytes = read_bytes(path);
    if (bytes.size() < std::size_t(kNiftiHeader))
        throw DataError("malformed NIfTI header in '" + path.string() + "': file shorter than 348 bytes");
    const char* h = bytes.data();
    if (load<std::int32_t>(h) != kNiftiHeader)
        throw DataError("malformed NIfTI header in '" + path.string() + "': sizeof_hdr != 348 (big-endian files unsupported)");
    if (std::memcmp(h + 344, "n+1", 4) != 0)
        throw DataError("malformed NIfTI header in '" + path.string() + "': magic is not n+1");
    const std::int16_t rank = load<std::int16_t>(h + 40);
    if (rank != 3)
        throw DataError("unsupported NIfTI rank " + std::to_string(rank) + " in '" + path.string() + "': only 3D volumes");
    NiftiData out;
    std::array<Index, 3> dim{};
    for (int a = 0; a < 3; ++a) {
        dim[std::size_t(a)] = load<std::int16_t>(h + 42 + 2 * a);
        if (dim[std::size_t(a)] < 1)
            throw DataError("malformed NIfTI header in '" + path.string() + "': non-positive dimension");
    }
    out.dims = {dim[2], dim[1], dim[0]};
    out.spacing = Vec3(load<float>(h + 76 + 12), load<float>(h + 76 + 8), load<float>(h + 76 + 4)).cwiseAbs();
    for (int a = 0; a < 3; ++a)
        if (!(out.spacing[a] > 0.0))
            out.spacing[a] = 1.0;
    const std::int16_t datatype = load<std::int16_t>(h + 70);
    const double offset = load<float>(h + 108);
    float slope = load<float>(h + 112);
    const float inter = load<float>(h + 116);
    if (slope == 0.0f || !std::isfinite(slope))
        slope = 1.0f;
    out.meta.sform_code = load<std::int16_t>(h + 254);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
            out.meta.srow(r, c) = load<float>(h + 280 + 16 * r + 4 * c);

    int width = 0;
    switch (datatype) {
    case 2: width = 1; break;    // uint8
    case 4: width = 2; break;    // int16
    case 8: width = 4; break;    // int32
    case 16: width = 4; break;   // float32
    case 64: width = 8; break;   // float64
    case 256: width = 1; break;  // int8
    case 512: width = 2; break;  // uint16
    default: throw DataError("unsupported NIfTI datatype " + std::to_string(datatype) + " in '" + path.string() + "'");
    }
    const Index count = out.dims.count();
    if (count > Index(1) << 31)
        throw DataError("NIfTI shape overflow in '" + path.string() + "'");
    const std::size_t start = std::size_t(offset);
    if (offset < kNiftiHeader || start + std::size_t(count) * std::size_t(width) > bytes.size())
        throw DataError("malformed NIfTI header in '" + path.string() + "': data extends past end of file");
    out.values.resize(count);
    const char* d = bytes.data() + start;
    for (Index i = 0; i < count; ++i) {
        const char* p = d + i * width;
        double v = 0.0;
        switch (datatype) {
        case 2: v = load<std::uint8_t>(p); break;
        case 4: v = load<std::int16_t>(p); break;
        case 8: v = load<std::int32_t>(p); break;
        case 16: v = load<float>(p); break;
        case 64: v = load<double>(p); break;
        case 256: v = load<std::int8_t>(p); break;
        case 512: v = load<std::uint16_t>(p); break;
        }
        out.values[i] = v * slope + inter;
    }
    return out;
}

void write_nifti(const fs::path& path, const Dims& dims, const Vec3& spacing, const NiftiMeta* meta, bool integer,
                 const std::function<void(char*)>& fill)
{
    const int width = 4;
    std::vector<char> bytes(352 + std::size_t(dims.count()) * width, 0);
    char* h = bytes.data();
    store<std::int32_t>(h, kNiftiHeader);
    store<std::int16_t>(h + 40, 3);
    store<std::int16_t>(h + 42, std::int16_t(dims.w));
    store<std::int16_t>(h + 44, std::int16_t(dims.h));
    store<std::int16_t>(h + 46, std::int16_t(dims.d));
    for (int a = 4; a < 8; ++a)
        store<std::int16_t>(h + 40 + 2 * a, 1);
    store<std::int16_t>(h + 70, integer ? 8 : 16);
    store<std::int16_t>(h + 72, 32);
    store<float>(h + 76, 1.0f);
    store<float>(h + 80, float(spacing[2]));
    store<float>(h + 84, float(spacing[1]));
    store<float>(h + 88, float(spacing[0]));
    store<float>(h + 108, 352.0f);
    store<float>(h + 112, 1.0f);
    store<std::uint8_t>(h + 123, 2);   // xyzt_units: mm
    Eigen::Matrix<double, 3, 4> srow = Eigen::Matrix<double, 3, 4>::Zero();
    std::int16_t sform = 0;
    if (meta && meta->sform_code > 0) {
        srow = meta->srow;
        sform = std::int16_t(meta->sform_code);
    } else {
        srow(0, 0) = spacing[2];
        srow(1, 1) = spacing[1];
        srow(2, 2) = spacing[0];
        sform = 2;
    }
    store<std::int16_t>(h + 254, sform);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
            store<float>(h + 280 + 16 * r + 4 * c, float(srow(r, c)));
    std::memcpy(h + 344, "n+1", 4);
    fill(h + 352);
    write_bytes(path, bytes);
}

struct RawData {
    std::vector<Index> shape;
    Vec3 spacing = Vec3::Ones();
    std::string dtype;
    std::string kind;
    std::vector<char> bytes;
};

RawData read_raw(const fs::path& path)
{
    const fs::path side = sidecar_for(path);
    std::ifstream in(side);
    if (!in)
        throw DataError("missing raw sidecar '" + side.string() + "'");
    json meta;
    try {
        in >> meta;
    } catch (const json::exception& e) {
        throw DataError("malformed raw sidecar '" + side.string() + "': " + e.what());
    }
    RawData out;
    try {
        out.shape = meta.at("shape").get<std::vector<Index>>();
        out.dtype = meta.value("dtype", std::string("float32"));
        out.kind = meta.value("kind", std::string("volume"));
        if (meta.contains("spacing")) {
            const auto sp = meta.at("spacing").get<std::vector<double>>();
            if (sp.size() != 3)
                throw DataError("malformed raw sidecar '" + side.string() + "': spacing needs 3 entries");
            out.spacing = Vec3(sp[0], sp[1], sp[2]);
        }
        if (meta.value("order", std::string("C")) != "C")
            throw DataError("unsupported raw order in '" + side.string() + "': only C order");
    } catch (const json::exception& e) {
        throw DataError("malformed raw sidecar '" + side.string() + "': " + e.what());
    }
    Index count = 1;
    for (Index s : out.shape) {
        if (s < 1 || count > (Index(1) << 40) / s)
            throw DataError("raw shape overflow in '" + side.string() + "'");
        count *= s;
    }
    if (out.dtype != "float32" && out.dtype != "int32")
        throw DataError("raw dtype mismatch in '" + side.string() + "': expected float32 or int32, got " + out.dtype);
    std::ifstream data(path, std::ios::binary);
    if (!data)
        throw DataError("cannot open '" + path.string() + "'");
    out.bytes.assign(std::istreambuf_iterator<char>(data), {});
    if (Index(out.bytes.size()) != 4 * count)
        throw DataError("raw payload size of '" + path.string() + "' does not match its sidecar shape");
    return out;
}

void write_raw(const fs::path& path, const std::vector<Index>& shape, const Vec3& spacing, const std::string& dtype,
               const std::string& kind, const char* data, std::size_t bytes)
{
    if (!path.parent_path().empty())
        fs::create_directories(path.parent_path());
    json meta = {{"shape", shape},
                 {"spacing", {spacing[0], spacing[1], spacing[2]}},
                 {"dtype", dtype},
                 {"order", "C"}};
    if (kind != "volume")
        meta["kind"] = kind;
    std::ofstream(sidecar_for(path)) << meta.dump(2) << "\n";
    std::ofstream out(path, std::ios::binary);
    out.write(data, std::streamsize(bytes));
    if (!out)
        throw DataError("cannot write '" + path.string() + "'");
}

Dims dims_of(const std::vector<Index>& shape, const fs::path& path)
{
    if (shape.size() != 3)
        throw DataError("raw volume '" + path.string() + "' must have a 3-entry shape");
    return {shape[0], shape[1], shape[2]};
}

} // namespace

VolumeFormat format_for_path(const fs::path& path)
{
    const std::string s = path.string();
    if (ends_with(s, ".nii") || ends_with(s, ".nii.gz"))
        return VolumeFormat::nifti;
    if (ends_with(s, ".raw"))
        return VolumeFormat::raw;
    throw DataError("unrecognized volume extension in '" + s + "' (expected .nii, .nii.gz or .raw)");
}

std::string extension_for(VolumeFormat format) { return format == VolumeFormat::nifti ? ".nii.gz" : ".raw"; }

Volume<float> read_volume(const fs::path& path, NiftiMeta* meta)
{
    if (format_for_path(path) == VolumeFormat::nifti) {
        NiftiData n = read_nifti(path);
        if (meta)
            *meta = n.meta;
        Volume<float> v(n.dims, 0.0f, n.spacing);
        v.data = n.values.cast<float>();
        return v;
    }
    RawData r = read_raw(path);
    if (r.dtype != "float32")
        throw DataError("raw dtype mismatch in '" + path.string() + "': volumes must be float32");
    Volume<float> v(dims_of(r.shape, path), 0.0f, r.spacing);
    std::memcpy(v.data.data(), r.bytes.data(), r.bytes.size());
    return v;
}

void write_volume(const Volume<float>& volume, const fs::path& path, const NiftiMeta* meta)
{
    if (format_for_path(path) == VolumeFormat::nifti) {
        write_nifti(path, volume.dims, volume.spacing, meta, false, [&](char* dst) {
            std::memcpy(dst, volume.data.data(), std::size_t(volume.data.size()) * 4);
        });
        return;
    }
    write_raw(path, {volume.dims.d, volume.dims.h, volume.dims.w}, volume.spacing, "float32", "volume",
              reinterpret_cast<const char*>(volume.data.data()), std::size_t(volume.data.size()) * 4);
}

LabelMap read_labels(const fs::path& path)
{
    if (format_for_path(path) == VolumeFormat::nifti) {
        NiftiData n = read_nifti(path);
        LabelMap l(n.dims);
        l.labels = n.values.round().cast<std::int32_t>();
        return l;
    }
    RawData r = read_raw(path);
    LabelMap l(dims_of(r.shape, path));
    if (r.dtype == "int32") {
        std::memcpy(l.labels.data(), r.bytes.data(), r.bytes.size());
    } else {
        Eigen::ArrayXf f(l.dims.count());
        std::memcpy(f.data(), r.bytes.data(), r.bytes.size());
        l.labels = f.round().cast<std::int32_t>();
    }
    return l;
}

void write_labels(const LabelMap& labels, const fs::path& path, const Vec3& spacing)
{
    if (format_for_path(path) == VolumeFormat::nifti) {
        write_nifti(path, labels.dims, spacing, nullptr, true, [&](char* dst) {
            std::memcpy(dst, labels.labels.data(), std::size_t(labels.labels.size()) * 4);
        });
        return;
    }
    write_raw(path, {labels.dims.d, labels.dims.h, labels.dims.w}, spacing, "int32", "labels",
              reinterpret_cast<const char*>(labels.labels.data()), std::size_t(labels.labels.size()) * 4);
}

DisplacementField<float> read_field(const fs::path& path)
{
    RawData r = read_raw(path);
    if (r.kind != "displacement")
        throw DataError("'" + path.string() + "' is not tagged as a displacement field");
    if (r.shape.size() != 4 || r.shape[0] != 3 || r.dtype != "float32")
        throw DataError("displacement field '" + path.string() + "' must be float32 with shape [3, D, H, W]");
    DisplacementField<float> f(Dims{r.shape[1], r.shape[2], r.shape[3]});
    std::memcpy(f.data.data(), r.bytes.data(), r.bytes.size());
    return f;
}

void write_field(const DisplacementField<float>& field, const fs::path& path)
{
    write_raw(path, {3, field.dims.d, field.dims.h, field.dims.w}, Vec3::Ones(), "float32", "displacement",
              reinterpret_cast<const char*>(field.data.data()), std::size_t(field.data.size()) * 4);
}

// ---------------------------------------------------------------------------
// Datasets

const VolumeEntry& Dataset::volume(const std::string& id) const
{
    for (const auto& v : volumes)
        if (v.id == id)
            return v;
    throw DataError("unknown volume id '" + id + "'");
}

std::vector<PairEntry> inter_subject_pairs(const std::vector<std::string>& ids, bool ordered)
{
    std::vector<PairEntry> out;
    for (std::size_t a = 0; a < ids.size(); ++a) {
        for (std::size_t b = a + 1; b < ids.size(); ++b) {
            out.push_back({ids[a], ids[b], std::nullopt});
            if (ordered)
                out.push_back({ids[b], ids[a], std::nullopt});
        }
    }
    return out;
}

Dataset build_dataset(const fs::path& manifest, const std::string& split)
{
    std::ifstream in(manifest);
    if (!in)
        throw DataError("cannot open manifest '" + manifest.string() + "'");
    json m;
    try {
        in >> m;
    } catch (const json::exception& e) {
        throw DataError("malformed manifest '" + manifest.string() + "': " + e.what());
    }
    const fs::path base = manifest.parent_path();
    auto resolve = [&](const std::string& p) {
        const fs::path path(p);
        return path.is_absolute() ? path : base / path;
    };

    Dataset ds;
    ds.split = split;
    std::set<std::string> seen;
    try {
        for (const auto& v : m.at("volumes")) {
            VolumeEntry e{v.at("id").get<std::string>(), resolve(v.at("path").get<std::string>()), std::nullopt};
            if (v.contains("labels_path") && !v.at("labels_path").is_null())
                e.labels = resolve(v.at("labels_path").get<std::string>());
            if (!seen.insert(e.id).second)
                throw DataError("duplicate volume id '" + e.id + "' in '" + manifest.string() + "'");
            if (!fs::exists(e.path))
                throw DataError("missing volume file '" + e.path.string() + "' for id '" + e.id + "'");
            if (e.labels && !fs::exists(*e.labels))
                throw DataError("missing label file '" + e.labels->string() + "' for id '" + e.id + "'");
            ds.volumes.push_back(std::move(e));
        }

        std::vector<std::string> ids;
        if (split.empty()) {
            for (const auto& v : ds.volumes)
                ids.push_back(v.id);
        } else {
            if (!m.contains("split") || !m.at("split").contains(split))
                throw DataError("manifest '" + manifest.string() + "' has no split '" + split + "'");
            ids = m.at("split").at(split).get<std::vector<std::string>>();
            for (const auto& id : ids)
                if (!seen.count(id))
                    throw DataError("split '" + split + "' lists unknown id '" + id + "'");
        }
        const std::set<std::string> members(ids.begin(), ids.end());

        const std::string mode = m.value("pairs_mode", std::string("inter"));
        if (mode == "inter") {
            ds.mode = PairsMode::inter;
            ds.pairs = inter_subject_pairs(ids, m.value("ordered_pairs", false));
        } else if (mode == "intra") {
            ds.mode = PairsMode::intra;
            for (const auto& p : m.at("pairs")) {
                PairEntry e;
                if (p.is_array()) {
                    e.fixed = p.at(0).get<std::string>();
                    e.moving = p.at(1).get<std::string>();
                } else {
                    e.fixed = p.at("fixed").get<std::string>();
                    e.moving = p.at("moving").get<std::string>();
                    if (p.contains("field") && !p.at("field").is_null())
                        e.field = resolve(p.at("field").get<std::string>());
                }
                if (!seen.count(e.fixed) || !seen.count(e.moving))
                    throw DataError("pair references unknown id in '" + manifest.string() + "'");
                if (members.count(e.fixed) && members.count(e.moving))
                    ds.pairs.push_back(std::move(e));
            }
        } else {
            throw DataError("pairs_mode must be 'inter' or 'intra', got '" + mode + "'");
        }
    } catch (const json::exception& e) {
        throw DataError("malformed manifest '" + manifest.string() + "': " + e.what());
    }
    return ds;
}

LoadedPair load_pair(const Dataset& dataset, Index index)
{
    require(index >= 0 && index < dataset.size(), "load_pair: index out of range");
    const PairEntry& p = dataset.pairs[std::size_t(index)];
    const VolumeEntry& f = dataset.volume(p.fixed);
    const VolumeEntry& m = dataset.volume(p.moving);
    LoadedPair out;
    out.id = p.fixed + "_" + p.moving;
    out.fixed = read_volume(f.path);
    out.moving = read_volume(m.path);
    if (!(out.fixed.dims == out.moving.dims))
        throw DataError("pair " + out.id + ": fixed and moving extents differ");
    if (f.labels && m.labels) {
        out.labels_fixed = read_labels(*f.labels);
        out.labels_moving = read_labels(*m.labels);
        if (!(out.labels_fixed->dims == out.fixed.dims) || !(out.labels_moving->dims == out.fixed.dims))
            throw DataError("pair " + out.id + ": label extent does not match the image");
    }
    if (p.field) {
        out.u_true = read_field(*p.field);
        if (!(out.u_true->dims == out.fixed.dims))
            throw DataError("pair " + out.id + ": ground-truth field extent does not match the image");
    }
    return out;
}

std::vector<LoadedPair> load_all(const Dataset& dataset)
{
    std::vector<LoadedPair> out;
    for (Index i = 0; i < dataset.size(); ++i)
        out.push_back(load_pair(dataset, i));
    return out;
}

std::vector<LoadedPair> phantom_pairs(const PhantomSpec& base, int count, std::uint64_t offset)
{
    std::vector<LoadedPair> out;
    for (int i = 0; i < count; ++i) {
        PhantomSpec spec = base;
        spec.seed = base.seed + offset + std::uint64_t(i);
        PhantomPair p = generate_phantom_pair(spec);
        out.push_back({"phantom" + std::to_string(spec.seed), std::move(p.fixed), std::move(p.moving),
                       std::move(p.labels_fixed), std::move(p.labels_moving), std::move(p.u_true)});
    }
    return out;
}

fs::path write_phantom_dataset(const fs::path& dir, const PhantomSpec& base, int train_pairs, int test_pairs,
                               VolumeFormat format)
{
    fs::create_directories(dir);
    const std::string ext = extension_for(format);
    json volumes = json::array(), pairs = json::array();
    json train = json::array(), test = json::array();
    for (int i = 0; i < train_pairs + test_pairs; ++i) {
        PhantomSpec spec = base;
        spec.seed = base.seed + std::uint64_t(i);
        const PhantomPair p = generate_phantom_pair(spec);
        char name[32];
        std::snprintf(name, sizeof name, "pair%03d", i);
        const std::string id(name);
        write_volume(p.fixed, dir / (id + "_fixed" + ext));
        write_volume(p.moving, dir / (id + "_moving" + ext));
        write_labels(p.labels_fixed, dir / (id + "_fixed_labels" + ext));
        write_labels(p.labels_moving, dir / (id + "_moving_labels" + ext));
        write_field(p.u_true, dir / (id + "_field.raw"));
        volumes.push_back({{"id", id + "_fixed"}, {"path", id + "_fixed" + ext}, {"labels_path", id + "_fixed_labels" + ext}});
        volumes.push_back(
            {{"id", id + "_moving"}, {"path", id + "_moving" + ext}, {"labels_path", id + "_moving_labels" + ext}});
        pairs.push_back({{"fixed", id + "_fixed"}, {"moving", id + "_moving"}, {"field", id + "_field.raw"}});
        json& split = i < train_pairs ? train : test;
        split.push_back(id + "_fixed");
        split.push_back(id + "_moving");
    }
    const json manifest = {{"volumes", volumes},
                           {"pairs_mode", "intra"},
                           {"pairs", pairs},
                           {"split", {{"train", train}, {"test", test}}}};
    const fs::path path = dir / "manifest.json";
    std::ofstream(path) << manifest.dump(2) << "\n";
    return path;
}

} // namespace eqreg
