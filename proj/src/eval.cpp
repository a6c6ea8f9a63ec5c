#include "eqreg/eval.hpp"

#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace eqreg {

using json = nlohmann::json;

DiceScores dice(const LabelMap& a, const LabelMap& b, const std::vector<std::int32_t>& labels)
{
    require(a.dims == b.dims, "dice: label maps differ in extent");
    std::map<std::int32_t, std::array<Index, 3>> counts;   // |A|, |B|, |A∩B|
    for (Index i = 0; i < a.labels.size(); ++i) {
        const std::int32_t la = a.labels[i], lb = b.labels[i];
        if (la != 0)
            ++counts[la][0];
        if (lb != 0)
            ++counts[lb][1];
        if (la != 0 && la == lb)
            ++counts[la][2];
    }
    DiceScores out;
    std::vector<std::int32_t> set = labels;
    if (set.empty())
        for (const auto& [l, c] : counts)
            set.push_back(l);
    double acc = 0.0;
    for (std::int32_t l : set) {
        const auto it = counts.find(l);
        if (it == counts.end() || it->second[0] + it->second[1] == 0)
            continue;
        const auto& c = it->second;
        const double d = 2.0 * double(c[2]) / double(c[0] + c[1]);
        out.per_label[l] = d;
        acc += d;
    }
    out.mean = out.per_label.empty() ? 1.0 : acc / double(out.per_label.size());
    return out;
}

std::vector<std::uint8_t> interior_mask(const Dims& dims)
{
    std::vector<std::uint8_t> mask(std::size_t(dims.count()), 0);
    for_each_voxel(dims, [&](Index flat, const Vec3& p) {
        bool inside = true;
        for (int a = 0; a < 3; ++a)
            inside = inside && p[a] >= 1.0 && p[a] <= double(dims[a] - 2);
        mask[std::size_t(flat)] = inside ? 1 : 0;
    });
    return mask;
}

JacobianStats sdlogj(const DisplacementField<float>& field, const std::vector<std::uint8_t>* mask)
{
    const auto det = jacobian_determinant(field.cast<double>());
    const std::vector<std::uint8_t> interior = mask ? std::vector<std::uint8_t>{} : interior_mask(field.dims);
    const std::vector<std::uint8_t>& m = mask ? *mask : interior;
    require(Index(m.size()) == field.dims.count(), "sdlogj: mask does not match the field");
    std::vector<double> logs;
    Index folded = 0;
    for (Index i = 0; i < field.dims.count(); ++i) {
        if (!m[std::size_t(i)])
            continue;
        folded += det.data[i] <= 0.0 ? 1 : 0;
        logs.push_back(std::log(std::max(det.data[i], 1e-6)));
    }
    JacobianStats out;
    if (logs.empty())
        return out;
    const double mean = std::accumulate(logs.begin(), logs.end(), 0.0) / double(logs.size());
    double var = 0.0;
    for (double l : logs)
        var += (l - mean) * (l - mean);
    out.sdlogj = std::sqrt(var / double(logs.size()));
    out.folding = double(folded) / double(logs.size());
    return out;
}

double endpoint_error(const DisplacementField<float>& u, const DisplacementField<float>& v)
{
    require(u.dims == v.dims, "endpoint_error: field extents differ");
    const Index n = u.dims.count();
    const Eigen::ArrayXd d = u.data.cast<double>() - v.data.cast<double>();
    return (d.segment(0, n).square() + d.segment(n, n).square() + d.segment(2 * n, n).square()).sqrt().mean();
}

MeanSd mean_sd(const std::vector<double>& values)
{
    MeanSd out;
    if (values.empty())
        return out;
    out.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
    double var = 0.0;
    for (double v : values)
        var += (v - out.mean) * (v - out.mean);
    out.sd = values.size() > 1 ? std::sqrt(var / double(values.size() - 1)) : 0.0;
    return out;
}

namespace {

template <typename Fn>
std::vector<double> collect(const std::vector<PairMetrics>& pairs, Fn&& fn)
{
    std::vector<double> out;
    for (const auto& p : pairs)
        if (auto v = fn(p))
            out.push_back(*v);
    return out;
}

std::optional<MeanSd> dice_of(const std::vector<PairMetrics>& pairs)
{
    const auto v = collect(pairs, [](const PairMetrics& p) -> std::optional<double> {
        return p.dice ? std::optional<double>(p.dice->mean) : std::nullopt;
    });
    return v.empty() ? std::nullopt : std::optional<MeanSd>(mean_sd(v));
}

json metrics_json(const PairMetrics& p)
{
    json j = {{"id", p.id},
              {"sdlogj", p.jacobian.sdlogj},
              {"folding_fraction", p.jacobian.folding},
              {"seconds", p.seconds}};
    if (p.dice) {
        json per = json::object();
        for (const auto& [l, d] : p.dice->per_label)
            per[std::to_string(l)] = d;
        j["dice"] = p.dice->mean;
        j["dice_per_label"] = per;
    }
    if (p.epe)
        j["epe"] = *p.epe;
    return j;
}

json mean_sd_json(const MeanSd& m) { return {{"mean", m.mean}, {"sd", m.sd}}; }

} // namespace

std::optional<MeanSd> EvalReport::dice() const { return dice_of(pairs); }
std::optional<MeanSd> EvalReport::initial_dice() const { return dice_of(initial); }

std::optional<double> EvalReport::dice_structure_first() const
{
    std::map<std::int32_t, std::vector<double>> per;
    for (const auto& p : pairs)
        if (p.dice)
            for (const auto& [l, d] : p.dice->per_label)
                per[l].push_back(d);
    if (per.empty())
        return std::nullopt;
    double acc = 0.0;
    for (const auto& [l, v] : per)
        acc += mean_sd(v).mean;
    return acc / double(per.size());
}

MeanSd EvalReport::sdlogj() const
{
    return mean_sd(collect(pairs, [](const PairMetrics& p) -> std::optional<double> { return p.jacobian.sdlogj; }));
}

MeanSd EvalReport::seconds() const
{
    return mean_sd(collect(pairs, [](const PairMetrics& p) -> std::optional<double> { return p.seconds; }));
}

std::optional<MeanSd> EvalReport::epe() const
{
    const auto v = collect(pairs, [](const PairMetrics& p) { return p.epe; });
    return v.empty() ? std::nullopt : std::optional<MeanSd>(mean_sd(v));
}

json to_json(const EvalReport& r)
{
    json pairs = json::array(), initial = json::array();
    for (const auto& p : r.pairs)
        pairs.push_back(metrics_json(p));
    for (const auto& p : r.initial)
        initial.push_back(metrics_json(p));
    json agg = {{"sdlogj", mean_sd_json(r.sdlogj())}, {"seconds", mean_sd_json(r.seconds())}};
    if (auto d = r.dice())
        agg["dice"] = mean_sd_json(*d);
    if (auto d = r.dice_structure_first())
        agg["dice_structure_first"] = *d;
    if (auto e = r.epe())
        agg["epe"] = mean_sd_json(*e);
    json init = json::object();
    if (auto d = r.initial_dice())
        init["dice"] = mean_sd_json(*d);
    return {{"method", r.method},
            {"config_fingerprint", r.config_fingerprint},
            {"seed", r.seed},
            {"aggregate", agg},
            {"initial", init},
            {"pairs", pairs},
            {"initial_pairs", initial},
            {"warnings", r.warnings}};
}

EvalReport evaluate_with(const std::vector<LoadedPair>& pairs, const FieldFn& fn, int repetitions)
{
    require(repetitions >= 1, "evaluate: repetitions must be >= 1");
    EvalReport report;
    bool warned = false;
    for (const auto& p : pairs) {
        const bool labelled = p.labels_fixed && p.labels_moving;
        if (!labelled && !p.u_true && !warned) {
            report.warnings.push_back("no labels and no ground-truth fields: report restricted to SDlogJ and timing");
            warned = true;
        }
        std::vector<double> times;
        Registration reg;
        for (int r = 0; r < repetitions; ++r) {
            reg = fn(p);
            times.push_back(reg.seconds);
        }
        std::nth_element(times.begin(), times.begin() + long(times.size() / 2), times.end());

        PairMetrics m;
        m.id = p.id;
        m.seconds = times[times.size() / 2];
        m.jacobian = sdlogj(reg.field);
        PairMetrics zero;
        zero.id = p.id;
        const DisplacementField<float> none(p.fixed.dims);
        if (labelled) {
            m.dice = dice(*p.labels_fixed, warp_labels(*p.labels_moving, reg.field));
            zero.dice = dice(*p.labels_fixed, *p.labels_moving);
        }
        if (p.u_true) {
            const DisplacementField<float> target = invert_field(*p.u_true);
            m.epe = endpoint_error(reg.field, target);
            zero.epe = endpoint_error(none, target);
        }
        report.pairs.push_back(std::move(m));
        report.initial.push_back(std::move(zero));
    }
    return report;
}

EvalReport evaluate(TrainState& state, const SolverConfig& solver, const std::vector<LoadedPair>& pairs, int repetitions)
{
    return evaluate_with(
        pairs, [&](const LoadedPair& p) { return register_images(state, solver, p.fixed, p.moving); }, repetitions);
}

double wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y)
{
    require(x.size() == y.size(), "wilcoxon: samples differ in length");
    std::vector<double> d;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] != y[i])
            d.push_back(x[i] - y[i]);
    const std::size_t n = d.size();
    if (n == 0)
        return 1.0;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return std::abs(d[a]) < std::abs(d[b]); });
    // Doubled mid-ranks keep tied ranks integral.
    std::vector<long> rank2(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && std::abs(d[idx[j + 1]]) == std::abs(d[idx[i]]))
            ++j;
        for (std::size_t k = i; k <= j; ++k)
            rank2[idx[k]] = long(i + j + 2);
        i = j + 1;
    }
    long w_plus = 0, total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        total += rank2[i];
        if (d[i] > 0)
            w_plus += rank2[i];
    }
    const double centre = double(total) / 2.0;
    const double observed = std::abs(double(w_plus) - centre);

    if (n > 25) {
        double var = 0.0;
        for (long r : rank2)
            var += double(r) * double(r);
        const double z = observed / std::sqrt(var / 4.0);   // Var(W+) = Σ r^2 / 4 with r = r2 / 2, in doubled units
        return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    }
    // Exact null distribution of W+ over all 2^n sign assignments.
    std::vector<double> dist(std::size_t(total) + 1, 0.0);
    dist[0] = 1.0;
    for (long r : rank2)
        for (long s = total; s >= r; --s)
            dist[std::size_t(s)] += dist[std::size_t(s - r)];
    const double all = std::ldexp(1.0, int(n));
    double tail = 0.0;
    for (long s = 0; s <= total; ++s)
        if (std::abs(double(s) - centre) >= observed - 1e-9)
            tail += dist[std::size_t(s)];
    return std::min(1.0, tail / all);
}

std::string config_fingerprint(const TrainConfig& cfg)
{
    json j = to_json(cfg);
    j.erase("checkpoint_dir");
    j.erase("history_path");
    const std::string text = j.dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text)
        h = (h ^ c) * 1099511628211ULL;
    std::ostringstream out;
    out << std::hex << h;
    return out.str();
}

// ---------------------------------------------------------------------------
// Ablation

std::string AblationCell::name() const
{
    const char* loss_name = loss == LossMode::registration_only ? "reg_only"
                            : loss == LossMode::frozen_pretrain ? "contrastive_pretrain_frozen"
                                                                 : "joint";
    std::string aug = geometric && intensity ? "Tg+Ti" : geometric ? "Tg" : intensity ? "Ti" : "none";
    return std::string(loss_name) + "/" + aug;
}

std::vector<AblationCell> full_ablation_grid()
{
    std::vector<AblationCell> out;
    for (LossMode loss : {LossMode::registration_only, LossMode::frozen_pretrain, LossMode::joint})
        for (auto [g, i] : {std::pair{true, false}, std::pair{false, true}, std::pair{true, true}, std::pair{false, false}})
            out.push_back({loss, g, i});
    return out;
}

TrainConfig configure_cell(const TrainConfig& base, const AblationCell& cell)
{
    TrainConfig c = base;
    c.augment.geometric = cell.geometric;
    c.augment.intensity = cell.intensity;
    c.pipeline.registration = true;
    c.train_extractor = true;
    c.train_head = true;
    switch (cell.loss) {
    case LossMode::registration_only:
        c.pipeline.weights.alpha = 0.0;
        c.pipeline.contrastive = false;
        break;
    case LossMode::frozen_pretrain:
        c.pipeline.weights.alpha = 0.0;
        c.pipeline.contrastive = false;
        c.train_extractor = false;
        break;
    case LossMode::joint:
        c.pipeline.contrastive = true;
        if (c.pipeline.weights.alpha <= 0.0)
            c.pipeline.weights.alpha = 1.0;
        break;
    }
    return c;
}

TrainState train_cell(const std::vector<LoadedPair>& train, const TrainConfig& base, const AblationCell& cell,
                      int pretrain_iters)
{
    const TrainConfig cfg = configure_cell(base, cell);
    if (cell.loss != LossMode::frozen_pretrain)
        return run_training(train, cfg);

    // Contrastive-only pretraining of G and P, then registration training with G frozen.
    TrainConfig pre = base;
    pre.augment.geometric = cell.geometric;
    pre.augment.intensity = cell.intensity;
    pre.pipeline.registration = false;
    pre.pipeline.contrastive = true;
    pre.iters_per_stage = pretrain_iters > 0 ? pretrain_iters : base.stages * base.iters_per_stage;
    pre.stages = 1;
    TrainState state = initial_state(pre);
    if (cell.geometric || cell.intensity) {
        PseudoLabelStore zero;
        for (const auto& p : train)
            zero.fields.emplace_back(p.fixed.dims);
        train_stage(state, zero, train, pre);
    }
    state.stage = 0;
    return run_training(train, cfg, {}, &state);
}

std::vector<AblationResult> ablation_run(const std::vector<LoadedPair>& train, const std::vector<LoadedPair>& test,
                                         const TrainConfig& base, const AblationSettings& settings,
                                         const std::function<void(const std::string&)>& log)
{
    const auto cells = settings.cells.empty() ? full_ablation_grid() : settings.cells;
    std::vector<AblationResult> out;
    for (const auto& cell : cells) {
        AblationResult r;
        r.cell = cell;
        for (std::uint64_t seed : settings.seeds) {
            TrainConfig cfg = base;
            cfg.seed = seed;
            cfg.checkpoint_dir.clear();
            cfg.history_path.clear();
            TrainState state = train_cell(train, cfg, cell, settings.pretrain_iters);
            const EvalReport rep = evaluate(state, cfg.pipeline.solver, test, 1);
            r.dice.push_back(rep.dice() ? rep.dice()->mean : 0.0);
            r.sdlogj.push_back(rep.sdlogj().mean);
            if (log)
                log(cell.name() + " seed " + std::to_string(seed) + ": dice " + std::to_string(r.dice.back()));
        }
        r.mean_dice = mean_sd(r.dice).mean;
        r.mean_sdlogj = mean_sd(r.sdlogj).mean;
        out.push_back(std::move(r));
    }
    return out;
}

json ablation_json(const std::vector<AblationResult>& results)
{
    json rows = json::array();
    for (const auto& r : results)
        rows.push_back({{"cell", r.cell.name()},
                        {"geometric", r.cell.geometric},
                        {"intensity", r.cell.intensity},
                        {"dice", r.dice},
                        {"sdlogj", r.sdlogj},
                        {"mean_dice", r.mean_dice},
                        {"mean_sdlogj", r.mean_sdlogj}});
    return {{"rows", rows}};
}

std::string ablation_markdown(const std::vector<AblationResult>& results)
{
    std::ostringstream out;
    out << "| Loss | T_g | T_i | DSC | SDlogJ | seeds |\n|---|---|---|---|---|---|\n";
    out.setf(std::ios::fixed);
    out.precision(4);
    for (const auto& r : results) {
        const std::string name = r.cell.name();
        out << "| " << name.substr(0, name.find('/')) << " | " << (r.cell.geometric ? "x" : "") << " | "
            << (r.cell.intensity ? "x" : "") << " | " << r.mean_dice << " | " << r.mean_sdlogj << " | " << r.dice.size()
            << " |\n";
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// PNG overlays

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v)
{
    for (int s = 24; s >= 0; s -= 8)
        out.push_back(std::uint8_t(v >> s));
}

void put_chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data)
{
    put_u32(out, std::uint32_t(data.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    put_u32(out, std::uint32_t(crc32(0L, out.data() + start, uInt(out.size() - start))));
}

const std::array<std::array<std::uint8_t, 3>, 8> kPalette{{{230, 25, 75},
                                                           {60, 180, 75},
                                                           {255, 225, 25},
                                                           {0, 130, 200},
                                                           {245, 130, 48},
                                                           {145, 30, 180},
                                                           {70, 240, 240},
                                                           {240, 50, 230}}};

} // namespace

void write_png(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& rgb)
{
    require(width > 0 && height > 0 && rgb.size() == std::size_t(width) * std::size_t(height) * 3,
            "write_png: pixel buffer does not match the size");
    std::vector<std::uint8_t> raw;
    raw.reserve(std::size_t(height) * (std::size_t(width) * 3 + 1));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), rgb.begin() + long(y) * width * 3, rgb.begin() + long(y + 1) * width * 3);
    }
    uLongf size = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> packed(size);
    if (compress2(packed.data(), &size, raw.data(), uLong(raw.size()), 6) != Z_OK)
        throw DataError("PNG compression failed");
    packed.resize(size);

    std::vector<std::uint8_t> png{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<std::uint8_t> ihdr;
    put_u32(ihdr, std::uint32_t(width));
    put_u32(ihdr, std::uint32_t(height));
    ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});
    put_chunk(png, "IHDR", ihdr);
    put_chunk(png, "IDAT", packed);
    put_chunk(png, "IEND", {});
    if (!path.parent_path().empty())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(png.data()), std::streamsize(png.size()));
    if (!out)
        throw DataError("cannot write '" + path.string() + "'");
}

void write_overlay_png(const std::filesystem::path& path, const Volume<float>& fixed, const LabelMap& labels_fixed,
                       const LabelMap& labels_moving, const LabelMap& labels_warped)
{
    const Dims d = fixed.dims;
    require(labels_fixed.dims == d && labels_moving.dims == d && labels_warped.dims == d,
            "overlay: label maps must match the fixed image");
    const float lo = fixed.data.minCoeff(), hi = fixed.data.maxCoeff();
    const float range = hi > lo ? hi - lo : 1.0f;

    // Row 0: axial slice (middle of D), H x W. Row 1: coronal slice (middle of H), D x W.
    const int pw = int(d.w);
    const int ph = int(std::max(d.h, d.d));
    const int width = 4 * pw, height = 2 * ph;
    std::vector<std::uint8_t> rgb(std::size_t(width) * std::size_t(height) * 3, 0);
    const LabelMap* overlays[4] = {nullptr, &labels_fixed, &labels_moving, &labels_warped};

    for (int row = 0; row < 2; ++row) {
        const Index rows = row == 0 ? d.h : d.d;
        for (int panel = 0; panel < 4; ++panel) {
            for (Index r = 0; r < rows; ++r) {
                for (Index k = 0; k < d.w; ++k) {
                    const Index flat = row == 0 ? d.flat(d.d / 2, r, k) : d.flat(r, d.h / 2, k);
                    const auto g = std::uint8_t(std::clamp((fixed.data[flat] - lo) / range, 0.0f, 1.0f) * 255.0f);
                    std::array<double, 3> c{double(g), double(g), double(g)};
                    if (overlays[panel]) {
                        const std::int32_t l = overlays[panel]->labels[flat];
                        if (l > 0) {
                            const auto& col = kPalette[std::size_t(l - 1) % kPalette.size()];
                            for (int ch = 0; ch < 3; ++ch)
                                c[std::size_t(ch)] = 0.5 * c[std::size_t(ch)] + 0.5 * col[std::size_t(ch)];
                        }
                    }
                    const std::size_t px = (std::size_t(row * ph + r) * std::size_t(width) + std::size_t(panel * pw + k)) * 3;
                    for (int ch = 0; ch < 3; ++ch)
                        rgb[px + std::size_t(ch)] = std::uint8_t(c[std::size_t(ch)]);
                }
            }
        }
    }
    write_png(path, width, height, rgb);
}

} // namespace eqreg
