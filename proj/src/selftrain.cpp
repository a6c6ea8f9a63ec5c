#include "eqreg/selftrain.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

namespace eqreg {

using json = nlohmann::json;

namespace {

std::uint64_t splitmix(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t mix(std::initializer_list<std::uint64_t> parts)
{
    std::uint64_t h = 0x2545f4914f6cdd1dULL;
    for (auto p : parts)
        h = splitmix(h ^ p);
    return h;
}

double seconds_since(std::chrono::steady_clock::time_point start)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

bool is_head(const std::string& name) { return name.rfind("head.", 0) == 0; }

} // namespace

void AugmentationSpec::validate() const
{
    require(scale_min > 0.0 && scale_max >= scale_min, "augmentation scale range must satisfy 0 < min <= max");
    require(rotation_deg >= 0.0 && shear >= 0.0 && shear < 0.5 && translation >= 0.0,
            "augmentation rotation, translation must be >= 0 and shear in [0, 0.5)");
    require(gamma_min > 0.0 && gamma_max >= gamma_min, "augmentation gamma range must satisfy 0 < min <= max");
    require(noise_min >= 0.0 && noise_max >= noise_min, "augmentation noise range must satisfy 0 <= min <= max");
    require(linear_min > 0.0 && linear_max >= linear_min, "augmentation linear range must satisfy 0 < min <= max");
}

AffineTransform sample_affine(const AugmentationSpec& spec, const Dims& dims, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::uniform_real_distribution<double> scale(spec.scale_min, spec.scale_max);
    const double rad = spec.rotation_deg * M_PI / 180.0;
    const Eigen::Matrix3d rot = (Eigen::AngleAxisd(rad * unit(rng), Vec3::UnitX()) *
                                 Eigen::AngleAxisd(rad * unit(rng), Vec3::UnitY()) *
                                 Eigen::AngleAxisd(rad * unit(rng), Vec3::UnitZ()))
                                    .toRotationMatrix();
    Eigen::Matrix3d shear = Eigen::Matrix3d::Identity();
    shear(0, 1) = spec.shear * unit(rng);
    shear(0, 2) = spec.shear * unit(rng);
    shear(1, 2) = spec.shear * unit(rng);
    const Vec3 s(scale(rng), scale(rng), scale(rng));
    const Vec3 t(spec.translation * unit(rng), spec.translation * unit(rng), spec.translation * unit(rng));
    const Vec3 c = 0.5 * Vec3(double(dims.d - 1), double(dims.h - 1), double(dims.w - 1));

    AffineTransform out;
    out.linear = rot * s.asDiagonal() * shear;
    out.translation = c - out.linear * c + t;
    if (!out.invertible())
        throw NumericalError("sampled augmentation affine is singular");
    return out;
}

IntensityParams sample_intensity(const AugmentationSpec& spec, std::mt19937_64& rng)
{
    IntensityParams p;
    p.gamma = std::uniform_real_distribution<double>(spec.gamma_min, spec.gamma_max)(rng);
    p.noise = std::uniform_real_distribution<double>(spec.noise_min, spec.noise_max)(rng);
    p.scale = std::uniform_real_distribution<double>(spec.linear_min, spec.linear_max)(rng);
    p.shift = std::uniform_real_distribution<double>(-spec.shift, spec.shift)(rng);
    p.noise_seed = rng();
    return p;
}

Volume<float> apply_intensity(const Volume<float>& image, const IntensityParams& p)
{
    const double lo = image.data.minCoeff();
    const double range = double(image.data.maxCoeff()) - lo;
    Volume<float> out = image;
    if (range <= 0.0)
        return out;
    std::mt19937_64 rng(p.noise_seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index i = 0; i < image.data.size(); ++i) {
        const double x = (double(image.data[i]) - lo) / range;
        double y = p.scale * std::pow(std::max(x, 0.0), p.gamma) + p.shift;
        if (p.noise > 0.0)
            y += p.noise * normal(rng);
        out.data[i] = float(lo + range * y);
    }
    return out;
}

DisplacementField<float> augment_field(const DisplacementField<float>& u, const AffineTransform& t_fixed,
                                       const AffineTransform& t_moving)
{
    require(t_fixed.invertible() && t_moving.invertible(), "augment_field: singular affine");
    const Dims dims = u.dims;
    const Index n = dims.count();
    const Eigen::Matrix3d am_inv = t_moving.linear.inverse();
    const Eigen::Matrix3d da = t_fixed.linear - t_moving.linear;
    const Vec3 db = t_fixed.translation - t_moving.translation;
    DisplacementField<float> out(dims);
    for_each_voxel(dims, [&](Index flat, const Vec3& q) {
        const auto tap = trilinear_at<float>(dims, t_fixed(q));
        Vec3 v;
        for (int c = 0; c < 3; ++c)
            v[c] = double(tap.sample(u.data.data() + c * n));
        out.set(flat, (am_inv * (da * q + db + v)).cast<float>());
    });
    return out;
}

AugmentedPair augment_pair(const Volume<float>& fixed, const Volume<float>& moving, const DisplacementField<float>& pseudo,
                           const AugmentationSpec& spec, std::uint64_t seed)
{
    require(pseudo.dims == fixed.dims && moving.dims == fixed.dims, "augment_pair: pseudo field must match the fixed grid");
    spec.validate();
    std::mt19937_64 rng(seed);
    AugmentedPair out;
    out.t_fixed = spec.pair_affine ? sample_affine(spec, fixed.dims, rng) : AffineTransform::identity();
    out.t_moving = spec.pair_affine ? sample_affine(spec, fixed.dims, rng) : AffineTransform::identity();
    out.fixed = out.t_fixed.is_identity() ? fixed : apply_affine_to_volume(fixed, out.t_fixed);
    out.moving = out.t_moving.is_identity() ? moving : apply_affine_to_volume(moving, out.t_moving);
    if (spec.intensity) {
        out.i_fixed = sample_intensity(spec, rng);
        out.i_moving = sample_intensity(spec, rng);
        out.fixed = apply_intensity(out.fixed, out.i_fixed);
        out.moving = apply_intensity(out.moving, out.i_moving);
    }
    out.pseudo = augment_field(pseudo, out.t_fixed, out.t_moving);
    return out;
}

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const
{
    require(stages >= 1, "stages must be >= 1");
    require(iters_per_stage >= 1 && batch_size >= 1, "iters_per_stage and batch_size must be >= 1");
    require(lr_min > 0.0 && lr_max >= lr_min, "learning rates must satisfy lr_max >= lr_min > 0");
    require(skip_budget >= 0, "skip_budget must be >= 0");
    require(pipeline.samples >= 1, "contrastive samples must be >= 1");
    pipeline.solver.validate();
    pipeline.weights.validate();
    augment.validate();
}

json to_json(const TrainConfig& c)
{
    const auto& s = c.pipeline.solver;
    const auto& a = c.augment;
    const auto& r = c.refine;
    return {
        {"stages", c.stages},
        {"iters_per_stage", c.iters_per_stage},
        {"batch_size", c.batch_size},
        {"lr_max", c.lr_max},
        {"lr_min", c.lr_min},
        {"seed", c.seed},
        {"net",
         {{"extractor_channels", c.net.extractor_channels},
          {"head_hidden", c.net.head_hidden},
          {"head_out", c.net.head_out},
          {"head_stride", c.net.head_stride},
          {"bn_momentum", c.net.bn_momentum},
          {"bn_eps", c.net.bn_eps},
          {"head_out_gain", c.net.head_out_gain}}},
        {"solver",
         {{"radius", s.radius},
          {"grid_stride", s.grid_stride},
          {"quantization", s.quantization},
          {"beta", s.beta},
          {"lambda", s.lambda},
          {"coupling_iters", s.coupling_iters}}},
        {"loss",
         {{"alpha", c.pipeline.weights.alpha},
          {"tau", c.pipeline.weights.tau},
          {"samples", c.pipeline.samples},
          {"registration", c.pipeline.registration},
          {"contrastive", c.pipeline.contrastive}}},
        {"augment",
         {{"geometric", a.geometric},
          {"intensity", a.intensity},
          {"pair_affine", a.pair_affine},
          {"rotation_deg", a.rotation_deg},
          {"scale", {a.scale_min, a.scale_max}},
          {"shear", a.shear},
          {"translation", a.translation},
          {"gamma", {a.gamma_min, a.gamma_max}},
          {"noise", {a.noise_min, a.noise_max}},
          {"linear", {a.linear_min, a.linear_max}},
          {"shift", a.shift}}},
        {"refine",
         {{"consistency", r.consistency},
          {"double_warp", r.double_warp},
          {"instance", r.instance},
          {"instance_iters", r.instance_cfg.iters},
          {"instance_lr", r.instance_cfg.lr},
          {"instance_lambda", r.instance_cfg.lambda},
          {"instance_control_stride", r.instance_cfg.control_stride}}},
        {"calibrate_norm", c.calibrate_norm},
        {"skip_budget", c.skip_budget},
        {"train_extractor", c.train_extractor},
        {"train_head", c.train_head},
        {"checkpoint_dir", c.checkpoint_dir},
        {"history_path", c.history_path},
    };
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& out)
{
    if (j.contains(key))
        out = j.at(key).get<T>();
}

void read_range(const json& j, const char* key, double& lo, double& hi)
{
    if (!j.contains(key))
        return;
    const auto v = j.at(key).get<std::vector<double>>();
    require(v.size() == 2, std::string("augment.") + key + " must be [min, max]");
    lo = v[0];
    hi = v[1];
}

} // namespace

TrainConfig train_config_from_json(const json& j)
{
    TrainConfig c;
    try {
        read(j, "stages", c.stages);
        read(j, "iters_per_stage", c.iters_per_stage);
        read(j, "batch_size", c.batch_size);
        read(j, "lr_max", c.lr_max);
        read(j, "lr_min", c.lr_min);
        read(j, "seed", c.seed);
        if (j.contains("net")) {
            const auto& n = j.at("net");
            read(n, "extractor_channels", c.net.extractor_channels);
            read(n, "head_hidden", c.net.head_hidden);
            read(n, "head_out", c.net.head_out);
            read(n, "head_stride", c.net.head_stride);
            read(n, "bn_momentum", c.net.bn_momentum);
            read(n, "bn_eps", c.net.bn_eps);
            read(n, "head_out_gain", c.net.head_out_gain);
        }
        if (j.contains("solver")) {
            const auto& s = j.at("solver");
            auto& o = c.pipeline.solver;
            read(s, "radius", o.radius);
            read(s, "grid_stride", o.grid_stride);
            read(s, "quantization", o.quantization);
            read(s, "beta", o.beta);
            read(s, "lambda", o.lambda);
            read(s, "coupling_iters", o.coupling_iters);
        }
        if (j.contains("loss")) {
            const auto& l = j.at("loss");
            read(l, "alpha", c.pipeline.weights.alpha);
            read(l, "tau", c.pipeline.weights.tau);
            read(l, "samples", c.pipeline.samples);
            read(l, "registration", c.pipeline.registration);
            read(l, "contrastive", c.pipeline.contrastive);
        }
        if (j.contains("augment")) {
            const auto& a = j.at("augment");
            auto& o = c.augment;
            read(a, "geometric", o.geometric);
            read(a, "intensity", o.intensity);
            read(a, "pair_affine", o.pair_affine);
            read(a, "rotation_deg", o.rotation_deg);
            read_range(a, "scale", o.scale_min, o.scale_max);
            read(a, "shear", o.shear);
            read(a, "translation", o.translation);
            read_range(a, "gamma", o.gamma_min, o.gamma_max);
            read_range(a, "noise", o.noise_min, o.noise_max);
            read_range(a, "linear", o.linear_min, o.linear_max);
            read(a, "shift", o.shift);
        }
        if (j.contains("refine")) {
            const auto& r = j.at("refine");
            auto& o = c.refine;
            read(r, "consistency", o.consistency);
            read(r, "double_warp", o.double_warp);
            read(r, "instance", o.instance);
            read(r, "instance_iters", o.instance_cfg.iters);
            read(r, "instance_lr", o.instance_cfg.lr);
            read(r, "instance_lambda", o.instance_cfg.lambda);
            read(r, "instance_control_stride", o.instance_cfg.control_stride);
        }
        read(j, "calibrate_norm", c.calibrate_norm);
        read(j, "skip_budget", c.skip_budget);
        read(j, "train_extractor", c.train_extractor);
        read(j, "train_head", c.train_head);
        read(j, "checkpoint_dir", c.checkpoint_dir);
        read(j, "history_path", c.history_path);
    } catch (const json::exception& e) {
        throw ContractError(std::string("invalid training config: ") + e.what());
    }
    c.validate();
    return c;
}

TrainConfig load_train_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open config '" + path.string() + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed config '" + path.string() + "': " + e.what());
    }
    return train_config_from_json(j);
}

double cosine_restart_lr(int iter_in_stage, int iters_per_stage, double lr_max, double lr_min)
{
    if (iters_per_stage <= 1)
        return lr_max;
    const double phase = double(iter_in_stage) / double(iters_per_stage - 1);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * phase));
}

// ---------------------------------------------------------------------------
// Pseudo-labels

TrainState initial_state(const TrainConfig& cfg)
{
    NetConfig net = cfg.net;
    net.seed = cfg.seed;
    TrainState s;
    s.params = initialize_params<float>(net);
    return s;
}

void calibrate_norm(NetParams<float>& params, const std::vector<const Volume<float>*>& images)
{
    require(!images.empty(), "calibrate_norm: no images");
    const double momentum = params.config.bn_momentum;
    params.config.bn_momentum = 1.0;
    Tape<float> tape;
    const auto bound = bind(tape, params, false, false);
    const auto x = tape.constant(image_batch<float>(images));
    project_features(params, bound, extract_features(params, bound, x, NormMode::train), NormMode::train);
    params.config.bn_momentum = momentum;
}

DisplacementField<float> refine_pseudo_label(NetParams<float>& params, const Volume<float>& fixed,
                                             const Volume<float>& moving, const TrainConfig& cfg,
                                             std::string* diagnostic, bool* not_worse, bool* fell_back)
{
    const SolverConfig& solver = cfg.pipeline.solver;
    const auto proj = project_images<float>(params, {&fixed, &moving});
    const DisplacementField<float> u_fm = solve_from_features(proj[0], proj[1], solver, fixed.dims);
    DisplacementField<float> u = u_fm;
    if (not_worse)
        *not_worse = true;
    if (fell_back)
        *fell_back = false;

    if (cfg.refine.consistency) {
        const DisplacementField<float> u_mf = solve_from_features(proj[1], proj[0], solver, fixed.dims);
        // u(p) = (u_fm(p) - u_mf(p + u_fm(p))) / 2
        const DisplacementField<float> back = compose(u_mf, u_fm);   // u_fm + u_mf(p + u_fm)
        u.data = u_fm.data - 0.5f * back.data;
    }
    if (cfg.refine.double_warp) {
        const Volume<float> warped = warp(moving, u);
        const auto pw = project_images<float>(params, {&warped});
        const DisplacementField<float> residual = solve_from_features(proj[0], pw[0], solver, fixed.dims);
        u = compose(u, residual);
    }
    if (!all_finite(u.data)) {
        if (diagnostic)
            *diagnostic = "non-finite field after consistency/double warping; kept the raw estimate";
        if (fell_back)
            *fell_back = true;
        return u_fm;
    }
    if (cfg.refine.instance) {
        const auto res = instance_optimize(proj[0], proj[1], u, cfg.refine.instance_cfg);
        u = res.field;
        if (fell_back)
            *fell_back = res.fell_back;
    }
    if (not_worse) {
        const double lambda = cfg.refine.instance_cfg.lambda;
        *not_worse = detail::objective_of(proj[0], proj[1], u, lambda) <= detail::objective_of(proj[0], proj[1], u_fm, lambda);
    }
    return u;
}

PseudoLabelStore generate_pseudo_labels(TrainState& state, const std::vector<LoadedPair>& pairs, const TrainConfig& cfg)
{
    PseudoLabelStore store;
    store.stage = state.stage + 1;
    for (const auto& p : pairs) {
        std::string diag;
        bool not_worse = true, fell_back = false;
        store.fields.push_back(refine_pseudo_label(state.params, p.fixed, p.moving, cfg, &diag, &not_worse, &fell_back));
        store.refined_not_worse += not_worse ? 1 : 0;
        store.fallbacks += fell_back ? 1 : 0;
        if (!diag.empty())
            store.diagnostics.push_back(p.id + ": " + diag);
    }
    return store;
}

// ---------------------------------------------------------------------------
// Training

namespace {

StepBatch<float> assemble_batch(const std::vector<Index>& members, const PseudoLabelStore& store,
                                const std::vector<LoadedPair>& pairs, const TrainConfig& cfg, std::uint64_t step_seed)
{
    const Index b = Index(members.size());
    StepBatch<float> batch;
    std::vector<AugmentedPair> aug;
    for (Index i = 0; i < b; ++i) {
        const Index k = members[std::size_t(i)];
        const auto& p = pairs[std::size_t(k)];
        aug.push_back(augment_pair(p.fixed, p.moving, store.fields[std::size_t(k)], cfg.augment, mix({step_seed, 1, std::uint64_t(i)})));
    }
    for (const auto& a : aug)
        batch.images.push_back(a.fixed);
    for (const auto& a : aug)
        batch.images.push_back(a.moving);
    for (const auto& a : aug)
        batch.targets.push_back(a.pseudo);

    const bool contrast = cfg.pipeline.contrastive && (cfg.pipeline.weights.alpha > 0.0 || !cfg.pipeline.registration);
    if (!contrast || (!cfg.augment.geometric && !cfg.augment.intensity))
        return batch;

    for (Index i = 0; i < b; ++i) {
        const auto& p = pairs[std::size_t(members[std::size_t(i)])];
        const auto& a = aug[std::size_t(i)];
        const Volume<float>* originals[2] = {&p.fixed, &p.moving};
        const AffineTransform transforms[2] = {a.t_fixed, a.t_moving};
        for (int side = 0; side < 2; ++side) {
            const std::uint64_t seed = mix({step_seed, 2, std::uint64_t(i), std::uint64_t(side)});
            const Index source = Index(batch.images.size());
            batch.images.push_back(*originals[side]);
            if (cfg.augment.geometric) {
                batch.contrast.push_back({side == 0 ? i : b + i, source, transforms[side], seed});
            } else {
                std::mt19937_64 rng(seed);
                batch.images.push_back(apply_intensity(*originals[side], sample_intensity(cfg.augment, rng)));
                batch.contrast.push_back({source + 1, source, AffineTransform::identity(), seed});
            }
        }
    }
    return batch;
}

} // namespace

void train_stage(TrainState& state, const PseudoLabelStore& store, const std::vector<LoadedPair>& pairs,
                 const TrainConfig& cfg)
{
    require(!pairs.empty() && store.fields.size() == pairs.size(), "train_stage: pseudo-label store does not match the pairs");
    const int stage = state.stage + 1;

    std::vector<Tensor<float>*> trained;
    std::vector<std::string> names;
    for (auto& e : state.params.entries) {
        if (e.trainable && (is_head(e.name) ? cfg.train_head : cfg.train_extractor)) {
            trained.push_back(&e.value);
            names.push_back(e.name);
        }
    }
    require(!trained.empty(), "train_stage: no trainable parameters");
    if (names != state.adam_names) {
        state.adam = Adam<float>{};
        state.adam_names = names;
    }

    const Index n = Index(pairs.size());
    const Index b = std::min<Index>(cfg.batch_size, n);
    std::mt19937_64 order_rng(mix({cfg.seed, 7, std::uint64_t(stage)}));
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index(0));
    std::shuffle(order.begin(), order.end(), order_rng);
    Index cursor = 0;

    int skips = 0;
    for (int it = 0; it < cfg.iters_per_stage; ++it) {
        std::vector<Index> members;
        for (Index i = 0; i < b; ++i) {
            if (cursor == n) {
                std::shuffle(order.begin(), order.end(), order_rng);
                cursor = 0;
            }
            members.push_back(order[std::size_t(cursor++)]);
        }
        const std::uint64_t step_seed = mix({cfg.seed, std::uint64_t(stage), std::uint64_t(it)});
        const StepBatch<float> batch = assemble_batch(members, store, pairs, cfg, step_seed);

        StepRecord rec;
        rec.stage = stage;
        rec.iter = it;
        rec.lr = cosine_restart_lr(it, cfg.iters_per_stage, cfg.lr_max, cfg.lr_min);

        Tape<float> tape;
        const auto graph = step_loss(tape, state.params, batch, cfg.pipeline, cfg.train_extractor, cfg.train_head);
        rec.reg = graph.values.reg;
        rec.contrast = graph.values.contrast;
        rec.total = graph.values.total;

        bool finite = std::isfinite(rec.total);
        GradientSet<float> grads;
        if (finite) {
            grads = gradients(graph.loss, state.params, graph.bound);
            for (const auto& [name, g] : grads.grads)
                finite = finite && all_finite(g.data);
        }
        if (!finite) {
            rec.skipped = true;
            state.history.push_back(rec);
            std::cerr << "stage " << stage << " iter " << it << ": non-finite loss or gradient, step skipped\n";
            if (++skips > cfg.skip_budget)
                throw NumericalError("training aborted: more than " + std::to_string(cfg.skip_budget) +
                                     " non-finite steps in stage " + std::to_string(stage));
            continue;
        }
        std::vector<const Tensor<float>*> g;
        for (const auto& name : names)
            g.push_back(&grads[name]);
        state.adam.step(trained, g, rec.lr);
        state.history.push_back(rec);
    }
}

TrainState run_training(const std::vector<LoadedPair>& pairs, const TrainConfig& cfg, const StageCallback& after_stage,
                        TrainState* resume)
{
    require(!pairs.empty(), "run_training: empty dataset");
    cfg.validate();
    TrainState state = resume ? std::move(*resume) : initial_state(cfg);

    if (cfg.calibrate_norm && state.stage == 0) {
        std::vector<const Volume<float>*> images;
        for (std::size_t i = 0; i < pairs.size() && images.size() < 8; ++i) {
            images.push_back(&pairs[i].fixed);
            images.push_back(&pairs[i].moving);
        }
        calibrate_norm(state.params, images);
    }

    std::ofstream history;
    if (!cfg.history_path.empty()) {
        const std::filesystem::path hp(cfg.history_path);
        if (!hp.parent_path().empty())
            std::filesystem::create_directories(hp.parent_path());
        history.open(hp, std::ios::app);
    }

    for (int t = state.stage + 1; t <= cfg.stages; ++t) {
        StageSummary summary;
        summary.stage = t;
        summary.pairs = Index(pairs.size());

        auto start = std::chrono::steady_clock::now();
        const PseudoLabelStore store = generate_pseudo_labels(state, pairs, cfg);
        summary.pseudo_seconds = seconds_since(start);
        summary.refined_not_worse = store.refined_not_worse;
        summary.fallbacks = store.fallbacks;
        for (const auto& d : store.diagnostics)
            std::cerr << "pseudo-label: " << d << "\n";

        const std::size_t first = state.history.size();
        start = std::chrono::steady_clock::now();
        train_stage(state, store, pairs, cfg);
        summary.train_seconds = seconds_since(start);
        state.stage = t;

        double acc = 0.0;
        Index counted = 0;
        for (std::size_t i = first; i < state.history.size(); ++i) {
            const auto& r = state.history[i];
            if (!r.skipped) {
                acc += r.total;
                ++counted;
            }
            if (history.is_open())
                history << json{{"stage", r.stage}, {"iter", r.iter},     {"lr", r.lr},          {"reg", r.reg},
                                {"contrast", r.contrast}, {"total", r.total}, {"skipped", r.skipped}}
                               .dump()
                        << "\n";
        }
        summary.mean_loss = counted ? acc / double(counted) : 0.0;
        state.stages.push_back(summary);

        if (after_stage)
            after_stage(state, t);
        if (!cfg.checkpoint_dir.empty()) {
            const json extra = {{"stage", t},
                                {"config", to_json(cfg)},
                                {"pseudo_labels",
                                 {{"generated_at_stage", store.stage},
                                  {"pairs", store.fields.size()},
                                  {"refined_not_worse", store.refined_not_worse},
                                  {"fallbacks", store.fallbacks}}}};
            save_checkpoint(std::filesystem::path(cfg.checkpoint_dir) / ("stage" + std::to_string(t) + ".ckpt"),
                            state.params, extra);
        }
    }
    return state;
}

Registration register_images(TrainState& state, const SolverConfig& solver, const Volume<float>& fixed,
                             const Volume<float>& moving)
{
    const auto start = std::chrono::steady_clock::now();
    Registration r;
    r.field = register_pair(state.params, solver, fixed, moving);
    r.seconds = seconds_since(start);
    return r;
}

} // namespace eqreg
