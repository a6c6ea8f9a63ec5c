#include "eqreg/selftrain.hpp"

#include <cstring>
#include <fstream>

namespace eqreg {

using json = nlohmann::json;

namespace {

constexpr char kMagic[8] = {'E', 'Q', 'R', 'G', 'C', 'K', 'P', 'T'};

json net_config_json(const NetConfig& c)
{
    return {{"extractor_channels", c.extractor_channels},
            {"head_hidden", c.head_hidden},
            {"head_out", c.head_out},
            {"head_stride", c.head_stride},
            {"bn_momentum", c.bn_momentum},
            {"bn_eps", c.bn_eps},
            {"head_out_gain", c.head_out_gain},
            {"seed", c.seed}};
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const NetParams<float>& params, const json& extra)
{
    json arrays = json::array();
    std::uint64_t offset = 0;
    for (const auto& e : params.entries) {
        arrays.push_back({{"name", e.name}, {"shape", e.value.shape}, {"trainable", e.trainable}, {"offset", offset}});
        offset += std::uint64_t(e.value.size()) * 4;
    }
    json manifest = {{"format", 1}, {"dtype", "float32"}, {"byte_order", "little"},
                     {"net", net_config_json(params.config)}, {"arrays", arrays}};
    if (!extra.empty())
        manifest["training"] = extra;
    const std::string text = manifest.dump();

    if (!path.parent_path().empty())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    const std::uint64_t length = text.size();
    out.write(kMagic, 8);
    out.write(reinterpret_cast<const char*>(&length), 8);
    out.write(text.data(), std::streamsize(text.size()));
    for (const auto& e : params.entries)
        out.write(reinterpret_cast<const char*>(e.value.data.data()), std::streamsize(e.value.size() * 4));
    if (!out)
        throw DataError("cannot write checkpoint '" + path.string() + "'");
}

NetParams<float> load_checkpoint(const std::filesystem::path& path, json* manifest_out)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open checkpoint '" + path.string() + "'");
    char magic[8] = {};
    std::uint64_t length = 0;
    in.read(magic, 8);
    in.read(reinterpret_cast<char*>(&length), 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError("'" + path.string() + "' is not a checkpoint (bad magic)");
    if (length > (1u << 26))
        throw DataError("checkpoint '" + path.string() + "' has an implausible manifest length");
    std::string text(length, '\0');
    in.read(text.data(), std::streamsize(length));
    json manifest;
    NetParams<float> params;
    try {
        manifest = json::parse(text);
        const auto& n = manifest.at("net");
        auto& c = params.config;
        c.extractor_channels = n.at("extractor_channels").get<std::vector<Index>>();
        c.head_hidden = n.at("head_hidden").get<Index>();
        c.head_out = n.at("head_out").get<Index>();
        c.head_stride = n.at("head_stride").get<Index>();
        c.bn_momentum = n.at("bn_momentum").get<double>();
        c.bn_eps = n.at("bn_eps").get<double>();
        c.head_out_gain = n.value("head_out_gain", 1.0);
        c.seed = n.value("seed", std::uint64_t{0});
        for (const auto& a : manifest.at("arrays")) {
            Tensor<float> t(a.at("shape").get<std::vector<Index>>());
            in.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.size() * 4));
            params.entries.push_back({a.at("name").get<std::string>(), std::move(t), a.at("trainable").get<bool>()});
        }
    } catch (const json::exception& e) {
        throw DataError("malformed checkpoint manifest in '" + path.string() + "': " + e.what());
    }
    if (!in)
        throw DataError("checkpoint '" + path.string() + "' is truncated");

    // The layout must match what this configuration initializes.
    const NetParams<float> expected = initialize_params<float>(params.config);
    if (expected.entries.size() != params.entries.size())
        throw DataError("checkpoint '" + path.string() + "' does not match its network configuration");
    for (std::size_t i = 0; i < expected.entries.size(); ++i)
        if (expected.entries[i].name != params.entries[i].name || expected.entries[i].value.shape != params.entries[i].value.shape)
            throw DataError("checkpoint '" + path.string() + "': unexpected array '" + params.entries[i].name + "'");
    if (!params.finite())
        throw NumericalError("checkpoint '" + path.string() + "' contains non-finite parameters");
    if (manifest_out)
        *manifest_out = std::move(manifest);
    return params;
}

} // namespace eqreg
