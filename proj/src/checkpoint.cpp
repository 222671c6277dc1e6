#include "physgraph/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace physgraph {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'P', 'G', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_doubles(std::ofstream& os, const double* data, std::size_t n) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

std::uint32_t read_u32(std::ifstream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

void read_doubles(std::ifstream& is, double* data, std::size_t n) {
    is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

}  // namespace

Checkpoint Checkpoint::from_store(const nn::ParamStore& store, std::string arch,
                                  nlohmann::json config) {
    Checkpoint c;
    c.arch = std::move(arch);
    c.config = std::move(config);
    for (const auto& p : store.all()) {
        c.param_names.push_back(p.name);
        c.param_shapes.push_back(p.value.shape);
        c.param_trainable.push_back(p.trainable);
        c.param_values.push_back(p.value);
    }
    return c;
}

void Checkpoint::restore_store(nn::ParamStore& store) const {
    if (store.size() != param_names.size())
        throw std::runtime_error("checkpoint restore: parameter count mismatch (store " +
                                 std::to_string(store.size()) + ", checkpoint " +
                                 std::to_string(param_names.size()) + ")");
    for (std::size_t i = 0; i < param_names.size(); ++i) {
        nn::Param& p = store.all()[i];
        if (p.name != param_names[i])
            throw std::runtime_error("checkpoint restore: parameter name mismatch at index " +
                                     std::to_string(i) + ": store has '" + p.name +
                                     "', checkpoint has '" + param_names[i] + "'");
        if (p.value.shape != param_shapes[i])
            throw std::runtime_error("checkpoint restore: shape mismatch for '" + p.name + "': " +
                                     nn::shape_str(p.value.shape) + " vs " +
                                     nn::shape_str(param_shapes[i]));
        p.value = param_values[i];
        p.trainable = param_trainable[i];
    }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::json manifest;
    manifest["format_version"] = kVersion;
    manifest["arch"] = ckpt.arch;
    manifest["config"] = ckpt.config;
    nlohmann::json params = nlohmann::json::array();
    for (std::size_t i = 0; i < ckpt.param_names.size(); ++i) {
        params.push_back({{"name", ckpt.param_names[i]},
                          {"shape", ckpt.param_shapes[i]},
                          {"trainable", static_cast<bool>(ckpt.param_trainable[i])}});
    }
    manifest["params"] = params;
    manifest["adam"] = {{"present", ckpt.has_adam}, {"t", ckpt.adam_t}};
    nlohmann::json trainer = {{"present", ckpt.has_trainer}};
    if (ckpt.has_trainer) {
        trainer["update"] = ckpt.trainer.update;
        trainer["master_seed"] = ckpt.trainer.master_seed;
        trainer["best_sr"] = ckpt.trainer.best_sr;
        trainer["best_update"] = ckpt.trainer.best_update;
        nlohmann::json envs = nlohmann::json::array();
        for (const auto& e : ckpt.trainer.envs)
            envs.push_back({{"episode", e.episode},
                            {"episode_return", e.episode_return},
                            {"blob_len", e.blob.size()}});
        trainer["envs"] = envs;
    }
    manifest["trainer"] = trainer;

    std::string mjson = manifest.dump();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    write_u32(os, static_cast<std::uint32_t>(mjson.size()));
    os.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));

    for (const auto& a : ckpt.param_values) write_doubles(os, a.data.data(), a.data.size());
    if (ckpt.has_adam) {
        for (const auto& a : ckpt.adam_m) write_doubles(os, a.data.data(), a.data.size());
        for (const auto& a : ckpt.adam_v) write_doubles(os, a.data.data(), a.data.size());
    }
    if (ckpt.has_trainer)
        for (const auto& e : ckpt.trainer.envs) write_doubles(os, e.blob.data(), e.blob.size());
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    std::uint32_t version = read_u32(is);
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    std::uint32_t mlen = read_u32(is);
    std::string mjson(mlen, '\0');
    is.read(mjson.data(), mlen);
    if (!is) throw std::runtime_error("truncated checkpoint manifest: " + path);
    nlohmann::json manifest = nlohmann::json::parse(mjson);

    Checkpoint c;
    c.arch = manifest.at("arch").get<std::string>();
    c.config = manifest.at("config");
    for (const auto& p : manifest.at("params")) {
        c.param_names.push_back(p.at("name").get<std::string>());
        c.param_shapes.push_back(p.at("shape").get<nn::Shape>());
        c.param_trainable.push_back(p.at("trainable").get<bool>());
    }
    c.has_adam = manifest.at("adam").at("present").get<bool>();
    c.adam_t = manifest.at("adam").at("t").get<std::int64_t>();
    c.has_trainer = manifest.at("trainer").at("present").get<bool>();

    for (std::size_t i = 0; i < c.param_names.size(); ++i) {
        nn::Array a(c.param_shapes[i]);
        read_doubles(is, a.data.data(), a.data.size());
        c.param_values.push_back(std::move(a));
    }
    if (c.has_adam) {
        for (std::size_t i = 0; i < c.param_names.size(); ++i) {
            nn::Array a(c.param_shapes[i]);
            read_doubles(is, a.data.data(), a.data.size());
            c.adam_m.push_back(std::move(a));
        }
        for (std::size_t i = 0; i < c.param_names.size(); ++i) {
            nn::Array a(c.param_shapes[i]);
            read_doubles(is, a.data.data(), a.data.size());
            c.adam_v.push_back(std::move(a));
        }
    }
    if (c.has_trainer) {
        const auto& tj = manifest.at("trainer");
        c.trainer.update = tj.at("update").get<std::int64_t>();
        c.trainer.master_seed = tj.at("master_seed").get<std::uint64_t>();
        c.trainer.best_sr = tj.at("best_sr").get<double>();
        c.trainer.best_update = tj.at("best_update").get<std::int64_t>();
        for (const auto& ej : tj.at("envs")) {
            EnvSnapshot e;
            e.episode = ej.at("episode").get<std::int64_t>();
            e.episode_return = ej.at("episode_return").get<double>();
            e.blob.resize(ej.at("blob_len").get<std::size_t>());
            read_doubles(is, e.blob.data(), e.blob.size());
            c.trainer.envs.push_back(std::move(e));
        }
    }
    if (!is) throw std::runtime_error("truncated checkpoint payload: " + path);
    return c;
}

}  // namespace physgraph
