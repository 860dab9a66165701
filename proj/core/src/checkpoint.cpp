#include "lbt/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace lbt {

namespace {

constexpr char kMagic[8] = {'L', 'B', 'T', 'A', 'R', 'C', 'H', '1'};

static_assert(std::endian::native == std::endian::little,
              "archive format assumes a little-endian host");

void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

}  // namespace

void save_archive(const std::string& path, const TensorArchive& archive) {
    json index = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : archive.tensors) {
        index.push_back({{"name", name},
                         {"shape", tensor.shape},
                         {"offset", offset},
                         {"numel", tensor.numel()}});
        offset += tensor.numel();
    }
    json manifest = {{"format", "lbt-archive"},
                     {"version", 1},
                     {"dtype", "f64"},
                     {"byte_order", "little"},
                     {"arch", json::parse(arch_to_json_string(archive.arch))},
                     {"meta", archive.meta},
                     {"tensors", std::move(index)}};
    const std::string text = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_archive: cannot open " + path);
    out.write(kMagic, sizeof(kMagic));
    write_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, tensor] : archive.tensors) {
        out.write(reinterpret_cast<const char*>(tensor.data()),
                  static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("save_archive: write failed for " + path);
}

TensorArchive load_archive(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_archive: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("load_archive: not an lbt archive: " + path);
    const std::uint64_t manifest_len = read_u64(in);
    std::string text(manifest_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(manifest_len));
    if (!in) throw std::runtime_error("load_archive: truncated manifest in " + path);

    json manifest = json::parse(text);
    if (manifest.at("version").get<int>() != 1)
        throw std::runtime_error("load_archive: unsupported version");
    if (manifest.at("dtype").get<std::string>() != "f64" ||
        manifest.at("byte_order").get<std::string>() != "little")
        throw std::runtime_error("load_archive: unsupported data encoding");

    TensorArchive archive;
    archive.arch = arch_from_json_string(manifest.at("arch").dump());
    archive.meta =
        manifest.at("meta").get<std::map<std::string, std::string>>();
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        Tensor t{entry.at("shape").get<std::vector<int>>()};
        if (t.numel() != entry.at("numel").get<std::uint64_t>())
            throw std::runtime_error("load_archive: inconsistent tensor index");
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!in) throw std::runtime_error("load_archive: truncated data in " + path);
        archive.tensors.emplace(name, std::move(t));
    }
    return archive;
}

void save_params(const std::string& path, const DetectorParams& params) {
    TensorArchive archive;
    archive.arch = params.arch;
    archive.meta["kind"] = "detector_params";
    archive.tensors = params.tensors;
    save_archive(path, archive);
}

DetectorParams load_params(const std::string& path) {
    TensorArchive archive = load_archive(path);
    DetectorParams p;
    p.arch = archive.arch;
    p.tensors = std::move(archive.tensors);
    return p;
}

}  // namespace lbt
