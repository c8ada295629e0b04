#pragma once

// Dataset manifests, per-sample array triples, and label -> pixel-role remapping.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "neco/error.hpp"
#include "neco/tensor.hpp"

namespace neco {

enum class Split { train, val_id, test };

inline std::string split_name(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val_id: return "val_id";
    case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val_id") return Split::val_id;
    if (s == "test") return Split::test;
    throw DataError("unknown split '" + s + "' (expected train, val_id or test)");
}

struct SampleEntry {
    std::string id;
    std::string feature_path;
    std::string logit_path;
    std::string label_path;
    std::string condition;
    Split split = Split::test;
};

struct DatasetManifest {
    std::string version = "1.0";
    int num_classes = 0;
    int ignore_label = 255;
    std::string feature_layer;  // optional, recorded by the exporter
    std::vector<SampleEntry> samples;

    std::filesystem::path root;  // directory relative paths resolve against
    std::string content_hash;    // FNV-1a of the manifest bytes, hex

    std::filesystem::path resolve(const std::string& rel) const { return root / rel; }

    std::vector<std::size_t> indices_of(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (samples[i].split == s) out.push_back(i);
        return out;
    }
};

inline std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Parses manifest JSON text; sample paths resolve against `root`.
inline DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& root,
                                      bool check_paths = true) {
    using nlohmann::json;
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw DataError(std::string("manifest is not valid JSON: ") + e.what());
    }

    auto fail = [](const std::string& what) { return DataError("manifest schema violation: " + what); };
    if (!doc.is_object()) throw fail("top level must be an object");
    if (!doc.contains("version") || !doc["version"].is_string()) throw fail("'version' must be a string");
    if (!doc.contains("num_classes") || !doc["num_classes"].is_number_integer())
        throw fail("'num_classes' must be an integer");
    if (!doc.contains("samples") || !doc["samples"].is_array()) throw fail("'samples' must be an array");

    DatasetManifest m;
    m.root = root;
    m.content_hash = fnv1a_hex(text);
    m.version = doc["version"].get<std::string>();
    m.num_classes = doc["num_classes"].get<int>();
    if (m.num_classes < 1) throw fail("'num_classes' must be positive");
    if (doc.contains("ignore_label")) {
        if (!doc["ignore_label"].is_number_integer()) throw fail("'ignore_label' must be an integer");
        m.ignore_label = doc["ignore_label"].get<int>();
    }
    if (m.ignore_label < m.num_classes) throw fail("'ignore_label' collides with an ID class index");
    if (doc.contains("feature_layer") && doc["feature_layer"].is_string())
        m.feature_layer = doc["feature_layer"].get<std::string>();

    std::set<std::string> seen;
    for (const auto& s : doc["samples"]) {
        if (!s.is_object()) throw fail("sample entries must be objects");
        for (const char* key : {"id", "feature_path", "logit_path", "label_path", "condition", "split"}) {
            if (!s.contains(key) || !s[key].is_string())
                throw fail(std::string("sample field '") + key + "' must be a string");
        }
        SampleEntry e;
        e.id = s["id"].get<std::string>();
        e.feature_path = s["feature_path"].get<std::string>();
        e.logit_path = s["logit_path"].get<std::string>();
        e.label_path = s["label_path"].get<std::string>();
        e.condition = s["condition"].get<std::string>();
        e.split = parse_split(s["split"].get<std::string>());
        if (!seen.insert(e.id).second) throw DataError("duplicate sample id '" + e.id + "' in manifest");
        if (check_paths) {
            for (const auto* p : {&e.feature_path, &e.logit_path, &e.label_path}) {
                if (!std::filesystem::exists(root / *p))
                    throw DataError("sample '" + e.id + "': missing file " + (root / *p).string());
            }
        }
        m.samples.push_back(std::move(e));
    }
    return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path.string() + ": cannot open manifest");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_manifest(ss.str(), path.parent_path());
}

inline nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
    nlohmann::ordered_json doc;
    doc["version"] = m.version;
    doc["num_classes"] = m.num_classes;
    doc["ignore_label"] = m.ignore_label;
    if (!m.feature_layer.empty()) doc["feature_layer"] = m.feature_layer;
    doc["samples"] = nlohmann::ordered_json::array();
    for (const auto& e : m.samples) {
        doc["samples"].push_back({{"id", e.id},
                                  {"feature_path", e.feature_path},
                                  {"logit_path", e.logit_path},
                                  {"label_path", e.label_path},
                                  {"condition", e.condition},
                                  {"split", split_name(e.split)}});
    }
    return doc;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(path.string() + ": cannot open for writing");
    out << manifest_to_json(m).dump(2) << '\n';
    if (!out) throw DataError(path.string() + ": write failed");
}

/// Reader hook so callers can count or redirect array reads.
using ArrayReader = std::function<Tensor(const std::filesystem::path&)>;

inline Tensor default_reader(const std::filesystem::path& p) { return read_array(p); }

/// One scene: features H x W x d, logits H x W x C, raw labels H x W.
struct DenseSample {
    std::string id;
    std::string condition;
    Split split = Split::test;
    Tensor features;
    Tensor logits;
    Tensor labels;

    std::size_t height() const { return features.dim(0); }
    std::size_t width() const { return features.dim(1); }
    std::size_t pixels() const { return features.dim(0) * features.dim(1); }
    std::size_t feature_dim() const { return features.dim(2); }
    std::size_t num_classes() const { return logits.dim(2); }
};

inline void check_sample_shapes(const DenseSample& s, int num_classes) {
    const auto& f = s.features.shape();
    const auto& z = s.logits.shape();
    const auto& y = s.labels.shape();
    auto where = "sample '" + s.id + "': ";
    if (f.size() != 3 || z.size() != 3 || y.size() != 2)
        throw DataError(where + "expected features HxWxd, logits HxWxC, labels HxW; got " + shape_string(f) +
                        ", " + shape_string(z) + ", " + shape_string(y));
    if (f[0] != y[0] || f[1] != y[1] || z[0] != y[0] || z[1] != y[1])
        throw DataError(where + "spatial shape mismatch: features " + shape_string(f) + ", logits " +
                        shape_string(z) + ", labels " + shape_string(y));
    if (z[2] != static_cast<std::size_t>(num_classes))
        throw DataError(where + "logit depth " + std::to_string(z[2]) + " does not match num_classes " +
                        std::to_string(num_classes));
    if (f[2] == 0) throw DataError(where + "feature depth is zero");
    if (s.features.dtype() != DType::float32 && s.features.dtype() != DType::float64)
        throw DataError(where + "features must be float32 or float64");
    if (s.logits.dtype() != DType::float32 && s.logits.dtype() != DType::float64)
        throw DataError(where + "logits must be float32 or float64");
}

inline DenseSample load_sample(const DatasetManifest& m, std::size_t index, const ArrayReader& reader = default_reader) {
    if (index >= m.samples.size())
        throw UsageError("sample index " + std::to_string(index) + " out of range");
    const auto& e = m.samples[index];
    DenseSample s;
    s.id = e.id;
    s.condition = e.condition;
    s.split = e.split;
    s.features = reader(m.resolve(e.feature_path));
    s.logits = reader(m.resolve(e.logit_path));
    s.labels = reader(m.resolve(e.label_path));
    check_sample_shapes(s, m.num_classes);
    return s;
}

/// Loads only the label mask of a sample (evaluation does not need features).
inline Tensor load_labels(const DatasetManifest& m, std::size_t index, const ArrayReader& reader = default_reader) {
    Tensor t = reader(m.resolve(m.samples.at(index).label_path));
    if (t.rank() != 2) throw DataError("sample '" + m.samples[index].id + "': labels must be HxW");
    return t;
}

enum class PixelRole { id, ood, ignore };

/// Per-pixel role. Non-negative codes are ID class indices.
class RoleMask {
public:
    static constexpr std::int32_t kOod = -1;
    static constexpr std::int32_t kIgnore = -2;

    RoleMask() = default;
    RoleMask(std::size_t height, std::size_t width, std::vector<std::int32_t> codes)
        : height_(height), width_(width), codes_(std::move(codes)) {
        if (codes_.size() != height_ * width_) throw DataError("role mask size mismatch");
    }

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t size() const noexcept { return codes_.size(); }

    PixelRole role(std::size_t i) const {
        auto c = codes_[i];
        return c >= 0 ? PixelRole::id : (c == kOod ? PixelRole::ood : PixelRole::ignore);
    }
    std::int32_t class_of(std::size_t i) const { return codes_[i]; }
    std::span<const std::int32_t> codes() const noexcept { return codes_; }

    std::size_t count(PixelRole r) const {
        std::size_t n = 0;
        for (std::size_t i = 0; i < codes_.size(); ++i) n += role(i) == r;
        return n;
    }

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<std::int32_t> codes_;
};

/// label < C -> ID(label); label == ignore -> IGNORE; C <= label <= 255 -> OOD.
/// Wider dtypes may not exceed 255 unless the value is the ignore label.
inline RoleMask remap_labels(const Tensor& labels, int num_classes, int ignore_label = 255) {
    if (labels.rank() != 2) throw DataError("label mask must be HxW, got " + shape_string(labels.shape()));
    if (labels.dtype() == DType::float32 || labels.dtype() == DType::float64)
        throw DataError("label mask must have an integer dtype");
    const std::size_t n = labels.size();
    std::vector<std::int32_t> codes(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto v = static_cast<std::int64_t>(labels.at_double(i));
        if (v == ignore_label) {
            codes[i] = RoleMask::kIgnore;
        } else if (v < 0) {
            throw DataError("negative label " + std::to_string(v) + " at pixel " + std::to_string(i));
        } else if (v < num_classes) {
            codes[i] = static_cast<std::int32_t>(v);
        } else if (v <= 255) {
            codes[i] = RoleMask::kOod;
        } else {
            throw DataError("label " + std::to_string(v) + " at pixel " + std::to_string(i) +
                            " exceeds 255 and is not the ignore label");
        }
    }
    return RoleMask(labels.dim(0), labels.dim(1), std::move(codes));
}

}  // namespace neco
