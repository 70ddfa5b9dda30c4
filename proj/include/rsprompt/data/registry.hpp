#pragma once

// Dataset descriptors, label maps, split manifests and the k-shot sampler.
//
// Manifests are line-oriented text: '#' header lines carry provenance
// (`# key: value`), every other line is `image_id<TAB>label`. Image ids are paths
// relative to the dataset root.

#include "rsprompt/core/assets.hpp"
#include "rsprompt/core/digest.hpp"
#include "rsprompt/core/rng.hpp"
#include "rsprompt/core/tensor.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace rsprompt {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Test-split access guard

/// While any Scope is alive on the current thread, test manifests cannot be read.
class TestSplitGuard {
public:
    class Scope {
    public:
        explicit Scope(std::string activity) : prev_(activity_()) {
            ++depth_();
            activity_() = std::move(activity);
        }
        ~Scope() {
            --depth_();
            activity_() = prev_;
        }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        std::string prev_;
    };

    static bool active() { return depth_() > 0; }

    static void check(const std::string& what) {
        if (active()) throw AccessError("test split access denied during " + activity_() + ": " + what);
    }

private:
    static int& depth_() {
        thread_local int d = 0;
        return d;
    }
    static std::string& activity_() {
        thread_local std::string a;
        return a;
    }
};

// ---------------------------------------------------------------------------
// Label maps

/// Versioned raw -> normalized class-name table. Class ids follow the first
/// appearance of each normalized name.
struct LabelMap {
    std::string version;
    std::unordered_map<std::string, std::string> to_normalized;
    std::vector<std::string> classes;
    std::string digest;

    static LabelMap load(const fs::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot read label map " + path.string());
        std::stringstream buf;
        buf << in.rdbuf();
        const std::string text = buf.str();
        LabelMap m;
        m.digest = sha256_hex(text);
        std::istringstream lines(text);
        std::string line;
        int lineno = 0;
        while (std::getline(lines, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            if (line[0] == '#') {
                if (auto p = line.find("label map "); p != std::string::npos && m.version.empty())
                    m.version = line.substr(p + 10, line.find(':', p) - p - 10);
                continue;
            }
            auto tab = line.find('\t');
            if (tab == std::string::npos) throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected raw<TAB>normalized");
            std::string raw = line.substr(0, tab), norm = line.substr(tab + 1);
            if (raw.empty() || norm.empty()) throw DataError(path.string() + ":" + std::to_string(lineno) + ": empty field");
            if (norm.find('_') != std::string::npos)
                throw DataError(path.string() + ":" + std::to_string(lineno) + ": normalized name '" + norm + "' contains '_'");
            if (!m.to_normalized.emplace(raw, norm).second)
                throw DataError(path.string() + ":" + std::to_string(lineno) + ": duplicate raw label '" + raw + "'");
            if (std::find(m.classes.begin(), m.classes.end(), norm) == m.classes.end()) m.classes.push_back(norm);
        }
        if (m.version.empty()) throw DataError("label map " + path.string() + " has no version header");
        if (m.classes.empty()) throw DataError("label map " + path.string() + " is empty");
        return m;
    }

    int num_classes() const { return static_cast<int>(classes.size()); }
    bool contains(const std::string& raw) const { return to_normalized.count(raw) > 0; }

    int class_id(const std::string& raw) const {
        const auto& n = normalize(raw);
        return static_cast<int>(std::find(classes.begin(), classes.end(), n) - classes.begin());
    }

    const std::string& normalize(const std::string& raw) const {
        auto it = to_normalized.find(raw);
        if (it == to_normalized.end()) throw DataError("unmapped raw label '" + raw + "'");
        return it->second;
    }
};

inline const std::string& normalize_label(const std::string& raw, const LabelMap& map) { return map.normalize(raw); }

// ---------------------------------------------------------------------------
// Descriptors

struct DatasetDescriptor {
    std::string name;                 // registry key
    std::string display_name;
    long image_count = 0;             // as published
    int class_count = 0;              // as published
    int image_size = 0;               // side length in pixels
    std::string modality;
    fs::path label_map;               // relative to the asset dir
    std::vector<std::string> layouts; // candidate image directories below the root; "" = root itself
};

inline std::string canonical_dataset_name(std::string_view s) {
    std::string out;
    for (unsigned char c : s)
        if (std::isalnum(c)) out.push_back(static_cast<char>(std::tolower(c)));
    return out;
}

inline const std::vector<DatasetDescriptor>& dataset_registry() {
    static const std::vector<DatasetDescriptor> r{
        {"eurosat", "EuroSAT", 27000, 10, 64, "satellite RGB (Sentinel-2 B4/B3/B2)", "labels/eurosat.tsv", {"", "2750", "EuroSAT_RGB", "EuroSAT"}},
        {"ucmerced", "UC Merced", 2100, 21, 256, "aerial RGB", "labels/ucmerced.tsv", {"", "Images", "UCMerced_LandUse/Images"}},
        {"resisc45", "RESISC45", 31500, 45, 256, "aerial RGB", "labels/resisc45.tsv", {"", "NWPU-RESISC45"}},
        {"aid", "AID", 10000, 30, 600, "aerial RGB", "labels/aid.tsv", {"", "AID"}},
        {"rsscn7", "RSSCN7", 2800, 7, 400, "aerial RGB", "labels/rsscn7.tsv", {"", "RSSCN7"}},
        {"optimal31", "Optimal-31", 1860, 31, 256, "aerial RGB", "labels/optimal31.tsv", {"", "Images", "OPTIMAL-31/Images"}},
        {"siriwhu", "SIRI-WHU", 2400, 12, 200, "aerial RGB", "labels/siriwhu.tsv", {"", "12class_tif"}},
        {"clrs", "CLRS", 15000, 25, 256, "aerial RGB", "labels/clrs.tsv", {"", "CLRS"}},
        {"mlrsnet", "MLRSNet", 109161, 47, 256, "aerial RGB", "labels/mlrsnet.tsv", {"", "Images"}},
    };
    return r;
}

inline std::vector<std::string> dataset_names() {
    std::vector<std::string> n;
    for (const auto& d : dataset_registry()) n.push_back(d.name);
    return n;
}

inline const DatasetDescriptor& find_dataset(std::string_view name) {
    const auto key = canonical_dataset_name(name);
    for (const auto& d : dataset_registry())
        if (d.name == key) return d;
    std::string known;
    for (const auto& d : dataset_registry()) known += (known.empty() ? "" : ", ") + d.name;
    throw DataError("unknown dataset '" + std::string(name) + "' (known: " + known + ")");
}

inline LabelMap load_label_map(const DatasetDescriptor& d) { return LabelMap::load(asset_path(d.label_map)); }

// ---------------------------------------------------------------------------
// Manifests

namespace detail {

struct ParsedManifest {
    std::map<std::string, std::string> header;
    std::vector<std::pair<std::string, std::string>> rows;
    std::string digest;
};

inline std::string read_text(const fs::path& path, const std::string& what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + what + " " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline ParsedManifest parse_manifest_text(const std::string& text, const fs::path& path, bool header_only = false) {
    ParsedManifest m;
    m.digest = sha256_hex(text);
    std::istringstream lines(text);
    std::string line;
    int lineno = 0;
    while (std::getline(lines, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            auto colon = line.find(':');
            if (colon == std::string::npos) continue;
            auto trim = [](std::string s) {
                s.erase(0, s.find_first_not_of(' '));
                s.erase(s.find_last_not_of(' ') + 1);
                return s;
            };
            m.header[trim(line.substr(1, colon - 1))] = trim(line.substr(colon + 1));
            continue;
        }
        if (header_only) break;
        auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 == line.size())
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected image_id<TAB>label");
        m.rows.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    return m;
}

inline void write_atomically(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write " + path.string());
        out << text;
        if (!out) throw IoError("write failed for " + path.string());
    }
    fs::rename(tmp, path);
}

}  // namespace detail

struct ManifestItem {
    std::string id;
    std::string raw_label;
};

struct SplitManifest {
    std::string dataset;
    std::string split;  // train | test
    std::string protocol;
    std::string version;
    std::vector<ManifestItem> items;
    std::string digest;  // sha256 of the file bytes

    std::string to_text() const {
        std::string s = "# dataset: " + dataset + "\n# split: " + split + "\n# protocol: " + protocol + "\n# version: " + version + "\n";
        for (const auto& it : items) s += it.id + "\t" + it.raw_label + "\n";
        return s;
    }

    void save(const fs::path& path) const { detail::write_atomically(path, to_text()); }

    static SplitManifest load(const fs::path& path) {
        const auto text = detail::read_text(path, "split manifest");
        auto head = detail::parse_manifest_text(text, path, true);
        auto split = head.header.count("split") ? head.header.at("split") : "";
        if (split != "train" && split != "test") throw DataError(path.string() + ": header must declare '# split: train|test'");
        if (split == "test") TestSplitGuard::check(path.string());
        auto parsed = detail::parse_manifest_text(text, path);
        SplitManifest m;
        m.split = split;
        m.dataset = parsed.header.count("dataset") ? parsed.header.at("dataset") : "";
        m.protocol = parsed.header.count("protocol") ? parsed.header.at("protocol") : "unknown";
        m.version = parsed.header.count("version") ? parsed.header.at("version") : "unknown";
        m.digest = parsed.digest;
        for (auto& [id, label] : parsed.rows) m.items.push_back({std::move(id), std::move(label)});
        return m;
    }
};

/// Exactly k (image, class id) pairs per class drawn from a training split.
struct FewShotManifest {
    std::string dataset;
    int k = 0;
    int seed = 0;
    std::string train_digest;
    std::vector<std::pair<std::string, int>> items;

    std::vector<std::string> ids() const {
        std::vector<std::string> v;
        for (const auto& [id, c] : items) v.push_back(id);
        return v;
    }

    std::vector<int> labels() const {
        std::vector<int> v;
        for (const auto& [id, c] : items) v.push_back(c);
        return v;
    }

    std::string to_text() const {
        std::string s = "# dataset: " + dataset + "\n# k: " + std::to_string(k) + "\n# seed: " + std::to_string(seed) +
                        "\n# train_digest: " + train_digest + "\n";
        for (const auto& [id, c] : items) s += id + "\t" + std::to_string(c) + "\n";
        return s;
    }

    std::string digest() const { return sha256_hex(to_text()); }

    void save(const fs::path& path) const { detail::write_atomically(path, to_text()); }

    static FewShotManifest load(const fs::path& path) {
        auto parsed = detail::parse_manifest_text(detail::read_text(path, "few-shot manifest"), path);
        FewShotManifest m;
        try {
            m.dataset = parsed.header.at("dataset");
            m.k = std::stoi(parsed.header.at("k"));
            m.seed = std::stoi(parsed.header.at("seed"));
            m.train_digest = parsed.header.at("train_digest");
            for (auto& [id, c] : parsed.rows) m.items.emplace_back(std::move(id), std::stoi(c));
        } catch (const std::out_of_range&) {
            throw DataError(path.string() + ": incomplete few-shot manifest header");
        } catch (const std::invalid_argument&) {
            throw DataError(path.string() + ": malformed few-shot manifest");
        }
        return m;
    }
};

// ---------------------------------------------------------------------------
// Loaded datasets

struct LoadOptions {
    bool verify_counts = true;   // compare against the published image/class counts
    bool verify_files = true;    // every manifest image must exist
};

/// A dataset with its manifests. The test split is only handed out when no
/// training or sampling scope is active.
class Dataset {
public:
    Dataset(DatasetDescriptor desc, LabelMap labels, fs::path root, SplitManifest train, SplitManifest test)
        : desc_(std::move(desc)), labels_(std::move(labels)), root_(std::move(root)), train_(std::move(train)), test_(std::move(test)) {}

    const DatasetDescriptor& descriptor() const { return desc_; }
    const std::string& name() const { return desc_.name; }
    const LabelMap& labels() const { return labels_; }
    const std::vector<std::string>& class_names() const { return labels_.classes; }
    const fs::path& root() const { return root_; }
    const SplitManifest& train() const { return train_; }

    const SplitManifest& test() const {
        TestSplitGuard::check(desc_.name + " test manifest");
        return test_;
    }

    /// Manifest digests without touching test items; safe inside guarded scopes.
    std::string train_digest() const { return train_.digest; }
    std::string test_digest() const { return test_.digest; }

    /// Ids and class ids of a split, in manifest order.
    std::pair<std::vector<std::string>, std::vector<int>> resolve(const SplitManifest& m) const {
        std::pair<std::vector<std::string>, std::vector<int>> out;
        for (const auto& it : m.items) {
            out.first.push_back(it.id);
            out.second.push_back(labels_.class_id(it.raw_label));
        }
        return out;
    }

private:
    DatasetDescriptor desc_;
    LabelMap labels_;
    fs::path root_;
    SplitManifest train_;
    SplitManifest test_;
};

/// The directory holding the class folders: the first layout candidate that exists.
inline fs::path image_root(const DatasetDescriptor& d, const fs::path& root) {
    for (const auto& l : d.layouts) {
        fs::path p = l.empty() ? root : root / l;
        if (!fs::is_directory(p)) continue;
        for (const auto& e : fs::directory_iterator(p))
            if (e.is_directory()) return p;
    }
    throw DataError("no class folders found for " + d.display_name + " under " + root.string());
}

inline fs::path split_path(const fs::path& splits_dir, const std::string& dataset, const std::string& split) {
    return splits_dir / dataset / (split + ".tsv");
}

inline Dataset load_dataset(const DatasetDescriptor& desc, const fs::path& root, const fs::path& splits_dir,
                            const LoadOptions& opt = {}) {
    auto labels = load_label_map(desc);
    auto train = SplitManifest::load(split_path(splits_dir, desc.name, "train"));
    auto test = SplitManifest::load(split_path(splits_dir, desc.name, "test"));
    if (train.split != "train" || test.split != "test") throw DataError(desc.name + ": manifests declare the wrong split");
    std::set<std::string> seen_ids;
    std::set<int> seen_classes;
    for (const auto* m : {&train, &test})
        for (const auto& it : m->items) {
            if (!labels.contains(it.raw_label))
                throw DataError(desc.name + ": label '" + it.raw_label + "' of " + it.id + " is missing from the label map");
            seen_classes.insert(labels.class_id(it.raw_label));
            if (!seen_ids.insert(it.id).second) throw DataError(desc.name + ": image " + it.id + " listed twice");
            if (opt.verify_files && !fs::is_regular_file(root / it.id))
                throw DataError(desc.name + ": manifest image " + it.id + " not found under " + root.string());
        }
    if (opt.verify_counts) {
        const long n = static_cast<long>(seen_ids.size());
        if (n != desc.image_count)
            throw DataError(desc.name + ": manifests list " + std::to_string(n) + " images, expected " + std::to_string(desc.image_count));
        if (static_cast<int>(seen_classes.size()) != labels.num_classes())
            throw DataError(desc.name + ": manifests cover " + std::to_string(seen_classes.size()) + " classes, label map has " +
                            std::to_string(labels.num_classes()));
    }
    return Dataset(desc, std::move(labels), root, std::move(train), std::move(test));
}

inline Dataset load_dataset(std::string_view name, const fs::path& root, const fs::path& splits_dir, const LoadOptions& opt = {}) {
    return load_dataset(find_dataset(name), root, splits_dir, opt);
}

// ---------------------------------------------------------------------------
// Split generation

inline bool is_image_file(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".tif" || ext == ".tiff" || ext == ".bmp";
}

/// Stratified hold-out over a class-folder layout: per class, files are sorted, shuffled
/// with a derived stream and the first round(n * test_fraction) go to the test split.
inline std::pair<SplitManifest, SplitManifest> generate_splits(const DatasetDescriptor& desc, const fs::path& root,
                                                               double test_fraction, int seed) {
    if (!(test_fraction > 0 && test_fraction < 1)) throw ConfigError("splits.test_fraction must be in (0, 1)");
    auto labels = load_label_map(desc);
    const fs::path images = image_root(desc, root);
    const auto prefix = fs::relative(images, root);
    std::map<std::string, std::vector<std::string>> by_label;
    for (const auto& e : fs::directory_iterator(images)) {
        if (!e.is_directory()) continue;
        const auto label = e.path().filename().string();
        if (!labels.contains(label)) throw DataError(desc.name + ": class folder '" + label + "' is not in the label map");
        auto& files = by_label[label];
        for (const auto& f : fs::recursive_directory_iterator(e.path()))
            if (f.is_regular_file() && is_image_file(f.path())) files.push_back((prefix / fs::relative(f.path(), images)).lexically_normal().generic_string());
    }
    std::ostringstream frac;
    frac << test_fraction;
    SplitManifest train{desc.name, "train", "stratified-holdout test_fraction=" + frac.str() + " seed=" + std::to_string(seed), "1", {}, {}};
    SplitManifest test{desc.name, "test", train.protocol, "1", {}, {}};
    for (auto& [label, files] : by_label) {
        std::sort(files.begin(), files.end());
        Rng rng(derive_seed("split/" + desc.name + "/" + label, seed));
        rng.shuffle(files.begin(), files.end());
        const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(files.size()) * test_fraction));
        std::vector<std::string> te(files.begin(), files.begin() + static_cast<std::ptrdiff_t>(n_test));
        std::vector<std::string> tr(files.begin() + static_cast<std::ptrdiff_t>(n_test), files.end());
        std::sort(te.begin(), te.end());
        std::sort(tr.begin(), tr.end());
        for (auto& f : tr) train.items.push_back({f, label});
        for (auto& f : te) test.items.push_back({f, label});
    }
    train.digest = sha256_hex(train.to_text());
    test.digest = sha256_hex(test.to_text());
    return {train, test};
}

// ---------------------------------------------------------------------------
// Few-shot sampling

inline bool is_allowed_shots(int k) { return k == 1 || k == 2 || k == 4 || k == 8 || k == 16; }

namespace detail {

inline std::vector<std::vector<std::string>> ids_per_class(const SplitManifest& train, const LabelMap& labels,
                                                           const std::set<std::string>& exclude = {}) {
    std::vector<std::vector<std::string>> per(labels.classes.size());
    for (const auto& it : train.items)
        if (!exclude.count(it.id)) per[static_cast<std::size_t>(labels.class_id(it.raw_label))].push_back(it.id);
    return per;
}

inline std::vector<std::pair<std::string, int>> draw_per_class(std::vector<std::vector<std::string>> per, int k, std::uint64_t seed,
                                                               const LabelMap& labels, const std::string& what) {
    std::vector<std::pair<std::string, int>> out;
    for (std::size_t c = 0; c < per.size(); ++c) {
        auto& ids = per[c];
        if (static_cast<int>(ids.size()) < k)
            throw DataError(what + ": class '" + labels.classes[c] + "' has " + std::to_string(ids.size()) + " images, " +
                            std::to_string(k) + " required");
        Rng rng(derive_seed("class", seed, static_cast<std::uint64_t>(c)));
        for (int i = 0; i < k; ++i) {
            auto j = static_cast<std::size_t>(i) + static_cast<std::size_t>(rng.below(ids.size() - static_cast<std::size_t>(i)));
            std::swap(ids[static_cast<std::size_t>(i)], ids[j]);
            out.emplace_back(ids[static_cast<std::size_t>(i)], static_cast<int>(c));
        }
    }
    return out;
}

}  // namespace detail

/// k images per class, uniformly without replacement, from a stream derived from
/// (dataset, k, seed). Manifests for different k are drawn independently.
inline FewShotManifest sample_few_shot(const SplitManifest& train, const LabelMap& labels, const std::string& dataset, int k, int seed) {
    TestSplitGuard::Scope scope("few-shot sampling");
    if (train.split != "train") throw AccessError("few-shot sampling requires a train manifest, got '" + train.split + "'");
    if (k < 1) throw ConfigError("shots must be >= 1");
    FewShotManifest m{dataset, k, seed, train.digest, {}};
    m.items = detail::draw_per_class(detail::ids_per_class(train, labels), k,
                                     derive_seed("fewshot/" + dataset, k, seed), labels, dataset + " " + std::to_string(k) + "-shot");
    return m;
}

inline FewShotManifest sample_few_shot(const Dataset& ds, int k, int seed) {
    return sample_few_shot(ds.train(), ds.labels(), ds.name(), k, seed);
}

/// Class-balanced validation sample disjoint from `shots`, drawn from the training split.
inline FewShotManifest sample_validation(const SplitManifest& train, const LabelMap& labels, const FewShotManifest& shots, int per_class) {
    TestSplitGuard::Scope scope("validation sampling");
    if (train.split != "train") throw AccessError("validation sampling requires a train manifest");
    std::set<std::string> used;
    for (const auto& [id, c] : shots.items) used.insert(id);
    FewShotManifest m{shots.dataset, per_class, shots.seed, train.digest, {}};
    m.items = detail::draw_per_class(detail::ids_per_class(train, labels, used), per_class,
                                     derive_seed("validation/" + shots.dataset, shots.k, shots.seed), labels,
                                     shots.dataset + " validation");
    return m;
}

}  // namespace rsprompt
