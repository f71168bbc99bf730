#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vlpt/png_io.hpp"
#include "vlpt/tensor.hpp"

namespace vlpt {

/// Rotated quadrilateral in pixel coordinates, origin top-left, vertex order
/// TL, TR, BR, BL of the unrotated rectangle.
struct Quad {
    std::array<std::array<double, 2>, 4> pts{};

    double area() const;
    std::array<double, 2> centroid() const;
    bool contains(double x, double y) const;
    /// Separating-axis overlap test with an inflation margin on both quads.
    static bool overlap(const Quad& a, const Quad& b, double margin);
    Quad rounded() const; // vertices rounded to integers (still stored as double)
};

enum class Background { solid, noise, gradient };

struct SampleSpec {
    int canvas_h = 128;
    int canvas_w = 128;
    std::vector<std::string> words;
    double font_scale_min = 0.08; // glyph height as a fraction of canvas height
    double font_scale_max = 0.16;
    double rotation_range_deg = 20.0;
    Background background = Background::solid;
    bool color_jitter = true;

    void validate() const;
};

struct ImageTextPair {
    ImageU8 image; // RGB
    std::vector<std::string> text;
    std::vector<Quad> boxes; // same order as text; evaluation-only ground truth
    int64_t sample_id = 0;
};

/// Deterministic in (spec, seed): same inputs give byte-identical pixels.
/// Words that cannot be placed without overlap after bounded retries are
/// dropped from both image and text. Throws if no requested word could fit
/// the canvas even at the minimum font scale.
ImageTextPair render_sample(const SampleSpec& spec, uint64_t seed);

// ------------------------------------------------------------- dataset ----

struct GenConfig {
    SampleSpec sample;                // words list ignored; drawn from the pool
    std::vector<std::string> word_pool;
    int words_min = 3;
    int words_max = 7;
    double val_fraction = 0.1;

    std::string to_json() const;
    static GenConfig from_json(const std::string& text);
};

struct SampleRecord {
    int64_t id = 0;
    std::string image; // path relative to the dataset root
    std::vector<std::string> text;
    std::vector<Quad> boxes;
};

struct ShardManifest {
    std::string root;
    std::vector<SampleRecord> records;
    uint64_t seed = 0;
    std::string config_hash;
    int64_t val_count = 0; // validation samples are the id tail

    int64_t train_count() const { return static_cast<int64_t>(records.size()) - val_count; }
    bool is_val(int64_t idx) const { return idx >= train_count(); }
};

/// Renders n samples, writes `<out>/images/<id>.png`, `<out>/manifest.jsonl`
/// and `<out>/meta.json`. Reproducible from (config, seed).
ShardManifest generate_dataset(const GenConfig& config, int64_t n_samples, uint64_t seed,
                               const std::string& out_dir);

ShardManifest load_manifest(const std::string& dir);

/// Decoded, float-converted view over one split of a dataset.
class DatasetReader {
public:
    enum class Split { train, val, all };

    DatasetReader(ShardManifest manifest, Split split, bool preload = true);

    int64_t size() const { return static_cast<int64_t>(index_.size()); }
    const SampleRecord& record(int64_t i) const;
    /// [3,H,W] floats in [0,1].
    Tensor image(int64_t i) const;
    /// Stacked [N,3,H,W] for a batch of reader indices.
    Tensor image_batch(const std::vector<int64_t>& idx) const;

private:
    ShardManifest manifest_;
    std::vector<int64_t> index_;          // reader index -> manifest index
    mutable std::vector<ImageU8> cache_;  // preloaded uint8 images
    bool preload_ = false;
};

/// One epoch of batches: a seeded shuffle of [0, n) chopped into fixed-size
/// batches, final partial batch dropped.
std::vector<std::vector<int64_t>> plan_epoch(int64_t n, int64_t batch_size, uint64_t shuffle_seed,
                                             int64_t epoch);

/// Default word pool shipped with the repo (data/words.txt).
std::vector<std::string> load_word_pool(const std::string& path);

} // namespace vlpt
