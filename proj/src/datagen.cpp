#include "vlpt/datagen.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "vlpt/font.hpp"
#include "vlpt/hash.hpp"
#include "vlpt/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vlpt {

// ----------------------------------------------------------------- Quad ----

double Quad::area() const {
    double a = 0.0;
    for (int i = 0; i < 4; ++i) {
        const auto& p = pts[static_cast<size_t>(i)];
        const auto& q = pts[static_cast<size_t>((i + 1) % 4)];
        a += p[0] * q[1] - q[0] * p[1];
    }
    return std::abs(a) * 0.5;
}

std::array<double, 2> Quad::centroid() const {
    double cx = 0.0, cy = 0.0;
    for (const auto& p : pts) {
        cx += p[0];
        cy += p[1];
    }
    return {cx / 4.0, cy / 4.0};
}

bool Quad::contains(double x, double y) const {
    // convex, consistent winding: point is inside if all cross products share a sign
    bool pos = false, neg = false;
    for (int i = 0; i < 4; ++i) {
        const auto& p = pts[static_cast<size_t>(i)];
        const auto& q = pts[static_cast<size_t>((i + 1) % 4)];
        const double cross = (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]);
        if (cross > 0) pos = true;
        if (cross < 0) neg = true;
    }
    return !(pos && neg);
}

bool Quad::overlap(const Quad& a, const Quad& b, double margin) {
    const Quad* qs[2] = {&a, &b};
    for (const Quad* q : qs) {
        for (int i = 0; i < 4; ++i) {
            const auto& p0 = q->pts[static_cast<size_t>(i)];
            const auto& p1 = q->pts[static_cast<size_t>((i + 1) % 4)];
            double nx = -(p1[1] - p0[1]);
            double ny = p1[0] - p0[0];
            const double len = std::hypot(nx, ny);
            if (len == 0.0) continue;
            nx /= len;
            ny /= len;
            double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
            for (const auto& p : a.pts) {
                const double d = p[0] * nx + p[1] * ny;
                amin = std::min(amin, d);
                amax = std::max(amax, d);
            }
            for (const auto& p : b.pts) {
                const double d = p[0] * nx + p[1] * ny;
                bmin = std::min(bmin, d);
                bmax = std::max(bmax, d);
            }
            if (amax + margin < bmin || bmax + margin < amin) return false; // separated
        }
    }
    return true;
}

Quad Quad::rounded() const {
    Quad q;
    for (int i = 0; i < 4; ++i) {
        q.pts[static_cast<size_t>(i)][0] = std::round(pts[static_cast<size_t>(i)][0]);
        q.pts[static_cast<size_t>(i)][1] = std::round(pts[static_cast<size_t>(i)][1]);
    }
    return q;
}

// ----------------------------------------------------------- SampleSpec ----

void SampleSpec::validate() const {
    check(canvas_h > 0 && canvas_w > 0, "spec: canvas must be positive");
    check(canvas_h % 16 == 0 && canvas_w % 16 == 0, "spec: canvas sides must be divisible by 16");
    check(rotation_range_deg >= 0.0 && rotation_range_deg <= 90.0,
          "spec: rotation range must be within [0, 90] degrees");
    check(font_scale_min > 0.0 && font_scale_max <= 1.0 && font_scale_min <= font_scale_max,
          "spec: font scale range invalid");
    for (const auto& w : words) {
        check(!w.empty(), "spec: empty word");
        for (char c : w) check(has_glyph(c), std::string("spec: no glyph for character '") + c + "'");
    }
}

// -------------------------------------------------------------- render ----

namespace {

struct Placement {
    std::string word;
    Quad quad;
    double cx, cy, cos_t, sin_t, w_loc, h_loc, scale;
    std::array<uint8_t, 3> color;
};

double word_width_units(const std::string& w) {
    return double(kGlyphAdvance * static_cast<int>(w.size()) - 1);
}

void fill_background(ImageU8& img, Background bg, bool jitter, Rng& rng) {
    const int H = img.h, W = img.w;
    std::array<uint8_t, 3> c1{};
    std::array<uint8_t, 3> c2{};
    if (jitter) {
        for (auto& c : c1) c = static_cast<uint8_t>(rng.range_int(0, 90));
        for (auto& c : c2) c = static_cast<uint8_t>(rng.range_int(0, 90));
    } else {
        c1 = {40, 44, 52};
        c2 = {70, 60, 80};
    }
    switch (bg) {
        case Background::solid:
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    for (int c = 0; c < 3; ++c) img.at(y, x, c) = c1[static_cast<size_t>(c)];
            break;
        case Background::noise:
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W; ++x) {
                    const int delta = static_cast<int>(rng.range_int(-25, 25));
                    for (int c = 0; c < 3; ++c) {
                        const int v = int(c1[static_cast<size_t>(c)]) + delta;
                        img.at(y, x, c) = static_cast<uint8_t>(std::clamp(v, 0, 255));
                    }
                }
            }
            break;
        case Background::gradient: {
            const double phi = rng.uniform(0.0, 6.283185307179586);
            const double dx = std::cos(phi), dy = std::sin(phi);
            double lo = 1e300, hi = -1e300;
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W; ++x) {
                    const double d = x * dx + y * dy;
                    lo = std::min(lo, d);
                    hi = std::max(hi, d);
                }
            }
            const double span = std::max(1e-9, hi - lo);
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W; ++x) {
                    const double t = (x * dx + y * dy - lo) / span;
                    for (int c = 0; c < 3; ++c) {
                        const double v = (1.0 - t) * c1[static_cast<size_t>(c)] +
                                         t * c2[static_cast<size_t>(c)];
                        img.at(y, x, c) = static_cast<uint8_t>(std::lround(v));
                    }
                }
            }
            break;
        }
    }
}

void rasterize(ImageU8& img, const Placement& p) {
    double minx = 1e300, maxx = -1e300, miny = 1e300, maxy = -1e300;
    for (const auto& pt : p.quad.pts) {
        minx = std::min(minx, pt[0]);
        maxx = std::max(maxx, pt[0]);
        miny = std::min(miny, pt[1]);
        maxy = std::max(maxy, pt[1]);
    }
    const int x0 = std::max(0, static_cast<int>(std::floor(minx)));
    const int x1 = std::min(img.w - 1, static_cast<int>(std::ceil(maxx)));
    const int y0 = std::max(0, static_cast<int>(std::floor(miny)));
    const int y1 = std::min(img.h - 1, static_cast<int>(std::ceil(maxy)));
    for (int py = y0; py <= y1; ++py) {
        for (int px = x0; px <= x1; ++px) {
            const double dx = px + 0.5 - p.cx;
            const double dy = py + 0.5 - p.cy;
            // rotate back into word-local frame
            const double lx = dx * p.cos_t + dy * p.sin_t + p.w_loc * 0.5;
            const double ly = -dx * p.sin_t + dy * p.cos_t + p.h_loc * 0.5;
            if (lx < 0 || lx >= p.w_loc || ly < 0 || ly >= p.h_loc) continue;
            const double fu = lx / p.scale;
            const double fv = ly / p.scale;
            const int ci = static_cast<int>(fu / kGlyphAdvance);
            if (ci < 0 || ci >= static_cast<int>(p.word.size())) continue;
            const int cu = static_cast<int>(fu) - ci * kGlyphAdvance;
            const int cv = static_cast<int>(fv);
            if (cu >= kGlyphW || cv >= kGlyphH) continue;
            const auto& rows = glyph_rows(p.word[static_cast<size_t>(ci)]);
            if (rows[static_cast<size_t>(cv)] & (1u << (kGlyphW - 1 - cu))) {
                for (int c = 0; c < 3; ++c) img.at(py, px, c) = p.color[static_cast<size_t>(c)];
            }
        }
    }
}

} // namespace

ImageTextPair render_sample(const SampleSpec& spec, uint64_t seed) {
    spec.validate();
    const int H = spec.canvas_h, W = spec.canvas_w;
    Rng rng(mix_seed(seed, 0xD47A6E57));

    ImageTextPair out;
    out.image = ImageU8(H, W, 3);
    fill_background(out.image, spec.background, spec.color_jitter, rng);
    if (spec.words.empty()) return out;

    // static feasibility: at the minimum scale at least one word must fit
    const double s_min = std::max(1.0, spec.font_scale_min * H / double(kGlyphH));
    bool any_fits = false;
    for (const auto& w : spec.words) {
        if (word_width_units(w) * s_min + 3.0 <= W && kGlyphH * s_min + 3.0 <= H) {
            any_fits = true;
            break;
        }
    }
    check(any_fits, "render_sample: canvas too small to place any word at minimum font scale");

    const double rot_rad = spec.rotation_range_deg * 3.14159265358979323846 / 180.0;
    const double edge_margin = 1.5;
    const double sep_margin = 2.0;

    std::vector<Placement> placed;
    for (const auto& word : spec.words) {
        for (int attempt = 0; attempt < 20; ++attempt) {
            const double frac = rng.uniform(spec.font_scale_min, spec.font_scale_max);
            const double s = std::max(1.0, frac * H / double(kGlyphH));
            const double theta = rng.uniform(-rot_rad, rot_rad);
            const double w_loc = word_width_units(word) * s;
            const double h_loc = kGlyphH * s;
            const double ct = std::cos(theta), st = std::sin(theta);
            const double ex = (w_loc * std::abs(ct) + h_loc * std::abs(st)) * 0.5;
            const double ey = (w_loc * std::abs(st) + h_loc * std::abs(ct)) * 0.5;
            if (2 * ex + 2 * edge_margin > W || 2 * ey + 2 * edge_margin > H) continue;
            const double cx = rng.uniform(ex + edge_margin, W - ex - edge_margin);
            const double cy = rng.uniform(ey + edge_margin, H - ey - edge_margin);

            Placement p;
            p.word = word;
            p.cx = cx;
            p.cy = cy;
            p.cos_t = ct;
            p.sin_t = st;
            p.w_loc = w_loc;
            p.h_loc = h_loc;
            p.scale = s;
            const double hw = w_loc * 0.5, hh = h_loc * 0.5;
            const double local[4][2] = {{-hw, -hh}, {hw, -hh}, {hw, hh}, {-hw, hh}};
            for (int i = 0; i < 4; ++i) {
                p.quad.pts[static_cast<size_t>(i)][0] = cx + local[i][0] * ct - local[i][1] * st;
                p.quad.pts[static_cast<size_t>(i)][1] = cy + local[i][0] * st + local[i][1] * ct;
            }
            bool clash = false;
            for (const auto& q : placed) {
                if (Quad::overlap(p.quad, q.quad, sep_margin)) {
                    clash = true;
                    break;
                }
            }
            if (clash) continue;
            if (spec.color_jitter) {
                for (auto& c : p.color) c = static_cast<uint8_t>(rng.range_int(170, 255));
            } else {
                p.color = {235, 235, 235};
            }
            placed.push_back(std::move(p));
            break;
        }
    }

    // reading order: top-to-bottom then left-to-right by box centroid
    std::vector<size_t> order(placed.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        const auto ca = placed[a].quad.centroid();
        const auto cb = placed[b].quad.centroid();
        if (ca[1] != cb[1]) return ca[1] < cb[1];
        if (ca[0] != cb[0]) return ca[0] < cb[0];
        return a < b;
    });
    for (size_t i : order) {
        rasterize(out.image, placed[i]);
        out.text.push_back(placed[i].word);
        out.boxes.push_back(placed[i].quad.rounded());
    }
    return out;
}

// ------------------------------------------------------------- dataset ----

namespace {

const char* bg_name(Background b) {
    switch (b) {
        case Background::solid: return "solid";
        case Background::noise: return "noise";
        case Background::gradient: return "gradient";
    }
    return "solid";
}

Background bg_from(const std::string& s) {
    if (s == "solid") return Background::solid;
    if (s == "noise") return Background::noise;
    if (s == "gradient") return Background::gradient;
    throw std::runtime_error("unknown background kind: " + s);
}

json quad_to_json(const Quad& q) {
    json j = json::array();
    for (const auto& p : q.pts) {
        j.push_back({static_cast<int64_t>(p[0]), static_cast<int64_t>(p[1])});
    }
    return j;
}

Quad quad_from_json(const json& j) {
    check(j.is_array() && j.size() == 4, "manifest: box must have 4 vertices");
    Quad q;
    for (size_t i = 0; i < 4; ++i) {
        check(j[i].is_array() && j[i].size() == 2, "manifest: vertex must be [x,y]");
        q.pts[i][0] = j[i][0].get<double>();
        q.pts[i][1] = j[i][1].get<double>();
    }
    return q;
}

} // namespace

std::string GenConfig::to_json() const {
    json j;
    j["canvas_h"] = sample.canvas_h;
    j["canvas_w"] = sample.canvas_w;
    j["font_scale_min"] = sample.font_scale_min;
    j["font_scale_max"] = sample.font_scale_max;
    j["rotation_range_deg"] = sample.rotation_range_deg;
    j["background"] = bg_name(sample.background);
    j["color_jitter"] = sample.color_jitter;
    j["words_min"] = words_min;
    j["words_max"] = words_max;
    j["val_fraction"] = val_fraction;
    j["word_pool_size"] = word_pool.size();
    j["word_pool_hash"] = hash_hex(fnv1a64([&] {
        std::string all;
        for (const auto& w : word_pool) {
            all += w;
            all += '\n';
        }
        return all;
    }()));
    return j.dump();
}

GenConfig GenConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    GenConfig c;
    c.sample.canvas_h = j.at("canvas_h").get<int>();
    c.sample.canvas_w = j.at("canvas_w").get<int>();
    c.sample.font_scale_min = j.at("font_scale_min").get<double>();
    c.sample.font_scale_max = j.at("font_scale_max").get<double>();
    c.sample.rotation_range_deg = j.at("rotation_range_deg").get<double>();
    c.sample.background = bg_from(j.at("background").get<std::string>());
    c.sample.color_jitter = j.at("color_jitter").get<bool>();
    c.words_min = j.at("words_min").get<int>();
    c.words_max = j.at("words_max").get<int>();
    c.val_fraction = j.at("val_fraction").get<double>();
    return c;
}

ShardManifest generate_dataset(const GenConfig& config, int64_t n_samples, uint64_t seed,
                               const std::string& out_dir) {
    check(n_samples >= 1, "generate_dataset: n_samples must be >= 1");
    check(!config.word_pool.empty(), "generate_dataset: empty word pool");
    check(config.words_min >= 1 && config.words_max >= config.words_min,
          "generate_dataset: bad words_min/words_max");
    check(config.val_fraction >= 0.0 && config.val_fraction <= 1.0,
          "generate_dataset: val_fraction out of range");

    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    check(!ec, "generate_dataset: cannot create output directory " + out_dir);

    ShardManifest m;
    m.root = out_dir;
    m.seed = seed;
    m.config_hash = hash_hex(fnv1a64(config.to_json()));
    m.val_count = std::clamp<int64_t>(std::llround(double(n_samples) * config.val_fraction), 0,
                                      n_samples);

    std::ofstream mf(fs::path(out_dir) / "manifest.jsonl", std::ios::binary);
    check(mf.good(), "generate_dataset: cannot write manifest.jsonl");

    for (int64_t i = 0; i < n_samples; ++i) {
        Rng pick(mix_seed(seed ^ 0x57AB57AB57AB57ABULL, static_cast<uint64_t>(i)));
        SampleSpec spec = config.sample;
        spec.words.clear();
        const int64_t count = pick.range_int(config.words_min, config.words_max);
        for (int64_t k = 0; k < count; ++k) {
            spec.words.push_back(config.word_pool[pick.below(config.word_pool.size())]);
        }
        ImageTextPair pair = render_sample(spec, mix_seed(seed, static_cast<uint64_t>(i)));
        pair.sample_id = i;

        const std::string rel = "images/" + std::to_string(i) + ".png";
        write_png((fs::path(out_dir) / rel).string(), pair.image);

        json rec;
        rec["id"] = i;
        rec["image"] = rel;
        rec["text"] = pair.text;
        json boxes = json::array();
        for (const auto& q : pair.boxes) boxes.push_back(quad_to_json(q));
        rec["boxes"] = boxes;
        mf << rec.dump() << "\n";

        SampleRecord r;
        r.id = i;
        r.image = rel;
        r.text = pair.text;
        r.boxes = pair.boxes;
        m.records.push_back(std::move(r));
    }
    mf.close();
    check(mf.good(), "generate_dataset: manifest write failed");

    json meta;
    meta["seed"] = seed;
    meta["n_samples"] = n_samples;
    meta["config"] = json::parse(config.to_json());
    meta["config_hash"] = m.config_hash;
    meta["val_count"] = m.val_count;
    meta["val_fraction"] = config.val_fraction;
    meta["split_rule"] = "tail";
    std::ofstream metaf(fs::path(out_dir) / "meta.json", std::ios::binary);
    metaf << meta.dump(2) << "\n";
    check(metaf.good(), "generate_dataset: meta.json write failed");
    return m;
}

ShardManifest load_manifest(const std::string& dir) {
    std::ifstream metaf(fs::path(dir) / "meta.json", std::ios::binary);
    check(metaf.good(), "load_manifest: missing meta.json in " + dir);
    json meta;
    try {
        metaf >> meta;
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("load_manifest: corrupt meta.json: ") + e.what());
    }

    ShardManifest m;
    m.root = dir;
    m.seed = meta.at("seed").get<uint64_t>();
    m.config_hash = meta.at("config_hash").get<std::string>();
    m.val_count = meta.at("val_count").get<int64_t>();

    std::ifstream mf(fs::path(dir) / "manifest.jsonl", std::ios::binary);
    check(mf.good(), "load_manifest: missing manifest.jsonl in " + dir);
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error(std::string("load_manifest: corrupt record: ") + e.what());
        }
        SampleRecord r;
        r.id = rec.at("id").get<int64_t>();
        r.image = rec.at("image").get<std::string>();
        for (const auto& w : rec.at("text")) r.text.push_back(w.get<std::string>());
        for (const auto& b : rec.at("boxes")) r.boxes.push_back(quad_from_json(b));
        check(r.text.size() == r.boxes.size(), "load_manifest: text/box count mismatch");
        m.records.push_back(std::move(r));
    }
    const int64_t n = static_cast<int64_t>(m.records.size());
    check(n == meta.at("n_samples").get<int64_t>(), "load_manifest: record count mismatch");
    check(m.val_count >= 0 && m.val_count <= n, "load_manifest: bad val_count");
    return m;
}

// -------------------------------------------------------------- reader ----

DatasetReader::DatasetReader(ShardManifest manifest, Split split, bool preload)
    : manifest_(std::move(manifest)), preload_(preload) {
    const int64_t n = static_cast<int64_t>(manifest_.records.size());
    for (int64_t i = 0; i < n; ++i) {
        const bool v = manifest_.is_val(i);
        if (split == Split::all || (split == Split::val ? v : !v)) index_.push_back(i);
    }
    if (preload_) {
        cache_.resize(index_.size());
        for (size_t k = 0; k < index_.size(); ++k) {
            const auto& rec = manifest_.records[static_cast<size_t>(index_[k])];
            cache_[k] = read_png((fs::path(manifest_.root) / rec.image).string());
        }
    }
}

const SampleRecord& DatasetReader::record(int64_t i) const {
    return manifest_.records[static_cast<size_t>(index_.at(static_cast<size_t>(i)))];
}

Tensor DatasetReader::image(int64_t i) const {
    ImageU8 img;
    if (preload_) {
        img = cache_[static_cast<size_t>(i)];
    } else {
        img = read_png((fs::path(manifest_.root) / record(i).image).string());
    }
    check(img.channels >= 1, "reader: empty image");
    Tensor t({3, img.h, img.w});
    const float inv = 1.0f / 255.0f;
    for (int c = 0; c < 3; ++c) {
        const int src_c = img.channels == 1 ? 0 : std::min(c, img.channels - 1);
        for (int y = 0; y < img.h; ++y) {
            for (int x = 0; x < img.w; ++x) {
                t[static_cast<size_t>((c * img.h + y) * img.w + x)] = img.at(y, x, src_c) * inv;
            }
        }
    }
    return t;
}

Tensor DatasetReader::image_batch(const std::vector<int64_t>& idx) const {
    check(!idx.empty(), "image_batch: empty index list");
    Tensor first = image(idx[0]);
    const int64_t C = first.dim(0), H = first.dim(1), W = first.dim(2);
    Tensor out({static_cast<int64_t>(idx.size()), C, H, W});
    std::copy(first.data.begin(), first.data.end(), out.data.begin());
    for (size_t k = 1; k < idx.size(); ++k) {
        Tensor t = image(idx[k]);
        check(t.shape == first.shape, "image_batch: inconsistent image sizes");
        std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<int64_t>(k) * t.numel());
    }
    return out;
}

std::vector<std::vector<int64_t>> plan_epoch(int64_t n, int64_t batch_size, uint64_t shuffle_seed,
                                             int64_t epoch) {
    check(batch_size >= 1, "plan_epoch: batch_size must be >= 1");
    std::vector<int64_t> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), int64_t{0});
    Rng rng(mix_seed(shuffle_seed, static_cast<uint64_t>(epoch)));
    rng.shuffle(perm);
    std::vector<std::vector<int64_t>> batches;
    for (int64_t b = 0; b + batch_size <= n; b += batch_size) {
        batches.emplace_back(perm.begin() + b, perm.begin() + b + batch_size);
    }
    return batches;
}

std::vector<std::string> load_word_pool(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "load_word_pool: cannot open " + path);
    std::vector<std::string> pool;
    std::string line;
    while (std::getline(f, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (!line.empty()) pool.push_back(line);
    }
    check(!pool.empty(), "load_word_pool: empty pool file " + path);
    return pool;
}

std::string file_hash_hex(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "file_hash_hex: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return hash_hex(fnv1a64(bytes));
}

} // namespace vlpt
