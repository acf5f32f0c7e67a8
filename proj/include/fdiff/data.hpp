#ifndef FDIFF_DATA_HPP
#define FDIFF_DATA_HPP

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "fdiff/errors.hpp"
#include "fdiff/rng.hpp"

namespace fdiff {

// ---------------------------------------------------------------- vocabulary

constexpr int kPadId = 0;
constexpr int kNullId = 1;

inline const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> v = {
        "<pad>", "<null>",
        "one", "two", "three", "four", "five",
        "red", "green", "blue", "yellow",
        "circle", "circles", "square", "squares", "triangle", "triangles"};
    return v;
}

inline int vocab_size() { return static_cast<int>(vocabulary().size()); }

// Word-level ids, right-padded. The empty caption is the unconditional
// caption and maps to an all-NULL sequence.
inline std::vector<int> tokenize(const std::string& caption, int text_len) {
    if (text_len < 1) throw ArgError("tokenize: text_len must be positive");
    if (caption.empty()) return std::vector<int>(text_len, kNullId);
    std::vector<int> ids;
    std::istringstream is(caption);
    std::string word;
    while (is >> word) {
        const auto& vocab = vocabulary();
        int id = -1;
        for (size_t i = 0; i < vocab.size(); ++i)
            if (vocab[i] == word) {
                id = static_cast<int>(i);
                break;
            }
        if (id < 0) throw DataError("unknown word '" + word + "' in caption");
        ids.push_back(id);
    }
    if (static_cast<int>(ids.size()) > text_len)
        throw DataError("caption has " + std::to_string(ids.size()) + " words, text_len is " +
                        std::to_string(text_len));
    ids.resize(text_len, kPadId);
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
        if (id == kPadId || id == kNullId) continue;
        if (id < 0 || id >= vocab_size()) throw DataError("token id " + std::to_string(id) + " out of range");
        if (!out.empty()) out += ' ';
        out += vocabulary()[id];
    }
    return out;
}

// ------------------------------------------------------------------- scenes

enum class Shape { Circle = 0, Square = 1, Triangle = 2 };
enum class Color { Red = 0, Green = 1, Blue = 2, Yellow = 3 };

inline const std::array<std::array<float, 3>, 4>& color_palette() {
    static const std::array<std::array<float, 3>, 4> p = {{
        {{1.f, -1.f, -1.f}},   // red
        {{-1.f, 1.f, -1.f}},   // green
        {{-1.f, -1.f, 1.f}},   // blue
        {{1.f, 1.f, -1.f}},    // yellow
    }};
    return p;
}

constexpr std::array<float, 3> kBackground = {-1.f, -1.f, -1.f};
constexpr int kImageChannels = 3;

inline std::string shape_word(Shape s, int count) {
    switch (s) {
        case Shape::Circle: return count == 1 ? "circle" : "circles";
        case Shape::Square: return count == 1 ? "square" : "squares";
        default: return count == 1 ? "triangle" : "triangles";
    }
}

inline std::string color_word(Color c) {
    switch (c) {
        case Color::Red: return "red";
        case Color::Green: return "green";
        case Color::Blue: return "blue";
        default: return "yellow";
    }
}

inline std::string count_word(int n) {
    static const char* words[] = {"one", "two", "three", "four", "five"};
    if (n < 1 || n > 5) throw ArgError("count_word: count " + std::to_string(n) + " outside [1,5]");
    return words[n - 1];
}

struct SceneSpec {
    int img_size = 32;
    int min_count = 1, max_count = 5;
    int margin = 1;      // minimum pixel gap between object bounding boxes
    int min_radius = 2;  // shape half-extent range
    int max_radius = 3;

    bool operator==(const SceneSpec&) const = default;

    void validate() const {
        if (img_size < 4 * max_radius + 2) throw ConfigError("scene: img_size too small for shapes");
        if (min_count < 1 || max_count < min_count || max_count > 5)
            throw ConfigError("scene: count range must satisfy 1 <= min <= max <= 5");
        if (margin < 1) throw ConfigError("scene: margin must be >= 1");
        if (min_radius < 2 || max_radius < min_radius) throw ConfigError("scene: bad radius range");
    }
};

struct PlacedObject {
    int cx = 0, cy = 0, r = 0;
};

struct GroundTruthObject {
    int shape = 0, color = 0;
    bool operator==(const GroundTruthObject&) const = default;
};

struct CaptionedImage {
    std::vector<float> pixels;             // 3 * S * S, [-1, 1]
    std::vector<int> token_ids;            // text_len
    std::vector<GroundTruthObject> objects;

    int count() const { return static_cast<int>(objects.size()); }
    bool operator==(const CaptionedImage&) const = default;
};

struct Dataset {
    SceneSpec spec;
    int text_len = 8;
    std::vector<CaptionedImage> items;
};

namespace detail {

inline bool shape_hit(Shape s, int dx, int dy, int r) {
    switch (s) {
        case Shape::Circle: return dx * dx + dy * dy <= r * r;
        case Shape::Square: return std::abs(dx) <= r && std::abs(dy) <= r;
        default: return std::abs(dx) <= (dy + r) / 2 && dy >= -r && dy <= r;  // apex-up triangle
    }
}

inline bool boxes_clear(const PlacedObject& a, const PlacedObject& b, int margin) {
    // gap counts empty pixels between the boxes: |dc| - (ra + rb) - 1
    const int gap_x = std::abs(a.cx - b.cx) - (a.r + b.r) - 1;
    const int gap_y = std::abs(a.cy - b.cy) - (a.r + b.r) - 1;
    return gap_x >= margin || gap_y >= margin;
}

}  // namespace detail

inline void render_object(std::vector<float>& pixels, int S, Shape shape, Color color,
                          const PlacedObject& p) {
    const auto& rgb = color_palette()[static_cast<int>(color)];
    for (int dy = -p.r; dy <= p.r; ++dy)
        for (int dx = -p.r; dx <= p.r; ++dx) {
            if (!detail::shape_hit(shape, dx, dy, p.r)) continue;
            const int x = p.cx + dx, y = p.cy + dy;
            for (int c = 0; c < kImageChannels; ++c)
                pixels[(c * S + y) * S + x] = rgb[c];
        }
}

// One scene: a single (count, color, shape) triple, objects placed without
// overlap. An object that cannot be placed after 100 tries drops the scene
// down one count with a warning.
inline CaptionedImage generate_record(const SceneSpec& spec, int text_len, Rng& rng,
                                      std::ostream* warnings = nullptr) {
    const int S = spec.img_size;
    int count = spec.min_count +
                static_cast<int>(rng.uniform_index(spec.max_count - spec.min_count + 1));
    const Color color = static_cast<Color>(rng.uniform_index(4));
    const Shape shape = static_cast<Shape>(rng.uniform_index(3));

    while (true) {
        std::vector<PlacedObject> placed;
        bool ok = true;
        for (int i = 0; i < count && ok; ++i) {
            ok = false;
            for (int attempt = 0; attempt < 100; ++attempt) {
                PlacedObject p;
                p.r = spec.min_radius +
                      static_cast<int>(rng.uniform_index(spec.max_radius - spec.min_radius + 1));
                p.cx = p.r + static_cast<int>(rng.uniform_index(S - 2 * p.r));
                p.cy = p.r + static_cast<int>(rng.uniform_index(S - 2 * p.r));
                bool clear = true;
                for (const auto& q : placed)
                    if (!detail::boxes_clear(p, q, spec.margin)) {
                        clear = false;
                        break;
                    }
                if (clear) {
                    placed.push_back(p);
                    ok = true;
                    break;
                }
            }
        }
        if (ok) {
            CaptionedImage img;
            img.pixels.resize(kImageChannels * S * S);
            for (int c = 0; c < kImageChannels; ++c)
                std::fill(img.pixels.begin() + c * S * S, img.pixels.begin() + (c + 1) * S * S,
                          kBackground[c]);
            for (const auto& p : placed) render_object(img.pixels, S, shape, color, p);
            img.token_ids = tokenize(count_word(count) + " " + color_word(color) + " " +
                                     shape_word(shape, count), text_len);
            img.objects.assign(count, {static_cast<int>(shape), static_cast<int>(color)});
            return img;
        }
        --count;
        std::ostream& w = warnings ? *warnings : std::cerr;
        w << "warning: scene unplaceable, retrying with " << count << " objects\n";
    }
}

// Deterministic per (spec, n, text_len, seed); each record has its own child
// stream so generation parallelizes without changing results.
inline Dataset generate_dataset(const SceneSpec& spec, int n, int text_len, uint64_t seed,
                                std::ostream* warnings = nullptr) {
    spec.validate();
    if (n < 1) throw ArgError("generate_dataset: n must be >= 1");
    if (text_len < 3) throw ArgError("generate_dataset: text_len must fit a 3-word caption");
    Dataset ds;
    ds.spec = spec;
    ds.text_len = text_len;
    Rng root(seed);
    for (int i = 0; i < n; ++i) {
        Rng r = root.child(static_cast<uint64_t>(i));
        ds.items.push_back(generate_record(spec, text_len, r, warnings));
    }
    return ds;
}

// ------------------------------------------------------------- serialization

// Layout: magic "FDDS" | u32 version | spec block (6 x i32: img_size,
// min_count, max_count, margin, min_radius, max_radius) | i32 text_len |
// u64 record count | fixed-stride records: f32 pixels, i32 token ids,
// i32 object count, max_count x (i32 shape, i32 color) slots (-1 padded).

constexpr uint32_t kDatasetVersion = 1;

namespace detail {

template <typename V>
void ds_write(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V ds_read(std::istream& is, const std::string& what) {
    V v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(V)))
        throw FormatError("dataset truncated while reading " + what + " at byte " +
                          std::to_string(static_cast<long long>(is.tellg())));
    return v;
}

}  // namespace detail

inline void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open dataset for writing: " + path);
    os.write("FDDS", 4);
    detail::ds_write<uint32_t>(os, kDatasetVersion);
    for (int v : {ds.spec.img_size, ds.spec.min_count, ds.spec.max_count, ds.spec.margin,
                  ds.spec.min_radius, ds.spec.max_radius, ds.text_len})
        detail::ds_write<int32_t>(os, v);
    detail::ds_write<uint64_t>(os, ds.items.size());
    const size_t n_px = static_cast<size_t>(kImageChannels) * ds.spec.img_size * ds.spec.img_size;
    for (const auto& item : ds.items) {
        if (item.pixels.size() != n_px || static_cast<int>(item.token_ids.size()) != ds.text_len)
            throw DataError("dataset record does not match its spec block");
        os.write(reinterpret_cast<const char*>(item.pixels.data()),
                 static_cast<std::streamsize>(n_px * sizeof(float)));
        for (int id : item.token_ids) detail::ds_write<int32_t>(os, id);
        detail::ds_write<int32_t>(os, item.count());
        for (int i = 0; i < ds.spec.max_count; ++i) {
            const bool live = i < item.count();
            detail::ds_write<int32_t>(os, live ? item.objects[i].shape : -1);
            detail::ds_write<int32_t>(os, live ? item.objects[i].color : -1);
        }
    }
    if (!os) throw DataError("write failure on dataset: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open dataset: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "FDDS", 4) != 0)
        throw FormatError("not a dataset file (bad magic): " + path);
    uint32_t version = detail::ds_read<uint32_t>(is, "version");
    if (version != kDatasetVersion)
        throw FormatError("dataset version " + std::to_string(version) + " unsupported (want " +
                          std::to_string(kDatasetVersion) + ")");
    Dataset ds;
    ds.spec.img_size = detail::ds_read<int32_t>(is, "img_size");
    ds.spec.min_count = detail::ds_read<int32_t>(is, "min_count");
    ds.spec.max_count = detail::ds_read<int32_t>(is, "max_count");
    ds.spec.margin = detail::ds_read<int32_t>(is, "margin");
    ds.spec.min_radius = detail::ds_read<int32_t>(is, "min_radius");
    ds.spec.max_radius = detail::ds_read<int32_t>(is, "max_radius");
    ds.text_len = detail::ds_read<int32_t>(is, "text_len");
    uint64_t n = detail::ds_read<uint64_t>(is, "record count");
    const size_t n_px = static_cast<size_t>(kImageChannels) * ds.spec.img_size * ds.spec.img_size;
    for (uint64_t k = 0; k < n; ++k) {
        CaptionedImage item;
        item.pixels.resize(n_px);
        if (!is.read(reinterpret_cast<char*>(item.pixels.data()),
                     static_cast<std::streamsize>(n_px * sizeof(float))))
            throw FormatError("dataset truncated in record " + std::to_string(k) + " pixels at byte " +
                              std::to_string(static_cast<long long>(is.tellg())));
        for (int i = 0; i < ds.text_len; ++i)
            item.token_ids.push_back(detail::ds_read<int32_t>(is, "token id"));
        int32_t cnt = detail::ds_read<int32_t>(is, "object count");
        for (int i = 0; i < ds.spec.max_count; ++i) {
            int32_t shape = detail::ds_read<int32_t>(is, "object shape");
            int32_t color = detail::ds_read<int32_t>(is, "object color");
            if (i < cnt) item.objects.push_back({shape, color});
        }
        ds.items.push_back(std::move(item));
    }
    return ds;
}

// --------------------------------------------------------------- image dumps

// Binary PPM (P6); [-1,1] mapped to [0,255].
inline void write_ppm(const std::string& path, const std::vector<float>& pixels, int S) {
    if (pixels.size() != static_cast<size_t>(kImageChannels) * S * S)
        throw ArgError("write_ppm: pixel count does not match 3x" + std::to_string(S) + "x" +
                       std::to_string(S));
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open image for writing: " + path);
    os << "P6\n" << S << " " << S << "\n255\n";
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
            for (int c = 0; c < kImageChannels; ++c) {
                float v = std::clamp((pixels[(c * S + y) * S + x] + 1.f) * 0.5f, 0.f, 1.f);
                os.put(static_cast<char>(std::lround(v * 255.f)));
            }
    if (!os) throw DataError("write failure on image: " + path);
}

}  // namespace fdiff

#endif
