#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <map>
#include <set>

#include "crayonbox/errors.hpp"
#include "crayonbox/panoptic.hpp"
#include "crayonbox/vocab.hpp"

using namespace crayonbox;

namespace {

// Brute-force flood-fill oracle: distinct (class, number>=1) labels per class.
std::map<int, int> instance_histogram(const PanopticGrid& g) {
    std::set<std::pair<int, int>> labels;
    for (int r = 0; r < g.h; ++r)
        for (int c = 0; c < g.w; ++c)
            if (g.num(r, c) >= 1) labels.insert({g.cls(r, c), g.num(r, c)});
    std::map<int, int> hist;
    for (const auto& [cls, num] : labels) hist[cls] += 1;
    return hist;
}

RawInstanceMap raw_from_grid(const PanopticGrid& g) {
    RawInstanceMap raw;
    raw.h = g.h;
    raw.w = g.w;
    raw.class_id = g.class_id;
    raw.raw_id.resize(g.number.size());
    for (size_t i = 0; i < g.number.size(); ++i) raw.raw_id[i] = g.number[i];
    return raw;
}

}  // namespace

TEST_CASE("class vocabulary matches the COCO panoptic split") {
    const auto& v = ClassVocabulary::instance();
    CHECK(v.size() == 134);
    CHECK(v.name(ClassVocabulary::kUnk) == "unk");
    CHECK(v.thing_ids().size() == 80);
    CHECK(v.stuff_ids().size() == 53);

    CHECK(v.is_thing(v.id("person")));
    CHECK(v.is_thing(v.id("toothbrush")));
    CHECK(v.is_stuff(v.id("sky")));
    CHECK(v.is_stuff(v.id("banner")));
    CHECK(v.is_stuff(v.id("rug")));
    CHECK(v.id("not-a-class") == -1);

    SUBCASE("names are unique and round-trip through lookup") {
        std::set<std::string> seen;
        for (int i = 0; i < v.size(); ++i) {
            CHECK(seen.insert(v.name(i)).second);
            CHECK(v.id(v.name(i)) == i);
        }
    }
}

TEST_CASE("synth_generate") {
    SUBCASE("zero objects: one background region covering the frame") {
        SceneConfig cfg;
        cfg.min_objects = cfg.max_objects = 0;
        Scene s = synth_generate(7, cfg);
        const int bg = s.grid.cls(0, 0);
        CHECK(ClassVocabulary::instance().is_stuff(bg));
        for (int r = 0; r < s.grid.h; ++r)
            for (int c = 0; c < s.grid.w; ++c) {
                CHECK(s.grid.cls(r, c) == bg);
                CHECK(s.grid.num(r, c) == 1);
            }
        auto entries = extract_objects(s.grid);
        REQUIRE(entries.size() == 1);
        CHECK(entries[0].x_min == 0.0f);
        CHECK(entries[0].y_min == 0.0f);
        CHECK(entries[0].x_max == 1.0f);
        CHECK(entries[0].y_max == 1.0f);
    }
    SUBCASE("deterministic per seed") {
        SceneConfig cfg;
        cfg.max_objects = 5;
        Scene a = synth_generate(99, cfg);
        Scene b = synth_generate(99, cfg);
        CHECK(a.grid == b.grid);
        CHECK(a.image.data() == b.image.data());
        Scene c = synth_generate(100, cfg);
        CHECK(a.grid.class_id != c.grid.class_id);
    }
    SUBCASE("requested class histogram matches extracted instances") {
        for (uint64_t seed = 0; seed < 20; ++seed) {
            SceneConfig cfg;
            cfg.min_objects = 1;
            cfg.max_objects = 6;
            Scene s = synth_generate(seed, cfg);
            std::map<int, int> requested;
            for (int cid : s.requested_classes) requested[cid] += 1;
            CHECK(instance_histogram(s.grid) == requested);
        }
    }
    SUBCASE("invalid config is rejected") {
        SceneConfig cfg;
        cfg.max_objects = 9;
        CHECK_THROWS_AS(synth_generate(0, cfg), ArgumentError);
    }
    SUBCASE("class_pool restricts object classes and makes repeats common") {
        SceneConfig cfg;
        cfg.min_objects = 3;
        cfg.max_objects = 3;
        cfg.max_retries = 2000;
        cfg.class_pool = {5, 17, 42};
        int repeats = 0;
        for (uint64_t seed = 0; seed < 30; ++seed) {
            Scene s = synth_generate(seed, cfg);
            std::map<int, int> hist = instance_histogram(s.grid);
            for (const auto& [cid, n] : hist) {
                const bool in_pool = cid == 5 || cid == 17 || cid == 42;
                CHECK((in_pool || ClassVocabulary::instance().is_stuff(cid)));
                if (in_pool && n > 1) ++repeats;
            }
        }
        // 3 objects over 3 classes: a repeated class is very likely per scene.
        CHECK(repeats > 10);
    }
    SUBCASE("class_pool entries must be thing ids") {
        SceneConfig cfg;
        cfg.class_pool = {90};  // a stuff id
        CHECK_THROWS_AS(synth_generate(0, cfg), ArgumentError);
    }
}

TEST_CASE("assign_numbering") {
    const auto& v = ClassVocabulary::instance();
    RawInstanceMap raw;
    raw.h = 2;
    raw.w = 4;
    const int person = v.id("person");
    const int sky = v.id("sky");
    const int unk = ClassVocabulary::kUnk;
    raw.class_id = {static_cast<uint8_t>(person), static_cast<uint8_t>(person),
                    static_cast<uint8_t>(sky), static_cast<uint8_t>(sky),
                    static_cast<uint8_t>(person), static_cast<uint8_t>(person),
                    static_cast<uint8_t>(unk), static_cast<uint8_t>(unk)};
    raw.raw_id = {55, 55, 7, 7, 91, 91, 3, 3};
    PanopticGrid g = assign_numbering(raw);
    CHECK(g.num(0, 0) == 1);  // first person
    CHECK(g.num(1, 0) == 2);  // second person
    CHECK(g.num(0, 2) == 1);  // singular sky (stuff) also numbered 1
    CHECK(g.num(1, 2) == 0);  // unk -> 0

    SUBCASE("idempotent") {
        PanopticGrid again = assign_numbering(raw_from_grid(g));
        CHECK(again == g);
    }
}

TEST_CASE("downsample") {
    const auto& v = ClassVocabulary::instance();
    SUBCASE("uniform grid stays uniform") {
        PanopticGrid g;
        g.h = g.w = 8;
        g.class_id.assign(64, static_cast<uint8_t>(v.id("sky")));
        g.number.assign(64, 1);
        PanopticGrid d = downsample(g, 2, 2);
        for (size_t i = 0; i < d.class_id.size(); ++i) {
            CHECK(d.class_id[i] == v.id("sky"));
            CHECK(d.number[i] == 1);
        }
    }
    SUBCASE("majority vote in a 2x2 block") {
        PanopticGrid g;
        g.h = g.w = 2;
        const int person = v.id("person"), sky = v.id("sky");
        g.class_id = {static_cast<uint8_t>(person), static_cast<uint8_t>(person),
                      static_cast<uint8_t>(person), static_cast<uint8_t>(sky)};
        g.number = {1, 1, 1, 1};
        PanopticGrid d = downsample(g, 1, 1);
        CHECK(d.cls(0, 0) == person);
        CHECK(d.num(0, 0) == 1);
    }
    SUBCASE("identity at full resolution") {
        Scene s = synth_generate(5, SceneConfig{});
        CHECK(downsample(s.grid, s.grid.h, s.grid.w) == s.grid);
    }
    SUBCASE("random grids match an exhaustive per-block counting oracle") {
        Rng rng(17);
        for (int trial = 0; trial < 10; ++trial) {
            PanopticGrid g;
            g.h = 12;
            g.w = 10;
            g.class_id.resize(120);
            g.number.resize(120);
            for (size_t i = 0; i < g.class_id.size(); ++i) {
                g.class_id[i] = static_cast<uint8_t>(rng.uniform_int(4));  // few classes -> ties
                g.number[i] = static_cast<uint8_t>(1 + rng.uniform_int(2));
            }
            const int oh = 1 + rng.uniform_int(6), ow = 1 + rng.uniform_int(5);
            PanopticGrid d = downsample(g, oh, ow);
            for (int i = 0; i < oh; ++i) {
                for (int j = 0; j < ow; ++j) {
                    std::map<std::pair<int, int>, int> counts;
                    for (int r = i * g.h / oh; r < (i + 1) * g.h / oh; ++r)
                        for (int c = j * g.w / ow; c < (j + 1) * g.w / ow; ++c)
                            counts[{g.cls(r, c), g.num(r, c)}] += 1;
                    std::pair<int, int> best = counts.begin()->first;
                    int best_count = counts.begin()->second;
                    for (const auto& [key, n] : counts)
                        if (n > best_count) { best = key; best_count = n; }
                    CHECK(d.cls(i, j) == best.first);
                    CHECK(d.num(i, j) == best.second);
                }
            }
        }
    }
    SUBCASE("zero target size is an argument error") {
        Scene s = synth_generate(5, SceneConfig{});
        CHECK_THROWS_AS(downsample(s.grid, 0, 4), ArgumentError);
        CHECK_THROWS_AS(downsample(s.grid, 4, 0), ArgumentError);
    }
}

TEST_CASE("extract_objects") {
    const auto& v = ClassVocabulary::instance();
    SUBCASE("10x10 grid, instance in rows 2-5, cols 3-7") {
        PanopticGrid g;
        g.h = g.w = 10;
        g.class_id.assign(100, static_cast<uint8_t>(v.id("grass")));
        g.number.assign(100, 1);
        for (int r = 2; r <= 5; ++r)
            for (int c = 3; c <= 7; ++c) g.set(r, c, v.id("horse"), 1);
        auto entries = extract_objects(g);
        REQUIRE(entries.size() == 2);
        CHECK(entries[0].class_id == v.id("grass"));  // raster-first at (0,0)
        const ObjectEntry& horse = entries[1];
        CHECK(horse.class_id == v.id("horse"));
        CHECK(horse.x_min == doctest::Approx(0.30f));
        CHECK(horse.y_min == doctest::Approx(0.20f));
        CHECK(horse.x_max == doctest::Approx(0.80f));
        CHECK(horse.y_max == doctest::Approx(0.60f));
        CHECK(render_entry(horse) == "(#1 horse) [0.30, 0.20, 0.80, 0.60]");
    }
    SUBCASE("answer-format rendering shape") {
        ObjectEntry e{v.id("horse"), 1, 0.06f, 0.38f, 0.27f, 0.91f};
        CHECK(render_entry(e) == "(#1 horse) [0.06, 0.38, 0.27, 0.91]");
    }
    SUBCASE("every non-unk cell lies inside its own entry bbox") {
        for (uint64_t seed = 30; seed < 40; ++seed) {
            SceneConfig cfg;
            cfg.min_objects = 1;
            cfg.max_objects = 6;
            Scene s = synth_generate(seed, cfg);
            auto entries = extract_objects(s.grid);
            std::map<std::pair<int, int>, ObjectEntry> by_key;
            for (const auto& e : entries) by_key[{e.class_id, e.number}] = e;
            for (int r = 0; r < s.grid.h; ++r) {
                for (int c = 0; c < s.grid.w; ++c) {
                    const auto& e = by_key.at({s.grid.cls(r, c), s.grid.num(r, c)});
                    const float cx = (static_cast<float>(c) + 0.5f) / static_cast<float>(s.grid.w);
                    const float cy = (static_cast<float>(r) + 0.5f) / static_cast<float>(s.grid.h);
                    CHECK(cx >= e.x_min - 0.005f);
                    CHECK(cx <= e.x_max + 0.005f);
                    CHECK(cy >= e.y_min - 0.005f);
                    CHECK(cy <= e.y_max + 0.005f);
                }
            }
        }
    }
}

TEST_CASE("grid and image files round-trip") {
    SceneConfig cfg;
    cfg.min_objects = 2;
    cfg.max_objects = 4;
    Scene s = synth_generate(77, cfg);

    const std::string gpath = "test_grid.pgrid";
    save_grid(s.grid, gpath);
    CHECK(load_grid(gpath) == s.grid);
    std::remove(gpath.c_str());

    const std::string ipath = "test_img.ppm";
    save_ppm(s.image, ipath);
    Tensor loaded = load_ppm(ipath);
    CHECK(loaded.shape() == s.image.shape());
    // 8-bit quantization is idempotent: a second round trip is exact.
    save_ppm(loaded, ipath);
    CHECK(load_ppm(ipath).data() == loaded.data());
    std::remove(ipath.c_str());
}
