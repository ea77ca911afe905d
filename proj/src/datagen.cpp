#include "crayonbox/datagen.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "crayonbox/errors.hpp"
#include "crayonbox/vocab.hpp"

namespace crayonbox {

namespace {

std::string scene_stem(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%04d", index);
    return buf;
}

// Present non-unk classes in raster first-appearance order.
std::vector<int> present_classes(const PanopticGrid& grid) {
    std::vector<int> out;
    for (size_t i = 0; i < grid.class_id.size(); ++i) {
        const int cid = grid.class_id[i];
        if (cid == ClassVocabulary::kUnk) continue;
        if (std::find(out.begin(), out.end(), cid) == out.end()) out.push_back(cid);
    }
    return out;
}

std::vector<int> absent_classes(const std::vector<int>& present) {
    std::vector<int> out;
    for (int c = 0; c < ClassVocabulary::kUnk; ++c)
        if (std::find(present.begin(), present.end(), c) == present.end()) out.push_back(c);
    return out;
}

}  // namespace

std::string kind_name(RecordKind kind) {
    switch (kind) {
        case RecordKind::CrayonCPT: return "crayon_cpt";
        case RecordKind::ImageCIT: return "image_cit";
        case RecordKind::VLCIT: return "vl_cit";
    }
    throw ArgumentError("unknown record kind");
}

RecordKind kind_from_name(const std::string& name) {
    if (name == "crayon_cpt") return RecordKind::CrayonCPT;
    if (name == "image_cit") return RecordKind::ImageCIT;
    if (name == "vl_cit") return RecordKind::VLCIT;
    throw ArtifactError("unknown record kind: " + name);
}

InstructionRecord make_crayon_instruction(const std::vector<ObjectEntry>& objects,
                                          RecordKind kind) {
    if (objects.empty()) throw ArgumentError("crayon instruction needs at least one object");
    InstructionRecord rec;
    rec.kind = kind;
    rec.question = kCptQuestion;
    std::string answer = "Sure, it is ";
    for (size_t i = 0; i < objects.size(); ++i) {
        if (i) answer += ", ";
        answer += render_entry(objects[i]);
    }
    rec.answer = std::move(answer);
    return rec;
}

InstructionRecord make_no_object_record() {
    InstructionRecord rec;
    rec.kind = RecordKind::ImageCIT;
    rec.question = std::string(kCptQuestion) + " " + kNoObjectPhrase;
    ObjectEntry whole{ClassVocabulary::kUnk, 0, 0.0f, 0.0f, 1.0f, 1.0f};
    rec.answer = "Sure, it is " + render_entry(whole);
    return rec;
}

std::vector<ObjectEntry> parse_crayon_answer(const std::string& answer) {
    const std::string lead = "Sure, it is ";
    if (answer.rfind(lead, 0) != 0) throw ArtifactError("crayon answer missing lead-in");
    const auto& vocab = ClassVocabulary::instance();
    std::vector<ObjectEntry> out;
    size_t pos = lead.size();
    while (pos < answer.size()) {
        ObjectEntry e{};
        if (answer.compare(pos, 2, "(#") != 0) throw ArtifactError("expected \"(#\"");
        pos += 2;
        const size_t sp = answer.find(' ', pos);
        if (sp == std::string::npos) throw ArtifactError("truncated entry");
        e.number = std::stoi(answer.substr(pos, sp - pos));
        pos = sp + 1;
        const size_t close = answer.find(") [", pos);
        if (close == std::string::npos) throw ArtifactError("truncated entry");
        e.class_id = vocab.id(answer.substr(pos, close - pos));
        pos = close + 3;
        float* coords[4] = {&e.x_min, &e.y_min, &e.x_max, &e.y_max};
        for (int c = 0; c < 4; ++c) {
            const size_t end = answer.find_first_of(",]", pos);
            if (end == std::string::npos) throw ArtifactError("truncated coordinates");
            *coords[c] = std::stof(answer.substr(pos, end - pos));
            pos = end + (c < 3 ? 2 : 1);  // skip ", " or "]"
        }
        out.push_back(e);
        if (pos < answer.size()) {
            if (answer.compare(pos, 2, ", ") != 0) throw ArtifactError("expected entry separator");
            pos += 2;
        }
    }
    return out;
}

int class_instance_count(const PanopticGrid& grid, int class_id) {
    int best = 0;
    for (size_t i = 0; i < grid.class_id.size(); ++i)
        if (grid.class_id[i] == class_id) best = std::max(best, static_cast<int>(grid.number[i]));
    return best;
}

bool all_unk(const PanopticGrid& grid) {
    for (uint8_t c : grid.class_id)
        if (c != ClassVocabulary::kUnk) return false;
    return true;
}

Scene make_unk_scene(uint64_t seed, int h, int w) {
    Scene scene;
    scene.grid.h = h;
    scene.grid.w = w;
    scene.grid.class_id.assign(static_cast<size_t>(h) * w, ClassVocabulary::kUnk);
    scene.grid.number.assign(static_cast<size_t>(h) * w, 0);
    Rng rng = derive_rng(seed, "unk-scene");
    std::vector<float> px(static_cast<size_t>(h) * w * 3);
    for (float& v : px) v = rng.uniform();
    scene.image = Tensor({h, w, 3}, std::move(px));
    return scene;
}

InstructionRecord make_vl_record(const PanopticGrid& grid, VlTask task, uint64_t seed,
                                 const std::vector<int>& question_pool) {
    Rng rng = derive_rng(seed, "vl-record");
    const auto& vocab = ClassVocabulary::instance();
    const std::vector<int> present = present_classes(grid);
    std::vector<int> absent;
    if (!question_pool.empty()) {
        // Absent-class questions drawn from the classes that can actually
        // occur, so "No"/"0" answers are not predictable from the class name.
        for (int c : question_pool)
            if (std::find(present.begin(), present.end(), c) == present.end())
                absent.push_back(c);
    }
    if (absent.empty()) absent = absent_classes(present);

    InstructionRecord rec;
    rec.kind = RecordKind::VLCIT;
    switch (task) {
        case VlTask::Count: {
            const bool pick_present = !present.empty() && rng.bernoulli(0.75f);
            const auto& pool = pick_present ? present : absent;
            const int cid = pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))];
            rec.question = "How many " + vocab.name(cid) + " are in this image?";
            rec.answer = std::to_string(class_instance_count(grid, cid));
            break;
        }
        case VlTask::Existence: {
            const bool pick_present = !present.empty() && rng.bernoulli(0.5f);
            const auto& pool = pick_present ? present : absent;
            const int cid = pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))];
            rec.question = "Is there any " + vocab.name(cid) + " in this image?";
            rec.answer = pick_present ? "Yes" : "No";
            break;
        }
        case VlTask::BoxClass: {
            std::vector<ObjectEntry> objects = extract_objects(grid);
            // prefer real objects over the unk filler entry
            std::vector<ObjectEntry> named;
            for (const auto& e : objects)
                if (e.class_id != ClassVocabulary::kUnk) named.push_back(e);
            const auto& pool = named.empty() ? objects : named;
            const ObjectEntry& e =
                pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))];
            rec.question = "Which object is in the specified bounding box [" +
                           format_coord(e.x_min) + ", " + format_coord(e.y_min) + ", " +
                           format_coord(e.x_max) + ", " + format_coord(e.y_max) + "]?";
            rec.answer = vocab.name(e.class_id);
            break;
        }
    }
    return rec;
}

const InstructionRecord& sample_cit(CitSampler& sampler,
                                    const std::vector<InstructionRecord>& image_pool,
                                    const std::vector<InstructionRecord>& vl_pool) {
    if (image_pool.empty() || vl_pool.empty())
        throw ConfigError("sample_cit: both record pools must be non-empty");
    const auto& pool = sampler.rng.bernoulli(sampler.p_image) ? image_pool : vl_pool;
    return pool[static_cast<size_t>(sampler.rng.uniform_int(static_cast<int>(pool.size())))];
}

SynthDataset make_cpt_dataset(uint64_t seed, const DatagenConfig& cfg) {
    SynthDataset ds;
    for (int i = 0; i < cfg.n_scenes; ++i) {
        Scene sc = synth_generate(derive_rng(seed, "cpt-scene-" + std::to_string(i)).next_u64(),
                                  cfg.scene);
        InstructionRecord rec = make_crayon_instruction(extract_objects(sc.grid));
        rec.scene = i;
        ds.scenes.push_back(std::move(sc));
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

SynthDataset make_cit_dataset(uint64_t seed, const DatagenConfig& cfg) {
    SynthDataset ds;
    Rng pick = derive_rng(seed, "cit-unk-pick");
    for (int i = 0; i < cfg.n_scenes; ++i) {
        const uint64_t sseed = derive_rng(seed, "cit-scene-" + std::to_string(i)).next_u64();
        Scene sc = pick.bernoulli(cfg.p_unk_scene)
                       ? make_unk_scene(sseed, cfg.scene.grid_h, cfg.scene.grid_w)
                       : synth_generate(sseed, cfg.scene);
        InstructionRecord img_rec =
            all_unk(sc.grid) ? make_no_object_record()
                             : make_crayon_instruction(extract_objects(sc.grid),
                                                       RecordKind::ImageCIT);
        img_rec.scene = i;
        ds.records.push_back(std::move(img_rec));
        for (int k = 0; k < cfg.vl_per_scene; ++k) {
            const VlTask task = static_cast<VlTask>(k % 3);
            InstructionRecord rec = make_vl_record(
                sc.grid, task,
                derive_rng(seed, "cit-vl-" + std::to_string(i) + "-" + std::to_string(k)).next_u64(),
                cfg.scene.class_pool);
            rec.scene = i;
            ds.records.push_back(std::move(rec));
        }
        ds.scenes.push_back(std::move(sc));
    }
    return ds;
}

void save_dataset(const SynthDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (size_t i = 0; i < ds.scenes.size(); ++i) {
        const std::string stem = scene_stem(static_cast<int>(i));
        save_ppm(ds.scenes[i].image, dir + "/" + stem + ".ppm");
        save_grid(ds.scenes[i].grid, dir + "/" + stem + ".pgrid");
    }
    std::ofstream out(dir + "/records.tsv", std::ios::binary);
    if (!out) throw ArtifactError("cannot write " + dir + "/records.tsv");
    for (const auto& rec : ds.records) {
        if (rec.scene < 0 || rec.scene >= static_cast<int>(ds.scenes.size()))
            throw ArtifactError("record references a missing scene");
        const std::string stem = scene_stem(rec.scene);
        out << "kind=" << kind_name(rec.kind) << "\timage=" << stem << ".ppm"
            << "\tgrid=" << stem << ".pgrid"
            << "\tquestion=" << rec.question << "\tanswer=" << rec.answer << "\n";
    }
}

SynthDataset load_dataset(const std::string& dir) {
    std::ifstream in(dir + "/records.tsv", std::ios::binary);
    if (!in) throw ArtifactError("cannot read " + dir + "/records.tsv");
    SynthDataset ds;
    std::string line;
    int n_scenes = 0;
    auto field = [](const std::string& l, const std::string& key) {
        const std::string tag = key + "=";
        size_t pos = l.rfind("\t" + tag);
        if (pos != std::string::npos)
            pos += 1 + tag.size();
        else if (l.rfind(tag, 0) == 0)
            pos = tag.size();
        else
            throw ArtifactError("records.tsv: missing field " + key);
        const size_t end = l.find('\t', pos);
        return l.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    };
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        InstructionRecord rec;
        rec.kind = kind_from_name(field(line, "kind"));
        const std::string image = field(line, "image");
        if (image.size() < 10 || image.rfind("scene_", 0) != 0)
            throw ArtifactError("records.tsv: unexpected image name " + image);
        rec.scene = std::stoi(image.substr(6, 4));
        rec.question = field(line, "question");
        rec.answer = field(line, "answer");
        n_scenes = std::max(n_scenes, rec.scene + 1);
        ds.records.push_back(std::move(rec));
    }
    for (int i = 0; i < n_scenes; ++i) {
        const std::string stem = dir + "/" + scene_stem(i);
        Scene sc;
        sc.image = load_ppm(stem + ".ppm");
        sc.grid = load_grid(stem + ".pgrid");
        ds.scenes.push_back(std::move(sc));
    }
    return ds;
}

}  // namespace crayonbox
