#pragma once

#include <string>
#include <vector>

#include "crayonbox/panoptic.hpp"
#include "crayonbox/rng.hpp"

namespace crayonbox {

enum class RecordKind { CrayonCPT, ImageCIT, VLCIT };

std::string kind_name(RecordKind kind);
RecordKind kind_from_name(const std::string& name);

struct InstructionRecord {
    RecordKind kind = RecordKind::CrayonCPT;
    int scene = -1;  // index into the owning dataset's scene list
    std::string question;
    std::string answer;
    bool operator==(const InstructionRecord&) const = default;
};

struct SynthDataset {
    std::vector<Scene> scenes;
    std::vector<InstructionRecord> records;
};

inline constexpr const char* kCptQuestion =
    "Provide multiple object names with their numbering index and the objects' "
    "bounding box coordinates in this image.";
inline constexpr const char* kNoObjectPhrase =
    "None of detailed object information for image.";

// Fixed question template; answer "Sure, it is " + comma-joined entries.
InstructionRecord make_crayon_instruction(const std::vector<ObjectEntry>& objects,
                                          RecordKind kind = RecordKind::CrayonCPT);

// For an all-unk grid: the question carries the no-object phrase.
InstructionRecord make_no_object_record();

// Inverse of make_crayon_instruction's answer rendering.
std::vector<ObjectEntry> parse_crayon_answer(const std::string& answer);

enum class VlTask { Count, Existence, BoxClass };

// question_pool (optional) restricts absent-class Count/Existence questions
// to classes that can occur in the dataset; empty = any non-present class.
InstructionRecord make_vl_record(const PanopticGrid& grid, VlTask task, uint64_t seed,
                                 const std::vector<int>& question_pool = {});

// Distinct instances of a class in the grid (its highest numbering index).
int class_instance_count(const PanopticGrid& grid, int class_id);
bool all_unk(const PanopticGrid& grid);

// All-unk scene standing in for images without discernible objects.
Scene make_unk_scene(uint64_t seed, int h, int w);

struct CitSampler {
    Rng rng;
    float p_image = 0.5f;

    explicit CitSampler(uint64_t seed, float p = 0.5f)
        : rng(derive_rng(seed, "cit-sampler")), p_image(p) {}
};

// Bernoulli(p_image) pool choice, then a uniform record draw.
const InstructionRecord& sample_cit(CitSampler& sampler,
                                    const std::vector<InstructionRecord>& image_pool,
                                    const std::vector<InstructionRecord>& vl_pool);

struct DatagenConfig {
    int n_scenes = 32;
    SceneConfig scene;
    float p_unk_scene = 0.1f;  // CIT only
    int vl_per_scene = 3;      // CIT only
};

// One crayon instruction per scene.
SynthDataset make_cpt_dataset(uint64_t seed, const DatagenConfig& cfg);
// Image-CIT records (crayon instructions, no-object for unk scenes) plus
// VL-CIT question answering over the same scenes.
SynthDataset make_cit_dataset(uint64_t seed, const DatagenConfig& cfg);

// scene_%04d.ppm / scene_%04d.pgrid plus a records.tsv of
// kind/image/grid/question/answer key=value fields.
void save_dataset(const SynthDataset& ds, const std::string& dir);
SynthDataset load_dataset(const std::string& dir);

}  // namespace crayonbox
