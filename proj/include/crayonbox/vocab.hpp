#pragma once

#include <string>
#include <vector>

namespace crayonbox {

// 133 COCO panoptic categories plus `unk` (id 133). Ids 0..79 are `thing`
// (countable) classes, 80..132 `stuff`, matching the COCO panoptic split.
class ClassVocabulary {
public:
    static constexpr int kNumClasses = 134;
    static constexpr int kNumThings = 80;
    static constexpr int kUnk = 133;

    static const ClassVocabulary& instance();

    int size() const { return kNumClasses; }
    const std::string& name(int id) const;
    int id(const std::string& name) const;  // -1 when unknown
    bool is_thing(int id) const { return id >= 0 && id < kNumThings; }
    bool is_stuff(int id) const { return id >= kNumThings && id < kNumClasses - 1; }
    const std::vector<int>& thing_ids() const { return thing_ids_; }
    const std::vector<int>& stuff_ids() const { return stuff_ids_; }

private:
    ClassVocabulary();
    std::vector<std::string> names_;
    std::vector<int> thing_ids_;
    std::vector<int> stuff_ids_;
};

}  // namespace crayonbox
