#include "crayonbox/vocab.hpp"

#include <map>

#include "crayonbox/errors.hpp"

namespace crayonbox {

namespace {

// COCO panoptic categories: 80 thing classes followed by 53 stuff classes.
const char* kThingNames[] = {
    "person", "bicycle", "car", "motorcycle",
    "airplane", "bus", "train", "truck",
    "boat", "traffic light", "fire hydrant", "stop sign",
    "parking meter", "bench", "bird", "cat",
    "dog", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe",
    "backpack", "umbrella", "handbag", "tie",
    "suitcase", "frisbee", "skis", "snowboard",
    "sports ball", "kite", "baseball bat", "baseball glove",
    "skateboard", "surfboard", "tennis racket", "bottle",
    "wine glass", "cup", "fork", "knife",
    "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot",
    "hot dog", "pizza", "donut", "cake",
    "chair", "couch", "potted plant", "bed",
    "dining table", "toilet", "tv", "laptop",
    "mouse", "remote", "keyboard", "cell phone",
    "microwave", "oven", "toaster", "sink",
    "refrigerator", "book", "clock", "vase",
    "scissors", "teddy bear", "hair drier", "toothbrush",
};

const char* kStuffNames[] = {
    "banner", "blanket", "bridge", "cardboard",
    "counter", "curtain", "door", "floor-wood",
    "flower", "fruit", "gravel", "house",
    "light", "mirror", "net", "pillow",
    "platform", "playingfield", "railroad", "river",
    "road", "roof", "sand", "sea",
    "shelf", "snow", "stairs", "tent",
    "towel", "wall-brick", "wall-stone", "wall-tile",
    "wall-wood", "water", "window-blind", "window",
    "tree", "fence", "ceiling", "sky",
    "cabinet", "table", "floor", "pavement",
    "mountain", "grass", "dirt", "paper",
    "food", "building", "rock", "wall",
    "rug",
};

std::map<std::string, int>& name_index() {
    static std::map<std::string, int> index;
    return index;
}

}  // namespace

ClassVocabulary::ClassVocabulary() {
    for (const char* n : kThingNames) names_.emplace_back(n);
    for (const char* n : kStuffNames) names_.emplace_back(n);
    names_.emplace_back("unk");
    for (int i = 0; i < kNumClasses; ++i) {
        name_index()[names_[static_cast<size_t>(i)]] = i;
        if (is_thing(i)) thing_ids_.push_back(i);
        if (is_stuff(i)) stuff_ids_.push_back(i);
    }
}

const ClassVocabulary& ClassVocabulary::instance() {
    static ClassVocabulary vocab;
    return vocab;
}

const std::string& ClassVocabulary::name(int id) const {
    if (id < 0 || id >= kNumClasses) throw ArgumentError("class id out of range");
    return names_[static_cast<size_t>(id)];
}

int ClassVocabulary::id(const std::string& name) const {
    auto it = name_index().find(name);
    return it == name_index().end() ? -1 : it->second;
}

}  // namespace crayonbox
