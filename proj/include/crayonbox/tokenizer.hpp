#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace crayonbox {

// Closed word-level vocabulary: prompt-protocol specials, template words,
// the 134 class names (multi-word names are single tokens), "#0".."#20",
// coordinate tokens "0.00".."1.00", numerals and punctuation.
class Tokenizer {
public:
    static const Tokenizer& instance();

    int size() const { return static_cast<int>(tokens_.size()); }
    int id(const std::string& token) const;  // -1 when absent
    const std::string& token(int id) const { return tokens_[static_cast<size_t>(id)]; }

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    int image_id() const { return image_id_; }
    int stop_id() const { return stop_id_; }
    int unk_id() const { return unk_id_; }
    int coord_id(float v) const;  // rounded 2-decimal coordinate token

private:
    Tokenizer();
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    int image_id_, stop_id_, unk_id_, coord0_id_;
};

}  // namespace crayonbox
