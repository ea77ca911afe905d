#include "crayonbox/tokenizer.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "crayonbox/errors.hpp"
#include "crayonbox/vocab.hpp"

namespace crayonbox {

namespace {

bool is_open_punct(char c) { return c == '(' || c == '['; }
bool is_close_punct(char c) { return c == ')' || c == ']' || c == ',' || c == '?' || c == '.'; }

const char* kTemplateWords[] = {
    "User:", "Assistant:",
    "Provide", "multiple", "object", "names", "with", "their", "numbering", "index", "and",
    "the", "objects'", "bounding", "box", "coordinates", "in", "this", "image",
    "None", "of", "detailed", "information", "for",
    "Sure", "it", "is",
    "How", "many", "are", "there",
    "Is", "any", "Which", "specified",
    "Yes", "No",
};

}  // namespace

Tokenizer::Tokenizer() {
    auto push = [this](const std::string& tok) {
        if (index_.count(tok)) return;
        index_[tok] = static_cast<int>(tokens_.size());
        tokens_.push_back(tok);
    };
    push("<unk-tok>");
    push("<image>");
    push("<stop>");
    for (const char* w : kTemplateWords) push(w);
    for (char c : std::string("()[],?.")) push(std::string(1, c));
    const auto& vocab = ClassVocabulary::instance();
    for (int i = 0; i < vocab.size(); ++i) push(vocab.name(i));
    for (int n = 0; n <= 20; ++n) push("#" + std::to_string(n));
    for (int n = 0; n <= 20; ++n) push(std::to_string(n));
    coord0_id_ = static_cast<int>(tokens_.size());
    for (int c = 0; c <= 100; ++c) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "%d.%02d", c / 100, c % 100);
        push(buf);
    }
    unk_id_ = index_.at("<unk-tok>");
    image_id_ = index_.at("<image>");
    stop_id_ = index_.at("<stop>");
}

const Tokenizer& Tokenizer::instance() {
    static Tokenizer tok;
    return tok;
}

int Tokenizer::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? -1 : it->second;
}

int Tokenizer::coord_id(float v) const {
    const int c = static_cast<int>(std::lround(static_cast<double>(v) * 100.0));
    if (c < 0 || c > 100) throw ArgumentError("coordinate outside [0, 1]");
    return coord0_id_ + c;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    // Whitespace split, then peel bracket/punctuation characters off the ends.
    std::vector<std::string> atoms;
    std::istringstream in(text);
    std::string chunk;
    while (in >> chunk) {
        if (index_.count(chunk)) {  // whole-chunk match ("<image>", "User:", "0.38")
            atoms.push_back(chunk);
            continue;
        }
        while (!chunk.empty() && is_open_punct(chunk.front())) {
            atoms.emplace_back(1, chunk.front());
            chunk.erase(chunk.begin());
        }
        std::string trailing;
        while (!chunk.empty() && is_close_punct(chunk.back()) && !index_.count(chunk)) {
            trailing.insert(trailing.begin(), chunk.back());
            chunk.pop_back();
        }
        if (!chunk.empty()) atoms.push_back(chunk);
        for (char c : trailing) atoms.emplace_back(1, c);
    }
    // Greedy two-atom merge for multi-word class names ("traffic light").
    std::vector<int> ids;
    for (size_t i = 0; i < atoms.size(); ++i) {
        if (i + 1 < atoms.size()) {
            auto merged = index_.find(atoms[i] + " " + atoms[i + 1]);
            if (merged != index_.end()) {
                ids.push_back(merged->second);
                ++i;
                continue;
            }
        }
        auto it = index_.find(atoms[i]);
        ids.push_back(it == index_.end() ? unk_id_ : it->second);
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    bool suppress_space = true;  // no leading space
    for (int id : ids) {
        const std::string& tok = tokens_[static_cast<size_t>(id)];
        const bool closes = tok.size() == 1 && is_close_punct(tok[0]);
        if (!suppress_space && !closes && id != stop_id_) out += ' ';
        out += tok;
        suppress_space = tok.size() == 1 && is_open_punct(tok[0]);
    }
    return out;
}

}  // namespace crayonbox
