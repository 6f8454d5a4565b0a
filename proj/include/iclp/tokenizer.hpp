#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "iclp/hash.hpp"

namespace iclp {

// Whitespace-and-punctuation splitter. Punctuation from kPunct is peeled off
// chunk edges as separate tokens; interior punctuation (P-17, ninety-seven)
// stays put. The detokenizer inverts the spacing for every text the corpus
// renderers produce, which is what the round-trip tests pin down.
namespace tok {

inline constexpr std::string_view kPunct = ".,:;?!()`";

inline bool is_punct(char c) { return kPunct.find(c) != std::string_view::npos; }

inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i >= text.size()) break;
        size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        std::string_view chunk = text.substr(i, j - i);
        // peel leading punctuation
        size_t a = 0, b = chunk.size();
        std::vector<std::string> lead, trail;
        while (a < b && is_punct(chunk[a])) lead.emplace_back(1, chunk[a++]);
        while (b > a && is_punct(chunk[b - 1])) trail.emplace_back(1, chunk[--b]);
        for (auto& p : lead) out.push_back(std::move(p));
        if (b > a) out.emplace_back(chunk.substr(a, b - a));
        for (auto it = trail.rbegin(); it != trail.rend(); ++it) out.push_back(std::move(*it));
        i = j;
    }
    return out;
}

// attach-to-previous: closers and clause punctuation; attach-to-next: openers.
// Backquotes alternate: an opening quote glues right, a closing quote glues left.
inline std::string detokenize(const std::vector<std::string>& tokens) {
    std::string out;
    bool glue_next = true;  // no space before the very first token
    bool in_backquote = false;
    for (const auto& t : tokens) {
        bool glue_this = glue_next;
        glue_next = false;
        if (t.size() == 1 && is_punct(t[0])) {
            char c = t[0];
            if (c == '`') {
                if (!in_backquote) {  // opening: space before, none after
                    in_backquote = true;
                    glue_next = true;
                } else {  // closing: none before
                    in_backquote = false;
                    glue_this = true;
                }
            } else if (c == '(') {
                glue_next = true;
            } else {
                glue_this = true;  // . , : ; ? ! )
            }
        }
        if (!glue_this && !out.empty()) out += ' ';
        out += t;
    }
    return out;
}

}  // namespace tok

// Reserved ids shared by every vocabulary in the pipeline.
enum ReservedToken : int {
    kPad = 0,
    kUnk = 1,
    kBos = 2,
    kEos = 3,
    kRecon = 4,
    kNumReserved = 5,
};

class Vocabulary {
public:
    Vocabulary() {
        for (const char* t : {"<pad>", "<unk>", "<bos>", "<eos>", "[RECON]"}) intern(t);
    }

    // Build from a text corpus; token order is lexicographic after the
    // reserved block so identical corpora give identical vocabularies.
    static Vocabulary build(const std::vector<std::string>& texts) {
        std::set<std::string> seen;
        for (const auto& text : texts)
            for (auto& t : tok::tokenize(text)) seen.insert(std::move(t));
        Vocabulary v;
        for (const auto& t : seen) v.intern(t);
        return v;
    }

    int size() const { return static_cast<int>(tokens_.size()); }

    int id_of(const std::string& t) const {
        auto it = index_.find(t);
        return it == index_.end() ? kUnk : it->second;
    }
    bool contains(const std::string& t) const { return index_.count(t) > 0; }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
        return tokens_[static_cast<size_t>(id)];
    }

    std::vector<int> encode(std::string_view text) const {
        std::vector<int> ids;
        for (const auto& t : tok::tokenize(text)) ids.push_back(id_of(t));
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::vector<std::string> ts;
        for (int id : ids) {
            if (id == kBos || id == kEos || id == kPad) continue;
            ts.push_back(token(id));
        }
        return tok::detokenize(ts);
    }

    int intern(const std::string& t) {
        auto it = index_.find(t);
        if (it != index_.end()) return it->second;
        int id = size();
        tokens_.push_back(t);
        index_.emplace(t, id);
        return id;
    }

    const std::vector<std::string>& tokens() const { return tokens_; }

    std::string hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& t : tokens_) {
            h = fnv1a64(t, h);
            h = fnv1a64("\x1f", h);
        }
        return hash_hex(h);
    }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
};

}  // namespace iclp
