#pragma once

#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iclp/codec.hpp"
#include "iclp/corpus.hpp"
#include "iclp/tokenizer.hpp"

namespace iclp {

// Base vocabulary plus K contiguous latent-plan tokens "[LP{idx}]" appended
// after the base table. Latent ids live in [offset, offset+K).
class ExtendedVocabulary {
public:
    ExtendedVocabulary(Vocabulary base, int K) : base_(std::move(base)), k_(K) {
        if (K < 1) throw std::invalid_argument("extend_vocabulary: K must be >= 1");
        for (int id = 0; id < base_.size(); ++id) {
            const std::string& t = base_.token(id);
            if (t.rfind("[LP", 0) == 0)
                throw std::invalid_argument("extend_vocabulary: base token '" + t +
                                            "' collides with the latent-token namespace");
        }
    }

    const Vocabulary& base() const { return base_; }
    int latent_count() const { return k_; }
    int offset() const { return base_.size(); }
    int size() const { return base_.size() + k_; }

    bool is_latent(int id) const { return id >= offset() && id < size(); }

    int latent_id(int idx) const {
        if (idx < 0 || idx >= k_) throw std::out_of_range("latent index out of range");
        return offset() + idx;
    }

    int latent_index(int id) const {
        if (!is_latent(id)) throw std::out_of_range("id is not a latent token");
        return id - offset();
    }

    std::string token(int id) const {
        if (is_latent(id)) return "[LP" + std::to_string(latent_index(id)) + "]";
        return base_.token(id);
    }

    // rendering with latent tokens spelled out; base spans use the detokenizer
    std::string render(const std::vector<int>& ids) const {
        std::string out;
        std::vector<int> run;
        auto flush = [&] {
            if (run.empty()) return;
            if (!out.empty()) out += " ";
            out += base_.decode(run);
            run.clear();
        };
        for (int id : ids) {
            if (is_latent(id)) {
                flush();
                if (!out.empty()) out += " ";
                out += token(id);
            } else {
                run.push_back(id);
            }
        }
        flush();
        return out;
    }

    std::string hash() const {
        uint64_t h = fnv1a64(base_.hash());
        h = fnv1a64("K=" + std::to_string(k_), h);
        return hash_hex(h);
    }

private:
    Vocabulary base_;
    int k_;
};

inline ExtendedVocabulary extend_vocabulary(const Vocabulary& base, int K) {
    return ExtendedVocabulary(base, K);
}

// One fine-tuning record: user span (no loss) and assistant span (loss), with
// the mask stored over the concatenated sequence.
struct TrainingRecord {
    std::string id, family, procedure_id;
    std::vector<int> user_ids, assistant_ids;
    std::vector<int> mask;  // 0 over user_ids, 1 over assistant_ids
    int n_steps = 0;

    std::vector<int> full_ids() const {
        std::vector<int> out = user_ids;
        out.insert(out.end(), assistant_ids.begin(), assistant_ids.end());
        return out;
    }

    void validate() const {
        if (mask.size() != user_ids.size() + assistant_ids.size())
            throw std::invalid_argument("record mask length mismatch");
        for (size_t i = 0; i < user_ids.size(); ++i)
            if (mask[i] != 0) throw std::invalid_argument("loss mask set on user span");
        for (size_t i = user_ids.size(); i < mask.size(); ++i)
            if (mask[i] != 1) throw std::invalid_argument("loss mask unset on assistant span");
        if (n_steps < 1) throw std::invalid_argument("record has no steps");
    }
};

inline std::vector<int> default_mask(size_t user_len, size_t assistant_len) {
    std::vector<int> m(user_len, 0);
    m.insert(m.end(), assistant_len, 1);
    return m;
}

// (user: question, assistant: [LP span_1, step_1, ..., LP span_n, step_n, eos])
inline TrainingRecord latentize_sample(const ReasoningSample& sample, const Codec& codec,
                                       const ExtendedVocabulary& vocab) {
    if (sample.plans.size() != sample.steps.size() || sample.steps.empty())
        throw std::invalid_argument("latentize_sample: malformed sample");
    if (codec.config().codebook_size != vocab.latent_count())
        throw std::invalid_argument("latentize_sample: codec K does not match vocabulary");
    TrainingRecord r;
    r.id = sample.id;
    r.family = sample.family;
    r.procedure_id = sample.procedure_id;
    r.n_steps = static_cast<int>(sample.steps.size());
    r.user_ids = vocab.base().encode(sample.question);
    for (size_t i = 0; i < sample.steps.size(); ++i) {
        for (int idx : codec.plan_to_latent(sample.plans[i])) {
            if (idx < 0 || idx >= vocab.latent_count())
                throw std::logic_error("latent index escaped the codebook range");
            r.assistant_ids.push_back(vocab.latent_id(idx));
        }
        for (int id : vocab.base().encode(sample.steps[i])) r.assistant_ids.push_back(id);
    }
    r.assistant_ids.push_back(kEos);
    r.mask = default_mask(r.user_ids.size(), r.assistant_ids.size());
    return r;
}

enum class BaselineMode { kCotOnly, kExplicitPlan };

// cot_only: assistant is just the steps. explicit_plan: each step is preceded
// by its plan as plain text (the pre-replacement form of the latentized record).
inline TrainingRecord render_baseline(const ReasoningSample& sample, BaselineMode mode,
                                      const Vocabulary& vocab) {
    if (sample.plans.size() != sample.steps.size() || sample.steps.empty())
        throw std::invalid_argument("render_baseline: malformed sample");
    TrainingRecord r;
    r.id = sample.id;
    r.family = sample.family;
    r.procedure_id = sample.procedure_id;
    r.n_steps = static_cast<int>(sample.steps.size());
    r.user_ids = vocab.encode(sample.question);
    for (size_t i = 0; i < sample.steps.size(); ++i) {
        if (mode == BaselineMode::kExplicitPlan)
            for (int id : vocab.encode(sample.plans[i])) r.assistant_ids.push_back(id);
        for (int id : vocab.encode(sample.steps[i])) r.assistant_ids.push_back(id);
    }
    r.assistant_ids.push_back(kEos);
    r.mask = default_mask(r.user_ids.size(), r.assistant_ids.size());
    return r;
}

// Inverse view of a latentized assistant span: the per-step latent index runs
// and the step texts between them.
struct LatentSpans {
    std::vector<std::vector<int>> latents;  // codebook indices per step
    std::vector<std::string> step_texts;
};

inline LatentSpans strip_latent_spans(const TrainingRecord& r, const ExtendedVocabulary& vocab) {
    LatentSpans out;
    std::vector<int> text_run;
    auto flush_text = [&] {
        if (text_run.empty()) return;
        out.step_texts.push_back(vocab.base().decode(text_run));
        text_run.clear();
    };
    for (int id : r.assistant_ids) {
        if (id == kEos) break;
        if (vocab.is_latent(id)) {
            if (!text_run.empty()) flush_text();
            if (out.latents.size() == out.step_texts.size())
                out.latents.emplace_back();
            out.latents.back().push_back(vocab.latent_index(id));
        } else {
            text_run.push_back(id);
        }
    }
    flush_text();
    return out;
}

// ---- dataset files: one JSON object per line, each carrying the vocabulary
// and codec fingerprints it was produced under ----

inline nlohmann::json record_to_json(const TrainingRecord& r, const std::string& vocab_hash,
                                     const std::string& codec_hash) {
    return {{"id", r.id},
            {"family", r.family},
            {"procedure_id", r.procedure_id},
            {"user_ids", r.user_ids},
            {"assistant_ids", r.assistant_ids},
            {"mask", r.mask},
            {"n", r.n_steps},
            {"vocab_hash", vocab_hash},
            {"codec_hash", codec_hash}};
}

inline TrainingRecord record_from_json(const nlohmann::json& j) {
    TrainingRecord r;
    r.id = j.at("id").get<std::string>();
    r.family = j.at("family").get<std::string>();
    r.procedure_id = j.at("procedure_id").get<std::string>();
    r.user_ids = j.at("user_ids").get<std::vector<int>>();
    r.assistant_ids = j.at("assistant_ids").get<std::vector<int>>();
    r.mask = j.at("mask").get<std::vector<int>>();
    r.n_steps = j.at("n").get<int>();
    r.validate();
    return r;
}

inline void serialize_dataset(const std::vector<TrainingRecord>& records, const std::string& path,
                              const std::string& vocab_hash, const std::string& codec_hash) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    for (const auto& r : records) {
        r.validate();
        out << record_to_json(r, vocab_hash, codec_hash).dump() << "\n";
    }
}

// Streaming reader: one record in memory at a time. Empty expected hashes skip
// the compatibility check (used by tooling that only inspects structure).
inline void stream_dataset(const std::string& path, const std::string& expected_vocab_hash,
                           const std::string& expected_codec_hash,
                           const std::function<void(const TrainingRecord&)>& fn) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset " + path);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        std::string vh = j.at("vocab_hash").get<std::string>();
        std::string ch = j.at("codec_hash").get<std::string>();
        if (!expected_vocab_hash.empty() && vh != expected_vocab_hash)
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": dataset was built against vocabulary " + vh +
                                     " but this run uses " + expected_vocab_hash +
                                     "; regenerate the dataset");
        if (!expected_codec_hash.empty() && ch != expected_codec_hash)
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": dataset was built against codec " + ch +
                                     " but this run uses " + expected_codec_hash +
                                     "; regenerate the dataset");
        fn(record_from_json(j));
    }
}

inline std::vector<TrainingRecord> load_dataset(const std::string& path,
                                                const std::string& expected_vocab_hash = "",
                                                const std::string& expected_codec_hash = "") {
    std::vector<TrainingRecord> records;
    stream_dataset(path, expected_vocab_hash, expected_codec_hash,
                   [&](const TrainingRecord& r) { records.push_back(r); });
    return records;
}

}  // namespace iclp
