#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "iclp/rng.hpp"
#include "iclp/tokenizer.hpp"

namespace iclp {

struct ReasoningSample {
    std::string id;
    std::string family;        // "arith" | "strings"
    std::string procedure_id;  // opaque name, e.g. "P-17"
    std::string question;
    std::vector<std::string> steps;  // "Step i: ..." texts
    std::vector<std::string> plans;  // one-sentence instructions, same length
    std::string answer;              // canonical string
    std::string source;              // corpus provenance tag, may be empty
};

struct PlanChain {
    std::vector<std::string> plans;
    std::string source_sample_id;
    int trajectory_index = 0;

    bool operator==(const PlanChain& o) const { return plans == o.plans; }
};

// ---- task templates ----

// state for either family; exactly one of the two is live
struct TaskState {
    int value = 0;
    std::string text;
};

struct PlanTemplate {
    std::string template_id;
    std::string plan_text;
    // transition only; the replay oracle uses this path alone
    std::function<TaskState(const TaskState&)> transition;
    // body of the step text (without the "Step i: " prefix)
    std::function<std::string(const TaskState& before, const TaskState& after)> render;
};

inline int digit_sum(int v) {
    int s = 0;
    for (v = std::abs(v); v > 0; v /= 10) s += v % 10;
    return s;
}

inline std::vector<PlanTemplate> arith_templates() {
    auto num = [](const TaskState& s) { return std::to_string(s.value); };
    std::vector<PlanTemplate> t;
    t.push_back({"double", "Double the current value.",
                 [](const TaskState& s) { return TaskState{(2 * s.value) % 100, ""}; },
                 [num](const TaskState& a, const TaskState& b) {
                     int raw = 2 * a.value;
                     std::string txt = "double: 2 × " + num(a) + " = " + std::to_string(raw);
                     if (raw >= 100) txt += ", wrap to " + num(b);
                     return txt;
                 }});
    t.push_back({"add3", "Add three to the current value.",
                 [](const TaskState& s) { return TaskState{(s.value + 3) % 100, ""}; },
                 [num](const TaskState& a, const TaskState& b) {
                     int raw = a.value + 3;
                     std::string txt = "add3: " + num(a) + " + 3 = " + std::to_string(raw);
                     if (raw >= 100) txt += ", wrap to " + num(b);
                     return txt;
                 }});
    t.push_back({"square_mod_97", "Square the current value modulo ninety-seven.",
                 [](const TaskState& s) { return TaskState{(s.value * s.value) % 97, ""}; },
                 [num](const TaskState& a, const TaskState& b) {
                     return "square_mod_97: " + num(a) + " × " + num(a) + " mod 97 = " + num(b);
                 }});
    t.push_back({"halve_floor", "Halve the current value rounding down.",
                 [](const TaskState& s) { return TaskState{s.value / 2, ""}; },
                 [num](const TaskState& a, const TaskState& b) {
                     return "halve_floor: half of " + num(a) + " is " + num(b);
                 }});
    t.push_back({"negate_mod_97", "Negate the current value modulo ninety-seven.",
                 [](const TaskState& s) { return TaskState{(97 - s.value % 97) % 97, ""}; },
                 [num](const TaskState& a, const TaskState& b) {
                     return "negate_mod_97: negate " + num(a) + " mod 97 = " + num(b);
                 }});
    t.push_back({"add_digit_sum", "Add the digit sum to the current value.",
                 [](const TaskState& s) {
                     return TaskState{(s.value + digit_sum(s.value)) % 100, ""};
                 },
                 [num](const TaskState& a, const TaskState& b) {
                     int ds = digit_sum(a.value);
                     int raw = a.value + ds;
                     std::string txt = "add_digit_sum: " + num(a) + " + " + std::to_string(ds) +
                                       " = " + std::to_string(raw);
                     if (raw >= 100) txt += ", wrap to " + num(b);
                     return txt;
                 }});
    return t;
}

inline std::vector<PlanTemplate> strings_templates() {
    auto q = [](const std::string& s) { return "`" + s + "`"; };
    std::vector<PlanTemplate> t;
    t.push_back({"reverse", "Reverse the current string.",
                 [](const TaskState& s) {
                     return TaskState{0, std::string(s.text.rbegin(), s.text.rend())};
                 },
                 [q](const TaskState& a, const TaskState& b) {
                     return "reverse: " + q(a.text) + " -> " + q(b.text);
                 }});
    t.push_back({"rotate_left_1", "Rotate the string left by one character.",
                 [](const TaskState& s) {
                     if (s.text.size() < 2) return TaskState{0, s.text};
                     return TaskState{0, s.text.substr(1) + s.text[0]};
                 },
                 [q](const TaskState& a, const TaskState& b) {
                     return "rotate_left_1: " + q(a.text) + " -> " + q(b.text);
                 }});
    t.push_back({"duplicate_first", "Duplicate the first character.",
                 [](const TaskState& s) {
                     if (s.text.empty()) return s;
                     return TaskState{0, s.text.substr(0, 1) + s.text};
                 },
                 [q](const TaskState& a, const TaskState& b) {
                     return "duplicate_first: " + q(a.text) + " -> " + q(b.text);
                 }});
    t.push_back({"drop_last", "Drop the last character.",
                 [](const TaskState& s) {
                     if (s.text.size() < 2) return s;
                     return TaskState{0, s.text.substr(0, s.text.size() - 1)};
                 },
                 [q](const TaskState& a, const TaskState& b) {
                     return "drop_last: " + q(a.text) + " -> " + q(b.text);
                 }});
    return t;
}

inline const std::vector<std::string>& strings_seed_words() {
    static const std::vector<std::string> words = {
        "cat",  "dog",  "sun",  "map",  "pen",  "cup",  "book", "fish", "tree", "star",
        "lamp", "door", "rock", "bird", "leaf", "milk", "sand", "wolf", "ring", "coin",
        "maze", "drum", "kite", "frog", "bell", "moon", "ship", "corn", "pear", "vine",
        "fork", "nest", "gate", "rope", "dice", "card", "wave", "snow", "clay", "moss"};
    return words;
}

// ---- procedures ----

struct ProcedureSet {
    std::string family;
    // name -> ordered template ids, e.g. "P-17" -> {double, add3}
    std::map<std::string, std::vector<std::string>> procedures;

    nlohmann::json manifest() const {
        nlohmann::json j;
        j["family"] = family;
        j["procedures"] = procedures;
        return j;
    }
};

inline const PlanTemplate& find_template(const std::vector<PlanTemplate>& ts,
                                         const std::string& id) {
    for (const auto& t : ts)
        if (t.template_id == id) return t;
    throw std::out_of_range("unknown template: " + id);
}

// Fixed 2-4 step template sequences; every template is guaranteed to appear
// in at least two procedures so plans recur across questions.
inline ProcedureSet build_procedures(const std::string& family, int count, Rng& rng) {
    const auto templates = family == "arith" ? arith_templates() : strings_templates();
    const char prefix = family == "arith" ? 'P' : 'S';
    int n_templates = static_cast<int>(templates.size());
    if (count < 2) throw std::invalid_argument("need at least 2 procedures");
    ProcedureSet set;
    set.family = family;
    std::set<std::vector<std::string>> used;
    std::vector<int> usage(static_cast<size_t>(n_templates), 0);
    for (int p = 0; p < count; ++p) {
        std::vector<std::string> seq;
        for (int attempt = 0;; ++attempt) {
            if (attempt > 1000) throw std::runtime_error("could not build distinct procedures");
            seq.clear();
            int len = 2 + static_cast<int>(rng.next_below(3));  // 2..4 steps
            for (int s = 0; s < len; ++s) {
                int t;
                // steer the early picks toward rarely used templates so every
                // template lands in >= 2 procedures
                if (p >= count - n_templates) {
                    int min_u = *std::min_element(usage.begin(), usage.end());
                    std::vector<int> rare;
                    for (int i = 0; i < n_templates; ++i)
                        if (usage[static_cast<size_t>(i)] <= min_u + 1) rare.push_back(i);
                    t = rare[rng.next_below(rare.size())];
                } else {
                    t = static_cast<int>(rng.next_below(static_cast<uint64_t>(n_templates)));
                }
                seq.push_back(templates[static_cast<size_t>(t)].template_id);
            }
            if (used.insert(seq).second) break;
        }
        for (const auto& id : seq)
            for (int i = 0; i < n_templates; ++i)
                if (templates[static_cast<size_t>(i)].template_id == id)
                    ++usage[static_cast<size_t>(i)];
        set.procedures[prefix + std::string("-") + std::to_string(p + 1)] = seq;
    }
    // final guarantee: patch rare templates into the longest procedures
    for (int i = 0; i < n_templates; ++i) {
        while (usage[static_cast<size_t>(i)] < 2) {
            auto it = std::max_element(
                set.procedures.begin(), set.procedures.end(),
                [](const auto& a, const auto& b) { return a.second.size() < b.second.size(); });
            it->second.back() = templates[static_cast<size_t>(i)].template_id;
            ++usage[static_cast<size_t>(i)];
        }
    }
    return set;
}

// ---- generation and replay ----

inline TaskState replay_procedure(const std::string& family,
                                  const std::vector<std::string>& template_seq,
                                  const TaskState& initial) {
    const auto templates = family == "arith" ? arith_templates() : strings_templates();
    TaskState s = initial;
    for (const auto& id : template_seq) s = find_template(templates, id).transition(s);
    return s;
}

inline std::string canonical_answer(const std::string& family, const TaskState& s) {
    return family == "arith" ? std::to_string(s.value) : s.text;
}

struct SyntheticCorpus {
    std::vector<ReasoningSample> samples;
    ProcedureSet procedures;
};

struct CorpusOptions {
    int n_procedures = 20;
    // arith initial values are drawn from [state_lo, state_hi]; a disjoint
    // range gives a held-out evaluation split
    int state_lo = 0;
    int state_hi = 99;
    // with unique_pairs, every (procedure, initial state) pair is distinct and
    // count is capped by the number of combinations
    bool unique_pairs = true;
};

inline SyntheticCorpus generate_synthetic_corpus(const std::string& family, int count,
                                                 uint64_t seed, CorpusOptions opt = {}) {
    if (family != "arith" && family != "strings")
        throw std::invalid_argument("unknown family: " + family);
    if (count < 1) throw std::invalid_argument("count must be >= 1");
    if (opt.state_lo < 0 || opt.state_hi > 99 || opt.state_lo > opt.state_hi)
        throw std::invalid_argument("state range must sit inside [0,99]");
    Rng rng(seed);
    SyntheticCorpus out;
    out.procedures = build_procedures(family, opt.n_procedures, rng);
    const auto templates = family == "arith" ? arith_templates() : strings_templates();

    int64_t n_states = family == "arith" ? (opt.state_hi - opt.state_lo + 1)
                                         : static_cast<int64_t>(strings_seed_words().size());
    if (opt.unique_pairs && count > n_states * opt.n_procedures)
        throw std::invalid_argument("count exceeds available (state, procedure) combinations");

    std::vector<std::string> names;
    for (const auto& [name, seq] : out.procedures.procedures) names.push_back(name);

    std::set<std::pair<std::string, std::string>> taken;
    for (int i = 0; i < count; ++i) {
        std::string name;
        TaskState s0;
        std::string state_key;
        do {
            name = names[rng.next_below(names.size())];
            if (family == "arith") {
                s0.value = opt.state_lo +
                           static_cast<int>(rng.next_below(
                               static_cast<uint64_t>(opt.state_hi - opt.state_lo + 1)));
                state_key = std::to_string(s0.value);
            } else {
                s0.text = strings_seed_words()[rng.next_below(strings_seed_words().size())];
                state_key = s0.text;
            }
        } while (opt.unique_pairs && !taken.insert({name, state_key}).second);

        const auto& seq = out.procedures.procedures.at(name);
        ReasoningSample smp;
        smp.id = family + "-" + std::to_string(i);
        smp.family = family;
        smp.procedure_id = name;
        if (family == "arith") {
            smp.question = "Start with " + std::to_string(s0.value) + ". Apply procedure " + name +
                           ". What is the final value?";
        } else {
            smp.question = "Start with `" + s0.text + "`. Apply procedure " + name +
                           ". What is the final string?";
        }
        TaskState s = s0;
        for (size_t k = 0; k < seq.size(); ++k) {
            const auto& tpl = find_template(templates, seq[k]);
            TaskState next = tpl.transition(s);
            smp.steps.push_back("Step " + std::to_string(k + 1) + ": " + tpl.render(s, next));
            smp.plans.push_back(tpl.plan_text);
            s = next;
        }
        smp.answer = canonical_answer(family, s);
        // the answer must equal an independent replay of the template sequence
        TaskState check = replay_procedure(family, seq, s0);
        if (canonical_answer(family, check) != smp.answer)
            throw std::logic_error("replay mismatch for sample " + smp.id);
        out.samples.push_back(std::move(smp));
    }
    return out;
}

// ---- answer extraction ----

// arith: last integer token; strings: last backquoted span
inline std::optional<std::string> extract_answer(const std::string& text,
                                                 const std::string& family) {
    if (family == "arith") {
        std::optional<std::string> best;
        size_t i = 0;
        while (i < text.size()) {
            if (std::isdigit(static_cast<unsigned char>(text[i])) ||
                (text[i] == '-' && i + 1 < text.size() &&
                 std::isdigit(static_cast<unsigned char>(text[i + 1])))) {
                size_t j = i + (text[i] == '-' ? 1 : 0);
                while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
                // reject digits glued into an identifier like P-17's "17"? keep:
                // the grammar is "last integer token", P-17 digits count too, so
                // renderers never end a step with a procedure name.
                best = text.substr(i, j - i);
                i = j;
            } else {
                ++i;
            }
        }
        return best;
    }
    std::optional<std::string> best;
    size_t pos = 0;
    while (true) {
        size_t a = text.find('`', pos);
        if (a == std::string::npos) break;
        size_t b = text.find('`', a + 1);
        if (b == std::string::npos) break;
        best = text.substr(a + 1, b - a - 1);
        pos = b + 1;
    }
    return best;
}

// ---- trajectory filtering / dedup / merge ----

struct Trajectory {
    std::vector<std::string> steps;
    std::vector<std::string> plans;
};

// keep trajectories whose extracted final answer string-equals the canonical one
inline std::vector<Trajectory> filter_correct(const std::vector<Trajectory>& trajectories,
                                              const std::string& answer,
                                              const std::string& family,
                                              int* rejected_unextractable = nullptr) {
    std::vector<Trajectory> kept;
    for (const auto& t : trajectories) {
        if (t.steps.empty()) continue;
        auto got = extract_answer(t.steps.back(), family);
        if (!got) {
            if (rejected_unextractable) ++*rejected_unextractable;
            continue;
        }
        if (*got == answer) kept.push_back(t);
    }
    return kept;
}

// first occurrence kept, order preserved, exact element-wise text equality
inline std::vector<PlanChain> dedupe_chains(const std::vector<PlanChain>& chains) {
    std::vector<PlanChain> out;
    std::set<std::vector<std::string>> seen;
    for (const auto& c : chains)
        if (seen.insert(c.plans).second) out.push_back(c);
    return out;
}

// Union with duplicates removed by key; default key is the exact plan-chain
// text. A codec-aware caller passes a latent-index key instead.
inline std::vector<ReasoningSample> merge_corpora(
    const std::vector<std::vector<ReasoningSample>>& corpora,
    const std::function<std::string(const ReasoningSample&)>& key = {}) {
    auto chain_key = [](const ReasoningSample& s) {
        std::string k;
        for (const auto& p : s.plans) {
            k += p;
            k += '\x1f';
        }
        return k;
    };
    std::vector<ReasoningSample> out;
    std::set<std::string> seen;
    for (const auto& corpus : corpora)
        for (const auto& s : corpus)
            if (seen.insert(key ? key(s) : chain_key(s)).second) out.push_back(s);
    return out;
}

// ---- JSONL I/O ----

inline nlohmann::json sample_to_json(const ReasoningSample& s) {
    nlohmann::json j = {{"id", s.id},           {"family", s.family},
                        {"procedure_id", s.procedure_id}, {"question", s.question},
                        {"steps", s.steps},     {"plans", s.plans},
                        {"answer", s.answer}};
    if (!s.source.empty()) j["source"] = s.source;
    return j;
}

inline ReasoningSample sample_from_json(const nlohmann::json& j) {
    ReasoningSample s;
    s.id = j.at("id");
    s.family = j.at("family");
    s.procedure_id = j.at("procedure_id");
    s.question = j.at("question");
    s.steps = j.at("steps").get<std::vector<std::string>>();
    s.plans = j.at("plans").get<std::vector<std::string>>();
    s.answer = j.at("answer");
    if (j.contains("source")) s.source = j.at("source");
    if (s.steps.size() != s.plans.size() || s.steps.empty())
        throw std::invalid_argument("sample " + s.id + ": |steps| must equal |plans| and be >= 1");
    return s;
}

inline void save_corpus(const std::vector<ReasoningSample>& samples, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    for (const auto& s : samples) f << sample_to_json(s).dump() << "\n";
}

inline std::vector<ReasoningSample> load_corpus(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::vector<ReasoningSample> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(sample_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

}  // namespace iclp
