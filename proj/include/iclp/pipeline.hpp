#pragma once

// Pipeline orchestration: a JSON config drives the stage graph
// gen-corpus -> train-codec -> latentize -> finetune -> evaluate -> analyze,
// with distill and ablate as side stages. Every stage records the hash of its
// inputs in a manifest and is skipped when nothing changed; every artifact
// carries the config hash that produced it. Artifacts never contain
// timestamps, so identical seeds reproduce byte-identical outputs.

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iclp/codec.hpp"
#include "iclp/corpus.hpp"
#include "iclp/distill.hpp"
#include "iclp/eval.hpp"
#include "iclp/latentize.hpp"
#include "iclp/lm.hpp"

namespace iclp {

// ---- errors ----

// Validation failure listing every violation, not just the first.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(std::vector<std::string> violations)
        : std::runtime_error(join(violations)), violations_(std::move(violations)) {}
    const std::vector<std::string>& violations() const { return violations_; }

private:
    static std::string join(const std::vector<std::string>& v) {
        std::string out = "config validation failed:";
        for (const auto& s : v) out += "\n  - " + s;
        return out;
    }
    std::vector<std::string> violations_;
};

class PipelineError : public std::runtime_error {
public:
    PipelineError(std::string stage, const std::string& message)
        : std::runtime_error(message), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

// ---- configuration ----

struct CorpusSection {
    std::string family = "arith";
    int train_count = 2000;
    int test_count = 200;
    int n_procedures = 20;
    // train and test draw initial states from disjoint ranges so the test
    // split is held out; the procedure set is shared
    int train_state_lo = 0, train_state_hi = 79;
    int test_state_lo = 80, test_state_hi = 99;
    bool unique_pairs = false;
};

struct DistillSection {
    std::string base_url;
    std::string model = "reference-model";
    std::string fixture;  // replay transcript path; empty -> live HTTP
    double decompose_temperature = 0.0;
    double explore_temperature = 0.3;
    double summarize_temperature = 0.3;
    int max_trajectories = 20;
    int question_limit = 0;  // 0 = whole corpus
};

struct AnalysisSection {
    int step_index = 1;
    bool refine = false;
    int refine_iters = 150;
};

struct AblationSection {
    std::vector<int> code_dims{16, 32};
    std::vector<int> codebook_sizes{32, 64};
};

struct PipelineConfig {
    std::string out_dir = "runs/default";
    uint64_t seed = 7;
    // which dataset the fine-tune stage trains on
    std::string dataset_mode = "latent";  // latent | cot_only | explicit_plan
    CorpusSection corpus;
    CodecConfig codec;
    CodecTrainOptions codec_train;
    LMConfig lm;  // lm.vocab is derived at runtime, not configured
    FinetuneOptions finetune;
    GenerateOptions generate;
    DistillSection distill;
    AnalysisSection analysis;
    AblationSection ablation;

    static PipelineConfig desk_defaults() {
        PipelineConfig c;
        c.corpus.train_count = 320;
        c.corpus.test_count = 80;
        c.codec.memory_tokens = 6;
        c.codec.codebook_size = 64;
        c.codec.code_dim = 32;
        c.codec.encoder = {1, 4, 64, 48, false, 0.0};
        c.codec.decoder = {1, 4, 64, 64, true, 0.0};
        c.codec_train.epochs = 60;
        c.codec_train.lr = 5e-3;
        c.codec_train.lr_floor = 5e-4;
        c.lm.layers = 2;
        c.lm.heads = 4;
        c.lm.d_model = 96;
        c.lm.context = 224;
        c.finetune.epochs = 3;
        c.generate.max_new_tokens = 96;
        return c;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["out_dir"] = out_dir;
        j["seed"] = seed;
        j["dataset_mode"] = dataset_mode;
        j["corpus"] = {{"family", corpus.family},
                       {"train_count", corpus.train_count},
                       {"test_count", corpus.test_count},
                       {"n_procedures", corpus.n_procedures},
                       {"train_state_lo", corpus.train_state_lo},
                       {"train_state_hi", corpus.train_state_hi},
                       {"test_state_lo", corpus.test_state_lo},
                       {"test_state_hi", corpus.test_state_hi},
                       {"unique_pairs", corpus.unique_pairs}};
        j["codec"] = codec.to_json();
        j["codec_train"] = {{"epochs", codec_train.epochs},
                            {"batch_size", codec_train.batch_size},
                            {"lr", codec_train.lr},
                            {"lr_floor", codec_train.lr_floor},
                            {"weight_decay", codec_train.weight_decay},
                            {"dead_code_restarts", codec_train.dead_code_restarts}};
        auto lmj = lm.to_json();
        lmj.erase("vocab");  // derived at runtime
        j["lm"] = lmj;
        j["finetune"] = {{"epochs", finetune.epochs},
                         {"batch_size", finetune.batch_size},
                         {"lr", finetune.lr},
                         {"lr_floor", finetune.lr_floor},
                         {"weight_decay", finetune.weight_decay},
                         {"eval_records", finetune.eval_records}};
        j["generate"] = {{"temperature", generate.temperature},
                         {"max_new_tokens", generate.max_new_tokens}};
        j["distill"] = {{"base_url", distill.base_url},
                        {"model", distill.model},
                        {"fixture", distill.fixture},
                        {"decompose_temperature", distill.decompose_temperature},
                        {"explore_temperature", distill.explore_temperature},
                        {"summarize_temperature", distill.summarize_temperature},
                        {"max_trajectories", distill.max_trajectories},
                        {"question_limit", distill.question_limit}};
        j["analysis"] = {{"step_index", analysis.step_index},
                         {"refine", analysis.refine},
                         {"refine_iters", analysis.refine_iters}};
        j["ablation"] = {{"code_dims", ablation.code_dims},
                         {"codebook_sizes", ablation.codebook_sizes}};
        return j;
    }

    std::string hash() const { return fnv1a64_hex(to_json().dump()); }

    static PipelineConfig from_json(const nlohmann::json& j);
};

namespace detail {

// short aliases accepted on the command line; the snapshot always stores the
// canonical key, so an alias and its long form hash identically
inline void canonicalize_codec_aliases(nlohmann::json& j) {
    if (!j.contains("codec") || !j["codec"].is_object()) return;
    auto& c = j["codec"];
    const std::pair<const char*, const char*> aliases[] = {
        {"K", "codebook_size"}, {"L", "memory_tokens"}, {"d_h", "code_dim"}};
    for (auto [a, b] : aliases) {
        if (c.contains(a)) {
            c[b] = c[a];
            c.erase(a);
        }
    }
}

// structural check against the defaults snapshot: unknown keys and type
// mismatches are all collected before value-range checks run
inline void check_shape(const nlohmann::json& value, const nlohmann::json& ref,
                        const std::string& path, std::vector<std::string>& out) {
    if (ref.is_object()) {
        if (!value.is_object()) {
            out.push_back(path + ": expected an object");
            return;
        }
        for (auto it = value.begin(); it != value.end(); ++it) {
            if (!ref.contains(it.key())) {
                out.push_back(path + "." + it.key() + ": unknown key");
                continue;
            }
            check_shape(it.value(), ref.at(it.key()), path + "." + it.key(), out);
        }
        return;
    }
    if (ref.is_string() && !value.is_string())
        out.push_back(path + ": expected a string");
    else if (ref.is_boolean() && !value.is_boolean())
        out.push_back(path + ": expected a boolean");
    else if (ref.is_number() && !value.is_number())
        out.push_back(path + ": expected a number");
    else if (ref.is_array() && !value.is_array())
        out.push_back(path + ": expected an array");
}

inline void deep_merge(nlohmann::json& base, const nlohmann::json& over) {
    for (auto it = over.begin(); it != over.end(); ++it) {
        if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
            deep_merge(base[it.key()], it.value());
        else
            base[it.key()] = it.value();
    }
}

}  // namespace detail

inline PipelineConfig PipelineConfig::from_json(const nlohmann::json& input) {
    std::vector<std::string> bad;
    nlohmann::json j = input;
    detail::canonicalize_codec_aliases(j);
    nlohmann::json merged = desk_defaults().to_json();
    detail::check_shape(j, merged, "config", bad);
    if (!bad.empty()) throw ConfigError(std::move(bad));
    detail::deep_merge(merged, j);

    PipelineConfig c = desk_defaults();
    c.out_dir = merged.at("out_dir");
    c.seed = merged.at("seed");
    c.dataset_mode = merged.at("dataset_mode");
    const auto& co = merged.at("corpus");
    c.corpus = {co.at("family"),         co.at("train_count"),   co.at("test_count"),
                co.at("n_procedures"),   co.at("train_state_lo"), co.at("train_state_hi"),
                co.at("test_state_lo"),  co.at("test_state_hi"),  co.at("unique_pairs")};
    try {
        c.codec = CodecConfig::from_json(merged.at("codec"));
    } catch (const std::exception& e) {
        bad.push_back(std::string("config.codec: ") + e.what());
    }
    const auto& ct = merged.at("codec_train");
    c.codec_train.epochs = ct.at("epochs");
    c.codec_train.batch_size = ct.at("batch_size");
    c.codec_train.lr = ct.at("lr");
    c.codec_train.lr_floor = ct.at("lr_floor");
    c.codec_train.weight_decay = ct.at("weight_decay");
    c.codec_train.dead_code_restarts = ct.at("dead_code_restarts");
    auto lmj = merged.at("lm");
    lmj["vocab"] = kNumReserved;  // placeholder; the real size is derived
    try {
        c.lm = LMConfig::from_json(lmj);
    } catch (const std::exception& e) {
        bad.push_back(std::string("config.lm: ") + e.what());
    }
    const auto& ft = merged.at("finetune");
    c.finetune.epochs = ft.at("epochs");
    c.finetune.batch_size = ft.at("batch_size");
    c.finetune.lr = ft.at("lr");
    c.finetune.lr_floor = ft.at("lr_floor");
    c.finetune.weight_decay = ft.at("weight_decay");
    c.finetune.eval_records = ft.at("eval_records");
    const auto& ge = merged.at("generate");
    c.generate.temperature = ge.at("temperature");
    c.generate.max_new_tokens = ge.at("max_new_tokens");
    const auto& di = merged.at("distill");
    c.distill = {di.at("base_url"),
                 di.at("model"),
                 di.at("fixture"),
                 di.at("decompose_temperature"),
                 di.at("explore_temperature"),
                 di.at("summarize_temperature"),
                 di.at("max_trajectories"),
                 di.at("question_limit")};
    const auto& an = merged.at("analysis");
    c.analysis = {an.at("step_index"), an.at("refine"), an.at("refine_iters")};
    const auto& ab = merged.at("ablation");
    c.ablation.code_dims = ab.at("code_dims").get<std::vector<int>>();
    c.ablation.codebook_sizes = ab.at("codebook_sizes").get<std::vector<int>>();

    auto require = [&](bool ok, const std::string& msg) {
        if (!ok) bad.push_back(msg);
    };
    require(c.out_dir != "", "config.out_dir: must not be empty");
    require(c.dataset_mode == "latent" || c.dataset_mode == "cot_only" ||
                c.dataset_mode == "explicit_plan",
            "config.dataset_mode: must be latent, cot_only, or explicit_plan");
    require(c.corpus.family == "arith" || c.corpus.family == "strings",
            "config.corpus.family: must be arith or strings");
    require(c.corpus.train_count >= 1, "config.corpus.train_count: must be >= 1");
    require(c.corpus.test_count >= 1, "config.corpus.test_count: must be >= 1");
    require(c.corpus.n_procedures >= 1, "config.corpus.n_procedures: must be >= 1");
    require(c.corpus.train_state_lo >= 0 && c.corpus.train_state_hi <= 99 &&
                c.corpus.train_state_lo <= c.corpus.train_state_hi,
            "config.corpus.train_state range: must sit inside [0,99]");
    require(c.corpus.test_state_lo >= 0 && c.corpus.test_state_hi <= 99 &&
                c.corpus.test_state_lo <= c.corpus.test_state_hi,
            "config.corpus.test_state range: must sit inside [0,99]");
    require(c.codec_train.epochs >= 1, "config.codec_train.epochs: must be >= 1");
    require(c.codec_train.batch_size >= 1, "config.codec_train.batch_size: must be >= 1");
    require(c.codec_train.lr > 0, "config.codec_train.lr: must be > 0");
    require(c.finetune.epochs >= 1, "config.finetune.epochs: must be >= 1");
    require(c.finetune.batch_size >= 1, "config.finetune.batch_size: must be >= 1");
    require(c.finetune.lr > 0, "config.finetune.lr: must be > 0");
    require(c.generate.temperature >= 0, "config.generate.temperature: must be >= 0");
    require(c.generate.max_new_tokens >= 1, "config.generate.max_new_tokens: must be >= 1");
    require(c.distill.max_trajectories >= 1, "config.distill.max_trajectories: must be >= 1");
    require(c.analysis.step_index >= 1, "config.analysis.step_index: must be >= 1");
    require(!c.ablation.code_dims.empty(), "config.ablation.code_dims: must not be empty");
    require(!c.ablation.codebook_sizes.empty(),
            "config.ablation.codebook_sizes: must not be empty");
    if (!bad.empty()) throw ConfigError(std::move(bad));
    return c;
}

// ---- dotted-path overrides (`--set codec.K=64`) ----

inline void apply_override(nlohmann::json& j, const std::string& key_value) {
    auto eq = key_value.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError({"override '" + key_value + "': expected key=value"});
    std::string key = key_value.substr(0, eq);
    std::string value = key_value.substr(eq + 1);
    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::parse_error&) {
        parsed = value;  // bare strings need no quoting
    }
    nlohmann::json* node = &j;
    std::istringstream ks(key);
    std::vector<std::string> parts;
    for (std::string p; std::getline(ks, p, '.');) parts.push_back(p);
    if (parts.empty()) throw ConfigError({"override '" + key_value + "': empty key"});
    for (size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
    (*node)[parts.back()] = parsed;
}

// ---- stage graph ----

inline const std::vector<std::string>& all_commands() {
    static const std::vector<std::string> cmds = {"gen-corpus", "distill",  "train-codec",
                                                  "latentize",  "finetune", "evaluate",
                                                  "analyze",    "ablate",   "all"};
    return cmds;
}

// upstream stage for each artifact a stage consumes; single-stage runs do not
// rebuild dependencies, they name the stage to run instead
inline std::vector<std::string> run_order(const std::string& command) {
    if (command == "all")
        return {"gen-corpus", "train-codec", "latentize", "finetune", "evaluate", "analyze"};
    for (const auto& c : all_commands())
        if (c == command) return {command};
    throw ConfigError({"unknown command '" + command + "'"});
}

struct StageReport {
    std::string stage;
    bool skipped = false;
    std::vector<std::string> outputs;
};

// ---- artifact helpers ----

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::string file_hash(const std::string& path) { return fnv1a64_hex(read_file(path)); }

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << j.dump(2) << "\n";
}

// exclusive per-directory lock; a stale file means another run owns (or
// crashed owning) the directory and is reported, never silently stolen
class DirLock {
public:
    explicit DirLock(const std::string& dir) : path_(dir + "/.lock") {
        int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw PipelineError("lock", "output directory is locked by " + path_ +
                                            "; remove the file if no other run is active");
        ::close(fd);
    }
    ~DirLock() { std::filesystem::remove(path_); }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string path_;
};

// ---- the pipeline ----

class Pipeline {
public:
    explicit Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) {
        std::filesystem::create_directories(cfg_.out_dir);
        manifest_path_ = cfg_.out_dir + "/manifest.json";
        if (std::filesystem::exists(manifest_path_))
            manifest_ = nlohmann::json::parse(read_file(manifest_path_));
        else
            manifest_ = {{"stages", nlohmann::json::object()}};
    }

    const PipelineConfig& config() const { return cfg_; }
    std::string artifact(const std::string& name) const { return cfg_.out_dir + "/" + name; }

    // Runs the command's stages in dependency order. On failure writes
    // error.json into the output directory and rethrows.
    std::vector<StageReport> run(const std::string& command) {
        auto order = run_order(command);  // validate before locking
        DirLock lock(cfg_.out_dir);
        std::filesystem::remove(artifact("error.json"));
        write_json_file(artifact("config_snapshot.json"),
                        {{"config", cfg_.to_json()}, {"config_hash", cfg_.hash()}});
        std::vector<StageReport> reports;
        for (const auto& stage : order) {
            try {
                reports.push_back(run_stage(stage));
            } catch (const std::exception& e) {
                write_json_file(artifact("error.json"), {{"command", command},
                                                         {"stage", stage},
                                                         {"error", e.what()},
                                                         {"config_hash", cfg_.hash()}});
                throw;
            }
        }
        return reports;
    }

private:
    StageReport run_stage(const std::string& stage) {
        std::string input_hash = stage_input_hash(stage);
        auto outputs = stage_outputs(stage);
        auto& done = manifest_["stages"];
        if (done.contains(stage) && done[stage].value("input_hash", "") == input_hash) {
            bool all_present = true;
            for (const auto& o : outputs)
                if (!std::filesystem::exists(artifact(o))) all_present = false;
            if (all_present) {
                std::cerr << "[" << stage << "] inputs unchanged, skipping\n";
                return {stage, true, outputs};
            }
        }
        std::cerr << "[" << stage << "] running\n";
        if (stage == "gen-corpus")
            do_gen_corpus();
        else if (stage == "distill")
            do_distill();
        else if (stage == "train-codec")
            do_train_codec();
        else if (stage == "latentize")
            do_latentize();
        else if (stage == "finetune")
            do_finetune();
        else if (stage == "evaluate")
            do_evaluate();
        else if (stage == "analyze")
            do_analyze();
        else if (stage == "ablate")
            do_ablate();
        else
            throw PipelineError(stage, "unknown stage");
        done[stage] = {{"input_hash", input_hash}, {"outputs", outputs}};
        write_json_file(manifest_path_, manifest_);
        return {stage, false, outputs};
    }

    // hash of everything a stage's output depends on: the relevant config
    // sections, the global seed, and the content of upstream artifacts
    std::string stage_input_hash(const std::string& stage) {
        nlohmann::json all = cfg_.to_json();
        all.erase("out_dir");  // moving a run directory must not invalidate it
        nlohmann::json parts;
        parts["seed"] = cfg_.seed;
        if (stage == "gen-corpus") {
            parts["corpus"] = all["corpus"];
        } else if (stage == "distill") {
            parts["distill"] = all["distill"];
            parts["upstream"] = require_artifact_hash(stage, "corpus.jsonl", "gen-corpus");
        } else if (stage == "train-codec") {
            parts["codec"] = all["codec"];
            parts["codec_train"] = all["codec_train"];
            parts["upstream"] = require_artifact_hash(stage, "corpus.jsonl", "gen-corpus");
        } else if (stage == "latentize") {
            parts["dataset_mode"] = cfg_.dataset_mode;
            parts["upstream"] = {require_artifact_hash(stage, "corpus.jsonl", "gen-corpus"),
                                 require_artifact_hash(stage, "codec.ckpt", "train-codec")};
        } else if (stage == "finetune") {
            parts["lm"] = all["lm"];
            parts["finetune"] = all["finetune"];
            parts["upstream"] = {require_artifact_hash(stage, "latent.jsonl", "latentize"),
                                 require_artifact_hash(stage, "codec.ckpt", "train-codec")};
        } else if (stage == "evaluate") {
            parts["generate"] = all["generate"];
            parts["upstream"] = {require_artifact_hash(stage, "lm.ckpt", "finetune"),
                                 require_artifact_hash(stage, "latent.jsonl", "latentize"),
                                 require_artifact_hash(stage, "codec.ckpt", "train-codec"),
                                 require_artifact_hash(stage, "test_corpus.jsonl", "gen-corpus")};
        } else if (stage == "analyze") {
            parts["analysis"] = all["analysis"];
            parts["upstream"] = {require_artifact_hash(stage, "codec.ckpt", "train-codec"),
                                 require_artifact_hash(stage, "test_corpus.jsonl", "gen-corpus")};
        } else if (stage == "ablate") {
            parts["ablation"] = all["ablation"];
            parts["lm"] = all["lm"];
            parts["upstream"] = {require_artifact_hash(stage, "corpus.jsonl", "gen-corpus"),
                                 require_artifact_hash(stage, "test_corpus.jsonl", "gen-corpus")};
        }
        return fnv1a64_hex(parts.dump());
    }

    std::string require_artifact_hash(const std::string& stage, const std::string& name,
                                      const std::string& producer) {
        auto path = artifact(name);
        if (!std::filesystem::exists(path))
            throw PipelineError(stage, "missing upstream artifact " + path + "; run '" +
                                           producer + "' first");
        return file_hash(path);
    }

    static std::vector<std::string> stage_outputs(const std::string& stage) {
        if (stage == "gen-corpus")
            return {"corpus.jsonl", "test_corpus.jsonl", "corpus_meta.json"};
        if (stage == "distill") return {"distilled.jsonl"};
        if (stage == "train-codec") return {"codec.ckpt", "codec_stats.json"};
        if (stage == "latentize") return {"latent.jsonl", "latent_meta.json"};
        if (stage == "finetune") return {"lm.ckpt", "train_log.csv"};
        if (stage == "evaluate") return {"eval.json", "cost.csv"};
        if (stage == "analyze")
            return {"analysis/distance.csv", "analysis/heatmap.svg", "analysis/projection.csv",
                    "analysis/scatter.svg", "analysis/structure.json"};
        if (stage == "ablate") return {"ablation.csv"};
        return {};
    }

    // ---- stages ----

    CorpusOptions corpus_options(bool test_split) const {
        CorpusOptions o;
        o.n_procedures = cfg_.corpus.n_procedures;
        o.unique_pairs = test_split ? true : cfg_.corpus.unique_pairs;
        o.state_lo = test_split ? cfg_.corpus.test_state_lo : cfg_.corpus.train_state_lo;
        o.state_hi = test_split ? cfg_.corpus.test_state_hi : cfg_.corpus.train_state_hi;
        return o;
    }

    void do_gen_corpus() {
        // the same corpus seed drives both splits so they share one procedure
        // set; the state ranges keep them disjoint
        auto train = generate_synthetic_corpus(cfg_.corpus.family, cfg_.corpus.train_count,
                                               cfg_.seed, corpus_options(false));
        auto test = generate_synthetic_corpus(cfg_.corpus.family, cfg_.corpus.test_count,
                                              cfg_.seed, corpus_options(true));
        save_corpus(train.samples, artifact("corpus.jsonl"));
        save_corpus(test.samples, artifact("test_corpus.jsonl"));
        write_json_file(artifact("corpus_meta.json"),
                        {{"config_hash", cfg_.hash()},
                         {"family", cfg_.corpus.family},
                         {"train_count", int(train.samples.size())},
                         {"test_count", int(test.samples.size())},
                         {"procedures", train.procedures.manifest()}});
    }

    void do_distill() {
        auto samples = load_corpus(artifact("corpus.jsonl"));
        if (cfg_.distill.question_limit > 0 &&
            int(samples.size()) > cfg_.distill.question_limit)
            samples.resize(size_t(cfg_.distill.question_limit));
        std::shared_ptr<ChatTransport> transport;
        if (!cfg_.distill.fixture.empty())
            transport = std::make_shared<FixtureChatTransport>(cfg_.distill.fixture);
        else
            transport = std::make_shared<HttpChatTransport>(cfg_.distill.base_url);
        DistillConfig dc;
        dc.model = cfg_.distill.model;
        dc.decompose_temperature = cfg_.distill.decompose_temperature;
        dc.explore_temperature = cfg_.distill.explore_temperature;
        dc.summarize_temperature = cfg_.distill.summarize_temperature;
        dc.max_trajectories = cfg_.distill.max_trajectories;
        DistillClient client(transport, dc);
        std::vector<ReasoningSample> out;
        for (size_t qi = 0; qi < samples.size(); ++qi) {
            const auto& s = samples[qi];
            std::string answer_text;
            for (const auto& st : s.steps) answer_text += st + " ";
            auto trajs = client.distill_question(s.question, answer_text, s.answer, s.family);
            for (size_t ti = 0; ti < trajs.size(); ++ti) {
                ReasoningSample d = s;
                d.id = s.id + "-d" + std::to_string(ti);
                d.steps = trajs[ti].steps;
                d.plans = trajs[ti].plans;
                d.source = "distill:" + cfg_.distill.model;
                out.push_back(std::move(d));
            }
        }
        save_corpus(out, artifact("distilled.jsonl"));
    }

    void do_train_codec() {
        auto samples = load_corpus(artifact("corpus.jsonl"));
        auto vocab = build_vocab(samples);
        std::set<std::string> unique;
        for (const auto& s : samples)
            for (const auto& p : s.plans) unique.insert(p);
        std::vector<std::string> plans(unique.begin(), unique.end());
        Codec codec(cfg_.codec, vocab, cfg_.seed + 2);
        auto stats = codec.train(plans, cfg_.codec_train, cfg_.seed + 2);
        codec.save(artifact("codec.ckpt"), {{"config_hash", cfg_.hash()}});
        int exact = 0;
        for (const auto& p : plans)
            if (codec.reconstruct_plan_text(p) == p) ++exact;
        nlohmann::json epochs = nlohmann::json::array();
        for (const auto& e : stats.epochs)
            epochs.push_back({{"mean_ce", e.mean_ce},
                              {"mean_quant_err", e.mean_quant_err},
                              {"perplexity", e.perplexity},
                              {"restarts", e.restarts}});
        write_json_file(artifact("codec_stats.json"),
                        {{"config_hash", cfg_.hash()},
                         {"unique_plans", int(plans.size())},
                         {"exact_reconstructions", exact},
                         {"epochs", epochs}});
    }

    void do_latentize() {
        auto samples = load_corpus(artifact("corpus.jsonl"));
        auto codec = Codec::load(artifact("codec.ckpt"));
        ExtendedVocabulary ext(codec.vocab(), codec.config().codebook_size);
        std::string codec_hash = file_hash(artifact("codec.ckpt"));
        std::vector<TrainingRecord> records;
        for (const auto& s : samples) {
            if (cfg_.dataset_mode == "latent")
                records.push_back(latentize_sample(s, codec, ext));
            else
                records.push_back(render_baseline(
                    s,
                    cfg_.dataset_mode == "cot_only" ? BaselineMode::kCotOnly
                                                    : BaselineMode::kExplicitPlan,
                    ext.base()));
        }
        serialize_dataset(records, artifact("latent.jsonl"), ext.hash(), codec_hash);
        write_json_file(artifact("latent_meta.json"), {{"config_hash", cfg_.hash()},
                                                       {"dataset_mode", cfg_.dataset_mode},
                                                       {"vocab_hash", ext.hash()},
                                                       {"codec_hash", codec_hash},
                                                       {"records", int(records.size())}});
    }

    void do_finetune() {
        auto codec = Codec::load(artifact("codec.ckpt"));
        ExtendedVocabulary ext(codec.vocab(), codec.config().codebook_size);
        std::string codec_hash = file_hash(artifact("codec.ckpt"));
        std::vector<TrainingRecord> records =
            load_dataset(artifact("latent.jsonl"), ext.hash(), codec_hash);
        LMConfig lmc = cfg_.lm;
        lmc.vocab = ext.size();
        LanguageModel lm(lmc, cfg_.seed + 3, ext.offset());
        auto log = finetune_sft(lm, records, cfg_.finetune, cfg_.seed + 3);
        if (log.aborted)
            throw PipelineError("finetune", "training aborted: " + log.abort_reason);
        lm.save(artifact("lm.ckpt"), {{"config_hash", cfg_.hash()},
                                      {"codec_hash", codec_hash},
                                      {"dataset_hash", file_hash(artifact("latent.jsonl"))},
                                      {"vocab_hash", ext.hash()}});
        log.to_csv(artifact("train_log.csv"));
    }

    void do_evaluate() {
        auto codec = Codec::load(artifact("codec.ckpt"));
        ExtendedVocabulary ext(codec.vocab(), codec.config().codebook_size);
        auto ck = load_checkpoint(artifact("lm.ckpt"));
        // refuse stale combinations instead of producing a silently wrong report
        std::string codec_hash = file_hash(artifact("codec.ckpt"));
        if (ck.meta.value("codec_hash", "") != codec_hash)
            throw PipelineError("evaluate",
                                "lm.ckpt was fine-tuned against a different codec checkpoint; "
                                "run 'finetune' again");
        if (ck.meta.value("dataset_hash", "") != file_hash(artifact("latent.jsonl")))
            throw PipelineError("evaluate",
                                "lm.ckpt was fine-tuned on a different dataset; "
                                "run 'finetune' again");
        auto lm = LanguageModel::load(artifact("lm.ckpt"));
        auto test = load_corpus(artifact("test_corpus.jsonl"));
        auto gen = lm_generator(lm, cfg_.generate);
        auto rep = evaluate_pass1(gen, test, ext, cfg_.dataset_mode,
                                  {{"config_hash", cfg_.hash()},
                                   {"codec_hash", codec_hash},
                                   {"lm_hash", file_hash(artifact("lm.ckpt"))}});
        auto cost = token_cost_report(gen, test, ext);
        cost.to_csv(artifact("cost.csv"));
        auto j = rep.to_json();
        j["token_cost"] = {{"mean", cost.mean}, {"stddev", cost.stddev}};
        write_json_file(artifact("eval.json"), j);
    }

    void do_analyze() {
        auto codec = Codec::load(artifact("codec.ckpt"));
        ExtendedVocabulary ext(codec.vocab(), codec.config().codebook_size);
        auto test = load_corpus(artifact("test_corpus.jsonl"));
        std::vector<TrainingRecord> traces;
        for (const auto& s : test) traces.push_back(latentize_sample(s, codec, ext));
        auto set = collect_step_encodings(traces, codec, ext, cfg_.analysis.step_index);
        if (set.size() < 2)
            throw PipelineError("analyze", "fewer than two traces reach step " +
                                               std::to_string(cfg_.analysis.step_index));
        std::filesystem::create_directories(artifact("analysis"));
        auto m = pairwise_distances(set);
        write_distance_csv(m, set, artifact("analysis/distance.csv"));
        write_heatmap_svg(m, set, artifact("analysis/heatmap.svg"));
        ProjectionOptions po;
        po.refine = cfg_.analysis.refine;
        po.refine_iters = cfg_.analysis.refine_iters;
        auto coords = project_2d(set, cfg_.seed + 4, po);
        write_projection_csv(coords, set, artifact("analysis/projection.csv"));
        write_scatter_svg(coords, set, artifact("analysis/scatter.svg"));
        auto st = within_between_stats(m, set);
        write_json_file(artifact("analysis/structure.json"),
                        {{"config_hash", cfg_.hash()},
                         {"step_index", cfg_.analysis.step_index},
                         {"traces", int(set.size())},
                         {"skipped_traces", set.skipped_traces},
                         {"within_mean", st.within_mean},
                         {"between_mean", st.between_mean},
                         {"within_pairs", st.within_pairs},
                         {"between_pairs", st.between_pairs}});
    }

    void do_ablate() {
        auto train_samples = load_corpus(artifact("corpus.jsonl"));
        auto test = load_corpus(artifact("test_corpus.jsonl"));
        SyntheticCorpus train;
        train.samples = std::move(train_samples);
        AblationOptions opt;
        opt.codec_train = cfg_.codec_train;
        opt.lm = cfg_.lm;
        opt.finetune = cfg_.finetune;
        opt.generate = cfg_.generate;
        opt.memory_tokens = cfg_.codec.memory_tokens;
        opt.max_plan_len = cfg_.codec.max_plan_len;
        auto rows = run_ablation_grid(cfg_.ablation.code_dims, cfg_.ablation.codebook_sizes,
                                      train, test, opt, cfg_.seed + 5);
        write_ablation_csv(rows, artifact("ablation.csv"));
    }

    static Vocabulary build_vocab(const std::vector<ReasoningSample>& samples) {
        std::vector<std::string> texts;
        for (const auto& s : samples) {
            texts.push_back(s.question);
            for (const auto& st : s.steps) texts.push_back(st);
            for (const auto& p : s.plans) texts.push_back(p);
        }
        return Vocabulary::build(texts);
    }

    PipelineConfig cfg_;
    std::string manifest_path_;
    nlohmann::json manifest_;
};

}  // namespace iclp
