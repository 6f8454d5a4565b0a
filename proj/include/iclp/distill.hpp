#pragma once

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iclp/corpus.hpp"

namespace iclp {

// ---- prompt assets ----
// The three prompts (decompose an answer into steps, summarize a plan per
// step, explore fresh chains) live as versioned text files so they can be
// revised without touching code; the built-in set matches assets/prompts/v1.

struct PromptSet {
    std::string decompose, summarize, explore;

    static PromptSet builtin() {
        PromptSet p;
        p.decompose =
            "Decompose the given answer into separate reasoning steps. Output one line per "
            "step, each beginning with \"Step i:\" where i counts up from 1. Preserve the "
            "reasoning faithfully; do not add or remove steps.";
        p.summarize =
            "For each reasoning step below, summarize a plan: a single imperative sentence "
            "stating what the step does, without its concrete values. Output one line per "
            "step, each beginning with \"Plan i:\" where i matches the step number.";
        p.explore =
            "Answer the question step by step. Output one line per step, each beginning "
            "with \"Step i:\". If a list of forbidden plan chains is given, do not produce "
            "a solution whose full chain of plans repeats any forbidden chain; reusing "
            "individual plans is fine.";
        return p;
    }

    static PromptSet from_dir(const std::string& dir) {
        auto read = [&](const std::string& name) {
            std::ifstream in(dir + "/" + name);
            if (!in) throw std::runtime_error("missing prompt asset " + dir + "/" + name);
            std::ostringstream ss;
            ss << in.rdbuf();
            std::string s = ss.str();
            while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
            return s;
        };
        PromptSet p;
        p.decompose = read("decompose.txt");
        p.summarize = read("summarize.txt");
        p.explore = read("explore.txt");
        return p;
    }
};

// ---- response parsing ----

struct DistillParseError : std::runtime_error {
    std::string raw;  // full model output, retained for the error report
    DistillParseError(const std::string& what, std::string raw_text)
        : std::runtime_error(what), raw(std::move(raw_text)) {}
};

// Lines beginning "{label} i:" with i contiguous from 1; anything before the
// first labeled line is ignored, a gap or duplicate number is an error.
inline std::vector<std::string> parse_numbered_lines(const std::string& text,
                                                     const std::string& label) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        size_t at = line.find_first_not_of(' ');
        if (at == std::string::npos) continue;
        if (line.compare(at, label.size(), label) != 0) continue;
        size_t num_at = at + label.size() + 1;  // skip the space after the label
        size_t colon = line.find(':', at);
        if (colon == std::string::npos || num_at > colon) continue;
        int i;
        try {
            i = std::stoi(line.substr(num_at, colon - num_at));
        } catch (const std::exception&) {
            continue;
        }
        if (i != static_cast<int>(out.size()) + 1)
            throw DistillParseError(label + " numbering broken: expected " + label + " " +
                                        std::to_string(out.size() + 1) + ", found " + label +
                                        " " + std::to_string(i),
                                    text);
        out.push_back(line.substr(at));
    }
    if (out.empty())
        throw DistillParseError("no \"" + label + " i:\" lines found in response", text);
    return out;
}

inline std::vector<std::string> parse_step_lines(const std::string& text) {
    return parse_numbered_lines(text, "Step");
}

// plans are returned without the "Plan i:" scaffolding
inline std::vector<std::string> parse_plan_lines(const std::string& text) {
    auto lines = parse_numbered_lines(text, "Plan");
    for (auto& l : lines) {
        size_t colon = l.find(':');
        size_t start = l.find_first_not_of(' ', colon + 1);
        l = (start == std::string::npos) ? "" : l.substr(start);
        if (l.empty()) throw DistillParseError("empty plan line", text);
    }
    return lines;
}

// ---- transport: the seam between the client and the network ----

class ChatTransport {
public:
    virtual ~ChatTransport() = default;
    // takes a chat-completions request body, returns the assistant text
    virtual std::string complete(const nlohmann::json& request) = 0;
};

// Live endpoint. The credential comes from ICLP_API_KEY; construction fails
// fast when it is absent so misconfiguration surfaces before the first batch.
class HttpChatTransport : public ChatTransport {
public:
    HttpChatTransport(std::string base_url, int max_retries = 2, int timeout_s = 60)
        : base_url_(std::move(base_url)), max_retries_(max_retries), timeout_s_(timeout_s) {
        const char* key = std::getenv("ICLP_API_KEY");
        if (!key || !*key)
            throw std::runtime_error(
                "ICLP_API_KEY is not set; the distill client cannot authenticate");
        api_key_ = key;
    }

    std::string complete(const nlohmann::json& request) override;

private:
    std::string base_url_, api_key_;
    int max_retries_, timeout_s_;
};

// Replays recorded transcripts in order; used by every test. Each fixture line
// is {"request": ..., "response": "..."} and requests made through the
// transport are kept for assertions.
class FixtureChatTransport : public ChatTransport {
public:
    explicit FixtureChatTransport(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open fixture " + path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto j = nlohmann::json::parse(line);
            responses_.push_back(j.at("response").get<std::string>());
            recorded_requests_.push_back(j.value("request", nlohmann::json()));
        }
    }

    std::string complete(const nlohmann::json& request) override {
        if (next_ >= responses_.size())
            throw std::runtime_error("fixture exhausted after " + std::to_string(next_) +
                                     " requests");
        seen_requests_.push_back(request);
        return responses_[next_++];
    }

    const std::vector<nlohmann::json>& seen_requests() const { return seen_requests_; }
    const std::vector<nlohmann::json>& recorded_requests() const { return recorded_requests_; }
    size_t remaining() const { return responses_.size() - next_; }

private:
    std::vector<std::string> responses_;
    std::vector<nlohmann::json> recorded_requests_, seen_requests_;
    size_t next_ = 0;
};

// Wraps a live transport and appends {request, response} lines to a fixture
// file, so a one-off real run can seed the replay tests.
class RecordingChatTransport : public ChatTransport {
public:
    RecordingChatTransport(std::unique_ptr<ChatTransport> inner, const std::string& path)
        : inner_(std::move(inner)), out_(path, std::ios::app) {
        if (!out_) throw std::runtime_error("cannot open fixture " + path + " for recording");
    }

    std::string complete(const nlohmann::json& request) override {
        std::string response = inner_->complete(request);
        out_ << nlohmann::json{{"request", request}, {"response", response}}.dump() << "\n";
        out_.flush();
        return response;
    }

private:
    std::unique_ptr<ChatTransport> inner_;
    std::ofstream out_;
};

// ---- the client ----

struct DistillConfig {
    std::string model = "distill-model";
    double decompose_temperature = 0.0;  // reference decoding is greedy
    double explore_temperature = 0.3;    // ... exploration and plans at 0.3
    double summarize_temperature = 0.3;
    int max_trajectories = 20;  // exploration budget

    void validate() const {
        for (double t : {decompose_temperature, explore_temperature, summarize_temperature})
            if (t < 0.0 || t > 2.0) throw std::invalid_argument("temperature out of [0,2]");
        if (max_trajectories < 1) throw std::invalid_argument("max_trajectories must be >= 1");
    }
};

class DistillClient {
public:
    DistillClient(std::shared_ptr<ChatTransport> transport, DistillConfig cfg,
                  PromptSet prompts = PromptSet::builtin())
        : transport_(std::move(transport)), cfg_(cfg), prompts_(std::move(prompts)) {
        cfg_.validate();
    }

    const DistillConfig& config() const { return cfg_; }

    std::vector<std::string> decompose(const std::string& question,
                                       const std::string& answer_text) const {
        auto content = call(prompts_.decompose, "Question: " + question + "\n\nAnswer:\n" +
                                                    answer_text,
                            cfg_.decompose_temperature);
        return parse_step_lines(content);
    }

    std::vector<std::string> summarize(const std::string& question,
                                       const std::vector<std::string>& steps) const {
        if (steps.empty()) throw std::invalid_argument("summarize: no steps");
        std::string user = "Question: " + question + "\n\nSteps:\n";
        for (const auto& s : steps) user += s + "\n";
        auto plans = parse_plan_lines(call(prompts_.summarize, user, cfg_.summarize_temperature));
        if (plans.size() != steps.size())
            throw DistillParseError("got " + std::to_string(plans.size()) + " plans for " +
                                        std::to_string(steps.size()) + " steps",
                                    user);
        return plans;
    }

    // Up to U fresh trajectories. From the second request on, every chain seen
    // so far (prior or newly produced) rides along as forbidden; a returned
    // chain that exactly equals a known chain is dropped client-side as well.
    std::vector<Trajectory> sample_diverse_chains(
        const std::string& question, const std::vector<std::vector<std::string>>& prior_chains,
        int U) const {
        if (U < 1) throw std::invalid_argument("sample_diverse_chains: U must be >= 1");
        std::vector<std::vector<std::string>> known = prior_chains;
        std::vector<Trajectory> out;
        for (int j = 0; j < U; ++j) {
            try {
                std::string user = "Question: " + question + "\n";
                if (!known.empty()) {
                    user += "\nForbidden plan chains:\n";
                    for (size_t c = 0; c < known.size(); ++c) {
                        user += "Chain " + std::to_string(c + 1) + ":\n";
                        for (const auto& p : known[c]) user += "- " + p + "\n";
                    }
                }
                auto steps =
                    parse_step_lines(call(prompts_.explore, user, cfg_.explore_temperature));
                auto plans = summarize(question, steps);
                if (std::find(known.begin(), known.end(), plans) != known.end()) continue;
                known.push_back(plans);
                out.push_back({steps, plans});
            } catch (const std::exception& e) {
                std::cerr << "trajectory " << j + 1 << " for question dropped: " << e.what()
                          << "\n";
            }
        }
        return out;
    }

    // full per-question distillation: decompose the reference answer, summarize
    // its plans, then explore alternatives and keep the correct ones
    std::vector<Trajectory> distill_question(const std::string& question,
                                             const std::string& answer_text,
                                             const std::string& canonical_answer,
                                             const std::string& family) const {
        std::vector<Trajectory> all;
        auto steps = decompose(question, answer_text);
        all.push_back({steps, summarize(question, steps)});
        if (cfg_.max_trajectories > 1) {
            std::vector<std::vector<std::string>> priors = {all[0].plans};
            auto extra = sample_diverse_chains(question, priors, cfg_.max_trajectories - 1);
            all.insert(all.end(), extra.begin(), extra.end());
        }
        int rejected = 0;
        return filter_correct(all, canonical_answer, family, &rejected);
    }

private:
    std::string call(const std::string& system, const std::string& user, double temperature) const {
        nlohmann::json req = {{"model", cfg_.model},
                              {"temperature", temperature},
                              {"messages",
                               {{{"role", "system"}, {"content", system}},
                                {{"role", "user"}, {"content", user}}}}};
        return transport_->complete(req);
    }

    std::shared_ptr<ChatTransport> transport_;
    DistillConfig cfg_;
    PromptSet prompts_;
};

// out-of-line so that httplib (large) is only parsed where the live transport
// is actually used
#ifdef ICLP_ENABLE_HTTP
}  // namespace iclp
#include <httplib.h>
namespace iclp {

inline std::string HttpChatTransport::complete(const nlohmann::json& request) {
    // split scheme://host[:port] from the path prefix
    std::string url = base_url_, prefix;
    auto scheme_end = url.find("://");
    auto path_at = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    if (path_at != std::string::npos) {
        prefix = url.substr(path_at);
        url = url.substr(0, path_at);
    }
    if (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    httplib::Client cli(url);
    cli.set_connection_timeout(timeout_s_);
    cli.set_read_timeout(timeout_s_);
    httplib::Headers headers = {{"Authorization", "Bearer " + api_key_}};
    std::string body = request.dump();
    std::string last_error;
    for (int attempt = 0; attempt <= max_retries_; ++attempt) {
        auto res = cli.Post(prefix + "/chat/completions", headers, body, "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_error = "http " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200)
            throw std::runtime_error("distill endpoint returned http " +
                                     std::to_string(res->status) + ": " + res->body);
        auto j = nlohmann::json::parse(res->body);
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
    }
    throw std::runtime_error("distill request failed after " + std::to_string(max_retries_ + 1) +
                             " attempts; last error: " + last_error);
}

#else

inline std::string HttpChatTransport::complete(const nlohmann::json&) {
    throw std::runtime_error(
        "live HTTP transport not compiled in (build with ICLP_ENABLE_HTTP)");
}

#endif  // ICLP_ENABLE_HTTP

}  // namespace iclp
