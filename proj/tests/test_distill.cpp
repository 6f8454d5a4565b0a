#include <catch2/catch_amalgamated.hpp>

#include "iclp/distill.hpp"

using namespace iclp;

#ifndef ICLP_FIXTURE_DIR
#define ICLP_FIXTURE_DIR "tests/fixtures"
#endif

namespace {

std::string fx(const std::string& name) { return std::string(ICLP_FIXTURE_DIR) + "/" + name; }

DistillClient make_client(std::shared_ptr<FixtureChatTransport> t, int U = 20) {
    DistillConfig cfg;
    cfg.max_trajectories = U;
    return DistillClient(std::move(t), cfg);
}

}  // namespace

TEST_CASE("step parser accepts well-formed output and keeps prefixes") {
    auto steps = parse_step_lines("preamble text\nStep 1: a\nStep 2: b\nStep 3: c\ntrailer");
    REQUIRE(steps.size() == 3);
    CHECK(steps[0] == "Step 1: a");
    CHECK(steps[2] == "Step 3: c");
}

TEST_CASE("step parser enforces contiguous numbering") {
    CHECK_THROWS_AS(parse_step_lines("Step 1: a\nStep 3: b"), DistillParseError);
    CHECK_THROWS_AS(parse_step_lines("Step 2: a"), DistillParseError);
    CHECK_THROWS_AS(parse_step_lines("Step 1: a\nStep 1: b"), DistillParseError);
    CHECK_THROWS_AS(parse_step_lines("nothing here"), DistillParseError);
    try {
        parse_step_lines("Step 1: a\nStep 3: b");
        FAIL("expected throw");
    } catch (const DistillParseError& e) {
        CHECK(e.raw == "Step 1: a\nStep 3: b");  // raw text retained for the report
    }
}

TEST_CASE("plan parser strips the scaffold and rejects empty plans") {
    auto plans = parse_plan_lines("Plan 1: Double the value.\nPlan 2:   Add three.");
    REQUIRE(plans.size() == 2);
    CHECK(plans[0] == "Double the value.");
    CHECK(plans[1] == "Add three.");
    CHECK_THROWS_AS(parse_plan_lines("Plan 1:"), DistillParseError);
}

TEST_CASE("decompose replays the recorded transcript at temperature zero") {
    auto transport = std::make_shared<FixtureChatTransport>(fx("decompose_arith.jsonl"));
    auto client = make_client(transport);
    auto steps = client.decompose("Start with 5. Apply procedure P-1. What is the final value?",
                                  "double then add3 gives 13");
    REQUIRE(steps.size() == 2);
    CHECK(steps[0] == "Step 1: double: 2 × 5 = 10");
    CHECK(steps[1] == "Step 2: add3: 10 + 3 = 13");
    REQUIRE(transport->seen_requests().size() == 1);
    const auto& req = transport->seen_requests()[0];
    CHECK(req.at("temperature").get<double>() == 0.0);
    CHECK(req.at("messages").size() == 2);
    CHECK(req.at("messages")[0].at("role") == "system");
    std::string user = req.at("messages")[1].at("content");
    CHECK(user.find("Start with 5.") != std::string::npos);
    CHECK(transport->remaining() == 0);
}

TEST_CASE("summarize replays its fixture and checks cardinality") {
    auto transport = std::make_shared<FixtureChatTransport>(fx("summarize_arith.jsonl"));
    auto client = make_client(transport);
    auto plans = client.summarize("q", {"Step 1: double: 2 × 5 = 10", "Step 2: add3: 10 + 3 = 13"});
    REQUIRE(plans.size() == 2);
    CHECK(plans[0] == "Double the current value.");
    CHECK(plans[1] == "Add three to the current value.");
    CHECK(transport->seen_requests()[0].at("temperature").get<double>() == 0.3);
    CHECK_THROWS_AS(client.summarize("q", {}), std::invalid_argument);
}

TEST_CASE("summarize rejects a plan count that disagrees with the steps") {
    auto transport = std::make_shared<FixtureChatTransport>(fx("summarize_miscount.jsonl"));
    auto client = make_client(transport);
    CHECK_THROWS_AS(client.summarize("q", {"Step 1: a", "Step 2: b"}), DistillParseError);
}

TEST_CASE("broken step numbering in a response is a parse error") {
    auto transport = std::make_shared<FixtureChatTransport>(fx("decompose_broken.jsonl"));
    auto client = make_client(transport);
    CHECK_THROWS_AS(client.decompose("q", "a"), DistillParseError);
}

TEST_CASE("diverse sampling forbids known chains and drops exact repeats") {
    auto transport = std::make_shared<FixtureChatTransport>(fx("diverse.jsonl"));
    auto client = make_client(transport);
    std::vector<std::vector<std::string>> priors = {
        {"Double the current value.", "Add three to the current value."}};
    auto trajectories = client.sample_diverse_chains("q", priors, 3);
    // trajectory 2 reproduced the prior chain (dropped); trajectory 3 failed to
    // parse (skipped); one fresh chain survives
    REQUIRE(trajectories.size() == 1);
    CHECK(trajectories[0].plans[0] == "Halve the current value rounding down.");
    REQUIRE(transport->seen_requests().size() == 5);
    // every exploration request embeds the forbidden chains verbatim
    std::string first_user = transport->seen_requests()[0].at("messages")[1].at("content");
    CHECK(first_user.find("Forbidden plan chains:") != std::string::npos);
    CHECK(first_user.find("- Double the current value.") != std::string::npos);
    // the second exploration also forbids the newly found chain
    std::string third_user = transport->seen_requests()[2].at("messages")[1].at("content");
    CHECK(third_user.find("- Halve the current value rounding down.") != std::string::npos);
    CHECK(transport->seen_requests()[0].at("temperature").get<double>() == 0.3);
}

TEST_CASE("U=1 with no priors issues exactly one exploration request") {
    auto transport = std::make_shared<FixtureChatTransport>(fx("diverse.jsonl"));
    auto client = make_client(transport);
    auto trajectories = client.sample_diverse_chains("q", {}, 1);
    REQUIRE(trajectories.size() == 1);
    // one explore + one summarize
    CHECK(transport->seen_requests().size() == 2);
    std::string user = transport->seen_requests()[0].at("messages")[1].at("content");
    CHECK(user.find("Forbidden") == std::string::npos);
    CHECK_THROWS_AS(client.sample_diverse_chains("q", {}, 0), std::invalid_argument);
}

TEST_CASE("full question distillation keeps only correct fresh chains") {
    auto transport = std::make_shared<FixtureChatTransport>(fx("distill_question.jsonl"));
    auto client = make_client(transport, 3);
    auto kept = client.distill_question("Start with 5. Apply procedure P-1. What is the final value?",
                                        "reference answer text", "13", "arith");
    // reference trajectory + one correct alternative; the wrong-answer one is gone
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].plans[0] == "Double the current value.");
    CHECK(kept[1].plans[0] == "Add the digit sum to the current value.");
    CHECK(transport->remaining() == 0);
}

TEST_CASE("fixture transport fails loudly when exhausted") {
    auto transport = std::make_shared<FixtureChatTransport>(fx("summarize_arith.jsonl"));
    auto client = make_client(transport);
    client.summarize("q", {"Step 1: a", "Step 2: b"});
    CHECK_THROWS_WITH(client.summarize("q", {"Step 1: a", "Step 2: b"}),
                      Catch::Matchers::ContainsSubstring("exhausted"));
}

TEST_CASE("prompt assets on disk match the built-in set") {
    auto disk = PromptSet::from_dir(std::string(ICLP_FIXTURE_DIR) + "/../../assets/prompts");
    auto builtin = PromptSet::builtin();
    CHECK(disk.decompose == builtin.decompose);
    CHECK(disk.summarize == builtin.summarize);
    CHECK(disk.explore == builtin.explore);
    CHECK_THROWS_AS(PromptSet::from_dir("/nonexistent"), std::runtime_error);
}

TEST_CASE("distill config validation") {
    DistillConfig cfg;
    CHECK(cfg.max_trajectories == 20);
    CHECK(cfg.decompose_temperature == 0.0);
    CHECK(cfg.explore_temperature == 0.3);
    cfg.explore_temperature = 2.5;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.explore_temperature = 0.3;
    cfg.max_trajectories = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("live transport refuses to start without a credential") {
    const char* save = std::getenv("ICLP_API_KEY");
    std::string saved = save ? save : "";
    unsetenv("ICLP_API_KEY");
    CHECK_THROWS_WITH(HttpChatTransport("https://example.invalid"),
                      Catch::Matchers::ContainsSubstring("ICLP_API_KEY"));
    setenv("ICLP_API_KEY", "k", 1);
    CHECK_NOTHROW(HttpChatTransport("https://example.invalid"));
    if (saved.empty())
        unsetenv("ICLP_API_KEY");
    else
        setenv("ICLP_API_KEY", saved.c_str(), 1);
}

TEST_CASE("recording transport appends replayable transcripts") {
    std::string path = "/tmp/iclp_test_recorded.jsonl";
    std::remove(path.c_str());
    {
        auto inner = std::make_unique<FixtureChatTransport>(fx("summarize_arith.jsonl"));
        RecordingChatTransport rec(std::move(inner), path);
        nlohmann::json req = {{"model", "m"}, {"temperature", 0.3}, {"messages", nlohmann::json::array()}};
        rec.complete(req);
    }
    FixtureChatTransport replay(path);
    CHECK(replay.remaining() == 1);
    CHECK(replay.recorded_requests()[0].at("model") == "m");
    std::remove(path.c_str());
}
