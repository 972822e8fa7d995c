#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "ctxr/common.hpp"
#include "ctxr/config.hpp"
#include "ctxr/gzio.hpp"

using namespace ctxr;

namespace {

std::string write_temp_config(const std::string& body) {
    const auto dir = std::filesystem::temp_directory_path() / "ctxr_config_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "run.ini").string();
    write_text_file(path, body);
    return path;
}

}  // namespace

TEST_CASE("config files parse sections, comments and overrides") {
    const std::string path = write_temp_config(
        "# reference run\n"
        "[data]\n"
        "num_users = 123\n"
        "mean_log_len = 40   ; trailing comment\n"
        "\n"
        "[training]\n"
        "batch_mode = mixed\n"
        "lr = 0.01\n"
        "[run]\n"
        "seed = 99\n");
    const auto cfg = config::load_config(path, {"data.num_items=777", "training.epochs=5"});
    CHECK(cfg.gen.num_users == 123);
    CHECK(cfg.gen.mean_log_len == 40);
    CHECK(cfg.gen.num_items == 777);
    CHECK(cfg.train.batch_mode == training::BatchMode::kMixed);
    CHECK(cfg.train.adam.lr == 0.01);
    CHECK(cfg.train.epochs == 5);
    CHECK(cfg.seed == 99);
    CHECK(cfg.resolved_train_seed() == 99);   // defaults to the master seed
    CHECK(cfg.resolved_data_seed() == 99);
}

TEST_CASE("unknown keys are rejected by name") {
    const std::string path = write_temp_config("[data]\nnum_userz = 5\n");
    try {
        config::load_config(path, {});
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("data.num_userz") != std::string::npos);
    }

    CHECK_THROWS_AS(config::load_config("", {"nosuch.key=1"}), ConfigError);
    CHECK_THROWS_AS(config::load_config("", {"data.num_users"}), ConfigError);  // missing '='
}

TEST_CASE("malformed values name the offending key") {
    try {
        config::load_config("", {"training.lr=fast"});
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("training.lr") != std::string::npos);
    }
}

TEST_CASE("per-stage seeds can diverge from the master seed") {
    const auto cfg = config::load_config("", {"run.seed=7", "training.seed=13"});
    CHECK(cfg.resolved_train_seed() == 13);
    CHECK(cfg.resolved_data_seed() == 7);
    CHECK(cfg.resolved_selection_seed() == 7);
}

TEST_CASE("enumerated keys reject unknown values") {
    CHECK_THROWS_AS(config::load_config("", {"retrieval.merge=best"}), ConfigError);
    CHECK_THROWS_AS(config::load_config("", {"retrieval.backend=faiss"}), ConfigError);
    CHECK_THROWS_AS(config::load_config("", {"training.batch_mode=pure"}), ConfigError);
    const auto cfg = config::load_config(
        "", {"retrieval.merge=quota", "retrieval.backend=graph", "selection.mode=top_n"});
    CHECK(cfg.merge_strategy == retrieval::MergeStrategy::kQuota);
    CHECK(cfg.backend == retrieval::Backend::kGraph);
    CHECK(cfg.selection_mode == retrieval::SelectionMode::kTopN);
}

TEST_CASE("recall_ks parses a comma list") {
    const auto cfg = config::load_config("", {"eval.recall_ks=5, 25,125"});
    CHECK(cfg.recall_ks == std::vector<int>{5, 25, 125});
}

TEST_CASE("config echo covers every section") {
    const auto cfg = config::load_config("", {});
    const auto j = cfg.echo();
    for (const char* section : {"data", "model", "training", "selection", "retrieval", "eval", "run"}) {
        CHECK(j.contains(section));
    }
    CHECK(j["retrieval"]["now"] == cfg.gen.horizon_days);
}
