#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cli.hpp"
#include "test_util.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using saegis::cli::run;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result call(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

int shell(const std::string& cmd) {
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> gen(const fs::path& out, const std::string& clean, const std::string& adv,
                             const std::string& seed, std::vector<std::string> extra = {}) {
    std::vector<std::string> a{"--quiet", "gen-synthetic", "--out", out.string(), "--dim", "16", "--clean", clean,
                               "--adv", adv, "--dict", "48", "--planted", "4", "--strength", "3", "--noise", "0.3",
                               "--seed", seed, "--dict-seed", "9", "--min-tokens", "4", "--max-tokens", "8"};
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
}

} // namespace

TEST_CASE("help and usage errors") {
    CHECK(shell(std::string(SAEGIS_BIN) + " --help > /dev/null") == 0);
    auto r = call({"--help"});
    CHECK(r.code == 0);
    CHECK(r.out.find("gen-synthetic") != std::string::npos);
    CHECK(call({"calibrate", "--help"}).code == 0);

    r = call({"trian"});
    CHECK(r.code == 1);
    CHECK(r.err.find("did you mean 'train'") != std::string::npos);
    CHECK(shell(std::string(SAEGIS_BIN) + " detcet 2> /dev/null") == 1);

    CHECK(call({}).code == 1);
    CHECK(call({"train", "--acts", "x"}).code == 1);
    CHECK(call({"select-features", "--sae", "m", "--clean", "c", "--adv", "a", "--top-k", "many", "--out", "o"}).code ==
          1);
}

TEST_CASE("missing inputs are data errors") {
    const auto dir = saegis::test::scratch_dir("cli_missing");
    auto r = call({"train", "--acts", (dir / "nope").string(), "--d-sae", "8", "--k", "2", "--steps", "1", "--lr",
                   "0.001", "--batch", "4", "--seed", "1", "--out", (dir / "m.bin").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("nope") != std::string::npos);
    CHECK(call({"detect", "--profile", (dir / "p.json").string(), "--acts", dir.string(), "--out",
                (dir / "o.json").string()})
              .code == 2);
    CHECK(call({"calibrate", "--dev", dir.string(), "--alpha", "0.02", "--layer", "no-colons", "--out",
                (dir / "p.json").string()})
              .code == 1);
}

TEST_CASE("full workflow through the command line") {
    const auto dir = saegis::test::scratch_dir("cli_flow");
    const auto p = [&](const char* name) { return (dir / name).string(); };

    REQUIRE(call(gen(dir / "train", "200", "40", "1")).code == 0);
    REQUIRE(call(gen(dir / "dev", "60", "0", "2", {"--id-prefix", "dev-"})).code == 0);
    REQUIRE(call(gen(dir / "test", "60", "60", "3", {"--id-prefix", "test-", "--mixed"})).code == 0);
    CHECK(fs::exists(dir / "train" / "clean" / "manifest.json"));
    CHECK_FALSE(fs::exists(dir / "dev" / "adversarial"));

    const std::string before = slurp(dir / "train" / "clean" / "data.bin");
    const std::vector<std::string> train{"--quiet", "train", "--acts", p("train/clean"), "--acts",
                                         p("train/adversarial"), "--d-sae", "64", "--k", "4", "--steps", "800",
                                         "--lr", "0.001", "--batch", "16", "--seed", "1", "--out", p("sae.bin"),
                                         "--report", p("train.json")};
    REQUIRE(call(train).code == 0);
    const auto report = nlohmann::json::parse(slurp(dir / "train.json"));
    CHECK(report.at("final_held_out_loss").get<double>() < report.at("initial_held_out_loss").get<double>());

    const std::vector<std::string> select{"--quiet", "select-features", "--sae", p("sae.bin"), "--clean",
                                          p("train/clean"), "--adv", p("train/adversarial"), "--top-k", "16",
                                          "--out", p("ranking.json")};
    REQUIRE(call(select).code == 0);
    const std::string ranking = slurp(dir / "ranking.json");
    REQUIRE(call(select).code == 0);
    CHECK(slurp(dir / "ranking.json") == ranking);
    CHECK(slurp(dir / "train" / "clean" / "data.bin") == before);

    REQUIRE(call({"--quiet", "calibrate", "--dev", p("dev/clean"), "--alpha", "0.02", "--layer",
                  "synthetic:" + p("sae.bin") + ":" + p("ranking.json"), "--out", p("profile.json")})
                .code == 0);
    // Calibration refuses labeled adversarial data.
    CHECK(call({"--quiet", "calibrate", "--dev", p("test"), "--alpha", "0.02", "--layer",
                "synthetic:" + p("sae.bin") + ":" + p("ranking.json"), "--out", p("bad.json")})
              .code == 2);

    REQUIRE(call({"--quiet", "detect", "--profile", p("profile.json"), "--acts", p("test"), "--out",
                  p("predictions.json")})
                .code == 0);
    auto r = call({"evaluate", "--pred", p("predictions.json"), "--acts", p("test"), "--out", p("report.json")});
    REQUIRE(r.code == 0);
    CHECK(r.err.find("F1=") != std::string::npos);
    const auto metrics = nlohmann::json::parse(slurp(dir / "report.json"));
    MESSAGE("F1 " << metrics.at("display").at("f1"));
    CHECK(metrics.at("f1").get<double>() >= 90.0);
    CHECK(metrics.at("scores").size() == 120);

    // Labels for evaluation must cover every prediction.
    CHECK(call({"--quiet", "evaluate", "--pred", p("predictions.json"), "--acts", p("dev/clean"), "--out",
                p("r2.json")})
              .code == 2);

    REQUIRE(call({"--quiet", "overlap", "--ranking", p("ranking.json"), "--ranking", p("ranking.json"), "--out",
                  p("overlap.json")})
                .code == 0);
    const auto overlap = nlohmann::json::parse(slurp(dir / "overlap.json"));
    CHECK(overlap.dump().find("16") != std::string::npos);

    nlohmann::json spec = {{"name", "cli"},
                           {"layers", {{{"layer_id", "synthetic"}, {"sae", "sae.bin"}}}},
                           {"train_clean", "train/clean"},
                           {"train_adversarial", "train/adversarial"},
                           {"dev_clean", "dev/clean"},
                           {"test_clean", "test"},
                           {"test_adversarial", "test"},
                           {"K", 16}};
    std::ofstream(dir / "spec.json") << spec.dump();
    // test_clean and test_adversarial name the same mixed dump, so ids collide.
    CHECK(call({"--quiet", "experiment", "--spec", p("spec.json"), "--out", p("exp")}).code == 2);

    REQUIRE(call(gen(dir / "tc", "60", "0", "3", {"--id-prefix", "test-"})).code == 0);
    REQUIRE(call(gen(dir / "ta", "0", "60", "3", {"--id-prefix", "test-"})).code == 0);
    spec["test_clean"] = "tc/clean";
    spec["test_adversarial"] = "ta/adversarial";
    std::ofstream(dir / "spec.json") << spec.dump();
    REQUIRE(call({"--quiet", "experiment", "--spec", p("spec.json"), "--out", p("exp")}).code == 0);
    CHECK(fs::exists(dir / "exp" / "report.json"));
    CHECK(fs::exists(dir / "exp" / "histogram.json"));

    REQUIRE(call({"--quiet", "sweep", "--spec", p("spec.json"), "--param", "K", "--values", "4,16", "--out",
                  p("sweep.csv")})
                .code == 0);
    const std::string csv = slurp(dir / "sweep.csv");
    CHECK(csv.rfind("parameter,value,precision,recall,f1,tau\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(call({"--quiet", "sweep", "--spec", p("spec.json"), "--param", "gamma", "--values", "1", "--out",
                p("sweep.csv")})
              .code == 2);
}

TEST_CASE("multi-layer dumps feed an ensemble profile") {
    const auto dir = saegis::test::scratch_dir("cli_ensemble");
    const auto p = [&](const std::string& name) { return (dir / name).string(); };
    REQUIRE(call(gen(dir / "train", "120", "30", "1", {"--layers", "2", "--layer-id", "v"})).code == 0);
    REQUIRE(call(gen(dir / "dev", "40", "0", "2", {"--layers", "2", "--layer-id", "v", "--id-prefix", "dev-"})).code ==
            0);
    REQUIRE(call(gen(dir / "test", "30", "30", "3",
                     {"--layers", "2", "--layer-id", "v", "--id-prefix", "test-", "--mixed"}))
                .code == 0);
    std::vector<std::string> cal{"--quiet", "calibrate", "--alpha", "0.05", "--out", p("profile.json")};
    std::vector<std::string> detect{"--quiet", "detect", "--profile", p("profile.json"), "--out", p("pred.json")};
    for (const std::string l : {"v-L0", "v-L1"}) {
        REQUIRE(call({"--quiet", "train", "--acts", p("train/" + l + "/clean"), "--acts",
                      p("train/" + l + "/adversarial"), "--d-sae", "32", "--k", "4", "--steps", "300", "--lr",
                      "0.001", "--batch", "16", "--seed", "2", "--out", p(l + ".bin")})
                    .code == 0);
        REQUIRE(call({"--quiet", "select-features", "--sae", p(l + ".bin"), "--clean", p("train/" + l + "/clean"),
                      "--adv", p("train/" + l + "/adversarial"), "--top-k", "8", "--out", p(l + ".json")})
                    .code == 0);
        cal.insert(cal.end(), {"--dev", p("dev/" + l + "/clean"), "--layer", l + ":" + p(l + ".bin") + ":" + p(l + ".json")});
        detect.insert(detect.end(), {"--acts", p("test/" + l)});
    }
    REQUIRE(call(cal).code == 0);
    CHECK(nlohmann::json::parse(slurp(dir / "profile.json")).at("mode") == "ensemble");
    REQUIRE(call(detect).code == 0);
    CHECK(nlohmann::json::parse(slurp(dir / "pred.json")).at("predictions").size() == 60);
}
