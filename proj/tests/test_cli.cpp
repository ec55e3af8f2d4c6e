#include "nes/cli.hpp"
#include "nes/network.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace nes;

namespace {

struct Run {
    int code = -1;
    std::string out, err;
};

Run nes_cli(std::vector<std::string> args)
{
    args.insert(args.begin(), "nes");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Run r;
    r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string dir()
{
    const auto d = std::filesystem::temp_directory_path() / "nes_cli_test";
    std::filesystem::create_directories(d);
    return d.string();
}

const std::string kToy = NES_CONFIG_DIR "/toy_blobs2d.cfg";

} // namespace

TEST_CASE("cost reports")
{
    const Run j = nes_cli({"cost", "--config", NES_CONFIG_DIR "/mobilenetv2.cfg"});
    REQUIRE(j.code == 0);
    const auto rep = nlohmann::json::parse(j.out);
    REQUIRE(rep["rows"].size() == 5);
    for (const char* col : {"method", "madd_m", "params", "params_m", "compression_rate"}) CHECK(rep["rows"][0].contains(col));

    const Run c = nes_cli({"cost", "--config", NES_CONFIG_DIR "/mobilenetv2.cfg", "--csv"});
    CHECK(c.code == 0);
    CHECK(c.out.rfind("method,madd_m,madd_eqn_m,madd_2k_m,params,compression_rate\n", 0) == 0);
}

TEST_CASE("usage errors exit 1")
{
    CHECK(nes_cli({}).code == 1);
    const Run u = nes_cli({"cost", "--bogus"});
    CHECK(u.code == 1);
    CHECK(u.err.find("Usage") != std::string::npos);
    CHECK(nes_cli({"frobnicate"}).code == 1);
    CHECK(nes_cli({"cost"}).code == 1);
    CHECK(nes_cli({"cost", "--config", "/nonexistent.cfg"}).code == 1);
    CHECK(nes_cli({"--help"}).code == 0);

    const std::string bad = dir() + "/bad.cfg";
    std::ofstream(bad) << "{ \"layers\": [ { \"type\": \"gap\" } ], \"lr\": \"fast\" }";
    CHECK(nes_cli({"train", "--config", bad}).code == 1);
    std::ofstream(bad) << "{ not json";
    CHECK(nes_cli({"train", "--config", bad}).code == 1);
    CHECK(nes_cli({"cost", "--config", bad}).code == 1);
}

TEST_CASE("train, infer, expand")
{
    const std::string ck = dir() + "/toy.nese", lean = dir() + "/lean.nese";
    const Run t = nes_cli({"train", "--config", kToy, "--steps", "30", "--out", ck});
    REQUIRE(t.code == 0);
    const auto s = nlohmann::json::parse(t.out);
    CHECK(s["steps"] == 30);
    CHECK(s["checkpoint"] == ck);
    CHECK(std::filesystem::exists(ck + ".metrics.jsonl"));
    REQUIRE(nes_cli({"train", "--config", kToy, "--steps", "30", "--out", lean, "--no-learner"}).code == 0);

    const Run a = nes_cli({"infer", "--checkpoint", ck, "--config", kToy});
    const Run b = nes_cli({"infer", "--checkpoint", lean, "--config", kToy});
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    CHECK(a.out == b.out); // learner weights play no part in inference
    const auto ia = nlohmann::json::parse(a.out);
    CHECK(ia["samples"] == 128);
    CHECK(ia["madd_per_sample"]["layers"].size() == 2);

    const Run d = nes_cli({"infer", "--checkpoint", ck, "--config", kToy, "--strategy", "direct", "--csv"});
    CHECK(d.code == 0);
    CHECK(d.out.find(",direct,") != std::string::npos);
    CHECK(nes_cli({"infer", "--checkpoint", ck, "--config", kToy, "--strategy", "magic"}).code == 1);
    CHECK(nes_cli({"infer", "--checkpoint", ck + ".metrics.jsonl", "--config", kToy}).code == 1);

    const Run e = nes_cli({"expand", "--checkpoint", ck, "--layer", "conv1"});
    REQUIRE(e.code == 0);
    const auto w = nlohmann::json::parse(e.out);
    CHECK(w["shape"] == std::vector<int>{3, 3, 3, 8});
    CHECK(w["values"].size() == 216);
    const Tensor expect = load_checkpoint(ck).layer("conv1").expanded_weights();
    CHECK(w["values"].get<std::vector<double>>() == expect.values());
    const Run ec = nes_cli({"expand", "--checkpoint", ck, "--layer", "fc", "--csv"});
    CHECK(std::count(ec.out.begin(), ec.out.end(), '\n') == 17);
    CHECK(nes_cli({"expand", "--checkpoint", ck, "--layer", "nope"}).code == 1);
}

TEST_CASE("check-grad exit status")
{
    const Run ok = nes_cli({"check-grad", "--trials", "3", "--seed", "4"});
    CHECK(ok.code == 0);
    CHECK(nlohmann::json::parse(ok.out)["passed"] == true);
    const Run fail = nes_cli({"check-grad", "--trials", "3", "--tolerance", "1e-30", "--learner-tolerance", "1e-30"});
    CHECK(fail.code == 1);
    CHECK(nlohmann::json::parse(fail.out)["passed"] == false);
    CHECK(nes_cli({"check-grad", "--config", kToy, "--ema"}).code == 0);
}
