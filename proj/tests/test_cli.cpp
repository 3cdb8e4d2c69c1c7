// End-to-end exercise of the command-line tool at toy scale. The binary path
// arrives as the test's first argument.
#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "glamelab/util.hpp"

namespace fs = std::filesystem;

static std::string g_bin;

static int run(const std::string& args) {
    const std::string cmd = g_bin + " " + args + " >> cli_test_log.txt 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

TEST_CASE("full pipeline through the binary, reproducibly") {
    fs::remove_all("cli_ws");
    fs::create_directories("cli_ws");
    const std::string ws = "cli_ws/";

    REQUIRE(run("world gen --entities 24 --relations 5 --triples-per-entity 2 "
                "--two-hop-min 0 --seed 3 --out " + ws + "world") == 0);
    CHECK(fs::exists(ws + "world/graph.json"));
    CHECK(fs::exists(ws + "world/run_manifest.json"));

    REQUIRE(run("corpus render --graph " + ws + "world/graph.json --repetitions 1 "
                "--multihop 1.0 --prefix-fraction 0 --seed 3 --out " + ws + "corpus") == 0);
    CHECK(fs::exists(ws + "corpus/corpus.json"));

    REQUIRE(run("lm train --graph " + ws + "world/graph.json --corpus " + ws +
                "corpus/corpus.json --d-model 32 --layers 3 --heads 4 --inner 64 "
                "--steps 700 --batch 16 --lr 3e-3 --warmup 40 --target-recall 0.95 "
                "--eval-every 200 --seed 3 --quiet --out " + ws + "ckpt") == 0);
    CHECK(fs::exists(ws + "ckpt/manifest.json"));
    CHECK(fs::exists(ws + "ckpt/weights.bin"));

    REQUIRE(run("lm recall --ckpt " + ws + "ckpt --graph " + ws + "world/graph.json "
                "--min 0.4") == 0);
    // impossible gate trips exit code 4
    CHECK(run("lm recall --ckpt " + ws + "ckpt --graph " + ws + "world/graph.json "
              "--min 1.01") == 4);

    REQUIRE(run("cov estimate --ckpt " + ws + "ckpt --corpus " + ws + "corpus/corpus.json "
                "--layer 1 --samples 80 --seed 3 --out " + ws + "cov") == 0);
    CHECK(fs::exists(ws + "cov/cov.json"));
    CHECK(fs::exists(ws + "cov/cov.bin"));

    REQUIRE(run("cases make --graph " + ws + "world/graph.json --count 3 --hops 2 "
                "--neighborhood 2 --seed 3 --out " + ws + "cases") == 0);
    CHECK(fs::exists(ws + "cases/cases.jsonl"));

    REQUIRE(run("edit run --ckpt " + ws + "ckpt --graph " + ws + "world/graph.json "
                "--cov " + ws + "cov/cov --cases " + ws + "cases/cases.jsonl "
                "--method glame --layer 1 --k 0 --n 1 --m 3 --prefixes 2 --lr 0.05 "
                "--max-steps 12 --limit 2 --seed 5 --out " + ws + "edits") == 0);
    CHECK(fs::exists(ws + "edits/edit_000/solution.json"));
    CHECK(fs::exists(ws + "edits/edit_001/checkpoint/weights.bin"));

    REQUIRE(run("eval run --edits-dir " + ws + "edits --cases " + ws + "cases/cases.jsonl "
                "--max-new 4 --out " + ws + "scores") == 0);
    CHECK(fs::exists(ws + "scores/scores.csv"));
    CHECK(fs::exists(ws + "scores/scores.json"));

    // byte-identical rerun of the scoring stage
    REQUIRE(run("eval run --edits-dir " + ws + "edits --cases " + ws + "cases/cases.jsonl "
                "--max-new 4 --out " + ws + "scores2") == 0);
    CHECK(glame::read_text_file(ws + "scores/scores.csv") ==
          glame::read_text_file(ws + "scores2/scores.csv"));

    REQUIRE(run("sweep --ckpt " + ws + "ckpt --graph " + ws + "world/graph.json --cov " + ws +
                "cov/cov --cases " + ws + "cases/cases.jsonl --n-values 0,1 --m-values 2 "
                "--layer 1 --k 0 --prefixes 2 --max-steps 8 --limit 1 --seed 5 --out " + ws +
                "sweep") == 0);
    CHECK(fs::exists(ws + "sweep/sweep.csv"));
    CHECK(fs::exists(ws + "sweep/peak.json"));
    const std::string csv = glame::read_text_file(ws + "sweep/sweep.csv");
    CHECK(csv.find("n,m,efficacy") == 0);
    CHECK(csv.find("\n0,2,") != std::string::npos);
    CHECK(csv.find("\n1,2,") != std::string::npos);
}

TEST_CASE("config errors exit with code 2") {
    CHECK(run("world gen --entities -3 --relations 0 --triples-per-entity 1 --out cli_ws/bad") == 2);
    CHECK(run("lm recall --ckpt missing_dir --graph nowhere.json") == 2);
    CHECK(run("edit run --ckpt a --graph b") == 2);  // missing required options
    CHECK(run("nonsense-subcommand") == 2);
}

TEST_CASE("config file fields apply when flags are absent") {
    fs::create_directories("cli_ws");
    glame::write_text_file("cli_ws/world_cfg.json",
                           "{\"entities\": 10, \"relations\": 3, \"triples_per_entity\": 1, "
                           "\"two_hop_min\": 0.0}");
    REQUIRE(run("world gen --config cli_ws/world_cfg.json --seed 2 --out cli_ws/world_cfg_out") == 0);
    const std::string graph = glame::read_text_file("cli_ws/world_cfg_out/graph.json");
    // 10 entities from the config document
    CHECK(graph.find("\"id\": 9") != std::string::npos);
    CHECK(graph.find("\"id\": 10") == std::string::npos);
}

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: test_cli <glame_lab binary>\n");
        return 1;
    }
    g_bin = argv[1];
    doctest::Context ctx;
    ctx.applyCommandLine(1, argv);
    return ctx.run();
}
