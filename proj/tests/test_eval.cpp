#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "glamelab/eval.hpp"
#include "glamelab/fuzzy.hpp"

using namespace glame;
using namespace glame::eval;

namespace {

// Independent LCS-based oracle for the partial ratio: for every window of the
// longer (normalized) string, score 200 * LCS / (|a| + |w|) and take the max.
// The implementation path computes the same quantity through the indel
// distance; LCS and indel are dual (indel = |a| + |b| - 2 LCS).
int lcs_len(const std::string& a, const std::string& b) {
    std::vector<std::vector<int>> dp(a.size() + 1, std::vector<int>(b.size() + 1, 0));
    for (size_t i = 1; i <= a.size(); ++i)
        for (size_t j = 1; j <= b.size(); ++j)
            dp[i][j] = a[i - 1] == b[j - 1] ? dp[i - 1][j - 1] + 1
                                            : std::max(dp[i - 1][j], dp[i][j - 1]);
    return dp[a.size()][b.size()];
}

double oracle_partial_ratio(const std::string& a_raw, const std::string& b_raw) {
    std::string a = fuzzy::normalize(a_raw);
    std::string b = fuzzy::normalize(b_raw);
    if (a.size() > b.size()) std::swap(a, b);
    if (a.empty()) return b.empty() ? 100.0 : 0.0;
    double best = 0.0;
    for (size_t start = 0; start + a.size() <= b.size(); ++start) {
        const std::string w = b.substr(start, a.size());
        best = std::max(best, 200.0 * lcs_len(a, w) / static_cast<double>(a.size() + w.size()));
    }
    return best;
}

kg::KnowledgeGraph small_world(uint64_t seed = 5) {
    kg::WorldSpec spec;
    spec.entities = 24;
    spec.relations = 5;
    spec.triples_per_entity = 2;
    spec.min_two_hop_fraction = 0.0;
    return kg::generate_world(spec, seed);
}

lm::Model memorized_model(const kg::KnowledgeGraph& g) {
    lm::Tokenizer tok = lm::build_world_tokenizer(g);
    kg::CorpusOptions copts;
    copts.repetitions = 1;
    copts.multihop_fraction = 1.0;
    copts.prefix_fraction = 0.0;
    auto corpus = lm::tokenize_corpus(tok, kg::render_corpus(g, copts, 2));
    lm::ModelConfig cfg;
    cfg.vocab_size = tok.vocab_size();
    cfg.d_model = 48;
    cfg.n_layers = 3;
    cfg.n_heads = 4;
    cfg.ffn_inner_dim = 96;
    cfg.max_seq_len = 32;
    cfg.seed = 9;
    lm::TrainSchedule sched;
    sched.max_steps = 700;
    sched.batch_size = 16;
    sched.lr = 3e-3f;
    sched.warmup_steps = 40;
    sched.seed = 9;
    sched.eval_every = 200;
    sched.target_recall = 0.99;
    return lm::train(cfg, tok, corpus, sched, &g);
}

}  // namespace

TEST_CASE("fuzzy partial ratio: verbatim containment, token soup, paper-style example") {
    CHECK(fuzzy::partial_ratio("amber e9", "the answer is amber e9 indeed") == 100.0);
    CHECK(fuzzy::partial_ratio("amber e9", "quartz zephyr lagoon") < 90.0);

    // case and punctuation are normalized away
    const double hit = fuzzy::partial_ratio("mount kilimanjaro",
                                            "the highest peak is Mount Kilimanjaro.");
    CHECK(hit >= 90.0);
    CHECK(hit == oracle_partial_ratio("mount kilimanjaro", "the highest peak is Mount Kilimanjaro."));
}

TEST_CASE("fuzzy partial ratio equals the LCS oracle on random word soups") {
    Rng rng(33);
    const char* words[] = {"amber", "quartz", "e1", "e17", "habitat", "of", "is", "the", "kestrel"};
    for (int inst = 0; inst < 200; ++inst) {
        auto mk = [&](int len) {
            std::string s;
            for (int i = 0; i < len; ++i) {
                if (i) s += ' ';
                s += words[rng.below(9)];
            }
            return s;
        };
        const std::string a = mk(1 + static_cast<int>(rng.below(3)));
        const std::string b = mk(1 + static_cast<int>(rng.below(8)));
        CHECK(fuzzy::partial_ratio(a, b) == doctest::Approx(oracle_partial_ratio(a, b)).epsilon(1e-12));
    }
}

TEST_CASE("editing score: identity, paper rows, and zero handling") {
    CHECK(editing_score(100, 100, 100, 100).editing == doctest::Approx(100.0));

    // published aggregate rows reproduce to +-0.01
    Scores a = editing_score(100.00, 99.30, 81.39, 33.04);
    CHECK(a.editing == doctest::Approx(63.87).epsilon(0.0002));
    Scores b = editing_score(99.95, 96.48, 75.44, 21.43);
    CHECK(b.editing == doctest::Approx(49.82).epsilon(0.0002));

    Scores z = editing_score(100, 50, 0, 25);
    CHECK(z.editing == 0.0);
    CHECK(z.zero_component);
}

TEST_CASE("harmonic mean sits between min and arithmetic mean, permutation invariant") {
    Rng rng(41);
    for (int inst = 0; inst < 50; ++inst) {
        double v[4];
        for (double& x : v) x = 1.0 + rng.uniform() * 99.0;
        Scores s = editing_score(v[0], v[1], v[2], v[3]);
        CHECK(s.editing >= *std::min_element(v, v + 4) - 1e-9);
        CHECK(s.editing <= (v[0] + v[1] + v[2] + v[3]) / 4.0 + 1e-9);
        Scores p = editing_score(v[3], v[1], v[0], v[2]);
        CHECK(s.editing == doctest::Approx(p.editing).epsilon(1e-12));
    }
    CHECK_THROWS_AS(editing_score(-1, 50, 50, 50), ConfigError);
    CHECK_THROWS_AS(editing_score(101, 50, 50, 50), ConfigError);
}

TEST_CASE("make_cases: deterministic, leak-sound, neighborhood subjects differ") {
    kg::KnowledgeGraph g = small_world();
    auto edits = sample_edits(g, 6, 3);
    CaseSpec spec;
    spec.neighborhood_prompts = 2;
    spec.hops = {2};
    std::vector<std::string> warnings;
    auto cases = make_cases(g, edits, spec, 11, &warnings);
    auto cases2 = make_cases(g, edits, spec, 11);
    REQUIRE(!cases.empty());
    REQUIRE(cases.size() == cases2.size());

    for (size_t i = 0; i < cases.size(); ++i) {
        const EvalCase& c = cases[i];
        // determinism
        CHECK(cases2[i].edit.s == c.edit.s);
        CHECK(cases2[i].portability[0].question == c.portability[0].question);

        CHECK(!c.paraphrase_prompts.empty());
        for (const NeighborhoodProbe& p : c.neighborhood) CHECK(p.subject != c.edit.s);
        // golds come from the post-edit world and never collide with s / o*
        const kg::KnowledgeGraph post = kg::apply_edit_to_graph(g, c.edit);
        for (const PortabilityQuestion& q : c.portability) {
            CHECK(q.hops >= 2);
            CHECK(q.answer != c.edit.s);
            CHECK(q.answer != c.edit.o_star);
            CHECK(c.leak.count(q.answer) == 1);
            for (const kg::Triple& t : q.chain) CHECK(post.has_triple(t));
            // the chain starts at the edited fact and ends at the gold answer
            CHECK(q.chain.front().s == c.edit.s);
            CHECK(q.chain.front().o == c.edit.o_star);
            CHECK(q.chain.back().o == q.answer);
        }
        // leak soundness against the subgraph builder
        kg::Subgraph sub = kg::build_subgraph(g, c.edit, 2, 3, c.leak);
        for (int node : sub.nodes()) CHECK(c.leak.count(node) == 0);
    }
}

TEST_CASE("case files round trip") {
    kg::KnowledgeGraph g = small_world();
    auto cases = make_cases(g, sample_edits(g, 4, 3), CaseSpec{}, 11);
    save_cases("cases_roundtrip.jsonl", cases);
    auto back = load_cases("cases_roundtrip.jsonl");
    REQUIRE(back.size() == cases.size());
    save_cases("cases_roundtrip2.jsonl", back);
    CHECK(read_text_file("cases_roundtrip.jsonl") == read_text_file("cases_roundtrip2.jsonl"));
}

TEST_CASE("scoring arithmetic and read-only guarantee on a memorized model") {
    kg::KnowledgeGraph g = small_world();
    lm::Model model = memorized_model(g);
    const std::string digest_before = model.weights_digest();

    auto edits = sample_edits(g, 4, 21);
    auto cases = make_cases(g, edits, CaseSpec{}, 21);
    REQUIRE(!cases.empty());

    // the unedited model still knows (s, r, o): efficacy must be 0
    CHECK(efficacy_score(model, cases) == 0.0);
    // and neighborhood correctness is perfect by the same token
    CHECK(neighborhood_score(model, cases) == 100.0);

    PortabilityOptions popts;
    CHECK(portability_score(model, cases, popts) >= 0.0);
    CHECK(model.weights_digest() == digest_before);  // scoring is read-only

    // mixed indicator arithmetic: 3 of 4 passing -> 75
    std::vector<CaseScores> fabricated{{100, 100, 100, 0},
                                       {100, 100, 100, 100},
                                       {100, 0, 100, 100},
                                       {0, 100, 100, 100}};
    Scores agg = aggregate_case_scores(fabricated);
    CHECK(agg.efficacy == doctest::Approx(75.0));
    CHECK(agg.paraphrase == doctest::Approx(75.0));
    CHECK(agg.portability == doctest::Approx(75.0));
}

TEST_CASE("probability comparisons are invariant under monotone transforms") {
    kg::KnowledgeGraph g = small_world();
    lm::Model model = memorized_model(g);
    auto cases = make_cases(g, sample_edits(g, 4, 7), CaseSpec{}, 7);
    REQUIRE(!cases.empty());
    for (const EvalCase& c : cases) {
        std::vector<int> prompt{lm::Tokenizer::kBos};
        for (int id : model.tokenizer().encode(c.edit.prompt)) prompt.push_back(id);
        const double log_a =
            lm::sequence_log_prob(model, prompt, model.tokenizer().encode(c.o_star_surface));
        const double log_b =
            lm::sequence_log_prob(model, prompt, model.tokenizer().encode(c.o_surface));
        // indicator computed on log scores and on exponentiated scores agree
        CHECK((log_a > log_b) == (std::exp(log_a) > std::exp(log_b)));
    }
}

TEST_CASE("portability exact-match mode lower-bounds fuzzy mode") {
    kg::KnowledgeGraph g = small_world();
    lm::Model model = memorized_model(g);
    auto cases = make_cases(g, sample_edits(g, 6, 13), CaseSpec{}, 13);
    REQUIRE(!cases.empty());
    PortabilityOptions fuzzy_mode;
    PortabilityOptions exact_mode;
    exact_mode.exact_match = true;
    for (const EvalCase& c : cases) {
        const double f = portability_score(model, {c}, fuzzy_mode);
        const double e = portability_score(model, {c}, exact_mode);
        CHECK(e <= f + 1e-9);
    }
}

TEST_CASE("score_case composes the four per-case components") {
    kg::KnowledgeGraph g = small_world();
    lm::Model model = memorized_model(g);
    auto cases = make_cases(g, sample_edits(g, 3, 17), CaseSpec{}, 17);
    REQUIRE(!cases.empty());
    PortabilityOptions popts;
    CaseScores s = score_case(model, cases[0], popts);
    CHECK(s.efficacy == efficacy_score(model, {cases[0]}));
    CHECK(s.paraphrase == paraphrase_score(model, {cases[0]}));
    CHECK(s.neighborhood == neighborhood_score(model, {cases[0]}));
    CHECK(s.portability == portability_score(model, {cases[0]}, popts));
}

TEST_CASE("score reports: json and csv shapes") {
    std::vector<CaseScores> pc{{100, 100, 100, 0}, {100, 50, 100, 100}};
    Scores agg = aggregate_case_scores(pc);
    const std::string csvtext = scores_csv(agg, pc);
    CHECK(csvtext.find("case,efficacy,paraphrase,neighborhood,portability,editing\n") == 0);
    CHECK(csvtext.find("aggregate,") != std::string::npos);
    const std::string jsontext = scores_json(agg, pc);
    CHECK(jsontext.find("\"per_case\"") != std::string::npos);
}
