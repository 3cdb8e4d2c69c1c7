#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <tuple>

#include "glamelab/kg.hpp"

using namespace glame;
using namespace glame::kg;

namespace {

Relation mk_rel(int id, const std::string& word) {
    Relation r;
    r.id = id;
    r.surface = word;
    r.templates = {"the " + word + " of {s} is", "{s} has " + word};
    r.paraphrases = {"for {s} the " + word + " is"};
    r.functional = false;
    return r;
}

// Hand-built 7-node graph used by the enumeration tests.
KnowledgeGraph seven_node_graph() {
    std::vector<Entity> ents;
    for (int i = 0; i < 7; ++i) ents.push_back(Entity{i, "node " + std::to_string(i)});
    std::vector<Relation> rels{mk_rel(0, "alpha"), mk_rel(1, "beta"), mk_rel(2, "gamma")};
    std::vector<Triple> trips{
        {0, 0, 1},  // the fact being edited away
        {2, 0, 3}, {2, 1, 4}, {2, 2, 0},
        {3, 1, 5}, {3, 2, 6},
        {4, 0, 5},
    };
    return KnowledgeGraph(std::move(ents), std::move(rels), std::move(trips));
}

// Independent brute-force oracle for the subgraph contract. Level-by-level
// expansion over the post-edit world with its own frequency counting and
// ordering; deliberately shares no code with build_subgraph.
struct OracleResult {
    std::set<int> nodes;
    std::set<std::tuple<int, int, int, int>> edges;  // h, r, t, depth
    std::map<int, int> depth;
};

OracleResult oracle_subgraph(const KnowledgeGraph& g, const EditRequest& e, int n, int m,
                             const std::set<int>& leak) {
    // post-edit triple set
    std::vector<Triple> post;
    for (const Triple& t : g.triples())
        if (!(t.s == e.s && t.r == e.r && t.o == e.o)) post.push_back(t);
    post.push_back({e.s, e.r, e.o_star});

    std::map<int, int> freq;
    for (const Triple& t : post) ++freq[t.r];

    OracleResult res;
    res.nodes = {e.s, e.o_star};
    res.depth[e.s] = 0;
    res.depth[e.o_star] = 0;
    res.edges.insert({e.s, e.r, e.o_star, 0});

    std::vector<int> level{e.o_star};
    for (int d = 0; d < n && !level.empty(); ++d) {
        std::vector<int> next_level;
        for (int u : level) {
            // candidates of u sorted by (freq, r, o)
            std::vector<std::tuple<int, int, int>> cand;
            for (const Triple& t : post)
                if (t.s == u) cand.push_back({freq[t.r], t.r, t.o});
            std::sort(cand.begin(), cand.end());
            int taken = 0;
            for (auto [f, r, o] : cand) {
                (void)f;
                if (taken >= m) break;
                if (leak.count(o)) continue;
                if (res.nodes.count(o)) continue;
                res.nodes.insert(o);
                res.depth[o] = d + 1;
                res.edges.insert({u, r, o, d + 1});
                next_level.push_back(o);
                ++taken;
            }
        }
        level = next_level;
    }
    return res;
}

OracleResult to_oracle_form(const Subgraph& sub) {
    OracleResult res;
    for (const auto& [id, d] : sub.node_depth) {
        res.nodes.insert(id);
        res.depth[id] = d;
    }
    for (const SubEdge& e : sub.edges) res.edges.insert({e.h, e.r, e.t, e.depth});
    return res;
}

KnowledgeGraph random_graph(Rng& rng) {
    const int n_ent = 5 + static_cast<int>(rng.below(46));  // 5..50
    const int n_rel = 2 + static_cast<int>(rng.below(5));
    std::vector<Entity> ents;
    for (int i = 0; i < n_ent; ++i) ents.push_back(Entity{i, "node " + std::to_string(i)});
    std::vector<Relation> rels;
    for (int i = 0; i < n_rel; ++i) rels.push_back(mk_rel(i, "rel" + std::to_string(i)));
    std::set<Triple> tset;
    const int n_trip = n_ent + static_cast<int>(rng.below(static_cast<uint64_t>(2 * n_ent)));
    for (int i = 0; i < n_trip; ++i) {
        Triple t;
        t.s = static_cast<int>(rng.below(static_cast<uint64_t>(n_ent)));
        t.r = static_cast<int>(rng.below(static_cast<uint64_t>(n_rel)));
        t.o = static_cast<int>(rng.below(static_cast<uint64_t>(n_ent)));
        if (t.o == t.s) continue;
        tset.insert(t);
    }
    if (tset.empty()) tset.insert({0, 0, 1});
    return KnowledgeGraph(std::move(ents), std::move(rels),
                          std::vector<Triple>(tset.begin(), tset.end()));
}

EditRequest random_edit(const KnowledgeGraph& g, Rng& rng) {
    std::vector<int> subjects;
    for (const Entity& e : g.entities())
        if (!g.out_edges(e.id).empty()) subjects.push_back(e.id);
    const int s = subjects[rng.below(subjects.size())];
    const Triple base = g.out_edges(s)[rng.below(g.out_edges(s).size())];
    int o_star = base.o;
    while (o_star == base.o)
        o_star = static_cast<int>(rng.below(static_cast<uint64_t>(g.entities().size())));
    return EditRequest{base.s, base.r, base.o, o_star, render_prompt(g, base.s, base.r, 0)};
}

}  // namespace

TEST_CASE("generate_world minimal spec yields exactly the requested triples") {
    WorldSpec spec;
    spec.entities = 2;
    spec.relations = 1;
    spec.triples_per_entity = 1;
    spec.min_two_hop_fraction = 0.0;
    KnowledgeGraph g = generate_world(spec, 7);
    CHECK(g.entities().size() == 2);
    CHECK(g.relations().size() == 1);
    CHECK(g.triples().size() == 2);
    for (const Triple& t : g.triples()) CHECK(t.s != t.o);
}

TEST_CASE("generate_world is deterministic under a fixed seed") {
    WorldSpec spec;
    spec.entities = 30;
    spec.relations = 5;
    spec.triples_per_entity = 2;
    KnowledgeGraph a = generate_world(spec, 42);
    KnowledgeGraph b = generate_world(spec, 42);
    CHECK(a.to_json() == b.to_json());
    KnowledgeGraph c = generate_world(spec, 43);
    CHECK(a.to_json() != c.to_json());
}

TEST_CASE("generate_world 200/20/3 satisfies invariants and two-hop coverage") {
    WorldSpec spec;
    spec.entities = 200;
    spec.relations = 20;
    spec.triples_per_entity = 3;
    spec.min_two_hop_fraction = 0.8;
    KnowledgeGraph g = generate_world(spec, 1);
    CHECK(g.triples().size() == 600);

    // audit with an explicit graph walk
    int covered = 0;
    for (const Entity& e : g.entities()) {
        bool two_hop = false;
        for (const Triple& t1 : g.out_edges(e.id)) {
            if (!g.out_edges(t1.o).empty()) two_hop = true;
        }
        if (two_hop) ++covered;
    }
    CHECK(static_cast<double>(covered) / 200.0 >= 0.8);

    // functional invariant: one object per (s, r)
    std::set<std::pair<int, int>> seen;
    for (const Triple& t : g.triples()) CHECK(seen.insert({t.s, t.r}).second);
}

TEST_CASE("generate_world rejects infeasible specs") {
    WorldSpec spec;
    spec.entities = 5;
    spec.relations = 2;
    spec.triples_per_entity = 3;  // functional constraint unsatisfiable
    CHECK_THROWS_AS(generate_world(spec, 1), ConfigError);
}

TEST_CASE("render_corpus covers each triple x template with repetitions, deterministically") {
    WorldSpec spec;
    spec.entities = 10;
    spec.relations = 3;
    spec.triples_per_entity = 2;
    spec.min_two_hop_fraction = 0.0;
    KnowledgeGraph g = generate_world(spec, 5);

    CorpusOptions opts;
    opts.repetitions = 2;
    opts.multihop_fraction = 0.0;
    opts.subject_alias_fraction = 0.0;
    auto corpus = render_corpus(g, opts, 9);
    auto corpus2 = render_corpus(g, opts, 9);
    CHECK(corpus == corpus2);
    CHECK(corpus.size() == g.triples().size() * 3 * 2);  // 2 templates + 1 paraphrase

    // with aliases on, every sentence gains a last-token-subject variant
    CorpusOptions alias_opts = opts;
    alias_opts.subject_alias_fraction = 1.0;
    CHECK(render_corpus(g, alias_opts, 9).size() == corpus.size() * 2);

    // every rendered (triple, template) sentence appears >= repetitions times;
    // prefix augmentation may prepend words, so count suffix matches
    auto suffix_count = [&](const std::string& want) {
        int n = 0;
        for (const auto& s : corpus)
            if (s.size() >= want.size() && s.compare(s.size() - want.size(), want.size(), want) == 0)
                ++n;
        return n;
    };
    for (const Triple& t : g.triples()) {
        const Relation& rel = g.relation(t.r);
        for (const std::string& tmpl : rel.templates) {
            const std::string want =
                render_template(tmpl, g.entity(t.s).surface) + " " + g.entity(t.o).surface;
            CHECK(suffix_count(want) >= 2);
        }
    }
}

TEST_CASE("render_corpus multihop statements follow the chain prompt format") {
    KnowledgeGraph g = seven_node_graph();
    CorpusOptions opts;
    opts.repetitions = 1;
    opts.multihop_fraction = 1.0;
    auto corpus = render_corpus(g, opts, 9);
    // chain (2, alpha, 3), (3, beta, 5) renders through render_chain_prompt
    const std::string want = render_chain_prompt(g, 2, {0, 1}) + " " + g.entity(5).surface;
    CHECK(std::count(corpus.begin(), corpus.end(), want) == 1);
    CHECK(want == "the beta of the alpha of node 2 is node 5");
}

TEST_CASE("template rendering validates the subject slot") {
    CHECK(render_template("the x of {s} is", "node 1") == "the x of node 1 is");
    CHECK_THROWS_AS(render_template("no slot here", "a"), ConfigError);
    CHECK_THROWS_AS(render_template("{s} and {s}", "a"), ConfigError);
}

TEST_CASE("prioritize_relations sorts rarer relations first with lexicographic ties") {
    // frequencies: alpha:3, beta:2, gamma:2
    KnowledgeGraph g = seven_node_graph();
    std::vector<Triple> cand = g.out_edges(2);  // (2,alpha,3), (2,beta,4), (2,gamma,0)
    auto ordered = prioritize_relations(g, cand);
    REQUIRE(ordered.size() == 3);
    CHECK(ordered[0].r == 1);  // beta, freq 2
    CHECK(ordered[1].r == 2);  // gamma, freq 2, tie broken by relation id
    CHECK(ordered[2].r == 0);  // alpha, freq 3

    // all equal frequencies -> pure (r, o) lexicographic order
    std::vector<Entity> ents{{0, "a 0"}, {1, "a 1"}, {2, "a 2"}, {3, "a 3"}};
    std::vector<Relation> rels{mk_rel(0, "r0"), mk_rel(1, "r1")};
    std::vector<Triple> ts{{0, 0, 1}, {0, 1, 2}, {1, 0, 3}, {1, 1, 3}};
    KnowledgeGraph eq(std::move(ents), std::move(rels), std::move(ts));
    std::vector<Triple> mixed{{0, 1, 2}, {0, 0, 1}};
    auto sorted = prioritize_relations(eq, mixed);
    CHECK(sorted[0].r == 0);
    CHECK(sorted[1].r == 1);

    // direct sort example: frequencies {r0:5, r1:1, r2:3} -> r1, r2, r0
    std::vector<Entity> e2;
    for (int i = 0; i < 10; ++i) e2.push_back({i, "b " + std::to_string(i)});
    std::vector<Relation> r2{mk_rel(0, "c0"), mk_rel(1, "c1"), mk_rel(2, "c2")};
    std::vector<Triple> t2{{0, 0, 1}, {1, 0, 2}, {2, 0, 3}, {3, 0, 4}, {4, 0, 5},
                           {5, 1, 6}, {6, 2, 7}, {7, 2, 8}, {8, 2, 9}};
    KnowledgeGraph g2(std::move(e2), std::move(r2), std::move(t2));
    std::vector<Triple> probe{{0, 0, 1}, {5, 1, 6}, {6, 2, 7}};
    auto got = prioritize_relations(g2, probe);
    CHECK(got[0].r == 1);
    CHECK(got[1].r == 2);
    CHECK(got[2].r == 0);
}

TEST_CASE("build_subgraph n=0 yields exactly the edited edge") {
    KnowledgeGraph g = seven_node_graph();
    EditRequest e{0, 0, 1, 2, render_prompt(g, 0, 0, 0)};
    for (int m = 1; m <= 5; ++m) {
        Subgraph sub = build_subgraph(g, e, 0, m, {});
        REQUIRE(sub.edges.size() == 1);
        CHECK(sub.edges[0] == SubEdge{0, 0, 2, 0});
        CHECK(sub.nodes() == std::vector<int>{0, 2});
    }
}

TEST_CASE("build_subgraph n=2 m=2 equals the hand enumeration on the 7-node graph") {
    KnowledgeGraph g = seven_node_graph();
    EditRequest e{0, 0, 1, 2, render_prompt(g, 0, 0, 0)};
    Subgraph sub = build_subgraph(g, e, 2, 2, {});

    std::vector<SubEdge> want{
        {0, 0, 2, 0},  // edited edge
        {2, 1, 4, 1},  // beta first (rarer than alpha)
        {2, 0, 3, 1},  // gamma edge skipped: tail is the root subject, already present
        {4, 0, 5, 2},
        {3, 2, 6, 2},  // (3, beta, 5) skipped: node 5 already reached via 4
    };
    CHECK(sub.edges == want);
    CHECK(sub.nodes() == std::vector<int>{0, 2, 3, 4, 5, 6});
    CHECK(sub.node_depth.at(5) == 2);

    // also equals the independent oracle
    auto want_oracle = oracle_subgraph(g, e, 2, 2, {});
    auto got = to_oracle_form(sub);
    CHECK(got.nodes == want_oracle.nodes);
    CHECK(got.edges == want_oracle.edges);
    CHECK(got.depth == want_oracle.depth);
}

TEST_CASE("leak filter excludes a node even when it is the top-priority neighbor") {
    KnowledgeGraph g = seven_node_graph();
    EditRequest e{0, 0, 1, 2, render_prompt(g, 0, 0, 0)};
    Subgraph sub = build_subgraph(g, e, 2, 2, {4});
    for (const SubEdge& edge : sub.edges) {
        CHECK(edge.t != 4);
        CHECK(edge.h != 4);
    }
    CHECK_FALSE(sub.node_depth.count(4));
    // the edited edge stays even under an aggressive filter
    Subgraph sub2 = build_subgraph(g, e, 2, 2, {2, 3, 4, 5, 6});
    REQUIRE(sub2.edges.size() == 1);
    CHECK(sub2.edges[0] == SubEdge{0, 0, 2, 0});
}

TEST_CASE("oracle equivalence over random graphs and the full (n, m) grid") {
    Rng rng(2024);
    for (int g_i = 0; g_i < 20; ++g_i) {
        KnowledgeGraph g = random_graph(rng);
        EditRequest e = random_edit(g, rng);
        std::set<int> leak;
        if (rng.uniform() < 0.5) leak.insert(static_cast<int>(rng.below(g.entities().size())));
        leak.erase(e.s);
        leak.erase(e.o_star);
        for (int n = 0; n <= 3; ++n) {
            for (int m = 1; m <= 5; ++m) {
                Subgraph sub = build_subgraph(g, e, n, m, leak);
                auto want = oracle_subgraph(g, e, n, m, leak);
                auto got = to_oracle_form(sub);
                CHECK(got.nodes == want.nodes);
                CHECK(got.edges == want.edges);
                CHECK(got.depth == want.depth);
            }
        }
    }
}

TEST_CASE("subgraph monotonicity in n and m, and byte-identical determinism") {
    Rng rng(77);
    for (int g_i = 0; g_i < 10; ++g_i) {
        KnowledgeGraph g = random_graph(rng);
        EditRequest e = random_edit(g, rng);
        for (int n = 0; n <= 2; ++n) {
            for (int m = 1; m <= 4; ++m) {
                auto nodes_of = [&](int nn, int mm) {
                    auto v = build_subgraph(g, e, nn, mm, {}).nodes();
                    return std::set<int>(v.begin(), v.end());
                };
                auto base = nodes_of(n, m);
                auto up_n = nodes_of(n + 1, m);
                auto up_m = nodes_of(n, m + 1);
                CHECK(std::includes(up_n.begin(), up_n.end(), base.begin(), base.end()));
                CHECK(std::includes(up_m.begin(), up_m.end(), base.begin(), base.end()));

                CHECK(build_subgraph(g, e, n, m, {}).to_json() ==
                      build_subgraph(g, e, n, m, {}).to_json());
            }
        }
    }
}

TEST_CASE("subgraph json round trip") {
    KnowledgeGraph g = seven_node_graph();
    EditRequest e{0, 0, 1, 2, render_prompt(g, 0, 0, 0)};
    Subgraph sub = build_subgraph(g, e, 2, 2, {});
    Subgraph back = Subgraph::from_json(sub.to_json());
    CHECK(back.to_json() == sub.to_json());
    CHECK(back.node_depth == sub.node_depth);
}

TEST_CASE("apply_edit_to_graph swaps exactly one triple") {
    KnowledgeGraph g = seven_node_graph();
    EditRequest e{0, 0, 1, 2, render_prompt(g, 0, 0, 0)};
    KnowledgeGraph post = apply_edit_to_graph(g, e);
    CHECK(post.has_triple({0, 0, 2}));
    CHECK_FALSE(post.has_triple({0, 0, 1}));
    CHECK(post.triples().size() == g.triples().size());
    int diff = 0;
    for (const Triple& t : g.triples())
        if (!post.has_triple(t)) ++diff;
    CHECK(diff == 1);
}

TEST_CASE("edit request validation") {
    KnowledgeGraph g = seven_node_graph();
    CHECK_THROWS_AS(validate_edit(g, EditRequest{0, 0, 1, 1, "p"}), ConfigError);   // o* == o
    CHECK_THROWS_AS(validate_edit(g, EditRequest{0, 1, 1, 2, "p"}), ConfigError);   // (s,r,o) absent
    CHECK_THROWS_AS(validate_edit(g, EditRequest{0, 0, 1, 99, "p"}), ConfigError);  // o* unknown
    EditRequest ok = make_edit_request(g, 0, 0, 2);
    CHECK(ok.o == 1);
    CHECK(ok.prompt == "the alpha of node 0 is");
}

TEST_CASE("ingest_triples accepts headered files and validates") {
    const char* path = "ingest_ok.jsonl";
    write_text_file(path,
        "{\"format\":\"triples/1\",\"entities\":[{\"id\":0,\"surface\":\"ash 0\"},"
        "{\"id\":1,\"surface\":\"ash 1\"},{\"id\":2,\"surface\":\"elm 0\"}],"
        "\"relations\":[{\"id\":0,\"surface\":\"guild\"}]}\n"
        "{\"s\":0,\"r\":0,\"o\":1}\n"
        "{\"s\":\"ash 1\",\"r\":\"guild\",\"o\":\"elm 0\"}\n");
    KnowledgeGraph g = ingest_triples(path);
    CHECK(g.entities().size() == 3);
    CHECK(g.triples().size() == 2);
    CHECK(g.has_triple({1, 0, 2}));
    CHECK(g.relation(0).templates.size() == 2);  // default templates synthesized
}

TEST_CASE("ingest_triples without header auto-registers surfaces") {
    const char* path = "ingest_auto.jsonl";
    write_text_file(path,
        "{\"s\":\"oak 0\",\"r\":\"keeper\",\"o\":\"oak 1\"}\n"
        "{\"s\":\"oak 1\",\"r\":\"keeper\",\"o\":\"oak 0\"}\n");
    KnowledgeGraph g = ingest_triples(path);
    CHECK(g.entities().size() == 2);
    CHECK(g.relations().size() == 1);
    CHECK(g.triples().size() == 2);
}

TEST_CASE("ingest_triples reports malformed lines and dangling references") {
    write_text_file("ingest_bad1.jsonl", "{\"s\":0,\"r\":0\n");
    try {
        ingest_triples("ingest_bad1.jsonl");
        FAIL("expected IoError");
    } catch (const IoError& ex) {
        CHECK(std::string(ex.what()).find("line 1") != std::string::npos);
    }

    write_text_file("ingest_bad2.jsonl",
        "{\"format\":\"triples/1\",\"entities\":[{\"id\":0,\"surface\":\"a 0\"}],"
        "\"relations\":[{\"id\":0,\"surface\":\"rr\"}]}\n"
        "{\"s\":0,\"r\":0,\"o\":5}\n");
    try {
        ingest_triples("ingest_bad2.jsonl");
        FAIL("expected IoError");
    } catch (const IoError& ex) {
        const std::string msg = ex.what();
        CHECK(msg.find("line 2") != std::string::npos);
        CHECK(msg.find("dangling") != std::string::npos);
    }

    write_text_file("ingest_bad3.jsonl",
        "{\"s\":\"x 0\",\"r\":\"q\",\"o\":\"x 1\"}\n"
        "{\"s\":\"x 0\",\"r\":\"q\",\"o\":\"x 1\"}\n");
    CHECK_THROWS_AS(ingest_triples("ingest_bad3.jsonl"), IoError);  // duplicate triple
}

TEST_CASE("graph json round trip is byte-identical") {
    WorldSpec spec;
    spec.entities = 12;
    spec.relations = 4;
    spec.triples_per_entity = 2;
    spec.min_two_hop_fraction = 0.0;
    KnowledgeGraph g = generate_world(spec, 3);
    KnowledgeGraph back = KnowledgeGraph::from_json(g.to_json());
    CHECK(back.to_json() == g.to_json());
}
