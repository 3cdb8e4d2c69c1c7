#include "glamelab/kg.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace glame::kg {

using nlohmann::json;

namespace {

const char* kFamilyWords[] = {
    "amber",   "basalt",  "cedar",   "delta",   "ember",   "fjord",   "garnet",  "harbor",
    "iris",    "jade",    "kestrel", "lagoon",  "maple",   "nectar",  "onyx",    "prairie",
    "quartz",  "raven",   "sable",   "tundra",  "umber",   "vertex",  "willow",  "xenon",
    "yarrow",  "zephyr",  "aspen",   "birch",   "coral",   "dune",    "elm",     "fern",
    "grove",   "heron",   "inlet",   "juniper", "krill",   "lotus",   "mesa",    "nimbus",
    "orchid",  "pebble",  "quill",   "reef",    "sparrow", "thicket", "urchin",  "vale",
    "wren",    "yucca",   "zinnia",  "alder",   "bramble", "cove",    "drift",   "eddy",
    "flint",   "glade",   "hollow",  "islet",   "knoll",   "ledge",   "marsh",   "notch",
};
constexpr int kFamilyCount = 64;

const char* kRelationWords[] = {
    "habitat",  "mentor",   "anthem",   "charter", "emblem",   "patron",  "capital", "dialect",
    "mineral",  "cuisine",  "climate",  "folklore", "harvest", "industry", "journal", "keeper",
    "landmark", "motto",    "beacon",   "oracle",  "pennant",  "quarry",  "regent",  "steward",
    "totem",    "uniform",  "vessel",   "warden",  "zenith",   "archive", "census",  "domain",
    "export",   "festival", "guild",    "herald",  "insignia", "jubilee", "kinship", "league",
    "market",   "network",  "outpost",  "parish",  "quorum",   "ritual",  "sanctum", "tribune",
};
constexpr int kRelationCount = 48;

std::string family_word(int k) {
    if (k < kFamilyCount) return kFamilyWords[k];
    // combinatorial fallback keeps each family a single token
    return std::string(kFamilyWords[k % kFamilyCount]) + kFamilyWords[(k / kFamilyCount) % kFamilyCount];
}

std::string relation_word(int k) {
    if (k < kRelationCount) return kRelationWords[k];
    return std::string(kRelationWords[k % kRelationCount]) +
           kRelationWords[(k / kRelationCount) % kRelationCount];
}

json relation_to_json(const Relation& r) {
    return json{{"id", r.id},
                {"surface", r.surface},
                {"templates", r.templates},
                {"paraphrases", r.paraphrases},
                {"functional", r.functional}};
}

Relation relation_from_json(const json& j) {
    Relation r;
    r.id = j.at("id").get<int>();
    r.surface = j.at("surface").get<std::string>();
    r.templates = j.at("templates").get<std::vector<std::string>>();
    r.paraphrases = j.at("paraphrases").get<std::vector<std::string>>();
    r.functional = j.value("functional", true);
    return r;
}

std::vector<std::string> default_templates(const std::string& rel_surface) {
    return {"the " + rel_surface + " of {s} is", "{s} has " + rel_surface};
}

std::vector<std::string> default_paraphrases(const std::string& rel_surface) {
    return {"for {s} the " + rel_surface + " is"};
}

}  // namespace

// ---- KnowledgeGraph ----------------------------------------------------------

KnowledgeGraph::KnowledgeGraph(std::vector<Entity> entities, std::vector<Relation> relations,
                               std::vector<Triple> triples)
    : entities_(std::move(entities)), relations_(std::move(relations)), triples_(std::move(triples)) {
    std::sort(triples_.begin(), triples_.end());
    validate();
    out_edges_.assign(entities_.size(), {});
    for (const Triple& t : triples_) out_edges_[static_cast<size_t>(t.s)].push_back(t);
}

void KnowledgeGraph::validate() const {
    for (size_t i = 0; i < entities_.size(); ++i) {
        if (entities_[i].id != static_cast<int>(i))
            throw ConfigError("entity ids must be dense and ordered");
        if (entities_[i].surface.empty()) throw ConfigError("entity with empty surface form");
    }
    for (size_t i = 0; i < relations_.size(); ++i) {
        const Relation& r = relations_[i];
        if (r.id != static_cast<int>(i)) throw ConfigError("relation ids must be dense and ordered");
        if (r.templates.size() < 2)
            throw ConfigError("relation '" + r.surface + "' needs at least 2 prompt templates");
        if (r.paraphrases.empty())
            throw ConfigError("relation '" + r.surface + "' needs at least 1 paraphrase template");
        for (const std::string& t : r.templates) render_template(t, "x");
        for (const std::string& t : r.paraphrases) render_template(t, "x");
    }
    std::map<std::pair<int, int>, int> functional_seen;
    for (size_t i = 0; i < triples_.size(); ++i) {
        const Triple& t = triples_[i];
        if (i > 0 && t == triples_[i - 1]) throw ConfigError("duplicate triple in graph");
        if (t.s < 0 || t.s >= static_cast<int>(entities_.size()) || t.o < 0 ||
            t.o >= static_cast<int>(entities_.size()))
            throw ConfigError("triple references unknown entity");
        if (t.r < 0 || t.r >= static_cast<int>(relations_.size()))
            throw ConfigError("triple references unknown relation");
        if (relations_[static_cast<size_t>(t.r)].functional) {
            auto key = std::make_pair(t.s, t.r);
            auto [it, inserted] = functional_seen.emplace(key, t.o);
            if (!inserted && it->second != t.o)
                throw ConfigError("functional relation '" +
                                  relations_[static_cast<size_t>(t.r)].surface +
                                  "' has two objects for one subject");
        }
    }
}

const Entity& KnowledgeGraph::entity(int id) const {
    if (id < 0 || id >= static_cast<int>(entities_.size()))
        throw ConfigError("unknown entity id " + std::to_string(id));
    return entities_[static_cast<size_t>(id)];
}

const Relation& KnowledgeGraph::relation(int id) const {
    if (id < 0 || id >= static_cast<int>(relations_.size()))
        throw ConfigError("unknown relation id " + std::to_string(id));
    return relations_[static_cast<size_t>(id)];
}

bool KnowledgeGraph::has_triple(const Triple& t) const {
    return std::binary_search(triples_.begin(), triples_.end(), t);
}

const std::vector<Triple>& KnowledgeGraph::out_edges(int entity_id) const {
    entity(entity_id);
    return out_edges_[static_cast<size_t>(entity_id)];
}

std::vector<int> KnowledgeGraph::relation_frequencies() const {
    std::vector<int> freq(relations_.size(), 0);
    for (const Triple& t : triples_) ++freq[static_cast<size_t>(t.r)];
    return freq;
}

std::string KnowledgeGraph::to_json() const {
    json j;
    j["format"] = "kg/1";
    json ents = json::array();
    for (const Entity& e : entities_) ents.push_back({{"id", e.id}, {"surface", e.surface}});
    json rels = json::array();
    for (const Relation& r : relations_) rels.push_back(relation_to_json(r));
    json trips = json::array();
    for (const Triple& t : triples_) trips.push_back({{"s", t.s}, {"r", t.r}, {"o", t.o}});
    j["entities"] = std::move(ents);
    j["relations"] = std::move(rels);
    j["triples"] = std::move(trips);
    return j.dump(2);
}

KnowledgeGraph KnowledgeGraph::from_json(const std::string& text) {
    json j = json::parse(text);
    if (j.value("format", "") != "kg/1") throw IoError("unsupported graph format");
    std::vector<Entity> ents;
    for (const json& e : j.at("entities"))
        ents.push_back(Entity{e.at("id").get<int>(), e.at("surface").get<std::string>()});
    std::vector<Relation> rels;
    for (const json& r : j.at("relations")) rels.push_back(relation_from_json(r));
    std::vector<Triple> trips;
    for (const json& t : j.at("triples"))
        trips.push_back(Triple{t.at("s").get<int>(), t.at("r").get<int>(), t.at("o").get<int>()});
    return KnowledgeGraph(std::move(ents), std::move(rels), std::move(trips));
}

// ---- Subgraph ------------------------------------------------------------------

std::vector<int> Subgraph::nodes() const {
    std::vector<int> out;
    out.reserve(node_depth.size());
    for (const auto& [id, depth] : node_depth) out.push_back(id);
    return out;
}

std::vector<int> Subgraph::relation_ids() const {
    std::set<int> rels;
    for (const SubEdge& e : edges) rels.insert(e.r);
    return std::vector<int>(rels.begin(), rels.end());
}

std::string Subgraph::to_json() const {
    json j;
    j["format"] = "subgraph/1";
    j["root"] = root_subject;
    j["o_star"] = o_star;
    j["n"] = order_n;
    j["m"] = width_m;
    json es = json::array();
    for (const SubEdge& e : edges)
        es.push_back({{"h", e.h}, {"r", e.r}, {"t", e.t}, {"depth", e.depth}});
    j["edges"] = std::move(es);
    return j.dump(2);
}

Subgraph Subgraph::from_json(const std::string& text) {
    json j = json::parse(text);
    if (j.value("format", "") != "subgraph/1") throw IoError("unsupported subgraph format");
    Subgraph sub;
    sub.root_subject = j.at("root").get<int>();
    sub.o_star = j.at("o_star").get<int>();
    sub.order_n = j.at("n").get<int>();
    sub.width_m = j.at("m").get<int>();
    for (const json& e : j.at("edges"))
        sub.edges.push_back(SubEdge{e.at("h").get<int>(), e.at("r").get<int>(), e.at("t").get<int>(),
                                    e.at("depth").get<int>()});
    sub.node_depth[sub.root_subject] = 0;
    for (const SubEdge& e : sub.edges) {
        if (!sub.node_depth.count(e.t)) sub.node_depth[e.t] = e.depth;
        if (!sub.node_depth.count(e.h)) sub.node_depth[e.h] = std::max(0, e.depth - 1);
    }
    return sub;
}

// ---- world generation -------------------------------------------------------------

KnowledgeGraph generate_world(const WorldSpec& spec, uint64_t seed) {
    if (spec.entities <= 0 || spec.relations <= 0 || spec.triples_per_entity <= 0)
        throw ConfigError("world spec counts must be positive");
    if (spec.triples_per_entity > spec.relations)
        throw ConfigError("triples_per_entity exceeds relation count; functional relations "
                          "cannot host more than one triple per subject");
    if (spec.entities < 2) throw ConfigError("need at least 2 entities for non-self objects");

    Rng rng(seed);
    constexpr int kIndicesPerFamily = 10;
    std::vector<Entity> ents;
    ents.reserve(static_cast<size_t>(spec.entities));
    for (int i = 0; i < spec.entities; ++i) {
        // family word + an entity-unique index token: the last token of a
        // subject span identifies the entity, which is what last-subject-token
        // key extraction leans on
        const std::string fam = family_word(i / kIndicesPerFamily);
        const std::string idx = "e" + std::to_string(i);
        ents.push_back(Entity{i, fam + " " + idx});
    }

    std::vector<Relation> rels;
    rels.reserve(static_cast<size_t>(spec.relations));
    for (int i = 0; i < spec.relations; ++i) {
        Relation r;
        r.id = i;
        r.surface = relation_word(i);
        r.templates = default_templates(r.surface);
        r.paraphrases = default_paraphrases(r.surface);
        r.functional = true;
        rels.push_back(std::move(r));
    }

    std::vector<Triple> trips;
    trips.reserve(static_cast<size_t>(spec.entities) * spec.triples_per_entity);
    std::vector<int> rel_ids(static_cast<size_t>(spec.relations));
    for (int i = 0; i < spec.relations; ++i) rel_ids[static_cast<size_t>(i)] = i;
    for (int s = 0; s < spec.entities; ++s) {
        std::vector<int> pool = rel_ids;
        rng.shuffle(pool);
        for (int k = 0; k < spec.triples_per_entity; ++k) {
            int o = static_cast<int>(rng.below(static_cast<uint64_t>(spec.entities - 1)));
            if (o >= s) ++o;  // skip self
            trips.push_back(Triple{s, pool[static_cast<size_t>(k)], o});
        }
    }

    KnowledgeGraph g(std::move(ents), std::move(rels), std::move(trips));

    // two-hop audit: fraction of entities with at least one 2-hop out path
    int with_two_hop = 0;
    for (int s = 0; s < spec.entities; ++s) {
        bool found = false;
        for (const Triple& t : g.out_edges(s)) {
            if (!g.out_edges(t.o).empty()) {
                found = true;
                break;
            }
        }
        if (found) ++with_two_hop;
    }
    const double frac = static_cast<double>(with_two_hop) / spec.entities;
    if (frac < spec.min_two_hop_fraction)
        throw ConfigError("generated world misses the two-hop coverage target");
    return g;
}

// ---- corpus -----------------------------------------------------------------------

std::vector<std::string> render_corpus(const KnowledgeGraph& g, const CorpusOptions& opts,
                                       uint64_t seed) {
    if (opts.repetitions < 1) throw ConfigError("repetitions must be >= 1");
    if (opts.max_hops < 1 || opts.max_hops > 4) throw ConfigError("max_hops must be in [1,4]");
    std::vector<std::string> sentences;
    Rng alias_pick(seed ^ 0x616c696173ULL);
    for (const Triple& t : g.triples()) {
        const Relation& rel = g.relation(t.r);
        const std::string& subj = g.entity(t.s).surface;
        const std::string& obj = g.entity(t.o).surface;
        const std::vector<std::string> subj_words = split_ws(subj);
        const std::string subj_alias = subj_words.back();
        std::vector<std::string> all = rel.templates;
        all.insert(all.end(), rel.paraphrases.begin(), rel.paraphrases.end());
        for (const std::string& tmpl : all) {
            const std::string sentence = render_template(tmpl, subj) + " " + obj;
            for (int rep = 0; rep < opts.repetitions; ++rep) sentences.push_back(sentence);
            if (subj_words.size() > 1 && alias_pick.uniform() <= opts.subject_alias_fraction) {
                const std::string alias_sentence = render_template(tmpl, subj_alias) + " " + obj;
                for (int rep = 0; rep < opts.repetitions; ++rep) sentences.push_back(alias_sentence);
            }
        }
    }

    if (opts.max_hops >= 2 && opts.multihop_fraction > 0.0) {
        Rng pick(seed ^ 0x9e3779b9ULL);
        // chains enumerated depth-first up to max_hops in deterministic order
        struct Frame {
            int tail;
            std::vector<int> rel_chain;
            int subject;
        };
        for (const Triple& first : g.triples()) {
            std::vector<Frame> stack{Frame{first.o, {first.r}, first.s}};
            while (!stack.empty()) {
                Frame f = stack.back();
                stack.pop_back();
                if (static_cast<int>(f.rel_chain.size()) >= 2) {
                    if (pick.uniform() <= opts.multihop_fraction) {
                        sentences.push_back(render_chain_prompt(g, f.subject, f.rel_chain) + " " +
                                            g.entity(f.tail).surface);
                    }
                }
                if (static_cast<int>(f.rel_chain.size()) < opts.max_hops) {
                    for (const Triple& next : g.out_edges(f.tail)) {
                        Frame nf = f;
                        nf.tail = next.o;
                        nf.rel_chain.push_back(next.r);
                        stack.push_back(nf);
                    }
                }
            }
        }
    }

    if (opts.prefix_fraction > 0.0 && sentences.size() > 1) {
        if (opts.prefix_min_words < 1 || opts.prefix_max_words < opts.prefix_min_words)
            throw ConfigError("prefix word range invalid");
        // prefixes are fragments of other sentences: ordinary language the
        // model can predict, but facts now recur at varied positions
        const std::vector<std::string> pool = sentences;
        Rng prng(seed ^ 0x707265666978ULL);
        for (std::string& s : sentences) {
            if (prng.uniform() > opts.prefix_fraction) continue;
            const std::vector<std::string> donor = split_ws(pool[prng.below(pool.size())]);
            const int len = std::min<int>(prng.range(opts.prefix_min_words, opts.prefix_max_words),
                                          static_cast<int>(donor.size()));
            std::string prefix;
            for (int i = 0; i < len; ++i) {
                if (i) prefix += ' ';
                prefix += donor[static_cast<size_t>(i)];
            }
            s = prefix + " " + s;
        }
    }

    Rng rng(seed);
    rng.shuffle(sentences);
    return sentences;
}

// ---- ingestion --------------------------------------------------------------------

KnowledgeGraph ingest_triples(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open triple file: " + path);

    std::vector<Entity> ents;
    std::vector<Relation> rels;
    std::map<std::string, int> ent_by_surface;
    std::map<std::string, int> rel_by_surface;
    bool header_present = false;
    std::vector<Triple> trips;
    std::set<Triple> seen;

    auto resolve_entity = [&](const json& v, int line) -> int {
        if (v.is_number_integer()) {
            int id = v.get<int>();
            if (id < 0 || id >= static_cast<int>(ents.size()))
                throw IoError("line " + std::to_string(line) + ": dangling entity id " +
                              std::to_string(id));
            return id;
        }
        if (v.is_string()) {
            const std::string s = v.get<std::string>();
            auto it = ent_by_surface.find(s);
            if (it != ent_by_surface.end()) return it->second;
            if (header_present)
                throw IoError("line " + std::to_string(line) + ": dangling entity '" + s + "'");
            int id = static_cast<int>(ents.size());
            ents.push_back(Entity{id, s});
            ent_by_surface[s] = id;
            return id;
        }
        throw IoError("line " + std::to_string(line) + ": entity must be id or surface string");
    };
    auto resolve_relation = [&](const json& v, int line) -> int {
        if (v.is_number_integer()) {
            int id = v.get<int>();
            if (id < 0 || id >= static_cast<int>(rels.size()))
                throw IoError("line " + std::to_string(line) + ": dangling relation id " +
                              std::to_string(id));
            return id;
        }
        if (v.is_string()) {
            const std::string s = v.get<std::string>();
            auto it = rel_by_surface.find(s);
            if (it != rel_by_surface.end()) return it->second;
            if (header_present)
                throw IoError("line " + std::to_string(line) + ": dangling relation '" + s + "'");
            int id = static_cast<int>(rels.size());
            Relation r;
            r.id = id;
            r.surface = s;
            r.templates = default_templates(s);
            r.paraphrases = default_paraphrases(s);
            rels.push_back(std::move(r));
            rel_by_surface[s] = id;
            return id;
        }
        throw IoError("line " + std::to_string(line) + ": relation must be id or surface string");
    };

    std::string linebuf;
    int line = 0;
    while (std::getline(in, linebuf)) {
        ++line;
        if (linebuf.empty() || linebuf.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(linebuf);
        } catch (const json::exception& ex) {
            throw IoError("line " + std::to_string(line) + ": malformed JSON (" +
                          std::string(ex.what()) + ")");
        }
        if (j.contains("format")) {
            if (line != 1) throw IoError("line " + std::to_string(line) + ": header must be first");
            if (j.at("format").get<std::string>() != "triples/1")
                throw IoError("unsupported triple file format");
            header_present = true;
            if (j.contains("entities")) {
                for (const json& e : j.at("entities")) {
                    Entity ent{e.at("id").get<int>(), e.at("surface").get<std::string>()};
                    if (ent.id != static_cast<int>(ents.size()))
                        throw IoError("header entity ids must be dense and ordered");
                    ent_by_surface[ent.surface] = ent.id;
                    ents.push_back(std::move(ent));
                }
            }
            if (j.contains("relations")) {
                for (const json& r : j.at("relations")) {
                    Relation rel;
                    rel.id = r.at("id").get<int>();
                    rel.surface = r.at("surface").get<std::string>();
                    rel.templates = r.contains("templates")
                                        ? r.at("templates").get<std::vector<std::string>>()
                                        : default_templates(rel.surface);
                    rel.paraphrases = r.contains("paraphrases")
                                          ? r.at("paraphrases").get<std::vector<std::string>>()
                                          : default_paraphrases(rel.surface);
                    rel.functional = r.value("functional", true);
                    if (rel.id != static_cast<int>(rels.size()))
                        throw IoError("header relation ids must be dense and ordered");
                    rel_by_surface[rel.surface] = rel.id;
                    rels.push_back(std::move(rel));
                }
            }
            continue;
        }
        if (!j.contains("s") || !j.contains("r") || !j.contains("o"))
            throw IoError("line " + std::to_string(line) + ": triple needs s, r, o fields");
        Triple t;
        t.s = resolve_entity(j.at("s"), line);
        t.r = resolve_relation(j.at("r"), line);
        t.o = resolve_entity(j.at("o"), line);
        if (!seen.insert(t).second)
            throw IoError("line " + std::to_string(line) + ": duplicate triple");
        trips.push_back(t);
    }
    if (trips.empty()) throw IoError("triple file contains no triples: " + path);
    try {
        return KnowledgeGraph(std::move(ents), std::move(rels), std::move(trips));
    } catch (const ConfigError& ex) {
        throw IoError(std::string("triple file invalid: ") + ex.what());
    }
}

// ---- prioritization and subgraph construction ----------------------------------------

std::vector<Triple> prioritize_relations(const KnowledgeGraph& g, std::vector<Triple> candidates) {
    const std::vector<int> freq = g.relation_frequencies();
    std::stable_sort(candidates.begin(), candidates.end(), [&](const Triple& a, const Triple& b) {
        const int fa = freq[static_cast<size_t>(a.r)];
        const int fb = freq[static_cast<size_t>(b.r)];
        if (fa != fb) return fa < fb;  // rarer relation first
        if (a.r != b.r) return a.r < b.r;
        return a.o < b.o;
    });
    return candidates;
}

Subgraph build_subgraph(const KnowledgeGraph& g, const EditRequest& e, int n, int m,
                        const std::set<int>& leak_filter) {
    if (n < 0) throw ConfigError("subgraph order n must be >= 0");
    if (m < 1) throw ConfigError("subgraph width m must be >= 1");
    validate_edit(g, e);

    // Expansion and priorities run over the post-edit view of the world, so the
    // reverted triple (s, r, o) can never re-enter through a cycle.
    const KnowledgeGraph post = apply_edit_to_graph(g, e);

    Subgraph sub;
    sub.root_subject = e.s;
    sub.o_star = e.o_star;
    sub.order_n = n;
    sub.width_m = m;
    sub.edges.push_back(SubEdge{e.s, e.r, e.o_star, 0});  // the edited edge, always present
    sub.node_depth[e.s] = 0;
    sub.node_depth[e.o_star] = 0;

    std::deque<int> frontier{e.o_star};
    while (!frontier.empty()) {
        const int u = frontier.front();
        frontier.pop_front();
        const int depth = sub.node_depth.at(u);
        if (depth >= n) continue;
        int accepted = 0;
        for (const Triple& t : prioritize_relations(post, post.out_edges(u))) {
            if (accepted >= m) break;
            if (leak_filter.count(t.o)) continue;          // answer-leak exclusion
            if (sub.node_depth.count(t.o)) continue;       // each node enters once (BFS tree)
            sub.node_depth[t.o] = depth + 1;
            sub.edges.push_back(SubEdge{u, t.r, t.o, depth + 1});
            frontier.push_back(t.o);
            ++accepted;
        }
    }
    return sub;
}

KnowledgeGraph apply_edit_to_graph(const KnowledgeGraph& g, const EditRequest& e) {
    validate_edit(g, e);
    std::vector<Triple> trips;
    trips.reserve(g.triples().size());
    for (const Triple& t : g.triples())
        if (!(t.s == e.s && t.r == e.r && t.o == e.o)) trips.push_back(t);
    trips.push_back(Triple{e.s, e.r, e.o_star});
    return KnowledgeGraph(g.entities(), g.relations(), std::move(trips));
}

void validate_edit(const KnowledgeGraph& g, const EditRequest& e) {
    g.entity(e.s);
    g.entity(e.o);
    g.entity(e.o_star);  // o* must exist in the entity table
    g.relation(e.r);
    if (!g.has_triple(Triple{e.s, e.r, e.o}))
        throw ConfigError("edit request: (s, r, o) not present in graph");
    if (e.o_star == e.o) throw ConfigError("edit request: o* must differ from o");
}

EditRequest make_edit_request(const KnowledgeGraph& g, int s, int r, int o_star, int template_idx) {
    const auto& edges = g.out_edges(s);
    int o = -1;
    for (const Triple& t : edges)
        if (t.r == r) o = t.o;
    if (o < 0) throw ConfigError("make_edit_request: subject has no triple with that relation");
    EditRequest e{s, r, o, o_star, render_prompt(g, s, r, template_idx)};
    validate_edit(g, e);
    return e;
}

// ---- templates -------------------------------------------------------------------

std::string render_template(const std::string& tmpl, const std::string& subject_surface) {
    const std::string slot = "{s}";
    const size_t first = tmpl.find(slot);
    if (first == std::string::npos)
        throw ConfigError("template lacks a {s} subject slot: '" + tmpl + "'");
    if (tmpl.find(slot, first + 1) != std::string::npos)
        throw ConfigError("template has more than one {s} slot: '" + tmpl + "'");
    std::string out = tmpl;
    out.replace(first, slot.size(), subject_surface);
    return out;
}

std::string render_prompt(const KnowledgeGraph& g, int subject, int relation, int template_idx) {
    const Relation& r = g.relation(relation);
    if (template_idx < 0 || template_idx >= static_cast<int>(r.templates.size()))
        throw ConfigError("template index out of range for relation '" + r.surface + "'");
    return render_template(r.templates[static_cast<size_t>(template_idx)], g.entity(subject).surface);
}

std::string render_paraphrase(const KnowledgeGraph& g, int subject, int relation, int idx) {
    const Relation& r = g.relation(relation);
    if (idx < 0 || idx >= static_cast<int>(r.paraphrases.size()))
        throw ConfigError("paraphrase index out of range for relation '" + r.surface + "'");
    return render_template(r.paraphrases[static_cast<size_t>(idx)], g.entity(subject).surface);
}

std::string render_chain_prompt(const KnowledgeGraph& g, int subject,
                                const std::vector<int>& relation_chain) {
    if (relation_chain.empty()) throw ConfigError("empty relation chain");
    std::string out = g.entity(subject).surface;
    for (int r : relation_chain) out = "the " + g.relation(r).surface + " of " + out;
    return out + " is";
}

}  // namespace glame::kg
