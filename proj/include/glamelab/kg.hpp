#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "glamelab/util.hpp"

namespace glame::kg {

struct Triple {
    int s = -1;
    int r = -1;
    int o = -1;
    auto operator<=>(const Triple&) const = default;
};

struct Entity {
    int id = -1;
    std::string surface;
};

// Prompt templates contain exactly one "{s}" slot; the object is always the
// continuation, so a rendered template is a prompt prefix.
struct Relation {
    int id = -1;
    std::string surface;
    std::vector<std::string> templates;    // >= 2
    std::vector<std::string> paraphrases;  // >= 1
    bool functional = true;
};

class KnowledgeGraph {
public:
    KnowledgeGraph() = default;
    KnowledgeGraph(std::vector<Entity> entities, std::vector<Relation> relations,
                   std::vector<Triple> triples);

    const std::vector<Entity>& entities() const { return entities_; }
    const std::vector<Relation>& relations() const { return relations_; }
    const std::vector<Triple>& triples() const { return triples_; }

    const Entity& entity(int id) const;
    const Relation& relation(int id) const;
    bool has_triple(const Triple& t) const;
    const std::vector<Triple>& out_edges(int entity_id) const;

    // Count of triples per relation id; the sort key for prioritization.
    std::vector<int> relation_frequencies() const;

    std::string to_json() const;
    static KnowledgeGraph from_json(const std::string& text);

private:
    void validate() const;
    std::vector<Entity> entities_;
    std::vector<Relation> relations_;
    std::vector<Triple> triples_;                 // sorted, unique
    std::vector<std::vector<Triple>> out_edges_;  // by subject id
};

// The unit of editing: (s, r, o) -> (s, r, o*), with the rendered prompt.
struct EditRequest {
    int s = -1;
    int r = -1;
    int o = -1;
    int o_star = -1;
    std::string prompt;
};

struct SubEdge {
    int h = -1;
    int r = -1;
    int t = -1;
    int depth = 0;  // BFS depth of the tail; the edited edge has depth 0
    auto operator<=>(const SubEdge&) const = default;
};

// The order-n, width-m subgraph of new associations rooted at the edited
// subject through o*.
struct Subgraph {
    int root_subject = -1;
    int o_star = -1;
    int order_n = 0;
    int width_m = 1;
    std::vector<SubEdge> edges;          // first edge is always (s, r, o*)
    std::map<int, int> node_depth;       // entity id -> depth

    std::vector<int> nodes() const;      // ascending ids
    std::vector<int> relation_ids() const;
    std::string to_json() const;
    static Subgraph from_json(const std::string& text);
};

struct WorldSpec {
    int entities = 0;
    int relations = 0;
    int triples_per_entity = 0;
    double min_two_hop_fraction = 0.8;  // audited after generation
};

struct CorpusOptions {
    int repetitions = 1;
    // Two-hop chain statements teach the compositional question format; the
    // fraction selects a deterministic subset of all chains.
    double multihop_fraction = 1.0;
    int max_hops = 2;
    // Also render each prompt with the subject reduced to its final (unique)
    // token. These alias sentences force object lookups through the subject's
    // last-token state instead of whole-prompt memorization.
    double subject_alias_fraction = 1.0;
    // Prepend a short random word burst to this fraction of sentences. Facts
    // then recur at varying positions and contexts, which pushes the model to
    // enrich entities at their own tokens rather than memorize prompt shapes;
    // it also mirrors the random prefixes used during editing.
    double prefix_fraction = 0.5;
    int prefix_min_words = 2;
    int prefix_max_words = 8;
};

KnowledgeGraph generate_world(const WorldSpec& spec, uint64_t seed);

std::vector<std::string> render_corpus(const KnowledgeGraph& g, const CorpusOptions& opts,
                                       uint64_t seed);

// JSON-lines triples, optional header record with surface/template tables.
KnowledgeGraph ingest_triples(const std::string& path);

// Edges sorted ascending by global relation frequency in g (rarer first),
// ties by (relation id, tail id).
std::vector<Triple> prioritize_relations(const KnowledgeGraph& g, std::vector<Triple> candidates);

Subgraph build_subgraph(const KnowledgeGraph& g, const EditRequest& e, int n, int m,
                        const std::set<int>& leak_filter);

KnowledgeGraph apply_edit_to_graph(const KnowledgeGraph& g, const EditRequest& e);

void validate_edit(const KnowledgeGraph& g, const EditRequest& e);
EditRequest make_edit_request(const KnowledgeGraph& g, int s, int r, int o_star,
                              int template_idx = 0);

// Template rendering. Throws ConfigError when the template does not contain
// exactly one "{s}" slot.
std::string render_template(const std::string& tmpl, const std::string& subject_surface);
std::string render_prompt(const KnowledgeGraph& g, int subject, int relation, int template_idx);
std::string render_paraphrase(const KnowledgeGraph& g, int subject, int relation, int idx);
// "the <r_k> of ... the <r_1> of <subject> is" for a hop chain r_1 .. r_k.
std::string render_chain_prompt(const KnowledgeGraph& g, int subject,
                                const std::vector<int>& relation_chain);

}  // namespace glame::kg
