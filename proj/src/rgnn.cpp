#include "glamelab/rgnn.hpp"

#include <algorithm>

namespace glame::rgnn {

using namespace glame::num;

RgnnParams RgnnParams::init(int n_layers, int d_model) {
    if (n_layers < 0) throw ConfigError("rgnn layer count must be >= 0");
    RgnnParams p;
    for (int l = 0; l < n_layers; ++l) {
        p.w1.push_back(Tensor::zeros({d_model, d_model}));
        p.w2.push_back(Tensor::identity(d_model));
    }
    return p;
}

std::vector<Tensor*> RgnnParams::trainable(bool include_w1) {
    std::vector<Tensor*> out;
    for (size_t l = 0; l < w1.size(); ++l) {
        if (include_w1) out.push_back(&w1[l]);
        out.push_back(&w2[l]);
    }
    return out;
}

NodeInitTable init_node_reprs(const lm::Model& model, const kg::KnowledgeGraph& g,
                              const kg::Subgraph& sub, int k) {
    NodeInitTable table;
    table.source_layer = k;
    const lm::Tokenizer& tok = model.tokenizer();
    for (int node : sub.nodes()) {
        const std::string& surface = g.entity(node).surface;
        if (surface.empty()) throw ConfigError("entity without surface form: " + std::to_string(node));
        table.entity_repr.emplace(node, model.hidden_at_layer(tok.encode(surface), k));
    }
    for (int rel : sub.relation_ids()) {
        const std::string& surface = g.relation(rel).surface;
        if (surface.empty()) throw ConfigError("relation without surface form: " + std::to_string(rel));
        table.relation_repr.emplace(rel, model.hidden_at_layer(tok.encode(surface), k));
    }
    return table;
}

namespace {

// Stacks entity vectors into [N, d] in ascending node-id order.
Tensor stack_nodes(const kg::Subgraph& sub, const NodeInitTable& init, std::map<int, int>& row_of) {
    const std::vector<int> nodes = sub.nodes();
    if (nodes.empty()) throw ConfigError("empty subgraph");
    std::vector<float> data;
    int d = -1;
    for (size_t i = 0; i < nodes.size(); ++i) {
        auto it = init.entity_repr.find(nodes[i]);
        if (it == init.entity_repr.end())
            throw ConfigError("node missing from init table: " + std::to_string(nodes[i]));
        if (d < 0) d = it->second.dim(0);
        data.insert(data.end(), it->second.values().begin(), it->second.values().end());
        row_of[nodes[i]] = static_cast<int>(i);
    }
    return Tensor({static_cast<int>(nodes.size()), d}, std::move(data));
}

Tensor encode_impl(Tape* tape, const kg::Subgraph& sub, const NodeInitTable& init,
                   const RgnnParams& params, bool use_relations) {
    if (params.layers() != sub.order_n)
        throw ConfigError("rgnn layer count " + std::to_string(params.layers()) +
                          " must equal subgraph order " + std::to_string(sub.order_n));
    if (params.layers() < 1) throw ConfigError("encode requires subgraph order n >= 1");

    std::map<int, int> row_of;
    Tensor z = stack_nodes(sub, init, row_of);
    const int n_nodes = z.dim(0);

    // canonical edge order makes the sum aggregation independent of how the
    // neighbor list was arranged (bit-identical under permutation)
    std::vector<kg::SubEdge> edges = sub.edges;
    std::sort(edges.begin(), edges.end());

    std::vector<int> heads, tails;
    std::vector<float> rel_rows;
    const int d = z.dim(1);
    for (const kg::SubEdge& e : edges) {
        heads.push_back(row_of.at(e.h));
        tails.push_back(row_of.at(e.t));
        if (use_relations) {
            auto it = init.relation_repr.find(e.r);
            if (it == init.relation_repr.end())
                throw ConfigError("relation missing from init table: " + std::to_string(e.r));
            rel_rows.insert(rel_rows.end(), it->second.values().begin(), it->second.values().end());
        }
    }
    Tensor zr_edges;  // [E, d], constant across layers
    if (use_relations)
        zr_edges = Tensor({static_cast<int>(edges.size()), d}, std::move(rel_rows));

    for (int l = 0; l < params.layers(); ++l) {
        Tensor neigh = gather_rows(tape, z, tails);
        if (use_relations) neigh = add(tape, neigh, zr_edges);
        Tensor summed = scatter_add_rows(tape, neigh, heads, n_nodes);
        Tensor msg = matmul_nt(tape, summed, params.w1[static_cast<size_t>(l)]);
        Tensor self = matmul_nt(tape, z, params.w2[static_cast<size_t>(l)]);
        z = relu(tape, add(tape, msg, self));
    }
    return row(tape, z, row_of.at(sub.root_subject));
}

}  // namespace

Tensor encode(Tape* tape, const kg::Subgraph& sub, const NodeInitTable& init,
              const RgnnParams& params) {
    return encode_impl(tape, sub, init, params, true);
}

Tensor encode_gnn_ablation(Tape* tape, const kg::Subgraph& sub, const NodeInitTable& init,
                           const RgnnParams& params) {
    return encode_impl(tape, sub, init, params, false);
}

Tensor encode_mlp_ablation(Tape* tape, int root, const NodeInitTable& init,
                           const RgnnParams& params) {
    auto it = init.entity_repr.find(root);
    if (it == init.entity_repr.end())
        throw ConfigError("root missing from init table: " + std::to_string(root));
    Tensor z = reshape(tape, it->second, {1, it->second.dim(0)});
    for (int l = 0; l < params.layers(); ++l)
        z = relu(tape, matmul_nt(tape, z, params.w2[static_cast<size_t>(l)]));
    return row(tape, z, 0);
}

}  // namespace glame::rgnn
