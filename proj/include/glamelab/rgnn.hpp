#pragma once

#include <map>

#include "glamelab/kg.hpp"
#include "glamelab/model.hpp"
#include "glamelab/num.hpp"

namespace glame::rgnn {

using num::Tape;
using num::Tensor;

// Initial node/relation representations extracted from the host model: the
// hidden state of the last token of each surface form at layer k.
struct NodeInitTable {
    std::map<int, Tensor> entity_repr;    // node id -> [d_model]
    std::map<int, Tensor> relation_repr;  // relation id -> [d_model]
    int source_layer = -1;
};

// Per-layer square weight pairs; the layer count always equals the subgraph's
// maximum order n. Relation vectors are shared across layers.
struct RgnnParams {
    std::vector<Tensor> w1;  // [d, d] each
    std::vector<Tensor> w2;  // [d, d] each

    int layers() const { return static_cast<int>(w1.size()); }
    // W2 = identity, W1 = zero: the untrained encoder starts as a near
    // pass-through of the root's initial representation.
    static RgnnParams init(int n_layers, int d_model);
    std::vector<Tensor*> trainable(bool include_w1);
};

NodeInitTable init_node_reprs(const lm::Model& model, const kg::KnowledgeGraph& g,
                              const kg::Subgraph& sub, int k);

// n rounds of z_u <- g( sum_{(u,r,t)} W1 (z_t + z_r) + W2 z_u ) over every
// node simultaneously; returns the root's final vector.
Tensor encode(Tape* tape, const kg::Subgraph& sub, const NodeInitTable& init,
              const RgnnParams& params);

// Same propagation with the relation term dropped.
Tensor encode_gnn_ablation(Tape* tape, const kg::Subgraph& sub, const NodeInitTable& init,
                           const RgnnParams& params);

// Neighbors ignored entirely: z <- ReLU(W2 z) applied n times to the root.
Tensor encode_mlp_ablation(Tape* tape, int root, const NodeInitTable& init,
                           const RgnnParams& params);

}  // namespace glame::rgnn
