#pragma once

#include <set>
#include <string>
#include <vector>

#include "glamelab/kg.hpp"
#include "glamelab/model.hpp"

namespace glame::eval {

struct NeighborhoodProbe {
    std::string prompt;
    int subject = -1;
    int object = -1;  // that subject's true object, which must stay preferred
    std::string object_surface;
};

struct PortabilityQuestion {
    int hops = 2;
    std::string question;
    int answer = -1;
    std::string answer_surface;
    std::vector<kg::Triple> chain;  // recalled relations, valid in the post-edit graph
};

// Cases are self-contained: every prompt and gold continuation is carried as
// text, so scoring needs only a model.
struct EvalCase {
    kg::EditRequest edit;
    std::string o_surface;
    std::string o_star_surface;
    std::vector<std::string> paraphrase_prompts;
    std::vector<NeighborhoodProbe> neighborhood;
    std::vector<PortabilityQuestion> portability;
    std::set<int> leak;  // gold answers; exported to the subgraph builder
};

struct Scores {
    double efficacy = 0.0;
    double paraphrase = 0.0;
    double neighborhood = 0.0;
    double portability = 0.0;
    double editing = 0.0;
    bool zero_component = false;  // harmonic mean undefined, reported as 0
};

struct CaseSpec {
    int paraphrases = 1;
    int neighborhood_prompts = 3;
    std::vector<int> hops = {2};
    int questions_per_hop = 1;
};

struct PortabilityOptions {
    double threshold = 90.0;  // partial-ratio scale 0..100
    bool exact_match = false;
    int max_new = 6;
};

// Deterministically samples counterfactual edit requests with distinct
// (subject, relation) sites; o* always has outgoing edges so multi-hop
// questions exist.
std::vector<kg::EditRequest> sample_edits(const kg::KnowledgeGraph& g, int count, uint64_t seed);

// Builds one evaluation case per edit against that edit's post-edit world.
// Cases that cannot satisfy the spec (no neighborhood subject, no chain) are
// skipped with a warning.
std::vector<EvalCase> make_cases(const kg::KnowledgeGraph& g,
                                 const std::vector<kg::EditRequest>& edits, const CaseSpec& spec,
                                 uint64_t seed, std::vector<std::string>* warnings = nullptr);

// Probability-comparison metrics (percentages over cases/prompts).
double efficacy_score(const lm::Model& model, const std::vector<EvalCase>& cases);
double paraphrase_score(const lm::Model& model, const std::vector<EvalCase>& cases);
double neighborhood_score(const lm::Model& model, const std::vector<EvalCase>& cases);
double portability_score(const lm::Model& model, const std::vector<EvalCase>& cases,
                         const PortabilityOptions& opts);

// Harmonic mean of the four metrics; any zero component flags the score as 0.
Scores editing_score(double efficacy, double paraphrase, double neighborhood, double portability);

struct CaseScores {
    double efficacy = 0.0;
    double paraphrase = 0.0;
    double neighborhood = 0.0;
    double portability = 0.0;
};

// Per-case scoring against the model edited for that case.
CaseScores score_case(const lm::Model& model, const EvalCase& c, const PortabilityOptions& opts);

Scores aggregate_case_scores(const std::vector<CaseScores>& per_case);

// JSON-lines case file and score reports.
void save_cases(const std::string& path, const std::vector<EvalCase>& cases);
std::vector<EvalCase> load_cases(const std::string& path);
std::string scores_json(const Scores& s, const std::vector<CaseScores>& per_case);
std::string scores_csv(const Scores& s, const std::vector<CaseScores>& per_case);

}  // namespace glame::eval
