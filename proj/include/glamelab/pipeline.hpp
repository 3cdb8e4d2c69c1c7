#pragma once

#include <functional>
#include <optional>

#include "glamelab/editor.hpp"
#include "glamelab/eval.hpp"

namespace glame::pipeline {

struct CaseRun {
    eval::CaseScores scores;
    editor::EditSolution solution;
    std::string stop_reason;
    double heldout_drift = -1.0;
    std::string pre_digest;
    std::string post_digest;
    std::optional<lm::Model> post_model;  // kept only when requested
};

struct RunOptions {
    eval::PortabilityOptions portability;
    int jobs = 1;
    bool keep_models = false;
    // drift audit (criterion-style); skipped when no sequences are given
    std::vector<std::vector<int>> drift_sample;
    int drift_keys = 100;
    std::function<void(size_t, const CaseRun&)> on_case_done;  // progress hook
};

// Edits the base model once per case (the counterfactual protocol) and scores
// each case against its own post-edit model. Case i uses config.seed + i.
std::vector<CaseRun> run_cases(const lm::Model& base, const kg::KnowledgeGraph& g,
                               const std::vector<eval::EvalCase>& cases,
                               const editor::CovarianceCache& cache, const editor::EditConfig& config,
                               const RunOptions& opts);

eval::Scores aggregate(const std::vector<CaseRun>& runs);

}  // namespace glame::pipeline
