#include "glamelab/pipeline.hpp"

#include <atomic>
#include <mutex>
#include <thread>

namespace glame::pipeline {

std::vector<CaseRun> run_cases(const lm::Model& base, const kg::KnowledgeGraph& g,
                               const std::vector<eval::EvalCase>& cases,
                               const editor::CovarianceCache& cache, const editor::EditConfig& config,
                               const RunOptions& opts) {
    std::vector<CaseRun> runs(cases.size());
    std::atomic<size_t> next{0};
    std::mutex done_mutex;
    std::exception_ptr failure;
    std::mutex failure_mutex;

    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= cases.size()) return;
            try {
                const eval::EvalCase& c = cases[i];
                editor::EditConfig cfg = config;
                cfg.seed = config.seed + static_cast<uint64_t>(i);
                auto [patched, sol] = editor::edit(base, g, c.edit, cache, cfg, c.leak);
                CaseRun run;
                run.scores = eval::score_case(patched, c, opts.portability);
                run.stop_reason = sol.trace.stop_reason;
                run.pre_digest = base.weights_digest();
                run.post_digest = patched.weights_digest();
                if (!opts.drift_sample.empty()) {
                    run.heldout_drift = editor::heldout_key_drift(
                        base, patched, cfg.layer, opts.drift_sample,
                        base.tokenizer().encode(g.entity(c.edit.s).surface), opts.drift_keys,
                        cfg.seed);
                }
                run.solution = std::move(sol);
                if (opts.keep_models) run.post_model = std::move(patched);
                {
                    std::lock_guard<std::mutex> lock(done_mutex);
                    runs[i] = std::move(run);
                    if (opts.on_case_done) opts.on_case_done(i, runs[i]);
                }
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                return;
            }
        }
    };

    const int jobs = std::max(1, opts.jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
    return runs;
}

eval::Scores aggregate(const std::vector<CaseRun>& runs) {
    std::vector<eval::CaseScores> per_case;
    per_case.reserve(runs.size());
    for (const CaseRun& r : runs) per_case.push_back(r.scores);
    return eval::aggregate_case_scores(per_case);
}

}  // namespace glame::pipeline
