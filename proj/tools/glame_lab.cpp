// glame_lab: batch experimentation CLI around the editing laboratory.
//
// Stages write a manifest.json (config echo, input digests, duration) into
// their output directory. Exit codes: 0 success, 2 configuration error,
// 3 numerical failure, 4 gate failure.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <set>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "glamelab/editor.hpp"
#include "glamelab/eval.hpp"
#include "glamelab/pipeline.hpp"

using namespace glame;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitGate = 4;

std::string resolve_out(const std::string& path) {
    if (path.empty() || fs::path(path).is_absolute()) return path;
    const char* root = std::getenv("GLAME_LAB_DIR");
    if (!root || !*root) return path;
    return (fs::path(root) / path).string();
}

// Flat JSON config document; explicit flags take precedence over fields.
json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    json j = json::parse(read_text_file(path));
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    return j;
}

template <typename T>
void cfg_or_flag(const json& cfg, const CLI::Option* opt, const char* key, T& var) {
    if (opt->count() == 0 && cfg.contains(key)) var = cfg.at(key).get<T>();
}

struct ManifestWriter {
    json inputs = json::object();
    json config = json::object();
    json outputs = json::object();
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    void input(const std::string& name, const std::string& path) {
        inputs[name] = {{"path", path}, {"digest", digest_file(path)}};
    }
    void input_dir(const std::string& name, const std::string& dir,
                   const std::vector<std::string>& files) {
        json entry = {{"path", dir}};
        for (const std::string& f : files) entry[f] = digest_file(dir + "/" + f);
        inputs[name] = entry;
    }
    void write(const std::string& stage, const std::string& out_dir, uint64_t seed) {
        json j;
        j["format"] = "manifest/1";
        j["stage"] = stage;
        j["seed"] = seed;
        j["config"] = config;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        j["duration_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                               std::chrono::steady_clock::now() - start)
                               .count();
        fs::create_directories(out_dir);
        write_text_file(out_dir + "/run_manifest.json", j.dump(2));
    }
};

std::vector<std::string> load_corpus_file(const std::string& path) {
    json j = json::parse(read_text_file(path));
    if (j.value("format", "") != "corpus/1") throw IoError("unsupported corpus format: " + path);
    return j.at("sentences").get<std::vector<std::string>>();
}

void save_corpus_file(const std::string& path, const std::vector<std::string>& sentences) {
    json j;
    j["format"] = "corpus/1";
    j["sentences"] = sentences;
    write_text_file(path, j.dump());
}

std::vector<std::vector<int>> covariance_sample(const lm::Model& model,
                                                const std::vector<std::string>& sentences,
                                                int sample_count, uint64_t seed) {
    std::vector<std::string> pool = sentences;
    Rng rng(seed ^ 0x636f76ULL);
    rng.shuffle(pool);
    if (sample_count > 0 && sample_count < static_cast<int>(pool.size()))
        pool.resize(static_cast<size_t>(sample_count));
    return lm::tokenize_corpus(model.tokenizer(), pool);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"graph-augmented rank-one model editing laboratory"};
    app.require_subcommand(1);

    // ---- world gen -----------------------------------------------------------
    auto* world = app.add_subcommand("world", "knowledge-world stages");
    world->require_subcommand(1);
    auto* world_gen = world->add_subcommand("gen", "generate a synthetic knowledge graph");
    std::string wg_config, wg_out = "world";
    int wg_entities = 200, wg_relations = 20, wg_tpe = 3;
    double wg_two_hop = 0.8;
    uint64_t wg_seed = 0;
    world_gen->add_option("--config", wg_config, "JSON config file");
    auto* wg_e = world_gen->add_option("--entities", wg_entities);
    auto* wg_r = world_gen->add_option("--relations", wg_relations);
    auto* wg_t = world_gen->add_option("--triples-per-entity", wg_tpe);
    auto* wg_h = world_gen->add_option("--two-hop-min", wg_two_hop);
    auto* wg_s = world_gen->add_option("--seed", wg_seed);
    world_gen->add_option("--out", wg_out, "output directory");

    // ---- corpus render ---------------------------------------------------------
    auto* corpus_cmd = app.add_subcommand("corpus", "corpus stages");
    corpus_cmd->require_subcommand(1);
    auto* corpus_render = corpus_cmd->add_subcommand("render", "render training sentences");
    std::string cr_config, cr_graph, cr_out = "corpus";
    int cr_reps = 1, cr_max_hops = 2;
    double cr_multihop = 0.35, cr_alias = 1.0;
    uint64_t cr_seed = 0;
    corpus_render->add_option("--config", cr_config);
    corpus_render->add_option("--graph", cr_graph)->required();
    auto* cr_r = corpus_render->add_option("--repetitions", cr_reps);
    auto* cr_m = corpus_render->add_option("--multihop", cr_multihop);
    auto* cr_a = corpus_render->add_option("--alias", cr_alias);
    double cr_prefix = 0.5;
    auto* cr_pf = corpus_render->add_option("--prefix-fraction", cr_prefix);
    auto* cr_mh = corpus_render->add_option("--max-hops", cr_max_hops);
    auto* cr_s = corpus_render->add_option("--seed", cr_seed);
    corpus_render->add_option("--out", cr_out);

    // ---- lm train / recall -------------------------------------------------------
    auto* lm_cmd = app.add_subcommand("lm", "host model stages");
    lm_cmd->require_subcommand(1);
    auto* lm_train = lm_cmd->add_subcommand("train", "train the host model");
    std::string lt_config, lt_graph, lt_corpus, lt_out = "ckpt";
    int lt_dmodel = 128, lt_layers = 8, lt_heads = 4, lt_inner = 512, lt_maxseq = 48;
    int lt_steps = 3400, lt_batch = 64, lt_warmup = 150, lt_eval_every = 250;
    float lt_lr = 3e-3f, lt_wd = 0.0f, lt_clip = 1.0f;
    double lt_target = 0.97;
    std::string lt_activation = "gelu";
    uint64_t lt_seed = 0;
    bool lt_quiet = false;
    lm_train->add_option("--config", lt_config);
    lm_train->add_option("--graph", lt_graph)->required();
    lm_train->add_option("--corpus", lt_corpus)->required();
    auto* lt_d = lm_train->add_option("--d-model", lt_dmodel);
    auto* lt_l = lm_train->add_option("--layers", lt_layers);
    auto* lt_h = lm_train->add_option("--heads", lt_heads);
    auto* lt_i = lm_train->add_option("--inner", lt_inner);
    auto* lt_ms = lm_train->add_option("--max-seq", lt_maxseq);
    auto* lt_a = lm_train->add_option("--activation", lt_activation);
    auto* lt_st = lm_train->add_option("--steps", lt_steps);
    auto* lt_b = lm_train->add_option("--batch", lt_batch);
    auto* lt_lr_o = lm_train->add_option("--lr", lt_lr);
    auto* lt_w = lm_train->add_option("--warmup", lt_warmup);
    auto* lt_wd_o = lm_train->add_option("--wd", lt_wd);
    auto* lt_c = lm_train->add_option("--clip", lt_clip);
    auto* lt_tr = lm_train->add_option("--target-recall", lt_target);
    auto* lt_ee = lm_train->add_option("--eval-every", lt_eval_every);
    auto* lt_s = lm_train->add_option("--seed", lt_seed);
    lm_train->add_flag("--quiet", lt_quiet);
    lm_train->add_option("--out", lt_out);

    auto* lm_recall = lm_cmd->add_subcommand("recall", "greedy fact recall of a checkpoint");
    std::string lrc_ckpt, lrc_graph;
    double lrc_min = -1.0;
    lm_recall->add_option("--ckpt", lrc_ckpt)->required();
    lm_recall->add_option("--graph", lrc_graph)->required();
    lm_recall->add_option("--min", lrc_min, "gate: exit 4 when recall is below this");

    // ---- cov estimate --------------------------------------------------------------
    auto* cov_cmd = app.add_subcommand("cov", "covariance cache stages");
    cov_cmd->require_subcommand(1);
    auto* cov_est = cov_cmd->add_subcommand("estimate", "estimate the key second-moment cache");
    std::string ce_config, ce_ckpt, ce_corpus, ce_out = "cov";
    int ce_layer = 2, ce_samples = 1200;
    float ce_ridge = 1e-6f;
    uint64_t ce_seed = 0;
    cov_est->add_option("--config", ce_config);
    cov_est->add_option("--ckpt", ce_ckpt)->required();
    cov_est->add_option("--corpus", ce_corpus)->required();
    auto* ce_l = cov_est->add_option("--layer", ce_layer);
    auto* ce_n = cov_est->add_option("--samples", ce_samples);
    auto* ce_r = cov_est->add_option("--ridge", ce_ridge);
    auto* ce_s = cov_est->add_option("--seed", ce_seed);
    cov_est->add_option("--out", ce_out);

    // ---- cases make -----------------------------------------------------------------
    auto* cases_cmd = app.add_subcommand("cases", "evaluation case stages");
    cases_cmd->require_subcommand(1);
    auto* cases_make = cases_cmd->add_subcommand("make", "sample edits and build eval cases");
    std::string cm_config, cm_graph, cm_out = "cases";
    int cm_count = 50, cm_paraphrases = 1, cm_neighborhood = 3, cm_qph = 1;
    std::vector<int> cm_hops{2};
    uint64_t cm_seed = 0;
    cases_make->add_option("--config", cm_config);
    cases_make->add_option("--graph", cm_graph)->required();
    auto* cm_c = cases_make->add_option("--count", cm_count);
    auto* cm_p = cases_make->add_option("--paraphrases", cm_paraphrases);
    auto* cm_n = cases_make->add_option("--neighborhood", cm_neighborhood);
    auto* cm_h = cases_make->add_option("--hops", cm_hops)->delimiter(',');
    auto* cm_q = cases_make->add_option("--questions-per-hop", cm_qph);
    auto* cm_s = cases_make->add_option("--seed", cm_seed);
    cases_make->add_option("--out", cm_out);

    // ---- edit run ---------------------------------------------------------------------
    auto* edit_cmd = app.add_subcommand("edit", "editing stages");
    edit_cmd->require_subcommand(1);
    auto* edit_run = edit_cmd->add_subcommand("run", "apply each case's edit to the base model");
    std::string er_config, er_ckpt, er_graph, er_cov, er_cases, er_out = "edits";
    std::string er_method = "glame";
    int er_layer = 2, er_k = 1, er_n = 2, er_m = 20, er_prefixes = 10, er_max_steps = 100;
    float er_lambda = 6.25e-2f, er_lr = 5e-2f, er_early = 1e-2f, er_zs = 1.0f;
    int er_jobs = 1, er_limit = -1;
    bool er_solutions_only = false, er_sequential = false;
    uint64_t er_seed = 0;
    edit_run->add_option("--config", er_config);
    edit_run->add_option("--ckpt", er_ckpt)->required();
    edit_run->add_option("--graph", er_graph)->required();
    edit_run->add_option("--cov", er_cov)->required();
    edit_run->add_option("--cases", er_cases)->required();
    auto* er_me = edit_run->add_option("--method", er_method)
                      ->check(CLI::IsMember({"glame", "rome", "glame-gnn", "glame-mlp"}));
    auto* er_la = edit_run->add_option("--layer", er_layer);
    auto* er_ka = edit_run->add_option("--k", er_k);
    auto* er_na = edit_run->add_option("--n", er_n);
    auto* er_ma = edit_run->add_option("--m", er_m);
    auto* er_lb = edit_run->add_option("--lambda", er_lambda);
    auto* er_pf = edit_run->add_option("--prefixes", er_prefixes);
    auto* er_lr_o = edit_run->add_option("--lr", er_lr);
    auto* er_ms_o = edit_run->add_option("--max-steps", er_max_steps);
    auto* er_es = edit_run->add_option("--early-stop", er_early);
    auto* er_zs_o = edit_run->add_option("--zs-scale", er_zs);
    float er_clamp = 4.0f;
    auto* er_cl = edit_run->add_option("--clamp", er_clamp,
                                       "norm bound ||m*-m_s|| <= clamp*||m_s||; 0 disables");
    auto* er_j = edit_run->add_option("--jobs", er_jobs);
    auto* er_li = edit_run->add_option("--limit", er_limit, "use only the first N cases");
    auto* er_se = edit_run->add_option("--seed", er_seed);
    bool er_save_tensors = false;
    edit_run->add_flag("--solutions-only", er_solutions_only, "skip per-edit checkpoints");
    edit_run->add_flag("--sequential", er_sequential,
                       "apply all edits cumulatively to one checkpoint");
    edit_run->add_flag("--save-tensors", er_save_tensors,
                       "write a raw k*/m*/W-hat sidecar next to each solution");
    edit_run->add_option("--out", er_out);

    // ---- eval run ------------------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "evaluation stages");
    eval_cmd->require_subcommand(1);
    auto* eval_run = eval_cmd->add_subcommand("run", "score post-edit checkpoints against cases");
    std::string ev_config, ev_ckpt, ev_edits_dir, ev_cases, ev_out = "scores";
    double ev_threshold = 90.0;
    int ev_max_new = 6, ev_jobs = 1;
    bool ev_exact = false;
    eval_run->add_option("--config", ev_config);
    eval_run->add_option("--ckpt", ev_ckpt, "single post-edit checkpoint");
    eval_run->add_option("--edits-dir", ev_edits_dir, "directory produced by edit run");
    eval_run->add_option("--cases", ev_cases)->required();
    auto* ev_t = eval_run->add_option("--threshold", ev_threshold);
    auto* ev_mn = eval_run->add_option("--max-new", ev_max_new);
    auto* ev_j = eval_run->add_option("--jobs", ev_jobs);
    eval_run->add_flag("--exact", ev_exact, "exact-match portability scoring");
    eval_run->add_option("--out", ev_out);

    // ---- sweep -------------------------------------------------------------------------------
    auto* sweep = app.add_subcommand("sweep", "grid over subgraph order n and width m");
    std::string sw_config, sw_ckpt, sw_graph, sw_cov, sw_cases, sw_out = "sweep";
    std::vector<int> sw_n{0, 1, 2, 3};
    std::vector<int> sw_m{5, 10, 15, 20, 25, 30, 35, 40};
    std::string sw_method = "glame";
    int sw_layer = 2, sw_k = 1, sw_prefixes = 10, sw_max_steps = 100, sw_jobs = 1, sw_limit = 10;
    float sw_lambda = 6.25e-2f, sw_lr = 5e-2f, sw_early = 1e-2f;
    uint64_t sw_seed = 0;
    sweep->add_option("--config", sw_config);
    sweep->add_option("--ckpt", sw_ckpt)->required();
    sweep->add_option("--graph", sw_graph)->required();
    sweep->add_option("--cov", sw_cov)->required();
    sweep->add_option("--cases", sw_cases)->required();
    auto* sw_nv = sweep->add_option("--n-values", sw_n)->delimiter(',');
    auto* sw_mv = sweep->add_option("--m-values", sw_m)->delimiter(',');
    auto* sw_me = sweep->add_option("--method", sw_method)
                      ->check(CLI::IsMember({"glame", "rome", "glame-gnn", "glame-mlp"}));
    auto* sw_la = sweep->add_option("--layer", sw_layer);
    auto* sw_ka = sweep->add_option("--k", sw_k);
    auto* sw_pf = sweep->add_option("--prefixes", sw_prefixes);
    auto* sw_ms = sweep->add_option("--max-steps", sw_max_steps);
    auto* sw_lb = sweep->add_option("--lambda", sw_lambda);
    auto* sw_lr_o = sweep->add_option("--lr", sw_lr);
    auto* sw_es = sweep->add_option("--early-stop", sw_early);
    auto* sw_j = sweep->add_option("--jobs", sw_jobs);
    auto* sw_li = sweep->add_option("--limit", sw_limit, "cases per cell");
    auto* sw_se = sweep->add_option("--seed", sw_seed);
    sweep->add_option("--out", sw_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (world_gen->parsed()) {
            json cfg = load_config(wg_config);
            cfg_or_flag(cfg, wg_e, "entities", wg_entities);
            cfg_or_flag(cfg, wg_r, "relations", wg_relations);
            cfg_or_flag(cfg, wg_t, "triples_per_entity", wg_tpe);
            cfg_or_flag(cfg, wg_h, "two_hop_min", wg_two_hop);
            cfg_or_flag(cfg, wg_s, "seed", wg_seed);
            const std::string out = resolve_out(wg_out);
            ManifestWriter mw;
            mw.config = {{"entities", wg_entities},
                         {"relations", wg_relations},
                         {"triples_per_entity", wg_tpe},
                         {"two_hop_min", wg_two_hop}};
            kg::WorldSpec spec;
            spec.entities = wg_entities;
            spec.relations = wg_relations;
            spec.triples_per_entity = wg_tpe;
            spec.min_two_hop_fraction = wg_two_hop;
            kg::KnowledgeGraph g = kg::generate_world(spec, wg_seed);
            fs::create_directories(out);
            write_text_file(out + "/graph.json", g.to_json());
            mw.outputs["graph"] = digest_file(out + "/graph.json");
            mw.write("world gen", out, wg_seed);
            std::cout << "world: " << g.entities().size() << " entities, " << g.triples().size()
                      << " triples -> " << out << "/graph.json\n";
        }

        if (corpus_render->parsed()) {
            json cfg = load_config(cr_config);
            cfg_or_flag(cfg, cr_r, "repetitions", cr_reps);
            cfg_or_flag(cfg, cr_m, "multihop", cr_multihop);
            cfg_or_flag(cfg, cr_a, "alias", cr_alias);
            cfg_or_flag(cfg, cr_pf, "prefix_fraction", cr_prefix);
            cfg_or_flag(cfg, cr_mh, "max_hops", cr_max_hops);
            cfg_or_flag(cfg, cr_s, "seed", cr_seed);
            const std::string out = resolve_out(cr_out);
            ManifestWriter mw;
            mw.input("graph", cr_graph);
            mw.config = {{"repetitions", cr_reps},
                         {"multihop", cr_multihop},
                         {"alias", cr_alias},
                         {"prefix_fraction", cr_prefix},
                         {"max_hops", cr_max_hops}};
            kg::KnowledgeGraph g = kg::KnowledgeGraph::from_json(read_text_file(cr_graph));
            kg::CorpusOptions opts;
            opts.repetitions = cr_reps;
            opts.multihop_fraction = cr_multihop;
            opts.subject_alias_fraction = cr_alias;
            opts.prefix_fraction = cr_prefix;
            opts.max_hops = cr_max_hops;
            auto sentences = kg::render_corpus(g, opts, cr_seed);
            fs::create_directories(out);
            save_corpus_file(out + "/corpus.json", sentences);
            mw.outputs["corpus"] = digest_file(out + "/corpus.json");
            mw.write("corpus render", out, cr_seed);
            std::cout << "corpus: " << sentences.size() << " sentences -> " << out
                      << "/corpus.json\n";
        }

        if (lm_train->parsed()) {
            json cfg = load_config(lt_config);
            cfg_or_flag(cfg, lt_d, "d_model", lt_dmodel);
            cfg_or_flag(cfg, lt_l, "layers", lt_layers);
            cfg_or_flag(cfg, lt_h, "heads", lt_heads);
            cfg_or_flag(cfg, lt_i, "inner", lt_inner);
            cfg_or_flag(cfg, lt_ms, "max_seq", lt_maxseq);
            cfg_or_flag(cfg, lt_a, "activation", lt_activation);
            cfg_or_flag(cfg, lt_st, "steps", lt_steps);
            cfg_or_flag(cfg, lt_b, "batch", lt_batch);
            cfg_or_flag(cfg, lt_lr_o, "lr", lt_lr);
            cfg_or_flag(cfg, lt_w, "warmup", lt_warmup);
            cfg_or_flag(cfg, lt_wd_o, "wd", lt_wd);
            cfg_or_flag(cfg, lt_c, "clip", lt_clip);
            cfg_or_flag(cfg, lt_tr, "target_recall", lt_target);
            cfg_or_flag(cfg, lt_ee, "eval_every", lt_eval_every);
            cfg_or_flag(cfg, lt_s, "seed", lt_seed);
            const std::string out = resolve_out(lt_out);
            ManifestWriter mw;
            mw.input("graph", lt_graph);
            mw.input("corpus", lt_corpus);
            kg::KnowledgeGraph g = kg::KnowledgeGraph::from_json(read_text_file(lt_graph));
            lm::Tokenizer tok = lm::build_world_tokenizer(g);
            auto corpus = lm::tokenize_corpus(tok, load_corpus_file(lt_corpus));
            lm::ModelConfig mc;
            mc.vocab_size = tok.vocab_size();
            mc.d_model = lt_dmodel;
            mc.n_layers = lt_layers;
            mc.n_heads = lt_heads;
            mc.ffn_inner_dim = lt_inner;
            mc.max_seq_len = lt_maxseq;
            mc.activation = lt_activation;
            mc.seed = lt_seed;
            lm::TrainSchedule ts;
            ts.max_steps = lt_steps;
            ts.batch_size = lt_batch;
            ts.lr = lt_lr;
            ts.warmup_steps = lt_warmup;
            ts.weight_decay = lt_wd;
            ts.clip_norm = lt_clip;
            ts.seed = lt_seed;
            ts.eval_every = lt_eval_every;
            ts.target_recall = lt_target;
            ts.verbose = !lt_quiet;
            mw.config = {{"d_model", mc.d_model},   {"layers", mc.n_layers},
                         {"heads", mc.n_heads},     {"inner", mc.ffn_inner_dim},
                         {"steps", ts.max_steps},   {"batch", ts.batch_size},
                         {"lr", ts.lr},             {"warmup", ts.warmup_steps},
                         {"wd", ts.weight_decay},   {"clip", ts.clip_norm},
                         {"target_recall", ts.target_recall}};
            lm::TrainReport rep;
            lm::Model model = lm::train(mc, tok, corpus, ts, &g, &rep);
            model.save(out);
            mw.outputs["checkpoint"] = model.weights_digest();
            mw.outputs["steps_run"] = rep.steps_run;
            mw.outputs["final_loss"] = rep.final_loss;
            mw.outputs["final_recall"] = rep.final_recall;
            mw.write("lm train", out, lt_seed);
            std::cout << "trained " << rep.steps_run << " steps, loss " << rep.final_loss
                      << ", fact recall " << rep.final_recall << " -> " << out << "\n";
        }

        if (lm_recall->parsed()) {
            lm::Model model = lm::Model::load(lrc_ckpt);
            kg::KnowledgeGraph g = kg::KnowledgeGraph::from_json(read_text_file(lrc_graph));
            const double recall = lm::fact_recall(model, g);
            std::cout << "fact recall: " << recall << "\n";
            if (lrc_min >= 0.0 && recall < lrc_min) {
                std::cerr << "recall gate failed: " << recall << " < " << lrc_min << "\n";
                return kExitGate;
            }
        }

        if (cov_est->parsed()) {
            json cfg = load_config(ce_config);
            cfg_or_flag(cfg, ce_l, "layer", ce_layer);
            cfg_or_flag(cfg, ce_n, "samples", ce_samples);
            cfg_or_flag(cfg, ce_r, "ridge", ce_ridge);
            cfg_or_flag(cfg, ce_s, "seed", ce_seed);
            const std::string out = resolve_out(ce_out);
            ManifestWriter mw;
            mw.input_dir("ckpt", ce_ckpt, {"manifest.json", "weights.bin"});
            mw.input("corpus", ce_corpus);
            mw.config = {{"layer", ce_layer}, {"samples", ce_samples}, {"ridge", ce_ridge}};
            lm::Model model = lm::Model::load(ce_ckpt);
            auto sample = covariance_sample(model, load_corpus_file(ce_corpus), ce_samples, ce_seed);
            const std::string source = "samples=" + std::to_string(ce_samples) +
                                       ",seed=" + std::to_string(ce_seed) +
                                       ",corpus=" + digest_file(ce_corpus);
            editor::CovarianceCache cache =
                editor::estimate_covariance(model, sample, ce_layer, ce_ridge, source);
            fs::create_directories(out);
            cache.save(out + "/cov");
            mw.outputs["cov"] = digest_file(out + "/cov.bin");
            mw.outputs["sample_count"] = cache.sample_count;
            mw.outputs["ridge_applied"] = cache.ridge_applied;
            mw.write("cov estimate", out, ce_seed);
            std::cout << "covariance: layer " << ce_layer << ", " << cache.sample_count
                      << " key positions, ridge " << cache.ridge_applied << " -> " << out
                      << "/cov.{json,bin}\n";
        }

        if (cases_make->parsed()) {
            json cfg = load_config(cm_config);
            cfg_or_flag(cfg, cm_c, "count", cm_count);
            cfg_or_flag(cfg, cm_p, "paraphrases", cm_paraphrases);
            cfg_or_flag(cfg, cm_n, "neighborhood", cm_neighborhood);
            cfg_or_flag(cfg, cm_h, "hops", cm_hops);
            cfg_or_flag(cfg, cm_q, "questions_per_hop", cm_qph);
            cfg_or_flag(cfg, cm_s, "seed", cm_seed);
            const std::string out = resolve_out(cm_out);
            ManifestWriter mw;
            mw.input("graph", cm_graph);
            mw.config = {{"count", cm_count},
                         {"paraphrases", cm_paraphrases},
                         {"neighborhood", cm_neighborhood},
                         {"hops", cm_hops},
                         {"questions_per_hop", cm_qph}};
            kg::KnowledgeGraph g = kg::KnowledgeGraph::from_json(read_text_file(cm_graph));
            auto edits = eval::sample_edits(g, cm_count, cm_seed);
            eval::CaseSpec spec;
            spec.paraphrases = cm_paraphrases;
            spec.neighborhood_prompts = cm_neighborhood;
            spec.hops = cm_hops;
            spec.questions_per_hop = cm_qph;
            std::vector<std::string> warnings;
            auto cases = eval::make_cases(g, edits, spec, cm_seed, &warnings);
            for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
            fs::create_directories(out);
            eval::save_cases(out + "/cases.jsonl", cases);
            mw.outputs["cases"] = digest_file(out + "/cases.jsonl");
            mw.outputs["count"] = cases.size();
            mw.outputs["skipped"] = warnings.size();
            mw.write("cases make", out, cm_seed);
            std::cout << "cases: " << cases.size() << " built, " << warnings.size()
                      << " skipped -> " << out << "/cases.jsonl\n";
        }

        if (edit_run->parsed()) {
            json cfg = load_config(er_config);
            cfg_or_flag(cfg, er_me, "method", er_method);
            cfg_or_flag(cfg, er_la, "layer", er_layer);
            cfg_or_flag(cfg, er_ka, "k", er_k);
            cfg_or_flag(cfg, er_na, "n", er_n);
            cfg_or_flag(cfg, er_ma, "m", er_m);
            cfg_or_flag(cfg, er_lb, "lambda", er_lambda);
            cfg_or_flag(cfg, er_pf, "prefixes", er_prefixes);
            cfg_or_flag(cfg, er_lr_o, "lr", er_lr);
            cfg_or_flag(cfg, er_ms_o, "max_steps", er_max_steps);
            cfg_or_flag(cfg, er_es, "early_stop", er_early);
            cfg_or_flag(cfg, er_zs_o, "zs_scale", er_zs);
            cfg_or_flag(cfg, er_cl, "clamp", er_clamp);
            cfg_or_flag(cfg, er_j, "jobs", er_jobs);
            cfg_or_flag(cfg, er_li, "limit", er_limit);
            cfg_or_flag(cfg, er_se, "seed", er_seed);
            const std::string out = resolve_out(er_out);
            ManifestWriter mw;
            mw.input_dir("ckpt", er_ckpt, {"manifest.json", "weights.bin"});
            mw.input("graph", er_graph);
            mw.input("cases", er_cases);
            mw.input("cov", er_cov + std::string(".bin"));
            editor::EditConfig ec;
            ec.method = editor::method_from_string(er_method);
            ec.layer = er_layer;
            ec.init_layer = er_k;
            ec.subgraph_n = er_n;
            ec.subgraph_m = er_m;
            ec.lambda = er_lambda;
            ec.prefix_count = er_prefixes;
            ec.lr = er_lr;
            ec.max_steps = er_max_steps;
            ec.early_stop_loss = er_early;
            ec.zs_scale = er_zs;
            ec.clamp_factor = er_clamp;
            ec.seed = er_seed;
            ec.validate();
            mw.config = {{"method", er_method}, {"layer", ec.layer},     {"k", ec.init_layer},
                         {"n", ec.subgraph_n},  {"m", ec.subgraph_m},    {"lambda", ec.lambda},
                         {"prefixes", ec.prefix_count}, {"lr", ec.lr},   {"max_steps", ec.max_steps},
                         {"early_stop", ec.early_stop_loss}, {"jobs", er_jobs}};

            lm::Model base = lm::Model::load(er_ckpt);
            kg::KnowledgeGraph g = kg::KnowledgeGraph::from_json(read_text_file(er_graph));
            editor::CovarianceCache cache = editor::CovarianceCache::load(er_cov);
            auto cases = eval::load_cases(er_cases);
            if (er_limit >= 0 && er_limit < static_cast<int>(cases.size()))
                cases.resize(static_cast<size_t>(er_limit));
            if (cases.empty()) throw ConfigError("no cases to edit");
            fs::create_directories(out);

            if (er_sequential) {
                std::vector<kg::EditRequest> edits;
                for (const auto& c : cases) edits.push_back(c.edit);
                std::vector<editor::EditSolution> sols;
                lm::Model seq_model = editor::edit_sequence(base, g, edits, cache, ec, {}, &sols);
                seq_model.save(out + "/checkpoint");
                for (size_t i = 0; i < sols.size(); ++i) {
                    char name[512];
                    std::snprintf(name, sizeof(name), "%s/solution_%03zu.json", out.c_str(), i);
                    write_text_file(name, sols[i].report_json(ec));
                }
                mw.outputs["checkpoint"] = seq_model.weights_digest();
                mw.outputs["edits"] = sols.size();
            } else {
                pipeline::RunOptions ropts;
                ropts.jobs = er_jobs;
                ropts.keep_models = true;
                auto runs = pipeline::run_cases(base, g, cases, cache, ec, ropts);
                int early = 0;
                for (size_t i = 0; i < runs.size(); ++i) {
                    char dir[512];
                    std::snprintf(dir, sizeof(dir), "%s/edit_%03zu", out.c_str(), i);
                    fs::create_directories(dir);
                    write_text_file(std::string(dir) + "/solution.json",
                                    runs[i].solution.report_json(ec));
                    if (er_save_tensors) {
                        const editor::EditSolution& sol = runs[i].solution;
                        std::vector<float> blob;
                        for (const num::Tensor* t : {&sol.kstar, &sol.mstar, &sol.w_hat})
                            blob.insert(blob.end(), t->values().begin(), t->values().end());
                        write_binary_file(std::string(dir) + "/tensors.bin", blob.data(),
                                          blob.size() * sizeof(float));
                        json idx = {{"order", {"kstar", "mstar", "w_hat"}},
                                    {"kstar", sol.kstar.shape()},
                                    {"mstar", sol.mstar.shape()},
                                    {"w_hat", sol.w_hat.shape()}};
                        write_text_file(std::string(dir) + "/tensors.json", idx.dump(2));
                    }
                    if (!er_solutions_only) runs[i].post_model->save(std::string(dir) + "/checkpoint");
                    if (runs[i].stop_reason == "early_stop") ++early;
                }
                mw.outputs["edits"] = runs.size();
                mw.outputs["early_stop_fraction"] =
                    static_cast<double>(early) / static_cast<double>(runs.size());
                std::cout << "edits: " << runs.size() << ", early-stop fraction "
                          << static_cast<double>(early) / static_cast<double>(runs.size()) << "\n";
            }
            mw.write("edit run", out, er_seed);
            std::cout << "edit outputs -> " << out << "\n";
        }

        if (eval_run->parsed()) {
            json cfg = load_config(ev_config);
            cfg_or_flag(cfg, ev_t, "threshold", ev_threshold);
            cfg_or_flag(cfg, ev_mn, "max_new", ev_max_new);
            cfg_or_flag(cfg, ev_j, "jobs", ev_jobs);
            if ((ev_ckpt.empty()) == (ev_edits_dir.empty()))
                throw ConfigError("eval run needs exactly one of --ckpt or --edits-dir");
            const std::string out = resolve_out(ev_out);
            ManifestWriter mw;
            mw.input("cases", ev_cases);
            mw.config = {{"threshold", ev_threshold}, {"max_new", ev_max_new}, {"exact", ev_exact}};
            auto cases = eval::load_cases(ev_cases);
            if (cases.empty()) throw ConfigError("no cases to score");
            eval::PortabilityOptions popts;
            popts.threshold = ev_threshold;
            popts.exact_match = ev_exact;
            popts.max_new = ev_max_new;

            std::vector<eval::CaseScores> per_case;
            if (!ev_ckpt.empty()) {
                lm::Model model = lm::Model::load(ev_ckpt);
                mw.input_dir("ckpt", ev_ckpt, {"manifest.json", "weights.bin"});
                per_case.resize(cases.size());
                std::atomic<size_t> next{0};
                auto score_worker = [&] {
                    for (;;) {
                        const size_t i = next.fetch_add(1);
                        if (i >= cases.size()) return;
                        per_case[i] = eval::score_case(model, cases[i], popts);
                    }
                };
                if (ev_jobs > 1) {
                    std::vector<std::thread> pool;
                    for (int t = 0; t < ev_jobs; ++t) pool.emplace_back(score_worker);
                    for (auto& t : pool) t.join();
                } else {
                    score_worker();
                }
            } else {
                // score each case against its own post-edit checkpoint; an
                // edit run with --limit produces fewer directories than cases
                for (size_t i = 0; i < cases.size(); ++i) {
                    char dir[512];
                    std::snprintf(dir, sizeof(dir), "%s/edit_%03zu/checkpoint",
                                  ev_edits_dir.c_str(), i);
                    if (!fs::exists(std::string(dir) + "/manifest.json")) break;
                    lm::Model model = lm::Model::load(dir);
                    per_case.push_back(eval::score_case(model, cases[i], popts));
                }
                if (per_case.empty())
                    throw ConfigError("no post-edit checkpoints under " + ev_edits_dir);
                if (per_case.size() < cases.size())
                    std::cerr << "note: scored " << per_case.size() << " of " << cases.size()
                              << " cases (edit run was limited)\n";
            }
            eval::Scores agg = eval::aggregate_case_scores(per_case);
            fs::create_directories(out);
            write_text_file(out + "/scores.json", eval::scores_json(agg, per_case));
            write_text_file(out + "/scores.csv", eval::scores_csv(agg, per_case));
            mw.outputs["scores_csv"] = digest_file(out + "/scores.csv");
            mw.write("eval run", out, 0);
            std::cout << "efficacy " << agg.efficacy << "  paraphrase " << agg.paraphrase
                      << "  neighborhood " << agg.neighborhood << "  portability "
                      << agg.portability << "  editing " << agg.editing << "\n"
                      << "scores -> " << out << "\n";
        }

        if (sweep->parsed()) {
            json cfg = load_config(sw_config);
            cfg_or_flag(cfg, sw_nv, "n_values", sw_n);
            cfg_or_flag(cfg, sw_mv, "m_values", sw_m);
            cfg_or_flag(cfg, sw_me, "method", sw_method);
            cfg_or_flag(cfg, sw_la, "layer", sw_layer);
            cfg_or_flag(cfg, sw_ka, "k", sw_k);
            cfg_or_flag(cfg, sw_pf, "prefixes", sw_prefixes);
            cfg_or_flag(cfg, sw_ms, "max_steps", sw_max_steps);
            cfg_or_flag(cfg, sw_lb, "lambda", sw_lambda);
            cfg_or_flag(cfg, sw_lr_o, "lr", sw_lr);
            cfg_or_flag(cfg, sw_es, "early_stop", sw_early);
            cfg_or_flag(cfg, sw_j, "jobs", sw_jobs);
            cfg_or_flag(cfg, sw_li, "limit", sw_limit);
            cfg_or_flag(cfg, sw_se, "seed", sw_seed);
            const std::string out = resolve_out(sw_out);
            ManifestWriter mw;
            mw.input_dir("ckpt", sw_ckpt, {"manifest.json", "weights.bin"});
            mw.input("graph", sw_graph);
            mw.input("cases", sw_cases);
            mw.config = {{"n_values", sw_n}, {"m_values", sw_m}, {"limit", sw_limit},
                         {"method", sw_method}, {"layer", sw_layer}};

            lm::Model base = lm::Model::load(sw_ckpt);
            kg::KnowledgeGraph g = kg::KnowledgeGraph::from_json(read_text_file(sw_graph));
            editor::CovarianceCache cache = editor::CovarianceCache::load(sw_cov);
            auto cases = eval::load_cases(sw_cases);
            if (sw_limit > 0 && sw_limit < static_cast<int>(cases.size()))
                cases.resize(static_cast<size_t>(sw_limit));
            if (cases.empty()) throw ConfigError("no cases for the sweep");

            fs::create_directories(out);
            std::string csv = "n,m,efficacy,paraphrase,neighborhood,portability,editing\n";
            double best_editing = -1.0;
            int best_n = -1, best_m = -1;
            for (int n : sw_n) {
                for (int m : sw_m) {
                    editor::EditConfig ec;
                    ec.method = editor::method_from_string(sw_method);
                    ec.layer = sw_layer;
                    ec.init_layer = sw_k;
                    ec.subgraph_n = n;
                    ec.subgraph_m = m;
                    ec.lambda = sw_lambda;
                    ec.prefix_count = sw_prefixes;
                    ec.lr = sw_lr;
                    ec.max_steps = sw_max_steps;
                    ec.early_stop_loss = sw_early;
                    ec.seed = sw_seed;
                    ec.validate();
                    pipeline::RunOptions ropts;
                    ropts.jobs = sw_jobs;
                    auto runs = pipeline::run_cases(base, g, cases, cache, ec, ropts);
                    eval::Scores s = pipeline::aggregate(runs);
                    char buf[200];
                    std::snprintf(buf, sizeof(buf), "%d,%d,%.4f,%.4f,%.4f,%.4f,%.4f\n", n, m,
                                  s.efficacy, s.paraphrase, s.neighborhood, s.portability,
                                  s.editing);
                    csv += buf;
                    if (s.editing > best_editing) {
                        best_editing = s.editing;
                        best_n = n;
                        best_m = m;
                    }
                    std::cout << "cell n=" << n << " m=" << m << ": editing " << s.editing << "\n";
                }
            }
            write_text_file(out + "/sweep.csv", csv);
            json peak = {{"best_n", best_n}, {"best_m", best_m}, {"editing", best_editing}};
            write_text_file(out + "/peak.json", peak.dump(2));
            mw.outputs["sweep_csv"] = digest_file(out + "/sweep.csv");
            mw.outputs["peak"] = peak;
            mw.write("sweep", out, sw_seed);
            std::cout << "peak: n=" << best_n << " m=" << best_m << " editing " << best_editing
                      << " -> " << out << "\n";
        }
    } catch (const ConfigError& ex) {
        std::cerr << "config error: " << ex.what() << "\n";
        return kExitConfig;
    } catch (const IoError& ex) {
        std::cerr << "io error: " << ex.what() << "\n";
        return kExitConfig;
    } catch (const TokenError& ex) {
        std::cerr << "tokenization error: " << ex.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& ex) {
        std::cerr << "numerical failure: " << ex.what() << "\n";
        return kExitNumeric;
    } catch (const ShapeError& ex) {
        std::cerr << "numerical failure: " << ex.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return kExitNumeric;
    }
    return 0;
}
