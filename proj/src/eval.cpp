#include "glamelab/eval.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "glamelab/fuzzy.hpp"

namespace glame::eval {

using nlohmann::json;

std::vector<kg::EditRequest> sample_edits(const kg::KnowledgeGraph& g, int count, uint64_t seed) {
    Rng rng(seed ^ 0x656469747363ULL);
    std::vector<kg::Triple> triples = g.triples();
    rng.shuffle(triples);
    std::vector<kg::EditRequest> edits;
    std::set<std::pair<int, int>> used_sites;
    const int n_ent = static_cast<int>(g.entities().size());
    for (const kg::Triple& t : triples) {
        if (static_cast<int>(edits.size()) >= count) break;
        if (!used_sites.insert({t.s, t.r}).second) continue;
        // counterfactual object: distinct from o and s, with outgoing edges
        int o_star = -1;
        for (int attempt = 0; attempt < 64; ++attempt) {
            const int cand = static_cast<int>(rng.below(static_cast<uint64_t>(n_ent)));
            if (cand == t.o || cand == t.s) continue;
            if (g.out_edges(cand).empty()) continue;
            o_star = cand;
            break;
        }
        if (o_star < 0) continue;
        edits.push_back(kg::EditRequest{t.s, t.r, t.o, o_star, kg::render_prompt(g, t.s, t.r, 0)});
    }
    if (static_cast<int>(edits.size()) < count)
        throw ConfigError("could not sample " + std::to_string(count) + " edits from the graph");
    return edits;
}

std::vector<EvalCase> make_cases(const kg::KnowledgeGraph& g,
                                 const std::vector<kg::EditRequest>& edits, const CaseSpec& spec,
                                 uint64_t seed, std::vector<std::string>* warnings) {
    if (spec.paraphrases < 1 || spec.neighborhood_prompts < 1)
        throw ConfigError("case spec needs at least one paraphrase and neighborhood prompt");
    for (int h : spec.hops)
        if (h < 2 || h > 4) throw ConfigError("portability hops must be within {2,3,4}");

    std::vector<EvalCase> cases;
    Rng rng(seed ^ 0x6361736573ULL);
    for (const kg::EditRequest& e : edits) {
        kg::validate_edit(g, e);
        const kg::KnowledgeGraph post = kg::apply_edit_to_graph(g, e);
        EvalCase c;
        c.edit = e;
        c.o_surface = g.entity(e.o).surface;
        c.o_star_surface = g.entity(e.o_star).surface;

        const kg::Relation& rel = g.relation(e.r);
        const int n_para = std::min<int>(spec.paraphrases, static_cast<int>(rel.paraphrases.size()));
        for (int i = 0; i < n_para; ++i)
            c.paraphrase_prompts.push_back(kg::render_paraphrase(g, e.s, e.r, i));

        // neighborhood: same relation, different subject, that subject's own object
        std::vector<kg::Triple> neighbors;
        for (const kg::Triple& t : g.triples())
            if (t.r == e.r && t.s != e.s) neighbors.push_back(t);
        rng.shuffle(neighbors);
        for (const kg::Triple& t : neighbors) {
            if (static_cast<int>(c.neighborhood.size()) >= spec.neighborhood_prompts) break;
            c.neighborhood.push_back(NeighborhoodProbe{kg::render_prompt(g, t.s, t.r, 0), t.s, t.o,
                                                       g.entity(t.o).surface});
        }
        if (c.neighborhood.empty()) {
            if (warnings)
                warnings->push_back("case for subject " + g.entity(e.s).surface +
                                    " skipped: no neighborhood subject shares relation " +
                                    rel.surface);
            continue;
        }

        // portability: chains through o*, gold answers from the post-edit world
        bool chain_found = false;
        for (int hops : spec.hops) {
            int produced = 0;
            // enumerate depth-(hops-1) walks from o*, deterministic order, then
            // seeded choice among candidates
            struct Walk {
                std::vector<kg::Triple> chain;
                int tail;
            };
            std::vector<Walk> finished;
            std::vector<Walk> frontier{{{}, e.o_star}};
            for (int depth = 1; depth < hops; ++depth) {
                std::vector<Walk> next;
                for (const Walk& w : frontier) {
                    for (const kg::Triple& t : post.out_edges(w.tail)) {
                        Walk nw = w;
                        nw.chain.push_back(t);
                        nw.tail = t.o;
                        next.push_back(std::move(nw));
                    }
                }
                frontier = std::move(next);
            }
            for (Walk& w : frontier) {
                // a usable gold answer is a distinct third entity
                if (w.tail == e.s || w.tail == e.o_star) continue;
                finished.push_back(std::move(w));
            }
            if (finished.empty()) continue;
            rng.shuffle(finished);
            for (const Walk& w : finished) {
                if (produced >= spec.questions_per_hop) break;
                PortabilityQuestion q;
                q.hops = hops;
                q.answer = w.tail;
                q.answer_surface = g.entity(w.tail).surface;
                std::vector<int> rel_chain{e.r};
                q.chain.push_back(kg::Triple{e.s, e.r, e.o_star});
                for (const kg::Triple& t : w.chain) {
                    rel_chain.push_back(t.r);
                    q.chain.push_back(t);
                }
                q.question = kg::render_chain_prompt(g, e.s, rel_chain);
                c.portability.push_back(std::move(q));
                ++produced;
                chain_found = true;
            }
        }
        if (!chain_found) {
            if (warnings)
                warnings->push_back("case for subject " + g.entity(e.s).surface +
                                    " skipped: no multi-hop chain through " +
                                    g.entity(e.o_star).surface);
            continue;
        }
        for (const PortabilityQuestion& q : c.portability) c.leak.insert(q.answer);
        cases.push_back(std::move(c));
    }
    return cases;
}

// ---- scoring ------------------------------------------------------------------

namespace {

std::vector<int> prompt_tokens(const lm::Model& model, const std::string& text) {
    std::vector<int> ids{lm::Tokenizer::kBos};
    for (int id : model.tokenizer().encode(text)) ids.push_back(id);
    return ids;
}

// 1 if the model scores `prefer` strictly above `against` as a continuation.
int comparison_hit(const lm::Model& model, const std::string& prompt, const std::string& prefer,
                   const std::string& against) {
    const auto p = prompt_tokens(model, prompt);
    const double a = lm::sequence_log_prob(model, p, model.tokenizer().encode(prefer));
    const double b = lm::sequence_log_prob(model, p, model.tokenizer().encode(against));
    return a > b ? 1 : 0;
}

int portability_hit(const lm::Model& model, const PortabilityQuestion& q,
                    const PortabilityOptions& opts) {
    lm::GenerateOptions gopts;  // greedy
    const auto out = model.generate(prompt_tokens(model, q.question), opts.max_new, gopts);
    const std::string text = model.tokenizer().decode(out);
    if (opts.exact_match) {
        const std::string hay = " " + fuzzy::normalize(text) + " ";
        const std::string needle = " " + fuzzy::normalize(q.answer_surface) + " ";
        return hay.find(needle) != std::string::npos ? 1 : 0;
    }
    return fuzzy::partial_ratio(q.answer_surface, text) >= opts.threshold ? 1 : 0;
}

}  // namespace

CaseScores score_case(const lm::Model& model, const EvalCase& c, const PortabilityOptions& opts) {
    CaseScores s;
    s.efficacy = 100.0 * comparison_hit(model, c.edit.prompt, c.o_star_surface, c.o_surface);

    double para = 0.0;
    for (const std::string& p : c.paraphrase_prompts)
        para += comparison_hit(model, p, c.o_star_surface, c.o_surface);
    s.paraphrase = c.paraphrase_prompts.empty()
                       ? 0.0
                       : 100.0 * para / static_cast<double>(c.paraphrase_prompts.size());

    double neigh = 0.0;
    for (const NeighborhoodProbe& p : c.neighborhood)
        neigh += 1 - comparison_hit(model, p.prompt, c.o_star_surface, p.object_surface);
    s.neighborhood =
        c.neighborhood.empty() ? 0.0 : 100.0 * neigh / static_cast<double>(c.neighborhood.size());

    double port = 0.0;
    for (const PortabilityQuestion& q : c.portability) port += portability_hit(model, q, opts);
    s.portability =
        c.portability.empty() ? 0.0 : 100.0 * port / static_cast<double>(c.portability.size());
    return s;
}

double efficacy_score(const lm::Model& model, const std::vector<EvalCase>& cases) {
    if (cases.empty()) throw ConfigError("efficacy_score: no cases");
    double acc = 0.0;
    for (const EvalCase& c : cases)
        acc += comparison_hit(model, c.edit.prompt, c.o_star_surface, c.o_surface);
    return 100.0 * acc / static_cast<double>(cases.size());
}

double paraphrase_score(const lm::Model& model, const std::vector<EvalCase>& cases) {
    if (cases.empty()) throw ConfigError("paraphrase_score: no cases");
    double acc = 0.0;
    int64_t n = 0;
    for (const EvalCase& c : cases) {
        for (const std::string& p : c.paraphrase_prompts) {
            acc += comparison_hit(model, p, c.o_star_surface, c.o_surface);
            ++n;
        }
    }
    if (n == 0) throw ConfigError("paraphrase_score: no paraphrase prompts");
    return 100.0 * acc / static_cast<double>(n);
}

double neighborhood_score(const lm::Model& model, const std::vector<EvalCase>& cases) {
    if (cases.empty()) throw ConfigError("neighborhood_score: no cases");
    double acc = 0.0;
    int64_t n = 0;
    for (const EvalCase& c : cases) {
        for (const NeighborhoodProbe& p : c.neighborhood) {
            // the indicator as printed: P(o* | p) < P(o' | p)
            acc += 1 - comparison_hit(model, p.prompt, c.o_star_surface, p.object_surface);
            ++n;
        }
    }
    if (n == 0) throw ConfigError("neighborhood_score: no neighborhood prompts");
    return 100.0 * acc / static_cast<double>(n);
}

double portability_score(const lm::Model& model, const std::vector<EvalCase>& cases,
                         const PortabilityOptions& opts) {
    if (cases.empty()) throw ConfigError("portability_score: no cases");
    double acc = 0.0;
    int64_t n = 0;
    for (const EvalCase& c : cases) {
        for (const PortabilityQuestion& q : c.portability) {
            acc += portability_hit(model, q, opts);
            ++n;
        }
    }
    if (n == 0) throw ConfigError("portability_score: no questions");
    return 100.0 * acc / static_cast<double>(n);
}

Scores editing_score(double efficacy, double paraphrase, double neighborhood, double portability) {
    for (double v : {efficacy, paraphrase, neighborhood, portability})
        if (v < 0.0 || v > 100.0) throw ConfigError("scores must lie in [0, 100]");
    Scores s;
    s.efficacy = efficacy;
    s.paraphrase = paraphrase;
    s.neighborhood = neighborhood;
    s.portability = portability;
    if (efficacy == 0.0 || paraphrase == 0.0 || neighborhood == 0.0 || portability == 0.0) {
        s.editing = 0.0;
        s.zero_component = true;
    } else {
        s.editing = 4.0 / (1.0 / efficacy + 1.0 / paraphrase + 1.0 / neighborhood +
                           1.0 / portability);
    }
    return s;
}

Scores aggregate_case_scores(const std::vector<CaseScores>& per_case) {
    if (per_case.empty()) throw ConfigError("no case scores to aggregate");
    double e = 0, p = 0, n = 0, o = 0;
    for (const CaseScores& c : per_case) {
        e += c.efficacy;
        p += c.paraphrase;
        n += c.neighborhood;
        o += c.portability;
    }
    const double cnt = static_cast<double>(per_case.size());
    return editing_score(e / cnt, p / cnt, n / cnt, o / cnt);
}

// ---- files and reports ------------------------------------------------------------

namespace {

json case_to_json(const EvalCase& c) {
    json j;
    j["edit"] = {{"s", c.edit.s},       {"r", c.edit.r},           {"o", c.edit.o},
                 {"o_star", c.edit.o_star}, {"prompt", c.edit.prompt}};
    j["o_surface"] = c.o_surface;
    j["o_star_surface"] = c.o_star_surface;
    j["paraphrase_prompts"] = c.paraphrase_prompts;
    json neigh = json::array();
    for (const NeighborhoodProbe& p : c.neighborhood)
        neigh.push_back({{"prompt", p.prompt},
                         {"subject", p.subject},
                         {"object", p.object},
                         {"object_surface", p.object_surface}});
    j["neighborhood"] = std::move(neigh);
    json port = json::array();
    for (const PortabilityQuestion& q : c.portability) {
        json chain = json::array();
        for (const kg::Triple& t : q.chain) chain.push_back({t.s, t.r, t.o});
        port.push_back({{"hops", q.hops},
                        {"question", q.question},
                        {"answer", q.answer},
                        {"answer_surface", q.answer_surface},
                        {"chain", std::move(chain)}});
    }
    j["portability"] = std::move(port);
    j["leak"] = std::vector<int>(c.leak.begin(), c.leak.end());
    return j;
}

EvalCase case_from_json(const json& j) {
    EvalCase c;
    const json& e = j.at("edit");
    c.edit = kg::EditRequest{e.at("s").get<int>(), e.at("r").get<int>(), e.at("o").get<int>(),
                             e.at("o_star").get<int>(), e.at("prompt").get<std::string>()};
    c.o_surface = j.at("o_surface").get<std::string>();
    c.o_star_surface = j.at("o_star_surface").get<std::string>();
    c.paraphrase_prompts = j.at("paraphrase_prompts").get<std::vector<std::string>>();
    for (const json& p : j.at("neighborhood"))
        c.neighborhood.push_back(NeighborhoodProbe{p.at("prompt").get<std::string>(),
                                                   p.at("subject").get<int>(),
                                                   p.at("object").get<int>(),
                                                   p.at("object_surface").get<std::string>()});
    for (const json& q : j.at("portability")) {
        PortabilityQuestion pq;
        pq.hops = q.at("hops").get<int>();
        pq.question = q.at("question").get<std::string>();
        pq.answer = q.at("answer").get<int>();
        pq.answer_surface = q.at("answer_surface").get<std::string>();
        for (const json& t : q.at("chain"))
            pq.chain.push_back(kg::Triple{t.at(0).get<int>(), t.at(1).get<int>(), t.at(2).get<int>()});
        c.portability.push_back(std::move(pq));
    }
    for (int id : j.at("leak").get<std::vector<int>>()) c.leak.insert(id);
    return c;
}

}  // namespace

void save_cases(const std::string& path, const std::vector<EvalCase>& cases) {
    std::ostringstream out;
    out << json{{"format", "cases/1"}, {"count", cases.size()}}.dump() << "\n";
    for (const EvalCase& c : cases) out << case_to_json(c).dump() << "\n";
    write_text_file(path, out.str());
}

std::vector<EvalCase> load_cases(const std::string& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    std::vector<EvalCase> cases;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& ex) {
            throw IoError("case file line " + std::to_string(line_no) + ": " + ex.what());
        }
        if (j.contains("format")) {
            if (j.at("format").get<std::string>() != "cases/1")
                throw IoError("unsupported case file format");
            continue;
        }
        cases.push_back(case_from_json(j));
    }
    return cases;
}

std::string scores_json(const Scores& s, const std::vector<CaseScores>& per_case) {
    json j;
    j["format"] = "scores/1";
    j["aggregate"] = {{"efficacy", s.efficacy},       {"paraphrase", s.paraphrase},
                      {"neighborhood", s.neighborhood}, {"portability", s.portability},
                      {"editing", s.editing},          {"zero_component", s.zero_component}};
    json pc = json::array();
    for (const CaseScores& c : per_case)
        pc.push_back({{"efficacy", c.efficacy},
                      {"paraphrase", c.paraphrase},
                      {"neighborhood", c.neighborhood},
                      {"portability", c.portability}});
    j["per_case"] = std::move(pc);
    return j.dump(2);
}

std::string scores_csv(const Scores& s, const std::vector<CaseScores>& per_case) {
    std::ostringstream out;
    out << "case,efficacy,paraphrase,neighborhood,portability,editing\n";
    char buf[160];
    for (size_t i = 0; i < per_case.size(); ++i) {
        const CaseScores& c = per_case[i];
        std::snprintf(buf, sizeof(buf), "%zu,%.4f,%.4f,%.4f,%.4f,\n", i, c.efficacy, c.paraphrase,
                      c.neighborhood, c.portability);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "aggregate,%.4f,%.4f,%.4f,%.4f,%.4f\n", s.efficacy,
                  s.paraphrase, s.neighborhood, s.portability, s.editing);
    out << buf;
    return out.str();
}

}  // namespace glame::eval

