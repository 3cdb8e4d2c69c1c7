#include <algorithm>
#include <set>

#include "glamelab/model.hpp"

namespace glame::lm {

namespace {
const char* kSpecials[] = {"<pad>", "<s>", "</s>"};
}

Tokenizer Tokenizer::build(const std::vector<std::string>& texts) {
    std::set<std::string> unique;
    for (const std::string& t : texts)
        for (const std::string& w : split_ws(t)) unique.insert(w);
    std::vector<std::string> vocab;
    for (const char* s : kSpecials) vocab.emplace_back(s);
    for (const std::string& w : unique) {
        if (w == kSpecials[0] || w == kSpecials[1] || w == kSpecials[2])
            throw TokenError("reserved token in corpus: " + w);
        vocab.push_back(w);
    }
    return from_vocab(std::move(vocab));
}

Tokenizer Tokenizer::from_vocab(std::vector<std::string> vocab) {
    if (vocab.size() < 3 || vocab[0] != kSpecials[0] || vocab[1] != kSpecials[1] ||
        vocab[2] != kSpecials[2])
        throw TokenError("vocab must start with <pad>, <s>, </s>");
    Tokenizer tok;
    tok.words_ = std::move(vocab);
    for (size_t i = 0; i < tok.words_.size(); ++i) {
        if (!tok.index_.emplace(tok.words_[i], static_cast<int>(i)).second)
            throw TokenError("duplicate word in vocab: " + tok.words_[i]);
    }
    return tok;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const std::string& w : split_ws(text)) {
        auto it = index_.find(w);
        if (it == index_.end()) throw TokenError("unknown token '" + w + "'");
        ids.push_back(it->second);
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    for (int id : ids) {
        if (id < 0 || id >= vocab_size())
            throw TokenError("token id out of range: " + std::to_string(id));
        words.push_back(words_[static_cast<size_t>(id)]);
    }
    return join_ws(words);
}

Tokenizer build_world_tokenizer(const kg::KnowledgeGraph& g) {
    std::vector<std::string> texts;
    for (const auto& e : g.entities()) texts.push_back(e.surface);
    for (const auto& r : g.relations()) {
        texts.push_back(r.surface);
        for (const std::string& t : r.templates) texts.push_back(kg::render_template(t, r.surface));
        for (const std::string& t : r.paraphrases) texts.push_back(kg::render_template(t, r.surface));
    }
    // chain-prompt glue and the editor's essence prompt "{subject} is a"
    texts.push_back("the of is a");
    return Tokenizer::build(texts);
}

std::vector<std::vector<int>> tokenize_corpus(const Tokenizer& tok,
                                              const std::vector<std::string>& sentences) {
    std::vector<std::vector<int>> out;
    out.reserve(sentences.size());
    for (const std::string& s : sentences) {
        std::vector<int> ids{Tokenizer::kBos};
        for (int id : tok.encode(s)) ids.push_back(id);
        ids.push_back(Tokenizer::kEos);
        out.push_back(std::move(ids));
    }
    return out;
}

}  // namespace glame::lm
