#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "demondnc/errors.hpp"
#include "demondnc/tasks.hpp"
#include "demondnc/tensor.hpp"

namespace demondnc {

inline constexpr std::size_t kBabiPadId = 0;
inline constexpr std::size_t kBabiQueryId = 1;
inline constexpr std::size_t kBabiUnkId = 2;
inline constexpr std::size_t kBabiReserved = 3;

struct BabiQuestion {
    std::size_t line_index = 0;  // index into the story's line list
    std::string answer;          // single lowercased token (lists comma-joined)
    std::vector<std::size_t> supporting;  // 1-based line ids as published

    bool operator==(const BabiQuestion&) const = default;
};

struct BabiStory {
    std::vector<std::vector<std::string>> lines;
    std::vector<BabiQuestion> questions;

    bool operator==(const BabiStory&) const = default;

    std::size_t token_count() const {
        std::size_t n = 0;
        for (const auto& l : lines) n += l.size();
        return n;
    }
};

struct BabiCorpus {
    std::vector<BabiStory> stories;
    std::map<std::string, std::size_t> vocab;  // includes the reserved entries

    bool operator==(const BabiCorpus&) const = default;

    std::size_t vocab_size() const { return vocab.size(); }

    std::size_t token_id(const std::string& token) const {
        const auto it = vocab.find(token);
        return it == vocab.end() ? kBabiUnkId : it->second;
    }

    std::size_t question_count() const {
        std::size_t n = 0;
        for (const auto& s : stories) n += s.questions.size();
        return n;
    }
};

namespace detail {

inline std::vector<std::string> babi_tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            out.push_back(word);
            word.clear();
        }
    };
    for (const char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            flush();
        } else if (std::ispunct(static_cast<unsigned char>(c))) {
            flush();
            out.emplace_back(1, c);
        } else {
            word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    flush();
    return out;
}

inline std::string babi_location(const std::string& name, std::size_t line_no) {
    return name + ":" + std::to_string(line_no);
}

}  // namespace detail

// Parses one file's worth of stories in the published line format:
//   "<id> <sentence>"
//   "<id> <question>\t<answer>\t<supporting ids>"
// where id restarting at 1 begins a new story.
inline std::vector<BabiStory> babi_parse_stories(const std::string& name, std::istream& in) {
    std::vector<BabiStory> stories;
    std::size_t prev_id = 0, line_no = 0;
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;

        std::size_t sp = line.find(' ');
        if (sp == std::string::npos)
            throw ParseError("babi: missing line id at " + detail::babi_location(name, line_no));
        std::size_t id = 0;
        try {
            std::size_t used = 0;
            id = std::stoull(line.substr(0, sp), &used);
            if (used != sp) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ParseError("babi: bad line id at " + detail::babi_location(name, line_no));
        }
        if (id == 0) throw ParseError("babi: line id must be positive at " + detail::babi_location(name, line_no));

        if (id == 1) {
            stories.emplace_back();
        } else if (stories.empty() || id != prev_id + 1) {
            throw ParseError("babi: non-consecutive line id at " + detail::babi_location(name, line_no));
        }
        prev_id = id;
        BabiStory& story = stories.back();

        const std::string rest = line.substr(sp + 1);
        const std::size_t tab = rest.find('\t');
        if (tab == std::string::npos) {
            story.lines.push_back(detail::babi_tokenize(rest));
            continue;
        }

        BabiQuestion q;
        q.line_index = story.lines.size();
        story.lines.push_back(detail::babi_tokenize(rest.substr(0, tab)));
        if (story.lines.back().empty())
            throw ParseError("babi: empty question at " + detail::babi_location(name, line_no));

        std::string tail = rest.substr(tab + 1);
        const std::size_t tab2 = tail.find('\t');
        std::string answer = tab2 == std::string::npos ? tail : tail.substr(0, tab2);
        for (auto& c : answer) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        while (!answer.empty() && std::isspace(static_cast<unsigned char>(answer.back()))) answer.pop_back();
        if (answer.empty()) throw ParseError("babi: empty answer at " + detail::babi_location(name, line_no));
        q.answer = answer;

        if (tab2 != std::string::npos) {
            std::istringstream sup(tail.substr(tab2 + 1));
            std::size_t sid = 0;
            while (sup >> sid) {
                if (sid == 0 || sid > prev_id)
                    throw ParseError("babi: supporting id out of range at " + detail::babi_location(name, line_no));
                q.supporting.push_back(sid);
            }
        }
        story.questions.push_back(std::move(q));
    }
    return stories;
}

// Reserved ids first, then all tokens (answers included) sorted.
inline BabiCorpus babi_corpus_from_stories(std::vector<BabiStory> stories) {
    BabiCorpus corpus;
    corpus.stories = std::move(stories);
    std::vector<std::string> tokens;
    for (const auto& s : corpus.stories) {
        for (const auto& l : s.lines) tokens.insert(tokens.end(), l.begin(), l.end());
        for (const auto& q : s.questions) tokens.push_back(q.answer);
    }
    std::sort(tokens.begin(), tokens.end());
    tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
    corpus.vocab["<pad>"] = kBabiPadId;
    corpus.vocab["<query>"] = kBabiQueryId;
    corpus.vocab["<unk>"] = kBabiUnkId;
    std::size_t next = kBabiReserved;
    for (const auto& t : tokens)
        if (!corpus.vocab.count(t)) corpus.vocab[t] = next++;
    return corpus;
}

inline BabiCorpus babi_parse_text(const std::string& name, const std::string& text) {
    std::istringstream in(text);
    return babi_corpus_from_stories(babi_parse_stories(name, in));
}

// Parses a single file or every *.txt in a directory (sorted by path).
inline BabiCorpus babi_parse(const std::string& path) {
    namespace fs = std::filesystem;
    std::vector<fs::path> files;
    if (fs::is_directory(path)) {
        for (const auto& entry : fs::directory_iterator(path))
            if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw IoError("babi: no .txt files under " + path);
    } else if (fs::is_regular_file(path)) {
        files.push_back(path);
    } else {
        throw IoError("babi: no such file or directory: " + path);
    }
    std::vector<BabiStory> stories;
    for (const auto& f : files) {
        std::ifstream in(f);
        if (!in) throw IoError("babi: cannot open " + f.string());
        auto part = babi_parse_stories(f.string(), in);
        stories.insert(stories.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return babi_corpus_from_stories(std::move(stories));
}

// Canonical text form; parse(serialize(c)) reproduces c.
inline std::string babi_serialize(const BabiCorpus& corpus) {
    std::ostringstream out;
    for (const auto& story : corpus.stories) {
        std::size_t next_q = 0;
        for (std::size_t i = 0; i < story.lines.size(); ++i) {
            out << (i + 1);
            for (const auto& tok : story.lines[i]) out << ' ' << tok;
            if (next_q < story.questions.size() && story.questions[next_q].line_index == i) {
                const auto& q = story.questions[next_q++];
                out << '\t' << q.answer << '\t';
                for (std::size_t k = 0; k < q.supporting.size(); ++k) {
                    if (k) out << ' ';
                    out << q.supporting[k];
                }
            }
            out << '\n';
        }
    }
    return out.str();
}

template <class T>
struct BabiEncoded {
    std::vector<TaskSample<T>> samples;   // one per retained story
    std::vector<std::size_t> answer_ids;  // per question, story order
    std::size_t skipped = 0;              // stories over the length cap
};

// One-hot token stream per story. The final token step of each question line
// additionally raises the query-marker channel (row sum 2) and is the only
// kind of step with loss_mask = 1; its target is the answer token.
template <class T>
BabiEncoded<T> babi_encode(const BabiCorpus& corpus, std::size_t max_story_len) {
    const std::size_t dim = corpus.vocab_size();
    if (dim <= kBabiReserved) throw ArgumentError("babi: empty corpus vocabulary");
    BabiEncoded<T> out;
    for (const auto& story : corpus.stories) {
        const std::size_t steps = story.token_count();
        if (steps == 0 || steps > max_story_len) {
            ++out.skipped;
            continue;
        }
        std::vector<T> x(steps * dim, T(0)), y(steps * dim, T(0)), mask(steps, T(0));
        std::vector<std::size_t> line_end(story.lines.size());
        std::size_t row = 0;
        for (std::size_t i = 0; i < story.lines.size(); ++i) {
            for (const auto& tok : story.lines[i]) {
                x[row * dim + corpus.token_id(tok)] += T(1);
                ++row;
            }
            line_end[i] = row - 1;
        }
        for (const auto& q : story.questions) {
            const std::size_t r = line_end[q.line_index];
            x[r * dim + kBabiQueryId] += T(1);
            mask[r] = T(1);
            y[r * dim + corpus.token_id(q.answer)] = T(1);
            out.answer_ids.push_back(corpus.token_id(q.answer));
        }
        out.samples.push_back({Tensor<T>::from({steps, dim}, std::move(x)),
                               Tensor<T>::from({steps, dim}, std::move(y)),
                               Tensor<T>::from({steps}, std::move(mask))});
    }
    return out;
}

// Fraction of questions whose predicted token id differs from the answer.
inline double babi_error_rate(const std::vector<std::size_t>& predictions, const BabiCorpus& corpus) {
    std::vector<std::size_t> answers;
    for (const auto& s : corpus.stories)
        for (const auto& q : s.questions) answers.push_back(corpus.token_id(q.answer));
    if (predictions.size() != answers.size())
        throw ArgumentError("babi: prediction count " + std::to_string(predictions.size()) +
                            " does not match question count " + std::to_string(answers.size()));
    if (answers.empty()) throw ArgumentError("babi: corpus has no questions");
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < answers.size(); ++i)
        if (predictions[i] != answers[i]) ++wrong;
    return static_cast<double>(wrong) / static_cast<double>(answers.size());
}

}  // namespace demondnc
