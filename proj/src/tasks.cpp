#include "ilora/tasks.hpp"

#include "ilora/errors.hpp"
#include "ilora/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace ilora {

using nlohmann::json;

std::vector<int> Example::input_ids() const {
    std::vector<int> ids = prompt;
    if (!answer.empty()) ids.insert(ids.end(), answer.begin(), answer.end() - 1);
    return ids;
}

std::vector<int> Example::targets() const {
    const std::size_t n = prompt.size() + (answer.empty() ? 0 : answer.size() - 1);
    std::vector<int> t(n, -1);
    for (std::size_t k = 0; k < answer.size(); ++k) t[prompt.size() - 1 + k] = answer[k];
    return t;
}

TokenLayout Example::layout() const { return prompt_layout().resized(input_ids().size()); }

TokenLayout Example::prompt_layout() const {
    if (vision_start && vision_end) return TokenLayout::with_markers(prompt.size(), *vision_start, *vision_end);
    return TokenLayout::text_only(prompt.size());
}

std::size_t Example::visual_count() const { return prompt_layout().visual_count(); }
std::size_t Example::text_count() const { return prompt.size() - visual_count(); }

ForwardOptions Example::options(const AdapterSet* adapters) const {
    ForwardOptions o;
    o.adapters = adapters;
    o.patches = patches;
    return o;
}

Tensor answer_loss(const Model& model, const Example& ex, const ForwardOptions& opts) {
    if (ex.prompt.empty()) throw ContractError("answer_loss: empty prompt");
    const auto ids = ex.input_ids();
    const auto targets = ex.targets();
    ForwardOptions o = opts;
    if (o.patches.empty()) o.patches = ex.patches;
    return cross_entropy(model.forward(ids, ex.layout(), o), std::span<const int>(targets));
}

const std::vector<int>& grounding_query() {
    static const std::vector<int> q{tok::FILLER0 + 1, tok::FILLER0 + 2, tok::POINT, tok::QMARK};
    return q;
}

std::size_t grounding_text_tokens(std::size_t text_pad) { return 1 + text_pad + 2 + grounding_query().size(); }

namespace {

void append_number(std::vector<int>& out, std::size_t v) {
    const std::string s = std::to_string(v);
    for (char c : s) out.push_back(digit_token(c - '0'));
}

// Fixed system-prompt text: the same filler sequence in every example.
std::vector<int> system_text(std::size_t n) {
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = tok::FILLER0 + 3 + static_cast<int>((i * 7) % 36);
    return out;
}

} // namespace

std::vector<int> encode_point(Cell c) {
    std::vector<int> out{tok::POINT, tok::COLON, tok::LBRACK};
    append_number(out, c.col);
    out.push_back(tok::COMMA);
    append_number(out, c.row);
    out.push_back(tok::RBRACK);
    return out;
}

std::optional<Cell> parse_point(const std::vector<int>& t) {
    if (t.size() < 7 || t[0] != tok::POINT || t[1] != tok::COLON || t[2] != tok::LBRACK) return std::nullopt;
    std::size_t i = 3;
    auto number = [&](std::size_t& out) {
        const std::size_t start = i;
        out = 0;
        while (i < t.size() && is_digit_token(t[i])) out = out * 10 + static_cast<std::size_t>(t[i++] - tok::DIGIT0);
        return i > start && i - start <= 6;
    };
    Cell c;
    if (!number(c.col) || i >= t.size() || t[i++] != tok::COMMA) return std::nullopt;
    if (!number(c.row) || i >= t.size() || t[i++] != tok::RBRACK) return std::nullopt;
    return c;
}

Example make_grounding_example(const GroundingSpec& spec, Cell target, std::span<const std::size_t> order) {
    if (spec.rows == 0 || spec.cols == 0) throw ContractError("grounding: empty grid");
    if (target.row >= spec.rows || target.col >= spec.cols) throw ContractError("grounding: target outside grid");
    const std::size_t n = spec.rows * spec.cols;
    std::vector<std::size_t> cells(n);
    if (order.empty()) {
        std::iota(cells.begin(), cells.end(), 0);
    } else {
        if (order.size() != n) throw ContractError("grounding: order must list every cell once");
        std::vector<bool> seen(n, false);
        for (std::size_t k = 0; k < n; ++k) {
            if (order[k] >= n || seen[order[k]]) throw ContractError("grounding: order must list every cell once");
            seen[order[k]] = true;
            cells[k] = order[k];
        }
    }
    Example ex;
    ex.grid_rows = spec.rows;
    ex.grid_cols = spec.cols;
    ex.target = target;
    ex.prompt.push_back(tok::BOS);
    const auto sys = system_text(spec.text_pad);
    ex.prompt.insert(ex.prompt.end(), sys.begin(), sys.end());
    ex.vision_start = ex.prompt.size();
    ex.prompt.push_back(tok::VISION_START);
    const std::size_t target_cell = target.row * spec.cols + target.col;
    for (std::size_t c : cells) {
        const bool hit = c == target_cell;
        ex.gt_mask.push_back(hit ? 1 : 0);
        ex.patches.push_back({c / spec.cols, c % spec.cols});
        ex.prompt.push_back(hit ? tok::TARGET : tok::BG);
    }
    ex.vision_end = ex.prompt.size();
    ex.prompt.push_back(tok::VISION_END);
    const auto& q = grounding_query();
    ex.prompt.insert(ex.prompt.end(), q.begin(), q.end());
    ex.answer = encode_point(target);
    return ex;
}

std::vector<Example> gen_grounding(std::uint64_t seed, std::size_t n, const GroundingSpec& spec, std::size_t max_seq) {
    const std::size_t len = grounding_text_tokens(spec.text_pad) + spec.rows * spec.cols +
                            encode_point({spec.rows - 1, spec.cols - 1}).size();
    if (len > max_seq)
        throw CapacityError("grounding: example length " + std::to_string(len) + " exceeds max_seq " +
                            std::to_string(max_seq));
    Rng rng(derive_seed(seed, "grounding"));
    std::uniform_int_distribution<std::size_t> row(0, spec.rows - 1), col(0, spec.cols - 1);
    std::vector<std::size_t> order(spec.rows * spec.cols);
    std::vector<Example> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t r = row(rng);
        const Cell target{r, col(rng)};
        std::iota(order.begin(), order.end(), 0);
        if (spec.shuffle) std::shuffle(order.begin(), order.end(), rng);
        out.push_back(make_grounding_example(spec, target, order));
    }
    return out;
}

std::vector<Example> gen_puretext(std::uint64_t seed, std::size_t n) {
    Rng rng(derive_seed(seed, "puretext"));
    std::uniform_int_distribution<int> operand(0, 49), filler(tok::FILLER0, tok::VOCAB - 1), pad(0, 6);
    std::vector<Example> out;
    for (std::size_t i = 0; i < n; ++i) {
        Example ex;
        ex.prompt.push_back(tok::BOS);
        for (int k = pad(rng); k > 0; --k) ex.prompt.push_back(filler(rng));
        const int a = operand(rng), b = operand(rng);
        append_number(ex.prompt, static_cast<std::size_t>(a));
        ex.prompt.push_back(tok::PLUS);
        append_number(ex.prompt, static_cast<std::size_t>(b));
        ex.prompt.push_back(tok::EQUALS);
        ex.prompt.push_back(tok::QMARK);
        append_number(ex.answer, static_cast<std::size_t>(a + b));
        ex.answer.push_back(tok::EOS);
        out.push_back(std::move(ex));
    }
    return out;
}

double accuracy(const std::vector<std::vector<int>>& predictions, const std::vector<Example>& dataset) {
    if (predictions.size() != dataset.size())
        throw ContractError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                            std::to_string(dataset.size()) + " examples");
    if (dataset.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto p = parse_point(predictions[i]);
        if (p && dataset[i].target && *p == *dataset[i].target) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(dataset.size());
}

namespace {

json example_json(const Example& ex) {
    json j;
    j["kind"] = ex.target ? "grounding" : "text";
    j["prompt"] = ex.prompt;
    j["answer"] = ex.answer;
    if (ex.vision_start) {
        j["vision_start"] = *ex.vision_start;
        j["vision_end"] = *ex.vision_end;
    }
    if (ex.target) {
        j["grid"] = {ex.grid_rows, ex.grid_cols};
        j["target"] = {ex.target->row, ex.target->col};
        j["mask"] = ex.gt_mask;
    }
    if (!ex.patches.empty()) {
        json p = json::array();
        for (const auto& c : ex.patches) p.push_back({c.row, c.col});
        j["patches"] = p;
    }
    return j;
}

Example example_from_json(const json& j) {
    static const std::vector<std::string> known{"kind", "prompt", "answer", "vision_start", "vision_end",
                                                "grid", "target", "mask", "patches"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ConfigError("dataset: unknown key '" + it.key() + "'");
    Example ex;
    ex.prompt = j.at("prompt").get<std::vector<int>>();
    ex.answer = j.at("answer").get<std::vector<int>>();
    for (int t : ex.prompt)
        if (t < 0 || t >= tok::VOCAB) throw ConfigError("dataset: token id out of range");
    if (j.contains("vision_start")) {
        ex.vision_start = j.at("vision_start").get<std::size_t>();
        ex.vision_end = j.at("vision_end").get<std::size_t>();
        ex.prompt_layout(); // validates marker positions
    }
    if (j.contains("target")) {
        const auto g = j.at("grid").get<std::vector<std::size_t>>();
        const auto t = j.at("target").get<std::vector<std::size_t>>();
        if (g.size() != 2 || t.size() != 2) throw ConfigError("dataset: grid and target need two entries");
        ex.grid_rows = g[0];
        ex.grid_cols = g[1];
        ex.target = Cell{t[0], t[1]};
        ex.gt_mask = j.at("mask").get<std::vector<std::uint8_t>>();
        if (ex.gt_mask.size() != ex.visual_count()) throw ConfigError("dataset: mask size differs from the visual span");
    }
    if (j.contains("patches")) {
        for (const auto& p : j.at("patches")) {
            const auto rc = p.get<std::vector<std::size_t>>();
            if (rc.size() != 2) throw ConfigError("dataset: patch coordinates need two entries");
            ex.patches.push_back({rc[0], rc[1]});
        }
        if (ex.patches.size() != ex.visual_count()) throw ConfigError("dataset: patch count differs from the visual span");
    }
    return ex;
}

} // namespace

std::string to_jsonl(const std::vector<Example>& dataset) {
    std::string out;
    for (const auto& ex : dataset) out += example_json(ex).dump() + "\n";
    return out;
}

std::vector<Example> from_jsonl(const std::string& text) {
    std::vector<Example> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(example_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ConfigError("dataset line " + std::to_string(lineno) + ": " + e.what());
        } catch (const ContractError& e) {
            throw ConfigError("dataset line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void write_jsonl(const std::string& path, const std::vector<Example>& dataset) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << to_jsonl(dataset);
}

std::vector<Example> read_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open dataset " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_jsonl(ss.str());
}

} // namespace ilora
