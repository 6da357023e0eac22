#pragma once

// Synthetic grounding and pure-text tasks over a small fixed vocabulary.
//
// Grounding prompt: BOS, system text, VISION_START, one token per grid cell
// (TARGET at one cell, BG elsewhere), VISION_END, query. Cells appear in a
// random order per image; each visual token carries its patch coordinate,
// which the model turns into a position code. The answer spells
// "point_2d:[x,y]" as POINT COLON LBRACK <x digits> COMMA <y digits> RBRACK
// with x the column and y the row of the target cell.

#include "ilora/geometry.hpp"
#include "ilora/model.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ilora {

namespace tok {
inline constexpr int PAD = 0, BOS = 1, EOS = 2, VISION_START = 3, VISION_END = 4, BG = 5, TARGET = 6;
inline constexpr int POINT = 7, COLON = 8, LBRACK = 9, COMMA = 10, RBRACK = 11;
inline constexpr int DIGIT0 = 12; // 12..21 are the digits 0..9
inline constexpr int PLUS = 22, EQUALS = 23, QMARK = 24;
inline constexpr int FILLER0 = 25; // 25..63 plain text tokens
inline constexpr int VOCAB = 64;
} // namespace tok

inline int digit_token(int d) { return tok::DIGIT0 + d; }
inline bool is_digit_token(int t) { return t >= tok::DIGIT0 && t < tok::DIGIT0 + 10; }

using Cell = PatchCoord;

struct Example {
    std::vector<int> prompt;
    std::vector<int> answer;
    // Marker positions inside the prompt; absent for pure text.
    std::optional<std::size_t> vision_start, vision_end;
    std::optional<Cell> target;
    std::size_t grid_rows = 0, grid_cols = 0;
    std::vector<std::uint8_t> gt_mask; // one entry per visual token
    std::vector<PatchCoord> patches;   // one entry per visual token

    // Forward options carrying this example's patch coordinates.
    ForwardOptions options(const AdapterSet* adapters = nullptr) const;

    // Teacher-forced input: prompt followed by every answer token but the last.
    std::vector<int> input_ids() const;
    // Next-token targets aligned with input_ids(); -1 outside the answer.
    std::vector<int> targets() const;
    TokenLayout layout() const;        // over input_ids()
    TokenLayout prompt_layout() const; // over the prompt alone
    std::size_t visual_count() const;
    // Non-visual prompt tokens, markers included.
    std::size_t text_count() const;

    bool operator==(const Example&) const = default;
};

// Mean cross-entropy over the answer tokens of one example. The example's
// patch coordinates are used unless opts already carries some.
Tensor answer_loss(const Model& model, const Example& ex, const ForwardOptions& opts = {});

struct GroundingSpec {
    std::size_t rows = 6, cols = 6;
    std::size_t text_pad = 4; // system-prompt filler tokens
    bool shuffle = true;      // random cell order inside the visual span
};

// Query tokens closing every grounding prompt.
const std::vector<int>& grounding_query();

// Non-visual prompt length for a given pad (BOS, pad, markers, query).
std::size_t grounding_text_tokens(std::size_t text_pad);

std::vector<int> encode_point(Cell c);
// Inverse of encode_point on a prefix of `tokens` (trailing tokens such as EOS
// are ignored); nullopt for malformed token strings.
std::optional<Cell> parse_point(const std::vector<int>& tokens);

// order[k] is the row-major cell index shown at visual position k; empty
// means row-major order.
Example make_grounding_example(const GroundingSpec& spec, Cell target, std::span<const std::size_t> order = {});
std::vector<Example> gen_grounding(std::uint64_t seed, std::size_t n, const GroundingSpec& spec,
                                   std::size_t max_seq = 512);
// Small additions "a+b=?" with answer digits then EOS; no visual span.
std::vector<Example> gen_puretext(std::uint64_t seed, std::size_t n);

// Fraction of predictions whose parsed point lies in the target cell; malformed predictions miss.
double accuracy(const std::vector<std::vector<int>>& predictions, const std::vector<Example>& dataset);

std::string to_jsonl(const std::vector<Example>& dataset);
std::vector<Example> from_jsonl(const std::string& text);
void write_jsonl(const std::string& path, const std::vector<Example>& dataset);
std::vector<Example> read_jsonl(const std::string& path);

} // namespace ilora
