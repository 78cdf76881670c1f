#pragma once

#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "fourierage/autograd.hpp"
#include "fourierage/fourierformer.hpp"
#include "fourierage/tensor.hpp"

namespace fourierage {

struct AlignmentConfig {
    float tau = 0.07f;    // softmax temperature
    float ln_eps = 1e-5f; // normalizer eps of the mixer blocks
    bool mixer_activation = true;  // nonlinearity inside the mixer blocks
    int dim = 64;         // shared projection dimension D
    int text_depth = 1;   // mixer blocks in the text encoder
    int image_depth = 2;  // mixer blocks in the image encoder
    int decoder_depth = 2;  // mixer blocks in the prompting decoder
    int patch = 4;          // image patch side
    int context_tokens = 9; // learnable context tokens prepended to prompts
    int age_min = 1;
    int age_max = 80;
    int max_tokens = 16;  // token budget per prompt before truncation
    std::string prompt_template = "a photo of a {age} year old person";
};

// Word-level tokenizer over the closed prompt vocabulary: the age templates
// generate a small fixed word set, so byte-pair machinery buys nothing here.
class Tokenizer {
public:
    static constexpr int kSos = 0;
    static constexpr int kEos = 1;
    static constexpr int kUnk = 2;

    Tokenizer();

    // Lowercase, split on whitespace, wrap in the start/end markers. Unknown
    // words map to the reserved id. Empty text is a contract violation.
    std::vector<int> tokenize(const std::string& text) const;

    // Inverse map over the payload tokens; reproduces the lowercased input
    // for in-vocabulary text.
    std::string detokenize(const std::vector<int>& ids) const;

    int vocab_size() const { return static_cast<int>(words_.size()); }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> ids_;
};

// Expands "{age}" in the template.
std::string prompt_for_age(const std::string& prompt_template, int age);

// One prompt per integer age plus the shared learnable context embeddings.
struct PromptSet {
    std::vector<int> ages;                 // strictly increasing
    std::vector<std::vector<int>> tokens;  // token ids per age class
    ag::Var context;                       // [K, D]
};

PromptSet make_prompt_set(const Tokenizer& tok, const AlignmentConfig& cfg, std::mt19937& gen);

struct TextEncoderParams {
    ag::Var table;  // [V, D] token embeddings
    std::vector<BlockParams> blocks;
    ag::Var proj_w, proj_b;  // [D, D], [D]

    std::vector<ag::Var> all() const;
};

TextEncoderParams make_text_encoder(const AlignmentConfig& cfg, int vocab, std::mt19937& gen);

struct TextEncoding {
    ag::Var embedding;  // [D]
    bool truncated = false;
};

// Embed tokens, prepend the context block, mix with the frequency-domain
// encoder, read the end-marker position, project to D. Over-length prompts
// are truncated (keeping the end marker) and flagged.
TextEncoding encode_text(const std::vector<int>& tokens, const ag::Var& context,
                         const TextEncoderParams& p, const AlignmentConfig& cfg);

// All prompt classes stacked: [C, D].
ag::Var encode_prompts(const PromptSet& prompts, const TextEncoderParams& p,
                       const AlignmentConfig& cfg);

struct ImageEncoderParams {
    ag::Var patch_w, patch_b;  // [P*P*Cin, D], [D]
    std::vector<BlockParams> blocks;

    std::vector<ag::Var> all() const;
};

ImageEncoderParams make_image_encoder(const AlignmentConfig& cfg, int in_channels,
                                      std::mt19937& gen);

struct ImageEncoding {
    ag::Var embedding;  // [D] mean-pooled
    ag::Var grid;       // [h, w, D] pre-pool visual context
};

// Patchify, linearly embed, run the mixer stack, mean-pool. The pre-pool grid
// is returned as visual context for the prompting decoder.
ImageEncoding encode_image(const ag::Var& x, const ImageEncoderParams& p,
                           const AlignmentConfig& cfg);

// cos(rows_i, cols_j)/tau, softmax-normalized along each row: pass
// (images, texts) for the inference orientation (rows sum to 1 over age
// classes) and (texts, images) for the training orientation.
ag::Var similarity_matrix(const ag::Var& rows, const ag::Var& cols, float tau);

// Value-level view of a normalized score matrix.
struct SimilarityMatrix {
    Tensor scores;
    float tau = 0.07f;
};

// Image-text matching objective over N matched pairs: cross-entropy of each
// text against its image plus the mean log-probability of the mismatched
// pairs (which rewards spreading the remaining mass, and makes the loss
// unbounded below as mismatches vanish). `eps_floor` > 0 optionally clamps
// the probabilities inside the logs; default off. N=1 gives exactly 0.
ag::Var matching_loss(const ag::Var& texts, const ag::Var& images, float tau,
                      float eps_floor = 0.0f);

struct PromptDecoderParams {
    std::vector<BlockParams> blocks;
    ag::Var proj_w, proj_b;  // [D, D], [D]; zero-initialized so the
                             // refinement starts as the identity

    std::vector<ag::Var> all() const;
};

PromptDecoderParams make_prompt_decoder(const AlignmentConfig& cfg, std::mt19937& gen);

// Mix the visual grid, pool, project, and add the result to every text
// state: a single residual refinement of the text features by the image.
ag::Var visual_context_prompting(const ag::Var& text_states, const ag::Var& grid,
                                 const PromptDecoderParams& p, const AlignmentConfig& cfg);

// Expected age under a normalized score row; argmax readout behind the flag.
// The row must sum to 1 (it comes from similarity_matrix).
float predict_age(const Tensor& row, const std::vector<int>& ages, bool argmax = false);

}  // namespace fourierage
