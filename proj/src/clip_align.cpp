#include "fourierage/clip_align.hpp"

#include <cctype>
#include <cmath>

#include "fourierage/errors.hpp"

namespace fourierage {

namespace {

FPEConfig mixer_config(const AlignmentConfig& cfg) {
    FPEConfig b;
    b.channels = cfg.dim;
    b.ln_eps = cfg.ln_eps;
    b.activation = cfg.mixer_activation;
    return b;
}

// Random small spectral maps so a block mixes positions from the start.
// Zero-initialized blocks are the identity, which would leave every prompt's
// end-marker state equal to the end-marker embedding itself.
BlockParams init_block(const FPEConfig& cfg, std::mt19937& gen, float scale) {
    BlockParams p = make_block_params(cfg);
    const int c = cfg.channels;
    const float ws = scale / std::sqrt(static_cast<float>(c));
    p.spatial_re_kernel = ag::param(rand_uniform({3, 3, c}, gen, -scale, scale));
    p.spatial_im_kernel = ag::param(rand_uniform({3, 3, c}, gen, -scale, scale));
    p.channel_re_weight = ag::param(rand_uniform({c, c}, gen, -ws, ws));
    p.channel_im_weight = ag::param(rand_uniform({c, c}, gen, -ws, ws));
    return p;
}

std::vector<BlockParams> init_blocks(const AlignmentConfig& cfg, int depth, std::mt19937& gen) {
    std::vector<BlockParams> out;
    out.reserve(static_cast<std::size_t>(depth));
    FPEConfig mc = mixer_config(cfg);
    for (int i = 0; i < depth; ++i) out.push_back(init_block(mc, gen, 0.3f));
    return out;
}

void append_blocks(std::vector<ag::Var>& vars, const std::vector<BlockParams>& blocks) {
    for (const auto& b : blocks) {
        auto v = b.all();
        vars.insert(vars.end(), v.begin(), v.end());
    }
}

}  // namespace

Tokenizer::Tokenizer() {
    words_ = {"<sos>", "<eos>", "<unk>", "a", "photo", "of", "year", "old", "person"};
    for (int age = 1; age <= 80; ++age) words_.push_back(std::to_string(age));
    for (std::size_t i = 0; i < words_.size(); ++i) ids_[words_[i]] = static_cast<int>(i);
}

std::vector<int> Tokenizer::tokenize(const std::string& text) const {
    if (text.empty()) throw ContractError("tokenize: empty text");
    std::vector<int> out{kSos};
    std::string word;
    auto flush = [&] {
        if (word.empty()) return;
        auto it = ids_.find(word);
        out.push_back(it == ids_.end() ? kUnk : it->second);
        word.clear();
    };
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch)))
            flush();
        else
            word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
    flush();
    out.push_back(kEos);
    return out;
}

std::string Tokenizer::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id == kSos || id == kEos) continue;
        if (id < 0 || id >= vocab_size()) throw DimensionError("detokenize: id out of range");
        if (!out.empty()) out.push_back(' ');
        out += words_[static_cast<std::size_t>(id)];
    }
    return out;
}

std::string prompt_for_age(const std::string& prompt_template, int age) {
    const std::string key = "{age}";
    const std::size_t pos = prompt_template.find(key);
    if (pos == std::string::npos)
        throw ConfigError("prompt template missing {age} placeholder: " + prompt_template);
    std::string out = prompt_template;
    out.replace(pos, key.size(), std::to_string(age));
    return out;
}

PromptSet make_prompt_set(const Tokenizer& tok, const AlignmentConfig& cfg, std::mt19937& gen) {
    if (cfg.age_min > cfg.age_max) throw ConfigError("make_prompt_set: empty age range");
    if (cfg.context_tokens < 0) throw ConfigError("make_prompt_set: negative context size");
    PromptSet ps;
    for (int age = cfg.age_min; age <= cfg.age_max; ++age) {
        ps.ages.push_back(age);
        ps.tokens.push_back(tok.tokenize(prompt_for_age(cfg.prompt_template, age)));
    }
    ps.context = ag::param(rand_uniform({cfg.context_tokens, cfg.dim}, gen, -0.1f, 0.1f));
    return ps;
}

std::vector<ag::Var> TextEncoderParams::all() const {
    std::vector<ag::Var> v{table, proj_w, proj_b};
    append_blocks(v, blocks);
    return v;
}

TextEncoderParams make_text_encoder(const AlignmentConfig& cfg, int vocab, std::mt19937& gen) {
    const float es = 1.0f / std::sqrt(static_cast<float>(cfg.dim));
    TextEncoderParams p;
    p.table = ag::param(rand_uniform({vocab, cfg.dim}, gen, -es, es));
    p.blocks = init_blocks(cfg, cfg.text_depth, gen);
    p.proj_w = ag::param(rand_uniform({cfg.dim, cfg.dim}, gen, -es, es));
    p.proj_b = ag::param(Tensor::zeros({cfg.dim}));
    return p;
}

TextEncoding encode_text(const std::vector<int>& tokens, const ag::Var& context,
                         const TextEncoderParams& p, const AlignmentConfig& cfg) {
    if (tokens.empty()) throw ContractError("encode_text: empty token sequence");
    std::vector<int> ids = tokens;
    bool truncated = false;
    if (static_cast<int>(ids.size()) > cfg.max_tokens) {
        ids.resize(static_cast<std::size_t>(cfg.max_tokens));
        ids.back() = Tokenizer::kEos;
        truncated = true;
    }
    ag::Var seq = ag::concat({context, ag::take_rows(p.table, ids)}, 0);  // [K+T, D]
    const int t = seq->value.dim(0);
    ag::Var mixed = fourierformer_forward(ag::reshape(seq, {t, 1, cfg.dim}), p.blocks,
                                          mixer_config(cfg));
    ag::Var eos = ag::slice(ag::reshape(mixed, {t, cfg.dim}), 0, t - 1, 1);  // [1, D]
    ag::Var emb = ag::add_bias(ag::matmul(eos, p.proj_w), p.proj_b);
    return {ag::reshape(emb, {cfg.dim}), truncated};
}

ag::Var encode_prompts(const PromptSet& prompts, const TextEncoderParams& p,
                       const AlignmentConfig& cfg) {
    std::vector<ag::Var> rows;
    rows.reserve(prompts.tokens.size());
    for (const auto& ids : prompts.tokens) {
        TextEncoding e = encode_text(ids, prompts.context, p, cfg);
        rows.push_back(ag::reshape(e.embedding, {1, cfg.dim}));
    }
    return ag::concat(rows, 0);
}

std::vector<ag::Var> ImageEncoderParams::all() const {
    std::vector<ag::Var> v{patch_w, patch_b};
    append_blocks(v, blocks);
    return v;
}

ImageEncoderParams make_image_encoder(const AlignmentConfig& cfg, int in_channels,
                                      std::mt19937& gen) {
    const int fan_in = cfg.patch * cfg.patch * in_channels;
    const float ps = 1.0f / std::sqrt(static_cast<float>(fan_in));
    ImageEncoderParams p;
    p.patch_w = ag::param(rand_uniform({fan_in, cfg.dim}, gen, -ps, ps));
    p.patch_b = ag::param(Tensor::zeros({cfg.dim}));
    p.blocks = init_blocks(cfg, cfg.image_depth, gen);
    return p;
}

ImageEncoding encode_image(const ag::Var& x, const ImageEncoderParams& p,
                           const AlignmentConfig& cfg) {
    if (x->value.rank() != 3) throw DimensionError("encode_image: rank-3 [H,W,C] input required");
    const int hh = x->value.dim(0), ww = x->value.dim(1), c = x->value.dim(2);
    const int ps = cfg.patch;
    if (ps < 1 || hh % ps != 0 || ww % ps != 0)
        throw DimensionError("encode_image: image " + x->value.shape_string() +
                             " not divisible by patch " + std::to_string(ps));
    const int gh = hh / ps, gw = ww / ps;
    std::vector<std::int64_t> idx;
    idx.reserve(static_cast<std::size_t>(x->value.size()));
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px)
            for (int dy = 0; dy < ps; ++dy)
                for (int dx = 0; dx < ps; ++dx)
                    for (int ch = 0; ch < c; ++ch)
                        idx.push_back((static_cast<std::int64_t>(py * ps + dy) * ww +
                                       (px * ps + dx)) * c + ch);
    ag::Var patches = ag::reshape(ag::take(x, std::move(idx)), {gh * gw, ps * ps * c});
    ag::Var grid = ag::add_bias(ag::matmul(patches, p.patch_w), p.patch_b);
    grid = fourierformer_forward(ag::reshape(grid, {gh, gw, cfg.dim}), p.blocks,
                                 mixer_config(cfg));
    return {ag::mean_tokens(grid), grid};
}

ag::Var similarity_matrix(const ag::Var& rows, const ag::Var& cols, float tau) {
    if (tau <= 0.0f) throw ContractError("similarity_matrix: tau must be positive");
    ag::Var rn = ag::l2_normalize_rows(rows);
    ag::Var cn = ag::l2_normalize_rows(cols);
    return ag::softmax_rows(ag::scale(ag::matmul(rn, ag::transpose(cn)), 1.0f / tau));
}

ag::Var matching_loss(const ag::Var& texts, const ag::Var& images, float tau, float eps_floor) {
    if (texts->value.rank() != 2 || images->value.rank() != 2 ||
        !texts->value.same_shape(images->value))
        throw DimensionError("matching_loss: paired [N,D] embeddings required, got " +
                             texts->value.shape_string() + " vs " + images->value.shape_string());
    const int n = texts->value.dim(0);
    ag::Var probs = similarity_matrix(texts, images, tau);  // [N,N], rows over images
    ag::Var lp = eps_floor > 0.0f ? ag::log(ag::add_scalar(probs, eps_floor)) : ag::log(probs);
    Tensor diag = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i) diag.at({i, i}) = 1.0f;
    ag::Var diag_sum = ag::sum(ag::mul(lp, ag::constant(diag)));
    ag::Var loss = ag::scale(diag_sum, -1.0f / static_cast<float>(n));
    if (n > 1) {
        ag::Var off_sum = ag::sub(ag::sum(lp), diag_sum);
        loss = ag::add(loss, ag::scale(off_sum, 1.0f / (static_cast<float>(n) * (n - 1))));
    }
    return loss;
}

std::vector<ag::Var> PromptDecoderParams::all() const {
    std::vector<ag::Var> v{proj_w, proj_b};
    append_blocks(v, blocks);
    return v;
}

PromptDecoderParams make_prompt_decoder(const AlignmentConfig& cfg, std::mt19937& gen) {
    PromptDecoderParams p;
    p.blocks = init_blocks(cfg, cfg.decoder_depth, gen);
    p.proj_w = ag::param(Tensor::zeros({cfg.dim, cfg.dim}));
    p.proj_b = ag::param(Tensor::zeros({cfg.dim}));
    return p;
}

ag::Var visual_context_prompting(const ag::Var& text_states, const ag::Var& grid,
                                 const PromptDecoderParams& p, const AlignmentConfig& cfg) {
    if (text_states->value.rank() != 2 || text_states->value.dim(1) != cfg.dim)
        throw DimensionError("visual_context_prompting: text states must be [C," +
                             std::to_string(cfg.dim) + "]");
    if (grid->value.rank() != 3 || grid->value.dim(2) != cfg.dim)
        throw DimensionError("visual_context_prompting: grid must be [h,w," +
                             std::to_string(cfg.dim) + "]");
    ag::Var mixed = fourierformer_forward(grid, p.blocks, mixer_config(cfg));
    ag::Var pooled = ag::reshape(ag::mean_tokens(mixed), {1, cfg.dim});
    ag::Var refine = ag::add_bias(ag::matmul(pooled, p.proj_w), p.proj_b);
    return ag::add_bias(text_states, ag::reshape(refine, {cfg.dim}));
}

float predict_age(const Tensor& row, const std::vector<int>& ages, bool argmax) {
    if (row.size() != static_cast<std::int64_t>(ages.size()))
        throw DimensionError("predict_age: " + std::to_string(row.size()) + " scores vs " +
                             std::to_string(ages.size()) + " ages");
    if (ages.empty()) throw ContractError("predict_age: empty score row");
    double total = 0.0;
    for (std::int64_t i = 0; i < row.size(); ++i) total += row[i];
    if (std::fabs(total - 1.0) > 1e-5)
        throw ContractError("predict_age: scores sum to " + std::to_string(total) + ", not 1");
    if (argmax) {
        std::int64_t best = 0;
        for (std::int64_t i = 1; i < row.size(); ++i)
            if (row[i] > row[best]) best = i;
        return static_cast<float>(ages[static_cast<std::size_t>(best)]);
    }
    double acc = 0.0;
    for (std::int64_t i = 0; i < row.size(); ++i) acc += static_cast<double>(row[i]) * ages[static_cast<std::size_t>(i)];
    return static_cast<float>(acc);
}

}  // namespace fourierage
