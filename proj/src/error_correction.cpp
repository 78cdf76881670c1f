#include "fourierage/error_correction.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "fourierage/errors.hpp"

namespace fourierage {

namespace {

using ag::Var;

// Two-layer perceptron on a [1,n] row; shared by members and the generator.
Var mlp_row(const Var& row, const Var& w1, const Var& b1, const Var& w2, const Var& b2) {
    Var h = ag::leaky_relu(ag::add_bias(ag::matmul(row, w1), b1), 0.2f);
    return ag::add_bias(ag::matmul(h, w2), b2);
}

Var member_row(const EnsembleMember& m, const Var& embedding, const Var& age, float age_scale) {
    Var input = ag::concat({embedding, ag::scale(age, 1.0f / age_scale)}, 0);
    const int n = input->value.dim(0);
    return mlp_row(ag::reshape(input, {1, n}), m.w1, m.b1, m.w2, m.b2);
}

// Stacked member estimates [L,k] at a differentiable age.
Var stacked_estimates(const EnsembleState& ensemble, const Var& embedding, const Var& age) {
    std::vector<Var> rows;
    rows.reserve(ensemble.members.size());
    for (const auto& m : ensemble.members)
        rows.push_back(member_row(m, embedding, age, ensemble.age_scale));
    return ag::concat(rows, 0);
}

}  // namespace

float abs_error(float pred, float label) { return std::fabs(pred - label); }

float squared_error(float pred, float label) {
    const float d = pred - label;
    return d * d;
}

const std::vector<ErrorMetric>& default_error_metrics() {
    static const std::vector<ErrorMetric> metrics{abs_error, squared_error};
    return metrics;
}

ErrorVector compute_error_vector(float pred, float label, const std::vector<ErrorMetric>& metrics) {
    if (metrics.empty()) throw ContractError("compute_error_vector: empty metric list");
    ErrorVector e;
    e.values = Tensor({static_cast<int>(metrics.size())});
    for (std::size_t i = 0; i < metrics.size(); ++i)
        e.values[static_cast<std::int64_t>(i)] = metrics[i](pred, label);
    e.k = 0;
    return e;
}

ag::Var ErrorWeights::weights() const {
    const int h = logits->value.dim(0);
    return ag::reshape(ag::softmax_rows(ag::reshape(logits, {1, h})), {h});
}

Tensor ErrorWeights::weight_values() const { return weights()->value; }

ErrorWeights make_error_weights(int h) {
    if (h < 1) throw ContractError("make_error_weights: h must be >= 1");
    ErrorWeights w;
    w.logits = ag::param(Tensor::zeros({h}));
    return w;
}

float weighted_error(const ErrorVector& e, const ErrorWeights& w) {
    if (e.h() != w.h()) {
        throw DimensionError("weighted_error: " + std::to_string(e.h()) + " components vs " +
                             std::to_string(w.h()) + " weights");
    }
    const Tensor wv = w.weight_values();
    double acc = 0.0;
    for (std::int64_t i = 0; i < wv.size(); ++i)
        acc += static_cast<double>(wv[i]) * e.values[i];
    return static_cast<float>(acc);
}

std::vector<ag::Var> EnsembleMember::all() const { return {w1, b1, w2, b2}; }

EnsembleState make_ensemble(int members, int dim, int hidden, int k, std::mt19937& gen,
                            float scale) {
    if (members < 1) throw ContractError("make_ensemble: need at least one member");
    if (dim < 1 || hidden < 1 || k < 1) throw ContractError("make_ensemble: bad dimensions");
    EnsembleState s;
    s.dim = dim;
    s.k = k;
    for (int m = 0; m < members; ++m) {
        EnsembleMember mem;
        mem.w1 = ag::param(rand_uniform({dim + 1, hidden}, gen, -scale, scale));
        mem.b1 = ag::param(Tensor::zeros({hidden}));
        mem.w2 = ag::param(rand_uniform({hidden, k}, gen, -scale, scale));
        mem.b2 = ag::param(Tensor::zeros({k}));
        s.members.push_back(std::move(mem));
    }
    return s;
}

ag::Var member_forward(const EnsembleMember& m, const ag::Var& embedding, const ag::Var& age,
                       float age_scale) {
    if (age->value.size() != 1)
        throw DimensionError("member_forward: age must be a single value");
    Var row = member_row(m, embedding, age, age_scale);
    return ag::reshape(row, {row->value.dim(1)});
}

Tensor ensemble_estimate(const Tensor& embedding, float age, const EnsembleState& ensemble) {
    if (ensemble.members.empty()) throw ContractError("ensemble_estimate: empty ensemble");
    std::vector<double> acc(static_cast<std::size_t>(ensemble.k), 0.0);
    for (const auto& m : ensemble.members) {
        Var out = member_forward(m, ag::constant(embedding), ag::constant(Tensor::full({1}, age)),
                                 ensemble.age_scale);
        for (int j = 0; j < ensemble.k; ++j) acc[static_cast<std::size_t>(j)] += out->value[j];
    }
    Tensor e({ensemble.k});
    for (int j = 0; j < ensemble.k; ++j)
        e[j] = static_cast<float>(acc[static_cast<std::size_t>(j)] / ensemble.size());
    return e;
}

float ensemble_disagreement(const Tensor& embedding, float age, const EnsembleState& ensemble) {
    if (ensemble.members.empty()) throw ContractError("ensemble_disagreement: empty ensemble");
    const int L = ensemble.size(), k = ensemble.k;
    std::vector<double> outs(static_cast<std::size_t>(L) * k);
    for (int m = 0; m < L; ++m) {
        Var out = member_forward(ensemble.members[static_cast<std::size_t>(m)],
                                 ag::constant(embedding), ag::constant(Tensor::full({1}, age)),
                                 ensemble.age_scale);
        for (int j = 0; j < k; ++j) outs[static_cast<std::size_t>(m) * k + j] = out->value[j];
    }
    double total = 0.0;
    for (int j = 0; j < k; ++j) {
        double mean = 0.0;
        for (int m = 0; m < L; ++m) mean += outs[static_cast<std::size_t>(m) * k + j];
        mean /= L;
        double var = 0.0;
        for (int m = 0; m < L; ++m) {
            const double d = outs[static_cast<std::size_t>(m) * k + j] - mean;
            var += d * d;
        }
        total += std::sqrt(var / L);
    }
    return static_cast<float>(total / k);
}

float cumulative_error(const Tensor& embedding, float age, const EnsembleState& ensemble,
                       const ErrorWeights& w, const Tensor& explicit_errors) {
    const int k = ensemble.k, h = w.h();
    if (explicit_errors.rank() != 1 || explicit_errors.dim(0) != h - k) {
        throw DimensionError("cumulative_error: expected " + std::to_string(h - k) +
                             " explicit components, got " + explicit_errors.shape_string());
    }
    const Tensor est = ensemble_estimate(embedding, age, ensemble);
    const Tensor wv = w.weight_values();
    double acc = 0.0;
    for (int j = 0; j < k; ++j) acc += static_cast<double>(wv[j]) * est[j];
    for (int j = k; j < h; ++j) acc += static_cast<double>(wv[j]) * explicit_errors[j - k];
    return static_cast<float>(acc);
}

float cumulative_error(const Tensor& embedding, float age, const EnsembleState& ensemble,
                       const ErrorWeights& w) {
    const int k = ensemble.k, h = w.h();
    if (h != k) {
        throw DimensionError("cumulative_error: " + std::to_string(h - k) +
                             " explicit components required but none given");
    }
    const Tensor est = ensemble_estimate(embedding, age, ensemble);
    const Tensor wv = w.weight_values();
    double acc = 0.0;
    for (int j = 0; j < k; ++j) acc += static_cast<double>(wv[j]) * est[j];
    return static_cast<float>(acc);
}

float estimated_error(const Tensor& embedding, float age, const EnsembleState& ensemble,
                      const ErrorWeights& w) {
    Tensor ex({1});
    ex[0] = ensemble_disagreement(embedding, age, ensemble);
    return cumulative_error(embedding, age, ensemble, w, ex);
}

std::vector<float> train_ensemble(EnsembleState& ensemble, const std::vector<ErrorSample>& data,
                                  const EnsembleTrainOptions& opts) {
    if (data.empty()) throw ContractError("train_ensemble: empty dataset");
    for (const auto& s : data) {
        if (s.embedding.rank() != 1 || s.embedding.dim(0) != ensemble.dim ||
            s.target.rank() != 1 || s.target.dim(0) != ensemble.k) {
            throw DimensionError("train_ensemble: sample shapes do not match the ensemble");
        }
    }
    const int n = static_cast<int>(data.size());
    const int batch = std::min(opts.batch, n);

    // Each member draws its own shuffled order so the ensemble decorrelates.
    std::vector<std::mt19937> rngs;
    std::vector<std::vector<int>> order(ensemble.members.size());
    std::vector<std::size_t> cursor(ensemble.members.size(), 0);
    for (std::size_t m = 0; m < ensemble.members.size(); ++m) {
        rngs.emplace_back(opts.seed + static_cast<unsigned>(m));
        order[m].resize(static_cast<std::size_t>(n));
        std::iota(order[m].begin(), order[m].end(), 0);
        std::shuffle(order[m].begin(), order[m].end(), rngs[m]);
    }

    std::vector<float> losses;
    losses.reserve(static_cast<std::size_t>(opts.steps));
    for (int step = 0; step < opts.steps; ++step) {
        double step_loss = 0.0;
        for (std::size_t m = 0; m < ensemble.members.size(); ++m) {
            EnsembleMember& mem = ensemble.members[m];
            Var loss = ag::constant(Tensor::zeros({1}));
            for (int b = 0; b < batch; ++b) {
                if (cursor[m] == order[m].size()) {
                    std::shuffle(order[m].begin(), order[m].end(), rngs[m]);
                    cursor[m] = 0;
                }
                const ErrorSample& s = data[static_cast<std::size_t>(order[m][cursor[m]++])];
                Var out = member_forward(mem, ag::constant(s.embedding),
                                         ag::constant(Tensor::full({1}, s.age)),
                                         ensemble.age_scale);
                Var diff = ag::sub(out, ag::constant(s.target));
                loss = ag::add(loss, ag::sum(ag::mul(diff, diff)));
            }
            loss = ag::scale(loss, 1.0f / batch);
            ag::backward(loss);
            step_loss += loss->value.item();
            for (const Var& p : mem.all()) {
                if (!p->grad_ready) continue;
                for (std::int64_t i = 0; i < p->value.size(); ++i)
                    p->value[i] -= opts.lr * p->grad[i];
                p->grad_ready = false;
            }
        }
        losses.push_back(static_cast<float>(step_loss / ensemble.size()));
        ++ensemble.steps;
    }
    return losses;
}

std::vector<ag::Var> CandidateGenerator::all() const { return {w1, b1, w2, b2}; }

CandidateGenerator make_generator(int dim, int hidden, int latent_dim, std::mt19937& gen,
                                  float scale) {
    if (dim < 1 || hidden < 1 || latent_dim < 1)
        throw ContractError("make_generator: bad dimensions");
    CandidateGenerator g;
    g.latent_dim = latent_dim;
    g.w1 = ag::param(rand_uniform({dim + latent_dim, hidden}, gen, -scale, scale));
    g.b1 = ag::param(Tensor::zeros({hidden}));
    g.w2 = ag::param(rand_uniform({hidden, 2}, gen, -scale, scale));
    g.b2 = ag::param(Tensor::zeros({2}));
    return g;
}

void validate(const CorrectionConfig& cfg) {
    if (!(cfg.epsilon > 0.0f)) throw ConfigError("correction.epsilon must be > 0");
    if (cfg.t_max < 1) throw ConfigError("correction.t_max must be >= 1");
    if (cfg.candidates < 1) throw ConfigError("correction.candidates must be >= 1");
    if (cfg.members < 1) throw ConfigError("correction.members must be >= 1");
    if (cfg.implicit < 0) throw ConfigError("correction.implicit must be >= 0");
    if (cfg.components < cfg.implicit)
        throw ConfigError("correction.components must be >= correction.implicit");
    if (!(cfg.age_scale > 0.0f)) throw ConfigError("correction.age_scale must be > 0");
    if (cfg.generator_lr < 0.0f) throw ConfigError("correction.generator_lr must be >= 0");
    if (cfg.generator_hidden < 1) throw ConfigError("correction.generator_hidden must be >= 1");
    if (cfg.latent_dim < 1) throw ConfigError("correction.latent_dim must be >= 1");
}

namespace {

// Differentiable candidate offset for one latent draw.
Var generator_offset(const CandidateGenerator& gen, const Var& embedding, const Tensor& z,
                     float noise) {
    Var input = ag::concat({embedding, ag::constant(z)}, 0);
    const int n = input->value.dim(0);
    Var out = mlp_row(ag::reshape(input, {1, n}), gen.w1, gen.b1, gen.w2, gen.b2);
    Var mean = ag::reshape(ag::slice(out, 1, 0, 1), {1});
    Var log_scale = ag::reshape(ag::slice(out, 1, 1, 1), {1});
    return ag::add(mean, ag::scale(ag::exp(log_scale), noise));
}

// Differentiable estimated cumulative error at a candidate age.
Var estimated_error_var(const EnsembleState& ensemble, const ErrorWeights& w,
                        const Var& embedding, const Var& age) {
    const int k = ensemble.k;
    Var stacked = stacked_estimates(ensemble, embedding, age);  // [L,k]
    Var est = ag::mean_tokens(stacked);                         // [k]
    Var dev = ag::add_bias(stacked, ag::scale(est, -1.0f));
    Var variance = ag::mean_tokens(ag::mul(dev, dev));
    Var spread = ag::sqrt(ag::add_scalar(variance, 1e-8f));     // [k] per-slot std
    Var disagreement = ag::mean(spread);                        // [1]
    Var wv = w.weights();
    Var implicit = ag::sum(ag::mul(ag::slice(wv, 0, 0, k), est));
    Var explicit_part = ag::mul(ag::slice(wv, 0, k, 1), disagreement);
    return ag::add(implicit, explicit_part);
}

}  // namespace

ag::Var generator_objective(const CandidateGenerator& gen, const Tensor& embedding,
                            float base_age, const EnsembleState& ensemble, const ErrorWeights& w,
                            int samples, std::mt19937& rng) {
    if (samples < 1) throw ContractError("generator_objective: need at least one sample");
    if (w.h() != ensemble.k + 1)
        throw DimensionError("generator_objective: weights do not match k implicit + 1 explicit");
    std::normal_distribution<float> unit(0.0f, 1.0f);
    Var emb = ag::constant(embedding);
    Var total = ag::constant(Tensor::zeros({1}));
    for (int j = 0; j < samples; ++j) {
        Tensor z({gen.latent_dim});
        for (std::int64_t i = 0; i < z.size(); ++i) z[i] = unit(rng);
        Var offset = generator_offset(gen, emb, z, unit(rng));
        Var age = ag::add_scalar(offset, base_age);
        total = ag::add(total, estimated_error_var(ensemble, w, emb, age));
    }
    return ag::scale(total, 1.0f / static_cast<float>(samples));
}

void update_generator(CandidateGenerator& gen, const Tensor& embedding, float base_age,
                      const EnsembleState& ensemble, const ErrorWeights& w,
                      const CorrectionConfig& cfg, std::mt19937& rng) {
    Var objective =
        generator_objective(gen, embedding, base_age, ensemble, w, cfg.candidates, rng);
    if (cfg.generator_lr == 0.0f) return;  // bit-exact no-op
    ag::backward(objective);
    for (const Var& p : gen.all()) {
        if (!p->grad_ready) continue;
        for (std::int64_t i = 0; i < p->value.size(); ++i)
            p->value[i] -= cfg.generator_lr * p->grad[i];
        p->grad_ready = false;
    }
    // Other parameters in the graph (ensemble, weights) accumulated gradients
    // too; drop them so later training steps start clean.
    for (const auto& m : ensemble.members)
        for (const Var& p : m.all()) p->grad_ready = false;
    w.logits->grad_ready = false;
}

float sample_candidate(const CandidateGenerator& gen, const Tensor& embedding, float base_age,
                       std::mt19937& rng) {
    std::normal_distribution<float> unit(0.0f, 1.0f);
    Tensor z({gen.latent_dim});
    for (std::int64_t i = 0; i < z.size(); ++i) z[i] = unit(rng);
    Var offset = generator_offset(gen, ag::constant(embedding), z, unit(rng));
    return base_age + offset->value.item();
}

Candidate select_candidate(const std::vector<float>& ages, std::size_t incumbent_index,
                           const Tensor& embedding, const EnsembleState& ensemble,
                           const ErrorWeights& w) {
    if (ages.empty()) throw ContractError("select_candidate: empty candidate list");
    if (incumbent_index >= ages.size())
        throw ContractError("select_candidate: incumbent index out of range");
    Candidate best{ages[incumbent_index],
                   estimated_error(embedding, ages[incumbent_index], ensemble, w)};
    for (std::size_t i = 0; i < ages.size(); ++i) {
        if (i == incumbent_index) continue;
        const float err = estimated_error(embedding, ages[i], ensemble, w);
        if (err < best.error) best = Candidate{ages[i], err};
    }
    return best;
}

CorrectionResult correction_loop(float base_age, const Tensor& embedding,
                                 EnsembleState& ensemble, const ErrorWeights& w,
                                 CandidateGenerator& gen, const CorrectionConfig& cfg,
                                 std::mt19937& rng) {
    validate(cfg);
    CorrectionResult result;
    Candidate incumbent{base_age, estimated_error(embedding, base_age, ensemble, w)};
    result.trace.push_back(incumbent);
    if (incumbent.error <= cfg.epsilon) {
        result.age = incumbent.age;
        result.iterations = 0;
        return result;
    }
    for (int t = 0; t < cfg.t_max; ++t) {
        update_generator(gen, embedding, incumbent.age, ensemble, w, cfg, rng);
        std::vector<float> pool{incumbent.age};
        for (int j = 0; j < cfg.candidates; ++j)
            pool.push_back(sample_candidate(gen, embedding, incumbent.age, rng));
        incumbent = select_candidate(pool, 0, embedding, ensemble, w);
        result.trace.push_back(incumbent);
        result.iterations = t + 1;
        if (incumbent.error <= cfg.epsilon) break;
    }
    result.age = incumbent.age;
    return result;
}

void append_trace_csv(std::ostream& out, const std::string& sample_id,
                      const CorrectionResult& result) {
    for (std::size_t i = 0; i < result.trace.size(); ++i) {
        out << sample_id << ',' << i << ',' << result.trace[i].age << ','
            << result.trace[i].error << '\n';
    }
}

}  // namespace fourierage
