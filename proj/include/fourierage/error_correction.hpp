#pragma once

#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "fourierage/autograd.hpp"
#include "fourierage/tensor.hpp"

namespace fourierage {

// One age-error metric computed from a prediction and its label.
using ErrorMetric = std::function<float(float pred, float label)>;

float abs_error(float pred, float label);
float squared_error(float pred, float label);

// Default label-based metric set: absolute and squared error in years.
const std::vector<ErrorMetric>& default_error_metrics();

// An h-component error vector. The first `k` slots are estimates produced by
// the ensemble (no label needed); the rest are measured directly.
struct ErrorVector {
    Tensor values;  // [h]
    int k = 0;

    int h() const { return values.dim(0); }
};

ErrorVector compute_error_vector(float pred, float label,
                                 const std::vector<ErrorMetric>& metrics = default_error_metrics());

// Learnable voting weights over error components: w = softmax(logits).
struct ErrorWeights {
    ag::Var logits;  // [h]

    ag::Var weights() const;        // differentiable softmax
    Tensor weight_values() const;   // plain values
    int h() const { return logits->value.dim(0); }
};

ErrorWeights make_error_weights(int h);

float weighted_error(const ErrorVector& e, const ErrorWeights& w);

// One implicit-error regressor: a two-layer perceptron from an image
// embedding concatenated with the (scaled) candidate age to k error slots.
struct EnsembleMember {
    ag::Var w1, b1;  // [D+1,hidden], [hidden]
    ag::Var w2, b2;  // [hidden,k], [k]

    std::vector<ag::Var> all() const;
};

struct EnsembleState {
    std::vector<EnsembleMember> members;
    int dim = 0;     // embedding dimension D
    int k = 0;       // estimated slots
    float age_scale = 80.0f;
    int steps = 0;   // optimizer steps taken so far

    int size() const { return static_cast<int>(members.size()); }
};

// scale = 0 gives exactly-zero networks (useful as a fixture); otherwise
// weights are uniform in [-scale, scale] and members differ by draw.
EnsembleState make_ensemble(int members, int dim, int hidden, int k, std::mt19937& gen,
                            float scale = 0.3f);

// Differentiable member forward; `age` participates in the graph.
ag::Var member_forward(const EnsembleMember& m, const ag::Var& embedding, const ag::Var& age,
                       float age_scale);

// Mean of member estimates at a fixed age: ê = (1/L) Σ φ(x, age).
Tensor ensemble_estimate(const Tensor& embedding, float age, const EnsembleState& ensemble);

// Mean over slots of the standard deviation of member estimates: the
// label-free disagreement metric.
float ensemble_disagreement(const Tensor& embedding, float age, const EnsembleState& ensemble);

// Σ_{j<k} w_j ê_j + Σ_{j>=k} w_j E_j with the shared voting weights. The
// explicit tail carries the directly-measured components; the overload
// without a tail is the all-implicit (k = h) case.
float cumulative_error(const Tensor& embedding, float age, const EnsembleState& ensemble,
                       const ErrorWeights& w, const Tensor& explicit_errors);
float cumulative_error(const Tensor& embedding, float age, const EnsembleState& ensemble,
                       const ErrorWeights& w);

// Cumulative error with the default explicit tail (ensemble disagreement);
// the scoring function used by candidate selection and the correction loop.
float estimated_error(const Tensor& embedding, float age, const EnsembleState& ensemble,
                      const ErrorWeights& w);

struct ErrorSample {
    Tensor embedding;  // [D]
    float age;         // prediction the targets refer to
    Tensor target;     // [k] measured errors of that prediction
};

struct EnsembleTrainOptions {
    int steps = 500;
    float lr = 0.05f;
    int batch = 16;
    unsigned seed = 0;
};

// Independently fits each member to the measured error targets (squared
// distance); members see the data in different shuffled orders. Returns the
// per-step training loss averaged over members.
std::vector<float> train_ensemble(EnsembleState& ensemble, const std::vector<ErrorSample>& data,
                                  const EnsembleTrainOptions& opts);

// Candidate generator: (embedding, latent z) -> Gaussian over age offsets.
struct CandidateGenerator {
    ag::Var w1, b1;  // [D+latent,hidden], [hidden]
    ag::Var w2, b2;  // [hidden,2], [2]  (mean, log-scale)
    int latent_dim = 8;

    std::vector<ag::Var> all() const;
};

CandidateGenerator make_generator(int dim, int hidden, int latent_dim, std::mt19937& gen,
                                  float scale = 0.3f);

struct CorrectionConfig {
    float epsilon = 2.0f;  // feasibility threshold, years
    int t_max = 10;        // iteration cap
    int candidates = 16;   // K samples per iteration
    int members = 5;       // ensemble size L
    int implicit = 2;      // k estimated slots
    int components = 3;    // h total error components
    float age_scale = 80.0f;
    float generator_lr = 0.05f;
    int generator_hidden = 16;
    int latent_dim = 8;
};

void validate(const CorrectionConfig& cfg);

// Mean estimated cumulative error over K reparameterized candidate offsets;
// differentiable in the generator parameters.
ag::Var generator_objective(const CandidateGenerator& gen, const Tensor& embedding,
                            float base_age, const EnsembleState& ensemble, const ErrorWeights& w,
                            int samples, std::mt19937& rng);

// One descent step on the generator objective (warm-started across calls).
void update_generator(CandidateGenerator& gen, const Tensor& embedding, float base_age,
                      const EnsembleState& ensemble, const ErrorWeights& w,
                      const CorrectionConfig& cfg, std::mt19937& rng);

// Draws one candidate age from the generator (no gradients).
float sample_candidate(const CandidateGenerator& gen, const Tensor& embedding, float base_age,
                       std::mt19937& rng);

struct Candidate {
    float age = 0.0f;
    float error = 0.0f;
};

// Argmin of estimated cumulative error; ties (and equal scores) keep the
// incumbent at `incumbent_index`.
Candidate select_candidate(const std::vector<float>& ages, std::size_t incumbent_index,
                           const Tensor& embedding, const EnsembleState& ensemble,
                           const ErrorWeights& w);

struct CorrectionResult {
    float age = 0.0f;
    int iterations = 0;
    std::vector<Candidate> trace;  // selected candidate per iteration
};

// Iterative corrector: keep the base prediction if it already meets the
// threshold; otherwise alternate generator updates and candidate selection
// until the estimated error is feasible or the iteration cap is hit.
CorrectionResult correction_loop(float base_age, const Tensor& embedding,
                                 EnsembleState& ensemble, const ErrorWeights& w,
                                 CandidateGenerator& gen, const CorrectionConfig& cfg,
                                 std::mt19937& rng);

// CSV rows: sample id, iteration, candidate age, estimated error.
void append_trace_csv(std::ostream& out, const std::string& sample_id,
                      const CorrectionResult& result);

}  // namespace fourierage
