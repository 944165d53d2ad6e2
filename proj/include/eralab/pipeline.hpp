#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "eralab/checkpoint.hpp"
#include "eralab/concepts.hpp"
#include "eralab/diffusion.hpp"
#include "eralab/erasure.hpp"
#include "eralab/probes.hpp"
#include "eralab/theory.hpp"

namespace eralab {

/// Parses a mask such as "mlp+row", "layer0+row", "row", "all" or
/// "mlp+embeddings". "row" means the given concept's embedding row.
TrainableSet parse_mask(std::string_view spec, std::size_t row);
nlohmann::json to_json(const TrainableSet& set);

/// Row index standing for "the erasure target" in masks parsed before the target is known.
inline constexpr std::size_t kTargetRowPlaceholder = std::numeric_limits<std::size_t>::max();
TrainableSet resolve_target_row(TrainableSet set, std::size_t target);
/// Accepts a mask string or the object form written by to_json.
TrainableSet trainable_from_json(const nlohmann::json& value, std::size_t row);

ConceptUniverse universe_from_json(const nlohmann::json& value);
nlohmann::json to_json(const ConceptUniverse& universe);

struct EvalSpec {
    std::size_t samples_per_concept = 500;
    std::vector<std::string> metrics{"accuracy", "alignment", "energy"};
    std::vector<int> sweep_steps{20, 50, 200};
    bool plots = true;
};

struct ExperimentConfig {
    ConceptUniverse universe = ConceptUniverse::reference();
    DenoiserShape shape;
    TrainConfig train;
    std::vector<ErasureConfig> erasures{ErasureConfig{}};
    bool run_gradient_probe = true;
    GradientProbeConfig gradient_probe;
    bool run_personalization = true;
    PersonalizationConfig personalization; // reference set and class concept are set per run
    std::size_t reference_samples = 16;
    std::optional<std::size_t> class_concept; // (target + 1) mod K when empty
    EvalSpec eval;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::filesystem::path output_dir = "runs";

    /// Throws ConfigError when a referenced concept does not exist or no seed is given.
    void validate() const;
};

/// Missing keys keep their defaults. Unknown keys are rejected.
ExperimentConfig experiment_from_json(const nlohmann::json& doc);
ExperimentConfig load_experiment(const std::filesystem::path& toml_path);
nlohmann::json to_json(const ExperimentConfig& config);

nlohmann::json to_json(const TrainConfig& config);
nlohmann::json to_json(const ErasureConfig& config);
nlohmann::json to_json(const GradientProbeConfig& config);
nlohmann::json to_json(const PersonalizationConfig& config); // without the reference set
nlohmann::json to_json(const ParamDelta& delta);

/// Per-seed values with their summary. `std` is the sample standard deviation
/// and is present only with two or more seeds.
struct Aggregate {
    Vector per_seed;
    double mean = 0.0;
    std::optional<double> std;
};

Aggregate aggregate(Vector per_seed);
nlohmann::json to_json(const Aggregate& a);
/// Throws FormatError if a std is present without at least two per-seed values.
Aggregate aggregate_from_json(const nlohmann::json& value);

/// Metrics of one model at one seed; vectors are indexed by concept.
struct StageSample {
    Vector accuracy;  // percent
    Vector alignment; // calibrated alignment score
    Vector energy;    // energy distance to the original model's samples
};

/// Original-model samples used as the reference for energy distances, one set
/// per universe concept. Concepts the model has no token for fall back to
/// ground-truth draws.
std::vector<Matrix> reference_samples(const Checkpoint& original, const ConceptUniverse& universe,
                                      std::size_t samples, std::uint64_t seed);

StageSample evaluate_stage(const Checkpoint& model, const ConceptUniverse& universe,
                           const std::vector<Matrix>& reference, std::size_t samples, std::uint64_t seed);

struct StageReport {
    std::string name;
    std::vector<Aggregate> accuracy;
    std::vector<Aggregate> alignment;
    std::vector<Aggregate> energy;
    Aggregate untargeted;      // mean accuracy over non-target concepts
    Aggregate untargeted_drop; // original untargeted minus this stage's
    std::vector<ParamDelta> deltas; // one per seed, relative to the stage's parent; empty for the original
};

struct EvaluationReport {
    std::size_t target = 0;
    std::vector<std::uint64_t> seeds;
    std::size_t samples_per_concept = 0;
    std::vector<StageReport> stages;

    const StageReport& stage(std::string_view name) const;
};

/// Stage 0 must be the original model. `per_seed[s][k]` is stage k at seed s;
/// `deltas[s][k]` likewise (ignored for stage 0).
EvaluationReport build_report(std::size_t target, std::vector<std::uint64_t> seeds, std::size_t samples,
                              const std::vector<std::string>& stage_names,
                              const std::vector<std::vector<StageSample>>& per_seed,
                              const std::vector<std::vector<ParamDelta>>& deltas);

nlohmann::json to_json(const EvaluationReport& report);
EvaluationReport report_from_json(const nlohmann::json& doc);

/// Long-format CSV: stage,concept,metric,mean,std,per_seed...
std::string report_csv(const EvaluationReport& report);

/// Grid with one row per concept, cells "erased / reactivated" for
/// every stage after the first two.
std::string report_table(const EvaluationReport& report);

/// "7.0 / 93.5".
std::string format_cell(double erased, double reactivated);

/// Original untargeted accuracy minus erased, e.g. 86.1 - 58.8 = 27.3.
double untargeted_drop(double original, double erased);

struct SweepRow {
    int steps = 0;
    double target_acc = 0.0;
    double untargeted_drop = 0.0;
    ParamDelta delta;
};

inline constexpr std::string_view kSweepHeader = "steps,target_acc,untargeted_drop,fraction_updated,mean_abs_change";

/// Runs the gradient-guided probe at each budget from the same erased model and seed.
std::vector<SweepRow> run_sweep(const ConditionalDenoiser& original, const ConditionalDenoiser& erased,
                                const ConditionalDenoiser& guide, const GradientProbeConfig& probe,
                                const std::vector<int>& steps, const ConceptUniverse& universe, std::size_t samples,
                                std::uint64_t seed);
std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Scatter plot of samples colored by oracle label, with component means marked.
std::string scatter_svg(const ConceptUniverse& universe, const Matrix& samples, std::string_view title);

/// SdeSpec from a parsed TOML table. Either `drift` (matrix) or `curvature`
/// (A = curvature I) and either `noise1`/`noise2` (diagonals) or
/// `trace1`/`trace2` (isotropic) must be given. `bound` is ignored here.
SdeSpec sde_spec_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const SdeSpec& spec);
nlohmann::json to_json(const BoundReport& report);
/// CSV with columns t,mean_sq,std_error.
std::string trace_csv(const DeviationTrace& trace);

/// Parameter delta between checkpoints that may differ only by appended
/// embedding rows; the appended rows are left out of the comparison.
ParamDelta shared_param_delta(const ConditionalDenoiser& a, const ConditionalDenoiser& b);

/// Seed for a derived stream, e.g. derive_seed(seed, 3) for the third stage.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

struct ProtocolResult {
    Checkpoint original;
    std::vector<EvaluationReport> reports; // one per erasure config
};

/// Train once, then for every erasure config and seed: erase, probe, evaluate.
/// Writes checkpoints, sidecars, reports and plots under config.output_dir.
ProtocolResult run_protocol(const ExperimentConfig& config, bool verbose = false);

} // namespace eralab
