#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedprompt/attack.hpp"
#include "fedprompt/encoder.hpp"
#include "fedprompt/federation.hpp"
#include "fedprompt/prompt_model.hpp"
#include "fedprompt/synth_data.hpp"

namespace fedprompt {

/// Everything one experiment needs. Dataset and encoder seeds are not set
/// here: every run seed derives its own data, encoder, prompt and client seeds.
struct ExperimentConfig {
    DatasetSpec dataset;  // patch_count / patch_width follow the encoder
    EncoderConfig encoder;
    VariantMode variant = VariantMode::adapt;
    LossConfig loss{LossMode::cross_entropy, 1.0, 0.07};
    std::size_t prompt_length = 16;
    double tau_d = 0.1;
    FederationConfig federation;
    std::size_t few_shot = 0;  // 0 keeps every training sample
    std::vector<std::uint64_t> seeds;
    std::filesystem::path output_dir = "results";
    bool checkpoints = false;
    DlgOptions attack;

    void validate() const;
    bool operator==(const ExperimentConfig& other) const;
};

/// Parses the YAML config format. Errors carry "<source>:<line>:" prefixes.
ExperimentConfig parse_config(std::string_view text, std::string_view source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& config);

/// Sub-seeds of one run.
struct RunSeeds {
    std::uint64_t data, encoder, prompts, federation, few_shot;
};
RunSeeds derive_run_seeds(std::uint64_t seed);

/// Data, encoders and model options for one seed (what a run trains on).
struct RunSetup {
    DatasetSplit data;
    std::shared_ptr<const EncoderWeights> encoders;
    PromptModelOptions options;
    FederationConfig federation;
};
RunSetup prepare_run(const ExperimentConfig& config, std::uint64_t seed);

struct SeedRun {
    std::string method;
    std::uint64_t seed = 0;
    std::vector<RoundMetrics> history;
    CommunicationReport communication;
    std::size_t trainable_parameters = 0;
    std::uint64_t encoder_hash_before = 0;
    std::uint64_t encoder_hash_after = 0;
    PromptCheckpoint global;  // server prompts after the last round
};

/// One seeded federated run. Checkpoints go under `checkpoint_dir` when given.
SeedRun run_seed(const ExperimentConfig& config, std::uint64_t seed, const std::string& method,
                 const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt);

struct MetricsRow {
    std::string method;
    std::size_t domain = 0;
    std::uint64_t seed = 0;
    std::size_t round = 0;
    double accuracy = 0.0;
    double mean_loss = 0.0;
    double mean_true_domain_weight = 0.0;
};

std::vector<MetricsRow> metrics_rows(const SeedRun& run);
void write_metrics_jsonl(std::ostream& out, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_jsonl(const std::filesystem::path& path);

/// Final-round summary of one method: per-domain accuracy averaged over seeds.
struct MethodSummary {
    std::string method;
    std::vector<double> domain_accuracy;
    double mean_accuracy = 0.0;       // mean over domains and seeds
    double std_across_domains = 0.0;  // population std of domain_accuracy
    double mean_true_domain_weight = 0.0;
};

/// Summaries from raw rows, one per distinct method in first-seen order,
/// taken at each (method, seed)'s last round.
std::vector<MethodSummary> summarize(const std::vector<MetricsRow>& rows);
/// Summary of a list of runs, one row per run group in order (duplicates kept).
MethodSummary summarize_runs(const std::string& method, const std::vector<SeedRun>& runs);

void write_summary_csv(std::ostream& out, const std::vector<MethodSummary>& rows, std::size_t n_domains);
void write_comparison_csv(std::ostream& out, const std::vector<MethodSummary>& rows, std::string_view key = "method");
std::string render_table(const std::vector<MethodSummary>& rows, std::string_view key = "method");

/// Output directory after the FEDPROMPT_OUTPUT_DIR override.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config);

struct ExperimentResult {
    std::vector<SeedRun> runs;
    std::vector<MethodSummary> summaries;
    std::filesystem::path output_dir;
};

/// `run`: every seed of the configured variant; writes metrics.jsonl, summary.csv, report.json.
ExperimentResult run_experiment(const ExperimentConfig& config, std::ostream* log = nullptr);
/// `compare`: every listed variant over every seed; writes metrics.jsonl and comparison.csv.
ExperimentResult compare_variants(const ExperimentConfig& config, const std::vector<std::string>& variants,
                                  std::ostream* log = nullptr);

inline constexpr std::string_view kSweepAxes[] = {"alpha_mode", "visual_mode", "prompt_length", "epochs_per_round"};

/// Config with one axis set to `value`. Unknown axes or malformed values are config errors.
ExperimentConfig apply_sweep_value(const ExperimentConfig& config, std::string_view axis, std::string_view value);
/// `sweep`: one run per value; writes metrics.jsonl and sweep_<axis>.csv.
ExperimentResult sweep(const ExperimentConfig& config, std::string_view axis, const std::vector<std::string>& values,
                       std::ostream* log = nullptr);

struct AttackReport {
    std::string variant;
    std::size_t iters = 0;
    double final_objective = 0.0;
    std::optional<double> cosine_to_truth;
    bool success = true;
};

/// Capture from the first seed's initial client model (or a linear model when `linear`).
GradientCapture make_capture(const ExperimentConfig& config, std::size_t sample_index, bool linear, Tensor* truth);
/// DLG against a capture, rebuilding the matching model from the config.
AttackReport run_attack(const ExperimentConfig& config, const GradientCapture& capture, const Tensor* truth);
void write_attack_jsonl(std::ostream& out, const AttackReport& report);

}  // namespace fedprompt
