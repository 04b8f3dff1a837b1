#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fedprompt/optim.hpp"
#include "fedprompt/prompt_model.hpp"
#include "fedprompt/random.hpp"
#include "fedprompt/synth_data.hpp"

namespace fedprompt {

/// How clients fold received external text prompts into their local copies.
enum class AlphaMode {
    momentum,  ///< EMA with the configured alpha
    replace,   ///< alpha = 0, overwrite with the received value
    freeze,    ///< alpha = 1, external prompts keep their initial value
};

/// How the server combines uploaded visual prompts.
enum class VisualMode {
    average,       ///< element-wise mean of every client's full set
    pass_through,  ///< slot k comes from the clients of domain k only
};

/// When the external-prompt EMA is applied.
enum class MomentumTiming { per_round, per_step };

AlphaMode parse_alpha_mode(std::string_view name);
std::string_view to_string(AlphaMode mode);
VisualMode parse_visual_mode(std::string_view name);
std::string_view to_string(VisualMode mode);
MomentumTiming parse_momentum_timing(std::string_view name);
std::string_view to_string(MomentumTiming timing);

struct RoundSchedule {
    std::size_t rounds = 100;
    double epochs_per_round = 1.0;
    double alpha = 0.99;

    void validate() const;
};

struct FederationConfig {
    RoundSchedule schedule;
    AlphaMode alpha_mode = AlphaMode::momentum;
    VisualMode visual_mode = VisualMode::average;
    MomentumTiming momentum_timing = MomentumTiming::per_round;
    OptimizerConfig optimizer;
    std::size_t clients_per_domain = 1;
    double dirichlet_beta = 0.5;
    bool concurrent = true;
    std::uint64_t seed = 0;

    /// Alpha actually applied, after alpha_mode is taken into account.
    double effective_alpha() const;
    void validate() const;
};

/// What a client sends to the server after local training.
struct Upload {
    std::size_t client_id = 0;
    std::size_t domain = 0;
    Tensor text;                // owner text prompt; undefined when the variant learns no text
    std::vector<Tensor> visual;  // full visual prompt set; empty when the variant has none
};

struct ServerState {
    std::vector<Tensor> text;    // one slot per domain, or a single shared slot
    std::vector<Tensor> visual;  // n vectors of width d_v
    std::size_t round = 0;
};

struct ExternalPrompt {
    std::size_t slot = 0;
    Tensor value;
};

struct ClientState {
    std::size_t id = 0;
    std::size_t domain = 0;
    PromptModel model;
    DomainDataset data;
    std::unique_ptr<Optimizer> optimizer;
    /// Received external prompts waiting to be folded in (per-step timing only).
    std::vector<ExternalPrompt> pending;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    Rng rng;
};

/**
 * Folds received external text prompts into a client's model:
 * t <- alpha * t + (1 - alpha) * received, slot by slot. The owner slot must
 * not be among them.
 */
void momentum_load_external(PromptModel& model, std::span<const ExternalPrompt> received, double alpha);

/**
 * Server aggregation. Per-domain text slots take the owner prompt of that
 * domain's client (the mean when a domain has several sub-clients, a bitwise
 * copy when it has one); a shared slot takes the mean over all clients.
 * Visual prompts follow `visual_mode`. Sums run in client-id order. Each
 * expected client must upload exactly once.
 */
void aggregate(ServerState& server, std::span<const Upload> uploads, std::span<const std::size_t> client_domains,
               const VariantSpec& spec, VisualMode visual_mode);

/**
 * Splits each domain's samples over k sub-clients, drawing per-class
 * proportions from Dirichlet(beta). Slice index is domain * k + j. Draws are
 * repeated until no slice is empty.
 */
std::vector<DomainDataset> dirichlet_partition(const DomainDataset& data, std::size_t n_domains,
                                               std::size_t clients_per_domain, double beta, std::uint64_t seed);

/// Per-client floats moved each round.
struct CommunicationReport {
    std::size_t download_per_client = 0;  ///< full global prompt state
    std::size_t upload_per_client = 0;    ///< owner text prompt plus visual prompts
    std::size_t total_per_round = 0;
};

struct DomainMetrics {
    std::size_t domain = 0;
    std::size_t samples = 0;
    double accuracy = 0.0;
    double mean_loss = 0.0;
    double mean_true_domain_weight = 0.0;
};

struct RoundMetrics {
    std::size_t round = 0;
    std::vector<DomainMetrics> domains;
    double mean_train_loss = 0.0;
    /// Sum over clients and external slots of |t_after - t_before|_2 at broadcast.
    double external_change = 0.0;
};

/**
 * In-process federation: n * k clients, one server, full participation.
 *
 * A round is train_clients() -> aggregate() -> broadcast(). run_round() does
 * all three and returns the training statistics; the pieces are public so a
 * caller can inspect state between them.
 */
class Federation {
public:
    Federation(VariantSpec spec, std::shared_ptr<const EncoderWeights> encoders, PromptModelOptions options,
               FederationConfig config, const DomainDataset& train);

    /// Local training on every client. Returns the uploads in client-id order.
    std::vector<Upload> train_clients();
    void aggregate_uploads(std::span<const Upload> uploads);
    /// Sends the server state to every client. Returns the external-prompt change.
    double broadcast();

    RoundMetrics run_round();

    /// Per-domain test metrics of the global model (of each client's own model
    /// for variants that do not federate).
    std::vector<DomainMetrics> evaluate(const DomainDataset& test);

    const ServerState& server() const noexcept { return server_; }
    const std::vector<ClientState>& clients() const noexcept { return clients_; }
    std::vector<ClientState>& clients() noexcept { return clients_; }
    const VariantSpec& variant() const noexcept { return spec_; }
    const FederationConfig& config() const noexcept { return config_; }
    const EncoderWeights& encoders() const noexcept { return *encoders_; }
    std::size_t round() const noexcept { return server_.round; }
    CommunicationReport communication() const;

    /// Loads the server state into a fresh model (owner 0) for inference.
    PromptModel global_model() const;

private:
    double local_train(ClientState& client);
    std::vector<std::size_t> client_domains() const;

    VariantSpec spec_;
    std::shared_ptr<const EncoderWeights> encoders_;
    PromptModelOptions options_;
    FederationConfig config_;
    ServerState server_;
    std::vector<ClientState> clients_;
    double last_train_loss_ = 0.0;
};

using RoundCallback = std::function<void(const Federation&, const RoundMetrics&)>;

/// Initial evaluation (round 0) followed by `schedule.rounds` rounds, each evaluated on `test`.
std::vector<RoundMetrics> run_federated(Federation& federation, const DomainDataset& test,
                                        const RoundCallback& on_round = {});

}  // namespace fedprompt
