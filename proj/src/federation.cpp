#include "fedprompt/federation.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <string>

#include "fedprompt/errors.hpp"

namespace fedprompt {

namespace {

// Incremental mean: identical inputs give that input back bitwise.
Tensor running_mean(std::span<const Tensor* const> values) {
    Tensor out = values.front()->detach();
    auto m = out.mutable_data();
    for (std::size_t i = 1; i < values.size(); ++i) {
        const auto x = values[i]->data();
        if (x.size() != m.size()) throw ProtocolError("aggregate: uploaded prompts differ in size");
        const double inv = static_cast<double>(i + 1);
        for (std::size_t j = 0; j < m.size(); ++j) m[j] += (x[j] - m[j]) / inv;
    }
    return out;
}

double distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

}  // namespace

AlphaMode parse_alpha_mode(std::string_view name) {
    if (name == "momentum") return AlphaMode::momentum;
    if (name == "replace") return AlphaMode::replace;
    if (name == "freeze") return AlphaMode::freeze;
    throw ConfigError("unknown alpha_mode '" + std::string(name) + "' (expected momentum, replace, freeze)");
}

std::string_view to_string(AlphaMode mode) {
    switch (mode) {
        case AlphaMode::momentum: return "momentum";
        case AlphaMode::replace: return "replace";
        case AlphaMode::freeze: return "freeze";
    }
    return "?";
}

VisualMode parse_visual_mode(std::string_view name) {
    if (name == "average") return VisualMode::average;
    if (name == "pass_through") return VisualMode::pass_through;
    throw ConfigError("unknown visual_mode '" + std::string(name) + "' (expected average, pass_through)");
}

std::string_view to_string(VisualMode mode) { return mode == VisualMode::average ? "average" : "pass_through"; }

MomentumTiming parse_momentum_timing(std::string_view name) {
    if (name == "per_round") return MomentumTiming::per_round;
    if (name == "per_step") return MomentumTiming::per_step;
    throw ConfigError("unknown momentum_timing '" + std::string(name) + "' (expected per_round, per_step)");
}

std::string_view to_string(MomentumTiming timing) {
    return timing == MomentumTiming::per_round ? "per_round" : "per_step";
}

void RoundSchedule::validate() const {
    if (!(epochs_per_round >= 0.0) || !std::isfinite(epochs_per_round)) {
        throw ConfigError("federation.epochs_per_round must be a non-negative number");
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("federation.alpha must lie in [0, 1]");
}

double FederationConfig::effective_alpha() const {
    switch (alpha_mode) {
        case AlphaMode::momentum: return schedule.alpha;
        case AlphaMode::replace: return 0.0;
        case AlphaMode::freeze: return 1.0;
    }
    return schedule.alpha;
}

void FederationConfig::validate() const {
    schedule.validate();
    if (clients_per_domain < 1) throw ConfigError("federation.clients_per_domain must be at least 1");
    if (!(dirichlet_beta > 0.0)) throw ConfigError("federation.dirichlet_beta must be positive");
    if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
}

void momentum_load_external(PromptModel& model, std::span<const ExternalPrompt> received, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("momentum_load_external: alpha must lie in [0, 1]");
    if (!model.variant().per_domain_text()) {
        throw ProtocolError("momentum_load_external: variant keeps no external prompts");
    }
    auto& slots = model.text_prompts();
    const std::size_t owner = model.owner_text_slot();
    for (const ExternalPrompt& ext : received) {
        if (ext.slot == owner) {
            throw ProtocolError("momentum_load_external: received the owner slot " + std::to_string(owner));
        }
        if (ext.slot >= slots.size()) throw IndexError("momentum_load_external: slot out of range");
        if (ext.value.shape() != slots[ext.slot].shape()) {
            throw DimensionError("momentum_load_external: received prompt has the wrong shape");
        }
    }
    for (const ExternalPrompt& ext : received) {
        auto t = slots[ext.slot].mutable_data();
        const auto r = ext.value.data();
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = alpha * t[i] + (1.0 - alpha) * r[i];
    }
}

void aggregate(ServerState& server, std::span<const Upload> uploads, std::span<const std::size_t> client_domains,
               const VariantSpec& spec, VisualMode visual_mode) {
    std::vector<const Upload*> by_id(client_domains.size(), nullptr);
    for (const Upload& u : uploads) {
        if (u.client_id >= by_id.size()) {
            throw ProtocolError("aggregate: upload from unknown client " + std::to_string(u.client_id));
        }
        if (by_id[u.client_id]) throw ProtocolError("aggregate: duplicate upload from client " + std::to_string(u.client_id));
        if (u.domain != client_domains[u.client_id]) {
            throw ProtocolError("aggregate: client " + std::to_string(u.client_id) + " claims the wrong domain");
        }
        by_id[u.client_id] = &u;
    }
    for (std::size_t id = 0; id < by_id.size(); ++id) {
        if (!by_id[id]) throw ProtocolError("aggregate: missing upload from client " + std::to_string(id));
    }

    auto collect = [&](auto member, std::optional<std::size_t> domain, std::optional<std::size_t> slot) {
        std::vector<const Tensor*> out;
        for (const Upload* u : by_id) {
            if (domain && u->domain != *domain) continue;
            const Tensor* t = member(*u, slot);
            if (!t || !t->defined()) throw ProtocolError("aggregate: upload lacks a required prompt");
            out.push_back(t);
        }
        return out;
    };
    auto text_of = [](const Upload& u, std::optional<std::size_t>) { return &u.text; };
    auto visual_of = [](const Upload& u, std::optional<std::size_t> slot) -> const Tensor* {
        return *slot < u.visual.size() ? &u.visual[*slot] : nullptr;
    };

    if (spec.learnable_text()) {
        if (spec.per_domain_text()) {
            for (std::size_t k = 0; k < server.text.size(); ++k) {
                const auto parts = collect(text_of, k, std::nullopt);
                if (parts.empty()) throw ProtocolError("aggregate: no upload for domain " + std::to_string(k));
                server.text[k] = running_mean(parts);
            }
        } else {
            server.text[0] = running_mean(collect(text_of, std::nullopt, std::nullopt));
        }
    }
    if (spec.uses_visual_prompts()) {
        for (std::size_t i = 0; i < server.visual.size(); ++i) {
            const auto domain = visual_mode == VisualMode::pass_through ? std::optional<std::size_t>(i) : std::nullopt;
            const auto parts = collect(visual_of, domain, i);
            if (parts.empty()) throw ProtocolError("aggregate: no upload for visual prompt " + std::to_string(i));
            server.visual[i] = running_mean(parts);
        }
    }
    ++server.round;
}

std::vector<DomainDataset> dirichlet_partition(const DomainDataset& data, std::size_t n_domains,
                                               std::size_t clients_per_domain, double beta, std::uint64_t seed) {
    if (!(beta > 0.0)) throw ParameterError("dirichlet_partition: beta must be positive");
    if (clients_per_domain < 1) throw ConfigError("dirichlet_partition: need at least one client per domain");
    std::size_t n_classes = 0;
    for (const auto& s : data.samples) {
        if (s.domain_id >= n_domains) throw DataError("dirichlet_partition: sample domain outside n_domains");
        n_classes = std::max(n_classes, s.class_id + 1);
    }
    // cells[d][c] = sample indices of that (domain, class) in dataset order
    std::vector<std::vector<std::vector<std::size_t>>> cells(n_domains,
                                                             std::vector<std::vector<std::size_t>>(n_classes));
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        cells[data.samples[i].domain_id][data.samples[i].class_id].push_back(i);
    }

    const std::size_t k = clients_per_domain;
    Rng rng(derive_seed(seed, "dirichlet"));
    std::gamma_distribution<double> gamma(beta, 1.0);
    constexpr int kMaxAttempts = 1000;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        std::vector<std::vector<std::size_t>> assigned(n_domains * k);
        for (std::size_t d = 0; d < n_domains; ++d) {
            for (std::size_t c = 0; c < n_classes; ++c) {
                const auto& cell = cells[d][c];
                std::vector<double> g(k);
                double total = 0.0;
                for (double& x : g) total += (x = gamma(rng));
                if (!(total > 0.0)) std::fill(g.begin(), g.end(), total = 1.0);
                double cum = 0.0;
                std::size_t start = 0;
                for (std::size_t j = 0; j < k; ++j) {
                    cum += g[j];
                    std::size_t end = j + 1 == k ? cell.size()
                                                 : static_cast<std::size_t>(std::floor(cum / total * cell.size()));
                    end = std::clamp(end, start, cell.size());
                    auto& slot = assigned[d * k + j];
                    slot.insert(slot.end(), cell.begin() + start, cell.begin() + end);
                    start = end;
                }
            }
        }
        if (std::any_of(assigned.begin(), assigned.end(), [](const auto& a) { return a.empty(); })) continue;
        std::vector<DomainDataset> out(assigned.size());
        for (std::size_t s = 0; s < assigned.size(); ++s) {
            auto idx = assigned[s];
            std::sort(idx.begin(), idx.end());
            for (std::size_t i : idx) out[s].samples.push_back(data.samples[i]);
        }
        return out;
    }
    throw DataError("dirichlet_partition: could not draw a split without empty clients");
}

// ---------------------------------------------------------------------------
// Federation
// ---------------------------------------------------------------------------

Federation::Federation(VariantSpec spec, std::shared_ptr<const EncoderWeights> encoders, PromptModelOptions options,
                       FederationConfig config, const DomainDataset& train)
    : spec_(spec), encoders_(std::move(encoders)), options_(options), config_(config) {
    config_.validate();
    for (const auto& s : train.samples) {
        if (s.domain_id >= options_.n_domains || s.class_id >= options_.n_classes) {
            throw ConfigError("training data does not match the model's domain/class counts");
        }
    }
    const std::size_t k = config_.clients_per_domain;
    if (!spec_.federated() && k != 1) throw ConfigError("variant " + std::string(to_string(spec_.mode)) +
                                                        " needs federation.clients_per_domain = 1");

    PromptModel base(spec_, encoders_, options_);
    for (const Tensor& t : base.text_prompts()) server_.text.push_back(t.detach());
    for (const Tensor& t : base.visual_prompts()) server_.visual.push_back(t.detach());

    std::vector<DomainDataset> slices;
    if (k == 1) {
        for (std::size_t d = 0; d < options_.n_domains; ++d) slices.push_back(train.domain_slice(d));
    } else {
        slices = dirichlet_partition(train, options_.n_domains, k, config_.dirichlet_beta, config_.seed);
    }

    clients_.reserve(slices.size());
    for (std::size_t id = 0; id < slices.size(); ++id) {
        ClientState c{id, id / k, base.clone(), std::move(slices[id]), nullptr, {}, {}, 0, Rng{}};
        c.model.set_owner(c.domain);
        c.model.set_trainable(false, false);
        if (spec_.trains()) {
            c.optimizer = std::make_unique<Optimizer>(config_.optimizer, c.model.trainable_parameters());
        }
        c.rng.seed(derive_seed(config_.seed, id));
        c.order.resize(c.data.size());
        for (std::size_t i = 0; i < c.order.size(); ++i) c.order[i] = i;
        std::shuffle(c.order.begin(), c.order.end(), c.rng);
        clients_.push_back(std::move(c));
    }
}

std::vector<std::size_t> Federation::client_domains() const {
    std::vector<std::size_t> out;
    for (const auto& c : clients_) out.push_back(c.domain);
    return out;
}

double Federation::local_train(ClientState& c) {
    const double exact = config_.schedule.epochs_per_round * static_cast<double>(c.data.size());
    const auto steps = static_cast<std::size_t>(std::llround(exact));
    if (steps == 0) return 0.0;
    if (c.data.empty()) throw DataError("client " + std::to_string(c.id) + " has no training samples");
    const double alpha = config_.effective_alpha();
    double total = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
        if (c.cursor == c.order.size()) {
            std::shuffle(c.order.begin(), c.order.end(), c.rng);
            c.cursor = 0;
        }
        const SampleRecord& sample = c.data.samples[c.order[c.cursor++]];
        if (!c.pending.empty()) momentum_load_external(c.model, c.pending, alpha);
        Tape tape;
        TapeScope scope(tape);
        const Tensor loss = c.model.loss(sample);
        tape.backward(loss);
        c.optimizer->step();
        total += loss.item();
    }
    return total / static_cast<double>(steps);
}

std::vector<Upload> Federation::train_clients() {
    if (!spec_.trains()) return {};
    std::vector<double> losses(clients_.size(), 0.0);
    if (config_.concurrent && clients_.size() > 1) {
        std::vector<std::future<double>> jobs;
        jobs.reserve(clients_.size());
        for (auto& c : clients_) jobs.push_back(std::async(std::launch::async, [this, &c] { return local_train(c); }));
        for (std::size_t i = 0; i < jobs.size(); ++i) losses[i] = jobs[i].get();
    } else {
        for (std::size_t i = 0; i < clients_.size(); ++i) losses[i] = local_train(clients_[i]);
    }
    last_train_loss_ = 0.0;
    for (double l : losses) last_train_loss_ += l / static_cast<double>(losses.size());

    std::vector<Upload> uploads;
    uploads.reserve(clients_.size());
    for (const auto& c : clients_) {
        Upload u{c.id, c.domain, {}, {}};
        if (spec_.learnable_text()) u.text = c.model.text_prompts()[c.model.owner_text_slot()].detach();
        for (const Tensor& v : c.model.visual_prompts()) u.visual.push_back(v.detach());
        uploads.push_back(std::move(u));
    }
    return uploads;
}

void Federation::aggregate_uploads(std::span<const Upload> uploads) {
    if (!spec_.federated()) {
        ++server_.round;
        return;
    }
    const auto domains = client_domains();
    aggregate(server_, uploads, domains, spec_, config_.visual_mode);
}

double Federation::broadcast() {
    if (!spec_.federated()) return 0.0;
    const double alpha = config_.effective_alpha();
    double change = 0.0;
    for (auto& c : clients_) {
        auto& text = c.model.text_prompts();
        if (spec_.per_domain_text()) {
            const std::size_t owner = c.model.owner_text_slot();
            text[owner].assign(server_.text[owner]);
            std::vector<ExternalPrompt> ext;
            for (std::size_t k = 0; k < text.size(); ++k) {
                if (k != owner) ext.push_back({k, server_.text[k].detach()});
            }
            if (config_.momentum_timing == MomentumTiming::per_round) {
                std::vector<std::vector<double>> before;
                for (const auto& e : ext) before.emplace_back(text[e.slot].data().begin(), text[e.slot].data().end());
                momentum_load_external(c.model, ext, alpha);
                for (std::size_t i = 0; i < ext.size(); ++i) change += distance(before[i], text[ext[i].slot].data());
            } else {
                c.pending = std::move(ext);
            }
        } else if (spec_.learnable_text()) {
            text[0].assign(server_.text[0]);
        }
        auto& visual = c.model.visual_prompts();
        for (std::size_t i = 0; i < visual.size(); ++i) visual[i].assign(server_.visual[i]);
    }
    return change;
}

RoundMetrics Federation::run_round() {
    const auto uploads = train_clients();
    aggregate_uploads(uploads);
    RoundMetrics m;
    m.external_change = broadcast();
    m.round = server_.round;
    m.mean_train_loss = last_train_loss_;
    return m;
}

PromptModel Federation::global_model() const {
    PromptModel model(spec_, encoders_, options_);
    for (std::size_t k = 0; k < server_.text.size(); ++k) model.text_prompts()[k].assign(server_.text[k]);
    for (std::size_t i = 0; i < server_.visual.size(); ++i) model.visual_prompts()[i].assign(server_.visual[i]);
    return model;
}

std::vector<DomainMetrics> Federation::evaluate(const DomainDataset& test) {
    std::vector<DomainMetrics> out;
    std::optional<PromptModel> global;
    if (spec_.federated() || !spec_.trains()) global.emplace(global_model());
    for (std::size_t d = 0; d < options_.n_domains; ++d) {
        const DomainDataset slice = test.domain_slice(d);
        PromptModel* model = global ? &*global : nullptr;
        if (!model) {
            auto it = std::find_if(clients_.begin(), clients_.end(), [d](const ClientState& c) { return c.domain == d; });
            model = &it->model;
        }
        const auto ev = model->evaluate(slice.samples);
        out.push_back({d, ev.total, ev.accuracy(), ev.mean_loss(), ev.mean_true_domain_weight()});
    }
    return out;
}

CommunicationReport Federation::communication() const {
    CommunicationReport r;
    if (!spec_.federated()) return r;
    const auto& cfg = encoders_->config;
    const std::size_t prompt = options_.prompt_length * cfg.text_width;
    const std::size_t visual = spec_.uses_visual_prompts() ? options_.n_domains * cfg.vision_width : 0;
    if (spec_.learnable_text()) {
        r.download_per_client = server_.text.size() * prompt;
        r.upload_per_client = prompt;
    }
    r.download_per_client += visual;
    r.upload_per_client += visual;
    r.total_per_round = clients_.size() * (r.download_per_client + r.upload_per_client);
    return r;
}

std::vector<RoundMetrics> run_federated(Federation& federation, const DomainDataset& test,
                                        const RoundCallback& on_round) {
    std::vector<RoundMetrics> history;
    RoundMetrics initial;
    initial.round = federation.round();
    initial.domains = federation.evaluate(test);
    if (on_round) on_round(federation, initial);
    history.push_back(std::move(initial));
    for (std::size_t r = 0; r < federation.config().schedule.rounds; ++r) {
        RoundMetrics m = federation.run_round();
        m.domains = federation.evaluate(test);
        if (on_round) on_round(federation, m);
        history.push_back(std::move(m));
    }
    return history;
}

}  // namespace fedprompt
