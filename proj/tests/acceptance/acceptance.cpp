// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance [default.yaml]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "../unit/oracles.hpp"
#include "fedprompt/experiment.hpp"
#include "fedprompt/random.hpp"

using namespace fedprompt;

namespace {

using Vec = std::vector<double>;
using Clock = std::chrono::steady_clock;

Vec vec(const Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor randn(Rng& rng, Shape shape, double sd = 1.0) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return Tensor::from_vector(shape, normal_vector(rng, n, sd));
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
    std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

EncoderConfig random_encoder(Rng& rng) {
    EncoderConfig c;
    c.heads = pick(rng, 1, 2);
    // Width 2 makes every layer norm output +-1, leaving nothing for finite differences to see.
    c.text_width = 2 * c.heads * pick(rng, 2, 3);
    c.vision_width = 2 * c.heads * pick(rng, 2, 3);
    c.embed_dim = pick(rng, 2, 6);
    c.layers = pick(rng, 1, 2);
    c.patch_count = pick(rng, 2, 4);
    c.vocab_size = 16;
    c.context_length = 8;
    c.seed = rng();
    return c;
}

struct Toy {
    std::shared_ptr<const EncoderWeights> enc;
    DatasetSplit data;
    PromptModelOptions opts;
    FederationConfig fed;
};

Toy toy(std::uint64_t seed, std::size_t rounds) {
    EncoderConfig ec;
    ec.text_width = 8;
    ec.vision_width = 8;
    ec.embed_dim = 6;
    ec.layers = 1;
    ec.patch_count = 4;
    ec.vocab_size = 16;
    ec.context_length = 12;
    ec.seed = seed;
    DatasetSpec ds;
    ds.samples_per_class_per_domain = 5;
    ds.patch_count = 4;
    ds.patch_width = 8;
    ds.seed = seed + 1;
    Toy t{std::make_shared<const EncoderWeights>(init_encoders(ec)), generate_domains(ds), {}, {}};
    t.opts.prompt_length = 2;
    t.opts.loss = {LossMode::cross_entropy, 1.0, 0.07};
    t.opts.seed = seed + 2;
    t.fed.schedule.rounds = rounds;
    t.fed.optimizer.lr = 5e-3;
    t.fed.seed = seed + 3;
    return t;
}

void gradient_correctness() {
    const auto t0 = Clock::now();
    Rng rng(101);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto enc = std::make_shared<const EncoderWeights>(init_encoders(random_encoder(rng)));
        PromptModelOptions o;
        o.n_domains = pick(rng, 2, 4);
        o.n_classes = pick(rng, 2, 5);
        o.prompt_length = pick(rng, 1, 3);
        o.tau_d = uniform(rng, 0.1, 1.0);
        o.loss = {trial % 2 ? LossMode::cosine : LossMode::cross_entropy, uniform(rng, 0.0, 2.0),
                  uniform(rng, 0.07, 1.0)};
        o.seed = rng();
        PromptModel m(VariantSpec{VariantMode::adapt}, enc, o);
        m.set_owner(pick(rng, 0, o.n_domains - 1));
        m.set_trainable(true, false);
        const SampleRecord sample{randn(rng, {enc->config.patch_count, enc->config.vision_width}),
                                  pick(rng, 0, o.n_classes - 1), pick(rng, 0, o.n_domains - 1)};
        const auto params = m.trainable_parameters();
        {
            Tape tape;
            TapeScope scope(tape);
            tape.backward(m.loss(sample));
        }
        for (const Tensor& p : params) {
            const Vec analytic(p.grad().begin(), p.grad().end());
            const Vec numeric = oracle::finite_difference(p, [&] { return m.loss(sample).item(); });
            worst = std::max(worst, oracle::max_relative_error(analytic, numeric, 1e-4));
        }
    }
    const double secs = seconds_since(t0);
    report(1, worst <= 1e-5 && secs < 60.0,
           fmt("50 configs, max relative error %.2e (floor 1e-4), %.1f s", worst, secs));
}

void weight_invariants() {
    Rng rng(202);
    double worst_sum = 0.0;
    bool argmax_ok = true, fusion_ok = true;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = pick(rng, 1, 6), width = pick(rng, 2, 12);
        const AttentionRecord rec{randn(rng, {width}), randn(rng, {n, width})};
        const auto w = domain_weights(rec, uniform(rng, 0.01, 2.0));
        const auto w2 = domain_weights(rec, uniform(rng, 0.01, 2.0));
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += w[i];
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
        const Vec a = vec(w.values), b = vec(w2.values);
        argmax_ok &= std::max_element(a.begin(), a.end()) - a.begin() == std::max_element(b.begin(), b.end()) - b.begin();

        const std::size_t j = pick(rng, 0, n - 1);
        Vec onehot(n, 0.0);
        onehot[j] = 1.0;
        const DomainWeights hot{Tensor::zeros({n}), Tensor::from_vector({n}, onehot)};
        const Tensor feats = randn(rng, {n, width});
        const Vec fused = vec(fuse_text_features(hot, feats));
        fusion_ok &= fused == Vec(feats.data().begin() + j * width, feats.data().begin() + (j + 1) * width);
    }
    report(2, worst_sum <= 1e-12 && argmax_ok && fusion_ok,
           fmt("1000 inputs, max |sum-1| %.1e, argmax stable %s, one-hot fusion bitwise %s", worst_sum,
               argmax_ok ? "yes" : "no", fusion_ok ? "yes" : "no"));
}

void frozen_encoder() {
    const Toy t = toy(303, 10);
    const auto before = t.enc->content_hash();
    Federation fed(VariantSpec{VariantMode::adapt}, t.enc, t.opts, t.fed, t.data.train);
    run_federated(fed, t.data.test);
    const auto after = t.enc->content_hash();
    report(3, before == after, fmt("hash %016llx -> %016llx after 10 rounds", (unsigned long long)before,
                                    (unsigned long long)after));
}

void protocol_exactness() {
    Toy t = toy(404, 10);
    t.fed.clients_per_domain = 1;
    Federation fed(VariantSpec{VariantMode::adapt}, t.enc, t.opts, t.fed, t.data.train);
    const double alpha = t.fed.effective_alpha();
    bool text_ok = true;
    double momentum_err = 0.0, visual_err = 0.0;
    for (int r = 0; r < 10; ++r) {
        const auto ups = fed.train_clients();
        fed.aggregate_uploads(ups);
        for (const auto& u : ups) text_ok &= vec(fed.server().text[u.domain]) == vec(u.text);
        for (std::size_t i = 0; i < fed.server().visual.size(); ++i) {
            const Vec got = vec(fed.server().visual[i]);
            for (std::size_t j = 0; j < got.size(); ++j) {
                long double acc = 0.0L;
                for (const auto& u : ups) acc += u.visual[i][j];
                visual_err = std::max(visual_err, std::abs(got[j] - double(acc / ups.size())));
            }
        }
        std::vector<std::vector<Vec>> before;
        for (const auto& c : fed.clients()) {
            std::vector<Vec> slots;
            for (const Tensor& p : c.model.text_prompts()) slots.push_back(vec(p));
            before.push_back(slots);
        }
        fed.broadcast();
        for (std::size_t ci = 0; ci < fed.clients().size(); ++ci) {
            const auto& c = fed.clients()[ci];
            for (std::size_t k = 0; k < c.model.text_prompts().size(); ++k) {
                if (k == c.domain) continue;
                const Vec now = vec(c.model.text_prompts()[k]), recv = vec(fed.server().text[k]);
                for (std::size_t i = 0; i < now.size(); ++i)
                    momentum_err =
                        std::max(momentum_err, std::abs(now[i] - (alpha * before[ci][k][i] + (1 - alpha) * recv[i])));
            }
        }
    }
    report(4, text_ok && momentum_err <= 1e-12 && visual_err <= 1e-12,
           fmt("10 rounds, owner slots bitwise %s, momentum err %.1e, visual mean err %.1e", text_ok ? "yes" : "no",
               momentum_err, visual_err));
}

void concurrency() {
    Toy t = toy(505, 10);
    t.fed.concurrent = true;
    Federation a(VariantSpec{VariantMode::adapt}, t.enc, t.opts, t.fed, t.data.train);
    t.fed.concurrent = false;
    Federation b(VariantSpec{VariantMode::adapt}, t.enc, t.opts, t.fed, t.data.train);
    double worst = 0.0;
    auto diff = [&](const std::vector<Tensor>& x, const std::vector<Tensor>& y) {
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t j = 0; j < x[i].numel(); ++j) worst = std::max(worst, std::abs(x[i][j] - y[i][j]));
    };
    for (int r = 0; r < 10; ++r) {
        a.run_round();
        b.run_round();
        diff(a.server().text, b.server().text);
        diff(a.server().visual, b.server().visual);
    }
    report(5, worst <= 1e-12, fmt("10 rounds, max |concurrent - sequential| %.1e", worst));
}

struct Runs {
    std::vector<SeedRun> adapt, agnostic, zero_shot;
};

double final_accuracy(const SeedRun& run) {
    double s = 0.0;
    for (const auto& d : run.history.back().domains) s += d.accuracy;
    return s / run.history.back().domains.size();
}

double mean_final_accuracy(const std::vector<SeedRun>& runs) {
    double s = 0.0;
    for (const auto& r : runs) s += final_accuracy(r);
    return s / runs.size();
}

double final_true_weight(const SeedRun& run) {
    double s = 0.0;
    for (const auto& d : run.history.back().domains) s += d.mean_true_domain_weight;
    return s / run.history.back().domains.size();
}

ExperimentConfig with_variant(ExperimentConfig c, VariantMode v) {
    c.variant = v;
    return c;
}

void domain_detection(const ExperimentConfig& config, Runs& runs) {
    const auto t0 = Clock::now();
    double weight = 0.0;
    for (std::uint64_t seed : {0, 1, 2}) {
        runs.adapt.push_back(run_seed(config, seed, "adapt"));
        weight += final_true_weight(runs.adapt.back()) / 3.0;
    }
    const double secs = seconds_since(t0);
    report(6, weight >= 0.5 && secs < 120.0,
           fmt("true-domain weight %.3f over 3 seeds (prior %.3f), %.1f s", weight, 1.0 / config.dataset.n_domains,
               secs));
}

void method_ordering(const ExperimentConfig& config, Runs& runs) {
    for (std::uint64_t seed : {0, 1, 2}) {
        runs.agnostic.push_back(run_seed(with_variant(config, VariantMode::domain_agnostic), seed, "domain_agnostic"));
        runs.zero_shot.push_back(run_seed(with_variant(config, VariantMode::zero_shot), seed, "zero_shot"));
    }
    const double a = 100 * mean_final_accuracy(runs.adapt), d = 100 * mean_final_accuracy(runs.agnostic),
                 z = 100 * mean_final_accuracy(runs.zero_shot);
    report(7, a >= d + 2.0 && a >= z + 5.0,
           fmt("adapt %.2f, domain_agnostic %.2f, zero_shot %.2f (points)", a, d, z));
}

void momentum_mechanism(const ExperimentConfig& config, const Runs& runs) {
    ExperimentConfig plain = config;
    plain.federation.alpha_mode = AlphaMode::replace;
    const SeedRun smooth = runs.adapt.front();
    const SeedRun raw = run_seed(plain, smooth.seed, "adapt_alpha0");
    std::size_t smaller = 0, total = 0;
    for (std::size_t r = 1; r < smooth.history.size(); ++r, ++total)
        if (smooth.history[r].external_change < raw.history[r].external_change) ++smaller;
    const double frac = total ? double(smaller) / total : 0.0;
    report(8, total > 0 && frac >= 0.95,
           fmt("external change smaller in %zu/%zu rounds; accuracy alpha=0.99 %.2f vs alpha=0 %.2f (report only)",
               smaller, total, 100 * final_accuracy(smooth), 100 * final_accuracy(raw)));
}

void dirichlet_decentralization(const ExperimentConfig& config, const Runs& runs) {
    ExperimentConfig split = config;
    split.federation.clients_per_domain = 5;
    split.federation.dirichlet_beta = 0.5;
    std::vector<SeedRun> k5;
    for (std::uint64_t seed : {0, 1, 2}) k5.push_back(run_seed(split, seed, "adapt_k5"));
    const double a1 = 100 * mean_final_accuracy(runs.adapt), a5 = 100 * mean_final_accuracy(k5);
    report(9, std::abs(a5 - a1) <= 5.0, fmt("3 clients %.2f vs 15 sub-clients %.2f (points)", a1, a5));
}

void gradient_leak(const ExperimentConfig& config) {
    Rng rng(1010);
    std::size_t good = 0;
    double worst = 1.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t dim = pick(rng, 2, 64), labels = pick(rng, 2, 10);
        LinearSoftmaxModel model(dim, labels, rng());
        const Tensor x = randn(rng, {dim});
        const double c = oracle::cosine(linear_leak_oracle(capture_gradient(model, x, pick(rng, 0, labels - 1))), vec(x));
        worst = std::min(worst, c);
        if (c > 0.99) ++good;
    }
    Tensor truth;
    const auto cap = make_capture(config, 0, false, &truth);
    const auto attack = run_attack(config, cap, &truth);
    report(10, good == 100,
           fmt("linear recovery %zu/100 (min cosine %.6f); prompt-model DLG cosine %.3f after %zu evals (report only)",
               good, worst, attack.cosine_to_truth.value_or(std::nan("")), attack.iters));
}

void nearest_word_decoding() {
    Rng rng(1111);
    const auto enc = init_encoders(EncoderConfig{});
    const Tensor& vocab = enc.text.token_embedding;
    const std::size_t d = vocab.cols(), V = vocab.rows();
    const Tensor tokens = randn(rng, {1000, d}, 0.05);
    const auto ids = decode_prompt_nearest_words(tokens, vocab);
    std::size_t agree = 0;
    for (std::size_t t = 0; t < 1000; ++t) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < V; ++v) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double e = tokens[t * d + j] - vocab[v * d + j];
                s += e * e;
            }
            if (s < best_d) best_d = s, best = v;
        }
        if (ids[t] == best) ++agree;
    }
    report(11, agree == 1000, fmt("%zu/1000 tokens agree with brute force", agree));
}

void parameter_accounting(const Runs& runs, const ExperimentConfig& config) {
    Rng rng(1212);
    std::size_t checked = 0, mismatched = 0;
    for (int trial = 0; trial < 200; ++trial) {
        EncoderConfig ec = random_encoder(rng);
        ec.context_length = 12;
        ec.max_visual_prompts = 8;
        const auto enc = std::make_shared<const EncoderWeights>(init_encoders(ec));
        PromptModelOptions o;
        o.n_domains = pick(rng, 1, 8);
        o.prompt_length = pick(rng, 1, 10);
        o.seed = rng();
        const std::size_t expected = o.n_domains * o.prompt_length * ec.text_width + o.n_domains * ec.vision_width;
        PromptModel m(VariantSpec{VariantMode::adapt}, enc, o);
        mismatched += m.global_parameter_count() != expected;
        mismatched += trainable_parameter_count(VariantMode::adapt, o.n_domains, o.prompt_length, ec.text_width,
                                                ec.vision_width) != expected;
        ++checked;
    }
    const std::size_t n = config.dataset.n_domains, m = config.prompt_length;
    const std::size_t expected = n * m * config.encoder.text_width + n * config.encoder.vision_width;
    for (const auto& r : runs.adapt) {
        mismatched += r.trainable_parameters != expected;
        ++checked;
    }
    report(12, mismatched == 0,
           fmt("%zu configs, %zu mismatches (default task reports %zu)", checked, mismatched,
               runs.adapt.empty() ? 0 : runs.adapt.front().trainable_parameters));
}

void guarded(int id, const std::function<void()>& body) {
    try {
        body();
    } catch (const std::exception& e) {
        report(id, false, std::string("threw: ") + e.what());
    }
}

}  // namespace

int main(int argc, char** argv) {
    const std::string path = argc > 1 ? argv[1] : FEDPROMPT_DEFAULT_CONFIG;
    ExperimentConfig config = load_config(path);
    config.seeds = {0, 1, 2};
    Runs runs;

    guarded(1, gradient_correctness);
    guarded(2, weight_invariants);
    guarded(3, frozen_encoder);
    guarded(4, protocol_exactness);
    guarded(5, concurrency);
    guarded(6, [&] { domain_detection(config, runs); });
    guarded(7, [&] { method_ordering(config, runs); });
    guarded(8, [&] { momentum_mechanism(config, runs); });
    guarded(9, [&] { dirichlet_decentralization(config, runs); });
    guarded(10, [&] { gradient_leak(config); });
    guarded(11, nearest_word_decoding);
    guarded(12, [&] { parameter_accounting(runs, config); });

    std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
    return failures ? 1 : 0;
}
