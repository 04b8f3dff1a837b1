#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "fedprompt/errors.hpp"
#include "fedprompt/federation.hpp"
#include "fedprompt/random.hpp"

using namespace fedprompt;

namespace {

using Vec = std::vector<double>;

Vec vec(const Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

struct Toy {
    std::shared_ptr<const EncoderWeights> enc;
    DatasetSplit data;
    PromptModelOptions opts;
    FederationConfig fed;
};

Toy toy(std::uint64_t seed, std::size_t samples = 5, std::size_t rounds = 3) {
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
    ds.samples_per_class_per_domain = samples;
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
    t.fed.concurrent = false;
    return t;
}

PromptModel adapt_model(const Toy& t) { return PromptModel(VariantSpec{VariantMode::adapt}, t.enc, t.opts); }

}  // namespace

TEST(MomentumLoad, AlphaExtremesAndExample) {
    const Toy t = toy(1);
    PromptModel m = adapt_model(t);
    m.set_owner(0);
    const Vec before = vec(m.text_prompts()[1]);
    const ExternalPrompt recv[] = {{1, Tensor::full(m.text_prompts()[1].shape(), 0.0)}};

    PromptModel a = m.clone();
    momentum_load_external(a, recv, 1.0);
    EXPECT_EQ(vec(a.text_prompts()[1]), before);

    PromptModel b = m.clone();
    momentum_load_external(b, recv, 0.0);
    EXPECT_EQ(vec(b.text_prompts()[1]), Vec(before.size(), 0.0));

    PromptModel c = m.clone();
    c.text_prompts()[2].assign(Vec(c.text_prompts()[2].numel(), 1.0));
    const ExternalPrompt zero2[] = {{2, Tensor::full(c.text_prompts()[2].shape(), 0.0)}};
    momentum_load_external(c, zero2, 0.99);
    for (double v : vec(c.text_prompts()[2])) EXPECT_NEAR(v, 0.99, 1e-15);
}

TEST(MomentumLoad, RejectsOwnerSlotAndBadInput) {
    const Toy t = toy(2);
    PromptModel m = adapt_model(t);
    m.set_owner(1);
    const auto shape = m.text_prompts()[0].shape();
    const ExternalPrompt owner[] = {{1, Tensor::zeros(shape)}};
    EXPECT_THROW(momentum_load_external(m, owner, 0.5), ProtocolError);
    const ExternalPrompt out_of_range[] = {{7, Tensor::zeros(shape)}};
    EXPECT_THROW(momentum_load_external(m, out_of_range, 0.5), IndexError);
    const ExternalPrompt bad_shape[] = {{0, Tensor::zeros({1, 3})}};
    EXPECT_THROW(momentum_load_external(m, bad_shape, 0.5), DimensionError);
    const ExternalPrompt ok[] = {{0, Tensor::zeros(shape)}};
    EXPECT_THROW(momentum_load_external(m, ok, 1.5), ParameterError);
}

TEST(Aggregate, IdenticalVisualUploadsStayBitwise) {
    Rng rng(3);
    const std::vector<Tensor> v = {Tensor::from_vector({4}, normal_vector(rng, 4, 1.0)),
                                   Tensor::from_vector({4}, normal_vector(rng, 4, 1.0))};
    ServerState s{{Tensor::zeros({2, 3}), Tensor::zeros({2, 3}), Tensor::zeros({2, 3})}, {Tensor::zeros({4}), Tensor::zeros({4})}, 0};
    std::vector<Upload> ups;
    for (std::size_t k = 0; k < 3; ++k) {
        Upload u{k, k, Tensor::from_vector({2, 3}, normal_vector(rng, 6, 1.0)), {}};
        for (const Tensor& x : v) u.visual.push_back(x.detach());
        ups.push_back(u);
    }
    const std::size_t domains[] = {0, 1, 2};
    aggregate(s, ups, domains, VariantSpec{VariantMode::adapt}, VisualMode::average);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(vec(s.visual[i]), vec(v[i]));
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(vec(s.text[k]), vec(ups[k].text));
    EXPECT_EQ(s.round, 1u);
}

TEST(Aggregate, TwoClientsAverage) {
    ServerState s{{Tensor::zeros({1, 1}), Tensor::zeros({1, 1})}, {Tensor::zeros({1})}, 0};
    const std::vector<Upload> ups = {{0, 0, Tensor::zeros({1, 1}), {Tensor::full({1}, 0.0)}},
                                     {1, 1, Tensor::zeros({1, 1}), {Tensor::full({1}, 2.0)}}};
    const std::size_t domains[] = {0, 1};
    aggregate(s, ups, domains, VariantSpec{VariantMode::adapt}, VisualMode::average);
    EXPECT_EQ(s.visual[0][0], 1.0);
}

TEST(Aggregate, SixClientsMatchSummationOracle) {
    Rng rng(4);
    const std::size_t n = 6;
    ServerState s;
    std::vector<Upload> ups;
    std::vector<std::size_t> domains;
    for (std::size_t k = 0; k < n; ++k) {
        s.text.push_back(Tensor::zeros({2, 3}));
        s.visual.push_back(Tensor::zeros({5}));
        Upload u{k, k, Tensor::from_vector({2, 3}, normal_vector(rng, 6, 1.0)), {}};
        for (std::size_t i = 0; i < n; ++i) u.visual.push_back(Tensor::from_vector({5}, normal_vector(rng, 5, 3.0)));
        ups.push_back(u);
        domains.push_back(k);
    }
    aggregate(s, ups, domains, VariantSpec{VariantMode::adapt}, VisualMode::average);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            long double acc = 0.0L;
            for (const auto& u : ups) acc += u.visual[i][j];
            EXPECT_NEAR(s.visual[i][j], double(acc / n), 1e-12);
        }
    }
}

TEST(Aggregate, SubClientsOfOneDomainAverageTheirText) {
    ServerState s{{Tensor::zeros({1, 2}), Tensor::zeros({1, 2})}, {}, 0};
    const std::vector<Upload> ups = {{0, 0, Tensor::from_vector({1, 2}, {1, 2}), {}},
                                     {1, 0, Tensor::from_vector({1, 2}, {3, 6}), {}},
                                     {2, 1, Tensor::from_vector({1, 2}, {5, 5}), {}},
                                     {3, 1, Tensor::from_vector({1, 2}, {5, 5}), {}}};
    const std::size_t domains[] = {0, 0, 1, 1};
    aggregate(s, ups, domains, VariantSpec{VariantMode::domain_agnostic}, VisualMode::average);
    EXPECT_EQ(vec(s.text[0]), (Vec{2, 4}));
    EXPECT_EQ(vec(s.text[1]), (Vec{5, 5}));
}

TEST(Aggregate, ProtocolViolationsThrow) {
    ServerState s{{Tensor::zeros({1, 1}), Tensor::zeros({1, 1})}, {}, 0};
    const std::size_t domains[] = {0, 1};
    const std::vector<Upload> missing = {{0, 0, Tensor::zeros({1, 1}), {}}};
    EXPECT_THROW(aggregate(s, missing, domains, VariantSpec{VariantMode::domain_agnostic}, VisualMode::average),
                 ProtocolError);
    const std::vector<Upload> dup = {{0, 0, Tensor::zeros({1, 1}), {}}, {0, 0, Tensor::zeros({1, 1}), {}}};
    EXPECT_THROW(aggregate(s, dup, domains, VariantSpec{VariantMode::domain_agnostic}, VisualMode::average),
                 ProtocolError);
    const std::vector<Upload> wrong = {{0, 1, Tensor::zeros({1, 1}), {}}, {1, 1, Tensor::zeros({1, 1}), {}}};
    EXPECT_THROW(aggregate(s, wrong, domains, VariantSpec{VariantMode::domain_agnostic}, VisualMode::average),
                 ProtocolError);
}

TEST(Dirichlet, SlicesPartitionTheData) {
    const Toy t = toy(5, 20);
    const auto slices = dirichlet_partition(t.data.train, 3, 5, 0.5, 11);
    ASSERT_EQ(slices.size(), 15u);
    std::multiset<std::vector<double>> seen;
    std::size_t total = 0;
    for (std::size_t s = 0; s < slices.size(); ++s) {
        EXPECT_FALSE(slices[s].empty());
        for (const auto& r : slices[s].samples) {
            EXPECT_EQ(r.domain_id, s / 5);
            seen.insert(vec(r.patches));
        }
        total += slices[s].size();
    }
    EXPECT_EQ(total, t.data.train.size());
    std::multiset<std::vector<double>> all;
    for (const auto& r : t.data.train.samples) all.insert(vec(r.patches));
    EXPECT_EQ(seen, all);
}

TEST(Dirichlet, LargeBetaIsNearlyUniform) {
    DatasetSpec ds;
    ds.samples_per_class_per_domain = 250;  // 200 train per cell
    ds.patch_count = 1;
    ds.patch_width = 2;
    const auto data = generate_domains(ds);
    const auto slices = dirichlet_partition(data.train, 3, 4, 1e6, 3);
    for (const auto& s : slices) {
        std::map<std::size_t, double> hist;
        for (const auto& r : s.samples) hist[r.class_id] += 1.0;
        for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(hist[c], 50.0, 50.0 * 0.05);
    }
}

TEST(Dirichlet, MatchesReferenceSampler) {
    const Toy t = toy(6, 20);
    const std::size_t n = 3, k = 5, C = 5;
    const auto slices = dirichlet_partition(t.data.train, n, k, 0.5, 21);

    // Reference: for every (domain, class) draw Gamma(beta) weights, normalize to
    // proportions, and hand out the cell's samples in dataset order by cumulative
    // floor boundaries. Whole draws repeat until every sub-client gets a sample.
    Rng rng(derive_seed(21, "dirichlet"));
    std::gamma_distribution<double> gamma(0.5, 1.0);
    std::vector<std::vector<const SampleRecord*>> ref;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        ref.assign(n * k, {});
        for (std::size_t d = 0; d < n; ++d) {
            for (std::size_t c = 0; c < C; ++c) {
                std::vector<const SampleRecord*> cell;
                for (const auto& r : t.data.train.samples)
                    if (r.domain_id == d && r.class_id == c) cell.push_back(&r);
                Vec p(k);
                for (double& x : p) x = gamma(rng);
                const double z = std::accumulate(p.begin(), p.end(), 0.0);
                std::size_t lo = 0;
                double cum = 0.0;
                for (std::size_t j = 0; j < k; ++j) {
                    cum += p[j];
                    std::size_t hi = j + 1 == k ? cell.size() : std::size_t(std::floor(cum / z * cell.size()));
                    hi = std::min(std::max(hi, lo), cell.size());
                    for (std::size_t i = lo; i < hi; ++i) ref[d * k + j].push_back(cell[i]);
                    lo = hi;
                }
            }
        }
        if (std::none_of(ref.begin(), ref.end(), [](const auto& s) { return s.empty(); })) break;
    }
    for (std::size_t s = 0; s < n * k; ++s) {
        std::multiset<Vec> got, want;
        for (const auto& r : slices[s].samples) got.insert(vec(r.patches));
        for (const auto* r : ref[s]) want.insert(vec(r->patches));
        EXPECT_EQ(got, want) << "slice " << s;
    }
}

TEST(Federation, ZeroEpochsUploadsCurrentPrompts) {
    Toy t = toy(7);
    t.fed.schedule.epochs_per_round = 0.0;
    Federation fed(VariantSpec{VariantMode::adapt}, t.enc, t.opts, t.fed, t.data.train);
    const auto server = fed.server();
    const auto ups = fed.train_clients();
    for (const auto& u : ups) {
        EXPECT_EQ(vec(u.text), vec(server.text[u.domain]));
        for (std::size_t i = 0; i < u.visual.size(); ++i) EXPECT_EQ(vec(u.visual[i]), vec(server.visual[i]));
    }
}

TEST(Federation, EncoderUntouchedByTraining) {
    const Toy t = toy(8);
    const auto before = t.enc->content_hash();
    Federation fed(VariantSpec{VariantMode::adapt}, t.enc, t.opts, t.fed, t.data.train);
    fed.run_round();
    EXPECT_EQ(fed.encoders().content_hash(), before);
}

TEST(Federation, TrainingLowersLoss) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Toy t = toy(10 + seed, 10, 5);
        t.fed.optimizer.lr = 5e-4;
        Federation fed(VariantSpec{VariantMode::adapt}, t.enc, t.opts, t.fed, t.data.train);
        const auto hist = run_federated(fed, t.data.train);
        auto mean_loss = [](const RoundMetrics& m) {
            double s = 0.0;
            for (const auto& d : m.domains) s += d.mean_loss / double(m.domains.size());
            return s;
        };
        EXPECT_LT(mean_loss(hist.back()), mean_loss(hist.front())) << "seed " << seed;
    }
}

TEST(Federation, ZeroRoundsRecordsOnlyInitialEvaluation) {
    Toy t = toy(9);
    t.fed.schedule.rounds = 0;
    Federation fed(VariantSpec{VariantMode::adapt}, t.enc, t.opts, t.fed, t.data.train);
    const auto hist = run_federated(fed, t.data.test);
    ASSERT_EQ(hist.size(), 1u);
    EXPECT_EQ(hist[0].round, 0u);
}

TEST(Federation, SameSeedSameHistory) {
    const Toy t = toy(12);
    auto history = [&] {
        Federation fed(VariantSpec{VariantMode::adapt}, t.enc, t.opts, t.fed, t.data.train);
        return run_federated(fed, t.data.test);
    };
    const auto a = history(), b = history();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t r = 0; r < a.size(); ++r) {
        EXPECT_EQ(a[r].mean_train_loss, b[r].mean_train_loss);
        for (std::size_t d = 0; d < a[r].domains.size(); ++d) {
            EXPECT_EQ(a[r].domains[d].accuracy, b[r].domains[d].accuracy);
            EXPECT_EQ(a[r].domains[d].mean_loss, b[r].domains[d].mean_loss);
        }
    }
}

TEST(Federation, ConcurrentMatchesSequential) {
    Toy t = toy(13);
    Federation seq(VariantSpec{VariantMode::adapt}, t.enc, t.opts, t.fed, t.data.train);
    t.fed.concurrent = true;
    Federation par(VariantSpec{VariantMode::adapt}, t.enc, t.opts, t.fed, t.data.train);
    for (int r = 0; r < 3; ++r) {
        seq.run_round();
        par.run_round();
        for (std::size_t k = 0; k < seq.server().text.size(); ++k) {
            const Vec a = vec(seq.server().text[k]), b = vec(par.server().text[k]);
            for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
        }
        for (std::size_t k = 0; k < seq.server().visual.size(); ++k) {
            const Vec a = vec(seq.server().visual[k]), b = vec(par.server().visual[k]);
            for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
        }
    }
}

TEST(Federation, ProtocolStepByStep) {
    const Toy t = toy(14);
    Federation fed(VariantSpec{VariantMode::adapt}, t.enc, t.opts, t.fed, t.data.train);
    const double alpha = t.fed.schedule.alpha;
    for (int r = 0; r < 2; ++r) {
        const auto ups = fed.train_clients();
        fed.aggregate_uploads(ups);
        for (const auto& u : ups) EXPECT_EQ(vec(fed.server().text[u.domain]), vec(u.text));
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
                const Vec now = vec(c.model.text_prompts()[k]), recv = vec(fed.server().text[k]);
                for (std::size_t i = 0; i < now.size(); ++i) {
                    const double expected = k == c.domain ? recv[i] : alpha * before[ci][k][i] + (1 - alpha) * recv[i];
                    EXPECT_NEAR(now[i], expected, 1e-12);
                }
            }
        }
    }
}

TEST(Federation, TextualOnlyEqualsSingleDomainWithOneDomain) {
    Toy t = toy(15);
    t.opts.n_domains = 1;
    DomainDataset train, test;
    for (const auto& s : t.data.train.samples)
        if (s.domain_id == 0) train.samples.push_back(s);
    for (const auto& s : t.data.test.samples)
        if (s.domain_id == 0) test.samples.push_back(s);
    Federation a(VariantSpec{VariantMode::textual_only}, t.enc, t.opts, t.fed, train);
    Federation b(VariantSpec{VariantMode::single_domain}, t.enc, t.opts, t.fed, train);
    const auto ha = run_federated(a, test), hb = run_federated(b, test);
    for (std::size_t r = 0; r < ha.size(); ++r) {
        EXPECT_NEAR(ha[r].domains[0].accuracy, hb[r].domains[0].accuracy, 1e-12);
        EXPECT_NEAR(ha[r].domains[0].mean_loss, hb[r].domains[0].mean_loss, 1e-12);
    }
    EXPECT_EQ(vec(a.global_model().text_prompts()[0]), vec(b.clients()[0].model.text_prompts()[0]));
}

TEST(Federation, CommunicationMatchesPromptSizes) {
    const Toy t = toy(16);
    Federation fed(VariantSpec{VariantMode::adapt}, t.enc, t.opts, t.fed, t.data.train);
    const auto c = fed.communication();
    const std::size_t n = 3, m = 2, de = 8, dv = 8;
    EXPECT_EQ(c.download_per_client, n * m * de + n * dv);
    EXPECT_EQ(c.upload_per_client, m * de + n * dv);
}

TEST(Federation, ModesParse) {
    EXPECT_EQ(parse_alpha_mode("replace"), AlphaMode::replace);
    EXPECT_EQ(parse_visual_mode("pass_through"), VisualMode::pass_through);
    EXPECT_EQ(parse_momentum_timing("per_step"), MomentumTiming::per_step);
    EXPECT_THROW(parse_alpha_mode("sometimes"), ConfigError);
}

TEST(Federation, NonFederatedVariantRejectsSubClients) {
    Toy t = toy(17);
    t.fed.clients_per_domain = 2;
    EXPECT_THROW(Federation(VariantSpec{VariantMode::single_domain}, t.enc, t.opts, t.fed, t.data.train), ConfigError);
}
