#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "fedprompt/errors.hpp"
#include "fedprompt/random.hpp"
#include "fedprompt/encoder.hpp"
#include "oracles.hpp"

using namespace fedprompt;
using oracle::Matrix;

namespace {

using Vec = std::vector<double>;

Vec vec(const Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

Matrix mat(const Tensor& t) {
    if (t.dim() == 1) return {vec(t)};
    return oracle::to_matrix(t);
}

Vec layer_norm_row(const Vec& x, const Vec& g, const Vec& b) {
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= double(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= double(x.size());
    Vec out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
    return out;
}

Vec affine(const Vec& x, const Matrix& w, const Vec& b) {
    Vec out(b);
    for (std::size_t j = 0; j < out.size(); ++j)
        for (std::size_t i = 0; i < x.size(); ++i) out[j] += x[i] * w[i][j];
    return out;
}

double gelu(double x) {
    const double k = std::sqrt(2.0 / std::acos(-1.0));
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

// Single-head pre-LN block written out token by token. visible(r, c) decides
// which keys row r attends to.
Matrix block(const TransformerBlock& b, const Matrix& x, const std::function<bool(std::size_t, std::size_t)>& visible) {
    const std::size_t L = x.size(), w = x[0].size();
    const Matrix wqkv = mat(b.qkv_weight), wo = mat(b.out_weight), w1 = mat(b.fc1_weight), w2 = mat(b.fc2_weight);
    Matrix q(L), k(L), v(L);
    for (std::size_t t = 0; t < L; ++t) {
        const Vec qkv = affine(layer_norm_row(x[t], vec(b.ln1_gamma), vec(b.ln1_beta)), wqkv, vec(b.qkv_bias));
        q[t] = Vec(qkv.begin(), qkv.begin() + w);
        k[t] = Vec(qkv.begin() + w, qkv.begin() + 2 * w);
        v[t] = Vec(qkv.begin() + 2 * w, qkv.end());
    }
    Matrix out(L);
    for (std::size_t r = 0; r < L; ++r) {
        Vec scores;
        std::vector<std::size_t> cols;
        for (std::size_t c = 0; c < L; ++c) {
            if (!visible(r, c)) continue;
            scores.push_back(oracle::dot(q[r], k[c]) / std::sqrt(double(w)));
            cols.push_back(c);
        }
        const Vec p = oracle::softmax(scores);
        Vec att(w, 0.0);
        for (std::size_t i = 0; i < cols.size(); ++i)
            for (std::size_t j = 0; j < w; ++j) att[j] += p[i] * v[cols[i]][j];
        Vec x1 = affine(att, wo, vec(b.out_bias));
        for (std::size_t j = 0; j < w; ++j) x1[j] += x[r][j];
        Vec h = affine(layer_norm_row(x1, vec(b.ln2_gamma), vec(b.ln2_beta)), w1, vec(b.fc1_bias));
        for (double& e : h) e = gelu(e);
        const Vec m = affine(h, w2, vec(b.fc2_bias));
        for (std::size_t j = 0; j < w; ++j) x1[j] += m[j];
        out[r] = x1;
    }
    return out;
}

EncoderConfig micro_config(std::uint64_t seed) {
    EncoderConfig c;
    c.text_width = 2;
    c.vision_width = 2;
    c.embed_dim = 2;
    c.layers = 1;
    c.heads = 1;
    c.patch_count = 3;
    c.vocab_size = 6;
    c.context_length = 8;
    c.max_visual_prompts = 2;
    c.seed = seed;
    return c;
}

}  // namespace

TEST(Encoders, SameSeedIsBitwiseIdentical) {
    EncoderConfig c;
    c.seed = 4;
    const auto a = init_encoders(c), b = init_encoders(c);
    const auto ta = a.tensors(), tb = b.tensors();
    ASSERT_EQ(ta.size(), tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(vec(ta[i]), vec(tb[i]));
    EXPECT_EQ(a.content_hash(), b.content_hash());
}

TEST(Encoders, DifferentSeedsDiffer) {
    EncoderConfig c;
    c.seed = 1;
    const auto a = init_encoders(c);
    c.seed = 2;
    const auto b = init_encoders(c);
    bool differs = false;
    const auto ta = a.tensors(), tb = b.tensors();
    for (std::size_t i = 0; i < ta.size(); ++i) differs = differs || vec(ta[i]) != vec(tb[i]);
    EXPECT_TRUE(differs);
    EXPECT_NE(a.content_hash(), b.content_hash());
}

TEST(Encoders, NoTensorRequiresGrad) {
    for (const Tensor& t : init_encoders(EncoderConfig{}).tensors()) EXPECT_FALSE(t.requires_grad());
}

TEST(Encoders, ImageFeaturesFiniteAndBounded) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        EncoderConfig c;
        c.seed = seed;
        const auto w = init_encoders(c);
        Rng rng(seed + 1000);
        const Tensor patches = Tensor::from_vector({c.patch_count, c.vision_width},
                                                   normal_vector(rng, c.patch_count * c.vision_width, 1.0));
        const Tensor prompts = Tensor::from_vector({3, c.vision_width}, normal_vector(rng, 3 * c.vision_width, 1.0));
        const auto enc = encode_image(prompts, patches, w);
        const double n = oracle::norm(vec(enc.features));
        EXPECT_TRUE(std::isfinite(n));
        EXPECT_GT(n, 0.0);
        EXPECT_LT(n, 100.0);
    }
}

TEST(ClassEmbedding, IsTableRow) {
    const auto w = init_encoders(EncoderConfig{});
    for (std::size_t id = 0; id < w.config.vocab_size; ++id) {
        const Tensor e = embed_class_name(id, w);
        ASSERT_EQ(e.shape(), (Shape{1, w.config.text_width}));
        for (std::size_t j = 0; j < w.config.text_width; ++j) EXPECT_EQ(e[j], w.text.token_embedding.at(id, j));
    }
    EXPECT_EQ(vec(embed_class_name(3, w)), vec(embed_class_name(3, w)));
    EXPECT_NE(vec(embed_class_name(3, w)), vec(embed_class_name(4, w)));
    EXPECT_THROW(embed_class_name(w.config.vocab_size, w), IndexError);
}

TEST(TextEncoder, DeterministicWithOutputWidthD) {
    const auto w = init_encoders(EncoderConfig{});
    Rng rng(2);
    const Tensor prompt = Tensor::from_vector({4, 16}, normal_vector(rng, 64, 1.0));
    const Tensor a = encode_text(prompt, embed_class_name(1, w), w);
    const Tensor b = encode_text(prompt, embed_class_name(1, w), w);
    EXPECT_EQ(a.shape(), (Shape{w.config.embed_dim}));
    EXPECT_EQ(vec(a), vec(b));
}

TEST(TextEncoder, MatchesHandComputedMicroTransformer) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto w = init_encoders(micro_config(seed));
        const Tensor prompt = Tensor::from_vector({2, 2}, {0.3, -1.2, 0.8, 0.5});
        const Tensor out = encode_text(prompt, embed_class_name(4, w), w);

        Matrix x = {Vec{0.3, -1.2}, Vec{0.8, 0.5},
                    Vec{w.text.token_embedding.at(4, 0), w.text.token_embedding.at(4, 1)}};
        for (std::size_t t = 0; t < 3; ++t)
            for (std::size_t j = 0; j < 2; ++j) x[t][j] += w.text.positional.at(t, j);
        x = block(w.text.blocks[0], x, [](std::size_t r, std::size_t c) { return c <= r; });
        const Vec h = layer_norm_row(x[2], vec(w.text.ln_final_gamma), vec(w.text.ln_final_beta));
        const Vec expected = affine(h, mat(w.text.projection), Vec(2, 0.0));
        ASSERT_EQ(out.numel(), 2u);
        EXPECT_NEAR(out[0], expected[0], 1e-10);
        EXPECT_NEAR(out[1], expected[1], 1e-10);
    }
}

TEST(TextEncoder, BatchedClassesMatchSingleEncodes) {
    const auto w = init_encoders(EncoderConfig{});
    Rng rng(8);
    const Tensor prompt = Tensor::from_vector({5, 16}, normal_vector(rng, 80, 1.0));
    const std::size_t ids[] = {0, 3, 2, 4};
    const Tensor batched = encode_text_classes(prompt, ids, w);
    for (std::size_t c = 0; c < 4; ++c) {
        const Tensor single = encode_text(prompt, embed_class_name(ids[c], w), w);
        for (std::size_t j = 0; j < w.config.embed_dim; ++j) EXPECT_NEAR(batched.at(c, j), single[j], 1e-12);
    }
}

TEST(ImageEncoder, MatchesHandComputedMicroTransformer) {
    const auto w = init_encoders(micro_config(9));
    const Tensor prompts = Tensor::from_vector({2, 2}, {0.1, 0.4, -0.7, 0.2});
    const Tensor patches = Tensor::from_vector({3, 2}, {1.0, -0.5, 0.25, 0.75, -1.5, 0.5});
    const auto enc = encode_image(prompts, patches, w);

    Matrix x = {vec(w.vision.class_embedding), {0.1, 0.4}, {-0.7, 0.2}, {1.0, -0.5}, {0.25, 0.75}, {-1.5, 0.5}};
    // cls takes position 0 and patches 1..3; prompts get no position.
    const int pos[] = {0, -1, -1, 1, 2, 3};
    for (std::size_t t = 0; t < 6; ++t) {
        if (pos[t] >= 0)
            for (std::size_t j = 0; j < 2; ++j) x[t][j] += w.vision.positional.at(std::size_t(pos[t]), j);
        x[t] = layer_norm_row(x[t], vec(w.vision.ln_pre_gamma), vec(w.vision.ln_pre_beta));
    }
    const auto& b = w.vision.blocks[0];
    const Vec qkv_cls = affine(layer_norm_row(x[0], vec(b.ln1_gamma), vec(b.ln1_beta)), mat(b.qkv_weight), vec(b.qkv_bias));
    x = block(b, x, [](std::size_t, std::size_t) { return true; });
    const Vec h = layer_norm_row(x[0], vec(w.vision.ln_post_gamma), vec(w.vision.ln_post_beta));
    const Vec f = affine(h, mat(w.vision.projection), Vec(2, 0.0));
    EXPECT_NEAR(enc.features[0], f[0], 1e-10);
    EXPECT_NEAR(enc.features[1], f[1], 1e-10);
    EXPECT_NEAR(enc.attention.query_cls[0], qkv_cls[0] / std::sqrt(2.0), 1e-10);
    EXPECT_NEAR(enc.attention.query_cls[1], qkv_cls[1] / std::sqrt(2.0), 1e-10);
    ASSERT_EQ(enc.attention.size(), 2u);
}

TEST(ImageEncoder, ShapesAndDeterminism) {
    const auto w = init_encoders(EncoderConfig{});
    Rng rng(4);
    const Tensor patches = Tensor::from_vector({16, 24}, normal_vector(rng, 16 * 24, 1.0));
    const Tensor prompts = Tensor::from_vector({3, 24}, normal_vector(rng, 3 * 24, 1.0));
    const auto a = encode_image(prompts, patches, w), b = encode_image(prompts, patches, w);
    EXPECT_EQ(a.features.shape(), (Shape{16}));
    EXPECT_EQ(a.attention.prompt_keys.shape(), (Shape{3, 24}));
    EXPECT_EQ(vec(a.features), vec(b.features));
    EXPECT_EQ(vec(a.attention.prompt_keys), vec(b.attention.prompt_keys));
    EXPECT_EQ(vec(a.attention.query_cls), vec(b.attention.query_cls));
}

TEST(ImageEncoder, PermutingPromptsPermutesKeys) {
    EncoderConfig c;
    c.seed = 3;
    const auto w = init_encoders(c);
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor patches = Tensor::from_vector({16, 24}, normal_vector(rng, 16 * 24, 1.0));
        auto pv = normal_vector(rng, 3 * 24, 1.0);
        const Tensor prompts = Tensor::from_vector({3, 24}, pv);
        std::swap_ranges(pv.begin(), pv.begin() + 24, pv.begin() + 48);  // swap prompts 0 and 2
        const Tensor swapped = Tensor::from_vector({3, 24}, pv);
        const auto a = encode_image(prompts, patches, w), b = encode_image(swapped, patches, w);
        const Matrix ka = mat(a.attention.prompt_keys), kb = mat(b.attention.prompt_keys);
        const std::size_t perm[] = {2, 1, 0};
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 24; ++j) EXPECT_NEAR(ka[i][j], kb[perm[i]][j], 1e-12);
        for (std::size_t j = 0; j < 24; ++j)
            EXPECT_NEAR(a.attention.query_cls[j], b.attention.query_cls[j], 1e-12);
        for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(a.features[j], b.features[j], 1e-12);
    }
}

TEST(ImageEncoder, TooManyPromptsThrows) {
    const auto w = init_encoders(EncoderConfig{});
    EXPECT_THROW(encode_image(Tensor::zeros({9, 24}), Tensor::zeros({16, 24}), w), DimensionError);
    EXPECT_THROW(encode_image(Tensor(), Tensor::zeros({15, 24}), w), DimensionError);
}

TEST(EncoderWeights, FileRoundTrip) {
    EncoderConfig c;
    c.seed = 77;
    const auto w = init_encoders(c);
    const auto path = std::filesystem::temp_directory_path() / "fedprompt_encoder_roundtrip.bin";
    save_encoder_weights(path, w);
    const auto r = load_encoder_weights(path);
    EXPECT_EQ(r.config, w.config);
    EXPECT_EQ(r.content_hash(), w.content_hash());
    std::filesystem::remove(path);
}
