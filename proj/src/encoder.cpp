#include "fedprompt/encoder.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "fedprompt/binary_io.hpp"
#include "fedprompt/errors.hpp"
#include "fedprompt/random.hpp"

namespace fedprompt {

namespace {

constexpr double kTokenStd = 1.0;
constexpr double kPositionalStd = 0.1;

Tensor random_tensor(Rng& rng, Shape shape, double stddev) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return Tensor::from_vector(std::move(shape), normal_vector(rng, n, stddev));
}

Tensor linear_weight(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    return random_tensor(rng, {fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

TransformerBlock make_block(Rng& rng, std::size_t width, std::size_t mlp_ratio) {
    const std::size_t hidden = width * mlp_ratio;
    TransformerBlock b;
    b.ln1_gamma = Tensor::full({width}, 1.0);
    b.ln1_beta = Tensor::zeros({width});
    b.qkv_weight = linear_weight(rng, width, 3 * width);
    b.qkv_bias = Tensor::zeros({3 * width});
    b.out_weight = linear_weight(rng, width, width);
    b.out_bias = Tensor::zeros({width});
    b.ln2_gamma = Tensor::full({width}, 1.0);
    b.ln2_beta = Tensor::zeros({width});
    b.fc1_weight = linear_weight(rng, width, hidden);
    b.fc1_bias = Tensor::zeros({hidden});
    b.fc2_weight = linear_weight(rng, hidden, width);
    b.fc2_bias = Tensor::zeros({width});
    return b;
}

void append_block(std::vector<Tensor>& out, const TransformerBlock& b) {
    for (const Tensor* t : {&b.ln1_gamma, &b.ln1_beta, &b.qkv_weight, &b.qkv_bias, &b.out_weight, &b.out_bias,
                            &b.ln2_gamma, &b.ln2_beta, &b.fc1_weight, &b.fc1_bias, &b.fc2_weight, &b.fc2_bias}) {
        out.push_back(*t);
    }
}

struct AttentionCapture {
    Tensor scaled_query;  // L x w
    Tensor keys;          // L x w
};

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

Tensor block_forward(const TransformerBlock& b, const Tensor& x, std::size_t heads, const AttentionMask* mask,
                     AttentionCapture* capture) {
    const std::size_t width = x.cols();
    const std::size_t head_dim = width / heads;

    const Tensor h = layer_norm(x, b.ln1_gamma, b.ln1_beta);
    const Tensor qkv = linear(h, b.qkv_weight, b.qkv_bias);
    const Tensor q = scale(slice_cols(qkv, 0, width), 1.0 / std::sqrt(static_cast<double>(head_dim)));
    const Tensor k = slice_cols(qkv, width, width);
    const Tensor v = slice_cols(qkv, 2 * width, width);
    if (capture) {
        capture->scaled_query = q;
        capture->keys = k;
    }

    Tensor attended;
    if (heads == 1) {
        attended = matmul(masked_softmax_rows(matmul(q, transpose(k)), mask), v);
    } else {
        std::vector<Tensor> per_head;
        per_head.reserve(heads);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            const std::size_t c0 = hd * head_dim;
            const Tensor scores = matmul(slice_cols(q, c0, head_dim), transpose(slice_cols(k, c0, head_dim)));
            per_head.push_back(matmul(masked_softmax_rows(scores, mask), slice_cols(v, c0, head_dim)));
        }
        attended = concat_cols(per_head);
    }
    const Tensor x1 = add(x, linear(attended, b.out_weight, b.out_bias));

    const Tensor h2 = layer_norm(x1, b.ln2_gamma, b.ln2_beta);
    const Tensor mlp = linear(gelu(linear(h2, b.fc1_weight, b.fc1_bias)), b.fc2_weight, b.fc2_bias);
    return add(x1, mlp);
}

void check_width(const Tensor& t, std::size_t width, const char* what) {
    if (!t.defined() || t.dim() != 2 || t.cols() != width) {
        throw DimensionError(std::string(what) + ": expected rows of width " + std::to_string(width));
    }
}

Tensor text_positions(const EncoderWeights& w, std::span<const std::size_t> positions) {
    return gather_rows(w.text.positional, positions);
}

// Projects the final-normalized rows [first, first + count) of the text stream into R^d.
Tensor text_head(const EncoderWeights& w, const Tensor& x, std::size_t first, std::size_t count) {
    const Tensor rows = slice_rows(x, first, count);
    return matmul(layer_norm(rows, w.text.ln_final_gamma, w.text.ln_final_beta), w.text.projection);
}

}  // namespace

void EncoderConfig::validate() const {
    const std::pair<const char*, std::size_t> extents[] = {
        {"text_width", text_width},   {"vision_width", vision_width},     {"embed_dim", embed_dim},
        {"layers", layers},           {"heads", heads},                   {"patch_count", patch_count},
        {"vocab_size", vocab_size},   {"context_length", context_length}, {"max_visual_prompts", max_visual_prompts},
        {"mlp_ratio", mlp_ratio},
    };
    for (const auto& [name, value] : extents) {
        if (value < 1) throw ConfigError(std::string("encoder.") + name + " must be at least 1");
    }
    if (text_width % heads != 0) throw ConfigError("encoder.text_width must be divisible by encoder.heads");
    if (vision_width % heads != 0) throw ConfigError("encoder.vision_width must be divisible by encoder.heads");
    if (context_length < 2) throw ConfigError("encoder.context_length must leave room for a prompt and a class token");
}

std::vector<Tensor> EncoderWeights::tensors() const {
    std::vector<Tensor> out{text.token_embedding, text.positional};
    for (const auto& b : text.blocks) append_block(out, b);
    out.insert(out.end(), {text.ln_final_gamma, text.ln_final_beta, text.projection});
    out.insert(out.end(), {vision.class_embedding, vision.positional, vision.ln_pre_gamma, vision.ln_pre_beta});
    for (const auto& b : vision.blocks) append_block(out, b);
    out.insert(out.end(), {vision.ln_post_gamma, vision.ln_post_beta, vision.projection});
    return out;
}

std::uint64_t EncoderWeights::content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Tensor& t : tensors()) {
        for (double v : t.data()) {
            std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xff;
                h *= 0x100000001b3ULL;
            }
        }
    }
    return h;
}

EncoderWeights init_encoders(const EncoderConfig& config) {
    config.validate();
    Rng rng(derive_seed(config.seed, "encoders"));
    EncoderWeights w;
    w.config = config;

    const std::size_t de = config.text_width, dv = config.vision_width;
    w.text.token_embedding = random_tensor(rng, {config.vocab_size, de}, kTokenStd);
    w.text.positional = random_tensor(rng, {config.context_length, de}, kPositionalStd);
    for (std::size_t l = 0; l < config.layers; ++l) w.text.blocks.push_back(make_block(rng, de, config.mlp_ratio));
    w.text.ln_final_gamma = Tensor::full({de}, 1.0);
    w.text.ln_final_beta = Tensor::zeros({de});
    w.text.projection = linear_weight(rng, de, config.embed_dim);

    w.vision.class_embedding = random_tensor(rng, {dv}, kTokenStd);
    w.vision.positional =
        random_tensor(rng, {1 + config.patch_count, dv}, kPositionalStd);
    w.vision.ln_pre_gamma = Tensor::full({dv}, 1.0);
    w.vision.ln_pre_beta = Tensor::zeros({dv});
    for (std::size_t l = 0; l < config.layers; ++l) {
        w.vision.blocks.push_back(make_block(rng, dv, config.mlp_ratio));
    }
    w.vision.ln_post_gamma = Tensor::full({dv}, 1.0);
    w.vision.ln_post_beta = Tensor::zeros({dv});
    w.vision.projection = linear_weight(rng, dv, config.embed_dim);
    return w;
}

Tensor embed_class_name(std::size_t class_id, const EncoderWeights& weights) {
    if (class_id >= weights.config.vocab_size) {
        throw IndexError("class id " + std::to_string(class_id) + " outside vocabulary of " +
                         std::to_string(weights.config.vocab_size));
    }
    const std::size_t ids[] = {class_id};
    return gather_rows(weights.text.token_embedding, ids);
}

Tensor encode_text(const Tensor& prompt, const Tensor& class_tokens, const EncoderWeights& weights) {
    const auto& cfg = weights.config;
    check_width(prompt, cfg.text_width, "encode_text prompt");
    check_width(class_tokens, cfg.text_width, "encode_text class tokens");
    const std::size_t len = prompt.rows() + class_tokens.rows();
    if (len > cfg.context_length) {
        throw DimensionError("encode_text: sequence of " + std::to_string(len) + " exceeds context length " +
                             std::to_string(cfg.context_length));
    }
    std::vector<std::size_t> pos(len);
    for (std::size_t i = 0; i < len; ++i) pos[i] = i;
    Tensor x = add(concat_rows({prompt, class_tokens}), text_positions(weights, pos));
    const AttentionMask mask = AttentionMask::causal(len);
    for (const auto& b : weights.text.blocks) x = block_forward(b, x, cfg.heads, &mask, nullptr);
    return row(text_head(weights, x, len - 1, 1), 0);
}

Tensor encode_text_classes(const Tensor& prompt, std::span<const std::size_t> class_ids,
                           const EncoderWeights& weights) {
    const auto& cfg = weights.config;
    check_width(prompt, cfg.text_width, "encode_text_classes prompt");
    if (class_ids.empty()) throw DimensionError("encode_text_classes: no classes");
    const std::size_t m = prompt.rows();
    const std::size_t n_cls = class_ids.size();
    if (m + 1 > cfg.context_length) {
        throw DimensionError("encode_text_classes: prompt of " + std::to_string(m) + " tokens exceeds context length");
    }
    for (std::size_t id : class_ids) {
        if (id >= cfg.vocab_size) throw IndexError("class id " + std::to_string(id) + " outside vocabulary");
    }

    // Prompt rows at positions 0..m-1, every class token at position m.
    std::vector<std::size_t> pos(m + n_cls);
    for (std::size_t i = 0; i < m; ++i) pos[i] = i;
    for (std::size_t c = 0; c < n_cls; ++c) pos[m + c] = m;

    const Tensor tokens = concat_rows({prompt, gather_rows(weights.text.token_embedding, class_ids)});
    Tensor x = add(tokens, text_positions(weights, pos));

    const std::size_t len = m + n_cls;
    AttentionMask mask{len, len, std::vector<std::uint8_t>(len * len, 0)};
    for (std::size_t r = 0; r < len; ++r) {
        const std::size_t visible_prefix = r < m ? r + 1 : m;
        for (std::size_t c = 0; c < visible_prefix; ++c) mask.allowed[r * len + c] = 1;
        if (r >= m) mask.allowed[r * len + r] = 1;
    }
    for (const auto& b : weights.text.blocks) x = block_forward(b, x, cfg.heads, &mask, nullptr);
    return text_head(weights, x, m, n_cls);
}

ImageEncoding encode_image(const Tensor& visual_prompts, const Tensor& patches, const EncoderWeights& weights) {
    const auto& cfg = weights.config;
    check_width(patches, cfg.vision_width, "encode_image patches");
    if (patches.rows() != cfg.patch_count) {
        throw DimensionError("encode_image: expected " + std::to_string(cfg.patch_count) + " patches, got " +
                             std::to_string(patches.rows()));
    }
    std::size_t n = 0;
    if (visual_prompts.defined()) {
        check_width(visual_prompts, cfg.vision_width, "encode_image visual prompts");
        n = visual_prompts.rows();
        if (n > cfg.max_visual_prompts) {
            throw DimensionError("encode_image: " + std::to_string(n) + " visual prompts exceed the configured " +
                                 std::to_string(cfg.max_visual_prompts));
        }
    }

    // Visual prompts enter without a positional embedding, so the encoder is
    // equivariant to their order.
    std::vector<std::size_t> pos(cfg.patch_count);
    for (std::size_t j = 0; j < cfg.patch_count; ++j) pos[j] = 1 + j;
    const Tensor cls = add(reshape(weights.vision.class_embedding, {1, cfg.vision_width}),
                           slice_rows(weights.vision.positional, 0, 1));
    const Tensor body = add(patches, gather_rows(weights.vision.positional, pos));
    Tensor x = n > 0 ? concat_rows({cls, visual_prompts, body}) : concat_rows({cls, body});
    x = layer_norm(x, weights.vision.ln_pre_gamma, weights.vision.ln_pre_beta);

    AttentionCapture capture;
    const std::size_t depth = weights.vision.blocks.size();
    for (std::size_t l = 0; l < depth; ++l) {
        x = block_forward(weights.vision.blocks[l], x, cfg.heads, nullptr, l + 1 == depth ? &capture : nullptr);
    }

    ImageEncoding result;
    const Tensor cls_out = layer_norm(row(x, 0), weights.vision.ln_post_gamma, weights.vision.ln_post_beta);
    result.features = matmul(cls_out, weights.vision.projection);
    result.attention.query_cls = row(capture.scaled_query, 0);
    if (n > 0) result.attention.prompt_keys = slice_rows(capture.keys, 1, n);
    return result;
}

void write_encoder_config(io::BinaryWriter& out, const EncoderConfig& c) {
    for (std::uint64_t v : {c.text_width, c.vision_width, c.embed_dim, c.layers, c.heads, c.patch_count, c.vocab_size,
                            c.context_length, c.max_visual_prompts, c.mlp_ratio}) {
        out.u64(v);
    }
    out.u64(c.seed);
}

EncoderConfig read_encoder_config(io::BinaryReader& in) {
    EncoderConfig c;
    for (std::size_t* field : {&c.text_width, &c.vision_width, &c.embed_dim, &c.layers, &c.heads, &c.patch_count,
                               &c.vocab_size, &c.context_length, &c.max_visual_prompts, &c.mlp_ratio}) {
        *field = static_cast<std::size_t>(in.u64());
    }
    c.seed = in.u64();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw DataError(std::string("invalid encoder header: ") + e.what());
    }
    return c;
}

void save_encoder_weights(const std::filesystem::path& path, const EncoderWeights& weights) {
    io::BinaryWriter out(path);
    out.magic(io::kEncoderMagic);
    write_encoder_config(out, weights.config);
    const auto tensors = weights.tensors();
    std::uint64_t count = 0;
    for (const Tensor& t : tensors) count += t.numel();
    out.u64(count);
    for (const Tensor& t : tensors) out.f64s(t.data());
    out.finish();
}

EncoderWeights load_encoder_weights(const std::filesystem::path& path) {
    io::BinaryReader in(path);
    in.expect_magic(io::kEncoderMagic);
    const EncoderConfig config = read_encoder_config(in);
    // Same structure as a fresh init; values are then overwritten in declaration order.
    EncoderWeights w = init_encoders(config);
    auto tensors = w.tensors();
    std::uint64_t expected = 0;
    for (const Tensor& t : tensors) expected += t.numel();
    const std::uint64_t count = in.u64();
    if (count != expected) {
        throw DataError("'" + path.string() + "' holds " + std::to_string(count) + " weights, config implies " +
                        std::to_string(expected));
    }
    for (Tensor& t : tensors) t.assign(in.f64s(t.numel()));
    in.expect_end();
    return w;
}

}  // namespace fedprompt
