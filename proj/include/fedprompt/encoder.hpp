#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fedprompt/tensor.hpp"

namespace fedprompt {

/// Shape of the frozen text/vision encoder pair.
struct EncoderConfig {
    std::size_t text_width = 16;    ///< d_e, width of word embeddings and text prompts
    std::size_t vision_width = 24;  ///< d_v, width of patches and visual prompts
    std::size_t embed_dim = 16;     ///< d, shared latent width of both towers
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t patch_count = 16;
    std::size_t vocab_size = 64;
    std::size_t context_length = 77;
    std::size_t max_visual_prompts = 8;
    std::size_t mlp_ratio = 2;
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const EncoderConfig&) const = default;
};

struct TransformerBlock {
    Tensor ln1_gamma, ln1_beta;
    Tensor qkv_weight, qkv_bias;
    Tensor out_weight, out_bias;
    Tensor ln2_gamma, ln2_beta;
    Tensor fc1_weight, fc1_bias;
    Tensor fc2_weight, fc2_bias;
};

struct TextTower {
    Tensor token_embedding;  // vocab_size x d_e
    Tensor positional;       // context_length x d_e
    std::vector<TransformerBlock> blocks;
    Tensor ln_final_gamma, ln_final_beta;
    Tensor projection;  // d_e x d
};

struct VisionTower {
    Tensor class_embedding;  // d_v
    Tensor positional;       // (1 + patch_count) x d_v: [cls] then patches
    Tensor ln_pre_gamma, ln_pre_beta;
    std::vector<TransformerBlock> blocks;
    Tensor ln_post_gamma, ln_post_beta;
    Tensor projection;  // d_v x d
};

/// Frozen parameters of both towers. Every tensor has requires_grad = false.
struct EncoderWeights {
    EncoderConfig config;
    TextTower text;
    VisionTower vision;

    /// All tensors in declaration order (text tower first).
    std::vector<Tensor> tensors() const;
    /// FNV-1a over the IEEE bytes of every weight in declaration order.
    std::uint64_t content_hash() const;
};

EncoderWeights init_encoders(const EncoderConfig& config);

/// Word embedding of a class name (one token, row class_id of the table), shape 1 x d_e.
Tensor embed_class_name(std::size_t class_id, const EncoderWeights& weights);

/// Text feature of [prompt ; class_tokens]: final-token output projected to R^d.
Tensor encode_text(const Tensor& prompt, const Tensor& class_tokens, const EncoderWeights& weights);

/**
 * Text features of one prompt paired with several single-token class names,
 * shape C x d. The text tower is causal, so the prompt rows never see the
 * class token; all classes share one pass over the prompt and each class row
 * attends to the prompt plus itself. Row c equals
 * encode_text(prompt, embed_class_name(class_ids[c])).
 */
Tensor encode_text_classes(const Tensor& prompt, std::span<const std::size_t> class_ids,
                           const EncoderWeights& weights);

/// Class-token query and prompt keys of the last vision attention block.
///
/// The query carries the 1/sqrt(head_dim) attention scale, so <query_cls, key_i>
/// is the sum over heads of the attention logits between [cls] and prompt i.
struct AttentionRecord {
    Tensor query_cls;    // d_v
    Tensor prompt_keys;  // n x d_v, row i belongs to visual prompt i

    std::size_t size() const { return prompt_keys.defined() ? prompt_keys.rows() : 0; }
};

struct ImageEncoding {
    Tensor features;  // f_V in R^d
    AttentionRecord attention;
};

/// Runs the vision tower over [cls], visual prompts, patches (in that order).
/// visual_prompts may be undefined, in which case no prompt tokens are inserted.
ImageEncoding encode_image(const Tensor& visual_prompts, const Tensor& patches, const EncoderWeights& weights);

void save_encoder_weights(const std::filesystem::path& path, const EncoderWeights& weights);
EncoderWeights load_encoder_weights(const std::filesystem::path& path);

namespace io {
class BinaryWriter;
class BinaryReader;
}  // namespace io

void write_encoder_config(io::BinaryWriter& out, const EncoderConfig& config);
EncoderConfig read_encoder_config(io::BinaryReader& in);

}  // namespace fedprompt
