#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "fedprompt/encoder.hpp"
#include "fedprompt/synth_data.hpp"
#include "fedprompt/tensor.hpp"

namespace fedprompt {

enum class VariantMode { zero_shot, single_domain, visual_only, textual_only, domain_agnostic, adapt };

VariantMode parse_variant(std::string_view name);
std::string_view to_string(VariantMode mode);
std::span<const VariantMode> all_variants();

struct VariantSpec {
    VariantMode mode = VariantMode::adapt;

    bool trains() const { return mode != VariantMode::zero_shot; }
    bool federated() const { return mode != VariantMode::zero_shot && mode != VariantMode::single_domain; }
    bool uses_visual_prompts() const {
        return mode == VariantMode::visual_only || mode == VariantMode::domain_agnostic || mode == VariantMode::adapt;
    }
    /// One text prompt per domain (owner-trained) rather than a single shared one.
    bool per_domain_text() const { return mode == VariantMode::domain_agnostic || mode == VariantMode::adapt; }
    bool learnable_text() const { return mode != VariantMode::zero_shot && mode != VariantMode::visual_only; }
    /// Attention-weighted fusion of the per-domain text features.
    bool attention_fusion() const { return mode == VariantMode::adapt; }
};

enum class LossMode { cosine, cross_entropy };

LossMode parse_loss_mode(std::string_view name);
std::string_view to_string(LossMode mode);

struct LossConfig {
    LossMode mode = LossMode::cosine;
    double lambda_dom = 1.0;
    /// Temperature of the cosine logits in cross-entropy mode.
    double tau_ce = 0.01;

    bool operator==(const LossConfig&) const = default;
};

/// Softmax distribution over domains together with the logits it came from.
struct DomainWeights {
    Tensor logits;  // n, already divided by the temperature
    Tensor values;  // n, sums to one

    std::size_t size() const { return values.numel(); }
    double operator[](std::size_t i) const { return values[i]; }
};

/// w_i = softmax_i(<q_cls, k_i> / tau_d).
DomainWeights domain_weights(const AttentionRecord& attn, double tau_d);
DomainWeights uniform_domain_weights(std::size_t n);

/// sum_i w_i feats[i] for feats of shape n x d.
Tensor fuse_text_features(const DomainWeights& w, const Tensor& feats);
/// Per-class fusion: each entry of per_domain is a C x d feature matrix; result is C x d.
Tensor fuse_class_features(const DomainWeights& w, std::span<const Tensor> per_domain);

/**
 * Object classification term plus lambda_dom times the domain correspondence
 * term CE(w, target_domain).
 *
 * Cosine mode scores -cos(f_V, fused[target_class]); cross-entropy mode applies
 * CE to cos(f_V, fused[c]) / tau_ce over all rows. An undefined `w` (variants
 * without attention fusion) drops the domain term.
 */
Tensor adapt_loss(const Tensor& image_features, const Tensor& per_class_fused, std::size_t target_class,
                  const DomainWeights* w, std::size_t target_domain, const LossConfig& cfg);

struct Prediction {
    std::size_t predicted_class = 0;
    std::vector<double> probabilities;
    std::vector<double> domain_weights;
};

/**
 * Two-step inference. Step one encodes the image with the visual prompts and
 * derives domain weights; step two fuses the per-domain class features and
 * picks the class with the highest cosine similarity. Probabilities are the
 * softmax of the similarities at temperature tau_d. With a single text prompt,
 * or without visual prompts, fusion is skipped.
 */
Prediction classify(const Tensor& patches, std::span<const Tensor> text_prompts, const Tensor& visual_prompts,
                    std::span<const std::size_t> class_ids, const EncoderWeights& encoders, double tau_d,
                    bool attention_fusion = true);

/// Per token, the index of the Euclidean-nearest row of vocab (lowest index on ties).
std::vector<std::size_t> decode_prompt_nearest_words(const Tensor& prompt, const Tensor& vocab);

/// Parameters the whole federation learns for a variant.
std::size_t trainable_parameter_count(VariantMode mode, std::size_t n_domains, std::size_t prompt_length,
                                      std::size_t text_width, std::size_t vision_width);

/// Fixed word-token prompt ("a photo of a" analog) used where no text prompt is learned.
Tensor handcrafted_prompt(const EncoderWeights& encoders, std::size_t n_classes);

struct PromptModelOptions {
    std::size_t n_domains = 3;
    std::size_t n_classes = 5;
    std::size_t prompt_length = 16;
    double tau_d = 0.1;
    LossConfig loss;
    std::uint64_t seed = 0;  ///< drives prompt initialization
};

/**
 * Learnable prompt state of one participant plus the frozen encoders it runs.
 *
 * Text prompt slots: n for per-domain variants, one otherwise (fixed and
 * handcrafted for zero_shot and visual_only). Visual prompts: n vectors for
 * variants that use them. Which slots take gradients is set by
 * set_trainable(); by default the owner text slot and every visual prompt.
 */
class PromptModel {
public:
    PromptModel(VariantSpec spec, std::shared_ptr<const EncoderWeights> encoders, PromptModelOptions options);

    /// Independent deep copy with the same trainability flags.
    PromptModel clone() const;

    const VariantSpec& variant() const noexcept { return spec_; }
    const PromptModelOptions& options() const noexcept { return opts_; }
    const EncoderWeights& encoders() const noexcept { return *encoders_; }
    std::shared_ptr<const EncoderWeights> shared_encoders() const noexcept { return encoders_; }

    std::size_t owner() const noexcept { return owner_; }
    void set_owner(std::size_t domain);

    std::vector<Tensor>& text_prompts() noexcept { return text_; }
    const std::vector<Tensor>& text_prompts() const noexcept { return text_; }
    std::vector<Tensor>& visual_prompts() noexcept { return visual_; }
    const std::vector<Tensor>& visual_prompts() const noexcept { return visual_; }
    /// Visual prompts stacked as n x d_v (undefined when the variant has none).
    Tensor stacked_visual_prompts() const;

    /// Text slot holding the locally owned prompt (0 for single-prompt variants).
    std::size_t owner_text_slot() const;

    void set_trainable(bool all_text_slots, bool owner_visual_only);
    std::vector<Tensor> trainable_parameters() const;
    std::size_t global_parameter_count() const;

    /// Loss of one sample, recorded on the active tape.
    Tensor loss(const SampleRecord& sample);

    struct Evaluation {
        std::size_t correct = 0;
        std::size_t total = 0;
        double loss_sum = 0.0;
        double true_domain_weight_sum = 0.0;

        double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
        double mean_loss() const { return total ? loss_sum / total : 0.0; }
        double mean_true_domain_weight() const { return total ? true_domain_weight_sum / total : 0.0; }
    };

    /// Accuracy, mean loss, and mean weight on the true domain, without recording.
    Evaluation evaluate(std::span<const SampleRecord> samples);
    Prediction predict(const Tensor& patches);

private:
    const Tensor& cached_class_features(std::size_t slot);
    Tensor slot_features(std::size_t slot, std::span<const std::size_t> classes);
    DomainWeights weights_for(const ImageEncoding& enc) const;

    VariantSpec spec_;
    std::shared_ptr<const EncoderWeights> encoders_;
    PromptModelOptions opts_;
    std::size_t owner_ = 0;
    std::vector<Tensor> text_;
    std::vector<Tensor> visual_;
    std::vector<std::size_t> all_classes_;

    struct CacheEntry {
        std::vector<double> key;
        Tensor features;
    };
    std::vector<CacheEntry> cache_;
};

PromptModel build_variant(VariantSpec spec, std::shared_ptr<const EncoderWeights> encoders,
                          PromptModelOptions options);

/// Prompt state written once per client per round when checkpointing is enabled.
struct PromptCheckpoint {
    EncoderConfig encoder;
    VariantMode mode = VariantMode::adapt;
    std::size_t n_domains = 0;
    std::size_t prompt_length = 0;
    std::size_t owner = 0;
    std::size_t round = 0;
    std::vector<Tensor> text;
    std::vector<Tensor> visual;
};

PromptCheckpoint make_checkpoint(const PromptModel& model, std::size_t round);
void save_prompt_checkpoint(const std::filesystem::path& path, const PromptCheckpoint& ckpt);
PromptCheckpoint load_prompt_checkpoint(const std::filesystem::path& path);

}  // namespace fedprompt
