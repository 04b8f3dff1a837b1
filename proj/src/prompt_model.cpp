#include "fedprompt/prompt_model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

#include "fedprompt/binary_io.hpp"
#include "fedprompt/errors.hpp"
#include "fedprompt/random.hpp"

namespace fedprompt {

namespace {

constexpr std::array kVariants{VariantMode::zero_shot,    VariantMode::single_domain,   VariantMode::visual_only,
                               VariantMode::textual_only, VariantMode::domain_agnostic, VariantMode::adapt};
constexpr std::array<std::string_view, 6> kVariantNames{"zero_shot",    "single_domain",   "visual_only",
                                                        "textual_only", "domain_agnostic", "adapt"};

constexpr std::size_t kHandcraftedLength = 4;
constexpr double kTextPromptStd = 1.0;
constexpr double kVisualPromptStd = 1.0;
// Per-domain offset around the shared visual prompt; keeps initial domain weights near uniform.
constexpr double kVisualPromptJitter = 0.02;

Tensor stack_vectors(std::span<const Tensor> rows) {
    if (rows.empty()) return {};
    return concat_rows(rows);
}

// Cosine similarity of f against every row of feats, as a vector of length rows.
Tensor cosine_scores(const Tensor& f, const Tensor& feats) { return matmul(l2_normalize(feats), l2_normalize(f)); }

struct Scored {
    Prediction prediction;
    Tensor fused;
    DomainWeights weights;
    bool has_weights = false;
};

Scored score_image(const ImageEncoding& enc, std::span<const Tensor> per_slot, double tau_d, bool attention_fusion) {
    Scored out;
    if (per_slot.size() == 1) {
        out.fused = per_slot.front();
    } else {
        out.weights = attention_fusion ? domain_weights(enc.attention, tau_d) : uniform_domain_weights(per_slot.size());
        out.has_weights = true;
        out.fused = fuse_class_features(out.weights, per_slot);
    }
    const Tensor sims = cosine_scores(enc.features, out.fused);
    const Tensor probs = softmax_with_temperature(sims, tau_d);
    auto& p = out.prediction;
    p.probabilities.assign(probs.data().begin(), probs.data().end());
    const auto s = sims.data();
    p.predicted_class = static_cast<std::size_t>(std::distance(s.begin(), std::max_element(s.begin(), s.end())));
    if (out.has_weights) p.domain_weights.assign(out.weights.values.data().begin(), out.weights.values.data().end());
    return out;
}

}  // namespace

VariantMode parse_variant(std::string_view name) {
    for (std::size_t i = 0; i < kVariants.size(); ++i) {
        if (kVariantNames[i] == name) return kVariants[i];
    }
    throw ConfigError("unknown variant '" + std::string(name) +
                      "' (expected zero_shot, single_domain, visual_only, textual_only, domain_agnostic, adapt)");
}

std::string_view to_string(VariantMode mode) { return kVariantNames[static_cast<std::size_t>(mode)]; }

std::span<const VariantMode> all_variants() { return kVariants; }

LossMode parse_loss_mode(std::string_view name) {
    if (name == "cosine") return LossMode::cosine;
    if (name == "ce" || name == "cross_entropy") return LossMode::cross_entropy;
    throw ConfigError("unknown loss mode '" + std::string(name) + "' (expected cosine or ce)");
}

std::string_view to_string(LossMode mode) { return mode == LossMode::cosine ? "cosine" : "ce"; }

DomainWeights domain_weights(const AttentionRecord& attn, double tau_d) {
    if (attn.size() == 0) throw DimensionError("domain_weights: attention record has no prompt keys");
    if (!(tau_d > 0.0)) throw ParameterError("domain_weights: tau_d must be positive");
    const Tensor affinity = matmul(attn.prompt_keys, attn.query_cls);
    return DomainWeights{scale(affinity, 1.0 / tau_d), softmax_with_temperature(affinity, tau_d)};
}

DomainWeights uniform_domain_weights(std::size_t n) {
    if (n == 0) throw DimensionError("uniform_domain_weights: no domains");
    return DomainWeights{Tensor::zeros({n}), Tensor::full({n}, 1.0 / static_cast<double>(n))};
}

Tensor fuse_text_features(const DomainWeights& w, const Tensor& feats) {
    if (feats.dim() != 2 || feats.rows() != w.size()) {
        throw DimensionError("fuse_text_features: " + std::to_string(w.size()) + " weights for " +
                             std::to_string(feats.rows()) + " feature rows");
    }
    return matmul(w.values, feats);
}

Tensor fuse_class_features(const DomainWeights& w, std::span<const Tensor> per_domain) {
    if (per_domain.size() != w.size()) {
        throw DimensionError("fuse_class_features: " + std::to_string(w.size()) + " weights for " +
                             std::to_string(per_domain.size()) + " domains");
    }
    const Shape shape = per_domain.front().shape();
    std::vector<Tensor> flat;
    flat.reserve(per_domain.size());
    for (const Tensor& f : per_domain) {
        if (f.shape() != shape) throw DimensionError("fuse_class_features: per-domain feature shapes differ");
        flat.push_back(reshape(f, {f.numel()}));
    }
    return reshape(matmul(w.values, concat_rows(flat)), shape);
}

Tensor adapt_loss(const Tensor& image_features, const Tensor& per_class_fused, std::size_t target_class,
                  const DomainWeights* w, std::size_t target_domain, const LossConfig& cfg) {
    if (per_class_fused.dim() != 2) throw DimensionError("adapt_loss: fused features must be C x d");
    if (target_class >= per_class_fused.rows()) {
        throw IndexError("adapt_loss: target class " + std::to_string(target_class) + " outside " +
                         std::to_string(per_class_fused.rows()) + " classes");
    }
    Tensor cls;
    switch (cfg.mode) {
        case LossMode::cosine:
            cls = cosine_loss(image_features, row(per_class_fused, target_class));
            break;
        case LossMode::cross_entropy: {
            if (!(cfg.tau_ce > 0.0)) throw ParameterError("adapt_loss: tau_ce must be positive");
            const Tensor logits = scale(cosine_scores(image_features, per_class_fused), 1.0 / cfg.tau_ce);
            cls = cross_entropy_loss(reshape(logits, {per_class_fused.rows()}), target_class);
            break;
        }
        default:
            throw ConfigError("adapt_loss: unknown loss mode");
    }
    if (w == nullptr || cfg.lambda_dom == 0.0) return cls;
    if (target_domain >= w->size()) {
        throw IndexError("adapt_loss: target domain " + std::to_string(target_domain) + " outside " +
                         std::to_string(w->size()) + " domains");
    }
    return add(cls, scale(cross_entropy_loss(w->logits, target_domain), cfg.lambda_dom));
}

Prediction classify(const Tensor& patches, std::span<const Tensor> text_prompts, const Tensor& visual_prompts,
                    std::span<const std::size_t> class_ids, const EncoderWeights& encoders, double tau_d,
                    bool attention_fusion) {
    if (class_ids.empty()) throw ConfigError("classify: empty class set");
    if (text_prompts.empty()) throw ConfigError("classify: no text prompts");
    if (!(tau_d > 0.0)) throw ParameterError("classify: tau_d must be positive");
    const bool fuse = text_prompts.size() > 1 && attention_fusion;
    if (fuse && (!visual_prompts.defined() || visual_prompts.rows() != text_prompts.size())) {
        throw DimensionError("classify: attention fusion needs one visual prompt per text prompt");
    }
    NoGradScope no_grad;
    std::vector<Tensor> per_slot;
    per_slot.reserve(text_prompts.size());
    for (const Tensor& p : text_prompts) per_slot.push_back(encode_text_classes(p, class_ids, encoders));
    const ImageEncoding enc = encode_image(visual_prompts, patches, encoders);
    return score_image(enc, per_slot, tau_d, fuse).prediction;
}

std::vector<std::size_t> decode_prompt_nearest_words(const Tensor& prompt, const Tensor& vocab) {
    if (!vocab.defined() || vocab.numel() == 0) throw DataError("decode_prompt_nearest_words: empty vocabulary");
    if (prompt.cols() != vocab.cols()) {
        throw DimensionError("decode_prompt_nearest_words: token width " + std::to_string(prompt.cols()) +
                             " vs vocabulary width " + std::to_string(vocab.cols()));
    }
    const std::size_t width = vocab.cols(), words = vocab.rows();
    const auto pd = prompt.data(), vd = vocab.data();
    std::vector<std::size_t> out(prompt.rows());
    for (std::size_t t = 0; t < prompt.rows(); ++t) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < words; ++v) {
            double dist = 0.0;
            for (std::size_t j = 0; j < width; ++j) {
                const double diff = pd[t * width + j] - vd[v * width + j];
                dist += diff * diff;
            }
            if (dist < best) {
                best = dist;
                out[t] = v;
            }
        }
    }
    return out;
}

std::size_t trainable_parameter_count(VariantMode mode, std::size_t n_domains, std::size_t prompt_length,
                                      std::size_t text_width, std::size_t vision_width) {
    const std::size_t text = prompt_length * text_width;
    const std::size_t visual = n_domains * vision_width;
    switch (mode) {
        case VariantMode::zero_shot: return 0;
        case VariantMode::single_domain: return n_domains * text;
        case VariantMode::visual_only: return visual;
        case VariantMode::textual_only: return text;
        case VariantMode::domain_agnostic:
        case VariantMode::adapt: return n_domains * text + visual;
    }
    return 0;
}

Tensor handcrafted_prompt(const EncoderWeights& encoders, std::size_t n_classes) {
    const std::size_t vocab = encoders.config.vocab_size;
    const std::size_t lo = n_classes < vocab ? n_classes : 0;
    Rng rng(derive_seed(encoders.config.seed, "handcrafted"));
    std::uniform_int_distribution<std::size_t> pick(lo, vocab - 1);
    const std::size_t len = std::min(kHandcraftedLength, encoders.config.context_length - 1);
    std::vector<std::size_t> ids(len);
    for (auto& id : ids) id = pick(rng);
    return gather_rows(encoders.text.token_embedding, ids).detach();
}

// ---------------------------------------------------------------------------
// PromptModel
// ---------------------------------------------------------------------------

PromptModel::PromptModel(VariantSpec spec, std::shared_ptr<const EncoderWeights> encoders,
                         PromptModelOptions options)
    : spec_(spec), encoders_(std::move(encoders)), opts_(options) {
    if (!encoders_) throw ConfigError("prompt model needs encoder weights");
    const auto& cfg = encoders_->config;
    if (opts_.n_domains < 1) throw ConfigError("prompt model needs at least one domain");
    if (opts_.n_classes < 1) throw ConfigError("prompt model needs at least one class");
    if (opts_.n_classes > cfg.vocab_size) throw ConfigError("more classes than vocabulary entries");
    if (opts_.prompt_length < 1) throw ConfigError("model.prompt_length must be at least 1");
    if (opts_.prompt_length + 1 > cfg.context_length) throw ConfigError("model.prompt_length exceeds context length");
    if (!(opts_.tau_d > 0.0)) throw ConfigError("model.tau_d must be positive");
    if (spec_.uses_visual_prompts() && opts_.n_domains > cfg.max_visual_prompts) {
        throw ConfigError("more domains than encoder.max_visual_prompts");
    }

    for (std::size_t c = 0; c < opts_.n_classes; ++c) all_classes_.push_back(c);

    Rng rng(derive_seed(opts_.seed, "prompts"));
    const std::size_t m = opts_.prompt_length, de = cfg.text_width;
    if (spec_.learnable_text()) {
        const std::size_t slots = spec_.per_domain_text() ? opts_.n_domains : 1;
        for (std::size_t k = 0; k < slots; ++k) {
            text_.push_back(Tensor::from_vector({m, de}, normal_vector(rng, m * de, kTextPromptStd)));
        }
    } else {
        text_.push_back(handcrafted_prompt(*encoders_, opts_.n_classes));
    }
    if (spec_.uses_visual_prompts()) {
        const auto shared = normal_vector(rng, cfg.vision_width, kVisualPromptStd);
        for (std::size_t k = 0; k < opts_.n_domains; ++k) {
            auto v = normal_vector(rng, cfg.vision_width, kVisualPromptJitter);
            for (std::size_t j = 0; j < v.size(); ++j) v[j] += shared[j];
            visual_.push_back(Tensor::from_vector({cfg.vision_width}, std::move(v)));
        }
    }
    cache_.resize(text_.size());
    set_trainable(false, false);
}

PromptModel PromptModel::clone() const {
    PromptModel out(*this);
    for (auto* group : {&out.text_, &out.visual_}) {
        for (Tensor& t : *group) {
            const bool grad = t.requires_grad();
            t = t.detach();
            if (grad) t.set_requires_grad(true);
        }
    }
    out.cache_.assign(out.text_.size(), CacheEntry{});
    return out;
}

void PromptModel::set_owner(std::size_t domain) {
    if (domain >= opts_.n_domains) throw IndexError("owner domain " + std::to_string(domain) + " out of range");
    owner_ = domain;
}

std::size_t PromptModel::owner_text_slot() const { return spec_.per_domain_text() ? owner_ : 0; }

Tensor PromptModel::stacked_visual_prompts() const { return stack_vectors(visual_); }

void PromptModel::set_trainable(bool all_text_slots, bool owner_visual_only) {
    for (std::size_t k = 0; k < text_.size(); ++k) {
        const bool on = spec_.learnable_text() && (all_text_slots || k == owner_text_slot());
        if (text_[k].requires_grad() != on) text_[k].set_requires_grad(on);
    }
    for (std::size_t k = 0; k < visual_.size(); ++k) {
        const bool on = !owner_visual_only || k == owner_;
        if (visual_[k].requires_grad() != on) visual_[k].set_requires_grad(on);
    }
}

std::vector<Tensor> PromptModel::trainable_parameters() const {
    std::vector<Tensor> out;
    for (const auto* group : {&text_, &visual_}) {
        for (const Tensor& t : *group) {
            if (t.requires_grad()) out.push_back(t);
        }
    }
    return out;
}

std::size_t PromptModel::global_parameter_count() const {
    const auto& cfg = encoders_->config;
    return trainable_parameter_count(spec_.mode, opts_.n_domains, opts_.prompt_length, cfg.text_width,
                                     cfg.vision_width);
}

const Tensor& PromptModel::cached_class_features(std::size_t slot) {
    CacheEntry& entry = cache_[slot];
    const auto current = text_[slot].data();
    if (!entry.features.defined() || !std::equal(current.begin(), current.end(), entry.key.begin(), entry.key.end())) {
        NoGradScope no_grad;
        entry.key.assign(current.begin(), current.end());
        entry.features = encode_text_classes(text_[slot], all_classes_, *encoders_);
    }
    return entry.features;
}

Tensor PromptModel::slot_features(std::size_t slot, std::span<const std::size_t> classes) {
    if (text_[slot].requires_grad() && active_tape() != nullptr) {
        return encode_text_classes(text_[slot], classes, *encoders_);
    }
    const Tensor& all = cached_class_features(slot);
    if (classes.size() == all_classes_.size()) return all;
    return gather_rows(all, classes);
}

DomainWeights PromptModel::weights_for(const ImageEncoding& enc) const {
    if (spec_.attention_fusion()) return domain_weights(enc.attention, opts_.tau_d);
    return uniform_domain_weights(text_.size());
}

Tensor PromptModel::loss(const SampleRecord& sample) {
    if (sample.class_id >= opts_.n_classes) throw IndexError("sample class outside model classes");
    if (sample.domain_id >= opts_.n_domains) throw IndexError("sample domain outside model domains");
    const ImageEncoding enc = encode_image(stacked_visual_prompts(), sample.patches, *encoders_);

    const bool all = opts_.loss.mode == LossMode::cross_entropy;
    const std::size_t target_only[] = {sample.class_id};
    const std::span<const std::size_t> classes = all ? std::span<const std::size_t>(all_classes_)
                                                     : std::span<const std::size_t>(target_only);
    const std::size_t target = all ? sample.class_id : 0;

    std::vector<Tensor> feats;
    feats.reserve(text_.size());
    for (std::size_t k = 0; k < text_.size(); ++k) feats.push_back(slot_features(k, classes));

    if (text_.size() == 1) return adapt_loss(enc.features, feats.front(), target, nullptr, 0, opts_.loss);
    const DomainWeights w = weights_for(enc);
    const Tensor fused = fuse_class_features(w, feats);
    return adapt_loss(enc.features, fused, target, spec_.attention_fusion() ? &w : nullptr, sample.domain_id,
                      opts_.loss);
}

Prediction PromptModel::predict(const Tensor& patches) {
    NoGradScope no_grad;
    std::vector<Tensor> per_slot;
    for (std::size_t k = 0; k < text_.size(); ++k) per_slot.push_back(cached_class_features(k));
    const ImageEncoding enc = encode_image(stacked_visual_prompts(), patches, *encoders_);
    return score_image(enc, per_slot, opts_.tau_d, spec_.attention_fusion()).prediction;
}

PromptModel::Evaluation PromptModel::evaluate(std::span<const SampleRecord> samples) {
    NoGradScope no_grad;
    std::vector<Tensor> per_slot;
    for (std::size_t k = 0; k < text_.size(); ++k) per_slot.push_back(cached_class_features(k));
    const Tensor visual = stacked_visual_prompts();
    const double prior = 1.0 / static_cast<double>(opts_.n_domains);

    Evaluation ev;
    for (const SampleRecord& s : samples) {
        const ImageEncoding enc = encode_image(visual, s.patches, *encoders_);
        const Scored scored = score_image(enc, per_slot, opts_.tau_d, spec_.attention_fusion());
        const bool attn = scored.has_weights && spec_.attention_fusion();
        const Tensor l = adapt_loss(enc.features, scored.fused, s.class_id, attn ? &scored.weights : nullptr,
                                    s.domain_id, opts_.loss);
        ++ev.total;
        if (scored.prediction.predicted_class == s.class_id) ++ev.correct;
        ev.loss_sum += l.item();
        ev.true_domain_weight_sum += attn ? scored.weights[s.domain_id] : prior;
    }
    return ev;
}

PromptModel build_variant(VariantSpec spec, std::shared_ptr<const EncoderWeights> encoders,
                          PromptModelOptions options) {
    return PromptModel(spec, std::move(encoders), options);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

PromptCheckpoint make_checkpoint(const PromptModel& model, std::size_t round) {
    PromptCheckpoint c;
    c.encoder = model.encoders().config;
    c.mode = model.variant().mode;
    c.n_domains = model.options().n_domains;
    c.prompt_length = model.options().prompt_length;
    c.owner = model.owner();
    c.round = round;
    for (const Tensor& t : model.text_prompts()) c.text.push_back(t.detach());
    for (const Tensor& t : model.visual_prompts()) c.visual.push_back(t.detach());
    return c;
}

void save_prompt_checkpoint(const std::filesystem::path& path, const PromptCheckpoint& c) {
    io::BinaryWriter out(path);
    out.magic(io::kPromptMagic);
    write_encoder_config(out, c.encoder);
    out.u64(static_cast<std::uint64_t>(c.mode));
    out.u64(c.n_domains);
    out.u64(c.prompt_length);
    out.u64(c.owner);
    out.u64(c.round);
    out.u64(c.text.size());
    out.u64(c.text.empty() ? 0 : c.text.front().rows());
    out.u64(c.visual.size());
    std::uint64_t count = 0;
    for (const auto* group : {&c.text, &c.visual})
        for (const Tensor& t : *group) count += t.numel();
    out.u64(count);
    for (const auto* group : {&c.text, &c.visual})
        for (const Tensor& t : *group) out.f64s(t.data());
    out.finish();
}

PromptCheckpoint load_prompt_checkpoint(const std::filesystem::path& path) {
    io::BinaryReader in(path);
    in.expect_magic(io::kPromptMagic);
    PromptCheckpoint c;
    c.encoder = read_encoder_config(in);
    const std::uint64_t mode = in.u64();
    if (mode >= kVariants.size()) throw DataError("'" + path.string() + "' has an unknown variant code");
    c.mode = kVariants[mode];
    c.n_domains = in.u64();
    c.prompt_length = in.u64();
    c.owner = in.u64();
    c.round = in.u64();
    const std::size_t text_slots = in.u64();
    const std::size_t text_rows = in.u64();
    const std::size_t visual_slots = in.u64();
    const std::size_t de = c.encoder.text_width, dv = c.encoder.vision_width;
    const std::uint64_t count = in.u64();
    if (count != text_slots * text_rows * de + visual_slots * dv) {
        throw DataError("'" + path.string() + "' float count does not match its header");
    }
    for (std::size_t k = 0; k < text_slots; ++k) {
        c.text.push_back(Tensor::from_vector({text_rows, de}, in.f64s(text_rows * de)));
    }
    for (std::size_t k = 0; k < visual_slots; ++k) c.visual.push_back(Tensor::from_vector({dv}, in.f64s(dv)));
    in.expect_end();
    return c;
}

}  // namespace fedprompt
