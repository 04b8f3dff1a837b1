#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "fedprompt/tensor.hpp"

namespace fedprompt {

struct DatasetSpec {
    std::size_t n_domains = 3;
    std::size_t n_classes = 5;
    std::size_t samples_per_class_per_domain = 40;
    double domain_strength = 1.5;
    double noise_sigma = 0.1;
    std::uint64_t seed = 0;
    std::size_t patch_count = 16;
    std::size_t patch_width = 24;

    void validate() const;
    bool operator==(const DatasetSpec&) const = default;
};

struct SampleRecord {
    Tensor patches;  // patch_count x patch_width
    std::size_t class_id = 0;
    std::size_t domain_id = 0;
};

struct DomainDataset {
    std::vector<SampleRecord> samples;

    std::size_t size() const noexcept { return samples.size(); }
    bool empty() const noexcept { return samples.empty(); }
    /// Indices of the samples belonging to one domain, in dataset order.
    std::vector<std::size_t> indices_of_domain(std::size_t domain) const;
    DomainDataset domain_slice(std::size_t domain) const;
};

struct DatasetSplit {
    DatasetSpec spec;
    DomainDataset train;
    DomainDataset test;
};

/// Number of training samples per (class, domain) cell under the stratified 80/20 split.
std::size_t train_count_per_cell(std::size_t samples_per_cell);

/**
 * Seeded multi-domain patch dataset.
 *
 * Every class has a prototype patch matrix and every domain a style map
 * x -> x A_d + B_d with A_d orthogonal. A sample of class c in domain d is
 * proto_c + strength * (proto_c A_d + B_d) + sigma * noise. Each
 * (class, domain) cell is split 80/20 into train and test.
 */
DatasetSplit generate_domains(const DatasetSpec& spec);

/// Keeps `shots` seeded training samples per (class, domain) cell; test set untouched.
DatasetSplit few_shot_subset(const DatasetSplit& data, std::size_t shots, std::uint64_t seed);

void save_dataset(const std::filesystem::path& path, const DatasetSplit& data);
DatasetSplit load_dataset(const std::filesystem::path& path);

}  // namespace fedprompt
