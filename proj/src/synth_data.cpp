#include "fedprompt/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>

#include "fedprompt/binary_io.hpp"
#include "fedprompt/errors.hpp"
#include "fedprompt/random.hpp"

namespace fedprompt {

namespace {

// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix (rows orthonormal).
std::vector<double> random_orthogonal(Rng& rng, std::size_t n) {
    std::vector<double> q = normal_vector(rng, n * n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        double* qi = q.data() + i * n;
        for (std::size_t j = 0; j < i; ++j) {
            const double* qj = q.data() + j * n;
            double proj = 0.0;
            for (std::size_t k = 0; k < n; ++k) proj += qi[k] * qj[k];
            for (std::size_t k = 0; k < n; ++k) qi[k] -= proj * qj[k];
        }
        double norm = 0.0;
        for (std::size_t k = 0; k < n; ++k) norm += qi[k] * qi[k];
        norm = std::sqrt(norm);
        for (std::size_t k = 0; k < n; ++k) qi[k] /= norm;
    }
    return q;
}

}  // namespace

void DatasetSpec::validate() const {
    if (n_domains < 1) throw ConfigError("dataset.n_domains must be at least 1");
    if (n_classes < 1) throw ConfigError("dataset.n_classes must be at least 1");
    if (samples_per_class_per_domain < 1) throw ConfigError("dataset.samples_per_class_per_domain must be at least 1");
    if (patch_count < 1 || patch_width < 1) throw ConfigError("dataset patch extents must be at least 1");
    if (!(domain_strength >= 0.0)) throw ConfigError("dataset.domain_strength must be non-negative");
    if (!(noise_sigma >= 0.0)) throw ConfigError("dataset.noise_sigma must be non-negative");
}

std::vector<std::size_t> DomainDataset::indices_of_domain(std::size_t domain) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].domain_id == domain) out.push_back(i);
    }
    return out;
}

DomainDataset DomainDataset::domain_slice(std::size_t domain) const {
    DomainDataset out;
    for (const auto& s : samples) {
        if (s.domain_id == domain) out.samples.push_back(s);
    }
    return out;
}

std::size_t train_count_per_cell(std::size_t samples_per_cell) {
    return std::max<std::size_t>(1, samples_per_cell * 4 / 5);
}

DatasetSplit generate_domains(const DatasetSpec& spec) {
    spec.validate();
    Rng rng(derive_seed(spec.seed, "dataset"));
    const std::size_t p = spec.patch_count, w = spec.patch_width, cell = p * w;

    std::vector<std::vector<double>> prototypes;
    for (std::size_t c = 0; c < spec.n_classes; ++c) prototypes.push_back(normal_vector(rng, cell, 1.0));

    struct Style {
        std::vector<double> rotation;  // w x w
        std::vector<double> bias;      // p x w
    };
    std::vector<Style> styles;
    for (std::size_t d = 0; d < spec.n_domains; ++d) {
        Style s;
        s.rotation = random_orthogonal(rng, w);
        s.bias = normal_vector(rng, cell, 1.0);
        styles.push_back(std::move(s));
    }

    DatasetSplit out;
    out.spec = spec;
    const std::size_t n_train = train_count_per_cell(spec.samples_per_class_per_domain);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t d = 0; d < spec.n_domains; ++d) {
        const Style& st = styles[d];
        for (std::size_t c = 0; c < spec.n_classes; ++c) {
            const auto& proto = prototypes[c];
            std::vector<double> clean(cell);
            for (std::size_t r = 0; r < p; ++r) {
                for (std::size_t j = 0; j < w; ++j) {
                    double styled = st.bias[r * w + j];
                    for (std::size_t k = 0; k < w; ++k) styled += proto[r * w + k] * st.rotation[k * w + j];
                    clean[r * w + j] = proto[r * w + j] + spec.domain_strength * styled;
                }
            }
            for (std::size_t i = 0; i < spec.samples_per_class_per_domain; ++i) {
                std::vector<double> x(clean);
                for (double& v : x) v += spec.noise_sigma * noise(rng);
                SampleRecord rec{Tensor::from_vector({p, w}, std::move(x)), c, d};
                (i < n_train ? out.train : out.test).samples.push_back(std::move(rec));
            }
        }
    }
    return out;
}

DatasetSplit few_shot_subset(const DatasetSplit& data, std::size_t shots, std::uint64_t seed) {
    if (shots == 0) throw DataError("few_shot_subset: shots must be at least 1");
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> cells;
    for (std::size_t i = 0; i < data.train.size(); ++i) {
        const auto& s = data.train.samples[i];
        cells[{s.domain_id, s.class_id}].push_back(i);
    }
    Rng rng(derive_seed(seed, "few_shot"));
    std::vector<std::size_t> keep;
    for (auto& [key, idx] : cells) {
        if (shots > idx.size()) {
            throw DataError("few_shot_subset: " + std::to_string(shots) + " shots requested but cell (domain " +
                            std::to_string(key.first) + ", class " + std::to_string(key.second) + ") holds " +
                            std::to_string(idx.size()));
        }
        std::shuffle(idx.begin(), idx.end(), rng);
        keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(shots));
    }
    std::sort(keep.begin(), keep.end());
    DatasetSplit out;
    out.spec = data.spec;
    out.test = data.test;
    for (std::size_t i : keep) out.train.samples.push_back(data.train.samples[i]);
    return out;
}

void save_dataset(const std::filesystem::path& path, const DatasetSplit& data) {
    io::BinaryWriter out(path);
    out.magic(io::kDatasetMagic);
    const auto& s = data.spec;
    out.u64(s.n_domains);
    out.u64(s.n_classes);
    out.u64(s.samples_per_class_per_domain);
    out.f64(s.domain_strength);
    out.f64(s.noise_sigma);
    out.u64(s.seed);
    out.u64(s.patch_count);
    out.u64(s.patch_width);
    out.u64(data.train.size());
    out.u64(data.test.size());
    for (const auto* part : {&data.train, &data.test}) {
        for (const auto& rec : part->samples) {
            out.u64(rec.class_id);
            out.u64(rec.domain_id);
            out.f64s(rec.patches.data());
        }
    }
    out.finish();
}

DatasetSplit load_dataset(const std::filesystem::path& path) {
    io::BinaryReader in(path);
    in.expect_magic(io::kDatasetMagic);
    DatasetSplit data;
    auto& s = data.spec;
    s.n_domains = in.u64();
    s.n_classes = in.u64();
    s.samples_per_class_per_domain = in.u64();
    s.domain_strength = in.f64();
    s.noise_sigma = in.f64();
    s.seed = in.u64();
    s.patch_count = in.u64();
    s.patch_width = in.u64();
    try {
        s.validate();
    } catch (const ConfigError& e) {
        throw DataError(std::string("invalid dataset header: ") + e.what());
    }
    const std::size_t n_train = in.u64(), n_test = in.u64();
    for (auto [part, count] : {std::pair{&data.train, n_train}, std::pair{&data.test, n_test}}) {
        for (std::size_t i = 0; i < count; ++i) {
            SampleRecord rec;
            rec.class_id = in.u64();
            rec.domain_id = in.u64();
            if (rec.class_id >= s.n_classes || rec.domain_id >= s.n_domains) {
                throw DataError("'" + path.string() + "' has a record with ids outside the header ranges");
            }
            rec.patches = Tensor::from_vector({s.patch_count, s.patch_width}, in.f64s(s.patch_count * s.patch_width));
            part->samples.push_back(std::move(rec));
        }
    }
    in.expect_end();
    return data;
}

}  // namespace fedprompt
