#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "masf/data.hpp"

namespace masf {

// How one domain distorts the shared latent class structure.
struct DomainSpec {
    int id = 0;
    double rotation_deg = 0.0;       // rotation of latent dims (0, 1)
    std::vector<double> scale{1.0};  // one value, or one per feature
    std::vector<double> shift{0.0};  // one value, or one per feature
    double noise_sigma = 0.0;
    std::vector<std::size_t> permutation;  // empty = identity
    std::size_t n_samples = 500;
    std::vector<double> class_priors;      // empty = uniform
};

struct BenchmarkSpec {
    std::string name = "custom";
    std::size_t input_dim = 16;
    std::size_t num_classes = 5;
    std::uint64_t latent_seed = 0;
    double class_radius = 3.0;      // class means on a circle in latent dims (0, 1)
    double invariant_scale = 1.0;   // spread of class means in the remaining dims
    double within_sigma = 1.0;      // class-conditional latent std
    std::vector<DomainSpec> domains;

    void validate() const;
};

BenchmarkSpec load_benchmark_spec(const std::filesystem::path& path);
void save_benchmark_spec(const BenchmarkSpec& spec, const std::filesystem::path& path);

// Class-conditional Gaussian latents shared by all domains, then the domain
// transform (rotation, affine, permutation) and additive noise. A pure
// function of (bench, domain, base_seed).
DomainDataset make_domain(const BenchmarkSpec& bench, const DomainSpec& domain, std::uint64_t base_seed);
std::vector<DomainDataset> make_benchmark(const BenchmarkSpec& bench, std::uint64_t base_seed);

// Latent class means shared across domains, [C, input_dim].
Tensor latent_class_means(const BenchmarkSpec& bench);

struct LooSplit {
    std::vector<std::size_t> sources;  // indices into the domain list
    std::size_t target = 0;
};

std::vector<LooSplit> leave_one_out_splits(std::size_t num_domains);

// Without replacement. Stratified mode guarantees every class at least once.
Batch sample_batch(const DomainDataset& data, std::size_t batch_size, bool stratified,
                   std::size_t num_classes, std::mt19937_64& rng);

struct TrainTestSplit {
    DomainDataset train;
    DomainDataset test;
};

// Class-stratified; train size is round(fraction * N).
TrainTestSplit train_test_split(const DomainDataset& data, double train_fraction, std::mt19937_64& rng);

DomainDataset subset(const DomainDataset& data, std::span<const std::size_t> rows);
// Concatenate several domains (domain id of the first is kept).
DomainDataset concat(std::span<const DomainDataset> parts);

// CSV with header domain,label,f0..f{d-1}.
void write_datasets_csv(std::span<const DomainDataset> sets, const std::filesystem::path& path);
std::vector<DomainDataset> read_datasets_csv(const std::filesystem::path& path);

}  // namespace masf
