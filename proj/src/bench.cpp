#include "masf/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace masf {

using nlohmann::json;

void BenchmarkSpec::validate() const {
    if (input_dim < 2) throw ConfigError("benchmark input_dim must be >= 2");
    if (num_classes < 2) throw ConfigError("benchmark needs at least two classes");
    if (within_sigma < 0.0) throw ConfigError("within_sigma must be >= 0");
    for (const auto& d : domains) {
        auto check_vec = [&](const std::vector<double>& v, const char* what) {
            if (v.size() != 1 && v.size() != input_dim) {
                throw ConfigError(std::string("domain ") + std::to_string(d.id) + ": " + what +
                                  " needs 1 or input_dim values");
            }
        };
        check_vec(d.scale, "scale");
        check_vec(d.shift, "shift");
        for (double s : d.scale)
            if (s == 0.0) throw ConfigError("domain scale must be non-zero (invertible transform)");
        if (!d.permutation.empty()) {
            std::vector<std::size_t> sorted = d.permutation;
            std::sort(sorted.begin(), sorted.end());
            for (std::size_t i = 0; i < sorted.size(); ++i)
                if (sorted[i] != i || sorted.size() != input_dim)
                    throw ConfigError("domain permutation must be a permutation of the features");
        }
        if (d.noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
        if (d.n_samples < 2 * num_classes) throw ConfigError("domain needs at least 2*C samples");
        if (!d.class_priors.empty()) {
            if (d.class_priors.size() != num_classes) throw ConfigError("class_priors needs C entries");
            double s = 0.0;
            for (double p : d.class_priors) {
                if (!(p > 0.0)) throw ConfigError("class priors must be positive");
                s += p;
            }
            if (std::abs(s - 1.0) > 1e-9) throw ConfigError("class priors must sum to 1");
        }
    }
    for (std::size_t i = 0; i < domains.size(); ++i)
        for (std::size_t j = i + 1; j < domains.size(); ++j)
            if (domains[i].id == domains[j].id) throw ConfigError("duplicate domain id");
}

namespace {

std::vector<double> scalar_or_vector(const json& j) {
    if (j.is_number()) return {j.get<double>()};
    return j.get<std::vector<double>>();
}

json to_json(const DomainSpec& d) {
    json j;
    j["id"] = d.id;
    j["rotation_deg"] = d.rotation_deg;
    j["scale"] = d.scale.size() == 1 ? json(d.scale[0]) : json(d.scale);
    j["shift"] = d.shift.size() == 1 ? json(d.shift[0]) : json(d.shift);
    j["noise_sigma"] = d.noise_sigma;
    j["permutation"] = d.permutation;
    j["n_samples"] = d.n_samples;
    j["class_priors"] = d.class_priors;
    return j;
}

std::vector<std::size_t> class_counts(const DomainSpec& d, std::size_t classes) {
    std::vector<double> priors = d.class_priors;
    if (priors.empty()) priors.assign(classes, 1.0 / static_cast<double>(classes));
    // Largest-remainder apportionment; ties go to the lower class.
    std::vector<std::size_t> counts(classes);
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        const double exact = priors[c] * static_cast<double>(d.n_samples);
        counts[c] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[c];
        rem.emplace_back(-(exact - std::floor(exact)), c);
    }
    std::sort(rem.begin(), rem.end());
    for (std::size_t i = 0; assigned < d.n_samples; ++i, ++assigned) ++counts[rem[i % classes].second];
    for (auto n : counts)
        if (n == 0) throw ConfigError("class prior too small: a class would have no samples");
    return counts;
}

}  // namespace

BenchmarkSpec load_benchmark_spec(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open benchmark spec " + path.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    BenchmarkSpec b;
    try {
        b.name = j.value("name", b.name);
        b.input_dim = j.value("input_dim", b.input_dim);
        b.num_classes = j.value("num_classes", b.num_classes);
        b.latent_seed = j.value("latent_seed", b.latent_seed);
        b.class_radius = j.value("class_radius", b.class_radius);
        b.invariant_scale = j.value("invariant_scale", b.invariant_scale);
        b.within_sigma = j.value("within_sigma", b.within_sigma);
        for (const auto& jd : j.at("domains")) {
            DomainSpec d;
            d.id = jd.at("id").get<int>();
            d.rotation_deg = jd.value("rotation_deg", 0.0);
            if (jd.contains("scale")) d.scale = scalar_or_vector(jd["scale"]);
            if (jd.contains("shift")) d.shift = scalar_or_vector(jd["shift"]);
            d.noise_sigma = jd.value("noise_sigma", 0.0);
            d.permutation = jd.value("permutation", std::vector<std::size_t>{});
            d.n_samples = jd.value("n_samples", d.n_samples);
            d.class_priors = jd.value("class_priors", std::vector<double>{});
            b.domains.push_back(std::move(d));
        }
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    b.validate();
    return b;
}

void save_benchmark_spec(const BenchmarkSpec& spec, const std::filesystem::path& path) {
    json j;
    j["name"] = spec.name;
    j["input_dim"] = spec.input_dim;
    j["num_classes"] = spec.num_classes;
    j["latent_seed"] = spec.latent_seed;
    j["class_radius"] = spec.class_radius;
    j["invariant_scale"] = spec.invariant_scale;
    j["within_sigma"] = spec.within_sigma;
    j["domains"] = json::array();
    for (const auto& d : spec.domains) j["domains"].push_back(to_json(d));
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

Tensor latent_class_means(const BenchmarkSpec& bench) {
    const std::size_t C = bench.num_classes, D = bench.input_dim;
    Tensor mu(Shape{C, D});
    std::mt19937_64 rng(bench.latent_seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t c = 0; c < C; ++c) {
        const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(C);
        mu.data[c * D + 0] = bench.class_radius * std::cos(angle);
        mu.data[c * D + 1] = bench.class_radius * std::sin(angle);
        for (std::size_t k = 2; k < D; ++k) mu.data[c * D + k] = bench.invariant_scale * normal(rng);
    }
    return mu;
}

DomainDataset make_domain(const BenchmarkSpec& bench, const DomainSpec& domain, std::uint64_t base_seed) {
    const std::size_t C = bench.num_classes, D = bench.input_dim;
    const Tensor mu = latent_class_means(bench);
    const auto counts = class_counts(domain, C);

    Labels labels;
    for (std::size_t c = 0; c < C; ++c) labels.insert(labels.end(), counts[c], c);
    std::seed_seq seq{static_cast<std::uint32_t>(base_seed), static_cast<std::uint32_t>(base_seed >> 32),
                      static_cast<std::uint32_t>(domain.id), 0x6d617366u};
    std::mt19937_64 rng(seq);
    std::shuffle(labels.begin(), labels.end(), rng);

    const double th = domain.rotation_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    auto per_feature = [](const std::vector<double>& v, std::size_t k) { return v.size() == 1 ? v[0] : v[k]; };

    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor x(Shape{labels.size(), D});
    std::vector<double> u(D), t(D);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t k = 0; k < D; ++k) u[k] = mu.data[labels[i] * D + k] + bench.within_sigma * normal(rng);
        const double a = u[0], b = u[1];
        u[0] = cs * a - sn * b;
        u[1] = sn * a + cs * b;
        for (std::size_t k = 0; k < D; ++k) t[k] = per_feature(domain.scale, k) * u[k] + per_feature(domain.shift, k);
        for (std::size_t k = 0; k < D; ++k) {
            const double v = domain.permutation.empty() ? t[k] : t[domain.permutation[k]];
            x.data[i * D + k] = v + domain.noise_sigma * normal(rng);
        }
    }
    return DomainDataset{domain.id, std::move(x), std::move(labels)};
}

std::vector<DomainDataset> make_benchmark(const BenchmarkSpec& bench, std::uint64_t base_seed) {
    bench.validate();
    std::vector<DomainDataset> out;
    for (const auto& d : bench.domains) out.push_back(make_domain(bench, d, base_seed));
    return out;
}

std::vector<LooSplit> leave_one_out_splits(std::size_t num_domains) {
    if (num_domains < 2) throw ConfigError("leave-one-domain-out needs at least two domains");
    std::vector<LooSplit> out;
    for (std::size_t t = 0; t < num_domains; ++t) {
        LooSplit s;
        s.target = t;
        for (std::size_t k = 0; k < num_domains; ++k)
            if (k != t) s.sources.push_back(k);
        out.push_back(std::move(s));
    }
    return out;
}

DomainDataset subset(const DomainDataset& data, std::span<const std::size_t> rows) {
    const std::size_t D = data.input_dim();
    DomainDataset out;
    out.domain_id = data.domain_id;
    out.features = Tensor(Shape{rows.size(), D});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy_n(data.features.data.data() + rows[r] * D, D, out.features.data.data() + r * D);
        out.labels.push_back(data.labels[rows[r]]);
    }
    return out;
}

DomainDataset concat(std::span<const DomainDataset> parts) {
    if (parts.empty()) throw std::invalid_argument("concat of nothing");
    const std::size_t D = parts[0].input_dim();
    DomainDataset out;
    out.domain_id = parts[0].domain_id;
    std::size_t n = 0;
    for (const auto& p : parts) n += p.size();
    out.features = Tensor(Shape{n, D});
    std::size_t r = 0;
    for (const auto& p : parts) {
        if (p.input_dim() != D) throw ShapeError("concat: feature dims differ");
        std::copy(p.features.data.begin(), p.features.data.end(), out.features.data.begin() + r * D);
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
        r += p.size();
    }
    return out;
}

Batch sample_batch(const DomainDataset& data, std::size_t batch_size, bool stratified,
                   std::size_t num_classes, std::mt19937_64& rng) {
    const std::size_t n = data.size();
    if (batch_size > n || batch_size == 0) throw ConfigError("batch size must be in [1, N]");
    std::vector<std::size_t> chosen;
    chosen.reserve(batch_size);
    if (stratified) {
        if (batch_size < num_classes) throw ConfigError("stratified batch smaller than class count");
        std::vector<std::vector<std::size_t>> by_class(num_classes);
        for (std::size_t i = 0; i < n; ++i) by_class.at(data.labels[i]).push_back(i);
        std::vector<bool> used(n, false);
        for (const auto& members : by_class) {
            if (members.empty()) throw ConfigError("stratified batch: class missing from dataset");
            std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
            const std::size_t i = members[pick(rng)];
            chosen.push_back(i);
            used[i] = true;
        }
        std::vector<std::size_t> rest;
        for (std::size_t i = 0; i < n; ++i)
            if (!used[i]) rest.push_back(i);
        std::shuffle(rest.begin(), rest.end(), rng);
        chosen.insert(chosen.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(batch_size - chosen.size()));
        std::shuffle(chosen.begin(), chosen.end(), rng);
    } else {
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), std::size_t{0});
        std::shuffle(all.begin(), all.end(), rng);
        chosen.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(batch_size));
    }
    DomainDataset s = subset(data, chosen);
    return Batch{data.domain_id, std::move(s.features), std::move(s.labels)};
}

TrainTestSplit train_test_split(const DomainDataset& data, double train_fraction, std::mt19937_64& rng) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must be in (0, 1)");
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);

    const auto total = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(data.size())));
    std::vector<std::size_t> take;
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t assigned = 0;
    std::size_t k = 0;
    for (auto& [c, members] : by_class) {
        const double exact = train_fraction * static_cast<double>(members.size());
        take.push_back(static_cast<std::size_t>(std::floor(exact)));
        assigned += take.back();
        rem.emplace_back(-(exact - std::floor(exact)), k++);
    }
    std::sort(rem.begin(), rem.end());
    for (std::size_t i = 0; assigned < total && i < rem.size(); ++i, ++assigned) ++take[rem[i].second];

    std::vector<std::size_t> train_rows, test_rows;
    k = 0;
    for (auto& [c, members] : by_class) {
        std::vector<std::size_t> m = members;
        std::shuffle(m.begin(), m.end(), rng);
        train_rows.insert(train_rows.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(take[k]));
        test_rows.insert(test_rows.end(), m.begin() + static_cast<std::ptrdiff_t>(take[k]), m.end());
        ++k;
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(test_rows.begin(), test_rows.end());
    return {subset(data, train_rows), subset(data, test_rows)};
}

void write_datasets_csv(std::span<const DomainDataset> sets, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    const std::size_t D = sets.empty() ? 0 : sets[0].input_dim();
    os << "domain,label";
    for (std::size_t k = 0; k < D; ++k) os << ",f" << k;
    os << '\n';
    char buf[32];
    for (const auto& s : sets) {
        if (s.input_dim() != D) throw ShapeError("datasets differ in feature dimension");
        for (std::size_t i = 0; i < s.size(); ++i) {
            os << s.domain_id << ',' << s.labels[i];
            for (std::size_t k = 0; k < D; ++k) {
                std::snprintf(buf, sizeof(buf), "%.17g", s.features.data[i * D + k]);
                os << ',' << buf;
            }
            os << '\n';
        }
    }
    if (!os) throw IoError("write failed for " + path.string());
}

std::vector<DomainDataset> read_datasets_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(is, line) || line.rfind("domain,label", 0) != 0) {
        throw IoError(path.string() + ": missing domain,label header");
    }
    const auto D = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',') - 1);
    std::vector<int> order;
    std::map<int, std::pair<std::vector<double>, Labels>> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != D + 2) throw IoError(path.string() + ":" + std::to_string(lineno) + ": wrong column count");
        try {
            const int dom = std::stoi(cells[0]);
            if (!rows.contains(dom)) order.push_back(dom);
            auto& [feat, labels] = rows[dom];
            labels.push_back(static_cast<std::size_t>(std::stoul(cells[1])));
            for (std::size_t k = 0; k < D; ++k) feat.push_back(std::stod(cells[k + 2]));
        } catch (const std::logic_error&) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": bad number");
        }
    }
    std::vector<DomainDataset> out;
    for (int dom : order) {
        auto& [feat, labels] = rows[dom];
        const std::size_t n = labels.size();
        out.push_back(DomainDataset{dom, Tensor(Shape{n, D}, std::move(feat)), std::move(labels)});
    }
    return out;
}

}  // namespace masf
