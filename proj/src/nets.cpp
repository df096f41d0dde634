#include "masf/nets.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace masf {

std::string_view role_name(NetRole role) {
    switch (role) {
    case NetRole::FeatureExtractor: return "psi";
    case NetRole::TaskNet: return "theta";
    case NetRole::MetricNet: return "phi";
    }
    return "?";
}

void Architecture::validate() const {
    auto positive = [](const std::vector<std::size_t>& w) {
        return !w.empty() && std::all_of(w.begin(), w.end(), [](std::size_t v) { return v >= 1; });
    };
    if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
    if (!positive(feature_widths)) throw ConfigError("feature widths must be non-empty and >= 1");
    if (!positive(metric_widths)) throw ConfigError("metric widths must be non-empty and >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
}

ParamSet::ParamSet(NetRole role, std::vector<ParamEntry> entries)
    : role_(role), entries_(std::move(entries)) {
    for (std::size_t i = 0; i < entries_.size(); ++i)
        for (std::size_t j = i + 1; j < entries_.size(); ++j)
            if (entries_[i].name == entries_[j].name)
                throw std::invalid_argument("duplicate parameter name " + entries_[i].name);
}

const Expr& ParamSet::get(std::string_view name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e.tensor;
    throw std::out_of_range("no parameter named " + std::string(name));
}

std::vector<Expr> ParamSet::tensors() const {
    std::vector<Expr> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.tensor);
    return out;
}

std::size_t ParamSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.value().size();
    return n;
}

ParamSet ParamSet::detach() const {
    std::vector<ParamEntry> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back({e.name, leaf(e.tensor.value())});
    return ParamSet(role_, std::move(out));
}

ParamSet ParamSet::replace(std::vector<Expr> tensors) const {
    if (tensors.size() != entries_.size()) throw std::invalid_argument("replace: entry count mismatch");
    std::vector<ParamEntry> out;
    out.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (tensors[i].shape() != entries_[i].tensor.shape()) {
            throw ShapeError("replace: shape mismatch for " + entries_[i].name);
        }
        out.push_back({entries_[i].name, std::move(tensors[i])});
    }
    return ParamSet(role_, std::move(out));
}

ParamSet ParamSet::with_values(const std::vector<Tensor>& values) const {
    std::vector<Expr> t;
    t.reserve(values.size());
    for (const auto& v : values) t.push_back(leaf(v));
    return replace(std::move(t));
}

namespace {

std::vector<ParamEntry> mlp_layout(std::string_view prefix, std::size_t in,
                                   const std::vector<std::size_t>& widths) {
    std::vector<ParamEntry> out;
    for (std::size_t l = 0; l < widths.size(); ++l) {
        const std::string base = std::string(prefix) + "." + std::to_string(l);
        out.push_back({base + ".weight", zeros({in, widths[l]})});
        out.push_back({base + ".bias", zeros({widths[l]})});
        in = widths[l];
    }
    return out;
}

Expr linear(const Expr& x, const Expr& w, const Expr& b) { return add(matmul(x, w), b); }

void require_role(const ParamSet& p, NetRole role) {
    if (p.role() != role) {
        throw std::invalid_argument("expected " + std::string(role_name(role)) + " parameters, got " +
                                    std::string(role_name(p.role())));
    }
}

}  // namespace

ParamSet make_param_layout(const Architecture& arch, NetRole role) {
    switch (role) {
    case NetRole::FeatureExtractor:
        return ParamSet(role, mlp_layout("feature", arch.input_dim, arch.feature_widths));
    case NetRole::TaskNet:
        return ParamSet(role, mlp_layout("task", arch.feature_dim(), {arch.num_classes}));
    case NetRole::MetricNet:
        return ParamSet(role, mlp_layout("metric", arch.feature_dim(), arch.metric_widths));
    }
    throw std::invalid_argument("unknown role");
}

NetParams init_params(const Architecture& arch, std::uint64_t seed) {
    arch.validate();
    std::mt19937_64 rng(seed);
    auto init = [&](NetRole role) {
        const ParamSet layout = make_param_layout(arch, role);
        std::vector<Tensor> values;
        for (const auto& e : layout.entries()) {
            Tensor t(e.tensor.shape());
            if (t.rank() == 2) {
                std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(t.shape[0])));
                for (auto& v : t.data) v = dist(rng);
            }
            values.push_back(std::move(t));
        }
        return layout.with_values(values);
    };
    NetParams p;
    p.psi = init(NetRole::FeatureExtractor);
    p.theta = init(NetRole::TaskNet);
    p.phi = init(NetRole::MetricNet);
    return p;
}

Expr feature_forward(const ParamSet& psi, const Expr& x) {
    require_role(psi, NetRole::FeatureExtractor);
    Expr h = x;
    for (std::size_t i = 0; i + 1 < psi.size(); i += 2) h = relu(linear(h, psi[i], psi[i + 1]));
    return h;
}

Expr task_forward(const ParamSet& theta, const Expr& z) {
    require_role(theta, NetRole::TaskNet);
    return linear(z, theta[0], theta[1]);
}

Expr metric_forward(const ParamSet& phi, const Expr& z) {
    require_role(phi, NetRole::MetricNet);
    Expr h = z;
    for (std::size_t i = 0; i + 1 < phi.size(); i += 2) {
        h = linear(h, phi[i], phi[i + 1]);
        if (i + 2 < phi.size()) h = relu(h);
    }
    const Expr norm = sqrt(sum(square(h), 1));
    return div(h, expand_last(norm, h.shape()));
}

ParamSet sgd_step(const ParamSet& params, const GradMap& grads, double lr) {
    std::vector<Expr> out;
    out.reserve(params.size());
    for (const auto& e : params.entries()) {
        if (!grads.contains(e.tensor)) throw std::invalid_argument("missing gradient for " + e.name);
        out.push_back(sub(e.tensor, scale(grads.at(e.tensor), lr)));
    }
    return params.replace(std::move(out));
}

namespace {

constexpr char kMagic[5] = {'M', 'A', 'S', 'F', '1'};

std::vector<std::int32_t> arch_dims(const Architecture& arch) {
    std::vector<std::int32_t> d;
    d.push_back(static_cast<std::int32_t>(arch.input_dim));
    d.push_back(static_cast<std::int32_t>(arch.feature_widths.size()));
    for (auto w : arch.feature_widths) d.push_back(static_cast<std::int32_t>(w));
    d.push_back(static_cast<std::int32_t>(arch.num_classes));
    d.push_back(static_cast<std::int32_t>(arch.metric_widths.size()));
    for (auto w : arch.metric_widths) d.push_back(static_cast<std::int32_t>(w));
    return d;
}

template <typename U>
void put_le(std::ostream& os, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(std::istream& is) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        const int c = is.get();
        if (c == std::char_traits<char>::eof()) throw IoError("truncated parameter file");
        v |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}

}  // namespace

void save_params(const ParamSet& params, const Architecture& arch, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(kMagic, sizeof(kMagic));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.role()));
    const auto dims = arch_dims(arch);
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    put_le<std::uint64_t>(os, params.parameter_count());
    for (const auto& e : params.entries())
        for (double v : e.tensor.value().data) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    if (!os) throw IoError("write failed for " + path.string());
}

ParamSet load_params(const std::filesystem::path& path, const Architecture& arch, NetRole role) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    char magic[5];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IoError(path.string() + ": bad magic");
    }
    const auto stored_role = static_cast<std::int32_t>(get_le<std::uint32_t>(is));
    if (stored_role != static_cast<std::int32_t>(role)) throw IoError(path.string() + ": role mismatch");
    const auto expected = arch_dims(arch);
    const auto n_dims = get_le<std::uint32_t>(is);
    std::vector<std::int32_t> dims(n_dims);
    for (auto& d : dims) d = static_cast<std::int32_t>(get_le<std::uint32_t>(is));
    if (dims != expected) throw IoError(path.string() + ": architecture mismatch");

    const ParamSet layout = make_param_layout(arch, role);
    const auto count = get_le<std::uint64_t>(is);
    if (count != layout.parameter_count()) throw IoError(path.string() + ": parameter count mismatch");
    std::vector<Tensor> values;
    for (const auto& e : layout.entries()) {
        Tensor t(e.tensor.shape());
        for (auto& v : t.data) v = std::bit_cast<double>(get_le<std::uint64_t>(is));
        values.push_back(std::move(t));
    }
    return layout.with_values(values);
}

}  // namespace masf
