#include "cwsam/params.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace cwsam {

std::string_view group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::patch_embed: return "patch_embed";
        case ParamGroup::pos_embed: return "pos_embed";
        case ParamGroup::blocks: return "blocks";
        case ParamGroup::adapters: return "adapters";
        case ParamGroup::neck: return "neck";
        case ParamGroup::tsi: return "tsi";
        case ParamGroup::decoder_transformer: return "decoder_transformer";
        case ParamGroup::decoder_sam_upscaler: return "decoder_sam_upscaler";
        case ParamGroup::decoder_new: return "decoder_new";
    }
    return "unknown";
}

bool is_trainable(ParamGroup g, FreezePolicy policy) {
    switch (g) {
        case ParamGroup::adapters:
        case ParamGroup::tsi:
        case ParamGroup::decoder_new: return true;
        case ParamGroup::pos_embed:
        case ParamGroup::neck:
        case ParamGroup::decoder_transformer:
        case ParamGroup::decoder_sam_upscaler: return policy == FreezePolicy::peft;
        case ParamGroup::patch_embed:
        case ParamGroup::blocks: return false;
    }
    return false;
}

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t hash_name(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

ag::Var ParameterStore::add(std::string name, ParamGroup group, Matrix init) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name " + name);
    const bool trainable = is_trainable(group, policy_);
    ag::Var v(std::move(init), trainable);
    index_.emplace(name, params_.size());
    params_.push_back(Parameter{std::move(name), group, v, trainable});
    return v;
}

namespace {

std::mt19937_64 stream_for(std::uint64_t seed, std::string_view name) {
    std::uint64_t s = seed ^ hash_name(name);
    return std::mt19937_64(splitmix64(s));
}

}  // namespace

ag::Var ParameterStore::uniform(std::string name, ParamGroup group, std::size_t rows, std::size_t cols,
                                double bound) {
    auto rng = stream_for(seed_, name);
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(rows, cols);
    for (double& v : m.values()) v = dist(rng);
    return add(std::move(name), group, std::move(m));
}

ag::Var ParameterStore::normal(std::string name, ParamGroup group, std::size_t rows, std::size_t cols,
                               double stddev) {
    auto rng = stream_for(seed_, name);
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (double& v : m.values()) v = dist(rng);
    return add(std::move(name), group, std::move(m));
}

ag::Var ParameterStore::zeros(std::string name, ParamGroup group, std::size_t rows, std::size_t cols) {
    return add(std::move(name), group, Matrix(rows, cols, 0.0));
}

ag::Var ParameterStore::ones(std::string name, ParamGroup group, std::size_t rows, std::size_t cols) {
    return add(std::move(name), group, Matrix(rows, cols, 1.0));
}

const Parameter* ParameterStore::find(std::string_view name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter* ParameterStore::find(std::string_view name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
}

std::size_t ParameterStore::total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.value().size();
    return n;
}

std::size_t ParameterStore::trainable_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_)
        if (p.trainable) n += p.var.value().size();
    return n;
}

FreezeMask ParameterStore::freeze_mask() const {
    FreezeMask mask;
    for (const auto& p : params_) mask.emplace(p.name, p.trainable);
    return mask;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

Linear make_linear(ParameterStore& store, const std::string& name, ParamGroup group, std::size_t in,
                   std::size_t out, bool with_bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l;
    l.weight = store.uniform(name + ".weight", group, out, in, bound);
    if (with_bias) l.bias = store.uniform(name + ".bias", group, 1, out, bound);
    return l;
}

Norm make_norm(ParameterStore& store, const std::string& name, ParamGroup group, std::size_t dim, double eps) {
    Norm n;
    n.gamma = store.ones(name + ".weight", group, 1, dim);
    n.beta = store.zeros(name + ".bias", group, 1, dim);
    n.eps = eps;
    return n;
}

}  // namespace cwsam
