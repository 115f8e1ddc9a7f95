#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cwsam/autograd.hpp"
#include "cwsam/config.hpp"

namespace cwsam {

// Role of a parameter; the freeze policy maps roles to trainable flags.
enum class ParamGroup {
    patch_embed,
    pos_embed,
    blocks,
    adapters,
    neck,
    tsi,
    decoder_transformer,
    decoder_sam_upscaler,
    decoder_new,
};

std::string_view group_name(ParamGroup g);
bool is_trainable(ParamGroup g, FreezePolicy policy);

struct Parameter {
    std::string name;
    ParamGroup group;
    ag::Var var;
    bool trainable;
};

// Name -> trainable flag for every parameter.
using FreezeMask = std::map<std::string, bool>;

// Owns every parameter of a model in creation order.
class ParameterStore {
public:
    ParameterStore(FreezePolicy policy, std::uint64_t seed) : policy_(policy), seed_(seed) {}

    ParameterStore(const ParameterStore&) = delete;
    ParameterStore& operator=(const ParameterStore&) = delete;
    ParameterStore(ParameterStore&&) = default;
    ParameterStore& operator=(ParameterStore&&) = default;

    ag::Var add(std::string name, ParamGroup group, Matrix init);

    // Initializers draw from a stream keyed by (seed, name), so a parameter's
    // initial value does not depend on which other parameters exist.
    ag::Var uniform(std::string name, ParamGroup group, std::size_t rows, std::size_t cols, double bound);
    ag::Var normal(std::string name, ParamGroup group, std::size_t rows, std::size_t cols, double stddev);
    ag::Var zeros(std::string name, ParamGroup group, std::size_t rows, std::size_t cols);
    ag::Var ones(std::string name, ParamGroup group, std::size_t rows, std::size_t cols);

    const std::vector<Parameter>& all() const { return params_; }
    std::vector<Parameter>& all() { return params_; }
    const Parameter* find(std::string_view name) const;
    Parameter* find(std::string_view name);

    std::size_t total_elements() const;
    std::size_t trainable_elements() const;
    FreezeMask freeze_mask() const;
    void zero_grad();

private:
    FreezePolicy policy_;
    std::uint64_t seed_;
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

// Dense layer: weight [out, in], bias [1, out] (bias may be undefined).
struct Linear {
    ag::Var weight;
    ag::Var bias;

    ag::Var operator()(const ag::Var& x) const { return ag::linear(x, weight, bias); }
};

// PyTorch-style default: U(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
Linear make_linear(ParameterStore& store, const std::string& name, ParamGroup group, std::size_t in,
                   std::size_t out, bool with_bias = true);

struct Norm {
    ag::Var gamma;
    ag::Var beta;
    double eps;

    ag::Var operator()(const ag::Var& x) const { return ag::layer_norm(x, gamma, beta, eps); }
};

Norm make_norm(ParameterStore& store, const std::string& name, ParamGroup group, std::size_t dim, double eps);

std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t hash_name(std::string_view s);

}  // namespace cwsam
