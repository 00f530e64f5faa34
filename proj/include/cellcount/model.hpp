#pragma once

#include <array>
#include <map>

#include "cellcount/engine.hpp"

namespace cellcount {

enum class Arch { Fcrn, Cfcrn };

inline const char* arch_name(Arch a) { return a == Arch::Fcrn ? "fcrn" : "cfcrn"; }

inline Arch arch_from_name(const std::string& s) {
    if (s == "fcrn") return Arch::Fcrn;
    if (s == "cfcrn") return Arch::Cfcrn;
    throw UsageError("unknown architecture '" + s + "' (expected fcrn or cfcrn)");
}

enum class ParamGroup { Theta1, Theta2, Theta3, Theta4, Aux1, Aux2, Aux3 };

// kernel counts for the eight CONV layers, fixed by the architecture
inline constexpr std::array<int64_t, 8> kBlockKernels = {32, 64, 128, 512, 128, 64, 32, 1};

// All trainable tensors, partitioned into the four main-network groups
// (blocks 1-4, 5, 6, 7-8) and the three auxiliary-head groups.
class ParamStore {
public:
    Arch arch = Arch::Cfcrn;
    bool has_aux = false;
    int64_t in_channels = 3;

    struct Item {
        ParamGroup group;
        ParamTensor param;
    };
    std::vector<Item> items;

    ParamTensor& add(ParamGroup g, const std::string& id, Tensor4 init) {
        if (find(id) != nullptr)
            throw UsageError("ParamStore: duplicate parameter id '" + id + "'");
        items.push_back({g, ParamTensor(id, std::move(init))});
        return items.back().param;
    }

    ParamTensor* find(const std::string& id) {
        for (auto& it : items)
            if (it.param.id == id) return &it.param;
        return nullptr;
    }

    ParamTensor& at(const std::string& id) {
        ParamTensor* p = find(id);
        if (!p) throw UsageError("ParamStore: no parameter '" + id + "'");
        return *p;
    }

    std::vector<ParamTensor*> group(ParamGroup g) {
        std::vector<ParamTensor*> out;
        for (auto& it : items)
            if (it.group == g) out.push_back(&it.param);
        return out;
    }

    static bool is_aux_group(ParamGroup g) {
        return g == ParamGroup::Aux1 || g == ParamGroup::Aux2 || g == ParamGroup::Aux3;
    }

    std::vector<ParamTensor*> trainable(bool include_aux) {
        std::vector<ParamTensor*> out;
        for (auto& it : items)
            if (include_aux || !is_aux_group(it.group)) out.push_back(&it.param);
        return out;
    }

    void zero_grads() {
        for (auto& it : items) it.param.value.zero_grad();
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& it : items) n += it.param.value.value().numel();
        return n;
    }
};

namespace detail {

inline int64_t block_in_channels(Arch arch, int block, int64_t c_in) {
    // blocks 5-7 of the concatenated variant also see the skip channels
    switch (block) {
        case 1: return c_in;
        case 2: return 32;
        case 3: return 64;
        case 4: return 128;
        case 5: return arch == Arch::Cfcrn ? 512 + 128 : 512;
        case 6: return arch == Arch::Cfcrn ? 128 + 64 : 128;
        case 7: return arch == Arch::Cfcrn ? 64 + 32 : 64;
        case 8: return 32;
    }
    throw UsageError("block_in_channels: bad block index");
}

} // namespace detail

// Every CONV kernel orthogonally initialized, biases and momenta zero.
// The main-network draw sequence does not depend on with_aux, so paired
// aux/no-aux runs start from identical weights.
inline ParamStore build_params(Arch arch, uint64_t seed, bool with_aux = true,
                               int64_t in_channels = 3) {
    if (arch == Arch::Fcrn) with_aux = false;
    ParamStore ps;
    ps.arch = arch;
    ps.has_aux = with_aux;
    ps.in_channels = in_channels;
    Rng rng(seed);

    const std::array<ParamGroup, 8> block_group = {
        ParamGroup::Theta1, ParamGroup::Theta1, ParamGroup::Theta1, ParamGroup::Theta1,
        ParamGroup::Theta2, ParamGroup::Theta3, ParamGroup::Theta4, ParamGroup::Theta4};

    for (int b = 1; b <= 8; ++b) {
        const int64_t k = b == 8 ? 1 : 3;
        const int64_t cin = detail::block_in_channels(arch, b, in_channels);
        const int64_t cout = kBlockKernels[static_cast<size_t>(b - 1)];
        const std::string name = "block" + std::to_string(b);
        ps.add(block_group[static_cast<size_t>(b - 1)], name + ".w",
               orthogonal_init({cout, cin, k, k}, rng));
        ps.add(block_group[static_cast<size_t>(b - 1)], name + ".b", Tensor4({1, cout, 1, 1}));
    }

    if (with_aux) {
        const std::array<int64_t, 3> tap_channels = {512, 128, 64};
        const std::array<ParamGroup, 3> gs = {ParamGroup::Aux1, ParamGroup::Aux2, ParamGroup::Aux3};
        for (int k = 0; k < 3; ++k) {
            const std::string name = "aux" + std::to_string(k + 1);
            ps.add(gs[static_cast<size_t>(k)], name + ".conv1.w",
                   orthogonal_init({32, tap_channels[static_cast<size_t>(k)], 3, 3}, rng));
            ps.add(gs[static_cast<size_t>(k)], name + ".conv1.b", Tensor4({1, 32, 1, 1}));
            ps.add(gs[static_cast<size_t>(k)], name + ".conv2.w",
                   orthogonal_init({1, 32, 1, 1}, rng));
            ps.add(gs[static_cast<size_t>(k)], name + ".conv2.b", Tensor4({1, 1, 1, 1}));
        }
    }
    return ps;
}

struct ForwardOutput {
    Var density;              // (B,1,H,W)
    std::array<Var, 3> aux;   // 1/8, 1/4, 1/2 resolution; valid only with aux heads
    std::array<Var, 3> taps;  // feature maps feeding the aux heads

    bool has_aux() const { return aux[0].valid(); }
};

namespace detail {

inline void check_input(const Var& x, const ParamStore& ps) {
    const Shape4 s = x.shape();
    if (s.c != ps.in_channels)
        throw ShapeError("forward: input has " + std::to_string(s.c) +
                         " channels, model expects " + std::to_string(ps.in_channels));
    if (s.h % 8 != 0 || s.w % 8 != 0)
        throw ShapeError("forward: spatial dims " + s.str() + " must be divisible by 8");
}

inline Var conv_block(const Var& x, ParamStore& ps, const std::string& name) {
    return relu(conv2d_same(x, ps.at(name + ".w").value, ps.at(name + ".b").value));
}

inline Var aux_head(const Var& tap, ParamStore& ps, const std::string& name) {
    Var h = relu(conv2d_same(tap, ps.at(name + ".conv1.w").value, ps.at(name + ".conv1.b").value));
    return relu(conv2d_same(h, ps.at(name + ".conv2.w").value, ps.at(name + ".conv2.b").value));
}

} // namespace detail

// Eight-block ladder with resolution-matched shortcut concatenations feeding
// the inputs of blocks 5-7, and optional auxiliary heads on the tapped
// feature maps of blocks 4-6.
inline ForwardOutput cfcrn_forward(const Var& x, ParamStore& ps, bool with_aux) {
    if (ps.arch != Arch::Cfcrn) throw UsageError("cfcrn_forward: store built for fcrn");
    if (with_aux && !ps.has_aux)
        throw UsageError("cfcrn_forward: store has no auxiliary heads");
    detail::check_input(x, ps);

    Var p1 = maxpool2(detail::conv_block(x, ps, "block1"));   // 32ch, 1/2
    Var p2 = maxpool2(detail::conv_block(p1, ps, "block2"));  // 64ch, 1/4
    Var p3 = maxpool2(detail::conv_block(p2, ps, "block3"));  // 128ch, 1/8
    Var phi1 = detail::conv_block(p3, ps, "block4");          // 512ch, 1/8

    Var phi2 = detail::conv_block(upsample_bilinear2(concat_channels(phi1, p3)), ps, "block5");
    Var phi3 = detail::conv_block(upsample_bilinear2(concat_channels(phi2, p2)), ps, "block6");
    Var a7 = detail::conv_block(upsample_bilinear2(concat_channels(phi3, p1)), ps, "block7");

    ForwardOutput out;
    out.density = detail::conv_block(a7, ps, "block8");
    out.taps = {phi1, phi2, phi3};
    if (with_aux)
        for (int k = 0; k < 3; ++k)
            out.aux[static_cast<size_t>(k)] =
                detail::aux_head(out.taps[static_cast<size_t>(k)], ps, "aux" + std::to_string(k + 1));
    return out;
}

// The plain hierarchical ladder: identical blocks, no shortcut connections,
// no auxiliary heads.
inline Var fcrn_forward(const Var& x, ParamStore& ps) {
    if (ps.arch != Arch::Fcrn) throw UsageError("fcrn_forward: store built for cfcrn");
    detail::check_input(x, ps);

    Var p1 = maxpool2(detail::conv_block(x, ps, "block1"));
    Var p2 = maxpool2(detail::conv_block(p1, ps, "block2"));
    Var p3 = maxpool2(detail::conv_block(p2, ps, "block3"));
    Var phi1 = detail::conv_block(p3, ps, "block4");

    Var phi2 = detail::conv_block(upsample_bilinear2(phi1), ps, "block5");
    Var phi3 = detail::conv_block(upsample_bilinear2(phi2), ps, "block6");
    Var a7 = detail::conv_block(upsample_bilinear2(phi3), ps, "block7");
    return detail::conv_block(a7, ps, "block8");
}

// density map for either architecture, aux heads off
inline Var model_forward(const Var& x, ParamStore& ps) {
    return ps.arch == Arch::Fcrn ? fcrn_forward(x, ps) : cfcrn_forward(x, ps, false).density;
}

inline void sgd_momentum_step(ParamStore& store, float lr, float beta, float lambda,
                              bool include_aux = true, UpdateRule rule = UpdateRule::Descent) {
    auto params = store.trainable(include_aux);
    sgd_momentum_step(params, lr, beta, lambda, rule);
}

} // namespace cellcount
